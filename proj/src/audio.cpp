#include "tornet/audio.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

#include "tornet/errors.hpp"

namespace tornet {

namespace {

struct ByteReader {
  std::span<const std::uint8_t> bytes;
  std::string source;

  std::uint32_t u32(std::size_t at) const {
    need(at, 4);
    return static_cast<std::uint32_t>(bytes[at]) | static_cast<std::uint32_t>(bytes[at + 1]) << 8 |
           static_cast<std::uint32_t>(bytes[at + 2]) << 16 | static_cast<std::uint32_t>(bytes[at + 3]) << 24;
  }
  std::uint16_t u16(std::size_t at) const {
    need(at, 2);
    return static_cast<std::uint16_t>(bytes[at] | bytes[at + 1] << 8);
  }
  std::string tag(std::size_t at) const {
    need(at, 4);
    return std::string(reinterpret_cast<const char*>(bytes.data() + at), 4);
  }
  void need(std::size_t at, std::size_t n) const {
    if (at + n > bytes.size()) throw FormatError(source + ": truncated WAV header");
  }
};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

}  // namespace

AudioClip decode_wav(std::span<const std::uint8_t> bytes, const std::string& source) {
  const ByteReader r{bytes, source};
  if (bytes.size() < 12 || r.tag(0) != "RIFF" || r.tag(8) != "WAVE") {
    throw FormatError(source + ": not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::span<const std::uint8_t> data;
  bool have_data = false;
  std::size_t at = 12;
  while (at + 8 <= bytes.size()) {
    const std::string id = r.tag(at);
    const std::uint32_t size = r.u32(at + 4);
    const std::size_t body = at + 8;
    if (id == "fmt ") {
      r.need(body, 16);
      format = r.u16(body);
      channels = r.u16(body + 2);
      rate = r.u32(body + 4);
      bits = r.u16(body + 14);
      if (format == 0xFFFE) {
        r.need(body, 26);
        format = r.u16(body + 24);  // first two bytes of the sub-format GUID
      }
      have_fmt = true;
    } else if (id == "data") {
      if (size > bytes.size() - body) throw FormatError(source + ": truncated data chunk");
      data = bytes.subspan(body, size);
      have_data = true;
    }
    at = body + size + (size & 1);
  }
  if (!have_fmt) throw FormatError(source + ": missing fmt chunk");
  if (!have_data) throw FormatError(source + ": missing data chunk");
  if (channels == 0 || rate == 0) throw FormatError(source + ": invalid channel count or sample rate");
  const bool pcm = format == 1 && (bits == 16 || bits == 24);
  const bool flt = format == 3 && bits == 32;
  if (!pcm && !flt) {
    throw FormatError(source + ": unsupported encoding (format " + std::to_string(format) + ", " +
                      std::to_string(bits) + " bits); expected PCM16, PCM24 or float32");
  }
  const std::size_t width = bits / 8;
  const std::size_t frames = data.size() / (width * channels);
  std::vector<float> mono(frames, 0.0f);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::uint8_t* p = data.data() + (i * channels + c) * width;
      if (flt) {
        float v;
        std::memcpy(&v, p, 4);
        acc += v;
      } else if (bits == 16) {
        acc += static_cast<std::int16_t>(p[0] | p[1] << 8) / 32768.0;
      } else {
        std::int32_t v = p[0] | p[1] << 8 | p[2] << 16;
        if (v & 0x800000) v -= 0x1000000;
        acc += v / 8388608.0;
      }
    }
    mono[i] = static_cast<float>(acc / channels);
  }
  AudioClip clip;
  clip.source_path = source;
  clip.samples = static_cast<int>(rate) == kSampleRate ? std::move(mono) : resample(mono, static_cast<int>(rate), kSampleRate);
  clip.sample_rate = kSampleRate;
  return clip;
}

AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path.string());
}

std::vector<std::uint8_t> encode_wav_pcm16(std::span<const float> samples, int sample_rate) {
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(sample_rate));
  put_u32(out, static_cast<std::uint32_t>(sample_rate * 2));
  put_u16(out, 2);
  put_u16(out, 16);
  put_tag(out, "data");
  put_u32(out, data_bytes);
  for (float s : samples) {
    const double v = std::clamp(static_cast<double>(s), -1.0, 1.0);
    const long q = std::clamp(std::lround(v * 32768.0), -32768L, 32767L);
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

void write_wav_pcm16(const std::filesystem::path& path, std::span<const float> samples, int sample_rate) {
  const auto bytes = encode_wav_pcm16(samples, sample_rate);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<float> resample(std::span<const float> samples, int from_rate, int to_rate) {
  if (from_rate <= 0 || to_rate <= 0) throw ConfigError("resample: rates must be positive");
  if (from_rate == to_rate || samples.empty()) return {samples.begin(), samples.end()};
  constexpr int kZeroCrossings = 16;
  const double ratio = static_cast<double>(to_rate) / from_rate;
  const double cutoff = std::min(1.0, ratio);
  const double half_width = kZeroCrossings / cutoff;  // in input samples
  const auto n_out = static_cast<std::size_t>(std::floor(samples.size() * ratio));
  std::vector<float> out(n_out);
  const auto n_in = static_cast<std::ptrdiff_t>(samples.size());
  for (std::size_t j = 0; j < n_out; ++j) {
    const double center = j / ratio;
    const auto lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(center - half_width)));
    const auto hi = std::min<std::ptrdiff_t>(n_in - 1, static_cast<std::ptrdiff_t>(std::floor(center + half_width)));
    double acc = 0;
    for (std::ptrdiff_t i = lo; i <= hi; ++i) {
      const double d = (static_cast<double>(i) - center) * cutoff;
      const double sinc = d == 0.0 ? 1.0 : std::sin(std::numbers::pi * d) / (std::numbers::pi * d);
      const double window = 0.5 + 0.5 * std::cos(std::numbers::pi * d / kZeroCrossings);
      acc += samples[static_cast<std::size_t>(i)] * sinc * window;
    }
    out[j] = static_cast<float>(acc * cutoff);
  }
  return out;
}

AudioClip standardize_length(const AudioClip& clip, double target_s) {
  if (clip.samples.empty()) throw DataError("standardize_length: empty clip " + clip.source_path);
  const auto target = static_cast<std::size_t>(std::llround(target_s * clip.sample_rate));
  AudioClip out;
  out.sample_rate = clip.sample_rate;
  out.source_path = clip.source_path;
  out.samples.reserve(target);
  while (out.samples.size() < target) {
    const std::size_t take = std::min(target - out.samples.size(), clip.samples.size());
    out.samples.insert(out.samples.end(), clip.samples.begin(), clip.samples.begin() + static_cast<std::ptrdiff_t>(take));
  }
  return out;
}

double MelFilterbank::hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double MelFilterbank::mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank::MelFilterbank(Index n_mels, Index n_fft, int sample_rate, double f_min, double f_max) {
  if (n_mels < 1 || n_fft < 2) throw ConfigError("mel filterbank: need n_mels >= 1 and n_fft >= 2");
  if (!(f_min >= 0 && f_min < f_max && f_max <= sample_rate / 2.0)) {
    throw ConfigError("mel filterbank: need 0 <= f_min < f_max <= sample_rate/2");
  }
  const Index bins = n_fft / 2 + 1;
  const Eigen::VectorXd edges_mel = Eigen::VectorXd::LinSpaced(n_mels + 2, hz_to_mel(f_min), hz_to_mel(f_max));
  const Eigen::VectorXd edges = edges_mel.unaryExpr([](double m) { return mel_to_hz(m); });
  const Eigen::VectorXd bin_hz =
      Eigen::VectorXd::LinSpaced(bins, 0.0, static_cast<double>(bins - 1)) * (static_cast<double>(sample_rate) / n_fft);
  weights_ = Eigen::MatrixXd::Zero(n_mels, bins);
  centers_ = edges.segment(1, n_mels);
  for (Index m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (Index k = 0; k < bins; ++k) {
      const double f = bin_hz[k];
      const double rise = (f - lo) / (mid - lo);
      const double fall = (hi - f) / (hi - mid);
      weights_(m, k) = std::max(0.0, std::min(rise, fall));
    }
    if (weights_.row(m).sum() <= 0) {
      throw ConfigError("mel filterbank: filter " + std::to_string(m) + " covers no FFT bin; reduce n_mels");
    }
  }
}

Eigen::VectorXd hann_window(Index n) {
  return Eigen::VectorXd::LinSpaced(n, 0.0, static_cast<double>(n - 1))
      .unaryExpr([n](double i) { return 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / static_cast<double>(n)); });
}

Index frame_count(Index n_samples, Index n_fft, Index hop) {
  return n_samples < n_fft ? 0 : 1 + (n_samples - n_fft) / hop;
}

Eigen::MatrixXd mel_power(std::span<const float> samples, const MelFilterbank& bank, const FeatureOptions& options) {
  const Index n_fft = options.n_fft;
  if (bank.n_bins() != n_fft / 2 + 1) throw ConfigError("mel_power: filterbank does not match n_fft");
  const Index frames = frame_count(static_cast<Index>(samples.size()), n_fft, options.hop);
  if (frames < 1) throw DataError("mel_power: clip shorter than one frame");
  const Eigen::VectorXd window = hann_window(n_fft);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  Eigen::MatrixXd power(bank.n_bins(), frames);
  Eigen::VectorXd frame(n_fft);
  Eigen::VectorXcd spectrum(bank.n_bins());
  for (Index j = 0; j < frames; ++j) {
    const float* src = samples.data() + j * options.hop;
    for (Index i = 0; i < n_fft; ++i) frame[i] = static_cast<double>(src[i]) * window[i];
    fft.fwd(spectrum, frame);
    power.col(j) = spectrum.cwiseAbs2();
  }
  return bank.weights() * power;
}

Eigen::MatrixXd log_mel(const AudioClip& clip, const MelFilterbank& bank, const FeatureOptions& options) {
  return (mel_power(clip.samples, bank, options).array() + options.log_floor).log().matrix();
}

Eigen::MatrixXd deltas(const Eigen::MatrixXd& x, Index window) {
  const Index T = x.cols();
  if (window < 1) throw ConfigError("deltas: window must be >= 1");
  if (T <= 2 * window) {
    throw DataError("deltas: need more than " + std::to_string(2 * window) + " frames, got " + std::to_string(T));
  }
  double denom = 0;
  for (Index n = 1; n <= window; ++n) denom += 2.0 * static_cast<double>(n * n);
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(x.rows(), T);
  for (Index t = 0; t < T; ++t) {
    for (Index n = 1; n <= window; ++n) {
      const Index ahead = std::min(t + n, T - 1), behind = std::max<Index>(t - n, 0);
      d.col(t) += static_cast<double>(n) * (x.col(ahead) - x.col(behind));
    }
  }
  return d / denom;
}

TensorF assemble(const AudioClip& clip, const MelFilterbank& bank, const FeatureOptions& options, Rng* crop_rng) {
  if (bank.n_mels() != options.n_mels) throw ConfigError("assemble: filterbank has the wrong number of mel bands");
  const AudioClip fixed = standardize_length(clip, options.target_seconds);
  const Eigen::MatrixXd full = log_mel(fixed, bank, options);
  if (full.cols() < options.n_frames) {
    throw ConfigError("assemble: " + std::to_string(full.cols()) + " frames available, " +
                      std::to_string(options.n_frames) + " requested");
  }
  Index start = 0;
  if (options.random_crop) {
    if (!crop_rng) throw ConfigError("assemble: random crop needs an RNG");
    start = static_cast<Index>(crop_rng->below(static_cast<std::uint64_t>(full.cols() - options.n_frames + 1)));
  }
  const Eigen::MatrixXd mel = full.middleCols(start, options.n_frames);
  const Eigen::MatrixXd d1 = deltas(mel, options.delta_window);
  const Eigen::MatrixXd d2 = deltas(d1, options.delta_window);
  TensorF out(Shape{3, options.n_mels, options.n_frames});
  using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Index plane = options.n_mels * options.n_frames;
  Eigen::Map<RowMajor>(out.data(), options.n_mels, options.n_frames) = mel.cast<float>();
  Eigen::Map<RowMajor>(out.data() + plane, options.n_mels, options.n_frames) = d1.cast<float>();
  Eigen::Map<RowMajor>(out.data() + 2 * plane, options.n_mels, options.n_frames) = d2.cast<float>();
  return out;
}

}  // namespace tornet
