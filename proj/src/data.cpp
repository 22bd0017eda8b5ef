#include "tornet/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <sstream>
#include <thread>

#include "tornet/checkpoint.hpp"
#include "tornet/errors.hpp"
#include "tornet/rng.hpp"

namespace tornet {

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::devel: return "devel";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "devel") return Split::devel;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + name + "' (expected train, devel or test)");
}

std::vector<ManifestEntry> Manifest::split(Split s) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == s) out.push_back(e);
  return out;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir, const std::string& source) {
  Manifest m;
  m.source = source;
  std::string line;
  int lineno = 0;
  bool header = false;
  std::map<std::string, int> seen;
  auto fail = [&](const std::string& msg) { throw DataError(source + ":" + std::to_string(lineno) + ": " + msg); };
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    if (!header) {
      if (cells != std::vector<std::string>{"filename", "label", "split"}) {
        fail("expected header 'filename,label,split', got '" + trim(line) + "'");
      }
      header = true;
      continue;
    }
    if (cells.size() != 3) fail("expected 3 fields, got " + std::to_string(cells.size()));
    ManifestEntry e;
    e.filename = cells[0];
    e.line = lineno;
    if (e.filename.empty()) fail("empty filename");
    if (cells[1] == "negative") {
      e.label = 0;
    } else if (cells[1] == "positive") {
      e.label = 1;
    } else {
      fail("unknown label '" + cells[1] + "' (expected negative or positive)");
    }
    try {
      e.split = parse_split(cells[2]);
    } catch (const ConfigError&) {
      fail("unknown split '" + cells[2] + "' (expected train, devel or test)");
    }
    const std::filesystem::path p(e.filename);
    e.path = (p.is_absolute() ? p : base_dir / p).lexically_normal();
    const auto [it, fresh] = seen.emplace(e.path.string(), lineno);
    if (!fresh) {
      fail("duplicate path '" + e.filename + "' (lines " + std::to_string(it->second) + " and " +
           std::to_string(lineno) + ")");
    }
    m.entries.push_back(std::move(e));
  }
  if (!header) throw DataError(source + ": empty manifest (missing header)");
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path(), path.string());
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "filename,label,split\n";
  for (const auto& e : manifest.entries) {
    out << e.filename << ',' << class_names().at(static_cast<std::size_t>(e.label)) << ',' << split_name(e.split)
        << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<float> synth_clip(const SynthSpec& spec, int label, std::uint64_t index) {
  if (label != 0 && label != 1) throw ConfigError("synth_clip: label must be 0 or 1");
  Rng rng = Rng(spec.seed).stream("synth").stream(static_cast<std::uint64_t>(label)).stream(index);
  const double seconds = rng.uniform(spec.min_seconds, spec.max_seconds);
  const auto n = static_cast<std::size_t>(std::llround(seconds * kSampleRate));

  // band-limited carrier: sum of unit phasors at random in-band frequencies
  std::vector<std::complex<double>> phase(static_cast<std::size_t>(spec.partials)), step(phase.size());
  for (std::size_t k = 0; k < phase.size(); ++k) {
    const double f = rng.uniform(spec.band_lo[label], spec.band_hi[label]);
    phase[k] = std::polar(1.0, rng.uniform(0.0, 2.0 * std::numbers::pi));
    step[k] = std::polar(1.0, 2.0 * std::numbers::pi * f / kSampleRate);
  }

  // Hann-shaped bursts at the class rate with jittered onsets
  const double period = kSampleRate / spec.burst_rate[label];
  const double burst = 0.4 * period;
  std::vector<double> envelope(n, 0.0);
  for (double start = rng.uniform(0.0, period); start < static_cast<double>(n); start += period) {
    const double onset = start + rng.uniform(-0.15, 0.15) * period;
    const auto lo = static_cast<std::size_t>(std::max(0.0, std::ceil(onset)));
    const auto hi = static_cast<std::size_t>(std::min(static_cast<double>(n), onset + burst));
    for (std::size_t i = lo; i < hi; ++i) {
      envelope[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (static_cast<double>(i) - onset) / burst);
    }
  }

  std::vector<double> signal(n);
  double power = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double carrier = 0;
    for (std::size_t k = 0; k < phase.size(); ++k) {
      carrier += phase[k].imag();
      phase[k] *= step[k];
    }
    signal[i] = envelope[i] * carrier;
    power += signal[i] * signal[i];
  }
  power /= static_cast<double>(n);
  const double snr = spec.snr_db + rng.uniform(-spec.snr_jitter_db, spec.snr_jitter_db);
  const double noise_std = std::sqrt(power / std::pow(10.0, snr / 10.0));
  double peak = 0;
  for (auto& s : signal) {
    s += noise_std * rng.normal();
    peak = std::max(peak, std::abs(s));
  }
  std::vector<float> out(n);
  const double gain = peak > 0 ? 0.7 / peak : 0.0;
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(signal[i] * gain);
  return out;
}

Manifest generate_synth(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  if (spec.n_per_class_per_split < 1) throw ConfigError("synth: n must be at least 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  Manifest m;
  m.source = out_dir / "manifest.csv";
  const Split splits[] = {Split::train, Split::devel, Split::test};
  for (std::size_t s = 0; s < 3; ++s) {
    std::filesystem::create_directories(out_dir / split_name(splits[s]), ec);
    if (ec) throw DataError("cannot create " + (out_dir / split_name(splits[s])).string() + ": " + ec.message());
    for (int label = 0; label < 2; ++label) {
      for (int i = 0; i < spec.n_per_class_per_split; ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "%s/%s_%04d.wav", split_name(splits[s]).c_str(),
                      class_names()[static_cast<std::size_t>(label)].c_str(), i);
        const auto index = static_cast<std::uint64_t>(s * static_cast<std::size_t>(spec.n_per_class_per_split) +
                                                      static_cast<std::size_t>(i));
        ManifestEntry e;
        e.filename = name;
        e.path = out_dir / name;
        e.label = label;
        e.split = splits[s];
        write_wav_pcm16(e.path, synth_clip(spec, label, index));
        m.entries.push_back(std::move(e));
      }
    }
  }
  write_manifest(m.source, m);
  return m;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, bool shuffle,
                                                    std::uint64_t seed, int epoch) {
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    Rng rng = Rng(seed).stream("shuffle").stream(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < n; at += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, at + batch_size)));
  }
  return batches;
}

TensorF FeatureSet::batch(const std::vector<std::size_t>& idx) const {
  if (idx.empty()) throw ConfigError("empty batch");
  const TensorF& first = features.at(idx.front());
  Shape shape{static_cast<Index>(idx.size())};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  TensorF out(shape);
  const Index per = first.size();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const TensorF& f = features.at(idx[b]);
    if (f.shape() != first.shape()) throw std::logic_error("feature shapes differ within a split");
    std::copy(f.data(), f.data() + per, out.data() + static_cast<Index>(b) * per);
  }
  return out;
}

std::vector<int> FeatureSet::batch_labels(const std::vector<std::size_t>& idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(labels.at(i));
  return out;
}

namespace {

std::string options_tag(const FeatureOptions& o) {
  nlohmann::ordered_json j;
  j["v"] = 1;
  j["target_seconds"] = o.target_seconds;
  j["n_fft"] = o.n_fft;
  j["hop"] = o.hop;
  j["n_mels"] = o.n_mels;
  j["f_min"] = o.f_min;
  j["f_max"] = o.f_max;
  j["log_floor"] = o.log_floor;
  j["delta_window"] = o.delta_window;
  j["n_frames"] = o.n_frames;
  return j.dump();
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TensorF featurize(const ManifestEntry& e, std::size_t index, const MelFilterbank& bank, const ExtractOptions& options) {
  const auto bytes = read_bytes(e.path);
  if (options.features.random_crop) {
    Rng crop = Rng(options.crop_seed).stream("crop").stream(static_cast<std::uint64_t>(index));
    return assemble(decode_wav(bytes, e.path.string()), bank, options.features, &crop);
  }
  if (!options.cache_dir) return assemble(decode_wav(bytes, e.path.string()), bank, options.features);
  const std::string_view view(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  const std::uint64_t key = fnv1a64(options_tag(options.features), fnv1a64(view));
  char name[32];
  std::snprintf(name, sizeof name, "%016llx.feat", static_cast<unsigned long long>(key));
  const auto cached = *options.cache_dir / name;
  const Shape expect{3, options.features.n_mels, options.features.n_frames};
  if (std::filesystem::exists(cached)) {
    try {
      const Checkpoint blob = load_checkpoint(cached);
      if (const TensorRecord* rec = blob.find("features"); rec && rec->shape == expect && rec->dtype == DType::f32) {
        return rec->to<float>();
      }
    } catch (const DataError&) {
      // unreadable cache entries are recomputed and overwritten
    }
  }
  TensorF feats = assemble(decode_wav(bytes, e.path.string()), bank, options.features);
  Checkpoint blob;
  blob.metadata = nlohmann::ordered_json{{"kind", "features"}, {"source", e.filename}}.dump();
  blob.tensors.push_back(TensorRecord::from("features", feats));
  std::error_code ec;
  std::filesystem::create_directories(*options.cache_dir, ec);
  if (!ec) {
    try {
      save_checkpoint(cached, blob);
    } catch (const DataError&) {
      // a read-only cache only costs recomputation
    }
  }
  return feats;
}

}  // namespace

FeatureSet extract_features(const std::vector<ManifestEntry>& entries, const ExtractOptions& options) {
  const FeatureOptions& fo = options.features;
  const MelFilterbank bank(fo.n_mels, fo.n_fft, kSampleRate, fo.f_min, fo.f_max);
  FeatureSet set;
  set.features.resize(entries.size());
  set.labels.resize(entries.size());
  set.names.resize(entries.size());
  std::vector<std::exception_ptr> errors(entries.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < entries.size(); i = next++) {
      try {
        set.features[i] = featurize(entries[i], i, bank, options);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(entries.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    set.labels[i] = entries[i].label;
    set.names[i] = entries[i].filename;
  }
  return set;
}

}  // namespace tornet
