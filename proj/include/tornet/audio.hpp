#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tornet/rng.hpp"
#include "tornet/tensor.hpp"

namespace tornet {

inline constexpr int kSampleRate = 16000;

/// Mono clip with samples in [-1, 1].
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = kSampleRate;
  std::string source_path;
};

/// Parses a RIFF/WAVE byte buffer (PCM16, PCM24 or float32, any channel
/// count), mixes down to mono and resamples to 16 kHz. Throws FormatError.
AudioClip decode_wav(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
AudioClip read_wav(const std::filesystem::path& path);

/// 16-bit PCM mono WAV bytes; samples are clamped to [-1, 1].
std::vector<std::uint8_t> encode_wav_pcm16(std::span<const float> samples, int sample_rate = kSampleRate);
void write_wav_pcm16(const std::filesystem::path& path, std::span<const float> samples,
                     int sample_rate = kSampleRate);

/// Hann-windowed sinc resampler with an anti-aliasing cutoff when downsampling.
std::vector<float> resample(std::span<const float> samples, int from_rate, int to_rate);

/// Tiles short clips and truncates long ones to exactly target_s seconds.
AudioClip standardize_length(const AudioClip& clip, double target_s = 10.0);

/// Triangular filters on the HTK mel scale over the one-sided power spectrum.
class MelFilterbank {
 public:
  MelFilterbank(Index n_mels = 40, Index n_fft = 1024, int sample_rate = kSampleRate, double f_min = 0.0,
                double f_max = 8000.0);

  static double hz_to_mel(double hz);
  static double mel_to_hz(double mel);

  /// [n_mels, n_fft/2 + 1]
  const Eigen::MatrixXd& weights() const { return weights_; }
  /// Peak frequency of each filter in Hz.
  const Eigen::VectorXd& center_frequencies() const { return centers_; }
  Index n_mels() const { return weights_.rows(); }
  Index n_bins() const { return weights_.cols(); }

 private:
  Eigen::MatrixXd weights_;
  Eigen::VectorXd centers_;
};

struct FeatureOptions {
  double target_seconds = 10.0;
  Index n_fft = 1024;
  Index hop = 256;
  Index n_mels = 40;
  double f_min = 0.0;
  double f_max = 8000.0;
  double log_floor = 1e-6;
  Index delta_window = 2;
  Index n_frames = 512;
  /// Random crop offset instead of the first n_frames; needs an Rng in assemble().
  bool random_crop = false;
};

/// Periodic Hann window of length n.
Eigen::VectorXd hann_window(Index n);

/// Linear mel energies [n_mels, frames]; frames start at sample 0 (no centering).
Eigen::MatrixXd mel_power(std::span<const float> samples, const MelFilterbank& bank, const FeatureOptions& options = {});

/// log(mel_power + log_floor)
Eigen::MatrixXd log_mel(const AudioClip& clip, const MelFilterbank& bank, const FeatureOptions& options = {});

Index frame_count(Index n_samples, Index n_fft, Index hop);

/// Regression deltas along time with edge replication. Requires T > 2N.
Eigen::MatrixXd deltas(const Eigen::MatrixXd& x, Index window = 2);

/// Full pipeline to a [3, n_mels, n_frames] tensor: log-mel, delta, delta-delta.
TensorF assemble(const AudioClip& clip, const MelFilterbank& bank, const FeatureOptions& options = {},
                 Rng* crop_rng = nullptr);

}  // namespace tornet
