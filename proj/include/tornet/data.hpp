#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "tornet/audio.hpp"
#include "tornet/tensor.hpp"

namespace tornet {

enum class Split { train, devel, test };

std::string split_name(Split s);
/// Throws ConfigError for anything but train/devel/test.
Split parse_split(const std::string& name);

inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names{"negative", "positive"};
  return names;
}

struct ManifestEntry {
  std::filesystem::path path;  // resolved against the manifest directory
  std::string filename;        // as written in the manifest
  int label = 0;
  Split split = Split::train;
  int line = 0;
};

struct Manifest {
  std::filesystem::path source;
  std::vector<ManifestEntry> entries;

  /// Entries of one split in manifest order.
  std::vector<ManifestEntry> split(Split s) const;
};

/// CSV with header `filename,label,split`; labels negative/positive. Errors
/// carry the line number; duplicate paths name both lines.
Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir, const std::string& source);
Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

/// Two-class synthetic corpus. Class 0: band-limited noise bursts in
/// [300, 800] Hz at 3 bursts/s. Class 1: [1500, 3000] Hz at 7 bursts/s.
struct SynthSpec {
  int n_per_class_per_split = 10;
  std::uint64_t seed = 7;
  double min_seconds = 2.0;
  double max_seconds = 10.0;
  double snr_db = 10.0;
  double snr_jitter_db = 6.0;
  double band_lo[2] = {300.0, 1500.0};
  double band_hi[2] = {800.0, 3000.0};
  double burst_rate[2] = {3.0, 7.0};
  int partials = 24;
};

/// Clip number `index` of class `label`; a pure function of its arguments.
std::vector<float> synth_clip(const SynthSpec& spec, int label, std::uint64_t index);

/// Writes <out>/<split>/<label>_<i>.wav for every split and class plus
/// <out>/manifest.csv; returns the manifest.
Manifest generate_synth(const SynthSpec& spec, const std::filesystem::path& out_dir);

/// Index order for one epoch: seeded shuffle for train, identity otherwise.
/// The final partial batch is kept.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, bool shuffle,
                                                    std::uint64_t seed, int epoch);

/// Feature tensors and labels of one split, in manifest order.
struct FeatureSet {
  std::vector<TensorF> features;  // each [3, n_mels, n_frames]
  std::vector<int> labels;
  std::vector<std::string> names;

  std::size_t size() const { return labels.size(); }
  /// Stacks the listed examples into [B, 3, n_mels, n_frames].
  TensorF batch(const std::vector<std::size_t>& idx) const;
  std::vector<int> batch_labels(const std::vector<std::size_t>& idx) const;
};

struct ExtractOptions {
  FeatureOptions features;
  unsigned threads = 1;
  /// Per-clip cache directory keyed by a hash of the WAV bytes and feature options.
  std::optional<std::filesystem::path> cache_dir;
  /// Seeds the per-clip crop offset when features.random_crop is set.
  std::uint64_t crop_seed = 0;
};

/// Reads and featurizes every entry; worker threads write results by index so
/// the output is independent of scheduling.
FeatureSet extract_features(const std::vector<ManifestEntry>& entries, const ExtractOptions& options = {});

}  // namespace tornet
