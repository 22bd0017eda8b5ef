#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <vector>

#include "tornet/audio.hpp"
#include "tornet/network.hpp"
#include "tornet/train.hpp"

namespace tornet {

enum class ConfigSource { builtin, file, flag };

std::string source_name(ConfigSource s);

/// Effective run settings: built-in defaults, overridden by a `key = value`
/// file (# starts a comment), overridden by command-line flags. Unknown keys
/// are errors at every layer.
class RunConfig {
 public:
  RunConfig();

  void load_file(const std::filesystem::path& path);
  void load(std::istream& in, const std::string& source);
  void set(const std::string& key, const std::string& value, ConfigSource source);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  ConfigSource source(const std::string& key) const;

  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  /// One "key = value (source)" line per setting, sorted by key.
  std::vector<std::string> log_lines() const;

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  FeatureOptions feature_options() const;

 private:
  struct Entry {
    std::string value;
    ConfigSource source = ConfigSource::builtin;
  };
  std::map<std::string, Entry> values_;
};

}  // namespace tornet
