#include "tornet/config.hpp"

#include <charconv>
#include <fstream>

#include "tornet/errors.hpp"

namespace tornet {

std::string source_name(ConfigSource s) {
  switch (s) {
    case ConfigSource::builtin: return "default";
    case ConfigSource::file: return "config file";
    case ConfigSource::flag: return "flag";
  }
  return "?";
}

RunConfig::RunConfig() {
  const std::pair<const char*, const char*> defaults[] = {
      {"lr", "1e-5"},
      {"beta1", "0.9"},
      {"beta2", "0.999"},
      {"adam_eps", "1e-8"},
      {"batch_size", "16"},
      {"epochs", ""},
      {"seed", "0"},
      {"patience", "0"},
      {"class_weighting", "off"},
      {"grad_clip", "0"},
      {"stop_at_val_uar", "0"},
      {"variant", "default"},
      {"block_dropout", "0.5"},
      {"head_dropout", "0.5"},
      {"random_crop", "false"},
      {"threads", "0"},
      {"cache_dir", ""},
      {"n_bootstrap", "1000"},
  };
  for (const auto& [k, v] : defaults) values_[k] = {v, ConfigSource::builtin};
}

void RunConfig::set(const std::string& key, const std::string& value, ConfigSource source) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = {value, source};
}

void RunConfig::load(std::istream& in, const std::string& source) {
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (!has(key)) throw ConfigError(where + "unknown config key '" + key + "'");
    set(key, trim(line.substr(eq + 1)), ConfigSource::file);
  }
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  load(in, path.string());
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.value;
}

ConfigSource RunConfig::source(const std::string& key) const {
  get(key);
  return values_.at(key).source;
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
  }
  return v;
}

}  // namespace

double RunConfig::get_double(const std::string& key) const { return parse_number<double>(key, get(key)); }
long long RunConfig::get_int(const std::string& key) const { return parse_number<long long>(key, get(key)); }
std::uint64_t RunConfig::get_u64(const std::string& key) const { return parse_number<std::uint64_t>(key, get(key)); }

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::string> RunConfig::log_lines() const {
  std::vector<std::string> out;
  for (const auto& [k, e] : values_) {
    out.push_back(k + " = " + (e.value.empty() ? "(unset)" : e.value) + "  [" + source_name(e.source) + "]");
  }
  return out;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig c = variant_config(get("variant"));
  c.block_dropout = get_double("block_dropout");
  c.head_dropout = get_double("head_dropout");
  if (!(c.block_dropout >= 0 && c.block_dropout < 1)) throw ConfigError("block_dropout must lie in [0, 1)");
  if (!(c.head_dropout >= 0 && c.head_dropout < 1)) throw ConfigError("head_dropout must lie in [0, 1)");
  validate(c);
  return c;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.adam.lr = get_double("lr");
  t.adam.beta1 = get_double("beta1");
  t.adam.beta2 = get_double("beta2");
  t.adam.eps = get_double("adam_eps");
  t.batch_size = static_cast<Index>(get_int("batch_size"));
  if (get("epochs").empty()) throw ConfigError("epochs must be set (config file or --epochs)");
  t.max_epochs = static_cast<int>(get_int("epochs"));
  t.seed = get_u64("seed");
  t.patience = static_cast<int>(get_int("patience"));
  const std::string& cw = get("class_weighting");
  if (cw == "off") {
    t.class_weighting = ClassWeighting::off;
  } else if (cw == "balanced") {
    t.class_weighting = ClassWeighting::balanced;
  } else {
    throw ConfigError("class_weighting must be off or balanced, got '" + cw + "'");
  }
  t.grad_clip = get_double("grad_clip");
  t.stop_at_val_uar = get_double("stop_at_val_uar");
  validate(t);
  return t;
}

FeatureOptions RunConfig::feature_options() const {
  FeatureOptions f;
  f.random_crop = get_bool("random_crop");
  return f;
}

}  // namespace tornet
