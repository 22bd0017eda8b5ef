#include "tornet/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <fstream>
#include <iterator>

namespace tornet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void put(T v) {
    raw(&v, sizeof v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename T>
  T get(const std::string& section) {
    T v;
    std::memcpy(&v, take(sizeof v, section), sizeof v);
    return v;
  }
  const std::uint8_t* take(std::size_t n, const std::string& section) {
    if (n > bytes_.size() - at_) {
      throw FormatError(source_ + ": truncated in " + section + " (needs " + std::to_string(n) + " bytes at offset " +
                        std::to_string(at_) + ", " + std::to_string(bytes_.size() - at_) + " left)");
    }
    const std::uint8_t* p = bytes_.data() + at_;
    at_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - at_; }
  const std::string& source() const { return source_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string source_;
  std::size_t at_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw("TORN", 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.metadata.size()));
  w.raw(ckpt.metadata.data(), ckpt.metadata.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 0xFFFF) throw ConfigError("tensor name too long: " + t.name.substr(0, 64));
    if (t.shape.size() > 0xFF) throw ConfigError("tensor rank too large: " + t.name);
    if (t.bytes.size() != static_cast<std::size_t>(numel(t.shape)) * dtype_size(t.dtype)) {
      throw std::logic_error("tensor record " + t.name + " has inconsistent byte length");
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.raw(t.name.data(), t.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (Index d : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.raw(t.bytes.data(), t.bytes.size());
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
  Reader r(bytes, source);
  if (std::memcmp(r.take(4, "magic"), "TORN", 4) != 0) throw FormatError(source + ": bad magic, not a checkpoint");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  const auto* meta = r.take(meta_len, "metadata");
  ckpt.metadata.assign(reinterpret_cast<const char*>(meta), meta_len);
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "tensor table entry " + std::to_string(i);
    TensorRecord t;
    const auto name_len = r.get<std::uint16_t>(where + " name length");
    t.name.assign(reinterpret_cast<const char*>(r.take(name_len, where + " name")), name_len);
    const std::string what = "tensor " + t.name;
    const auto dtype = r.get<std::uint8_t>(what + " dtype");
    if (dtype != static_cast<std::uint8_t>(DType::f32) && dtype != static_cast<std::uint8_t>(DType::f64)) {
      throw FormatError(source + ": " + what + " has unknown dtype code " + std::to_string(dtype));
    }
    t.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint8_t>(what + " rank");
    std::uint64_t n = 1;
    for (std::uint8_t a = 0; a < rank; ++a) {
      const auto d = r.get<std::uint32_t>(what + " dims");
      if (d == 0) throw FormatError(source + ": " + what + " has a zero dimension");
      t.shape.push_back(static_cast<Index>(d));
      n *= d;
      if (n > r.remaining()) throw FormatError(source + ": " + what + " dims declare more data than the file holds");
    }
    const std::size_t len = static_cast<std::size_t>(n) * dtype_size(t.dtype);
    const auto* data = r.take(len, what + " data");
    t.bytes.assign(data, data + len);
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) {
    throw FormatError(source + ": " + std::to_string(r.remaining()) + " trailing bytes after the tensor table");
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  const auto tmp = std::filesystem::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

std::string meta_to_json(const CheckpointMeta& m) {
  nlohmann::ordered_json j;
  j["model"] = nlohmann::ordered_json::parse(model_config_to_json(m.model));
  j["train"] = nlohmann::ordered_json::parse(m.train_config);
  j["epoch"] = m.epoch;
  j["val_uar"] = m.val_uar;
  j["seed"] = m.seed;
  j["created"] = m.created;
  return j.dump();
}

CheckpointMeta meta_from_json(const std::string& text) {
  CheckpointMeta m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.model = model_config_from_json(j.at("model").dump());
    m.train_config = j.at("train").dump();
    m.epoch = j.at("epoch").get<int>();
    m.val_uar = j.at("val_uar").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.created = j.at("created").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  return m;
}

}  // namespace tornet
