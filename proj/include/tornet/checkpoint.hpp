#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "tornet/errors.hpp"
#include "tornet/network.hpp"
#include "tornet/tensor.hpp"

namespace tornet {

/// Binary layout (all integers little-endian):
///   "TORN" | u16 version | u32 metadata length | metadata (UTF-8 JSON)
///   | u32 tensor count | per tensor: u16 name length | name | u8 dtype | u8 rank
///   | rank x u32 dims | raw values.
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

template <typename Scalar>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>, "float or double only");
  return std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
}

/// One named tensor as stored on disk: raw little-endian bytes plus shape.
struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  template <typename Scalar>
  static TensorRecord from(std::string name, const Tensor<Scalar>& t) {
    TensorRecord r{std::move(name), dtype_of<Scalar>(), t.shape(), {}};
    r.bytes.resize(static_cast<std::size_t>(t.size()) * sizeof(Scalar));
    std::memcpy(r.bytes.data(), t.data(), r.bytes.size());
    return r;
  }

  /// Exact copy when the dtype matches, value conversion otherwise.
  template <typename Scalar>
  Tensor<Scalar> to() const {
    if (dtype == dtype_of<Scalar>()) {
      Tensor<Scalar> t(shape);
      std::memcpy(t.data(), bytes.data(), bytes.size());
      return t;
    }
    if (dtype == DType::f32) return to<float>().template cast<Scalar>();
    return to<double>().template cast<Scalar>();
  }
};

/// Versioned container: a JSON metadata document plus a tensor table.
struct Checkpoint {
  std::string metadata = "{}";
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Validates magic, version and every declared length; errors name the failing section.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Typed view of a model checkpoint's metadata.
struct CheckpointMeta {
  ModelConfig model;
  std::string train_config = "{}";  // JSON object
  int epoch = 0;
  double val_uar = 0.0;
  std::uint64_t seed = 0;
  std::string created;
};

std::string meta_to_json(const CheckpointMeta& meta);
CheckpointMeta meta_from_json(const std::string& text);

/// Every parameter and running statistic of `model`, in registration order.
template <typename Scalar>
Checkpoint capture(const Model<Scalar>& model, CheckpointMeta meta) {
  meta.model = model.config();
  Checkpoint ckpt;
  ckpt.metadata = meta_to_json(meta);
  for (const auto& [name, tensor] : model.store().named_tensors()) ckpt.tensors.push_back(TensorRecord::from(name, *tensor));
  return ckpt;
}

/// Copies checkpoint tensors into a model built from the same config. The name
/// sets must match exactly and every shape must agree.
template <typename Scalar>
void restore(Model<Scalar>& model, const Checkpoint& ckpt) {
  std::set<std::string> seen;
  for (const auto& rec : ckpt.tensors) {
    Tensor<Scalar>* dst = model.store().find(rec.name);
    if (!dst) throw FormatError("checkpoint tensor " + rec.name + " has no counterpart in the model");
    if (dst->shape() != rec.shape) {
      throw FormatError("checkpoint tensor " + rec.name + " has shape " + to_string(rec.shape) + ", model expects " +
                        to_string(dst->shape()));
    }
    *dst = rec.to<Scalar>();
    seen.insert(rec.name);
  }
  for (const auto& [name, tensor] : model.store().named_tensors()) {
    if (!seen.count(name)) throw FormatError("checkpoint is missing tensor " + name);
  }
}

template <typename Scalar = float>
Model<Scalar> model_from_checkpoint(const Checkpoint& ckpt) {
  Model<Scalar> model = Model<Scalar>::build(meta_from_json(ckpt.metadata).model, 0);
  restore(model, ckpt);
  return model;
}

}  // namespace tornet
