#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "tornet/layers.hpp"
#include "tornet/rng.hpp"
#include "tornet/tensor.hpp"

namespace tornet::testing {

template <typename Scalar = double>
Tensor<Scalar> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<Scalar> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<Scalar>(rng.uniform(-scale, scale));
  return t;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("tornet_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Eval-mode forward of a single op on constants.
template <typename Scalar, typename Fn>
Tensor<Scalar> eval_op(Fn&& fn) {
  Tape<Scalar> tape;
  return tape.value(fn(tape));
}

}  // namespace tornet::testing
