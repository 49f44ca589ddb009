#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "normshift/rng.hpp"
#include "normshift/tensor.hpp"

namespace normshift::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(uniform(rng, lo, hi));
  return t;
}

// N in 1..4, C in lo_c..hi, H and W in 1..hi.
inline Shape random_shape4(Rng& rng, std::size_t lo_c, std::size_t hi) {
  auto pick = [&](std::size_t a, std::size_t b) { return a + static_cast<std::size_t>(rng() % (b - a + 1)); };
  return Shape{pick(1, 4), pick(lo_c, hi), pick(1, hi), pick(1, hi)};
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("normshift-" + tag + "-" + std::to_string(Rng(std::random_device{}())()));
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

}  // namespace normshift::testing
