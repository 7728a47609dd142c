#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "vrwkv/biwkv.hpp"
#include "vrwkv/tensor.hpp"

namespace vrwkv::test {

inline Tensor<double> random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                                    double lo = -2.0, double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t({rows, cols});
  for (auto& x : t.values()) x = d(rng);
  return t;
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double lo = -2.0,
                                         double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline DecayParams<double> random_decay(std::size_t C, std::uint64_t seed) {
  return {random_vector(C, seed, -3.0, 3.0), random_vector(C, seed + 7, -1.0, 1.0)};
}

inline TokenGrid<double> random_grid(std::size_t b, std::size_t h, std::size_t w, std::size_t c,
                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  TokenGrid<double> g(b, h, w, c);
  for (auto& x : g.data) x = d(rng);
  return g;
}

inline Tensor<double> reverse_rows(const Tensor<double>& t) {
  Tensor<double> r(t.shape());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t c = 0; c < t.cols(); ++c) r.at(t.rows() - 1 - i, c) = t.at(i, c);
  return r;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("vrwkv-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace vrwkv::test
