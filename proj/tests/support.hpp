#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "effscale/effscale.hpp"

namespace effscale::fixtures {

// M(2, 8): two layers, hidden 8 as 2 heads x 4, two KV groups.
inline ModelConfig toy_config(bool qkv_bias = true) {
  return ModelConfig{2, 8, 2, 4, 2, 16, 32, qkv_bias, 64};
}

// M(2, 16): every width dimension of toy_config doubled.
inline ModelConfig toy_wide_config(bool qkv_bias = true) {
  return ModelConfig{2, 16, 4, 4, 2, 32, 32, qkv_bias, 64};
}

inline ModelConfig micro_config() { return ModelConfig{1, 4, 2, 2, 1, 6, 8, true, 16}; }

inline std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = static_cast<TokenId>(rng.below(vocab));
  return out;
}

inline Tensor<float> random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t({rows, cols});
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

// Scratch directory removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("effscale_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

private:
  std::filesystem::path path_;
};

}  // namespace effscale::fixtures
