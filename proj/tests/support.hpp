#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "gmx/gmx.hpp"

namespace gmx_test {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "gmx") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter.fetch_add(1)));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline gmx::FeatureMatrix random_matrix(std::size_t rows, std::size_t cols, gmx::Rng& rng, double sd = 1.0) {
  std::vector<float> v(rows * cols);
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, sd));
  return gmx::FeatureMatrix(rows, cols, std::move(v));
}

/// Random word sample with `frames` frames cycling over `n_phones` phones.
inline gmx::WordSample random_word(std::size_t frames, std::size_t d_mfcc, std::size_t d_deep, std::size_t n_phones,
                                   gmx::Rng& rng, gmx::Provenance prov = gmx::Provenance::mixup) {
  gmx::WordSample s;
  s.word = "w";
  for (std::size_t t = 0; t < frames; ++t)
    s.phones.push_back(gmx::PhoneId{static_cast<std::uint32_t>((t / 2) % n_phones)});
  s.mfcc = random_matrix(frames, d_mfcc, rng);
  s.deep = random_matrix(frames, d_deep, rng);
  s.target = rng.uniform();
  s.provenance = prov;
  return s;
}

inline gmx::ScorerConfig tiny_config() {
  gmx::ScorerConfig c;
  c.d_mfcc = 4;
  c.d_deep = 6;
  c.d_hidden = 8;
  c.filters = 8;
  c.n_phones = 3;
  return c;
}

/// Mean loss of a train-mode forward pass with dropout masks drawn from a
/// fresh stream seeded with `mask_seed`, so repeated calls use identical masks.
template <class T>
double batch_loss(const gmx::ScorerModel<T>& m, std::span<const gmx::WordSample* const> batch, std::uint64_t mask_seed) {
  gmx::Rng rng(mask_seed);
  const auto tr = gmx::forward_batch(m, batch, gmx::Mode::train, &rng);
  std::vector<double> p(tr.p.begin(), tr.p.end()), y;
  for (const auto* s : batch) y.push_back(s->target);
  return gmx::mse_loss(p, y);
}

/// A small phone pool set whose quadruplets have known GOPs.
inline gmx::PhonePoolSet random_pools(std::size_t n_phones, std::size_t per_phone, std::size_t d_mfcc,
                                      std::size_t d_deep, gmx::Rng& rng) {
  std::vector<std::string> sym;
  for (std::size_t i = 0; i < n_phones; ++i) sym.push_back("p" + std::to_string(i));
  gmx::PhonePoolSet pools{gmx::PhoneInventory(sym)};
  for (std::uint32_t p = 0; p < n_phones; ++p)
    for (std::size_t k = 0; k < per_phone; ++k) {
      const auto frames = static_cast<std::size_t>(rng.integer(1, 6));
      pools.add({gmx::PhoneId{p}, random_matrix(frames, d_mfcc, rng), random_matrix(frames, d_deep, rng), rng.uniform()});
    }
  return pools;
}

}  // namespace gmx_test
