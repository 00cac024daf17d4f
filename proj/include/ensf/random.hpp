#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "ensf/types.hpp"

namespace ensf {

/// Stream labels. Every random draw in the toolkit comes from a stream keyed by
/// (master seed, purpose, indices), so results never depend on evaluation order.
enum class StreamTag : std::uint64_t {
  kForwardDiffuse = 1,
  kReverseSde = 2,
  kMiniBatch = 3,
  kModelNoise = 4,
  kObservationNoise = 5,
  kPerturbedObservation = 6,
  kTruthNoise = 7,
  kInitialJitter = 8,
  kArm = 9,
  kSyntheticParams = 10,
};

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Hash a master seed and a path of indices into an independent sub-seed.
inline std::uint64_t derive_seed(std::uint64_t master, StreamTag tag,
                                 std::initializer_list<std::uint64_t> path = {}) {
  std::uint64_t h = detail::splitmix64(master ^ 0x5851f42d4c957f2dULL);
  h = detail::splitmix64(h ^ static_cast<std::uint64_t>(tag));
  for (std::uint64_t p : path) h = detail::splitmix64(h ^ detail::splitmix64(p + 1));
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t master, StreamTag tag, std::initializer_list<std::uint64_t> path = {})
      : engine_(derive_seed(master, tag, path)) {}

  double normal() { return normal_(engine_); }

  Vector normal_vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal_(engine_);
    return v;
  }

  template <typename Derived>
  void fill_normal(Eigen::DenseBase<Derived>& out) {
    for (Eigen::Index r = 0; r < out.rows(); ++r)
      for (Eigen::Index c = 0; c < out.cols(); ++c) out(r, c) = normal_(engine_);
  }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace ensf
