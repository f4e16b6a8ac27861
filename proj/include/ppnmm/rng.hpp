#pragma once

// Counter-keyed random streams. Every (seed, iteration, block, index) tuple
// maps to its own independent generator, so draws do not depend on the order
// or the thread in which indices are processed.

#include <cstdint>
#include <limits>
#include <random>

namespace ppnmm {

inline constexpr std::uint64_t splitmix64_mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// SplitMix64 generator; satisfies UniformRandomBitGenerator.
class StreamRng {
 public:
  using result_type = std::uint64_t;

  explicit StreamRng(std::uint64_t key) : state_(key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// Identifies which part of a sampler iteration a stream belongs to.
enum class StreamBlock : std::uint32_t {
  latent = 1,
  endmember = 2,
  nonlinearity = 3,
  noise = 4,
  hyper_sigma_b2 = 5,
  hyper_w = 6,
  abundance = 7,
  synth_b = 8,
  synth_noise = 9,
  synth_gamma = 10,
  endmember_gen = 11,
};

inline std::uint64_t stream_key(std::uint64_t seed, std::uint64_t iteration, StreamBlock block,
                                std::uint64_t index) {
  std::uint64_t k = splitmix64_mix(seed);
  k = splitmix64_mix(k ^ iteration);
  k = splitmix64_mix(k ^ (static_cast<std::uint64_t>(block) << 32));
  k = splitmix64_mix(k ^ index);
  return k;
}

/// Streams for one sampler iteration.
struct IterationStreams {
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;

  StreamRng stream(StreamBlock block, std::uint64_t index) const {
    return StreamRng(stream_key(seed, iteration, block, index));
  }
};

inline double standard_normal(StreamRng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline double uniform01(StreamRng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

/// Draw from InvGamma(shape, scale): density proportional to x^{-shape-1} exp(-scale/x).
template <class Rng>
double inverse_gamma(double shape, double scale, Rng& rng) {
  std::gamma_distribution<double> g(shape, 1.0 / scale);
  return 1.0 / g(rng);
}

template <class Rng>
double beta_draw(double alpha, double beta, Rng& rng) {
  std::gamma_distribution<double> ga(alpha, 1.0);
  std::gamma_distribution<double> gb(beta, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

}  // namespace ppnmm
