#pragma once

// Deterministic, platform-independent random streams.
//
// Everything in the lab draws from splitmix64 counters: the master seed plus
// (site, replicate, purpose) tags is hashed into an independent stream, so
// regenerating site k's data never consumes draws from site j's stream and
// results are bit-identical no matter how replicates are scheduled across
// threads. std::<random> distributions are deliberately avoided — their
// output is implementation-defined and would break cross-platform
// reproducibility of the artifacts.

#include <cmath>
#include <cstdint>

#include <Eigen/Dense>

namespace fedci {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// One-shot avalanche of a (state, tag) pair; used to derive child seeds.
inline std::uint64_t mix_seed(std::uint64_t h, std::uint64_t v) {
  std::uint64_t s = h ^ (v + 0x9e3779b97f4a7c15ull + (h << 12) + (h >> 4));
  return splitmix64_next(s);
}

// Stream purposes keep draws for different jobs out of each other's way even
// when they share (site, replicate).
enum class StreamPurpose : std::uint64_t {
  Data = 1,       // covariates / outcomes / event times
  Assignment = 2, // treatment coin flips
  Censoring = 3,
  Instance = 4,   // random problem instances (specs, not data)
};

inline std::uint64_t derive_stream(std::uint64_t master, std::uint64_t site,
                                   std::uint64_t replicate,
                                   StreamPurpose purpose) {
  std::uint64_t s = mix_seed(master, site + 1);
  s = mix_seed(s, replicate + 1);
  return mix_seed(s, static_cast<std::uint64_t>(purpose));
}

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  // Uniform on the open interval (0,1); never returns an exact endpoint, so
  // log(u) below is always finite.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Box–Muller without the cached second variate: one normal costs two
  // uniforms, but the stream position stays a pure function of the draw
  // count, which is what keeps regeneration order-independent.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double exponential(double rate) { return -std::log(uniform()) / rate; }

  bool bernoulli(double p) { return uniform() < p; }

  Eigen::VectorXd normal_vector(int d) {
    Eigen::VectorXd v(d);
    for (int i = 0; i < d; ++i) v[i] = normal();
    return v;
  }

 private:
  std::uint64_t state_;
};

}  // namespace fedci
