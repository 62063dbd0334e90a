#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace mrglmm {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11). A 64-bit key
// and a 128-bit counter map to 128 random bits; distinct counters give
// independent streams, so every draw can be addressed directly.
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  explicit Philox4x32(std::uint64_t seed)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}
  explicit Philox4x32(Key key) : key_(key) {}

  Counter operator()(Counter ctr) const {
    Key key = key_;
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kW0;
        key[1] += kW1;
      }
      const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
      ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
             static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kM0 = 0xD2511F53;
  static constexpr std::uint32_t kM1 = 0xCD9E8D57;
  static constexpr std::uint32_t kW0 = 0x9E3779B9;
  static constexpr std::uint32_t kW1 = 0xBB67AE85;
  Key key_;
};

// Uniform on the open interval (0, 1) with 52 random bits.
inline double to_unit(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = ((static_cast<std::uint64_t>(hi) << 32) | lo) >> 12;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-52;
}

// Box-Muller on two open-interval uniforms; returns the cosine branch.
inline double box_muller(double u1, double u2) {
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
}

// Stream tags occupy the top byte of counter word 3.
enum class StreamTag : std::uint32_t {
  mwg_sweep = 1,
  mwg_init = 2,
  sim_intercept = 3,
  sim_coef = 4,
  sim_subject = 5,
  test = 15,
};

// A sequential stream over one fixed (tag, a, b) address; draws advance the
// low counter word. Two normals come out of each 128-bit block.
class CounterStream {
 public:
  CounterStream(std::uint64_t seed, StreamTag tag, std::uint32_t a, std::uint32_t b, std::uint32_t epoch = 0)
      : gen_(seed), a_(a), b_(b), hi_((static_cast<std::uint32_t>(tag) << 24) | (epoch & 0xFFFFFFu)) {}

  double uniform() {
    if (have_uniform_) {
      have_uniform_ = false;
      return spare_uniform_;
    }
    const auto out = gen_({index_++, a_, b_, hi_});
    spare_uniform_ = to_unit(out[2], out[3]);
    have_uniform_ = true;
    return to_unit(out[0], out[1]);
  }

  double normal() {
    const auto out = gen_({index_++, a_, b_, hi_});
    return box_muller(to_unit(out[0], out[1]), to_unit(out[2], out[3]));
  }

  bool bernoulli(double prob) { return uniform() < prob; }

 private:
  Philox4x32 gen_;
  std::uint32_t a_;
  std::uint32_t b_;
  std::uint32_t hi_;
  std::uint32_t index_ = 0;
  bool have_uniform_ = false;
  double spare_uniform_ = 0.0;
};

}  // namespace mrglmm
