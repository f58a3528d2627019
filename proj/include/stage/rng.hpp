#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace stage {

// Counter-based random stream. Every draw is a pure function of
// (seed, counter), so a stream can be replayed from any point and parallel
// work gets independent streams via split() instead of sharing state.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0) noexcept
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  // Uniform in [0, 1); consumes one counter slot.
  double next_uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; consumes exactly two counter slots.
  double next_gaussian() noexcept {
    const std::uint64_t a = next_u64();
    const std::uint64_t b = next_u64();
    const double u1 = (static_cast<double>(a >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;          // [0, 1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Derived stream for an independent unit of work. Children with distinct
  // ids never overlap each other or the parent.
  RngStream split(std::uint64_t stream_id) const noexcept {
    return RngStream(mix64(seed_ ^ mix64(stream_id + 0x632BE59BD9B4E019ULL)));
  }

 private:
  std::uint64_t next_u64() noexcept {
    return mix64(seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL);
  }

  // SplitMix64 finalizer.
  static std::uint64_t mix64(std::uint64_t z) noexcept {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace stage
