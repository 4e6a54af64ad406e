#pragma once

#include <cstdint>
#include <random>

namespace hyperkin {

inline constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Identifies one random stream: a master seed plus a path index and a
/// sub-stream tag. Streams are derived, never advanced from one another.
struct StreamId {
  std::uint64_t master = 0;
  std::uint64_t index = 0;
  std::uint64_t tag = 0;

  StreamId with_tag(std::uint64_t t) const { return {master, index, t}; }

  /// Counter-based key derivation: key = H(H(H(master) ^ index) ^ tag).
  std::uint64_t key() const {
    std::uint64_t k = splitmix64(master);
    k = splitmix64(k ^ index);
    k = splitmix64(k ^ (tag * 0xd1b54a32d192ed03ull));
    return k;
  }

  friend bool operator==(const StreamId&, const StreamId&) = default;
};

/// Per-path Gaussian source.
class NormalStream {
 public:
  explicit NormalStream(const StreamId& id) : engine_(id.key()) {}

  double operator()() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace hyperkin
