#pragma once

// Values pinned at first build. A change to any of them means numerics moved;
// the hash is printed by `c3s3 --version` so stale goldens are detectable.

#include <cstdint>
#include <cstdio>
#include <string>

#include "c3s3/losses.hpp"
#include "c3s3/rng.hpp"

namespace c3s3::golden {

inline constexpr std::uint64_t kIucSeed = 7;

/// iuc_loss on the canonical 4^3 instance below with default weights.
inline constexpr double kIuc4Cubed = 16.852355872218869;

/// Parameter counts of the default backbones A (plain) and B (residual).
inline constexpr std::size_t kParamsA = 26970;
inline constexpr std::size_t kParamsB = 27674;

/// gen-data partition of 40 volumes with labeled fraction 0.2 and test
/// fraction 0.25: test, labeled, unlabeled.
inline constexpr std::size_t kSplit40[3] = {10, 6, 24};

struct IucInstance {
  FeatureMap a, b;
};

/// One 4^3 volume, 4 projector channels. Features are unit-normalized normal
/// draws; foreground scores are uniform in [0, 1).
inline IucInstance iuc_instance() {
  Rng rng(derive_seed(kIucSeed, {0x601d}));
  auto map = [&rng] {
    Tensor raw({1, 4, 4, 4, 4});
    for (auto& v : raw.data()) v = rng.normal();
    FeatureMap m{normalize_channel(raw), std::vector<double>(64)};
    for (auto& s : m.foreground) s = rng.uniform();
    return m;
  };
  IucInstance g{map(), map()};
  return g;
}

inline std::string golden_text() {
  char buf[160];
  std::snprintf(buf, sizeof buf, "iuc4=%.17g;params_a=%zu;params_b=%zu;split40=%zu/%zu/%zu", kIuc4Cubed, kParamsA,
                kParamsB, kSplit40[0], kSplit40[1], kSplit40[2]);
  return buf;
}

inline std::uint64_t golden_hash() {
  const std::string t = golden_text();
  return fnv1a64(t.data(), t.size());
}

}  // namespace c3s3::golden
