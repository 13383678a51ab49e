#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace conecraft {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Raised when an input violates an operation's contract.
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Raised on runtime failures (divergence, corrupt files, ...).
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// All randomness in a run flows from one top-level seed, fanned out by label
// so stages (train/opt/mc/split) do not share streams.
inline uint64_t sub_seed(uint64_t seed, std::string_view label) {
  return splitmix64(seed ^ fnv1a(label));
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace conecraft
