#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gratin {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

using Rng = std::mt19937_64;

enum class ErrorCategory {
  Contract,
  Parse,
  Ingestion,
  Numerical,
  Io,
};

// Exit codes used by the command line tool; 0 is success.
constexpr int exit_code(ErrorCategory c) {
  switch (c) {
  case ErrorCategory::Contract: return 2;
  case ErrorCategory::Parse: return 3;
  case ErrorCategory::Ingestion: return 4;
  case ErrorCategory::Numerical: return 5;
  case ErrorCategory::Io: return 6;
  }
  return 1;
}

constexpr std::string_view category_name(ErrorCategory c) {
  switch (c) {
  case ErrorCategory::Contract: return "contract";
  case ErrorCategory::Parse: return "parse";
  case ErrorCategory::Ingestion: return "ingestion";
  case ErrorCategory::Numerical: return "numerical";
  case ErrorCategory::Io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
public:
  Error(ErrorCategory category, const std::string &what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

private:
  ErrorCategory category_;
};

inline void require(bool cond, const std::string &what) {
  if (!cond)
    throw Error(ErrorCategory::Contract, what);
}

// Derives an independent child seed from a root seed and a purpose tag.
// splitmix64 finalizer over the mixed inputs.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char ch : purpose) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  std::uint64_t z = root ^ (h + 0x9e3779b97f4a7c15ULL + (index << 6) + (index >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

} // namespace gratin
