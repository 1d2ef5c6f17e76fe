#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace udit {

using Shape = std::vector<std::int64_t>;

// Error taxonomy. The CLI maps these onto process exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ToleranceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline void check_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// Elementwise cost factors used by both the runtime FLOP trace and the
// analytical counter, so the two tally the same numbers by construction.
// Contractions (matmul / linear / conv) count 2 FLOPs per multiply-add;
// data movement (reshape, transpose, concat, shuffles, gathers) counts 0.
namespace cost {
constexpr std::int64_t kSoftmax = 5;   // max, sub, exp, sum, div
constexpr std::int64_t kLayerNorm = 8; // mean, var, sub, div, affine
constexpr std::int64_t kGelu = 8;
constexpr std::int64_t kSilu = 5;
constexpr std::int64_t kEltwise = 1;   // add / mul / scale / gate
constexpr std::int64_t kModulate = 3;
constexpr std::int64_t kRope = 3;
constexpr std::int64_t kRowNormalize = 4;
constexpr std::int64_t kMse = 3;
}  // namespace cost

// Process-wide forward-cost trace (single-threaded by design). Scopes nest;
// each scope reports the ops executed while it was alive. Used to cross-check
// the analytical counter against what the kernels actually ran.
class FlopTrace {
 public:
  FlopTrace() : start_(count_) { ++depth_; }
  ~FlopTrace() { --depth_; }
  FlopTrace(const FlopTrace&) = delete;
  FlopTrace& operator=(const FlopTrace&) = delete;

  std::uint64_t flops() const { return count_ - start_; }

  static void add(std::uint64_t n) {
    if (depth_ > 0) count_ += n;
  }
  static bool enabled() { return depth_ > 0; }

 private:
  inline static int depth_ = 0;
  inline static std::uint64_t count_ = 0;
  std::uint64_t start_;
};

}  // namespace udit
