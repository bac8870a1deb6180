#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tlab {

using Scalar = double;
using Array = Eigen::ArrayXd;                 ///< flat value storage
using Vec = Eigen::VectorXd;
using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRMat = Eigen::Map<RMat>;
using MapCRMat = Eigen::Map<const RMat>;

using Shape = std::vector<int>;

inline long numel(const Shape& s) {
  long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Error taxonomy.  The CLI maps these onto process exit codes: configuration
// problems -> 2, dataset ingest problems -> 3, any other stage failure -> 4.
// ---------------------------------------------------------------------------

/// Tensor/op shape violation.  Message always names the op and offending shapes.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// NaN/Inf surfaced where a finite value is required.
struct NonFiniteError : std::runtime_error {
  explicit NonFiniteError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Reason codes for dataset parse failures.
enum class ParseErrc {
  bad_magic,
  truncated_file,
  count_mismatch,
  trailing_bytes,
  wrong_record_size,
  missing_file,
  label_out_of_range,
  provenance_mismatch,
};

inline const char* to_string(ParseErrc c) {
  switch (c) {
    case ParseErrc::bad_magic: return "bad_magic";
    case ParseErrc::truncated_file: return "truncated_file";
    case ParseErrc::count_mismatch: return "count_mismatch";
    case ParseErrc::trailing_bytes: return "trailing_bytes";
    case ParseErrc::wrong_record_size: return "wrong_record_size";
    case ParseErrc::missing_file: return "missing_file";
    case ParseErrc::label_out_of_range: return "label_out_of_range";
    case ParseErrc::provenance_mismatch: return "provenance_mismatch";
  }
  return "unknown";
}

/// Dataset file missing or malformed.
struct DataError : std::runtime_error {
  ParseErrc code;
  DataError(ParseErrc c, const std::string& msg)
      : std::runtime_error(std::string(to_string(c)) + ": " + msg), code(c) {}
};

/// Bad experiment configuration (unknown keys, out-of-range values, ...).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Optimization diverged or a training-stage invariant broke.
struct TrainError : std::runtime_error {
  long step;
  TrainError(long step_, const std::string& msg)
      : std::runtime_error(msg + " (step " + std::to_string(step_) + ")"), step(step_) {}
};

/// Estimator / bound inputs outside the regime where the result is meaningful.
struct SettingMismatch : std::runtime_error {
  explicit SettingMismatch(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, 64-bit).  Used for provenance tags and config cache keys;
// stable across platforms because it only touches explicit byte sequences.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace tlab
