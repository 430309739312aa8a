#pragma once

#include <stdexcept>
#include <string>

namespace dgst {

// Scalar type for all tensors. Gradient-check and acceptance builds require
// 64-bit; 32-bit is available for benchmarking via -DDGST_REAL32.
#ifdef DGST_REAL32
using real = float;
#else
using real = double;
#endif

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed tensor shapes, dimension mismatches.
struct shape_error : error {
  using error::error;
};

// Invalid configuration or CLI usage (exit code 2).
struct config_error : error {
  using error::error;
};

// NaN/Inf encountered in a forward/backward pass or update.
struct numeric_error : error {
  using error::error;
};

// Filesystem and serialization failures (exit code 3).
struct io_error : error {
  using error::error;
};

// Archive-level failures: corrupt manifest, digest/dtype mismatch, truncation.
struct checkpoint_error : io_error {
  using io_error::io_error;
};

}  // namespace dgst
