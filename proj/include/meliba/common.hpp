#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace meliba {

// Error taxonomy: configuration problems (bad keys, shape mismatches),
// protocol violations (calling operations out of order), and numeric
// failures (non-finite values).
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct protocol_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace meliba
