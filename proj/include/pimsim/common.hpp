#pragma once
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pimsim {

// Raised for caller mistakes (bad operands, budgets, malformed inputs).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

}  // namespace pimsim
