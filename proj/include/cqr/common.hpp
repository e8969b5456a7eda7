#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cqr {

// Malformed or inconsistent input data (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// A violated internal invariant (CLI exit code 3).
class InternalError : public std::logic_error {
 public:
  explicit InternalError(const std::string& what) : std::logic_error(what) {}
};

std::string read_file(const std::string& path);

// Write-then-rename so re-runs never leave a torn file behind.
void atomic_write_file(const std::string& path, std::string_view content);

// Shortest decimal form with at most `decimals` fractional digits.
std::string format_real(double value, int decimals = 6);

}  // namespace cqr
