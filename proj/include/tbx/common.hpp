#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tbx {

/// Base class for every error the pipeline raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller-supplied value violates a documented precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Reading or writing a file failed.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Optimization produced a non-finite value.
class TrainingError : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

/// Mixes a base seed with a stream index (splitmix64 finalizer), so nearby
/// indices give unrelated generator states.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

/// FNV-1a over raw bytes; used for parameter and file checksums.
std::uint64_t fnv1a64(std::span<const std::byte> bytes,
                      std::uint64_t hash = 0xcbf29ce484222325ull);

template <typename T>
std::uint64_t fnv1a64_of(std::span<const T> values,
                         std::uint64_t hash = 0xcbf29ce484222325ull) {
  return fnv1a64(std::as_bytes(values), hash);
}

// Warnings go through a replaceable sink; the default prints to stderr.
using WarningSink = std::function<void(std::string_view)>;

void warn(std::string_view message);

/// Installs a sink and returns the previous one.
WarningSink set_warning_sink(WarningSink sink);

/// Swaps the warning sink for the lifetime of the guard.
class ScopedWarningCapture {
 public:
  ScopedWarningCapture();
  ~ScopedWarningCapture();
  ScopedWarningCapture(const ScopedWarningCapture&) = delete;
  ScopedWarningCapture& operator=(const ScopedWarningCapture&) = delete;

  [[nodiscard]] std::size_t count() const { return messages_.size(); }
  [[nodiscard]] const std::vector<std::string>& messages() const {
    return messages_;
  }

 private:
  std::vector<std::string> messages_;
  WarningSink previous_;
};

}  // namespace tbx
