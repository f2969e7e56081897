#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "tbx/common.hpp"

namespace tbx::cli {

/// Bad flags or conflicting configuration; maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `tbx` tool. args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tbx::cli
