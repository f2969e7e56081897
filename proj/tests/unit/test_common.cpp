#include <doctest.h>

#include <set>

#include "tbx/common.hpp"

using namespace tbx;

TEST_CASE("derive_seed is deterministic and spreads nearby streams") {
  CHECK(derive_seed(42, 1) == derive_seed(42, 1));
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 1000; ++s) seen.insert(derive_seed(7, s));
  CHECK(seen.size() == 1000);
  CHECK(derive_seed(1, 0) != derive_seed(0, 1));
}

TEST_CASE("fnv1a64 known vectors") {
  // Reference values of the 64-bit FNV-1a test suite.
  const auto hash = [](std::string_view s) {
    return fnv1a64(std::as_bytes(std::span(s.data(), s.size())));
  };
  CHECK(hash("") == 0xcbf29ce484222325ull);
  CHECK(hash("a") == 0xaf63dc4c8601ec8cull);
  CHECK(hash("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("fnv1a64 chains across calls") {
  const std::string s = "foobar";
  const auto bytes = std::as_bytes(std::span(s.data(), s.size()));
  const std::uint64_t whole = fnv1a64(bytes);
  const std::uint64_t part = fnv1a64(bytes.subspan(3), fnv1a64(bytes.first(3)));
  CHECK(whole == part);
}

TEST_CASE("warning capture") {
  {
    ScopedWarningCapture capture;
    warn("first");
    warn("second");
    REQUIRE(capture.count() == 2);
    CHECK(capture.messages()[1] == "second");
    {
      ScopedWarningCapture inner;
      warn("inner");
      CHECK(inner.count() == 1);
    }
    CHECK(capture.count() == 2);
  }
  std::vector<std::string> got;
  auto previous = set_warning_sink([&](std::string_view m) { got.emplace_back(m); });
  warn("x");
  set_warning_sink(previous);
  CHECK(got == std::vector<std::string>{"x"});
}
