#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace p2v {

// Exit codes used by the CLI: 0 success, 1 usage/config, 2 data, 3 numeric.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 1,
  kExitData = 2,
  kExitNumeric = 3,
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename Head, typename... Tail>
void format_into(std::ostringstream& os, Head&& head, Tail&&... tail) {
  os << std::forward<Head>(head);
  format_into(os, std::forward<Tail>(tail)...);
}
}  // namespace detail

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  detail::format_into(os, std::forward<Args>(args)...);
  return os.str();
}

template <typename Err = ShapeError, typename... Args>
void check(bool cond, Args&&... args) {
  if (!cond) throw Err(concat(std::forward<Args>(args)...));
}

}  // namespace p2v
