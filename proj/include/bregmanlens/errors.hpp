#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace blns {

// Error taxonomy shared by the whole library. The C API maps each kind to a
// status code; C++ callers catch blns::Error (or a subclass) directly.
enum class ErrorKind {
  dimension,   // shape/size mismatch between operands
  validation,  // input violates a documented invariant
  contract,    // caller broke a precondition (programming error)
  numeric,     // algorithm failed to converge / produced non-finite values
  io,          // filesystem failure
  corruption,  // file exists but fails checksum/format validation
  config,      // bad configuration key or value
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {
inline void msg_append(std::ostringstream&) {}
template <typename T, typename... Rest>
void msg_append(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  msg_append(os, rest...);
}
}  // namespace detail

template <typename... Parts>
[[noreturn]] void fail(ErrorKind kind, const Parts&... parts) {
  std::ostringstream os;
  detail::msg_append(os, parts...);
  throw Error(kind, os.str());
}

}  // namespace blns
