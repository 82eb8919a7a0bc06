#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace densipl {

/// Failure category. The CLI maps these onto its exit codes.
enum class ErrorKind {
  input,       // malformed files, bad arguments, missing artifacts
  invariant,   // a value violates a documented invariant
  divergence,  // non-finite loss or parameters during training
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::string image_id = {})
      : std::runtime_error(message), kind_(kind), image_id_(std::move(image_id)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& image_id() const noexcept { return image_id_; }

  Error with_image(std::string id) const { return Error(kind_, what(), std::move(id)); }

 private:
  ErrorKind kind_;
  std::string image_id_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::input: return "input";
    case ErrorKind::invariant: return "invariant";
    case ErrorKind::divergence: return "divergence";
  }
  return "unknown";
}

[[noreturn]] inline void fail_input(const std::string& msg) { throw Error(ErrorKind::input, msg); }
[[noreturn]] inline void fail_invariant(const std::string& msg) {
  throw Error(ErrorKind::invariant, msg);
}

}  // namespace densipl
