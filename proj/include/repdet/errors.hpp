#pragma once

#include <stdexcept>
#include <string>

namespace repdet {

// Process-level outcome codes shared by the library and the CLI.
enum class Errc : int {
  ok = 0,
  computation = 1,  // tolerance exceeded, divergence, failed numeric check
  usage = 2,        // bad flags or arguments
  io = 3,           // filesystem and external-file parse failures
  model = 4,        // malformed or inconsistent model/graph/shape
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(Errc::model, what) {}
};

}  // namespace repdet
