#pragma once

#include <stdexcept>
#include <string>

namespace protogate {

// Exit-code-bearing error hierarchy. The CLI maps these to process exit
// codes; library code throws them directly.
struct UsageError : std::runtime_error {  // exit 1
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {  // exit 2
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {  // exit 3
  using std::runtime_error::runtime_error;
};

}  // namespace protogate
