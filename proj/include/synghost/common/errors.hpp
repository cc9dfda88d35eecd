#pragma once

#include <stdexcept>
#include <string>

namespace synghost {

// Raised when an input violates a documented precondition. The CLI maps it
// to exit code 1; every other std::exception maps to exit code 2.
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

inline void require(bool condition, const std::string& message) {
    if (!condition) throw ValidationError(message);
}

}  // namespace synghost
