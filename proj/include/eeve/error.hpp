#pragma once

#include <stdexcept>
#include <string>

namespace eeve {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input, bad configuration, or a violated precondition. The CLI maps
/// this to exit code 2.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A pipeline step failed while running (non-finite loss, I/O failure, ...).
/// The CLI maps this to exit code 3.
class StepError : public Error {
public:
    StepError(std::string step, const std::string& what)
        : Error(step + ": " + what), step_(std::move(step)) {}

    const std::string& step() const noexcept { return step_; }

private:
    std::string step_;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

} // namespace eeve
