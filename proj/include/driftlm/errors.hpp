#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace driftlm {

// Bad argument values supplied by a caller (non-finite logits, t outside (0,1), ...).
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Shapes or structural preconditions that the calling code got wrong.
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class OracleFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DegenerateFeature : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
          line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class VersionMismatch : public ParseError {
public:
    using ParseError::ParseError;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace driftlm
