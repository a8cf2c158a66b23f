#pragma once

#include <stdexcept>
#include <string>

namespace dbifaunet {

/// Raised when an input violates a documented precondition (shape, range, finiteness).
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A feature map or input held NaN or Inf.
class NonFiniteError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Image/mask files could not be matched by stem.
class PairingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Checkpoint is unreadable, has the wrong format tag, or does not match the expected model.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string &what, long epoch, long step)
        : std::runtime_error(what), epoch_(epoch), step_(step) {}
    long epoch() const noexcept { return epoch_; }
    long step() const noexcept { return step_; }

private:
    long epoch_;
    long step_;
};

} // namespace dbifaunet
