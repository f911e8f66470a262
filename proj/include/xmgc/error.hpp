#pragma once

#include <stdexcept>
#include <string>

namespace xmgc {

/// Tensor or layer geometry violation (mismatched dims, bad strides, ...).
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid argument value (out-of-range rate, malformed name, unknown key).
class ValueError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite value where the pipeline requires finite math.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Filesystem or decode failure.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class CheckpointStatus {
    BadMagic,
    VersionMismatch,
    Truncated,
};

/// Checkpoint file rejected; `status()` distinguishes the failure kinds.
class CheckpointError : public IoError {
public:
    CheckpointError(CheckpointStatus status, const std::string& msg)
        : IoError(msg), status_(status) {}
    CheckpointStatus status() const { return status_; }

private:
    CheckpointStatus status_;
};

}  // namespace xmgc
