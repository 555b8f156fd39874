#pragma once

#include <stdexcept>
#include <string>

namespace fitcls {

// Process exit codes shared by every CLI command.
enum class ExitCode : int {
    Ok = 0,
    InputError = 2,
    NumericError = 3,
    ArtifactMismatch = 4,
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual ExitCode exit_code() const noexcept { return ExitCode::InputError; }
};

/// Bad input files, malformed records, invalid configuration or arguments.
class InputError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf produced by a computation, or a training run that diverged.
class NumericError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::NumericError; }
};

/// A training run whose loss became non-finite. Carries the per-epoch trace
/// (JSON lines) recorded up to the failure.
class DivergenceError : public NumericError {
public:
    DivergenceError(const std::string& what, std::string trace_jsonl)
        : NumericError(what), trace_(std::move(trace_jsonl)) {}
    const std::string& trace() const noexcept { return trace_; }

private:
    std::string trace_;
};

/// Shapes that do not line up at an op boundary.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Persisted artifacts that do not belong together (vocab hash, model kind).
class ArtifactError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::ArtifactMismatch; }
};

}  // namespace fitcls
