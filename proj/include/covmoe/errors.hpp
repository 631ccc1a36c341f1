#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace covmoe {

enum class ErrorKind {
    shape,
    numeric,
    ingest,
    config,
    routing,
    training,
    protocol,
    harness,
    checkpoint,
    io,
};

std::string_view to_string(ErrorKind kind);

/// Base for every error raised by the library. `kind()` is what the CLI maps
/// onto exit codes and the machine-readable error document.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& m) : Error(ErrorKind::shape, m) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& m) : Error(ErrorKind::numeric, m) {}
};

class IngestError : public Error {
public:
    IngestError(const std::string& m, std::size_t line = 0)
        : Error(ErrorKind::ingest, line ? "line " + std::to_string(line) + ": " + m : m),
          line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& m) : Error(ErrorKind::config, m) {}
};

class RoutingError : public Error {
public:
    explicit RoutingError(const std::string& m) : Error(ErrorKind::routing, m) {}
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& m, std::size_t epoch)
        : Error(ErrorKind::training, "epoch " + std::to_string(epoch) + ": " + m), epoch_(epoch) {}
    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

class ProtocolError : public Error {
public:
    explicit ProtocolError(const std::string& m) : Error(ErrorKind::protocol, m) {}
};

class HarnessError : public Error {
public:
    explicit HarnessError(const std::string& m) : Error(ErrorKind::harness, m) {}
};

class CheckpointError : public Error {
public:
    explicit CheckpointError(const std::string& m) : Error(ErrorKind::checkpoint, m) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& m) : Error(ErrorKind::io, m) {}
};

}  // namespace covmoe
