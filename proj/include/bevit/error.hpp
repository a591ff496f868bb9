#pragma once

#include <stdexcept>
#include <string>

namespace bevit {

// Error categories map onto CLI exit codes: config -> 2, data -> 3,
// numeric/shape/label -> 4.
enum class ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(ErrorKind::Numeric, msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(ErrorKind::Numeric, msg) {}
};

struct DomainError : Error {
    explicit DomainError(const std::string& msg) : Error(ErrorKind::Numeric, msg) {}
};

struct LabelError : Error {
    explicit LabelError(const std::string& msg) : Error(ErrorKind::Numeric, msg) {}
};

struct MetricError : Error {
    explicit MetricError(const std::string& msg) : Error(ErrorKind::Numeric, msg) {}
};

struct OptimError : Error {
    explicit OptimError(const std::string& msg) : Error(ErrorKind::Numeric, msg) {}
};

struct ScheduleError : Error {
    explicit ScheduleError(const std::string& msg) : Error(ErrorKind::Config, msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(ErrorKind::Config, msg) {}
};

struct PolicyError : Error {
    explicit PolicyError(const std::string& msg) : Error(ErrorKind::Config, msg) {}
};

struct ModelError : Error {
    explicit ModelError(const std::string& msg) : Error(ErrorKind::Config, msg) {}
};

struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(ErrorKind::Data, msg) {}
};

struct ParseError : Error {
    explicit ParseError(const std::string& msg) : Error(ErrorKind::Data, msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ErrorKind::Io, msg) {}
};

struct CorruptionError : Error {
    explicit CorruptionError(const std::string& msg) : Error(ErrorKind::Data, msg) {}
};

struct VersionError : Error {
    explicit VersionError(const std::string& msg) : Error(ErrorKind::Data, msg) {}
};

}  // namespace bevit
