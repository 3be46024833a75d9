#pragma once

#include <stdexcept>
#include <string>

namespace lpn {

// Root of every error thrown by the library. The CLI maps the subclasses onto
// exit codes (see tools/lpn_main.cpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class DegenerateInputError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class DeterminismError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class CapacityError : public Error { using Error::Error; };
class StatisticsError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class LookupError : public Error { using Error::Error; };
class LabelError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class GridError : public ConfigError { using ConfigError::ConfigError; };

class CheckpointError : public Error {
public:
    enum class Kind { Corrupt, Shape, Version, Manifest };
    CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

} // namespace lpn
