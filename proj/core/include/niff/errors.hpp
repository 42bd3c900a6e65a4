#pragma once

#include <stdexcept>
#include <string>

namespace niff {

/// Shape or axis disagreement between operands.
class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A caller violated an operation's precondition.
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Not enough samples to produce a well-defined statistic.
class InsufficientDataError : public std::runtime_error {
public:
    explicit InsufficientDataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A training stage failed to meet its postcondition (divergence, accuracy bar).
class TrainingError : public std::runtime_error {
public:
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A persisted artifact is missing, corrupt, or version-mismatched.
class ArtifactError : public std::runtime_error {
public:
    explicit ArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A config file failed validation; `field` names the offending key.
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& field, const std::string& msg)
        : std::runtime_error("config field '" + field + "': " + msg), field_(field) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

}  // namespace niff
