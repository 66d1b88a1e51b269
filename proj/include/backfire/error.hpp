#pragma once

#include <stdexcept>
#include <string>

namespace backfire {

/// Invalid configuration, shapes, or arguments. Maps to CLI exit code 2.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed on-disk data. Carries the byte offset where parsing failed.
class FormatError : public ConfigError {
public:
    FormatError(const std::string& what, std::size_t offset)
        : ConfigError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Interpolation coefficients outside the subspace constraints.
class InvalidCoefficientError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

/// Cosine similarity requested on an all-zero vector.
class DegenerateVectorError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Metric requested over an empty evaluation set.
class UndefinedMetricError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Non-finite loss during training. Maps to CLI exit code 3.
class TrainingDivergenceError : public std::runtime_error {
public:
    TrainingDivergenceError(const std::string& what, int epoch = -1, int endpoint = -1)
        : std::runtime_error(describe(what, epoch, endpoint)), epoch_(epoch), endpoint_(endpoint) {}

    int epoch() const noexcept { return epoch_; }
    int endpoint() const noexcept { return endpoint_; }

private:
    static std::string describe(const std::string& what, int epoch, int endpoint) {
        std::string out = what;
        if (endpoint >= 0)
            out += " [endpoint " + std::to_string(endpoint) + "]";
        if (epoch >= 0)
            out += " [epoch " + std::to_string(epoch) + "]";
        return out;
    }

    int epoch_;
    int endpoint_;
};

}  // namespace backfire
