#pragma once

#include <stdexcept>
#include <string>

namespace flipfl {

/// Tensor/layer shapes do not line up.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A loss, gradient or parameter became NaN/Inf.
class NumericError : public std::runtime_error {
public:
    NumericError(const std::string& what, int layer = -1)
        : std::runtime_error(what), layer_(layer) {}

    /// Zero-based layer index where the non-finite value was first seen, or -1.
    int layer() const noexcept { return layer_; }

private:
    int layer_;
};

/// Invalid experiment or operation configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// An operation's stated precondition does not hold (e.g. Bulyan's n >= 4f+3).
class PreconditionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

}  // namespace flipfl
