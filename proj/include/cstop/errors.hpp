#pragma once

#include <stdexcept>
#include <string>

namespace cstop {

// Bad input: malformed config, violated precondition, unsupported dimension.
// The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Equality-constrained problem whose budget cannot be spent exactly.
class InfeasibleError : public ValidationError {
public:
    InfeasibleError(const std::string& what, double max_cost)
        : ValidationError(what), max_cost_(max_cost) {}

    [[nodiscard]] double max_achievable_cost() const noexcept { return max_cost_; }

private:
    double max_cost_;
};

// Non-finite values or a solver that failed to converge. Exit code 3.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace cstop
