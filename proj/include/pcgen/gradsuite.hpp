#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pcgen {

/// One row of the finite-difference suite: every differentiable op, the
/// geometry/render/loss functions and the desk-preset model end to end.
struct GradCaseResult {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t coords = 0;
    double seconds = 0.0;
    bool passed = false;
};

inline constexpr double kOpTolerance = 1e-3;
inline constexpr double kModelTolerance = 1e-2;

std::vector<std::string> gradcheck_case_names();

/// Throws std::invalid_argument for an unknown name.
GradCaseResult run_gradcheck_case(const std::string& name, std::uint64_t seed = 0);

/// Runs `names` (all cases when empty) in order.
std::vector<GradCaseResult> run_gradcheck_suite(const std::vector<std::string>& names, std::uint64_t seed = 0);

}  // namespace pcgen
