#pragma once

#include "smf/grad_check.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace smf {

struct GradSuiteOptions {
    std::size_t points = 100;      // random points per primitive op
    std::size_t model_points = 5;  // random instances per micro model
    std::uint64_t seed = 7;
    double epsilon = 1e-5;
    // whole-model losses carry ~1e-16 relative rounding per evaluation, which swamps
    // gradients near 1e-9 at eps 1e-5; a larger step (with a five-point stencil) keeps them resolvable
    double model_epsilon = 3e-4;
    double tolerance = 1e-4;
    bool include_models = true;
};

struct GradSuiteEntry {
    std::string name;
    std::size_t points = 0;
    std::size_t checked = 0;       // coordinates compared
    std::size_t skipped_kinks = 0; // coordinates straddling a branch change
    GradCheckResult worst;
    bool passed = true;
};

/// Gradient checks for every differentiable primitive and for complete SCN
/// and SAN micro models under each head.
std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& options = {});

std::string format_gradient_suite(const std::vector<GradSuiteEntry>& entries);

} // namespace smf
