#include "smf/grad_check.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace smf {

namespace {

struct Evaluation {
    double value;
    std::uint64_t branches;
};

Evaluation evaluate(const ScalarFunction& fn, const std::vector<Tensor>& inputs) {
    NoGradGuard no_grad;
    debug::BranchSignature signature;
    const double value = fn(inputs).item();
    if (!std::isfinite(value)) {
        throw NumericError("grad_check: function produced a non-finite value");
    }
    return {value, signature.value()};
}

} // namespace

GradCheckResult grad_check(const ScalarFunction& fn, const std::vector<Tensor>& inputs, double epsilon,
                           Stencil stencil) {
    if (!(epsilon > 0.0)) {
        throw ContractError("grad_check: epsilon must be positive");
    }
    for (const auto& t : inputs) {
        if (!t.requires_grad()) {
            throw ContractError("grad_check: every input must require grad");
        }
    }

    std::vector<Tensor> leaves = inputs;
    for (auto& t : leaves) {
        t.zero_grad();
    }
    const Tensor out = fn(leaves);
    if (!std::isfinite(out.item())) {
        throw NumericError("grad_check: function produced a non-finite value");
    }
    backward(out);

    const std::uint64_t base = evaluate(fn, leaves).branches;
    GradCheckResult result;
    std::size_t checked = 0;
    std::size_t kinks = 0;
    for (std::size_t n = 0; n < leaves.size(); ++n) {
        auto& leaf = leaves[n];
        const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
        auto values = leaf.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            bool kink = false;
            auto at = [&](double offset) {
                values[i] = original + offset;
                const Evaluation e = evaluate(fn, leaves);
                values[i] = original;
                kink = kink || e.branches != base;
                return e.value;
            };
            double numeric = 0.0;
            if (stencil == Stencil::five_point) {
                const double d1 = at(epsilon) - at(-epsilon);
                const double d2 = at(2.0 * epsilon) - at(-2.0 * epsilon);
                numeric = (8.0 * d1 - d2) / (12.0 * epsilon);
            } else {
                numeric = (at(epsilon) - at(-epsilon)) / (2.0 * epsilon);
            }
            if (kink) {
                ++kinks;
                continue;
            }
            ++checked;
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
            const double rel = std::abs(analytic[i] - numeric) / denom;
            if (!std::isfinite(rel)) {
                throw NumericError(fmt::format("grad_check: non-finite gradient at input {} index {}", n, i));
            }
            if (rel > result.max_relative_error) {
                result = {rel, n, i, analytic[i], numeric, 0, 0};
            }
        }
    }
    result.checked = checked;
    result.skipped_kinks = kinks;
    return result;
}

} // namespace smf
