#pragma once

#include "smf/tensor.hpp"

#include <functional>
#include <vector>

namespace smf {

using ScalarFunction = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
    /// Coordinates whose x-eps / x+eps evaluations took a different branch
    /// (ReLU sign, pooling winner, clamp) than x. The derivative is not
    /// defined across such a kink, so they are excluded from the error.
    std::size_t skipped_kinks = 0;
};

enum class Stencil { three_point, five_point };

/// Compares backward() against central differences (f(x+eps) - f(x-eps)) / 2eps
/// for every coordinate of every input. The five-point stencil adds the +-2eps
/// evaluations; its truncation error is O(eps^4), which lets deep compositions
/// use an eps large enough to stay clear of rounding noise. Inputs must be requires_grad leaves;
/// their values are restored before returning. Relative error per coordinate
/// uses max(|analytic|, |numeric|, 1e-8) as the denominator.
GradCheckResult grad_check(const ScalarFunction& fn, const std::vector<Tensor>& inputs, double epsilon = 1e-5,
                           Stencil stencil = Stencil::three_point);

} // namespace smf
