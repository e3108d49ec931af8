#include "smf/tensor.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace smf {

namespace {

thread_local bool t_grad_enabled = true;

struct GradientFault {
    std::string op;
    double factor = 1.0;
};

GradientFault g_fault;

thread_local std::uint64_t* g_branch_hash = nullptr;

inline void record_branch(std::uint64_t choice) {
    if (g_branch_hash) {
        *g_branch_hash = (*g_branch_hash ^ (choice + 0x9e3779b97f4a7c15ull)) * 1099511628211ull;
    }
}

using NodePtr = std::shared_ptr<detail::Node>;
using BackwardFn = std::function<void(detail::Node&)>;

NodePtr make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size()) {
        throw ShapeError(fmt::format("shape {} does not hold {} values", shape_str(shape), values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::make_shared<std::vector<double>>(std::move(values));
    node->requires_grad = requires_grad;
    return node;
}

Tensor make_result(Shape shape, std::vector<double> values, std::vector<NodePtr> inputs, const char* op,
                   BackwardFn fn) {
    auto node = make_leaf(std::move(shape), std::move(values), false);
    node->op = op;
    const bool needs_grad = t_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const NodePtr& n) {
                                return n->requires_grad;
                            });
    if (needs_grad) {
        node->requires_grad = true;
        node->leaf = false;
        node->inputs = std::move(inputs);
        node->backward = std::move(fn);
    }
    return Tensor::from_node(std::move(node));
}

const std::vector<double>& val(const Tensor& t) { return *t.node()->value; }

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) {
        throw ContractError(fmt::format("{}: undefined tensor", op));
    }
}

void require_2d(const Tensor& t, const char* op) {
    require_defined(t, op);
    if (t.dim() != 2) {
        throw ShapeError(fmt::format("{}: expected a matrix, got shape {}", op, shape_str(t.shape())));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require_defined(a, op);
    require_defined(b, op);
    if (a.shape() != b.shape()) {
        throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, shape_str(a.shape()), shape_str(b.shape())));
    }
}

double sigmoid_scalar(double x) {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) {
            out += "x";
        }
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

std::vector<double>& detail::Node::ensure_grad() {
    if (grad.size() != value->size()) {
        grad.assign(value->size(), 0.0);
    }
    return grad;
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(make_leaf(std::move(shape), std::move(values), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1, 1}, {value}, requires_grad); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ShapeError("Tensor::matrix: ragged rows");
        }
        values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(values), requires_grad);
}

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
    const auto n = values.size();
    return Tensor({1, n}, std::move(values), requires_grad);
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

const Shape& Tensor::shape() const {
    require_defined(*this, "shape");
    return node_->shape;
}

std::size_t Tensor::size() const { return node_ ? node_->value->size() : 0; }

std::size_t Tensor::rows() const {
    require_2d(*this, "rows");
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    require_2d(*this, "cols");
    return node_->shape[1];
}

std::span<const double> Tensor::data() const {
    require_defined(*this, "data");
    return *node_->value;
}

std::span<double> Tensor::mutable_data() {
    require_defined(*this, "mutable_data");
    return *node_->value;
}

double Tensor::at(std::size_t r, std::size_t c) const {
    require_2d(*this, "at");
    if (r >= rows() || c >= cols()) {
        throw std::out_of_range(fmt::format("at({}, {}) outside {}", r, c, shape_str(shape())));
    }
    return (*node_->value)[r * cols() + c];
}

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError(fmt::format("item() on non-scalar shape {}", shape_str(shape())));
    }
    return (*node_->value)[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
    require_defined(*this, "set_requires_grad");
    if (!node_->leaf) {
        throw ContractError("set_requires_grad: not a leaf tensor");
    }
    node_->requires_grad = value;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value->size(); }

std::span<const double> Tensor::grad() const {
    require_defined(*this, "grad");
    return node_->ensure_grad();
}

std::span<double> Tensor::mutable_grad() {
    require_defined(*this, "mutable_grad");
    return node_->ensure_grad();
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }
}

Tensor Tensor::clone(bool requires_grad) const {
    return Tensor(shape(), std::vector<double>(data().begin(), data().end()), requires_grad);
}

Tensor Tensor::shadow() const {
    require_defined(*this, "shadow");
    auto node = std::make_shared<detail::Node>();
    node->shape = node_->shape;
    node->value = node_->value;
    node->requires_grad = node_->requires_grad;
    return from_node(std::move(node));
}

Tensor Tensor::detach() const {
    require_defined(*this, "detach");
    auto node = std::make_shared<detail::Node>();
    node->shape = node_->shape;
    node->value = node_->value;
    return from_node(std::move(node));
}

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

// ---- reverse sweep ---------------------------------------------------------

Tape build_tape(const Tensor& root) {
    Tape tape;
    if (!root.requires_grad()) {
        return tape;
    }
    std::unordered_set<detail::Node*> visited;
    // Iterative post-order DFS; long recurrences would overflow a recursive one.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            tape.nodes.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

void backward(const Tensor& loss) {
    require_defined(loss, "backward");
    if (loss.size() != 1) {
        throw ContractError(fmt::format("backward: loss must be a scalar, got shape {}", shape_str(loss.shape())));
    }
    if (!loss.requires_grad()) {
        return;
    }
    const Tape tape = build_tape(loss);
    for (detail::Node* node : tape.nodes) {
        if (!node->leaf) {
            node->grad.assign(node->value->size(), 0.0);
        }
    }
    detail::Node* root = loss.node().get();
    root->ensure_grad()[0] += 1.0;
    for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
        detail::Node* node = *it;
        if (node->leaf || !node->backward) {
            continue;
        }
        if (g_fault.factor != 1.0 && g_fault.op == node->op) {
            for (double& g : node->grad) {
                g *= g_fault.factor;
            }
        }
        node->backward(*node);
    }
}

namespace debug {
void inject_gradient_fault(const std::string& op, double factor) { g_fault = {op, factor}; }
void clear_gradient_fault() { g_fault = {}; }

BranchSignature::BranchSignature() : previous_(g_branch_hash) { g_branch_hash = &hash_; }
BranchSignature::~BranchSignature() { g_branch_hash = previous_; }
} // namespace debug

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t n = a.rows();
    const std::size_t k = a.cols();
    const std::size_t m = b.cols();
    if (b.rows() != k) {
        throw ShapeError(fmt::format("matmul: inner dimensions differ, {} x {}", shape_str(a.shape()),
                                     shape_str(b.shape())));
    }
    const auto& A = val(a);
    const auto& B = val(b);
    std::vector<double> out(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = out.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = B.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    return make_result({n, m}, std::move(out), {a.node(), b.node()}, "matmul", [n, k, m](detail::Node& self) {
        const auto& g = self.grad;
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        const auto& A = *an.value;
        const auto& B = *bn.value;
        if (an.requires_grad) {
            auto& ga = an.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double* grow = g.data() + i * m;
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = B.data() + p * m;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < m; ++j) {
                        acc += grow[j] * brow[j];
                    }
                    ga[i * k + p] += acc;
                }
            }
        }
        if (bn.requires_grad) {
            auto& gb = bn.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double* grow = g.data() + i * m;
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    if (av == 0.0) {
                        continue;
                    }
                    double* gbrow = gb.data() + p * m;
                    for (std::size_t j = 0; j < m; ++j) {
                        gbrow[j] += av * grow[j];
                    }
                }
            }
        }
    });
}

Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise kind) {
    return kind == Elementwise::add ? add(a, b) : hadamard(a, b);
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const auto& A = val(a);
    const auto& B = val(b);
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = A[i] + B[i];
    }
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, "add", [](detail::Node& self) {
        for (auto& in : self.inputs) {
            if (in->requires_grad) {
                auto& g = in->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const auto& A = val(a);
    const auto& B = val(b);
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = A[i] - B[i];
    }
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, "sub", [](detail::Node& self) {
        const double sign[2] = {1.0, -1.0};
        for (std::size_t s = 0; s < 2; ++s) {
            auto& in = self.inputs[s];
            if (in->requires_grad) {
                auto& g = in->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += sign[s] * self.grad[i];
                }
            }
        }
    });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    const auto& A = val(a);
    const auto& B = val(b);
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = A[i] * B[i];
    }
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, "hadamard", [](detail::Node& self) {
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        if (an.requires_grad) {
            auto& g = an.ensure_grad();
            const auto& B = *bn.value;
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * B[i];
            }
        }
        if (bn.requires_grad) {
            auto& g = bn.ensure_grad();
            const auto& A = *an.value;
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * A[i];
            }
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    require_defined(a, "scale");
    std::vector<double> out(val(a));
    for (double& x : out) {
        x *= factor;
    }
    return make_result(a.shape(), std::move(out), {a.node()}, "scale", [factor](detail::Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += factor * self.grad[i];
        }
    });
}

Tensor add_row(const Tensor& a, const Tensor& b) {
    require_2d(a, "add_row");
    require_defined(b, "add_row");
    const std::size_t r = a.rows();
    const std::size_t c = a.cols();
    if (b.size() != c) {
        throw ShapeError(fmt::format("add_row: bias {} does not match columns of {}", shape_str(b.shape()),
                                     shape_str(a.shape())));
    }
    const auto& A = val(a);
    const auto& B = val(b);
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = A[i * c + j] + B[j];
        }
    }
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, "add_row", [r, c](detail::Node& self) {
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        if (an.requires_grad) {
            auto& g = an.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
        if (bn.requires_grad) {
            auto& g = bn.ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    g[j] += self.grad[i * c + j];
                }
            }
        }
    });
}

// ---- activations -------------------------------------------------------------

Tensor activation(const Tensor& a, Activation kind) {
    require_defined(a, "activation");
    const auto& A = val(a);
    std::vector<double> out(A.size());
    switch (kind) {
    case Activation::sigmoid:
        std::transform(A.begin(), A.end(), out.begin(), sigmoid_scalar);
        break;
    case Activation::tanh:
        std::transform(A.begin(), A.end(), out.begin(), [](double x) { return std::tanh(x); });
        break;
    case Activation::relu:
        std::transform(A.begin(), A.end(), out.begin(), [](double x) {
            record_branch(x > 0.0);
            return x > 0.0 ? x : 0.0;
        });
        break;
    }
    static constexpr const char* names[] = {"sigmoid", "tanh", "relu"};
    return make_result(a.shape(), std::move(out), {a.node()}, names[static_cast<int>(kind)],
                       [kind](detail::Node& self) {
                           auto& g = self.inputs[0]->ensure_grad();
                           const auto& y = *self.value;
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               double d = 0.0;
                               switch (kind) {
                               case Activation::sigmoid:
                                   d = y[i] * (1.0 - y[i]);
                                   break;
                               case Activation::tanh:
                                   d = 1.0 - y[i] * y[i];
                                   break;
                               case Activation::relu:
                                   d = y[i] > 0.0 ? 1.0 : 0.0;
                                   break;
                               }
                               g[i] += d * self.grad[i];
                           }
                       });
}

Tensor sigmoid(const Tensor& a) { return activation(a, Activation::sigmoid); }
Tensor tanh(const Tensor& a) { return activation(a, Activation::tanh); }
Tensor relu(const Tensor& a) { return activation(a, Activation::relu); }

Tensor masked_softmax(const Tensor& logits, const std::vector<bool>& mask) {
    require_2d(logits, "masked_softmax");
    if (mask.size() != logits.size()) {
        throw ShapeError(fmt::format("masked_softmax: mask of {} entries for logits {}", mask.size(),
                                     shape_str(logits.shape())));
    }
    const std::size_t r = logits.rows();
    const std::size_t c = logits.cols();
    const auto& X = val(logits);
    std::vector<double> out(X.size(), 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        double peak = -INFINITY;
        for (std::size_t j = 0; j < c; ++j) {
            if (mask[i * c + j]) {
                peak = std::max(peak, X[i * c + j]);
            }
        }
        if (peak == -INFINITY) {
            continue;
        }
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            if (mask[i * c + j]) {
                out[i * c + j] = std::exp(X[i * c + j] - peak);
                total += out[i * c + j];
            }
        }
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] /= total;
        }
    }
    return make_result(logits.shape(), std::move(out), {logits.node()}, "masked_softmax",
                       [r, c](detail::Node& self) {
                           auto& g = self.inputs[0]->ensure_grad();
                           const auto& y = *self.value;
                           for (std::size_t i = 0; i < r; ++i) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < c; ++j) {
                                   dot += self.grad[i * c + j] * y[i * c + j];
                               }
                               for (std::size_t j = 0; j < c; ++j) {
                                   g[i * c + j] += y[i * c + j] * (self.grad[i * c + j] - dot);
                               }
                           }
                       });
}

Tensor softmax_rows(const Tensor& logits) { return masked_softmax(logits, std::vector<bool>(logits.size(), true)); }

// ---- convolution and pooling ---------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
    require_defined(input, "conv2d");
    require_defined(kernels, "conv2d");
    require_defined(bias, "conv2d");
    if (input.dim() != 3 || kernels.dim() != 4) {
        throw ShapeError(fmt::format("conv2d: expected C x H x W input and F x C x kh x kw kernels, got {} and {}",
                                     shape_str(input.shape()), shape_str(kernels.shape())));
    }
    const std::size_t C = input.shape()[0];
    const std::size_t H = input.shape()[1];
    const std::size_t W = input.shape()[2];
    const std::size_t F = kernels.shape()[0];
    const std::size_t kh = kernels.shape()[2];
    const std::size_t kw = kernels.shape()[3];
    if (kernels.shape()[1] != C) {
        throw ShapeError(fmt::format("conv2d: kernels {} expect {} channels, input has {}",
                                     shape_str(kernels.shape()), kernels.shape()[1], C));
    }
    if (bias.size() != F) {
        throw ShapeError(fmt::format("conv2d: bias {} for {} kernels", shape_str(bias.shape()), F));
    }
    if (kh == 0 || kw == 0 || kh > H || kw > W) {
        throw ShapeError(fmt::format("conv2d: window {}x{} does not fit input {}", kh, kw, shape_str(input.shape())));
    }
    const std::size_t OH = H - kh + 1;
    const std::size_t OW = W - kw + 1;
    const auto& X = val(input);
    const auto& K = val(kernels);
    const auto& B = val(bias);
    std::vector<double> out(F * OH * OW);
    for (std::size_t f = 0; f < F; ++f) {
        double* plane = out.data() + f * OH * OW;
        std::fill(plane, plane + OH * OW, B[f]);
        for (std::size_t c = 0; c < C; ++c) {
            const double* xin = X.data() + c * H * W;
            const double* ker = K.data() + (f * C + c) * kh * kw;
            for (std::size_t s = 0; s < kh; ++s) {
                for (std::size_t t = 0; t < kw; ++t) {
                    const double w = ker[s * kw + t];
                    for (std::size_t i = 0; i < OH; ++i) {
                        const double* xrow = xin + (i + s) * W + t;
                        double* orow = plane + i * OW;
                        for (std::size_t j = 0; j < OW; ++j) {
                            orow[j] += w * xrow[j];
                        }
                    }
                }
            }
        }
        for (std::size_t i = 0; i < OH * OW; ++i) {
            record_branch(plane[i] > 0.0);
            plane[i] = plane[i] > 0.0 ? plane[i] : 0.0;
        }
    }
    return make_result(
        {F, OH, OW}, std::move(out), {input.node(), kernels.node(), bias.node()}, "conv2d",
        [=](detail::Node& self) {
            auto& xn = *self.inputs[0];
            auto& kn = *self.inputs[1];
            auto& bn = *self.inputs[2];
            const auto& X = *xn.value;
            const auto& K = *kn.value;
            const auto& Y = *self.value;
            std::vector<double> gpre(self.grad.size());
            for (std::size_t i = 0; i < gpre.size(); ++i) {
                gpre[i] = Y[i] > 0.0 ? self.grad[i] : 0.0;
            }
            if (bn.requires_grad) {
                auto& gb = bn.ensure_grad();
                for (std::size_t f = 0; f < F; ++f) {
                    gb[f] += std::accumulate(gpre.begin() + f * OH * OW, gpre.begin() + (f + 1) * OH * OW, 0.0);
                }
            }
            for (std::size_t f = 0; f < F; ++f) {
                const double* gp = gpre.data() + f * OH * OW;
                for (std::size_t c = 0; c < C; ++c) {
                    const double* xin = X.data() + c * H * W;
                    const std::size_t koff = (f * C + c) * kh * kw;
                    for (std::size_t s = 0; s < kh; ++s) {
                        for (std::size_t t = 0; t < kw; ++t) {
                            if (kn.requires_grad) {
                                double acc = 0.0;
                                for (std::size_t i = 0; i < OH; ++i) {
                                    const double* xrow = xin + (i + s) * W + t;
                                    const double* grow = gp + i * OW;
                                    for (std::size_t j = 0; j < OW; ++j) {
                                        acc += grow[j] * xrow[j];
                                    }
                                }
                                kn.ensure_grad()[koff + s * kw + t] += acc;
                            }
                            if (xn.requires_grad) {
                                const double w = K[koff + s * kw + t];
                                double* gx = xn.ensure_grad().data() + c * H * W;
                                for (std::size_t i = 0; i < OH; ++i) {
                                    double* gxrow = gx + (i + s) * W + t;
                                    const double* grow = gp + i * OW;
                                    for (std::size_t j = 0; j < OW; ++j) {
                                        gxrow[j] += w * grow[j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor maxpool2d(const Tensor& input, std::size_t window_h, std::size_t window_w) {
    require_defined(input, "maxpool2d");
    if (input.dim() != 3) {
        throw ShapeError(fmt::format("maxpool2d: expected C x H x W input, got {}", shape_str(input.shape())));
    }
    const std::size_t C = input.shape()[0];
    const std::size_t H = input.shape()[1];
    const std::size_t W = input.shape()[2];
    if (input.size() == 0) {
        throw ShapeError("maxpool2d: empty input");
    }
    if (window_h == 0 || window_w == 0) {
        throw ShapeError("maxpool2d: zero-sized window");
    }
    const std::size_t OH = (H + window_h - 1) / window_h;
    const std::size_t OW = (W + window_w - 1) / window_w;
    const auto& X = val(input);
    std::vector<double> out(C * OH * OW);
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < OH; ++i) {
            for (std::size_t j = 0; j < OW; ++j) {
                std::size_t best = c * H * W + i * window_h * W + j * window_w;
                for (std::size_t s = i * window_h; s < std::min(H, (i + 1) * window_h); ++s) {
                    for (std::size_t t = j * window_w; t < std::min(W, (j + 1) * window_w); ++t) {
                        const std::size_t idx = c * H * W + s * W + t;
                        if (X[idx] > X[best]) {
                            best = idx;
                        }
                    }
                }
                const std::size_t o = (c * OH + i) * OW + j;
                out[o] = X[best];
                argmax[o] = best;
                record_branch(best);
            }
        }
    }
    return make_result({C, OH, OW}, std::move(out), {input.node()}, "maxpool2d",
                       [argmax = std::move(argmax)](detail::Node& self) {
                           auto& g = self.inputs[0]->ensure_grad();
                           for (std::size_t o = 0; o < argmax.size(); ++o) {
                               g[argmax[o]] += self.grad[o];
                           }
                       });
}

// ---- reductions and reshaping --------------------------------------------------

Tensor sum(const Tensor& a) {
    require_defined(a, "sum");
    const auto& A = val(a);
    const double total = std::accumulate(A.begin(), A.end(), 0.0);
    return make_result({1, 1}, {total}, {a.node()}, "sum", [](detail::Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (double& x : g) {
            x += self.grad[0];
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t r = a.rows();
    const std::size_t c = a.cols();
    const auto& A = val(a);
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j * r + i] = A[i * c + j];
        }
    }
    return make_result({c, r}, std::move(out), {a.node()}, "transpose", [r, c](detail::Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                g[i * c + j] += self.grad[j * r + i];
            }
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    require_defined(a, "reshape");
    if (shape_size(shape) != a.size()) {
        throw ShapeError(fmt::format("reshape: cannot view {} as {}", shape_str(a.shape()), shape_str(shape)));
    }
    return make_result(std::move(shape), val(a), {a.node()}, "reshape", [](detail::Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i];
        }
    });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
    require_2d(a, "slice_rows");
    const std::size_t c = a.cols();
    if (begin + count > a.rows()) {
        throw ShapeError(fmt::format("slice_rows: rows [{}, {}) outside {}", begin, begin + count, shape_str(a.shape())));
    }
    const auto& A = val(a);
    std::vector<double> out(A.begin() + begin * c, A.begin() + (begin + count) * c);
    return make_result({count, c}, std::move(out), {a.node()}, "slice_rows", [begin, c](detail::Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            g[begin * c + i] += self.grad[i];
        }
    });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
    require_2d(a, "slice_cols");
    const std::size_t r = a.rows();
    const std::size_t c = a.cols();
    if (begin + count > c) {
        throw ShapeError(fmt::format("slice_cols: cols [{}, {}) outside {}", begin, begin + count, shape_str(a.shape())));
    }
    const auto& A = val(a);
    std::vector<double> out(r * count);
    for (std::size_t i = 0; i < r; ++i) {
        std::copy_n(A.begin() + i * c + begin, count, out.begin() + i * count);
    }
    return make_result({r, count}, std::move(out), {a.node()}, "slice_cols", [r, c, begin, count](detail::Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < count; ++j) {
                g[i * c + begin + j] += self.grad[i * count + j];
            }
        }
    });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_2d(a, "concat_cols");
    require_2d(b, "concat_cols");
    if (a.rows() != b.rows()) {
        throw ShapeError(fmt::format("concat_cols: row counts differ, {} vs {}", shape_str(a.shape()),
                                     shape_str(b.shape())));
    }
    const std::size_t r = a.rows();
    const std::size_t ca = a.cols();
    const std::size_t cb = b.cols();
    const auto& A = val(a);
    const auto& B = val(b);
    std::vector<double> out(r * (ca + cb));
    for (std::size_t i = 0; i < r; ++i) {
        std::copy_n(A.begin() + i * ca, ca, out.begin() + i * (ca + cb));
        std::copy_n(B.begin() + i * cb, cb, out.begin() + i * (ca + cb) + ca);
    }
    return make_result({r, ca + cb}, std::move(out), {a.node(), b.node()}, "concat_cols",
                       [r, ca, cb](detail::Node& self) {
                           auto& an = *self.inputs[0];
                           auto& bn = *self.inputs[1];
                           for (std::size_t i = 0; i < r; ++i) {
                               const double* grow = self.grad.data() + i * (ca + cb);
                               if (an.requires_grad) {
                                   auto& g = an.ensure_grad();
                                   for (std::size_t j = 0; j < ca; ++j) {
                                       g[i * ca + j] += grow[j];
                                   }
                               }
                               if (bn.requires_grad) {
                                   auto& g = bn.ensure_grad();
                                   for (std::size_t j = 0; j < cb; ++j) {
                                       g[i * cb + j] += grow[ca + j];
                                   }
                               }
                           }
                       });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    const std::size_t c = parts.front().cols();
    std::size_t total_rows = 0;
    std::vector<NodePtr> inputs;
    inputs.reserve(parts.size());
    for (const auto& p : parts) {
        require_2d(p, "concat_rows");
        if (p.cols() != c) {
            throw ShapeError(fmt::format("concat_rows: column counts differ, {} vs {}",
                                         shape_str(parts.front().shape()), shape_str(p.shape())));
        }
        total_rows += p.rows();
        inputs.push_back(p.node());
    }
    std::vector<double> out;
    out.reserve(total_rows * c);
    for (const auto& p : parts) {
        out.insert(out.end(), val(p).begin(), val(p).end());
    }
    return make_result({total_rows, c}, std::move(out), std::move(inputs), "concat_rows", [](detail::Node& self) {
        std::size_t offset = 0;
        for (auto& in : self.inputs) {
            const std::size_t n = in->value->size();
            if (in->requires_grad) {
                auto& g = in->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    g[i] += self.grad[offset + i];
                }
            }
            offset += n;
        }
    });
}

Tensor element(const Tensor& a, std::size_t index) {
    require_defined(a, "element");
    if (index >= a.size()) {
        throw ShapeError(fmt::format("element: index {} outside {}", index, shape_str(a.shape())));
    }
    return make_result({1, 1}, {val(a)[index]}, {a.node()}, "element", [index](detail::Node& self) {
        self.inputs[0]->ensure_grad()[index] += self.grad[0];
    });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids, int pad_id) {
    require_2d(table, "gather_rows");
    const std::size_t vocab = table.rows();
    const std::size_t d = table.cols();
    const auto& T = val(table);
    std::vector<double> out(ids.size() * d, 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw std::out_of_range(fmt::format("gather_rows: id {} outside table of {} rows", ids[i], vocab));
        }
        if (ids[i] != pad_id) {
            std::copy_n(T.begin() + static_cast<std::size_t>(ids[i]) * d, d, out.begin() + i * d);
        }
    }
    return make_result({ids.size(), d}, std::move(out), {table.node()}, "gather_rows",
                       [idx = std::vector<int>(ids.begin(), ids.end()), pad_id, d](detail::Node& self) {
                           auto& g = self.inputs[0]->ensure_grad();
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                               if (idx[i] == pad_id) {
                                   continue;
                               }
                               double* row = g.data() + static_cast<std::size_t>(idx[i]) * d;
                               for (std::size_t j = 0; j < d; ++j) {
                                   row[j] += self.grad[i * d + j];
                               }
                           }
                       });
}

Tensor additive_score(const Tensor& scores, const Tensor& bias, const Tensor& proj) {
    require_2d(scores, "additive_score");
    require_defined(bias, "additive_score");
    require_defined(proj, "additive_score");
    const std::size_t K = bias.size();
    if (proj.size() != K) {
        throw ShapeError(fmt::format("additive_score: bias {} and projection {} differ", shape_str(bias.shape()),
                                     shape_str(proj.shape())));
    }
    const auto& S = val(scores);
    const auto& B = val(bias);
    const auto& P = val(proj);
    std::vector<double> out(S.size(), 0.0);
    for (std::size_t i = 0; i < S.size(); ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            acc += P[k] * std::tanh(S[i] + B[k]);
        }
        out[i] = acc;
    }
    return make_result(scores.shape(), std::move(out), {scores.node(), bias.node(), proj.node()}, "additive_score",
                       [K](detail::Node& self) {
                           auto& sn = *self.inputs[0];
                           auto& bn = *self.inputs[1];
                           auto& pn = *self.inputs[2];
                           const auto& S = *sn.value;
                           const auto& B = *bn.value;
                           const auto& P = *pn.value;
                           std::vector<double> gb(K, 0.0);
                           std::vector<double> gp(K, 0.0);
                           std::vector<double>* gs = sn.requires_grad ? &sn.ensure_grad() : nullptr;
                           for (std::size_t i = 0; i < S.size(); ++i) {
                               const double g = self.grad[i];
                               if (g == 0.0) {
                                   continue;
                               }
                               double ds = 0.0;
                               for (std::size_t k = 0; k < K; ++k) {
                                   const double t = std::tanh(S[i] + B[k]);
                                   const double local = g * P[k] * (1.0 - t * t);
                                   ds += local;
                                   gb[k] += local;
                                   gp[k] += g * t;
                               }
                               if (gs) {
                                   (*gs)[i] += ds;
                               }
                           }
                           if (bn.requires_grad) {
                               auto& g = bn.ensure_grad();
                               for (std::size_t k = 0; k < K; ++k) {
                                   g[k] += gb[k];
                               }
                           }
                           if (pn.requires_grad) {
                               auto& g = pn.ensure_grad();
                               for (std::size_t k = 0; k < K; ++k) {
                                   g[k] += gp[k];
                               }
                           }
                       });
}

Tensor binary_cross_entropy(const Tensor& probability, int label) {
    require_defined(probability, "binary_cross_entropy");
    if (label != 0 && label != 1) {
        throw std::invalid_argument(fmt::format("binary_cross_entropy: label {} is not 0 or 1", label));
    }
    constexpr double lo = 1e-12;
    constexpr double hi = 1.0 - 1e-12;
    const double p = probability.item();
    const double pc = std::clamp(p, lo, hi);
    const bool clamped = p < lo || p > hi;
    record_branch(clamped);
    const double loss = label == 1 ? -std::log(pc) : -std::log(1.0 - pc);
    return make_result({1, 1}, {loss}, {probability.node()}, "binary_cross_entropy",
                       [pc, clamped, label](detail::Node& self) {
                           if (clamped) {
                               return;
                           }
                           const double d = label == 1 ? -1.0 / pc : 1.0 / (1.0 - pc);
                           self.inputs[0]->ensure_grad()[0] += d * self.grad[0];
                       });
}

} // namespace smf
