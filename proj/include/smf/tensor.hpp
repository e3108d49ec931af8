#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace smf {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
    Shape shape;
    std::shared_ptr<std::vector<double>> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into inputs' grads.
    std::function<void(Node&)> backward;

    std::vector<double>& ensure_grad();
};

} // namespace detail

/// Dense row-major tensor of doubles. Copies share the underlying node, so a
/// Tensor behaves like a handle; use clone() for an independent value.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false);
    static Tensor row(std::vector<double> values, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    std::size_t size() const;
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const;
    // Mutable access is for parameter initialization and optimizer updates
    // only; mutating a value that participates in a live graph is undefined.
    std::span<double> mutable_data();
    double operator[](std::size_t i) const { return data()[i]; }
    double at(std::size_t r, std::size_t c) const;
    double item() const;

    bool requires_grad() const;
    /// Only valid on leaves.
    void set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// Independent leaf with a copy of the values.
    Tensor clone(bool requires_grad = false) const;
    /// Leaf sharing the value storage but owning a separate gradient buffer.
    /// Lets independent workers differentiate the same parameters.
    Tensor shadow() const;
    /// Same values, detached from the graph.
    Tensor detach() const;

    const char* op_name() const;
    const std::shared_ptr<detail::Node>& node() const { return node_; }
    static Tensor from_node(std::shared_ptr<detail::Node> node);

private:
    std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Operations in the order a reverse sweep must visit them (outputs last).
struct Tape {
    std::vector<detail::Node*> nodes;
};

Tape build_tape(const Tensor& root);

/// Accumulates d(loss)/d(x) into every requires_grad leaf reachable from
/// `loss`. Intermediate gradients are reset on every call; leaf gradients
/// accumulate across calls until zero_grad().
void backward(const Tensor& loss);

// ---- primitive operations ------------------------------------------------

enum class Activation { sigmoid, tanh, relu };
enum class Elementwise { add, hadamard };

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise kind);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// a (r x c) plus row vector b (1 x c) broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& b);

Tensor activation(const Tensor& a, Activation kind);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);

/// Row-wise softmax restricted to entries where mask is true. Masked entries
/// are 0; rows with no unmasked entry are all zeros.
Tensor masked_softmax(const Tensor& logits, const std::vector<bool>& mask);
Tensor softmax_rows(const Tensor& logits);

/// Valid cross-channel 2D convolution with bias and ReLU.
/// input: C x H x W, kernels: F x C x kh x kw, bias: F. Output F x (H-kh+1) x (W-kw+1).
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias);
/// Non-overlapping max pooling (stride = window); trailing partial windows
/// are pooled over the cells available. input: C x H x W.
Tensor maxpool2d(const Tensor& input, std::size_t window_h, std::size_t window_w);

Tensor sum(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor element(const Tensor& a, std::size_t index);

/// Row lookup: out[i] = table[ids[i]], except rows whose id equals pad_id,
/// which are zero and receive no gradient.
Tensor gather_rows(const Tensor& table, std::span<const int> ids, int pad_id);

/// out[i][j] = sum_k proj[k] * tanh(scores[i][j] + bias[k]); bias and proj
/// are 1 x K. The (rows*cols) x K intermediate is never materialized.
Tensor additive_score(const Tensor& scores, const Tensor& bias, const Tensor& proj);

/// -[y log p + (1-y) log(1-p)] with p clamped to [1e-12, 1-1e-12].
Tensor binary_cross_entropy(const Tensor& probability, int label);

namespace debug {
/// Scales the backward of the named op by `factor` (1.0 disables). Test hook
/// used to prove the gradient checker catches corrupted derivatives.
void inject_gradient_fault(const std::string& op, double factor);
void clear_gradient_fault();

/// While alive, ops with discrete branches (ReLU sign, max-pool winner,
/// probability clamp) fold their choices into a hash on this thread. Two
/// evaluations with equal signatures lie on the same smooth piece.
class BranchSignature {
public:
    BranchSignature();
    ~BranchSignature();
    BranchSignature(const BranchSignature&) = delete;
    BranchSignature& operator=(const BranchSignature&) = delete;

    std::uint64_t value() const { return hash_; }

private:
    std::uint64_t hash_ = 1469598103934665603ull;
    std::uint64_t* previous_;
};
} // namespace debug

} // namespace smf
