#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lpn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

// Gradient rule of a recorded operation: reads the output node's grad and
// accumulates into the grads of its parents.
using BackwardFn = std::function<void(Node& out)>;

struct Node {
    std::uint64_t id = 0;  // creation order; doubles as the tape position
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until touched by backward
    bool requires_grad = false;
    bool consumed = false;     // set once backward ran from this node
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;

    std::vector<double>& grad_buffer();  // allocates zeros on first use
};

/// Dense row-major double tensor with reverse-mode differentiation.
///
/// A Tensor is a shared handle: copies alias the same storage. Values are
/// immutable once an operation produced them; leaves (parameters) may be
/// updated in place through `mutable_values()` by the optimizer.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor vector(std::vector<double> values, bool requires_grad = false);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> values() const;
    std::span<double> mutable_values();
    double item() const;
    double at(std::size_t i) const { return values()[i]; }
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Fresh leaf with a copy of the values and no history.
    Tensor detach() const;
    Tensor clone(bool requires_grad) const;

    const std::shared_ptr<Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node> node_;
};

// Ordered record of the operations that produced a tensor; every node's
// inputs precede it.
class ComputationTape {
public:
    static ComputationTape record(const Tensor& root);
    const std::vector<Node*>& nodes() const { return nodes_; }

private:
    std::vector<Node*> nodes_;
};

/// Populates grad for every requires_grad tensor reachable from `loss`.
/// Leaf grads accumulate until `zero_grad()`; calling backward a second time
/// on the same loss throws ContractError.
void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {

// Builds an op result. Parents are recorded (and `fn` kept) only if grad mode
// is on and at least one parent requires grad. Throws NumericError on
// non-finite output.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> parents, BackwardFn fn);

} // namespace detail

namespace testing {

// Negative-control hook: while set, the backward rule of the named op scales
// its input gradients by (1 + 1e-2). Used by gradcheck fault injection.
void set_gradient_fault(const std::string& op_name);
void clear_gradient_fault();
bool gradient_fault_active(const char* op_name);

} // namespace testing

} // namespace lpn
