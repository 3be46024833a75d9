#include "lpn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <sstream>
#include <unordered_set>

#include "lpn/error.hpp"

namespace lpn {

namespace {

std::atomic<std::uint64_t> next_node_id{1};
thread_local bool tls_grad_enabled = true;

std::mutex fault_mutex;
std::string fault_op;
std::atomic<bool> fault_set{false};

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> value, bool requires_grad) {
    if (shape_numel(shape) != value.size()) {
        throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(value.size()));
    }
    for (double v : value) {
        if (!std::isfinite(v)) throw NumericError("tensor: non-finite value in leaf");
    }
    auto node = std::make_shared<Node>();
    node->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return node;
}

} // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<double>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

Tensor::Tensor(Shape shape, bool requires_grad)
    : node_(new_node(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad)) {}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(new_node(std::move(shape), std::move(values), requires_grad)) {}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
    return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> v(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("tensor: use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) {
        throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(s));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::values() const {
    shape();
    return node_->value;
}

std::span<double> Tensor::mutable_values() {
    shape();
    return node_->value;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw DimensionError("tensor: item() on non-scalar " + shape_str(shape()));
    }
    return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw DimensionError("tensor: at(r, c) on " + shape_str(shape()));
    return node_->value[r * node_->shape[1] + c];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    shape();
    node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor: no gradient has been computed");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return clone(false); }

Tensor Tensor::clone(bool requires_grad) const {
    return Tensor(shape(), node_->value, requires_grad);
}

ComputationTape ComputationTape::record(const Tensor& root) {
    ComputationTape tape;
    std::unordered_set<const Node*> seen;
    std::vector<Node*> stack{root.node().get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        tape.nodes_.push_back(n);
        for (auto& p : n->parents) stack.push_back(p.get());
    }
    // Node ids are assigned at creation, after all inputs exist.
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const Node* a, const Node* b) { return a->id < b->id; });
    return tape;
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw ContractError("backward: undefined loss");
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    Node& root = *loss.node();
    if (root.consumed) {
        throw ContractError("backward: already ran for this loss; reset grads and rebuild");
    }
    if (!root.requires_grad) {
        throw ContractError("backward: loss does not depend on any requires_grad tensor");
    }
    ComputationTape tape = ComputationTape::record(loss);
    root.grad_buffer()[0] += 1.0;
    const auto& nodes = tape.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        Node& n = **it;
        if (n.backward && !n.grad.empty()) n.backward(n);
    }
    root.consumed = true;
}

bool grad_enabled() { return tls_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> parents, BackwardFn fn) {
    if (shape_numel(shape) != value.size()) {
        throw DimensionError(std::string(op) + ": result shape " + shape_str(shape) +
                             " does not hold " + std::to_string(value.size()) + " values");
    }
    for (double v : value) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": produced a non-finite value");
        }
    }
    auto node = std::make_shared<Node>();
    node->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool track = false;
    if (tls_grad_enabled) {
        for (const auto& p : parents) track = track || p.requires_grad();
    }
    if (track) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::move(fn);
    }
    return Tensor(std::move(node));
}

} // namespace detail

namespace testing {

void set_gradient_fault(const std::string& op_name) {
    std::lock_guard lock(fault_mutex);
    fault_op = op_name;
    fault_set.store(!op_name.empty());
}

void clear_gradient_fault() { set_gradient_fault(""); }

bool gradient_fault_active(const char* op_name) {
    if (!fault_set.load()) return false;
    std::lock_guard lock(fault_mutex);
    return fault_op == op_name;
}

} // namespace testing

} // namespace lpn
