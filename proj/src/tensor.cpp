#include "dvit/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dvit {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ',';
        out << shape[i];
    }
    if (shape.size() == 1) out << ',';
    out << ')';
    return out.str();
}

std::span<double> Node::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

void Node::accumulate(std::span<const double> g) {
    auto dst = ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (values.size() != shape_numel(shape)) {
        throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return shape()[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() { return node_->data; }

std::vector<double> Tensor::to_vector() const { return node_->data; }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("index rank does not match " + shape_str(shape()));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= shape()[axis]) throw ShapeError("index out of range for " + shape_str(shape()));
        flat = flat * shape()[axis] + i;
        ++axis;
    }
    return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

Tensor Tensor::grad_tensor() const {
    if (!has_grad()) return Tensor::zeros(shape());
    return Tensor::from(shape(), node_->grad);
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor::from(shape(), node_->data); }

Tensor Tensor::clone() const { return Tensor::from(shape(), node_->data, requires_grad()); }

void Tensor::backward() const {
    if (!defined()) throw std::logic_error("backward() on an undefined tensor");
    if (numel() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));
    if (!node_->requires_grad) throw std::logic_error("backward() on a tensor that is not connected to a tape");
    Tape::record(*this).run(*node_);
}

Tape Tape::record(const Tensor& root) {
    Tape tape;
    // Iterative post-order DFS; parents are visited in declaration order so the
    // resulting order is a deterministic function of the graph.
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
            continue;
        }
        tape.order_.push_back(node);
        stack.pop_back();
    }
    return tape;
}

void Tape::run(Node& root) {
    // Intermediate grads from an earlier pass would be propagated twice.
    for (Node* node : order_) {
        if (!node->is_leaf()) node->grad.clear();
    }
    root.ensure_grad()[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node* node = *it;
        if (node->is_leaf() || node->grad.empty()) continue;
        node->backward_fn(*node);
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!g_grad_enabled) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t && t->requires_grad(); });
}

bool should_record(std::span<const Tensor> inputs) {
    if (!g_grad_enabled) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

Tensor make_result(Shape shape, std::vector<double> data) { return Tensor::from(std::move(shape), std::move(data)); }

Tensor make_recorded(Shape shape, std::vector<double> data, const char* op,
                     std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> backward_fn) {
    Tensor out = Tensor::from(std::move(shape), std::move(data));
    Node* node = out.node();
    node->requires_grad = true;
    node->op = op;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
    return out;
}

}  // namespace detail

}  // namespace dvit
