#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dvit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Node;

/// Dense row-major array of doubles with optional reverse-mode gradient.
///
/// A Tensor is a cheap handle onto a shared node. Copies alias the same
/// storage; every op returns a fresh node, so values are never mutated after
/// construction except through mutable_data() (parameter updates, loading)
/// and gradient accumulation during backward().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    std::vector<double> to_vector() const;
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const double> grad() const;
    Tensor grad_tensor() const;
    void zero_grad();

    /// Same values, no history, no gradient tracking.
    Tensor detach() const;
    /// Deep copy of values into a new leaf.
    Tensor clone() const;

    /// Runs reverse-mode differentiation from this scalar.
    void backward() const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node> node_;
};

/// Graph node. Ops fill `parents` and `backward_fn` only when recording.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents.
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    std::span<double> ensure_grad();
    void accumulate(std::span<const double> g);
};

/// Reverse-topological traversal of the graph reachable from a root.
class Tape {
public:
    static Tape record(const Tensor& root);

    std::size_t size() const { return order_.size(); }
    // Topological order (parents before children).
    const std::vector<Node*>& order() const { return order_; }

    void run(Node& root);

private:
    std::vector<Node*> order_;
};

bool grad_enabled();

/// Disables graph recording for its lifetime on the current thread.
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

// True when a new op on these inputs must be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(std::span<const Tensor> inputs);

Tensor make_result(Shape shape, std::vector<double> data);
Tensor make_recorded(Shape shape, std::vector<double> data, const char* op,
                     std::vector<std::shared_ptr<Node>> parents,
                     std::function<void(Node&)> backward_fn);

}  // namespace detail

}  // namespace dvit
