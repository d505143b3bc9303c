#pragma once

#include <functional>
#include <vector>

#include "dvit/tensor.hpp"

namespace dvit {

// Broadcasting follows trailing-dimension alignment: shapes are right-aligned
// and each dimension pair must be equal or contain a 1.
Shape broadcast_shapes(const Shape& a, const Shape& b);

enum class BinaryKind { add, sub, mul, div };
enum class UnaryKind { neg, exp, log, sin, tanh, relu, square, sqrt };

Tensor elementwise(BinaryKind kind, const Tensor& a, const Tensor& b);
Tensor elementwise(UnaryKind kind, const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }

Tensor ones_like(const Tensor& a);
Tensor zeros_like(const Tensor& a);

// Reductions. The full reductions return shape (1,).
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);

// Shape manipulation. All are differentiable and copy.
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

/// Matrix product for rank-2 and rank-3 operands. A rank-3 left operand may
/// multiply a rank-2 right operand (shared across the batch).
Tensor matmul(const Tensor& a, const Tensor& b);

/// y = x W^T + b over the last axis of x. W is (out, in); bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Softmax along `axis` with max subtraction.
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

/// Tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& a);

struct GradCheckResult {
    double max_rel_error = 0.0;
    bool finite = true;
};

/// Compares the analytic gradient of scalar f at x with central differences.
///
/// Error per element is |analytic - numeric| / max(1, |numeric|). Non-finite
/// function values or gradients set `finite = false` and an infinite error,
/// so discontinuities cannot pass silently. When `max_elements` is non-zero
/// only that many evenly spaced elements are probed.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5,
                           std::size_t max_elements = 0);

/// Same as grad_check but perturbs an existing tensor in place (for checking
/// parameters captured inside f).
GradCheckResult grad_check_inplace(const std::function<Tensor()>& f, Tensor& param, double eps = 1e-5,
                                   std::size_t max_elements = 0);

}  // namespace dvit
