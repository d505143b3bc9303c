#include "dvit/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace dvit {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstVec = Eigen::Map<const Eigen::VectorXd>;

std::shared_ptr<Node> parent_of(const Tensor& t) { return t.node_ptr(); }

// Grad buffer of a parent, or an empty span when the parent is constant.
std::span<double> grad_of(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    if (!p.requires_grad) return {};
    return p.ensure_grad();
}

// Extent split of a shape around one axis: (outer, axis, inner).
struct AxisSplit {
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.n = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

// For each flat output index, the flat source index in `in` under broadcasting.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
    const std::size_t rank = out.size();
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t k = 0; k < in.size(); ++k) {
        const std::size_t src_axis = in.size() - 1 - k;
        const std::size_t dst_axis = rank - 1 - k;
        stride[dst_axis] = in[src_axis] == 1 ? 0 : s;
        s *= in[src_axis];
    }
    const std::size_t n = shape_numel(out);
    std::vector<std::size_t> idx(n);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < n; ++i) {
        idx[i] = offset;
        for (std::size_t ax = rank; ax-- > 0;) {
            ++counter[ax];
            offset += stride[ax];
            if (counter[ax] < out[ax]) break;
            offset -= stride[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    return idx;
}

Tensor unary_op(const Tensor& a, const char* name, const std::function<double(double)>& fwd,
                const std::function<double(double, double)>& deriv) {
    auto x = a.data();
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
    if (!detail::should_record({&a})) return detail::make_result(a.shape(), std::move(y));
    std::vector<double> saved_y = y;
    return detail::make_recorded(a.shape(), std::move(y), name, {parent_of(a)},
                                 [deriv, saved_y = std::move(saved_y)](Node& self) {
                                     auto ga = grad_of(self, 0);
                                     const auto& x = self.parents[0]->data;
                                     for (std::size_t i = 0; i < ga.size(); ++i)
                                         ga[i] += self.grad[i] * deriv(x[i], saved_y[i]);
                                 });
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t k = 0; k < rank; ++k) {
        const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
        const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
        out[rank - 1 - k] = std::max(da, db);
    }
    return out;
}

Tensor elementwise(BinaryKind kind, const Tensor& a, const Tensor& b) {
    const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
    const std::size_t n = shape_numel(out_shape);
    const bool same_a = a.shape() == out_shape;
    const bool same_b = b.shape() == out_shape;
    std::vector<std::size_t> ia, ib;
    if (!same_a) ia = broadcast_index(a.shape(), out_shape);
    if (!same_b) ib = broadcast_index(b.shape(), out_shape);
    auto xa = a.data();
    auto xb = b.data();
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = xa[same_a ? i : ia[i]];
        const double v = xb[same_b ? i : ib[i]];
        switch (kind) {
            case BinaryKind::add: y[i] = u + v; break;
            case BinaryKind::sub: y[i] = u - v; break;
            case BinaryKind::mul: y[i] = u * v; break;
            case BinaryKind::div: y[i] = u / v; break;
        }
    }
    if (!detail::should_record({&a, &b})) return detail::make_result(out_shape, std::move(y));
    static constexpr const char* names[] = {"add", "sub", "mul", "div"};
    return detail::make_recorded(
        out_shape, std::move(y), names[static_cast<int>(kind)], {parent_of(a), parent_of(b)},
        [kind, same_a, same_b, ia = std::move(ia), ib = std::move(ib)](Node& self) {
            auto ga = grad_of(self, 0);
            auto gb = grad_of(self, 1);
            const auto& xa = self.parents[0]->data;
            const auto& xb = self.parents[1]->data;
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const std::size_t ja = same_a ? i : ia[i];
                const std::size_t jb = same_b ? i : ib[i];
                const double g = self.grad[i];
                switch (kind) {
                    case BinaryKind::add:
                        if (!ga.empty()) ga[ja] += g;
                        if (!gb.empty()) gb[jb] += g;
                        break;
                    case BinaryKind::sub:
                        if (!ga.empty()) ga[ja] += g;
                        if (!gb.empty()) gb[jb] -= g;
                        break;
                    case BinaryKind::mul:
                        if (!ga.empty()) ga[ja] += g * xb[jb];
                        if (!gb.empty()) gb[jb] += g * xa[ja];
                        break;
                    case BinaryKind::div:
                        if (!ga.empty()) ga[ja] += g / xb[jb];
                        if (!gb.empty()) gb[jb] -= g * xa[ja] / (xb[jb] * xb[jb]);
                        break;
                }
            }
        });
}

Tensor elementwise(UnaryKind kind, const Tensor& a) {
    switch (kind) {
        case UnaryKind::neg:
            return unary_op(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
        case UnaryKind::exp:
            return unary_op(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
        case UnaryKind::log:
            return unary_op(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
        case UnaryKind::sin:
            return unary_op(a, "sin", [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
        case UnaryKind::tanh:
            return unary_op(a, "tanh", [](double x) { return std::tanh(x); },
                            [](double, double y) { return 1.0 - y * y; });
        case UnaryKind::relu:
            return unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                            [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
        case UnaryKind::square:
            return unary_op(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
        case UnaryKind::sqrt:
            return unary_op(a, "sqrt", [](double x) { return std::sqrt(x); },
                            [](double, double y) { return 0.5 / y; });
    }
    throw std::logic_error("unknown unary kind");
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryKind::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryKind::div, a, b); }
Tensor neg(const Tensor& a) { return elementwise(UnaryKind::neg, a); }
Tensor exp(const Tensor& a) { return elementwise(UnaryKind::exp, a); }
Tensor log(const Tensor& a) { return elementwise(UnaryKind::log, a); }
Tensor sin(const Tensor& a) { return elementwise(UnaryKind::sin, a); }
Tensor tanh(const Tensor& a) { return elementwise(UnaryKind::tanh, a); }
Tensor relu(const Tensor& a) { return elementwise(UnaryKind::relu, a); }
Tensor square(const Tensor& a) { return elementwise(UnaryKind::square, a); }
Tensor sqrt(const Tensor& a) { return elementwise(UnaryKind::sqrt, a); }

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_op(a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor ones_like(const Tensor& a) { return Tensor::ones(a.shape()); }
Tensor zeros_like(const Tensor& a) { return Tensor::zeros(a.shape()); }

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    if (!detail::should_record({&a})) return detail::make_result({1}, {total});
    return detail::make_recorded({1}, {total}, "sum", {parent_of(a)}, [](Node& self) {
        auto ga = grad_of(self, 0);
        for (double& g : ga) g += self.grad[0];
    });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
    const AxisSplit s = split_axis(a.shape(), axis);
    Shape out_shape = a.shape();
    if (keepdim || a.rank() == 1) {
        out_shape[axis] = 1;
    } else {
        out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    }
    auto x = a.data();
    std::vector<double> y(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.n; ++k)
            for (std::size_t i = 0; i < s.inner; ++i) y[o * s.inner + i] += x[(o * s.n + k) * s.inner + i];
    if (!detail::should_record({&a})) return detail::make_result(out_shape, std::move(y));
    return detail::make_recorded(out_shape, std::move(y), "sum_axis", {parent_of(a)}, [s](Node& self) {
        auto ga = grad_of(self, 0);
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t k = 0; k < s.n; ++k)
                for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.n + k) * s.inner + i] += self.grad[o * s.inner + i];
    });
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
    return mul_scalar(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    std::vector<double> y(a.data().begin(), a.data().end());
    if (!detail::should_record({&a})) return detail::make_result(std::move(shape), std::move(y));
    return detail::make_recorded(std::move(shape), std::move(y), "reshape", {parent_of(a)}, [](Node& self) {
        auto ga = grad_of(self, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
    const std::size_t rank = a.rank();
    if (order.size() != rank) throw ShapeError("permute order length does not match " + shape_str(a.shape()));
    std::vector<bool> seen(rank, false);
    for (auto ax : order) {
        if (ax >= rank || seen[ax]) throw ShapeError("invalid permutation for " + shape_str(a.shape()));
        seen[ax] = true;
    }
    std::vector<std::size_t> in_stride(rank, 1);
    for (std::size_t ax = rank - 1; ax-- > 0;) in_stride[ax] = in_stride[ax + 1] * a.shape()[ax + 1];
    Shape out_shape(rank);
    std::vector<std::size_t> stride(rank);
    for (std::size_t k = 0; k < rank; ++k) {
        out_shape[k] = a.shape()[order[k]];
        stride[k] = in_stride[order[k]];
    }
    const std::size_t n = a.numel();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < n; ++i) {
        src[i] = offset;
        for (std::size_t ax = rank; ax-- > 0;) {
            ++counter[ax];
            offset += stride[ax];
            if (counter[ax] < out_shape[ax]) break;
            offset -= stride[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    auto x = a.data();
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = x[src[i]];
    if (!detail::should_record({&a})) return detail::make_result(std::move(out_shape), std::move(y));
    return detail::make_recorded(std::move(out_shape), std::move(y), "permute", {parent_of(a)},
                                 [src = std::move(src)](Node& self) {
                                     auto ga = grad_of(self, 0);
                                     for (std::size_t i = 0; i < src.size(); ++i) ga[src[i]] += self.grad[i];
                                 });
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
    std::vector<std::size_t> order(a.rank());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (axis0 >= a.rank() || axis1 >= a.rank()) throw ShapeError("transpose axis out of range for " + shape_str(a.shape()));
    std::swap(order[axis0], order[axis1]);
    return permute(a, order);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    const AxisSplit s = split_axis(a.shape(), axis);
    if (length == 0 || start + length > s.n)
        throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[axis] = length;
    auto x = a.data();
    std::vector<double> y(s.outer * length * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * s.n + start) * s.inner), length * s.inner,
                    y.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
    if (!detail::should_record({&a})) return detail::make_result(std::move(out_shape), std::move(y));
    return detail::make_recorded(std::move(out_shape), std::move(y), "slice", {parent_of(a)},
                                 [s, start, length](Node& self) {
                                     auto ga = grad_of(self, 0);
                                     for (std::size_t o = 0; o < s.outer; ++o)
                                         for (std::size_t j = 0; j < length * s.inner; ++j)
                                             ga[(o * s.n + start) * s.inner + j] += self.grad[o * length * s.inner + j];
                                 });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& ref = parts.front().shape();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != ref.size()) throw ShapeError("concat rank mismatch: " + shape_str(ref) + " vs " + shape_str(p.shape()));
        for (std::size_t ax = 0; ax < ref.size(); ++ax) {
            if (ax != axis && p.shape()[ax] != ref[ax])
                throw ShapeError("concat shape mismatch: " + shape_str(ref) + " vs " + shape_str(p.shape()));
        }
        widths.push_back(p.shape()[axis]);
        total += p.shape()[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = total;
    const AxisSplit s = split_axis(out_shape, axis);
    std::vector<double> y(shape_numel(out_shape));
    std::size_t base = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        auto x = parts[p].data();
        const std::size_t w = widths[p];
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * w * s.inner), w * s.inner,
                        y.begin() + static_cast<std::ptrdiff_t>((o * s.n + base) * s.inner));
        base += w;
    }
    if (!detail::should_record(std::span<const Tensor>(parts))) return detail::make_result(std::move(out_shape), std::move(y));
    std::vector<std::shared_ptr<Node>> parents;
    for (const auto& p : parts) parents.push_back(parent_of(p));
    return detail::make_recorded(std::move(out_shape), std::move(y), "concat", std::move(parents),
                                 [s, widths](Node& self) {
                                     std::size_t base = 0;
                                     for (std::size_t p = 0; p < widths.size(); ++p) {
                                         auto gp = grad_of(self, p);
                                         const std::size_t w = widths[p];
                                         if (!gp.empty()) {
                                             for (std::size_t o = 0; o < s.outer; ++o)
                                                 for (std::size_t j = 0; j < w * s.inner; ++j)
                                                     gp[o * w * s.inner + j] += self.grad[(o * s.n + base) * s.inner + j];
                                         }
                                         base += w;
                                     }
                                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const std::size_t ra = a.rank(), rb = b.rank();
    if (ra < 2 || ra > 3 || rb < 2 || rb > 3) throw ShapeError("matmul expects rank-2 or rank-3 operands, got " +
                                                               shape_str(a.shape()) + " and " + shape_str(b.shape()));
    if (ra == 2 && rb == 3) throw ShapeError("matmul cannot broadcast a rank-2 left operand over " + shape_str(b.shape()));
    const std::size_t batch = ra == 3 ? a.shape()[0] : 1;
    if (rb == 3 && b.shape()[0] != batch)
        throw ShapeError("matmul batch mismatch: " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t m = a.shape()[ra - 2], k = a.shape()[ra - 1];
    const std::size_t kb = b.shape()[rb - 2], n = b.shape()[rb - 1];
    if (k != kb) throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const bool b_batched = rb == 3;
    Shape out_shape = ra == 3 ? Shape{batch, m, n} : Shape{m, n};
    std::vector<double> y(batch * m * n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < batch; ++i) {
        ConstMap A(pa + i * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
        ConstMap B(pb + (b_batched ? i * k * n : 0), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
        MutMap(y.data() + i * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() = A * B;
    }
    if (!detail::should_record({&a, &b})) return detail::make_result(std::move(out_shape), std::move(y));
    return detail::make_recorded(
        std::move(out_shape), std::move(y), "matmul", {parent_of(a), parent_of(b)},
        [batch, m, k, n, b_batched](Node& self) {
            auto ga = grad_of(self, 0);
            auto gb = grad_of(self, 1);
            const double* pa = self.parents[0]->data.data();
            const double* pb = self.parents[1]->data.data();
            for (std::size_t i = 0; i < batch; ++i) {
                ConstMap G(self.grad.data() + i * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
                ConstMap B(pb + (b_batched ? i * k * n : 0), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
                ConstMap A(pa + i * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
                if (!ga.empty())
                    MutMap(ga.data() + i * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)).noalias() +=
                        G * B.transpose();
                if (!gb.empty())
                    MutMap(gb.data() + (b_batched ? i * k * n : 0), static_cast<Eigen::Index>(k),
                           static_cast<Eigen::Index>(n))
                        .noalias() += A.transpose() * G;
            }
        });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) throw ShapeError("linear weight must be rank 2, got " + shape_str(weight.shape()));
    const std::size_t out_f = weight.shape()[0], in_f = weight.shape()[1];
    if (x.shape().back() != in_f)
        throw ShapeError("linear input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.shape()[0] != out_f))
        throw ShapeError("linear bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
    const std::size_t rows = x.numel() / in_f;
    Shape out_shape = x.shape();
    out_shape.back() = out_f;
    std::vector<double> y(rows * out_f);
    ConstMap X(x.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in_f));
    ConstMap W(weight.data().data(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in_f));
    MutMap Y(y.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out_f));
    Y.noalias() = X * W.transpose();
    if (has_bias) Y.rowwise() += ConstVec(bias.data().data(), static_cast<Eigen::Index>(out_f)).transpose();

    const bool record = has_bias ? detail::should_record({&x, &weight, &bias}) : detail::should_record({&x, &weight});
    if (!record) return detail::make_result(std::move(out_shape), std::move(y));
    std::vector<std::shared_ptr<Node>> parents{parent_of(x), parent_of(weight)};
    if (has_bias) parents.push_back(parent_of(bias));
    return detail::make_recorded(
        std::move(out_shape), std::move(y), "linear", std::move(parents), [rows, in_f, out_f, has_bias](Node& self) {
            ConstMap G(self.grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out_f));
            auto gx = grad_of(self, 0);
            auto gw = grad_of(self, 1);
            const auto& xd = self.parents[0]->data;
            const auto& wd = self.parents[1]->data;
            if (!gx.empty()) {
                ConstMap W(wd.data(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in_f));
                MutMap(gx.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in_f)).noalias() += G * W;
            }
            if (!gw.empty()) {
                ConstMap X(xd.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in_f));
                MutMap(gw.data(), static_cast<Eigen::Index>(out_f), static_cast<Eigen::Index>(in_f)).noalias() +=
                    G.transpose() * X;
            }
            if (has_bias) {
                auto gb = grad_of(self, 2);
                if (!gb.empty()) {
                    Eigen::Map<Eigen::VectorXd>(gb.data(), static_cast<Eigen::Index>(out_f)) +=
                        G.colwise().sum().transpose();
                }
            }
        });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
    const AxisSplit s = split_axis(a.shape(), axis);
    auto x = a.data();
    std::vector<double> y(x.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.n * s.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < s.n; ++k) mx = std::max(mx, x[base + k * s.inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.n; ++k) {
                const double e = std::exp(x[base + k * s.inner] - mx);
                y[base + k * s.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < s.n; ++k) y[base + k * s.inner] /= z;
        }
    }
    if (!detail::should_record({&a})) return detail::make_result(a.shape(), std::move(y));
    std::vector<double> saved = y;
    return detail::make_recorded(a.shape(), std::move(y), "softmax", {parent_of(a)},
                                 [s, saved = std::move(saved)](Node& self) {
                                     auto ga = grad_of(self, 0);
                                     for (std::size_t o = 0; o < s.outer; ++o) {
                                         for (std::size_t i = 0; i < s.inner; ++i) {
                                             const std::size_t base = o * s.n * s.inner + i;
                                             double dot = 0.0;
                                             for (std::size_t k = 0; k < s.n; ++k)
                                                 dot += self.grad[base + k * s.inner] * saved[base + k * s.inner];
                                             for (std::size_t k = 0; k < s.n; ++k) {
                                                 const std::size_t j = base + k * s.inner;
                                                 ga[j] += saved[j] * (self.grad[j] - dot);
                                             }
                                         }
                                     }
                                 });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
    const AxisSplit s = split_axis(a.shape(), axis);
    auto x = a.data();
    std::vector<double> y(x.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.n * s.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < s.n; ++k) mx = std::max(mx, x[base + k * s.inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.n; ++k) z += std::exp(x[base + k * s.inner] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t k = 0; k < s.n; ++k) y[base + k * s.inner] = x[base + k * s.inner] - lse;
        }
    }
    if (!detail::should_record({&a})) return detail::make_result(a.shape(), std::move(y));
    std::vector<double> saved = y;
    return detail::make_recorded(a.shape(), std::move(y), "log_softmax", {parent_of(a)},
                                 [s, saved = std::move(saved)](Node& self) {
                                     auto ga = grad_of(self, 0);
                                     for (std::size_t o = 0; o < s.outer; ++o) {
                                         for (std::size_t i = 0; i < s.inner; ++i) {
                                             const std::size_t base = o * s.n * s.inner + i;
                                             double gsum = 0.0;
                                             for (std::size_t k = 0; k < s.n; ++k) gsum += self.grad[base + k * s.inner];
                                             for (std::size_t k = 0; k < s.n; ++k) {
                                                 const std::size_t j = base + k * s.inner;
                                                 ga[j] += self.grad[j] - std::exp(saved[j]) * gsum;
                                             }
                                         }
                                     }
                                 });
}

Tensor gelu(const Tensor& a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    return unary_op(
        a, "gelu",
        [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
        [](double x, double) {
            const double t = std::tanh(c * (x + k * x * x * x));
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
        });
}

namespace {

GradCheckResult compare_gradients(std::span<const double> analytic, const std::function<double(std::size_t, double)>& probe,
                                  std::span<double> values, double eps, std::size_t max_elements) {
    GradCheckResult result;
    const std::size_t n = values.size();
    const std::size_t count = max_elements == 0 ? n : std::min(n, max_elements);
    for (std::size_t j = 0; j < count; ++j) {
        const std::size_t i = count == n ? j : (j * n) / count;
        const double original = values[i];
        const double up = original + eps, down = original - eps;
        const double plus = probe(i, up);
        const double minus = probe(i, down);
        values[i] = original;
        const double numeric = (plus - minus) / (up - down);
        const double a = analytic.empty() ? 0.0 : analytic[i];
        if (!std::isfinite(plus) || !std::isfinite(minus) || !std::isfinite(a)) {
            result.finite = false;
            result.max_rel_error = std::numeric_limits<double>::infinity();
            return result;
        }
        const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
        result.max_rel_error = std::max(result.max_rel_error, err);
    }
    return result;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps,
                           std::size_t max_elements) {
    if (!(eps > 0.0)) throw std::invalid_argument("grad_check eps must be positive");
    Tensor leaf = x.detach();
    leaf.set_requires_grad(true);
    return grad_check_inplace([&] { return f(leaf); }, leaf, eps, max_elements);
}

GradCheckResult grad_check_inplace(const std::function<Tensor()>& f, Tensor& param, double eps,
                                   std::size_t max_elements) {
    if (!(eps > 0.0)) throw std::invalid_argument("grad_check eps must be positive");
    const bool was_tracking = param.requires_grad();
    param.set_requires_grad(true);
    param.zero_grad();
    Tensor y = f();
    if (y.numel() != 1) throw ShapeError("grad_check needs a scalar-valued function, got " + shape_str(y.shape()));
    GradCheckResult early;
    if (!std::isfinite(y.item())) {
        early.finite = false;
        early.max_rel_error = std::numeric_limits<double>::infinity();
        param.set_requires_grad(was_tracking);
        return early;
    }
    std::vector<double> analytic;
    if (y.requires_grad()) {
        y.backward();
        if (param.has_grad()) analytic.assign(param.grad().begin(), param.grad().end());
    }
    param.zero_grad();
    auto values = param.mutable_data();
    GradCheckResult result;
    {
        NoGradGuard guard;
        result = compare_gradients(
            analytic,
            [&](std::size_t i, double v) {
                values[i] = v;
                return f().item();
            },
            values, eps, max_elements);
    }
    param.set_requires_grad(was_tracking);
    return result;
}

}  // namespace dvit
