#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mopeft/rng.hpp"

namespace mopeft {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += " x ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline size_t shape_numel(const Shape& s) {
    if (s.empty()) throw std::invalid_argument("tensor shape must have at least one extent");
    size_t n = 1;
    for (int e : s) {
        if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(s));
        n *= static_cast<size_t>(e);
    }
    return n;
}

// One node of the autodiff graph. Leaves have no backward rule; op nodes hold
// shared references to their inputs, so the graph is acyclic by construction
// and dies with the last handle to its output.
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // lazily allocated; when present, same length as data
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(TensorImpl&)> backward_fn;  // null for leaves
    const char* op = "leaf";

    bool is_leaf() const { return !backward_fn; }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Value-semantics handle over a shared graph node.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl>();
        size_t n = shape_numel(shape);
        impl->shape = std::move(shape);
        impl->data.assign(n, value);
        impl->requires_grad = requires_grad;
        return Tensor(impl);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        size_t n = shape_numel(shape);
        if (values.size() != n)
            throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(shape));
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(values);
        impl->requires_grad = requires_grad;
        return Tensor(impl);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev,
                        bool requires_grad = false) {
        size_t n = shape_numel(shape);
        std::normal_distribution<double> dist(0.0, stddev);
        std::vector<double> v(n);
        for (double& x : v) x = dist(rng);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int extent(int d) const { return impl_->shape[static_cast<size_t>(d)]; }
    size_t numel() const { return impl_->data.size(); }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    double item() const {
        if (numel() != 1)
            throw std::invalid_argument("item() requires a one-element tensor, got " +
                                        shape_str(shape()));
        return impl_->data[0];
    }

    // 2-D accessors (row-major)
    double operator()(int r, int c) const { return impl_->data[idx2(r, c)]; }
    double& operator()(int r, int c) { return impl_->data[idx2(r, c)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    // Allocates a zero gradient buffer on first access.
    const std::vector<double>& grad() const {
        impl_->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() {
        impl_->grad.assign(impl_->data.size(), 0.0);
    }

    const char* op_name() const { return impl_->op; }

  private:
    size_t idx2(int r, int c) const {
        return static_cast<size_t>(r) * static_cast<size_t>(impl_->shape[1]) +
               static_cast<size_t>(c);
    }
    std::shared_ptr<TensorImpl> impl_;
};

// Builds an op node: output data plus a backward rule closing over the inputs.
// The rule reads self.grad and accumulates into each input's grad (checking
// the input's requires_grad itself). Public so higher layers can define
// fused differentiable ops on top of the same graph machinery.
inline Tensor make_op(const char* name, Shape shape, std::vector<double> data,
                      std::vector<Tensor> inputs,
                      std::function<void(TensorImpl&)> backward_fn) {
    Tensor out = Tensor::from(std::move(shape), std::move(data));
    auto& impl = *out.impl();
    impl.op = name;
    bool rg = false;
    for (const Tensor& t : inputs) rg = rg || t.requires_grad();
    if (rg) {
        impl.requires_grad = true;
        impl.inputs.reserve(inputs.size());
        for (const Tensor& t : inputs) impl.inputs.push_back(t.impl());
        impl.backward_fn = std::move(backward_fn);
    }
    return out;
}

// ---- backward ---------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls; op-node gradients are scratch and reset per call.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                    shape_str(loss.shape()));
    TensorImpl* root = loss.impl().get();
    if (!root->requires_grad) return;  // no trainable leaves reachable

    // iterative DFS postorder
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            TensorImpl* in = node->inputs[next++].get();
            if (in->requires_grad && !visited.count(in)) {
                visited.insert(in);
                stack.emplace_back(in, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (TensorImpl* node : order) {
        if (!node->is_leaf()) node->grad.assign(node->data.size(), 0.0);
    }
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->is_leaf()) node->backward_fn(*node);
    }
}

// ---- gemm kernels (Eigen-backed) --------------------------------------------

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using MapC = Eigen::Map<const RowMat>;

// c[m x p] (+)= a[m x n] * b[n x p]
inline void gemm_nn(const double* a, const double* b, double* c, int m, int n, int p,
                    bool accumulate) {
    MapC A(a, m, n), B(b, n, p);
    MapM C(c, m, p);
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// c[m x p] (+)= a[m x n] * b[p x n]^T
inline void gemm_nt(const double* a, const double* b, double* c, int m, int n, int p,
                    bool accumulate) {
    MapC A(a, m, n), B(b, p, n);
    MapM C(c, m, p);
    if (accumulate)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

// c[m x p] (+)= a[n x m]^T * b[n x p]
inline void gemm_tn(const double* a, const double* b, double* c, int m, int n, int p,
                    bool accumulate) {
    MapC A(a, n, m), B(b, n, p);
    MapM C(c, m, p);
    if (accumulate)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

inline void check_rank2(const Tensor& t, const char* who) {
    if (t.rank() != 2)
        throw std::invalid_argument(std::string(who) + " expects a rank-2 tensor, got " +
                                    shape_str(t.shape()));
}

inline bool is_scalar(const Tensor& t) { return t.numel() == 1; }

inline void check_finite(const Tensor& t, const char* who) {
    for (double v : t.data())
        if (!std::isfinite(v))
            throw std::domain_error(std::string(who) + ": non-finite input value");
}

}  // namespace detail

// ---- elementwise ops ---------------------------------------------------------
// Broadcasting: equal shapes, or one operand with a single element.

namespace detail {

enum class Bcast { kEqual, kScalarLhs, kScalarRhs };

inline Bcast binary_mode(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() == b.shape()) return Bcast::kEqual;
    if (is_scalar(b)) return Bcast::kScalarRhs;  // checked first so a one-element
    if (is_scalar(a)) return Bcast::kScalarLhs;  // lhs keeps its own shape
    throw std::invalid_argument(std::string(who) + ": incompatible shapes " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    auto mode = detail::binary_mode(a, b, "add");
    const Tensor& big = (mode == detail::Bcast::kScalarLhs) ? b : a;
    std::vector<double> out(big.numel());
    const auto& da = a.data();
    const auto& db = b.data();
    switch (mode) {
        case detail::Bcast::kEqual:
            for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
            break;
        case detail::Bcast::kScalarLhs:
            for (size_t i = 0; i < out.size(); ++i) out[i] = da[0] + db[i];
            break;
        case detail::Bcast::kScalarRhs:
            for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[0];
            break;
    }
    return make_op("add", big.shape(), std::move(out), {a, b}, [mode](TensorImpl& self) {
        auto& ia = *self.inputs[0];
        auto& ib = *self.inputs[1];
        if (ia.requires_grad) {
            ia.ensure_grad();
            if (mode == detail::Bcast::kScalarLhs) {
                for (double g : self.grad) ia.grad[0] += g;
            } else {
                for (size_t i = 0; i < self.grad.size(); ++i) ia.grad[i] += self.grad[i];
            }
        }
        if (ib.requires_grad) {
            ib.ensure_grad();
            if (mode == detail::Bcast::kScalarRhs) {
                for (double g : self.grad) ib.grad[0] += g;
            } else {
                for (size_t i = 0; i < self.grad.size(); ++i) ib.grad[i] += self.grad[i];
            }
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    auto mode = detail::binary_mode(a, b, "sub");
    const Tensor& big = (mode == detail::Bcast::kScalarLhs) ? b : a;
    std::vector<double> out(big.numel());
    const auto& da = a.data();
    const auto& db = b.data();
    switch (mode) {
        case detail::Bcast::kEqual:
            for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
            break;
        case detail::Bcast::kScalarLhs:
            for (size_t i = 0; i < out.size(); ++i) out[i] = da[0] - db[i];
            break;
        case detail::Bcast::kScalarRhs:
            for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[0];
            break;
    }
    return make_op("sub", big.shape(), std::move(out), {a, b}, [mode](TensorImpl& self) {
        auto& ia = *self.inputs[0];
        auto& ib = *self.inputs[1];
        if (ia.requires_grad) {
            ia.ensure_grad();
            if (mode == detail::Bcast::kScalarLhs) {
                for (double g : self.grad) ia.grad[0] += g;
            } else {
                for (size_t i = 0; i < self.grad.size(); ++i) ia.grad[i] += self.grad[i];
            }
        }
        if (ib.requires_grad) {
            ib.ensure_grad();
            if (mode == detail::Bcast::kScalarRhs) {
                for (double g : self.grad) ib.grad[0] -= g;
            } else {
                for (size_t i = 0; i < self.grad.size(); ++i) ib.grad[i] -= self.grad[i];
            }
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    auto mode = detail::binary_mode(a, b, "mul");
    const Tensor& big = (mode == detail::Bcast::kScalarLhs) ? b : a;
    std::vector<double> out(big.numel());
    const auto& da = a.data();
    const auto& db = b.data();
    switch (mode) {
        case detail::Bcast::kEqual:
            for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
            break;
        case detail::Bcast::kScalarLhs:
            for (size_t i = 0; i < out.size(); ++i) out[i] = da[0] * db[i];
            break;
        case detail::Bcast::kScalarRhs:
            for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[0];
            break;
    }
    return make_op("mul", big.shape(), std::move(out), {a, b}, [mode](TensorImpl& self) {
        auto& ia = *self.inputs[0];
        auto& ib = *self.inputs[1];
        if (ia.requires_grad) {
            ia.ensure_grad();
            switch (mode) {
                case detail::Bcast::kEqual:
                    for (size_t i = 0; i < self.grad.size(); ++i)
                        ia.grad[i] += self.grad[i] * ib.data[i];
                    break;
                case detail::Bcast::kScalarLhs:
                    for (size_t i = 0; i < self.grad.size(); ++i)
                        ia.grad[0] += self.grad[i] * ib.data[i];
                    break;
                case detail::Bcast::kScalarRhs:
                    for (size_t i = 0; i < self.grad.size(); ++i)
                        ia.grad[i] += self.grad[i] * ib.data[0];
                    break;
            }
        }
        if (ib.requires_grad) {
            ib.ensure_grad();
            switch (mode) {
                case detail::Bcast::kEqual:
                    for (size_t i = 0; i < self.grad.size(); ++i)
                        ib.grad[i] += self.grad[i] * ia.data[i];
                    break;
                case detail::Bcast::kScalarRhs:
                    for (size_t i = 0; i < self.grad.size(); ++i)
                        ib.grad[0] += self.grad[i] * ia.data[i];
                    break;
                case detail::Bcast::kScalarLhs:
                    for (size_t i = 0; i < self.grad.size(); ++i)
                        ib.grad[i] += self.grad[i] * ia.data[0];
                    break;
            }
        }
    });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * c;
    return make_op("scale", x.shape(), std::move(out), {x}, [c](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i] * c;
    });
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-dx[i]));
    std::vector<double> y = out;  // cached for the backward rule
    return make_op("sigmoid", x.shape(), std::move(out), {x},
                   [y = std::move(y)](TensorImpl& self) {
                       auto& in = *self.inputs[0];
                       if (!in.requires_grad) return;
                       in.ensure_grad();
                       for (size_t i = 0; i < self.grad.size(); ++i)
                           in.grad[i] += self.grad[i] * y[i] * (1.0 - y[i]);
                   });
}

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = dx[i] > 0.0 ? dx[i] : 0.0;
    return make_op("relu", x.shape(), std::move(out), {x}, [](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (in.data[i] > 0.0) in.grad[i] += self.grad[i];
    });
}

namespace detail {
inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double gelu_deriv(double x) {
    const double kInvSqrt2Pi = 0.3989422804014327;
    double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}
}  // namespace detail

inline Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = detail::gelu_value(dx[i]);
    return make_op("gelu", x.shape(), std::move(out), {x}, [](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            in.grad[i] += self.grad[i] * detail::gelu_deriv(in.data[i]);
    });
}

inline Tensor sqrt(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        if (dx[i] < 0.0) throw std::domain_error("sqrt: negative input value");
        out[i] = std::sqrt(dx[i]);
    }
    std::vector<double> y = out;
    return make_op("sqrt", x.shape(), std::move(out), {x}, [y = std::move(y)](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            in.grad[i] += self.grad[i] * 0.5 / y[i];
    });
}

inline Tensor log(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        if (dx[i] <= 0.0) throw std::domain_error("log: non-positive input value");
        out[i] = std::log(dx[i]);
    }
    return make_op("log", x.shape(), std::move(out), {x}, [](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            in.grad[i] += self.grad[i] / in.data[i];
    });
}

inline Tensor exp(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(dx[i]);
    std::vector<double> y = out;
    return make_op("exp", x.shape(), std::move(out), {x}, [y = std::move(y)](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i] * y[i];
    });
}

// ---- matrix ops --------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_rank2(a, "matmul");
    detail::check_rank2(b, "matmul");
    if (a.extent(1) != b.extent(0))
        throw std::invalid_argument("matmul shape mismatch: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    int m = a.extent(0), n = a.extent(1), p = b.extent(1);
    std::vector<double> out(static_cast<size_t>(m) * p);
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, n, p, false);
    return make_op("matmul", {m, p}, std::move(out), {a, b}, [m, n, p](TensorImpl& self) {
        auto& ia = *self.inputs[0];
        auto& ib = *self.inputs[1];
        if (ia.requires_grad) {
            ia.ensure_grad();
            detail::gemm_nt(self.grad.data(), ib.data.data(), ia.grad.data(), m, p, n, true);
        }
        if (ib.requires_grad) {
            ib.ensure_grad();
            detail::gemm_tn(ia.data.data(), self.grad.data(), ib.grad.data(), n, m, p, true);
        }
    });
}

inline Tensor transpose(const Tensor& x) {
    detail::check_rank2(x, "transpose");
    int r = x.extent(0), c = x.extent(1);
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(j) * r + i] = dx[static_cast<size_t>(i) * c + j];
    return make_op("transpose", {c, r}, std::move(out), {x}, [r, c](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                in.grad[static_cast<size_t>(i) * c + j] +=
                    self.grad[static_cast<size_t>(j) * r + i];
    });
}

// Softmax over the last extent, max-subtracted per slice.
inline Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1 || x.extent(x.rank() - 1) < 1)
        throw std::invalid_argument("softmax_lastdim: last extent must be >= 1, got " +
                                    shape_str(x.shape()));
    detail::check_finite(x, "softmax_lastdim");
    int cols = x.extent(x.rank() - 1);
    size_t rows = x.numel() / static_cast<size_t>(cols);
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    for (size_t r = 0; r < rows; ++r) {
        const double* xi = dx.data() + r * cols;
        double* yi = out.data() + r * cols;
        double mx = xi[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            sum += yi[j];
        }
        for (int j = 0; j < cols; ++j) yi[j] /= sum;
    }
    std::vector<double> y = out;
    return make_op("softmax_lastdim", x.shape(), std::move(out), {x},
                   [y = std::move(y), rows, cols](TensorImpl& self) {
                       auto& in = *self.inputs[0];
                       if (!in.requires_grad) return;
                       in.ensure_grad();
                       for (size_t r = 0; r < rows; ++r) {
                           const double* yi = y.data() + r * cols;
                           const double* gi = self.grad.data() + r * cols;
                           double dot = 0.0;
                           for (int j = 0; j < cols; ++j) dot += gi[j] * yi[j];
                           double* di = in.grad.data() + r * cols;
                           for (int j = 0; j < cols; ++j) di[j] += yi[j] * (gi[j] - dot);
                       }
                   });
}

// ---- row/column structured ops ----------------------------------------------

// [R x C] -> [R x 1], sum over the last dim.
inline Tensor row_sum(const Tensor& x) {
    detail::check_rank2(x, "row_sum");
    int r = x.extent(0), c = x.extent(1);
    std::vector<double> out(static_cast<size_t>(r), 0.0);
    const auto& dx = x.data();
    for (int i = 0; i < r; ++i) {
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += dx[static_cast<size_t>(i) * c + j];
        out[static_cast<size_t>(i)] = s;
    }
    return make_op("row_sum", {r, 1}, std::move(out), {x}, [r, c](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                in.grad[static_cast<size_t>(i) * c + j] += self.grad[static_cast<size_t>(i)];
    });
}

// [R x C] -> [1 x C], mean over rows.
inline Tensor mean_rows(const Tensor& x) {
    detail::check_rank2(x, "mean_rows");
    int r = x.extent(0), c = x.extent(1);
    std::vector<double> out(static_cast<size_t>(c), 0.0);
    const auto& dx = x.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(j)] += dx[static_cast<size_t>(i) * c + j];
    for (double& v : out) v /= r;
    return make_op("mean_rows", {1, c}, std::move(out), {x}, [r, c](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                in.grad[static_cast<size_t>(i) * c + j] += self.grad[static_cast<size_t>(j)] / r;
    });
}

// x[R x C] - col[R x 1], broadcast over columns.
inline Tensor sub_col(const Tensor& x, const Tensor& col) {
    detail::check_rank2(x, "sub_col");
    detail::check_rank2(col, "sub_col");
    int r = x.extent(0), c = x.extent(1);
    if (col.extent(0) != r || col.extent(1) != 1)
        throw std::invalid_argument("sub_col: column shape " + shape_str(col.shape()) +
                                    " does not match rows of " + shape_str(x.shape()));
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    const auto& dc = col.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(i) * c + j] = dx[static_cast<size_t>(i) * c + j] - dc[static_cast<size_t>(i)];
    return make_op("sub_col", x.shape(), std::move(out), {x, col}, [r, c](TensorImpl& self) {
        auto& ix = *self.inputs[0];
        auto& ic = *self.inputs[1];
        if (ix.requires_grad) {
            ix.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) ix.grad[i] += self.grad[i];
        }
        if (ic.requires_grad) {
            ic.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    ic.grad[static_cast<size_t>(i)] -= self.grad[static_cast<size_t>(i) * c + j];
        }
    });
}

// x[R x C] / col[R x 1], broadcast over columns.
inline Tensor div_col(const Tensor& x, const Tensor& col) {
    detail::check_rank2(x, "div_col");
    detail::check_rank2(col, "div_col");
    int r = x.extent(0), c = x.extent(1);
    if (col.extent(0) != r || col.extent(1) != 1)
        throw std::invalid_argument("div_col: column shape " + shape_str(col.shape()) +
                                    " does not match rows of " + shape_str(x.shape()));
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    const auto& dc = col.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(i) * c + j] = dx[static_cast<size_t>(i) * c + j] / dc[static_cast<size_t>(i)];
    return make_op("div_col", x.shape(), std::move(out), {x, col}, [r, c](TensorImpl& self) {
        auto& ix = *self.inputs[0];
        auto& ic = *self.inputs[1];
        for (int i = 0; i < r; ++i) {
            double d = ic.data[static_cast<size_t>(i)];
            for (int j = 0; j < c; ++j) {
                size_t k = static_cast<size_t>(i) * c + j;
                if (ix.requires_grad) {
                    ix.ensure_grad();
                    ix.grad[k] += self.grad[k] / d;
                }
                if (ic.requires_grad) {
                    ic.ensure_grad();
                    ic.grad[static_cast<size_t>(i)] -= self.grad[k] * ix.data[k] / (d * d);
                }
            }
        }
    });
}

// x[R x C] + v[C] (or [1 x C]), broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    detail::check_rank2(x, "add_rowvec");
    int r = x.extent(0), c = x.extent(1);
    if (static_cast<int>(v.numel()) != c)
        throw std::invalid_argument("add_rowvec: vector shape " + shape_str(v.shape()) +
                                    " does not match columns of " + shape_str(x.shape()));
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    const auto& dv = v.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(i) * c + j] = dx[static_cast<size_t>(i) * c + j] + dv[static_cast<size_t>(j)];
    return make_op("add_rowvec", x.shape(), std::move(out), {x, v}, [r, c](TensorImpl& self) {
        auto& ix = *self.inputs[0];
        auto& iv = *self.inputs[1];
        if (ix.requires_grad) {
            ix.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) ix.grad[i] += self.grad[i];
        }
        if (iv.requires_grad) {
            iv.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    iv.grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i) * c + j];
        }
    });
}

// x[R x C] * v[C] (or [1 x C]), broadcast over rows.
inline Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
    detail::check_rank2(x, "mul_rowvec");
    int r = x.extent(0), c = x.extent(1);
    if (static_cast<int>(v.numel()) != c)
        throw std::invalid_argument("mul_rowvec: vector shape " + shape_str(v.shape()) +
                                    " does not match columns of " + shape_str(x.shape()));
    std::vector<double> out(x.numel());
    const auto& dx = x.data();
    const auto& dv = v.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(i) * c + j] = dx[static_cast<size_t>(i) * c + j] * dv[static_cast<size_t>(j)];
    return make_op("mul_rowvec", x.shape(), std::move(out), {x, v}, [r, c](TensorImpl& self) {
        auto& ix = *self.inputs[0];
        auto& iv = *self.inputs[1];
        if (ix.requires_grad) {
            ix.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    ix.grad[static_cast<size_t>(i) * c + j] +=
                        self.grad[static_cast<size_t>(i) * c + j] * iv.data[static_cast<size_t>(j)];
        }
        if (iv.requires_grad) {
            iv.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    iv.grad[static_cast<size_t>(j)] +=
                        self.grad[static_cast<size_t>(i) * c + j] * ix.data[static_cast<size_t>(i) * c + j];
        }
    });
}

// Same data, new shape; gradient passes straight through.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " has " +
                                    std::to_string(x.numel()) + " elements, target " +
                                    shape_str(shape) + " needs " +
                                    std::to_string(shape_numel(shape)));
    return make_op("reshape", std::move(shape), x.data(), {x}, [](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
    });
}

// ---- slicing / concatenation --------------------------------------------------

inline Tensor slice_cols(const Tensor& x, int start, int len) {
    detail::check_rank2(x, "slice_cols");
    int r = x.extent(0), c = x.extent(1);
    if (start < 0 || len <= 0 || start + len > c)
        throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + len) + ") out of " +
                                    shape_str(x.shape()));
    std::vector<double> out(static_cast<size_t>(r) * len);
    const auto& dx = x.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < len; ++j)
            out[static_cast<size_t>(i) * len + j] = dx[static_cast<size_t>(i) * c + start + j];
    return make_op("slice_cols", {r, len}, std::move(out), {x},
                   [r, c, start, len](TensorImpl& self) {
                       auto& in = *self.inputs[0];
                       if (!in.requires_grad) return;
                       in.ensure_grad();
                       for (int i = 0; i < r; ++i)
                           for (int j = 0; j < len; ++j)
                               in.grad[static_cast<size_t>(i) * c + start + j] +=
                                   self.grad[static_cast<size_t>(i) * len + j];
                   });
}

inline Tensor slice_rows(const Tensor& x, int start, int len) {
    detail::check_rank2(x, "slice_rows");
    int r = x.extent(0), c = x.extent(1);
    if (start < 0 || len <= 0 || start + len > r)
        throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + len) + ") out of " +
                                    shape_str(x.shape()));
    std::vector<double> out(static_cast<size_t>(len) * c);
    const auto& dx = x.data();
    std::copy(dx.begin() + static_cast<size_t>(start) * c,
              dx.begin() + static_cast<size_t>(start + len) * c, out.begin());
    return make_op("slice_rows", {len, c}, std::move(out), {x},
                   [c, start, len](TensorImpl& self) {
                       auto& in = *self.inputs[0];
                       if (!in.requires_grad) return;
                       in.ensure_grad();
                       for (size_t i = 0; i < static_cast<size_t>(len) * c; ++i)
                           in.grad[static_cast<size_t>(start) * c + i] += self.grad[i];
                   });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no tensors given");
    int r = parts[0].extent(0);
    int total = 0;
    for (const Tensor& t : parts) {
        detail::check_rank2(t, "concat_cols");
        if (t.extent(0) != r)
            throw std::invalid_argument("concat_cols: row mismatch " + shape_str(t.shape()));
        total += t.extent(1);
    }
    std::vector<double> out(static_cast<size_t>(r) * total);
    std::vector<int> widths;
    int off = 0;
    for (const Tensor& t : parts) {
        int c = t.extent(1);
        widths.push_back(c);
        const auto& d = t.data();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                out[static_cast<size_t>(i) * total + off + j] = d[static_cast<size_t>(i) * c + j];
        off += c;
    }
    return make_op("concat_cols", {r, total}, std::move(out), parts,
                   [r, total, widths](TensorImpl& self) {
                       int off2 = 0;
                       for (size_t k = 0; k < self.inputs.size(); ++k) {
                           auto& in = *self.inputs[k];
                           int c = widths[k];
                           if (in.requires_grad) {
                               in.ensure_grad();
                               for (int i = 0; i < r; ++i)
                                   for (int j = 0; j < c; ++j)
                                       in.grad[static_cast<size_t>(i) * c + j] +=
                                           self.grad[static_cast<size_t>(i) * total + off2 + j];
                           }
                           off2 += c;
                       }
                   });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::check_rank2(a, "concat_rows");
    detail::check_rank2(b, "concat_rows");
    if (a.extent(1) != b.extent(1))
        throw std::invalid_argument("concat_rows: column mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    int ra = a.extent(0), rb = b.extent(0), c = a.extent(1);
    std::vector<double> out;
    out.reserve(a.numel() + b.numel());
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    return make_op("concat_rows", {ra + rb, c}, std::move(out), {a, b},
                   [ra, rb, c](TensorImpl& self) {
                       auto& ia = *self.inputs[0];
                       auto& ib = *self.inputs[1];
                       if (ia.requires_grad) {
                           ia.ensure_grad();
                           for (size_t i = 0; i < static_cast<size_t>(ra) * c; ++i)
                               ia.grad[i] += self.grad[i];
                       }
                       if (ib.requires_grad) {
                           ib.ensure_grad();
                           for (size_t i = 0; i < static_cast<size_t>(rb) * c; ++i)
                               ib.grad[i] += self.grad[static_cast<size_t>(ra) * c + i];
                       }
                   });
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return make_op("sum_all", {1}, {s}, {x}, [](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (double& g : in.grad) g += self.grad[0];
    });
}

inline Tensor mean_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    double inv_n = 1.0 / static_cast<double>(x.numel());
    return make_op("mean_all", {1}, {s * inv_n}, {x}, [inv_n](TensorImpl& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (double& g : in.grad) g += self.grad[0] * inv_n;
    });
}

// Detached copy of the row-wise max of a rank-2 tensor (used for stable
// exponentials; the subtraction cancels analytically, so no gradient flows).
inline Tensor detached_row_max(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("detached_row_max: no tensors given");
    int r = parts[0].extent(0);
    std::vector<double> mx(static_cast<size_t>(r), -std::numeric_limits<double>::infinity());
    for (const Tensor& t : parts) {
        detail::check_rank2(t, "detached_row_max");
        if (t.extent(0) != r)
            throw std::invalid_argument("detached_row_max: row mismatch " + shape_str(t.shape()));
        int c = t.extent(1);
        const auto& d = t.data();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                mx[static_cast<size_t>(i)] = std::max(mx[static_cast<size_t>(i)], d[static_cast<size_t>(i) * c + j]);
    }
    return Tensor::from({r, 1}, std::move(mx));
}

}  // namespace mopeft
