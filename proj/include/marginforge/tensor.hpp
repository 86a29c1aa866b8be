#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace marginforge {

class Tensor;
class GradientMap;

enum class PrimitiveKind {
    Add,        // elementwise a + b, shapes equal
    Subtract,   // elementwise a - b, shapes equal
    Multiply,   // elementwise a * b, shapes equal
    Scale,      // a * attrs.scalar
    Matmul,     // [m,k] x [k,n] -> [m,n]
    Relu,       // max(a, 0); subgradient at 0 is 0
    Exp,
    Log,
    SumAxis,    // reduce attrs.axis, keeping it as extent 1
    MaxAxis,    // reduce attrs.axis, keeping it as extent 1; ties go to the lowest index
    Broadcast,  // replicate into attrs.target_shape (rules documented at apply)
    ClampMin,   // max(a, attrs.scalar); subgradient at the boundary is 0
};

/// Extra op parameters; only the field relevant to the PrimitiveKind is read.
struct OpAttrs {
    double scalar = 0.0;
    std::size_t axis = 0;
    std::vector<std::size_t> target_shape;
};

namespace detail {

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

using BackpropFn = std::function<void(const std::vector<double>& out_grad,
                                      const std::vector<std::vector<double>*>& parent_grads)>;

struct TensorNode {
    std::vector<std::size_t> shape;
    std::shared_ptr<std::vector<double>> data;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;  // populated by backward()

    // Graph edges; empty for leaves. The backprop function receives the
    // upstream gradient and one accumulation buffer per parent (nullptr for
    // parents that do not require grad).
    std::vector<Tensor> parents;
    BackpropFn backprop;
};

Tensor make_op_result(std::vector<std::size_t> shape, std::vector<double> values,
                      std::vector<Tensor> parents, BackpropFn backprop);

}  // namespace detail

/// Dense n-dimensional double tensor participating in a reverse-mode
/// differentiation graph. Data is row-major. The graph is built eagerly per
/// forward pass and owned by the result tensors, so it is freed by RAII once
/// the results of a batch go out of scope. Tensors are immutable after
/// construction except for grad population during a backward() call and the
/// optimizer's single-writer parameter updates.
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, std::vector<double> values,
           bool requires_grad = false) {
        if (shape.empty()) throw std::invalid_argument("Tensor: shape must be non-empty");
        for (std::size_t e : shape) {
            if (e == 0) {
                throw std::invalid_argument("Tensor: zero extent in shape " +
                                            detail::shape_str(shape));
            }
        }
        if (detail::shape_product(shape) != values.size()) {
            std::ostringstream os;
            os << "Tensor: shape " << detail::shape_str(shape) << " expects "
               << detail::shape_product(shape) << " values, got " << values.size();
            throw std::invalid_argument(os.str());
        }
        node_ = std::make_shared<detail::TensorNode>();
        node_->shape = std::move(shape);
        node_->data = std::make_shared<std::vector<double>>(std::move(values));
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        std::size_t n = detail::shape_product(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t size() const { return node_->data->size(); }
    std::span<const double> data() const { return {node_->data->data(), node_->data->size()}; }
    double at(std::size_t i) const { return (*node_->data)[i]; }
    bool requires_grad() const { return node_->requires_grad; }

    /// Scalar extraction; the tensor must hold exactly one value.
    double value() const {
        if (size() != 1) {
            throw std::invalid_argument("Tensor::value: tensor of shape " +
                                        detail::shape_str(shape()) + " is not scalar");
        }
        return (*node_->data)[0];
    }

    /// Gradient populated by the most recent backward() pass.
    std::span<const double> grad() const {
        if (!node_->grad) throw std::runtime_error("Tensor::grad: no gradient recorded");
        return {node_->grad->data(), node_->grad->size()};
    }
    bool has_grad() const { return node_->grad.has_value(); }

    /// Same storage, no grad requirement, no graph history.
    Tensor detach() const {
        auto n = std::make_shared<detail::TensorNode>();
        n->shape = node_->shape;
        n->data = node_->data;
        return Tensor(std::move(n));
    }

    /// In-place value mutation for the single-writer optimizer path.
    std::vector<double>& values_mut() { return *node_->data; }

    /// Graph-node identity; stable for the lifetime of the tensor.
    const void* node_id() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor detail::make_op_result(std::vector<std::size_t>, std::vector<double>,
                                         std::vector<Tensor>, detail::BackpropFn);
    friend GradientMap backward(const Tensor&);
};

/// Gradients of one backward() pass, keyed by graph-node identity. Every
/// entry's shape equals the shape of the node it grades.
class GradientMap {
public:
    bool contains(const Tensor& t) const { return grads_.count(t.node_id()) != 0; }

    const Tensor& at(const Tensor& t) const {
        auto it = grads_.find(t.node_id());
        if (it == grads_.end()) {
            throw std::invalid_argument(
                "GradientMap: no gradient recorded for the given tensor");
        }
        return it->second;
    }

    std::size_t size() const { return grads_.size(); }

    void insert(const void* id, Tensor g) { grads_.emplace(id, std::move(g)); }

private:
    std::unordered_map<const void*, Tensor> grads_;
};

namespace detail {

inline Tensor make_op_result(std::vector<std::size_t> shape, std::vector<double> values,
                             std::vector<Tensor> parents, BackpropFn backprop) {
    bool needs_grad = false;
    for (const Tensor& t : parents) needs_grad = needs_grad || t.requires_grad();
    Tensor out(std::move(shape), std::move(values), needs_grad);
    if (needs_grad) {
        out.node_->parents = std::move(parents);
        out.node_->backprop = std::move(backprop);
    }
    return out;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

inline void check_arity(const char* op, std::span<const Tensor> in, std::size_t n) {
    if (in.size() != n) {
        std::ostringstream os;
        os << op << ": expects " << n << " input(s), got " << in.size();
        throw std::invalid_argument(os.str());
    }
}

// Decompose a shape around `axis` into (outer, extent, inner) so a reduction
// is three nested loops regardless of rank.
struct AxisSplit {
    std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const std::vector<std::size_t>& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        std::ostringstream os;
        os << "axis " << axis << " out of range for shape " << shape_str(shape);
        throw std::invalid_argument(os.str());
    }
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace detail

/// Primitive dispatch. Records the op in the differentiation graph when any
/// input requires grad; never mutates its inputs. Shape rules are listed at
/// PrimitiveKind; violations are rejected naming the offending extents.
Tensor apply(PrimitiveKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs);

inline Tensor apply(PrimitiveKind kind, std::span<const Tensor> inputs) {
    return apply(kind, inputs, OpAttrs{});
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    const Tensor in[] = {a, b};
    return apply(PrimitiveKind::Add, in);
}
inline Tensor subtract(const Tensor& a, const Tensor& b) {
    const Tensor in[] = {a, b};
    return apply(PrimitiveKind::Subtract, in);
}
inline Tensor multiply(const Tensor& a, const Tensor& b) {
    const Tensor in[] = {a, b};
    return apply(PrimitiveKind::Multiply, in);
}
inline Tensor scale(const Tensor& a, double c) {
    const Tensor in[] = {a};
    OpAttrs attrs;
    attrs.scalar = c;
    return apply(PrimitiveKind::Scale, in, attrs);
}
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const Tensor in[] = {a, b};
    return apply(PrimitiveKind::Matmul, in);
}
inline Tensor relu(const Tensor& a) {
    const Tensor in[] = {a};
    return apply(PrimitiveKind::Relu, in);
}
inline Tensor exp(const Tensor& a) {
    const Tensor in[] = {a};
    return apply(PrimitiveKind::Exp, in);
}
inline Tensor log(const Tensor& a) {
    const Tensor in[] = {a};
    return apply(PrimitiveKind::Log, in);
}
inline Tensor sum_axis(const Tensor& a, std::size_t axis) {
    const Tensor in[] = {a};
    OpAttrs attrs;
    attrs.axis = axis;
    return apply(PrimitiveKind::SumAxis, in, attrs);
}
inline Tensor max_axis(const Tensor& a, std::size_t axis) {
    const Tensor in[] = {a};
    OpAttrs attrs;
    attrs.axis = axis;
    return apply(PrimitiveKind::MaxAxis, in, attrs);
}
inline Tensor broadcast(const Tensor& a, std::vector<std::size_t> target_shape) {
    const Tensor in[] = {a};
    OpAttrs attrs;
    attrs.target_shape = std::move(target_shape);
    return apply(PrimitiveKind::Broadcast, in, attrs);
}
inline Tensor clamp_min(const Tensor& a, double floor) {
    const Tensor in[] = {a};
    OpAttrs attrs;
    attrs.scalar = floor;
    return apply(PrimitiveKind::ClampMin, in, attrs);
}

/// Sum of all entries as a scalar tensor.
inline Tensor sum_all(const Tensor& a) {
    Tensor t = a;
    for (std::size_t axis = 0; axis < a.shape().size(); ++axis) t = sum_axis(t, axis);
    return t;
}

inline Tensor apply(PrimitiveKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
    using detail::make_op_result;
    switch (kind) {
        case PrimitiveKind::Add: {
            detail::check_arity("add", inputs, 2);
            const Tensor &a = inputs[0], &b = inputs[1];
            detail::check_same_shape("add", a, b);
            std::vector<double> out(a.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
            return make_op_result(a.shape(), std::move(out), {a, b},
                                  [](const std::vector<double>& g,
                                     const std::vector<std::vector<double>*>& pg) {
                                      for (std::size_t i = 0; i < g.size(); ++i) {
                                          if (pg[0]) (*pg[0])[i] += g[i];
                                          if (pg[1]) (*pg[1])[i] += g[i];
                                      }
                                  });
        }
        case PrimitiveKind::Subtract: {
            detail::check_arity("subtract", inputs, 2);
            const Tensor &a = inputs[0], &b = inputs[1];
            detail::check_same_shape("subtract", a, b);
            std::vector<double> out(a.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
            return make_op_result(a.shape(), std::move(out), {a, b},
                                  [](const std::vector<double>& g,
                                     const std::vector<std::vector<double>*>& pg) {
                                      for (std::size_t i = 0; i < g.size(); ++i) {
                                          if (pg[0]) (*pg[0])[i] += g[i];
                                          if (pg[1]) (*pg[1])[i] -= g[i];
                                      }
                                  });
        }
        case PrimitiveKind::Multiply: {
            detail::check_arity("multiply", inputs, 2);
            const Tensor &a = inputs[0], &b = inputs[1];
            detail::check_same_shape("multiply", a, b);
            std::vector<double> out(a.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
            std::vector<double> av(a.data().begin(), a.data().end());
            std::vector<double> bv(b.data().begin(), b.data().end());
            return make_op_result(a.shape(), std::move(out), {a, b},
                                  [av = std::move(av), bv = std::move(bv)](
                                      const std::vector<double>& g,
                                      const std::vector<std::vector<double>*>& pg) {
                                      for (std::size_t i = 0; i < g.size(); ++i) {
                                          if (pg[0]) (*pg[0])[i] += g[i] * bv[i];
                                          if (pg[1]) (*pg[1])[i] += g[i] * av[i];
                                      }
                                  });
        }
        case PrimitiveKind::Scale: {
            detail::check_arity("scale", inputs, 1);
            const Tensor& a = inputs[0];
            const double c = attrs.scalar;
            std::vector<double> out(a.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
            return make_op_result(a.shape(), std::move(out), {a},
                                  [c](const std::vector<double>& g,
                                      const std::vector<std::vector<double>*>& pg) {
                                      if (!pg[0]) return;
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          (*pg[0])[i] += g[i] * c;
                                  });
        }
        case PrimitiveKind::Matmul: {
            detail::check_arity("matmul", inputs, 2);
            const Tensor &a = inputs[0], &b = inputs[1];
            if (a.shape().size() != 2 || b.shape().size() != 2) {
                throw std::invalid_argument("matmul: expects rank-2 tensors, got " +
                                            detail::shape_str(a.shape()) + " and " +
                                            detail::shape_str(b.shape()));
            }
            const std::size_t m = a.shape()[0], k = a.shape()[1];
            const std::size_t k2 = b.shape()[0], n = b.shape()[1];
            if (k != k2) {
                std::ostringstream os;
                os << "matmul: inner extents mismatch (" << k << " vs " << k2 << ") for "
                   << detail::shape_str(a.shape()) << " x " << detail::shape_str(b.shape());
                throw std::invalid_argument(os.str());
            }
            std::vector<double> out(m * n, 0.0);
            auto da = a.data(), db = b.data();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = da[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) {
                        out[i * n + j] += aip * db[p * n + j];
                    }
                }
            }
            std::vector<double> av(da.begin(), da.end());
            std::vector<double> bv(db.begin(), db.end());
            return make_op_result(
                {m, n}, std::move(out), {a, b},
                [m, k, n, av = std::move(av), bv = std::move(bv)](
                    const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& pg) {
                    if (pg[0]) {  // dA = g * B^T
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t p = 0; p < k; ++p) {
                                double s = 0.0;
                                for (std::size_t j = 0; j < n; ++j)
                                    s += g[i * n + j] * bv[p * n + j];
                                (*pg[0])[i * k + p] += s;
                            }
                    }
                    if (pg[1]) {  // dB = A^T * g
                        for (std::size_t p = 0; p < k; ++p)
                            for (std::size_t j = 0; j < n; ++j) {
                                double s = 0.0;
                                for (std::size_t i = 0; i < m; ++i)
                                    s += av[i * k + p] * g[i * n + j];
                                (*pg[1])[p * n + j] += s;
                            }
                    }
                });
        }
        case PrimitiveKind::Relu:
        case PrimitiveKind::ClampMin: {
            const char* name = kind == PrimitiveKind::Relu ? "relu" : "clamp_min";
            detail::check_arity(name, inputs, 1);
            const Tensor& a = inputs[0];
            const double floor = kind == PrimitiveKind::Relu ? 0.0 : attrs.scalar;
            std::vector<double> out(a.size());
            std::vector<unsigned char> pass(a.size());
            for (std::size_t i = 0; i < out.size(); ++i) {
                pass[i] = a.at(i) > floor;  // the boundary itself contributes no gradient
                out[i] = pass[i] ? a.at(i) : floor;
            }
            return make_op_result(a.shape(), std::move(out), {a},
                                  [pass = std::move(pass)](
                                      const std::vector<double>& g,
                                      const std::vector<std::vector<double>*>& pg) {
                                      if (!pg[0]) return;
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          if (pass[i]) (*pg[0])[i] += g[i];
                                  });
        }
        case PrimitiveKind::Exp: {
            detail::check_arity("exp", inputs, 1);
            const Tensor& a = inputs[0];
            std::vector<double> out(a.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.at(i));
            std::vector<double> yv = out;
            return make_op_result(a.shape(), std::move(out), {a},
                                  [yv = std::move(yv)](
                                      const std::vector<double>& g,
                                      const std::vector<std::vector<double>*>& pg) {
                                      if (!pg[0]) return;
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          (*pg[0])[i] += g[i] * yv[i];
                                  });
        }
        case PrimitiveKind::Log: {
            detail::check_arity("log", inputs, 1);
            const Tensor& a = inputs[0];
            std::vector<double> out(a.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.at(i));
            std::vector<double> av(a.data().begin(), a.data().end());
            return make_op_result(a.shape(), std::move(out), {a},
                                  [av = std::move(av)](
                                      const std::vector<double>& g,
                                      const std::vector<std::vector<double>*>& pg) {
                                      if (!pg[0]) return;
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          (*pg[0])[i] += g[i] / av[i];
                                  });
        }
        case PrimitiveKind::SumAxis: {
            detail::check_arity("sum_axis", inputs, 1);
            const Tensor& a = inputs[0];
            auto split = detail::split_axis(a.shape(), attrs.axis);
            std::vector<std::size_t> out_shape = a.shape();
            out_shape[attrs.axis] = 1;
            std::vector<double> out(split.outer * split.inner, 0.0);
            auto da = a.data();
            for (std::size_t o = 0; o < split.outer; ++o)
                for (std::size_t e = 0; e < split.extent; ++e)
                    for (std::size_t i = 0; i < split.inner; ++i)
                        out[o * split.inner + i] +=
                            da[(o * split.extent + e) * split.inner + i];
            return make_op_result(
                std::move(out_shape), std::move(out), {a},
                [split](const std::vector<double>& g,
                        const std::vector<std::vector<double>*>& pg) {
                    if (!pg[0]) return;
                    for (std::size_t o = 0; o < split.outer; ++o)
                        for (std::size_t e = 0; e < split.extent; ++e)
                            for (std::size_t i = 0; i < split.inner; ++i)
                                (*pg[0])[(o * split.extent + e) * split.inner + i] +=
                                    g[o * split.inner + i];
                });
        }
        case PrimitiveKind::MaxAxis: {
            detail::check_arity("max_axis", inputs, 1);
            const Tensor& a = inputs[0];
            auto split = detail::split_axis(a.shape(), attrs.axis);
            std::vector<std::size_t> out_shape = a.shape();
            out_shape[attrs.axis] = 1;
            std::vector<double> out(split.outer * split.inner);
            std::vector<std::size_t> arg(split.outer * split.inner);
            auto da = a.data();
            for (std::size_t o = 0; o < split.outer; ++o)
                for (std::size_t i = 0; i < split.inner; ++i) {
                    std::size_t best = 0;
                    double bv = da[(o * split.extent) * split.inner + i];
                    for (std::size_t e = 1; e < split.extent; ++e) {
                        double v = da[(o * split.extent + e) * split.inner + i];
                        if (v > bv) {  // strict: ties keep the lowest index
                            bv = v;
                            best = e;
                        }
                    }
                    out[o * split.inner + i] = bv;
                    arg[o * split.inner + i] = best;
                }
            return make_op_result(
                std::move(out_shape), std::move(out), {a},
                [split, arg = std::move(arg)](const std::vector<double>& g,
                                              const std::vector<std::vector<double>*>& pg) {
                    if (!pg[0]) return;
                    for (std::size_t o = 0; o < split.outer; ++o)
                        for (std::size_t i = 0; i < split.inner; ++i) {
                            std::size_t e = arg[o * split.inner + i];
                            (*pg[0])[(o * split.extent + e) * split.inner + i] +=
                                g[o * split.inner + i];
                        }
                });
        }
        case PrimitiveKind::Broadcast: {
            // Documented rules, target always rank 2 [B,C]:
            //   scalar {1} or {1,1}  -> fill
            //   {C} or {1,C}         -> replicate as every row
            //   {B} or {B,1}         -> replicate each entry along its row
            // A rank-1 input matching both extents is treated as a row.
            detail::check_arity("broadcast", inputs, 1);
            const Tensor& a = inputs[0];
            const auto& tgt = attrs.target_shape;
            if (tgt.size() != 2 || tgt[0] == 0 || tgt[1] == 0) {
                throw std::invalid_argument("broadcast: target shape must be rank 2, got " +
                                            detail::shape_str(tgt));
            }
            const std::size_t B = tgt[0], C = tgt[1];
            const auto& s = a.shape();
            enum class Mode { Fill, Row, Col } mode;
            if (a.size() == 1) {
                mode = Mode::Fill;
            } else if ((s.size() == 1 && s[0] == C) ||
                       (s.size() == 2 && s[0] == 1 && s[1] == C)) {
                mode = Mode::Row;
            } else if ((s.size() == 1 && s[0] == B) ||
                       (s.size() == 2 && s[0] == B && s[1] == 1)) {
                mode = Mode::Col;
            } else {
                throw std::invalid_argument("broadcast: cannot expand " +
                                            detail::shape_str(s) + " to " +
                                            detail::shape_str(tgt));
            }
            std::vector<double> out(B * C);
            auto da = a.data();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c)
                    out[b * C + c] = mode == Mode::Fill  ? da[0]
                                     : mode == Mode::Row ? da[c]
                                                         : da[b];
            return make_op_result(
                {B, C}, std::move(out), {a},
                [B, C, mode](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
                    if (!pg[0]) return;
                    for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t c = 0; c < C; ++c) {
                            std::size_t idx = mode == Mode::Fill  ? 0
                                              : mode == Mode::Row ? c
                                                                  : b;
                            (*pg[0])[idx] += g[b * C + c];
                        }
                });
        }
    }
    throw std::invalid_argument("apply: unknown primitive kind");
}

/// Reverse-mode gradients of a scalar root with respect to every
/// requires_grad leaf reachable from it. Accumulation buffers are fresh per
/// call, so re-invocation on the same graph yields identical results; each
/// leaf's own grad field is overwritten as well.
inline GradientMap backward(const Tensor& root) {
    if (root.size() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got shape " +
                                    detail::shape_str(root.shape()));
    }
    using detail::TensorNode;
    if (!root.requires_grad()) return GradientMap{};

    // Iterative post-order over the requires_grad subgraph.
    std::vector<TensorNode*> order;
    std::unordered_map<TensorNode*, int> state;  // 0 new, 1 open, 2 done
    std::vector<TensorNode*> stack{root.node_.get()};
    while (!stack.empty()) {
        TensorNode* n = stack.back();
        int& st = state[n];
        if (st == 0) {
            st = 1;
            for (const Tensor& p : n->parents) {
                TensorNode* pn = p.node_.get();
                if (pn->requires_grad && state[pn] == 0) stack.push_back(pn);
            }
        } else {
            stack.pop_back();
            if (st == 1) {
                st = 2;
                order.push_back(n);
            }
        }
    }

    std::unordered_map<TensorNode*, std::vector<double>> buffers;
    buffers[root.node_.get()] = {1.0};

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        auto bit = buffers.find(n);
        if (bit == buffers.end() || !n->backprop) continue;
        std::vector<std::vector<double>*> pgrads;
        pgrads.reserve(n->parents.size());
        for (const Tensor& p : n->parents) {
            TensorNode* pn = p.node_.get();
            if (!pn->requires_grad) {
                pgrads.push_back(nullptr);
                continue;
            }
            auto& buf = buffers[pn];
            if (buf.empty()) buf.assign(pn->data->size(), 0.0);
            pgrads.push_back(&buf);
        }
        n->backprop(bit->second, pgrads);
    }

    GradientMap out;
    for (TensorNode* n : order) {
        if (!n->parents.empty() || !n->requires_grad) continue;  // leaves only
        auto bit = buffers.find(n);
        std::vector<double> g =
            bit != buffers.end() ? bit->second : std::vector<double>(n->data->size(), 0.0);
        n->grad = g;
        out.insert(n, Tensor(n->shape, std::move(g)));
    }
    return out;
}

/// Central finite-difference gradient oracle:
/// (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate. Test plumbing; kept
/// independent of the reverse-mode path it is used to check.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                                     const Tensor& x, double h) {
    std::vector<double> g(x.size());
    std::vector<double> base(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        std::vector<double> plus = base, minus = base;
        plus[i] += h;
        minus[i] -= h;
        const double fp = f(Tensor(x.shape(), std::move(plus)));
        const double fm = f(Tensor(x.shape(), std::move(minus)));
        g[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor(x.shape(), std::move(g));
}

}  // namespace marginforge
