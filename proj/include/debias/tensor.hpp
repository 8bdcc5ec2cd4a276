#pragma once

// Reverse-mode autodiff core: TensorT, TapeT, RngState and the elementwise
// operations shared by every network in the project. Convolutions and the
// other structured ops live in nn_ops.hpp.
//
// TensorT<float> is the training type; tests instantiate TensorT<double>
// for finite-difference gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "debias/common.hpp"

namespace debias {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ---------------------------------------------------------------------------
// Counter-based RNG. Identical (seed, counter) -> identical draws, on any
// platform; no libstdc++ distribution objects anywhere in the project.
// ---------------------------------------------------------------------------
struct RngState {
    uint64_t seed = 0;
    uint64_t counter = 0;

    RngState() = default;
    explicit RngState(uint64_t s) : seed(s) {}
    RngState(uint64_t s, uint64_t c) : seed(s), counter(c) {}

    uint64_t next_u64() { return mix64(seed ^ mix64(++counter)); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    bool coin(double p = 0.5) { return uniform() < p; }

    // Box-Muller; one draw per call, the pair partner is discarded so the
    // counter advances by exactly two per normal.
    double normal() {
        double u1 = uniform(), u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------
template <typename Real>
struct TensorNode {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
};

template <typename Real>
class TensorT {
  public:
    TensorT() = default;

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        TensorT t;
        t.node_ = std::make_shared<TensorNode<Real>>();
        t.node_->shape = std::move(shape);
        t.node_->data.assign(static_cast<size_t>(shape_numel(t.node_->shape)), Real(0));
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static TensorT full(Shape shape, Real value, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static TensorT scalar(Real value, bool requires_grad = false) {
        return full({1}, value, requires_grad);
    }

    static TensorT from_data(Shape shape, std::vector<Real> values, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("from_data: shape " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        TensorT t;
        t.node_ = std::make_shared<TensorNode<Real>>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(values);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static TensorT randn(Shape shape, RngState& rng, Real stddev = Real(1),
                         bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.data()) v = static_cast<Real>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

    std::vector<Real>& data() { return node_->data; }
    const std::vector<Real>& data() const { return node_->data; }
    Real* ptr() { return node_->data.data(); }
    const Real* ptr() const { return node_->data.data(); }

    Real item() const {
        if (numel() != 1) throw NumericError("item: tensor has " + std::to_string(numel()) + " elements, expected 1");
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<Real>& grad() {
        ensure_grad();
        return node_->grad;
    }
    const std::vector<Real>& grad() const { return node_->grad; }
    void ensure_grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->data.size(), Real(0));
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
    }

    // Deep copy of values; no graph edge, no grad.
    TensorT detach() const {
        TensorT t;
        t.node_ = std::make_shared<TensorNode<Real>>();
        t.node_->shape = node_->shape;
        t.node_->data = node_->data;
        t.node_->requires_grad = false;
        return t;
    }

    bool same_node(const TensorT& other) const { return node_ == other.node_; }

    bool all_finite() const {
        for (Real v : node_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::shared_ptr<TensorNode<Real>> node_;
};

using Tensor = TensorT<float>;

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------
template <typename Real>
struct TapeEntry {
    const char* op;
    std::vector<TensorT<Real>> inputs;
    TensorT<Real> output;
    std::function<void()> backward;
};

// Records executed ops in order; backward() replays them once, in reverse.
// One tape per logical training thread; activate with TapeT::Scope.
template <typename Real>
class TapeT {
  public:
    bool check_finite = true;

    static TapeT*& current() {
        thread_local TapeT* cur = nullptr;
        return cur;
    }

    struct Scope {
        explicit Scope(TapeT& tape) : prev_(current()) { current() = &tape; }
        ~Scope() { current() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

      private:
        TapeT* prev_;
    };

    void record(const char* op, std::vector<TensorT<Real>> inputs, TensorT<Real> output,
                std::function<void()> backward) {
        entries_.push_back({op, std::move(inputs), std::move(output), std::move(backward)});
    }

    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    void clear() { entries_.clear(); }
    const TapeEntry<Real>& entry(size_t i) const { return entries_[i]; }

    // Populates grads of every reachable requires_grad tensor. Grads
    // accumulate additively, so callers zero parameter grads beforehand.
    void backward(TensorT<Real>& loss) {
        if (loss.numel() != 1) throw NumericError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        if (entries_.empty()) throw NumericError("backward: tape is empty");
        loss.ensure_grad();
        loss.grad()[0] = Real(1);
        for (size_t i = entries_.size(); i-- > 0;) {
            auto& e = entries_[i];
            if (!e.output.has_grad()) continue;  // unreachable from loss
            e.backward();
            if (check_finite) {
                for (auto& in : e.inputs) {
                    if (!in.defined() || !in.requires_grad() || !in.has_grad()) continue;
                    for (Real g : in.grad()) {
                        if (!std::isfinite(static_cast<double>(g)))
                            throw NumericError(std::string("backward: non-finite gradient after op '") + e.op + "'");
                    }
                }
            }
        }
    }

  private:
    std::vector<TapeEntry<Real>> entries_;
};

using Tape = TapeT<float>;

template <typename Real>
inline void check_output_finite(const char* op, const TensorT<Real>& out) {
    TapeT<Real>* tape = TapeT<Real>::current();
    if (tape && !tape->check_finite) return;
    if (!out.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
}

// Marks the output differentiable and records the backward rule if a tape
// is active and any input wants gradients. Shared epilogue of every op.
template <typename Real>
inline void record_op(const char* op, std::vector<TensorT<Real>> inputs, TensorT<Real>& out,
                      std::function<void()> backward) {
    check_output_finite(op, out);
    if (TapeT<Real>::current() == nullptr) return;
    bool any = false;
    for (auto& t : inputs) any = any || (t.defined() && t.requires_grad());
    if (!any) return;
    out.set_requires_grad(true);
    TapeT<Real>::current()->record(op, std::move(inputs), out, std::move(backward));
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------
template <typename Real>
inline void check_same_shape(const char* op, const TensorT<Real>& a, const TensorT<Real>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename Real>
TensorT<Real> add(TensorT<Real> a, TensorT<Real> b) {
    check_same_shape("add", a, b);
    auto out = TensorT<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
    record_op<Real>("add", {a, b}, out, [a, b, out]() mutable {
        const auto& go = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
        }
    });
    return out;
}

template <typename Real>
TensorT<Real> sub(TensorT<Real> a, TensorT<Real> b) {
    check_same_shape("sub", a, b);
    auto out = TensorT<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
    record_op<Real>("sub", {a, b}, out, [a, b, out]() mutable {
        const auto& go = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
        }
    });
    return out;
}

template <typename Real>
TensorT<Real> mul(TensorT<Real> a, TensorT<Real> b) {
    check_same_shape("mul", a, b);
    auto out = TensorT<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
    record_op<Real>("mul", {a, b}, out, [a, b, out]() mutable {
        const auto& go = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b.ptr()[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a.ptr()[i];
        }
    });
    return out;
}

template <typename Real>
TensorT<Real> div(TensorT<Real> a, TensorT<Real> b) {
    check_same_shape("div", a, b);
    auto out = TensorT<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] / b.ptr()[i];
    record_op<Real>("div", {a, b}, out, [a, b, out]() mutable {
        const auto& go = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / b.ptr()[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (size_t i = 0; i < go.size(); ++i) {
                const Real bv = b.ptr()[i];
                gb[i] -= go[i] * a.ptr()[i] / (bv * bv);
            }
        }
    });
    return out;
}

// out = a * scale + shift (fixed scalars); used for pixel-range mapping.
template <typename Real>
TensorT<Real> affine(TensorT<Real> a, Real scale, Real shift) {
    auto out = TensorT<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * scale + shift;
    record_op<Real>("affine", {a}, out, [a, out, scale]() mutable {
        if (!a.requires_grad()) return;
        const auto& go = out.grad();
        auto& ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * scale;
    });
    return out;
}

template <typename Real>
TensorT<Real> mul_scalar(TensorT<Real> a, Real s) {
    return affine(a, s, Real(0));
}

template <typename Real>
TensorT<Real> abs_(TensorT<Real> a) {
    auto out = TensorT<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = std::abs(a.ptr()[i]);
    // subgradient at 0 taken as 0
    record_op<Real>("abs", {a}, out, [a, out]() mutable {
        if (!a.requires_grad()) return;
        const auto& go = out.grad();
        auto& ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) {
            const Real v = a.ptr()[i];
            ga[i] += go[i] * (v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)));
        }
    });
    return out;
}

template <typename Real>
TensorT<Real> log_(TensorT<Real> a) {
    auto out = TensorT<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = std::log(a.ptr()[i]);
    record_op<Real>("log", {a}, out, [a, out]() mutable {
        if (!a.requires_grad()) return;
        const auto& go = out.grad();
        auto& ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / a.ptr()[i];
    });
    return out;
}

template <typename Real>
TensorT<Real> sum(TensorT<Real> a) {
    Real acc = 0;
    for (Real v : a.data()) acc += v;
    auto out = TensorT<Real>::scalar(acc);
    record_op<Real>("sum", {a}, out, [a, out]() mutable {
        if (!a.requires_grad()) return;
        const Real g = out.grad()[0];
        auto& ga = a.grad();
        for (auto& v : ga) v += g;
    });
    return out;
}

template <typename Real>
TensorT<Real> mean(TensorT<Real> a) {
    const Real inv = Real(1) / static_cast<Real>(a.numel());
    Real acc = 0;
    for (Real v : a.data()) acc += v;
    auto out = TensorT<Real>::scalar(acc * inv);
    record_op<Real>("mean", {a}, out, [a, out, inv]() mutable {
        if (!a.requires_grad()) return;
        const Real g = out.grad()[0] * inv;
        auto& ga = a.grad();
        for (auto& v : ga) v += g;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------
template <typename Real>
TensorT<Real> relu(TensorT<Real> a) {
    auto out = TensorT<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] > 0 ? a.ptr()[i] : Real(0);
    record_op<Real>("relu", {a}, out, [a, out]() mutable {
        if (!a.requires_grad()) return;
        const auto& go = out.grad();
        auto& ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i)
            if (a.ptr()[i] > 0) ga[i] += go[i];
    });
    return out;
}

template <typename Real>
TensorT<Real> leaky_relu(TensorT<Real> a, Real slope) {
    auto out = TensorT<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        const Real v = a.ptr()[i];
        out.ptr()[i] = v >= 0 ? v : slope * v;
    }
    record_op<Real>("leaky_relu", {a}, out, [a, out, slope]() mutable {
        if (!a.requires_grad()) return;
        const auto& go = out.grad();
        auto& ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i)
            ga[i] += go[i] * (a.ptr()[i] >= 0 ? Real(1) : slope);
    });
    return out;
}

template <typename Real>
TensorT<Real> sigmoid(TensorT<Real> a) {
    auto out = TensorT<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
        const Real v = a.ptr()[i];
        out.ptr()[i] = v >= 0 ? Real(1) / (Real(1) + std::exp(-v))
                              : std::exp(v) / (Real(1) + std::exp(v));
    }
    record_op<Real>("sigmoid", {a}, out, [a, out]() mutable {
        if (!a.requires_grad()) return;
        const auto& go = out.grad();
        auto& ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) {
            const Real s = out.ptr()[i];
            ga[i] += go[i] * s * (Real(1) - s);
        }
    });
    return out;
}

inline constexpr double kPi = 3.14159265358979323846;

// pixel_max * (atan(x)/pi + 1/2); open range (0, pixel_max).
template <typename Real>
TensorT<Real> scaled_atan(TensorT<Real> a, Real pixel_max) {
    if (!(pixel_max > 0)) throw ConfigError("scaled_atan: pixel_max must be > 0");
    auto out = TensorT<Real>::zeros(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i)
        out.ptr()[i] = pixel_max * (std::atan(a.ptr()[i]) / Real(kPi) + Real(0.5));
    record_op<Real>("scaled_atan", {a}, out, [a, out, pixel_max]() mutable {
        if (!a.requires_grad()) return;
        const auto& go = out.grad();
        auto& ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) {
            const Real v = a.ptr()[i];
            ga[i] += go[i] * pixel_max / (Real(kPi) * (Real(1) + v * v));
        }
    });
    return out;
}

// Identity-copy reshape; layout is flat row-major so only the shape changes.
template <typename Real>
TensorT<Real> reshape(TensorT<Real> a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(shape) + " incompatible with " +
                         shape_str(a.shape()));
    auto out = TensorT<Real>::zeros(std::move(shape));
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    record_op<Real>("reshape", {a}, out, [a, out]() mutable {
        if (!a.requires_grad()) return;
        const auto& go = out.grad();
        auto& ga = a.grad();
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
    return out;
}

}  // namespace debias
