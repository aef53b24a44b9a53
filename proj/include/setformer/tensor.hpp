#pragma once

// Dense float32 tensors with reverse-mode automatic differentiation.
//
// Storage is 32-bit; every reduction (matmul inner loops, softmax sums,
// means) accumulates in 64-bit with a fixed iteration order, so identical
// inputs produce bit-identical outputs and reordering drift stays small.
// A ComputationTape records one closure per primitive in execution order;
// replaying it in reverse is a reverse topological traversal.

#include "setformer/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace setformer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) {
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? " x " : "") << s[i];
    }
    os << "]";
    return os.str();
}

struct TensorStorage {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad; // same length as value iff requires_grad
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw ConfigError("Tensor: shape " + shape_str(shape) + " does not match " +
                              std::to_string(data.size()) + " elements");
        }
        auto s = std::make_shared<TensorStorage>();
        s->shape = std::move(shape);
        s->value = std::move(data);
        s->requires_grad = requires_grad;
        if (requires_grad) {
            s->grad.assign(s->value.size(), 0.0f);
        }
        return Tensor(std::move(s));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<float> v(shape_numel(shape), 0.0f);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, float fill, bool requires_grad = false) {
        std::vector<float> v(shape_numel(shape), fill);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(float v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
        std::vector<float> v(shape_numel(shape));
        for (auto& x : v) {
            x = static_cast<float>(rng.normal() * stddev);
        }
        return from(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::size_t numel() const { return s_->value.size(); }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t dim(std::size_t i) const { return s_->shape[i]; }
    bool requires_grad() const { return s_ && s_->requires_grad; }

    std::vector<float>& value() { return s_->value; }
    const std::vector<float>& value() const { return s_->value; }
    std::vector<float>& grad() { return s_->grad; }
    const std::vector<float>& grad() const { return s_->grad; }

    void zero_grad() {
        if (requires_grad()) {
            std::fill(s_->grad.begin(), s_->grad.end(), 0.0f);
        }
    }

    float item() const {
        if (numel() != 1) {
            throw ConfigError("Tensor::item: expected scalar, got " + shape_str(s_->shape));
        }
        return s_->value[0];
    }

    Tensor detached_copy() const {
        return from(s_->shape, s_->value, false);
    }

    // Identity of the underlying storage (used for fan-out checks in tests).
    const TensorStorage* storage() const { return s_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorStorage> s) : s_(std::move(s)) {}
    std::shared_ptr<TensorStorage> s_;
};

// Ordered record of primitive backward steps. Appending happens in forward
// execution order, so the reversed replay visits each node exactly once in
// reverse topological order. One tape is confined to one thread; distinct
// tapes are independent.
class Tape {
public:
    void record(std::function<void()> backward_step) {
        nodes_.push_back(std::move(backward_step));
    }

    std::size_t size() const { return nodes_.size(); }

    void backward(Tensor loss) {
        if (!loss.defined() || loss.numel() != 1) {
            throw ConfigError("backward: loss must be a scalar tensor");
        }
        if (!loss.requires_grad()) {
            throw ConfigError("backward: loss is not connected to any differentiable input");
        }
        loss.grad()[0] += 1.0f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            (*it)();
        }
    }

private:
    std::vector<std::function<void()>> nodes_;
};

namespace detail {

inline bool wants_grad(Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (tape == nullptr) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    }
}

// C[m,n] (+)= A[m,k] * B[k,n]. Row-parallel; inner accumulation in double
// with fixed k order.
inline void kernel_mm_nn(float* out, const float* a, const float* b, std::size_t m,
                         std::size_t k, std::size_t n, bool accumulate) {
    parallel_for(m, [&](std::size_t i0, std::size_t i1) {
        std::vector<double> acc(n);
        for (std::size_t i = i0; i < i1; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const float* arow = a + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = static_cast<double>(arow[kk]);
                const float* brow = b + kk * n;
                for (std::size_t j = 0; j < n; ++j) {
                    acc[j] += av * static_cast<double>(brow[j]);
                }
            }
            float* orow = out + i * n;
            if (accumulate) {
                for (std::size_t j = 0; j < n; ++j) {
                    orow[j] = static_cast<float>(static_cast<double>(orow[j]) + acc[j]);
                }
            } else {
                for (std::size_t j = 0; j < n; ++j) {
                    orow[j] = static_cast<float>(acc[j]);
                }
            }
        }
    });
}

// C[m,n] (+)= A[m,k] * B[n,k]^T.
inline void kernel_mm_nt(float* out, const float* a, const float* b, std::size_t m,
                         std::size_t k, std::size_t n, bool accumulate) {
    parallel_for(m, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const float* arow = a + i * k;
            float* orow = out + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const float* brow = b + j * k;
                double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                std::size_t kk = 0;
                for (; kk + 4 <= k; kk += 4) {
                    a0 += static_cast<double>(arow[kk]) * static_cast<double>(brow[kk]);
                    a1 += static_cast<double>(arow[kk + 1]) * static_cast<double>(brow[kk + 1]);
                    a2 += static_cast<double>(arow[kk + 2]) * static_cast<double>(brow[kk + 2]);
                    a3 += static_cast<double>(arow[kk + 3]) * static_cast<double>(brow[kk + 3]);
                }
                double acc = (a0 + a1) + (a2 + a3);
                for (; kk < k; ++kk) {
                    acc += static_cast<double>(arow[kk]) * static_cast<double>(brow[kk]);
                }
                if (accumulate) {
                    acc += static_cast<double>(orow[j]);
                }
                orow[j] = static_cast<float>(acc);
            }
        }
    });
}

// C[m,n] (+)= A[k,m]^T * B[k,n].
inline void kernel_mm_tn(float* out, const float* a, const float* b, std::size_t k,
                         std::size_t m, std::size_t n, bool accumulate) {
    parallel_for(m, [&](std::size_t i0, std::size_t i1) {
        std::vector<double> acc(n);
        for (std::size_t i = i0; i < i1; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = static_cast<double>(a[kk * m + i]);
                const float* brow = b + kk * n;
                for (std::size_t j = 0; j < n; ++j) {
                    acc[j] += av * static_cast<double>(brow[j]);
                }
            }
            float* orow = out + i * n;
            if (accumulate) {
                for (std::size_t j = 0; j < n; ++j) {
                    orow[j] = static_cast<float>(static_cast<double>(orow[j]) + acc[j]);
                }
            } else {
                for (std::size_t j = 0; j < n; ++j) {
                    orow[j] = static_cast<float>(acc[j]);
                }
            }
        }
    });
}

inline std::pair<std::size_t, std::size_t> lastdim_view(const Tensor& t) {
    if (t.rank() == 0 || t.numel() == 0) {
        throw ConfigError("lastdim op: tensor must have a non-empty last dimension");
    }
    const std::size_t n = t.shape().back();
    return {t.numel() / n, n};
}

} // namespace detail

// ----------------------------------------------------------------------
// Elementwise primitives
// ----------------------------------------------------------------------

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    const std::size_t n = a.numel();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = a.value()[i] + b.value()[i];
    }
    Tensor c = Tensor::from(a.shape(), std::move(out), detail::wants_grad(tape, {&a, &b}));
    if (c.requires_grad()) {
        tape->record([a = a, b = b, c]() mutable {
            if (a.requires_grad()) {
                for (std::size_t i = 0; i < a.numel(); ++i) {
                    a.grad()[i] += c.grad()[i];
                }
            }
            if (b.requires_grad()) {
                for (std::size_t i = 0; i < b.numel(); ++i) {
                    b.grad()[i] += c.grad()[i];
                }
            }
        });
    }
    return c;
}

inline Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    const std::size_t n = a.numel();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = a.value()[i] - b.value()[i];
    }
    Tensor c = Tensor::from(a.shape(), std::move(out), detail::wants_grad(tape, {&a, &b}));
    if (c.requires_grad()) {
        tape->record([a = a, b = b, c]() mutable {
            if (a.requires_grad()) {
                for (std::size_t i = 0; i < a.numel(); ++i) {
                    a.grad()[i] += c.grad()[i];
                }
            }
            if (b.requires_grad()) {
                for (std::size_t i = 0; i < b.numel(); ++i) {
                    b.grad()[i] -= c.grad()[i];
                }
            }
        });
    }
    return c;
}

inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    const std::size_t n = a.numel();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = a.value()[i] * b.value()[i];
    }
    Tensor c = Tensor::from(a.shape(), std::move(out), detail::wants_grad(tape, {&a, &b}));
    if (c.requires_grad()) {
        tape->record([a = a, b = b, c]() mutable {
            if (a.requires_grad()) {
                for (std::size_t i = 0; i < a.numel(); ++i) {
                    a.grad()[i] += c.grad()[i] * b.value()[i];
                }
            }
            if (b.requires_grad()) {
                for (std::size_t i = 0; i < b.numel(); ++i) {
                    b.grad()[i] += c.grad()[i] * a.value()[i];
                }
            }
        });
    }
    return c;
}

inline Tensor scale(Tape* tape, const Tensor& a, double factor) {
    const std::size_t n = a.numel();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<float>(static_cast<double>(a.value()[i]) * factor);
    }
    Tensor c = Tensor::from(a.shape(), std::move(out), detail::wants_grad(tape, {&a}));
    if (c.requires_grad()) {
        tape->record([a = a, c, factor]() mutable {
            for (std::size_t i = 0; i < a.numel(); ++i) {
                a.grad()[i] += static_cast<float>(static_cast<double>(c.grad()[i]) * factor);
            }
        });
    }
    return c;
}

inline Tensor silu(Tape* tape, const Tensor& a) {
    const std::size_t n = a.numel();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a.value()[i];
        out[i] = static_cast<float>(x / (1.0 + std::exp(-x)));
    }
    Tensor c = Tensor::from(a.shape(), std::move(out), detail::wants_grad(tape, {&a}));
    if (c.requires_grad()) {
        tape->record([a = a, c]() mutable {
            for (std::size_t i = 0; i < a.numel(); ++i) {
                const double x = a.value()[i];
                const double s = 1.0 / (1.0 + std::exp(-x));
                a.grad()[i] += static_cast<float>(static_cast<double>(c.grad()[i]) *
                                                  (s * (1.0 + x * (1.0 - s))));
            }
        });
    }
    return c;
}

// max(0, x). Subgradient at the kink is 0 (the flat side).
inline Tensor relu(Tape* tape, const Tensor& a) {
    const std::size_t n = a.numel();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = a.value()[i] > 0.0f ? a.value()[i] : 0.0f;
    }
    Tensor c = Tensor::from(a.shape(), std::move(out), detail::wants_grad(tape, {&a}));
    if (c.requires_grad()) {
        tape->record([a = a, c]() mutable {
            for (std::size_t i = 0; i < a.numel(); ++i) {
                if (a.value()[i] > 0.0f) {
                    a.grad()[i] += c.grad()[i];
                }
            }
        });
    }
    return c;
}

// ----------------------------------------------------------------------
// Matrix products
// ----------------------------------------------------------------------

inline Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ConfigError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c = Tensor::zeros({m, n}, detail::wants_grad(tape, {&a, &b}));
    detail::kernel_mm_nn(c.value().data(), a.value().data(), b.value().data(), m, k, n, false);
    if (c.requires_grad()) {
        tape->record([a = a, b = b, c, m, k, n]() mutable {
            if (a.requires_grad()) { // dA += dC * B^T
                detail::kernel_mm_nt(a.grad().data(), c.grad().data(), b.value().data(), m, n, k,
                                     true);
            }
            if (b.requires_grad()) { // dB += A^T * dC
                detail::kernel_mm_tn(b.grad().data(), a.value().data(), c.grad().data(), m, k, n,
                                     true);
            }
        });
    }
    return c;
}

// a [m,k] times b [n,k] transposed -> [m,n].
inline Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw ConfigError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor c = Tensor::zeros({m, n}, detail::wants_grad(tape, {&a, &b}));
    detail::kernel_mm_nt(c.value().data(), a.value().data(), b.value().data(), m, k, n, false);
    if (c.requires_grad()) {
        tape->record([a = a, b = b, c, m, k, n]() mutable {
            if (a.requires_grad()) { // dA += dC * B
                detail::kernel_mm_nn(a.grad().data(), c.grad().data(), b.value().data(), m, n, k,
                                     true);
            }
            if (b.requires_grad()) { // dB += dC^T * A
                detail::kernel_mm_tn(b.grad().data(), c.grad().data(), a.value().data(), m, n, k,
                                     true);
            }
        });
    }
    return c;
}

// ----------------------------------------------------------------------
// Row-wise softmax / log-softmax over the last dimension
// ----------------------------------------------------------------------

// Max-subtracted, double-accumulated. -inf inputs yield exactly 0.
inline Tensor softmax_lastdim(Tape* tape, const Tensor& x) {
    const auto [rows, n] = detail::lastdim_view(x);
    std::vector<float> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xin = x.value().data() + r * n;
        float* y = out.data() + r * n;
        float mx = xin[0];
        for (std::size_t j = 1; j < n; ++j) {
            mx = std::max(mx, xin[j]);
        }
        if (!(mx > -std::numeric_limits<float>::infinity())) {
            for (std::size_t j = 0; j < n; ++j) {
                y[j] = 0.0f;
            }
            continue;
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(static_cast<double>(xin[j]) - static_cast<double>(mx));
            y[j] = static_cast<float>(e); // un-normalized for now
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = static_cast<float>(static_cast<double>(y[j]) * inv);
        }
    }
    Tensor c = Tensor::from(x.shape(), std::move(out), detail::wants_grad(tape, {&x}));
    if (c.requires_grad()) {
        tape->record([x = x, c, rows = rows, n = n]() mutable {
            for (std::size_t r = 0; r < rows; ++r) {
                const float* y = c.value().data() + r * n;
                const float* dy = c.grad().data() + r * n;
                float* dx = x.grad().data() + r * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += static_cast<double>(dy[j]) * static_cast<double>(y[j]);
                }
                for (std::size_t j = 0; j < n; ++j) {
                    dx[j] += static_cast<float>(static_cast<double>(y[j]) *
                                                (static_cast<double>(dy[j]) - dot));
                }
            }
        });
    }
    return c;
}

inline Tensor log_softmax_lastdim(Tape* tape, const Tensor& x) {
    const auto [rows, n] = detail::lastdim_view(x);
    std::vector<float> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xin = x.value().data() + r * n;
        float* y = out.data() + r * n;
        float mx = xin[0];
        for (std::size_t j = 1; j < n; ++j) {
            mx = std::max(mx, xin[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            sum += std::exp(static_cast<double>(xin[j]) - static_cast<double>(mx));
        }
        const double lse = static_cast<double>(mx) + std::log(sum);
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = static_cast<float>(static_cast<double>(xin[j]) - lse);
        }
    }
    Tensor c = Tensor::from(x.shape(), std::move(out), detail::wants_grad(tape, {&x}));
    if (c.requires_grad()) {
        tape->record([x = x, c, rows = rows, n = n]() mutable {
            for (std::size_t r = 0; r < rows; ++r) {
                const float* y = c.value().data() + r * n;
                const float* dy = c.grad().data() + r * n;
                float* dx = x.grad().data() + r * n;
                double total = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    total += static_cast<double>(dy[j]);
                }
                for (std::size_t j = 0; j < n; ++j) {
                    dx[j] += static_cast<float>(static_cast<double>(dy[j]) -
                                                std::exp(static_cast<double>(y[j])) * total);
                }
            }
        });
    }
    return c;
}

// ----------------------------------------------------------------------
// RMS norm (per row, with learned gain)
// ----------------------------------------------------------------------

inline Tensor rmsnorm(Tape* tape, const Tensor& x, const Tensor& gain, double eps) {
    if (x.rank() != 2 || gain.rank() != 1 || gain.dim(0) != x.dim(1)) {
        throw ConfigError("rmsnorm: expected x [T,d] and gain [d], got " + shape_str(x.shape()) +
                          " and " + shape_str(gain.shape()));
    }
    const std::size_t rows = x.dim(0), d = x.dim(1);
    std::vector<float> out(x.numel());
    std::vector<double> inv_rms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xin = x.value().data() + r * d;
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            ms += static_cast<double>(xin[j]) * static_cast<double>(xin[j]);
        }
        ms /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(ms + eps);
        inv_rms[r] = inv;
        float* y = out.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) {
            y[j] = static_cast<float>(static_cast<double>(xin[j]) * inv *
                                      static_cast<double>(gain.value()[j]));
        }
    }
    Tensor c = Tensor::from(x.shape(), std::move(out), detail::wants_grad(tape, {&x, &gain}));
    if (c.requires_grad()) {
        tape->record([x = x, gain = gain, c, rows, d, inv_rms = std::move(inv_rms)]() mutable {
            for (std::size_t r = 0; r < rows; ++r) {
                const float* xin = x.value().data() + r * d;
                const float* dy = c.grad().data() + r * d;
                const double inv = inv_rms[r];
                if (gain.requires_grad()) {
                    for (std::size_t j = 0; j < d; ++j) {
                        gain.grad()[j] += static_cast<float>(static_cast<double>(dy[j]) *
                                                             static_cast<double>(xin[j]) * inv);
                    }
                }
                if (x.requires_grad()) {
                    double dot = 0.0; // sum_i dy_i * g_i * x_i
                    for (std::size_t j = 0; j < d; ++j) {
                        dot += static_cast<double>(dy[j]) * static_cast<double>(gain.value()[j]) *
                               static_cast<double>(xin[j]);
                    }
                    const double inv3_over_d = inv * inv * inv / static_cast<double>(d);
                    float* dx = x.grad().data() + r * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double direct = static_cast<double>(dy[j]) *
                                              static_cast<double>(gain.value()[j]) * inv;
                        dx[j] += static_cast<float>(direct - static_cast<double>(xin[j]) *
                                                                 inv3_over_d * dot);
                    }
                }
            }
        });
    }
    return c;
}

// ----------------------------------------------------------------------
// Rotary position rotation
// ----------------------------------------------------------------------

// Rotates adjacent pairs within each head_dim block by angle
// position * base^(-2i/head_dim). Tokens with equal position index get the
// identical rotation, regardless of where they sit in the sequence.
inline Tensor rope_rotate(Tape* tape, const Tensor& x, const std::vector<int>& positions,
                          std::size_t head_dim, double base) {
    if (head_dim == 0 || head_dim % 2 != 0) {
        throw ConfigError("rope_rotate: head dimension must be even, got " +
                          std::to_string(head_dim));
    }
    if (x.rank() != 2 || x.dim(1) % head_dim != 0 || x.dim(0) != positions.size()) {
        throw ConfigError("rope_rotate: shape " + shape_str(x.shape()) +
                          " incompatible with head_dim " + std::to_string(head_dim) + " and " +
                          std::to_string(positions.size()) + " positions");
    }
    const std::size_t rows = x.dim(0), width = x.dim(1), half = head_dim / 2;
    std::vector<double> inv_freq(half);
    for (std::size_t i = 0; i < half; ++i) {
        inv_freq[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    }
    // Captures by value: the backward closure outlives this call frame.
    auto apply = [positions, inv_freq, rows, width, half, head_dim](const float* in, float* dst,
                                                                    bool inverse) {
        for (std::size_t r = 0; r < rows; ++r) {
            const double pos = static_cast<double>(positions[r]);
            for (std::size_t h = 0; h < width; h += head_dim) {
                for (std::size_t i = 0; i < half; ++i) {
                    const double theta = pos * inv_freq[i];
                    const double c = std::cos(theta);
                    const double s = inverse ? -std::sin(theta) : std::sin(theta);
                    const std::size_t k0 = r * width + h + 2 * i;
                    const double x0 = in[k0], x1 = in[k0 + 1];
                    dst[k0] = static_cast<float>(x0 * c - x1 * s);
                    dst[k0 + 1] = static_cast<float>(x0 * s + x1 * c);
                }
            }
        }
    };
    std::vector<float> out(x.numel());
    apply(x.value().data(), out.data(), false);
    Tensor c = Tensor::from(x.shape(), std::move(out), detail::wants_grad(tape, {&x}));
    if (c.requires_grad()) {
        tape->record([x = x, c, apply]() mutable {
            // Rotation is orthogonal: d/dx = rotation by -theta of the grad.
            std::vector<float> dx(x.numel());
            apply(c.grad().data(), dx.data(), true);
            for (std::size_t i = 0; i < x.numel(); ++i) {
                x.grad()[i] += dx[i];
            }
        });
    }
    return c;
}

// Attention-permission fill: out[i] = x[i] where allowed, else exactly -inf.
// Blocked entries carry no gradient, and downstream softmax turns them into
// bitwise zero weights.
inline Tensor masked_neg_inf(Tape* tape, const Tensor& x, const std::vector<std::uint8_t>& mask) {
    if (x.numel() != mask.size()) {
        throw ConfigError("masked_neg_inf: mask size " + std::to_string(mask.size()) +
                          " does not match tensor " + shape_str(x.shape()));
    }
    const float ninf = -std::numeric_limits<float>::infinity();
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        out[i] = mask[i] ? x.value()[i] : ninf;
    }
    Tensor c = Tensor::from(x.shape(), std::move(out), detail::wants_grad(tape, {&x}));
    if (c.requires_grad()) {
        tape->record([x = x, c, mask]() mutable {
            for (std::size_t i = 0; i < x.numel(); ++i) {
                if (mask[i]) {
                    x.grad()[i] += c.grad()[i];
                }
            }
        });
    }
    return c;
}

// Inverted dropout: kept entries are scaled by 1/(1-rate) so eval mode needs
// no rescaling. The caller decides when to apply it (training only).
inline Tensor dropout(Tape* tape, const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    }
    if (rate == 0.0) {
        return x;
    }
    const float keep_scale = static_cast<float>(1.0 / (1.0 - rate));
    std::vector<float> mask(x.numel());
    for (auto& m : mask) {
        m = rng.uniform() >= rate ? keep_scale : 0.0f;
    }
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        out[i] = x.value()[i] * mask[i];
    }
    Tensor c = Tensor::from(x.shape(), std::move(out), detail::wants_grad(tape, {&x}));
    if (c.requires_grad()) {
        tape->record([x = x, c, mask = std::move(mask)]() mutable {
            for (std::size_t i = 0; i < x.numel(); ++i) {
                x.grad()[i] += c.grad()[i] * mask[i];
            }
        });
    }
    return c;
}

// ----------------------------------------------------------------------
// Gather / scatter style primitives
// ----------------------------------------------------------------------

inline Tensor embedding(Tape* tape, const Tensor& table, const std::vector<TokenId>& ids) {
    if (table.rank() != 2) {
        throw ConfigError("embedding: table must be 2-D, got " + shape_str(table.shape()));
    }
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    std::vector<float> out(ids.size() * d);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        const TokenId id = ids[t];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw ConfigError("embedding: token id " + std::to_string(id) +
                              " out of range for vocab " + std::to_string(vocab));
        }
        std::copy_n(table.value().data() + static_cast<std::size_t>(id) * d, d,
                    out.data() + t * d);
    }
    Tensor c = Tensor::from({ids.size(), d}, std::move(out), detail::wants_grad(tape, {&table}));
    if (c.requires_grad()) {
        tape->record([table = table, c, ids, d]() mutable {
            for (std::size_t t = 0; t < ids.size(); ++t) {
                float* dst = table.grad().data() + static_cast<std::size_t>(ids[t]) * d;
                const float* src = c.grad().data() + t * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dst[j] += src[j];
                }
            }
        });
    }
    return c;
}

inline Tensor slice_cols(Tape* tape, const Tensor& x, std::size_t start, std::size_t len) {
    if (x.rank() != 2 || start + len > x.dim(1)) {
        throw ConfigError("slice_cols: range [" + std::to_string(start) + ", " +
                          std::to_string(start + len) + ") out of bounds for " +
                          shape_str(x.shape()));
    }
    const std::size_t rows = x.dim(0), w = x.dim(1);
    std::vector<float> out(rows * len);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.value().data() + r * w + start, len, out.data() + r * len);
    }
    Tensor c = Tensor::from({rows, len}, std::move(out), detail::wants_grad(tape, {&x}));
    if (c.requires_grad()) {
        tape->record([x = x, c, start, len, rows, w]() mutable {
            for (std::size_t r = 0; r < rows; ++r) {
                float* dst = x.grad().data() + r * w + start;
                const float* src = c.grad().data() + r * len;
                for (std::size_t j = 0; j < len; ++j) {
                    dst[j] += src[j];
                }
            }
        });
    }
    return c;
}

inline Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw ConfigError("concat_cols: need at least one tensor");
    }
    const std::size_t rows = parts[0].dim(0);
    std::size_t width = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows) {
            throw ConfigError("concat_cols: row counts disagree");
        }
        width += p.dim(1);
        rg = rg || p.requires_grad();
    }
    std::vector<float> out(rows * width);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(p.value().data() + r * w, w, out.data() + r * width + off);
        }
        off += w;
    }
    Tensor c = Tensor::from({rows, width}, std::move(out), tape != nullptr && rg);
    if (c.requires_grad()) {
        tape->record([parts = parts, c, rows, width]() mutable {
            std::size_t off = 0;
            for (Tensor& p : parts) {
                const std::size_t w = p.dim(1);
                if (p.requires_grad()) {
                    for (std::size_t r = 0; r < rows; ++r) {
                        float* dst = p.grad().data() + r * w;
                        const float* src = c.grad().data() + r * width + off;
                        for (std::size_t j = 0; j < w; ++j) {
                            dst[j] += src[j];
                        }
                    }
                }
                off += w;
            }
        });
    }
    return c;
}

// out[i] = x[rows[i], cols[i]].
inline Tensor pick(Tape* tape, const Tensor& x, const std::vector<std::size_t>& rows,
                   const std::vector<std::size_t>& cols) {
    if (x.rank() != 2 || rows.size() != cols.size()) {
        throw ConfigError("pick: expected 2-D input and equal-length index lists");
    }
    const std::size_t w = x.dim(1);
    std::vector<float> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.dim(0) || cols[i] >= w) {
            throw ConfigError("pick: index out of range");
        }
        out[i] = x.value()[rows[i] * w + cols[i]];
    }
    Tensor c = Tensor::from({rows.size()}, std::move(out), detail::wants_grad(tape, {&x}));
    if (c.requires_grad()) {
        tape->record([x = x, c, rows, cols, w]() mutable {
            for (std::size_t i = 0; i < rows.size(); ++i) {
                x.grad()[rows[i] * w + cols[i]] += c.grad()[i];
            }
        });
    }
    return c;
}

// ----------------------------------------------------------------------
// Reductions
// ----------------------------------------------------------------------

inline Tensor sum(Tape* tape, const Tensor& x) {
    double acc = 0.0;
    for (float v : x.value()) {
        acc += static_cast<double>(v);
    }
    Tensor c = Tensor::scalar(static_cast<float>(acc), detail::wants_grad(tape, {&x}));
    if (c.requires_grad()) {
        tape->record([x = x, c]() mutable {
            const float g = c.grad()[0];
            for (std::size_t i = 0; i < x.numel(); ++i) {
                x.grad()[i] += g;
            }
        });
    }
    return c;
}

inline Tensor mean(Tape* tape, const Tensor& x) {
    if (x.numel() == 0) {
        throw ConfigError("mean: empty tensor");
    }
    double acc = 0.0;
    for (float v : x.value()) {
        acc += static_cast<double>(v);
    }
    const double inv = 1.0 / static_cast<double>(x.numel());
    Tensor c = Tensor::scalar(static_cast<float>(acc * inv), detail::wants_grad(tape, {&x}));
    if (c.requires_grad()) {
        tape->record([x = x, c, inv]() mutable {
            const double g = static_cast<double>(c.grad()[0]) * inv;
            for (std::size_t i = 0; i < x.numel(); ++i) {
                x.grad()[i] += static_cast<float>(g);
            }
        });
    }
    return c;
}

// Max over a list of scalars. Ties route the subgradient to the first
// maximal input only, so the backward path is deterministic.
inline Tensor max_of(Tape* tape, const std::vector<Tensor>& scalars) {
    if (scalars.empty()) {
        throw ConfigError("max_of: need at least one input");
    }
    std::size_t arg = 0;
    float best = scalars[0].item();
    for (std::size_t i = 1; i < scalars.size(); ++i) {
        const float v = scalars[i].item();
        if (v > best) {
            best = v;
            arg = i;
        }
    }
    bool rg = false;
    for (const Tensor& t : scalars) {
        rg = rg || t.requires_grad();
    }
    Tensor c = Tensor::scalar(best, tape != nullptr && rg);
    if (c.requires_grad()) {
        tape->record([scalars = scalars, c, arg]() mutable {
            Tensor& winner = scalars[arg];
            if (winner.requires_grad()) {
                winner.grad()[0] += c.grad()[0];
            }
        });
    }
    return c;
}

// ----------------------------------------------------------------------
// Finite-difference gradient check (test oracle)
// ----------------------------------------------------------------------

// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|),
// where numeric is a fourth-order difference: Richardson extrapolation of
// the central differences at steps h and 2h.  The wide stencil keeps the
// truncation term negligible at steps large enough that the float32
// rounding of the outputs stays below the measured difference.  Bumped
// coordinates are stored in float32, so every quotient divides by the
// realized step, not the nominal one.
inline double check_gradients(const std::function<Tensor(Tape*, const Tensor&)>& f,
                              const Tensor& x, double h) {
    Tensor probe = Tensor::from(x.shape(), x.value(), true);
    Tape tape;
    Tensor loss = f(&tape, probe);
    tape.backward(loss);

    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double base = static_cast<double>(x.value()[i]);
        const auto eval_at = [&](double offset, double& achieved) {
            std::vector<float> bumped = x.value();
            bumped[i] = static_cast<float>(base + offset);
            achieved = static_cast<double>(bumped[i]);
            return f(nullptr, Tensor::from(x.shape(), bumped, false)).item();
        };
        double x1p = 0, x1m = 0, x2p = 0, x2m = 0;
        const double f1p = eval_at(h, x1p);
        const double f1m = eval_at(-h, x1m);
        const double f2p = eval_at(2.0 * h, x2p);
        const double f2m = eval_at(-2.0 * h, x2m);
        if (x1p == x1m || x2p == x2m) {
            throw ConfigError("check_gradients: step h vanishes in float32 at coordinate " +
                              std::to_string(i));
        }
        const double d1 = (f1p - f1m) / (x1p - x1m);
        const double d2 = (f2p - f2m) / (x2p - x2m);
        const double numeric = (4.0 * d1 - d2) / 3.0;
        const double analytic = probe.grad()[i];
        const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace setformer
