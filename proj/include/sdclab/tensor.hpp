#pragma once

// Deterministic dense numeric kernels. Every reduction accumulates in a fixed
// ascending-index order so that bit-identical inputs give bit-identical
// outputs on any platform with IEEE-754 32-bit arithmetic.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdclab {

class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

class NumericalFailure : public std::runtime_error {
public:
    explicit NumericalFailure(const std::string& what) : std::runtime_error(what) {}
};

enum class Dtype { f32, bf16emu };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "bf16emu"; }

/// Round a binary32 value to the bf16 grid (8-bit exponent, 7 explicit
/// mantissa bits), round-to-nearest with ties to even mantissa.
inline float round_bf16(float x) {
    uint32_t bits;
    std::memcpy(&bits, &x, sizeof(bits));
    uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7FFFu + lsb;
    bits &= 0xFFFF0000u;
    float out;
    std::memcpy(&out, &bits, sizeof(out));
    return out;
}

inline double round_bf16(double x) { return static_cast<double>(round_bf16(static_cast<float>(x))); }

// splitmix64 finalizer; also used as a keyed hash for coordinate-seeded draws.
inline uint64_t mix64(uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) { return mix64(a ^ mix64(b)); }

inline double unit_from_u64(uint64_t v) { return static_cast<double>(v >> 11) * 0x1.0p-53; }

/// Counter-based PRNG: identical (seed, stream_id) gives an identical draw
/// sequence on every platform.
class Rng {
public:
    Rng(uint64_t seed, uint64_t stream_id)
        : state_(hash_combine(mix64(seed), stream_id)), counter_(0) {}

    uint64_t next_u64() { return mix64(state_ + 0x632BE59BD9B4E019ull * ++counter_); }

    double uniform() { return unit_from_u64(next_u64()); }  // [0, 1)

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

private:
    uint64_t state_;
    uint64_t counter_;
};

template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<int64_t> shape, Dtype dtype = Dtype::f32)
        : shape_(std::move(shape)), dtype_(dtype) {
        int64_t n = 1;
        for (int64_t d : shape_) {
            if (d < 0) throw ContractViolation("tensor dimension must be non-negative");
            n *= d;
        }
        data_.assign(static_cast<size_t>(n), T(0));
    }

    static TensorT zeros(std::vector<int64_t> shape, Dtype dtype = Dtype::f32) {
        return TensorT(std::move(shape), dtype);
    }

    static TensorT full(std::vector<int64_t> shape, T value, Dtype dtype = Dtype::f32) {
        TensorT t(std::move(shape), dtype);
        for (T& v : t.data_) v = value;
        return t;
    }

    static TensorT from_rows(std::vector<std::vector<T>> rows, Dtype dtype = Dtype::f32) {
        int64_t r = static_cast<int64_t>(rows.size());
        int64_t c = r > 0 ? static_cast<int64_t>(rows[0].size()) : 0;
        TensorT t({r, c}, dtype);
        for (int64_t i = 0; i < r; ++i) {
            if (static_cast<int64_t>(rows[i].size()) != c)
                throw ContractViolation("ragged rows in from_rows");
            for (int64_t j = 0; j < c; ++j) t.at(i, j) = rows[i][j];
        }
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    Dtype dtype() const { return dtype_; }
    void set_dtype(Dtype d) { dtype_ = d; }

    T& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
    T at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
    T& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
    T at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool bit_equal(const TensorT& o) const {
        return shape_ == o.shape_ &&
               std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0;
    }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::vector<int64_t> shape_;
    std::vector<T> data_;
    Dtype dtype_ = Dtype::f32;
};

using Tensor = TensorT<float>;

namespace detail {

template <typename T>
inline Dtype promote(const TensorT<T>& a, const TensorT<T>& b) {
    return (a.dtype() == Dtype::bf16emu || b.dtype() == Dtype::bf16emu) ? Dtype::bf16emu
                                                                        : Dtype::f32;
}

template <typename T>
inline void finalize(TensorT<T>& t, const char* op) {
    if (t.dtype() == Dtype::bf16emu) {
        T* p = t.data();
        for (int64_t i = 0; i < t.size(); ++i) p[i] = static_cast<T>(round_bf16(p[i]));
    }
    T* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(p[i])) throw NumericalFailure(std::string("non-finite result in ") + op);
}

}  // namespace detail

/// C = A * B with sequential accumulation over the contraction index in
/// ascending order for every output element (the k loop is the middle loop, so
/// per-element order matches the naive triple loop bit-exactly).
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ContractViolation("matmul shape mismatch");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> c({m, n}, detail::promote(a, b));
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = pa + i * k;
        T* crow = pc + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = pb + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    detail::finalize(c, "matmul");
    return c;
}

/// C = A * B^T, ascending contraction order.
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ContractViolation("matmul_nt shape mismatch");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    TensorT<T> c({m, n}, detail::promote(a, b));
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a.data() + i * k;
        T* crow = c.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b.data() + j * k;
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
    detail::finalize(c, "matmul_nt");
    return c;
}

/// C = A^T * B, ascending contraction order.
template <typename T>
TensorT<T> matmul_tn(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw ContractViolation("matmul_tn shape mismatch");
    const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    TensorT<T> c({m, n}, detail::promote(a, b));
    for (int64_t p = 0; p < k; ++p) {
        const T* arow = a.data() + p * m;
        const T* brow = b.data() + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c.data() + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    detail::finalize(c, "matmul_tn");
    return c;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ContractViolation("add shape mismatch");
    TensorT<T> c(a.shape(), detail::promote(a, b));
    for (int64_t i = 0; i < c.size(); ++i) c.at(i) = a.at(i) + b.at(i);
    detail::finalize(c, "add");
    return c;
}

template <typename T>
void add_inplace(TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ContractViolation("add shape mismatch");
    for (int64_t i = 0; i < a.size(); ++i) a.at(i) += b.at(i);
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ContractViolation("sub shape mismatch");
    TensorT<T> c(a.shape(), detail::promote(a, b));
    for (int64_t i = 0; i < c.size(); ++i) c.at(i) = a.at(i) - b.at(i);
    return c;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    TensorT<T> c(a.shape(), a.dtype());
    for (int64_t i = 0; i < c.size(); ++i) c.at(i) = a.at(i) * s;
    detail::finalize(c, "scale");
    return c;
}

/// Elementwise product (the gating multiply of SwiGLU).
template <typename T>
TensorT<T> hadamard(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) throw ContractViolation("hadamard shape mismatch");
    TensorT<T> c(a.shape(), detail::promote(a, b));
    for (int64_t i = 0; i < c.size(); ++i) c.at(i) = a.at(i) * b.at(i);
    detail::finalize(c, "hadamard");
    return c;
}

template <typename T>
T sigmoid_scalar(T x) {
    return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

/// swish(x) = x * sigmoid(x)
template <typename T>
TensorT<T> swish(const TensorT<T>& a) {
    TensorT<T> c(a.shape(), a.dtype());
    for (int64_t i = 0; i < c.size(); ++i) c.at(i) = a.at(i) * sigmoid_scalar(a.at(i));
    detail::finalize(c, "swish");
    return c;
}

/// Row-wise softmax over a causal prefix: row i uses columns [0, i+1) and the
/// rest are exactly zero. Max-subtraction and ascending-index sums keep the
/// result deterministic.
template <typename T>
TensorT<T> causal_softmax(const TensorT<T>& scores) {
    if (scores.rank() != 2 || scores.dim(0) != scores.dim(1))
        throw ContractViolation("causal_softmax expects a square matrix");
    const int64_t n = scores.dim(0);
    TensorT<T> out({n, n}, scores.dtype());
    for (int64_t i = 0; i < n; ++i) {
        const int64_t valid = i + 1;
        T mx = scores.at(i, 0);
        for (int64_t j = 1; j < valid; ++j) mx = std::max(mx, scores.at(i, j));
        T sum = 0;
        for (int64_t j = 0; j < valid; ++j) {
            const T e = std::exp(scores.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (int64_t j = 0; j < valid; ++j) out.at(i, j) /= sum;
    }
    detail::finalize(out, "causal_softmax");
    return out;
}

struct Norms {
    double l2 = 0.0;
    double inf = 0.0;
};

/// l2 over all elements; inf is the max-absolute-row-sum norm for 2-D inputs
/// and the max absolute entry otherwise.
template <typename T>
Norms norms(const TensorT<T>& a) {
    Norms n;
    double sq = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double v = static_cast<double>(a.at(i));
        sq += v * v;
    }
    n.l2 = std::sqrt(sq);
    if (a.rank() == 2) {
        for (int64_t i = 0; i < a.dim(0); ++i) {
            double row = 0.0;
            for (int64_t j = 0; j < a.dim(1); ++j) row += std::abs(static_cast<double>(a.at(i, j)));
            n.inf = std::max(n.inf, row);
        }
    } else {
        for (int64_t i = 0; i < a.size(); ++i)
            n.inf = std::max(n.inf, std::abs(static_cast<double>(a.at(i))));
    }
    return n;
}

struct LayerNormCache {
    std::vector<double> rstd;  // per row
};

/// Row-wise layer norm with gain/bias; eps is fixed at 1e-5.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                      TensorT<T>* xhat_out = nullptr, LayerNormCache* cache = nullptr) {
    if (x.rank() != 2 || gain.size() != x.dim(1) || bias.size() != x.dim(1))
        throw ContractViolation("layer_norm shape mismatch");
    constexpr double kEps = 1e-5;
    const int64_t rows = x.dim(0), cols = x.dim(1);
    TensorT<T> out({rows, cols}, x.dtype());
    if (xhat_out) *xhat_out = TensorT<T>({rows, cols});
    if (cache) cache->rstd.assign(static_cast<size_t>(rows), 0.0);
    for (int64_t i = 0; i < rows; ++i) {
        double mean = 0.0;
        for (int64_t j = 0; j < cols; ++j) mean += static_cast<double>(x.at(i, j));
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            const double d = static_cast<double>(x.at(i, j)) - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double rstd = 1.0 / std::sqrt(var + kEps);
        if (cache) cache->rstd[static_cast<size_t>(i)] = rstd;
        for (int64_t j = 0; j < cols; ++j) {
            const T xh = static_cast<T>((static_cast<double>(x.at(i, j)) - mean) * rstd);
            if (xhat_out) xhat_out->at(i, j) = xh;
            out.at(i, j) = gain.at(j) * xh + bias.at(j);
        }
    }
    detail::finalize(out, "layer_norm");
    return out;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
    if (a.rank() != 2) throw ContractViolation("transpose expects 2-D");
    TensorT<T> c({a.dim(1), a.dim(0)}, a.dtype());
    for (int64_t i = 0; i < a.dim(0); ++i)
        for (int64_t j = 0; j < a.dim(1); ++j) c.at(j, i) = a.at(i, j);
    return c;
}

/// Copy of columns [c0, c1).
template <typename T>
TensorT<T> col_slice(const TensorT<T>& a, int64_t c0, int64_t c1) {
    if (a.rank() != 2 || c0 < 0 || c1 > a.dim(1) || c0 > c1)
        throw ContractViolation("col_slice out of range");
    TensorT<T> c({a.dim(0), c1 - c0}, a.dtype());
    for (int64_t i = 0; i < a.dim(0); ++i)
        for (int64_t j = c0; j < c1; ++j) c.at(i, j - c0) = a.at(i, j);
    return c;
}

/// Copy of rows [r0, r1).
template <typename T>
TensorT<T> row_slice(const TensorT<T>& a, int64_t r0, int64_t r1) {
    if (a.rank() != 2 || r0 < 0 || r1 > a.dim(0) || r0 > r1)
        throw ContractViolation("row_slice out of range");
    TensorT<T> c({r1 - r0, a.dim(1)}, a.dtype());
    std::memcpy(c.data(), a.data() + r0 * a.dim(1),
                static_cast<size_t>((r1 - r0) * a.dim(1)) * sizeof(T));
    return c;
}

template <typename T>
void add_into_cols(TensorT<T>& dst, int64_t c0, const TensorT<T>& part) {
    for (int64_t i = 0; i < part.dim(0); ++i)
        for (int64_t j = 0; j < part.dim(1); ++j) dst.at(i, c0 + j) += part.at(i, j);
}

template <typename T>
void add_into_rows(TensorT<T>& dst, int64_t r0, const TensorT<T>& part) {
    for (int64_t i = 0; i < part.dim(0); ++i)
        for (int64_t j = 0; j < part.dim(1); ++j) dst.at(r0 + i, j) += part.at(i, j);
}

enum class InitScheme { kaiming_uniform, xavier_uniform };

/// Uniform init in the scheme's bound, fully reproducible from rng.
template <typename T>
TensorT<T> init_weight(int64_t fan_in, int64_t fan_out, InitScheme scheme, Rng& rng) {
    if (fan_in <= 0 || fan_out <= 0) throw ContractViolation("init_weight fans must be positive");
    const double bound = scheme == InitScheme::xavier_uniform
                             ? std::sqrt(6.0 / static_cast<double>(fan_in + fan_out))
                             : std::sqrt(6.0 / static_cast<double>(fan_in));
    TensorT<T> w({fan_in, fan_out});
    for (int64_t i = 0; i < w.size(); ++i) w.at(i) = static_cast<T>(rng.uniform(-bound, bound));
    return w;
}

}  // namespace sdclab
