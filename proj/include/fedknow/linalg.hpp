#pragma once

// Dense vectors, row-major matrices, the masked softmax and a portable
// seeded generator. Everything is 64-bit floating point.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedknow {

using Vec = std::vector<double>;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Marker for a logit that lies outside the admissible label range.
/// softmax maps it to an exact zero.
inline constexpr double kMaskedLogit = -std::numeric_limits<double>::infinity();

/// Probabilities are clamped below at this value before taking logs.
inline constexpr double kProbFloor = 1e-12;

inline bool is_masked(double z) noexcept { return std::isinf(z) && z < 0; }

class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw DimensionError("Mat: data length " + std::to_string(data_.size()) +
                                 " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    const std::vector<double>& data() const noexcept { return data_; }
    std::vector<double>& data() noexcept { return data_; }

    friend bool operator==(const Mat&, const Mat&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
    if (a != b)
        throw DimensionError(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                             " vs " + std::to_string(b) + ")");
}

inline Vec matvec(const Mat& a, std::span<const double> x) {
    require_same_size(a.cols(), x.size(), "matvec");
    Vec y(a.rows(), 0.0);
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double acc = 0.0;
        auto row = a.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
    return y;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    require_same_size(a.size(), b.size(), "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    require_same_size(x.size(), y.size(), "axpy");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
    if (v.empty()) throw DimensionError("argmax: empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

/// Softmax with max-subtraction. Entries equal to kMaskedLogit come out as
/// exact zeros; at least one entry must be finite.
inline Vec softmax(std::span<const double> z) {
    if (z.empty()) throw DimensionError("softmax: empty vector");
    double hi = -std::numeric_limits<double>::infinity();
    for (double v : z) {
        if (is_masked(v)) continue;
        if (!std::isfinite(v)) throw std::domain_error("softmax: non-finite logit");
        hi = std::max(hi, v);
    }
    if (is_masked(hi)) throw std::domain_error("softmax: every logit is masked (empty support)");
    Vec out(z.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (is_masked(z[i])) continue;
        out[i] = std::exp(z[i] - hi);
        total += out[i];
    }
    for (double& v : out) v /= total;
    return out;
}

/// -sum_i q_i log(max(p_i, kProbFloor))
inline double cross_entropy(std::span<const double> p, std::span<const double> q) {
    require_same_size(p.size(), q.size(), "cross_entropy");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (q[i] == 0.0) continue;
        acc -= q[i] * std::log(std::max(p[i], kProbFloor));
    }
    return acc;
}

/// Cross-entropy against a one-hot target given by its class index.
inline double cross_entropy(std::span<const double> p, std::size_t label) {
    if (label >= p.size()) throw DimensionError("cross_entropy: label out of range");
    return -std::log(std::max(p[label], kProbFloor));
}

/// SplitMix64 finalizer (Steele, Lea, Flood 2014).
inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// SplitMix64 stream. The state advances by the 64-bit golden ratio and each
/// output is the finalizer above, so sequences are identical on every
/// platform. Distributions are implemented here rather than through
/// <random>, whose distribution algorithms are implementation-defined.
class Rng {
public:
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

    explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() noexcept {
        state_ += kGamma;
        return mix64(state_);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n) by rejection, so no modulo bias.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    /// Standard normal via Box-Muller; the second variate of each pair is kept.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(angle);
        has_spare_ = true;
        return r * std::cos(angle);
    }

    /// Fisher-Yates, back to front.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Independent stream keyed by the seed of this generator and a tag path,
    /// e.g. derive({round, client}). Does not consume from this stream.
    Rng derive(std::initializer_list<std::uint64_t> tags) const noexcept {
        std::uint64_t h = mix64(seed_ ^ 0x6A09E667F3BCC909ULL);
        std::uint64_t i = 1;
        for (std::uint64_t t : tags) h = mix64(h ^ mix64(t + kGamma * i++));
        return Rng(h);
    }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace fedknow
