#pragma once

// Knowledge models and the function transformation that wraps the server
// model with them.
//
//   P-KM  gp : x -> OneHot(k)     (stored as a class index)
//   R-KM  gr : x -> MultiHot(k)   (stored as a LabelMask)
//
//   T(f)(x) = (1 - lambda) * softmax(f(x) restricted to supp gr(x)) + lambda * gp(x)
//
// The restriction replaces out-of-range logits with kMaskedLogit, so the
// corresponding probabilities are exact zeros.

#include <cstdint>
#include <cstdio>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "fedknow/linalg.hpp"
#include "fedknow/nn.hpp"

namespace fedknow {

/// Raised when supp(gp(x)) is not contained in supp(gr(x)).
class AssumptionViolation : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Binary k-vector. A valid range has at least one bit set.
class LabelMask {
public:
    LabelMask() = default;
    explicit LabelMask(std::size_t k, bool value = false) : bits_(k, value ? 1 : 0) {}

    static LabelMask all(std::size_t k) { return LabelMask(k, true); }
    static LabelMask single(std::size_t k, std::size_t i) {
        LabelMask m(k);
        m.set(i);
        return m;
    }
    static LabelMask from_indices(std::size_t k, const std::vector<std::size_t>& idx) {
        LabelMask m(k);
        for (std::size_t i : idx) m.set(i);
        return m;
    }

    std::size_t size() const noexcept { return bits_.size(); }
    bool contains(std::size_t i) const { return i < bits_.size() && bits_[i] != 0; }
    void set(std::size_t i) {
        if (i >= bits_.size()) throw DimensionError("LabelMask::set: class index out of range");
        bits_[i] = 1;
    }

    std::size_t count() const noexcept {
        std::size_t n = 0;
        for (auto b : bits_) n += b;
        return n;
    }
    bool empty() const noexcept { return count() == 0; }

    void merge(const LabelMask& other) {
        require_same_size(size(), other.size(), "LabelMask::merge");
        for (std::size_t i = 0; i < bits_.size(); ++i) bits_[i] |= other.bits_[i];
    }

    bool subset_of(const LabelMask& other) const {
        require_same_size(size(), other.size(), "LabelMask::subset_of");
        for (std::size_t i = 0; i < bits_.size(); ++i)
            if (bits_[i] && !other.bits_[i]) return false;
        return true;
    }

    std::vector<std::size_t> support() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < bits_.size(); ++i)
            if (bits_[i]) out.push_back(i);
        return out;
    }

    /// "1011..." with class 0 first.
    std::string to_string() const {
        std::string s;
        for (auto b : bits_) s.push_back(b ? '1' : '0');
        return s;
    }
    static LabelMask parse(const std::string& s) {
        LabelMask m(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '1') m.bits_[i] = 1;
            else if (s[i] != '0') throw std::invalid_argument("LabelMask: bad bit string '" + s + "'");
        }
        return m;
    }

    friend bool operator==(const LabelMask&, const LabelMask&) = default;

private:
    std::vector<std::uint8_t> bits_;
};

// ---------------------------------------------------------------------------
// Feature operators

/// out[i] = x[omega[i]]; omega holds 0-based indices in ascending order.
inline Vec mask_op(const std::vector<std::size_t>& omega, std::span<const double> x) {
    Vec out;
    out.reserve(omega.size());
    for (std::size_t i = 0; i < omega.size(); ++i) {
        if (omega[i] >= x.size())
            throw DimensionError("mask_op: index " + std::to_string(omega[i]) + " out of range for length " +
                                 std::to_string(x.size()));
        if (i > 0 && omega[i] <= omega[i - 1]) throw std::invalid_argument("mask_op: indices must be strictly ascending");
        out.push_back(x[omega[i]]);
    }
    return out;
}

/// Non-overlapping p x p max pooling of a square matrix.
inline Mat maxpool_op(std::size_t p, const Mat& x) {
    if (x.rows() != x.cols()) throw DimensionError("maxpool_op: input must be square");
    if (p == 0 || x.rows() % p != 0)
        throw std::invalid_argument("maxpool_op: side " + std::to_string(x.rows()) + " not divisible by " +
                                    std::to_string(p));
    const std::size_t k = x.rows() / p;
    Mat out(k, k);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            double best = x(i * p, j * p);
            for (std::size_t a = 0; a < p; ++a)
                for (std::size_t b = 0; b < p; ++b) best = std::max(best, x(i * p + a, j * p + b));
            out(i, j) = best;
        }
    return out;
}

struct IdentityMap {};
struct MaskMap {
    std::vector<std::size_t> omega;
};
/// Treats x as a row-major side x side image.
struct MaxpoolMap {
    std::size_t side = 0;
    std::size_t pool = 1;
};

using FeatureMap = std::variant<IdentityMap, MaskMap, MaxpoolMap>;

inline Vec apply_feature_map(const FeatureMap& map, std::span<const double> x) {
    return std::visit(
        [&](const auto& m) -> Vec {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, IdentityMap>) {
                return Vec(x.begin(), x.end());
            } else if constexpr (std::is_same_v<T, MaskMap>) {
                return mask_op(m.omega, x);
            } else {
                require_same_size(x.size(), m.side * m.side, "maxpool feature map");
                return maxpool_op(m.pool, Mat(m.side, m.side, Vec(x.begin(), x.end()))).data();
            }
        },
        map);
}

/// Buckets the first `features` coordinates by sign and magnitude:
/// code = sign * buckets + min(floor(|v| * buckets), buckets - 1).
struct KeyQuantizer {
    std::size_t features = 3;
    std::size_t buckets = 4;

    std::uint64_t key(std::span<const double> x) const {
        std::uint64_t k = 0;
        const std::size_t n = std::min(features, x.size());
        for (std::size_t j = 0; j < n; ++j) {
            const double v = x[j];
            const std::uint64_t sign = v < 0 ? 1 : 0;
            const double mag = std::min(std::fabs(v), 1.0) * static_cast<double>(buckets);
            const auto bucket = std::min<std::uint64_t>(static_cast<std::uint64_t>(mag), buckets - 1);
            k = k * (2 * buckets) + sign * buckets + bucket;
        }
        return k;
    }

    friend bool operator==(const KeyQuantizer&, const KeyQuantizer&) = default;
};

// ---------------------------------------------------------------------------
// Prediction-type knowledge models

struct TablePredictor {
    KeyQuantizer quantizer;
    std::map<std::uint64_t, std::size_t> table;
    std::size_t fallback = 0;
};

/// argmax(weights * phi(x) + bias)
struct LogisticPredictor {
    Mat weights;
    Vec bias;
};

/// Wraps arbitrary code; cannot be serialized.
struct FunctionPredictor {
    std::function<std::size_t(std::span<const double>)> fn;
};

class PredKM {
public:
    using Impl = std::variant<TablePredictor, LogisticPredictor, FunctionPredictor>;

    PredKM() = default;
    PredKM(std::size_t classes, FeatureMap features, Impl impl)
        : classes_(classes), features_(std::move(features)), impl_(std::move(impl)) {}

    static PredKM constant(std::size_t classes, std::size_t c) {
        if (c >= classes) throw DimensionError("PredKM::constant: class out of range");
        return PredKM(classes, IdentityMap{}, TablePredictor{{}, {}, c});
    }
    static PredKM function(std::size_t classes, std::function<std::size_t(std::span<const double>)> fn) {
        return PredKM(classes, IdentityMap{}, FunctionPredictor{std::move(fn)});
    }

    std::size_t classes() const noexcept { return classes_; }
    const FeatureMap& features() const noexcept { return features_; }
    const Impl& impl() const noexcept { return impl_; }

    /// The index of the single nonzero entry of gp(x).
    std::size_t predict(std::span<const double> x) const {
        const Vec phi = apply_feature_map(features_, x);
        const std::size_t c = std::visit(
            [&](const auto& p) -> std::size_t {
                using T = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<T, TablePredictor>) {
                    auto it = p.table.find(p.quantizer.key(phi));
                    return it == p.table.end() ? p.fallback : it->second;
                } else if constexpr (std::is_same_v<T, LogisticPredictor>) {
                    Vec z = matvec(p.weights, phi);
                    for (std::size_t i = 0; i < z.size(); ++i) z[i] += p.bias[i];
                    return argmax(z);
                } else {
                    return p.fn(phi);
                }
            },
            impl_);
        if (c >= classes_) throw DimensionError("PredKM: predicted class out of range");
        return c;
    }

    LabelMask operator()(std::span<const double> x) const { return LabelMask::single(classes_, predict(x)); }

private:
    std::size_t classes_ = 0;
    FeatureMap features_ = IdentityMap{};
    Impl impl_;
};

// ---------------------------------------------------------------------------
// Range-type knowledge models

struct RangeTable {
    KeyQuantizer quantizer;
    std::map<std::uint64_t, LabelMask> table;
    LabelMask fallback;
};

/// x[feature] >= threshold ? above : below
struct ThresholdRule {
    std::size_t feature = 0;
    double threshold = 0.0;
    LabelMask above;
    LabelMask below;
};

struct RangeFunction {
    std::function<LabelMask(std::span<const double>)> fn;
};

class RangeKM {
public:
    using Impl = std::variant<RangeTable, ThresholdRule, RangeFunction>;

    RangeKM() = default;
    RangeKM(std::size_t classes, FeatureMap features, Impl impl)
        : classes_(classes), features_(std::move(features)), impl_(std::move(impl)) {}

    /// gr(x) = 1^k everywhere.
    static RangeKM all(std::size_t classes) {
        return RangeKM(classes, IdentityMap{}, RangeTable{{}, {}, LabelMask::all(classes)});
    }
    static RangeKM constant(LabelMask mask) {
        const std::size_t k = mask.size();
        return RangeKM(k, IdentityMap{}, RangeTable{{}, {}, std::move(mask)});
    }
    static RangeKM function(std::size_t classes, std::function<LabelMask(std::span<const double>)> fn) {
        return RangeKM(classes, IdentityMap{}, RangeFunction{std::move(fn)});
    }

    std::size_t classes() const noexcept { return classes_; }
    const FeatureMap& features() const noexcept { return features_; }
    const Impl& impl() const noexcept { return impl_; }

    LabelMask operator()(std::span<const double> x) const {
        const Vec phi = apply_feature_map(features_, x);
        LabelMask m = std::visit(
            [&](const auto& r) -> LabelMask {
                using T = std::decay_t<decltype(r)>;
                if constexpr (std::is_same_v<T, RangeTable>) {
                    auto it = r.table.find(r.quantizer.key(phi));
                    return it == r.table.end() ? r.fallback : it->second;
                } else if constexpr (std::is_same_v<T, ThresholdRule>) {
                    if (r.feature >= phi.size()) throw DimensionError("ThresholdRule: feature out of range");
                    return phi[r.feature] >= r.threshold ? r.above : r.below;
                } else {
                    return r.fn(phi);
                }
            },
            impl_);
        if (m.size() != classes_) throw DimensionError("RangeKM: mask arity mismatch");
        if (m.empty()) throw AssumptionViolation("RangeKM: empty range (output must be multi-hot)");
        return m;
    }

private:
    std::size_t classes_ = 0;
    FeatureMap features_ = IdentityMap{};
    Impl impl_;
};

// ---------------------------------------------------------------------------
// Knowledge pair, transformation and personalized model

struct KnowledgePair {
    PredKM gp;
    RangeKM gr;
    double lambda = 0.0;

    KnowledgePair() = default;
    KnowledgePair(PredKM p, RangeKM r, double lam) : gp(std::move(p)), gr(std::move(r)), lambda(lam) {
        if (gp.classes() != gr.classes()) throw DimensionError("KnowledgePair: P-KM and R-KM arity differ");
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("KnowledgePair: lambda must lie in [0,1]");
    }

    /// lambda = 0 and gr = 1^k: the plain softmax of the server model.
    static KnowledgePair none(std::size_t classes) {
        return KnowledgePair(PredKM::constant(classes, 0), RangeKM::all(classes), 0.0);
    }

    std::size_t classes() const noexcept { return gp.classes(); }
};

/// Precomputed knowledge outputs at one sample.
struct KnowledgeAt {
    std::size_t gp_class = 0;
    LabelMask range;
};

inline KnowledgeAt evaluate_knowledge(const KnowledgePair& km, std::span<const double> x) {
    KnowledgeAt at{km.gp.predict(x), km.gr(x)};
    if (!at.range.contains(at.gp_class))
        throw AssumptionViolation("P-KM class " + std::to_string(at.gp_class) + " outside R-KM range " +
                                  at.range.to_string());
    return at;
}

/// Logits with out-of-range entries replaced by kMaskedLogit, then softmax.
inline Vec masked_softmax(std::span<const double> logits, const LabelMask& range) {
    require_same_size(logits.size(), range.size(), "masked_softmax");
    Vec z(logits.begin(), logits.end());
    for (std::size_t i = 0; i < z.size(); ++i)
        if (!range.contains(i)) z[i] = kMaskedLogit;
    return softmax(z);
}

inline Vec transform(double lambda, const KnowledgeAt& at, std::span<const double> logits) {
    if (!at.range.contains(at.gp_class))
        throw AssumptionViolation("P-KM class " + std::to_string(at.gp_class) + " outside R-KM range");
    for (double v : logits)
        if (!std::isfinite(v)) throw std::domain_error("transform: non-finite logit");
    Vec out = masked_softmax(logits, at.range);
    for (double& v : out) v *= 1.0 - lambda;
    out[at.gp_class] += lambda;
    return out;
}

inline Vec transform(const KnowledgePair& km, std::span<const double> logits, std::span<const double> x) {
    return transform(km.lambda, evaluate_knowledge(km, x), logits);
}

/// Rows of (1 - lambda) (diag(s) - s s^T) J_f, built from one forward trace
/// and one reverse pass per in-range class.
inline Mat personalized_jacobian(const ModelParams& server, double lambda, const KnowledgeAt& at,
                                 std::span<const double> x) {
    const auto acts = detail::forward_trace(server, x);
    const Vec s = masked_softmax(acts.back(), at.range);
    const std::size_t k = s.size();
    Mat jac(k, server.size());
    if (lambda == 1.0) return jac;
    Vec w(k);
    for (std::size_t i = 0; i < k; ++i) {
        if (s[i] == 0.0) continue;
        for (std::size_t j = 0; j < k; ++j) w[j] = (1.0 - lambda) * s[i] * ((i == j ? 1.0 : 0.0) - s[j]);
        detail::backprop(server, acts, w, jac.row(i));
    }
    return jac;
}

/// f^m(theta; .) = T(f(theta; .)) for one client's knowledge pair.
class PersonalizedModel {
public:
    PersonalizedModel(const ModelParams& server, const KnowledgePair& km) : server_(&server), km_(&km) {
        require_same_size(server.spec.outputs(), km.classes(), "PersonalizedModel");
    }

    const ModelParams& server() const noexcept { return *server_; }
    const KnowledgePair& knowledge() const noexcept { return *km_; }

    Vec predict(std::span<const double> x) const { return transform(*km_, forward(*server_, x), x); }

    std::size_t predict_class(std::span<const double> x) const { return argmax(predict(x)); }

    Mat jacobian(std::span<const double> x) const {
        return personalized_jacobian(*server_, km_->lambda, evaluate_knowledge(*km_, x), x);
    }

private:
    const ModelParams* server_;
    const KnowledgePair* km_;
};

inline Vec predict(const PersonalizedModel& pm, std::span<const double> x) { return pm.predict(x); }

// ---------------------------------------------------------------------------
// Construction from local data

/// Multinomial logistic regression on phi(x), trained with per-sample SGD
/// from zero weights. Returns a constant predictor when only one class is
/// present.
inline PredKM fit_logistic_pkm(const std::vector<Vec>& features, const std::vector<std::size_t>& labels,
                               std::size_t classes, FeatureMap feature_map, std::size_t epochs, double lr,
                               Rng& rng) {
    require_same_size(features.size(), labels.size(), "fit_logistic_pkm");
    if (features.empty()) throw std::invalid_argument("fit_logistic_pkm: empty training subset");
    for (std::size_t y : labels)
        if (y >= classes) throw DimensionError("fit_logistic_pkm: label out of range");
    bool single = true;
    for (std::size_t y : labels) single = single && y == labels.front();
    if (single) return PredKM(classes, std::move(feature_map), TablePredictor{{}, {}, labels.front()});

    std::vector<Vec> phi;
    phi.reserve(features.size());
    for (const Vec& x : features) phi.push_back(apply_feature_map(feature_map, x));
    const std::size_t m = phi.front().size();
    Mat w(classes, m);
    Vec b(classes, 0.0);
    std::vector<std::size_t> order(phi.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        for (std::size_t idx : order) {
            Vec z = matvec(w, phi[idx]);
            for (std::size_t c = 0; c < classes; ++c) z[c] += b[c];
            Vec p = softmax(z);
            p[labels[idx]] -= 1.0;
            for (std::size_t c = 0; c < classes; ++c) {
                const double g = lr * p[c];
                b[c] -= g;
                auto row = w.row(c);
                for (std::size_t j = 0; j < m; ++j) row[j] -= g * phi[idx][j];
            }
        }
    }
    return PredKM(classes, std::move(feature_map), LogisticPredictor{std::move(w), std::move(b)});
}

/// Hash-table R-KM: each seen key maps to the union of the true labels and
/// the P-KM predictions observed under it; unseen keys map to the union of
/// every mask. P-KM predictions at `unlabelled` points are merged into
/// existing keys and the fallback, so gp stays inside gr there without
/// consulting their labels.
inline RangeKM build_table_rkm(const std::vector<Vec>& features, const std::vector<std::size_t>& labels,
                               std::size_t classes, const PredKM& gp, KeyQuantizer quantizer,
                               const std::vector<Vec>& unlabelled = {}) {
    require_same_size(features.size(), labels.size(), "build_table_rkm");
    if (features.empty()) throw std::invalid_argument("build_table_rkm: empty subset");
    RangeTable t{quantizer, {}, LabelMask(classes)};
    for (std::size_t i = 0; i < features.size(); ++i) {
        const std::uint64_t key = quantizer.key(features[i]);
        auto [it, inserted] = t.table.try_emplace(key, LabelMask(classes));
        it->second.set(labels[i]);
        it->second.set(gp.predict(features[i]));
    }
    for (const Vec& x : unlabelled) {
        const std::size_t c = gp.predict(x);
        if (auto it = t.table.find(quantizer.key(x)); it != t.table.end()) it->second.set(c);
        t.fallback.set(c);
    }
    for (const auto& [key, mask] : t.table) t.fallback.merge(mask);
    return RangeKM(classes, IdentityMap{}, std::move(t));
}

/// Indices (into `features`) where supp(gp(x)) is not inside supp(gr(x)).
inline std::vector<std::size_t> audit_assumption(const KnowledgePair& km, const std::vector<Vec>& features) {
    std::vector<std::size_t> bad;
    for (std::size_t i = 0; i < features.size(); ++i)
        if (!km.gr(features[i]).contains(km.gp.predict(features[i]))) bad.push_back(i);
    return bad;
}

/// Indices where the true label falls outside gr(x).
inline std::vector<std::size_t> audit_range(const RangeKM& gr, const std::vector<Vec>& features,
                                            const std::vector<std::size_t>& labels) {
    require_same_size(features.size(), labels.size(), "audit_range");
    std::vector<std::size_t> bad;
    for (std::size_t i = 0; i < features.size(); ++i)
        if (!gr(features[i]).contains(labels[i])) bad.push_back(i);
    return bad;
}

// ---------------------------------------------------------------------------
// Text serialization
//
//   FEDKNOW-KM v1
//   pred <k> | range <k>
//   features identity | features mask <m> i_1 .. i_m | features maxpool <side> <p>
//   <kind-specific body>
//   end

inline constexpr const char* kKmMagic = "FEDKNOW-KM v1";

namespace detail {

inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_features(std::ostream& out, const FeatureMap& map) {
    std::visit(
        [&](const auto& m) {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, IdentityMap>) {
                out << "features identity\n";
            } else if constexpr (std::is_same_v<T, MaskMap>) {
                out << "features mask " << m.omega.size();
                for (std::size_t i : m.omega) out << ' ' << i;
                out << '\n';
            } else {
                out << "features maxpool " << m.side << ' ' << m.pool << '\n';
            }
        },
        map);
}

inline void expect_token(std::istream& in, const std::string& want) {
    std::string tok;
    if (!(in >> tok) || tok != want)
        throw std::runtime_error("knowledge model: expected '" + want + "', got '" + tok + "'");
}

template <typename T>
T read_value(std::istream& in, const char* what) {
    T v{};
    if (!(in >> v)) throw std::runtime_error(std::string("knowledge model: cannot read ") + what);
    return v;
}

inline double read_double(std::istream& in, const char* what) {
    std::string tok = read_value<std::string>(in, what);
    try {
        std::size_t used = 0;
        double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error(std::string("knowledge model: bad number for ") + what + ": '" + tok + "'");
    }
}

inline FeatureMap read_features(std::istream& in) {
    expect_token(in, "features");
    const auto kind = read_value<std::string>(in, "feature map kind");
    if (kind == "identity") return IdentityMap{};
    if (kind == "mask") {
        MaskMap m;
        const auto n = read_value<std::size_t>(in, "mask size");
        for (std::size_t i = 0; i < n; ++i) m.omega.push_back(read_value<std::size_t>(in, "mask index"));
        return m;
    }
    if (kind == "maxpool") {
        MaxpoolMap m;
        m.side = read_value<std::size_t>(in, "maxpool side");
        m.pool = read_value<std::size_t>(in, "maxpool size");
        return m;
    }
    throw std::runtime_error("knowledge model: unknown feature map '" + kind + "'");
}

inline LabelMask read_mask(std::istream& in, std::size_t k) {
    LabelMask m = LabelMask::parse(read_value<std::string>(in, "label mask"));
    if (m.size() != k) throw std::runtime_error("knowledge model: mask arity mismatch");
    return m;
}

}  // namespace detail

inline void save_km(std::ostream& out, const PredKM& km) {
    out << kKmMagic << "\npred " << km.classes() << '\n';
    detail::write_features(out, km.features());
    std::visit(
        [&](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, TablePredictor>) {
                out << "table " << p.quantizer.features << ' ' << p.quantizer.buckets << ' ' << p.fallback << ' '
                    << p.table.size() << '\n';
                for (const auto& [key, c] : p.table) out << key << ' ' << c << '\n';
            } else if constexpr (std::is_same_v<T, LogisticPredictor>) {
                out << "logistic " << p.weights.rows() << ' ' << p.weights.cols() << '\n';
                for (std::size_t r = 0; r < p.weights.rows(); ++r) {
                    for (std::size_t c = 0; c < p.weights.cols(); ++c)
                        out << (c ? " " : "") << detail::fmt_double(p.weights(r, c));
                    out << '\n';
                }
                for (std::size_t c = 0; c < p.bias.size(); ++c) out << (c ? " " : "") << detail::fmt_double(p.bias[c]);
                out << '\n';
            } else {
                throw std::logic_error("save_km: function-backed P-KM cannot be serialized");
            }
        },
        km.impl());
    out << "end\n";
}

inline void save_km(std::ostream& out, const RangeKM& km) {
    out << kKmMagic << "\nrange " << km.classes() << '\n';
    detail::write_features(out, km.features());
    std::visit(
        [&](const auto& r) {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, RangeTable>) {
                out << "table " << r.quantizer.features << ' ' << r.quantizer.buckets << ' ' << r.fallback.to_string()
                    << ' ' << r.table.size() << '\n';
                for (const auto& [key, m] : r.table) out << key << ' ' << m.to_string() << '\n';
            } else if constexpr (std::is_same_v<T, ThresholdRule>) {
                out << "threshold " << r.feature << ' ' << detail::fmt_double(r.threshold) << ' '
                    << r.above.to_string() << ' ' << r.below.to_string() << '\n';
            } else {
                throw std::logic_error("save_km: function-backed R-KM cannot be serialized");
            }
        },
        km.impl());
    out << "end\n";
}

inline PredKM load_pred_km(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kKmMagic) throw std::runtime_error("knowledge model: bad header");
    detail::expect_token(in, "pred");
    const auto k = detail::read_value<std::size_t>(in, "class count");
    FeatureMap features = detail::read_features(in);
    const auto kind = detail::read_value<std::string>(in, "model kind");
    PredKM::Impl impl;
    if (kind == "table") {
        TablePredictor t;
        t.quantizer.features = detail::read_value<std::size_t>(in, "quantizer features");
        t.quantizer.buckets = detail::read_value<std::size_t>(in, "quantizer buckets");
        t.fallback = detail::read_value<std::size_t>(in, "fallback class");
        const auto n = detail::read_value<std::size_t>(in, "table size");
        for (std::size_t i = 0; i < n; ++i) {
            const auto key = detail::read_value<std::uint64_t>(in, "table key");
            t.table[key] = detail::read_value<std::size_t>(in, "table class");
        }
        impl = std::move(t);
    } else if (kind == "logistic") {
        const auto rows = detail::read_value<std::size_t>(in, "weight rows");
        const auto cols = detail::read_value<std::size_t>(in, "weight cols");
        if (rows != k) throw std::runtime_error("knowledge model: logistic rows != class count");
        LogisticPredictor p{Mat(rows, cols), Vec(rows)};
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) p.weights(r, c) = detail::read_double(in, "weight");
        for (double& v : p.bias) v = detail::read_double(in, "bias");
        impl = std::move(p);
    } else {
        throw std::runtime_error("knowledge model: unknown P-KM kind '" + kind + "'");
    }
    detail::expect_token(in, "end");
    in.ignore(1);
    return PredKM(k, std::move(features), std::move(impl));
}

inline RangeKM load_range_km(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kKmMagic) throw std::runtime_error("knowledge model: bad header");
    detail::expect_token(in, "range");
    const auto k = detail::read_value<std::size_t>(in, "class count");
    FeatureMap features = detail::read_features(in);
    const auto kind = detail::read_value<std::string>(in, "model kind");
    RangeKM::Impl impl;
    if (kind == "table") {
        RangeTable t;
        t.quantizer.features = detail::read_value<std::size_t>(in, "quantizer features");
        t.quantizer.buckets = detail::read_value<std::size_t>(in, "quantizer buckets");
        t.fallback = detail::read_mask(in, k);
        const auto n = detail::read_value<std::size_t>(in, "table size");
        for (std::size_t i = 0; i < n; ++i) {
            const auto key = detail::read_value<std::uint64_t>(in, "table key");
            t.table[key] = detail::read_mask(in, k);
        }
        impl = std::move(t);
    } else if (kind == "threshold") {
        ThresholdRule r;
        r.feature = detail::read_value<std::size_t>(in, "threshold feature");
        r.threshold = detail::read_double(in, "threshold");
        r.above = detail::read_mask(in, k);
        r.below = detail::read_mask(in, k);
        impl = std::move(r);
    } else {
        throw std::runtime_error("knowledge model: unknown R-KM kind '" + kind + "'");
    }
    detail::expect_token(in, "end");
    in.ignore(1);
    return RangeKM(k, std::move(features), std::move(impl));
}

}  // namespace fedknow
