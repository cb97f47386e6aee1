#pragma once

// Reduction of bounded regression on [lo, hi] to k-class classification by
// equal-width binning. Bin i (0-based) is [lo + i*w, lo + (i+1)*w) except the
// last, which is closed at hi.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fedknow/data.hpp"
#include "fedknow/knowledge.hpp"

namespace fedknow {

class IntervalPartition {
public:
    static constexpr std::size_t kDefaultBins = 20;

    IntervalPartition(double lo, double hi, std::size_t bins = kDefaultBins) : lo_(lo), hi_(hi), bins_(bins) {
        if (!(std::isfinite(lo) && std::isfinite(hi) && lo < hi))
            throw std::invalid_argument("IntervalPartition: need finite lo < hi");
        if (bins < 2) throw std::invalid_argument("IntervalPartition: need at least 2 bins");
    }

    double lo() const noexcept { return lo_; }
    double hi() const noexcept { return hi_; }
    std::size_t bins() const noexcept { return bins_; }
    double width() const noexcept { return (hi_ - lo_) / static_cast<double>(bins_); }

    /// Left edge of bin i; edge(bins) == hi. Computed as lo + (hi - lo) * (i / k)
    /// so the edges of a partition with 2k bins include those with k bins bit
    /// for bit.
    double edge(std::size_t i) const {
        if (i >= bins_) return hi_;
        return lo_ + (hi_ - lo_) * (static_cast<double>(i) / static_cast<double>(bins_));
    }

    bool contains(double s) const noexcept { return s >= lo_ && s <= hi_; }

    std::size_t bin_of(double s) const {
        if (!contains(s)) throw std::domain_error("IntervalPartition: value outside [lo, hi]");
        auto i = static_cast<std::size_t>(std::floor((s - lo_) / (hi_ - lo_) * static_cast<double>(bins_)));
        i = std::min(i, bins_ - 1);
        while (i > 0 && s < edge(i)) --i;
        while (i + 1 < bins_ && s >= edge(i + 1)) ++i;
        return i;
    }

private:
    double lo_;
    double hi_;
    std::size_t bins_;
};

struct Interval {
    double lo;
    double hi;
    bool lo_closed = true;
    bool hi_closed = true;

    bool empty() const noexcept { return lo > hi || (lo == hi && !(lo_closed && hi_closed)); }
};

namespace detail {

inline bool intervals_meet(const Interval& a, const Interval& b) {
    double left;
    bool left_closed;
    if (a.lo > b.lo) {
        left = a.lo;
        left_closed = a.lo_closed;
    } else if (b.lo > a.lo) {
        left = b.lo;
        left_closed = b.lo_closed;
    } else {
        left = a.lo;
        left_closed = a.lo_closed && b.lo_closed;
    }
    double right;
    bool right_closed;
    if (a.hi < b.hi) {
        right = a.hi;
        right_closed = a.hi_closed;
    } else if (b.hi < a.hi) {
        right = b.hi;
        right_closed = b.hi_closed;
    } else {
        right = a.hi;
        right_closed = a.hi_closed && b.hi_closed;
    }
    return !Interval{left, right, left_closed, right_closed}.empty();
}

}  // namespace detail

/// A nonempty finite union of intervals, kept sorted with overlapping
/// pieces merged.
class RangeSet {
public:
    RangeSet() = default;
    explicit RangeSet(std::vector<Interval> parts) {
        for (const Interval& p : parts) {
            if (std::isnan(p.lo) || std::isnan(p.hi)) throw std::invalid_argument("RangeSet: NaN bound");
            if (!p.empty()) parts_.push_back(p);
        }
        std::sort(parts_.begin(), parts_.end(), [](const Interval& a, const Interval& b) {
            return a.lo < b.lo || (a.lo == b.lo && a.lo_closed && !b.lo_closed);
        });
        std::vector<Interval> merged;
        for (const Interval& p : parts_) {
            if (!merged.empty()) {
                Interval& last = merged.back();
                const bool touch = p.lo < last.hi || (p.lo == last.hi && (p.lo_closed || last.hi_closed));
                if (touch) {
                    if (p.hi > last.hi || (p.hi == last.hi && p.hi_closed)) {
                        last.hi_closed = p.hi == last.hi ? (last.hi_closed || p.hi_closed) : p.hi_closed;
                        last.hi = p.hi;
                    }
                    continue;
                }
            }
            merged.push_back(p);
        }
        parts_ = std::move(merged);
    }

    static RangeSet closed(double lo, double hi) { return RangeSet({Interval{lo, hi, true, true}}); }
    static RangeSet point(double v) { return closed(v, v); }

    const std::vector<Interval>& parts() const noexcept { return parts_; }
    bool empty() const noexcept { return parts_.empty(); }

    bool contains(double v) const {
        for (const Interval& p : parts_)
            if (detail::intervals_meet(p, Interval{v, v, true, true})) return true;
        return false;
    }

    bool meets(const Interval& other) const {
        for (const Interval& p : parts_)
            if (detail::intervals_meet(p, other)) return true;
        return false;
    }

private:
    std::vector<Interval> parts_;
};

/// One-hot bin of s, returned as its class index.
inline std::size_t phi_gp(const IntervalPartition& part, double s) { return part.bin_of(s); }

/// Bin i is set iff S meets bin i.
inline LabelMask phi_gr(const IntervalPartition& part, const RangeSet& set) {
    if (set.empty()) throw std::invalid_argument("phi_gr: empty range set");
    for (const Interval& p : set.parts())
        if (p.lo < part.lo() || p.hi > part.hi()) throw std::domain_error("phi_gr: range set leaves [lo, hi]");
    LabelMask mask(part.bins());
    for (std::size_t i = 0; i < part.bins(); ++i) {
        const bool last = i + 1 == part.bins();
        if (set.meets(Interval{part.edge(i), part.edge(i + 1), true, last})) mask.set(i);
    }
    return mask;
}

struct RegressionDataset {
    std::vector<Vec> features;
    std::vector<double> targets;
};

struct DiscretizedProblem {
    Dataset data;
    PredKM gp;
    RangeKM gr;
    IntervalPartition partition;
};

using RegressionPredictor = std::function<double(std::span<const double>)>;
using RegressionRange = std::function<RangeSet(std::span<const double>)>;

/// Labels become phi_gp(y), the P-KM phi_gp . gp and the R-KM phi_gr . gr.
/// gp(x) must lie in gr(x) for every sample; the discretized pair is
/// re-audited before returning.
inline DiscretizedProblem discretize_problem(const RegressionDataset& reg, const RegressionPredictor& gp,
                                             const RegressionRange& gr, const IntervalPartition& part) {
    require_same_size(reg.features.size(), reg.targets.size(), "discretize_problem");
    const std::size_t k = part.bins();
    Dataset ds;
    ds.k = k;
    ds.n = reg.features.empty() ? 0 : reg.features.front().size();
    for (std::size_t c = 0; c < k; ++c) ds.class_names.push_back(std::to_string(c));
    for (std::size_t i = 0; i < reg.targets.size(); ++i) {
        const double y = reg.targets[i];
        if (!part.contains(y))
            throw std::domain_error("discretize_problem: target at sample " + std::to_string(i) + " outside [lo, hi]");
        const double g = gp(reg.features[i]);
        if (!part.contains(g))
            throw std::domain_error("discretize_problem: P-KM output at sample " + std::to_string(i) + " outside [lo, hi]");
        if (!gr(reg.features[i]).contains(g))
            throw AssumptionViolation("discretize_problem: P-KM value outside R-KM set at sample " + std::to_string(i));
        ds.features.push_back(reg.features[i]);
        ds.labels.push_back(phi_gp(part, y));
    }
    PredKM pkm = PredKM::function(k, [gp, part](std::span<const double> x) { return phi_gp(part, gp(x)); });
    RangeKM rkm = RangeKM::function(k, [gr, part](std::span<const double> x) { return phi_gr(part, gr(x)); });
    KnowledgePair audit(pkm, rkm, 0.0);
    if (const auto bad = audit_assumption(audit, ds.features); !bad.empty())
        throw AssumptionViolation("discretize_problem: gp falls outside gr at sample " + std::to_string(bad.front()));
    return {std::move(ds), std::move(pkm), std::move(rkm), part};
}

}  // namespace fedknow
