#pragma once

// Randomized invariant suite for the personalized model. For each random
// (theta, x, lambda, gp, gr) it checks
//   (a) the output lies on the probability simplex,
//   (b) <f^m, gp> >= lambda, and argmax f^m = supp gp when lambda > 0.5,
//   (c) classes outside gr(x) receive exactly zero probability,
//   (d) the analytic Jacobian agrees with central finite differences.

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "fedknow/knowledge.hpp"
#include "fedknow/nn.hpp"

namespace fedknow {

struct CheckOptions {
    std::size_t instances = 200;
    std::uint64_t seed = 0xF3D;
    std::size_t max_classes = 10;
    std::size_t max_params = 500;
    double simplex_tol = 1e-12;
    double trust_tol = 1e-12;
    double jacobian_rel_tol = 1e-5;
    double fd_step = 1e-6;
};

struct CheckReport {
    std::size_t instances = 0;
    std::size_t simplex_failures = 0;
    std::size_t trust_failures = 0;
    std::size_t argmax_checks = 0;
    std::size_t argmax_failures = 0;
    std::size_t range_failures = 0;
    std::size_t jacobian_failures = 0;
    double worst_simplex_error = 0.0;
    double worst_jacobian_error = 0.0;
    std::size_t largest_d = 0;
    double seconds = 0.0;

    bool ok() const noexcept {
        return simplex_failures == 0 && trust_failures == 0 && argmax_failures == 0 && range_failures == 0 &&
               jacobian_failures == 0;
    }
};

/// ||A - B||_F / max(||B||_F, 1e-8)
inline double relative_error(const Mat& a, const Mat& b) {
    require_same_size(a.data().size(), b.data().size(), "relative_error");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        num += d * d;
        den += b.data()[i] * b.data()[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-8);
}

/// Central differences of predict with respect to theta, one column per
/// parameter.
inline Mat finite_difference_jacobian(const PersonalizedModel& pm, std::span<const double> x, double step) {
    ModelParams probe = pm.server();
    const std::size_t k = probe.spec.outputs();
    Mat jac(k, probe.size());
    for (std::size_t j = 0; j < probe.size(); ++j) {
        const double saved = probe.theta[j];
        probe.theta[j] = saved + step;
        const Vec up = PersonalizedModel(probe, pm.knowledge()).predict(x);
        probe.theta[j] = saved - step;
        const Vec down = PersonalizedModel(probe, pm.knowledge()).predict(x);
        probe.theta[j] = saved;
        for (std::size_t i = 0; i < k; ++i) jac(i, j) = (up[i] - down[i]) / (2.0 * step);
    }
    return jac;
}

struct CheckInstance {
    ModelParams params;
    Vec x;
    KnowledgePair km;
};

/// A random small network, input and knowledge pair. gr is a threshold rule
/// whose two masks both contain the P-KM's class.
inline CheckInstance random_check_instance(Rng& rng, std::size_t max_classes, std::size_t max_params) {
    static constexpr double kLambdas[] = {0.0, 0.3, 0.6, 0.7, 1.0};
    for (;;) {
        const std::size_t k = 2 + static_cast<std::size_t>(rng.below(max_classes - 1));
        MlpSpec spec;
        spec.layer_sizes.push_back(1 + static_cast<std::size_t>(rng.below(8)));
        const std::size_t hidden = static_cast<std::size_t>(rng.below(3));
        for (std::size_t h = 0; h < hidden; ++h) spec.layer_sizes.push_back(1 + static_cast<std::size_t>(rng.below(10)));
        spec.layer_sizes.push_back(k);
        if (spec.param_count() > max_params) continue;

        Vec theta(spec.param_count());
        for (double& v : theta) v = rng.normal();
        Vec x(spec.inputs());
        for (double& v : x) v = rng.uniform(-2.0, 2.0);

        const std::size_t c = static_cast<std::size_t>(rng.below(k));
        auto random_mask = [&] {
            LabelMask m(k);
            m.set(c);
            for (std::size_t i = 0; i < k; ++i)
                if (rng.uniform() < 0.5) m.set(i);
            return m;
        };
        ThresholdRule rule{static_cast<std::size_t>(rng.below(x.size())), rng.uniform(-1.0, 1.0), random_mask(),
                           random_mask()};
        const double lambda = rng.below(6) == 5 ? rng.uniform() : kLambdas[rng.below(5)];
        KnowledgePair km(PredKM::constant(k, c), RangeKM(k, IdentityMap{}, std::move(rule)), lambda);
        return {ModelParams(std::move(spec), std::move(theta)), std::move(x), std::move(km)};
    }
}

inline CheckReport run_invariant_check(const CheckOptions& opts = {}) {
    const auto started = std::chrono::steady_clock::now();
    CheckReport report;
    Rng rng(opts.seed);
    for (std::size_t n = 0; n < opts.instances; ++n) {
        const CheckInstance inst = random_check_instance(rng, opts.max_classes, opts.max_params);
        const PersonalizedModel pm(inst.params, inst.km);
        const Vec p = pm.predict(inst.x);
        const std::size_t gp = inst.km.gp.predict(inst.x);
        const LabelMask range = inst.km.gr(inst.x);
        ++report.instances;
        report.largest_d = std::max(report.largest_d, inst.params.size());

        double total = 0.0;
        bool nonneg = true;
        for (double v : p) {
            total += v;
            nonneg = nonneg && v >= 0.0;
        }
        const double simplex_err = std::fabs(total - 1.0);
        report.worst_simplex_error = std::max(report.worst_simplex_error, simplex_err);
        if (!nonneg || simplex_err > opts.simplex_tol) ++report.simplex_failures;

        if (p[gp] < inst.km.lambda - opts.trust_tol) ++report.trust_failures;
        if (inst.km.lambda > 0.5) {
            ++report.argmax_checks;
            if (argmax(p) != gp) ++report.argmax_failures;
        }

        for (std::size_t i = 0; i < p.size(); ++i)
            if (!range.contains(i) && p[i] != 0.0) {
                ++report.range_failures;
                break;
            }

        const double err = relative_error(pm.jacobian(inst.x), finite_difference_jacobian(pm, inst.x, opts.fd_step));
        report.worst_jacobian_error = std::max(report.worst_jacobian_error, err);
        if (err > opts.jacobian_rel_tol) ++report.jacobian_failures;
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

}  // namespace fedknow
