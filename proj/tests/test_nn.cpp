#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fedknow/nn.hpp"

using namespace fedknow;

namespace {

// Central-difference Jacobian of forward() with respect to theta.
Mat fd_jacobian(const ModelParams& params, const Vec& x, double h) {
    ModelParams probe = params;
    const std::size_t k = params.spec.outputs();
    Mat jac(k, params.size());
    for (std::size_t j = 0; j < params.size(); ++j) {
        const double saved = probe.theta[j];
        probe.theta[j] = saved + h;
        const Vec up = forward(probe, x);
        probe.theta[j] = saved - h;
        const Vec down = forward(probe, x);
        probe.theta[j] = saved;
        for (std::size_t i = 0; i < k; ++i) jac(i, j) = (up[i] - down[i]) / (2 * h);
    }
    return jac;
}

double frob_rel(const Mat& a, const Mat& b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        num += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
        den += b.data()[i] * b.data()[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-8);
}

ModelParams random_params(Rng& rng, std::size_t max_d) {
    for (;;) {
        MlpSpec spec;
        spec.layer_sizes.push_back(1 + rng.below(6));
        const std::size_t hidden = rng.below(3);
        for (std::size_t h = 0; h < hidden; ++h) spec.layer_sizes.push_back(1 + rng.below(8));
        spec.layer_sizes.push_back(2 + rng.below(5));
        if (spec.param_count() > max_d) continue;
        Vec theta(spec.param_count());
        for (double& v : theta) v = rng.normal();
        return ModelParams(spec, theta);
    }
}

}  // namespace

TEST(MlpSpec, ParamCountAndValidation) {
    EXPECT_EQ((MlpSpec{{2, 4, 3}}).param_count(), 2u * 4 + 4 + 4 * 3 + 3);
    EXPECT_THROW((MlpSpec{{3}}).validate(), std::invalid_argument);
    EXPECT_THROW((MlpSpec{{3, 0, 2}}).validate(), std::invalid_argument);
    EXPECT_THROW(ModelParams(MlpSpec{{2, 2}}, Vec(5)), DimensionError);
}

TEST(Forward, ZeroParametersGiveZeroLogits) {
    const ModelParams p(MlpSpec{{3, 5, 4}}, Vec(MlpSpec{{3, 5, 4}}.param_count(), 0.0));
    EXPECT_EQ(forward(p, Vec{1, -2, 3}), (Vec{0, 0, 0, 0}));
}

TEST(Forward, SingleLinearLayerIdentity) {
    // W = I, b = 0
    const ModelParams p(MlpSpec{{2, 2}}, Vec{1, 0, 0, 1, 0, 0});
    EXPECT_EQ(forward(p, Vec{1, 2}), (Vec{1, 2}));
}

TEST(Forward, DimensionMismatchThrows) {
    const ModelParams p(MlpSpec{{2, 2}}, Vec(6, 0.0));
    EXPECT_THROW(forward(p, Vec{1, 2, 3}), DimensionError);
}

TEST(Forward, GoldenSeededNetwork) {
    // tests/oracles/forward_golden.py recomputes these values independently.
    std::ifstream in(std::string(FEDKNOW_TEST_DATA_DIR) + "/forward_2_4_3_seed0.txt");
    ASSERT_TRUE(in);
    Vec expected(3);
    for (double& v : expected) in >> v;
    Rng rng(0);
    const ModelParams p = init_params(MlpSpec{{2, 4, 3}}, rng);
    const Vec got = forward(p, Vec{1, -1});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(got[i], expected[i], 1e-14);
}

TEST(Forward, PureFunction) {
    Rng rng(4);
    const ModelParams p = random_params(rng, 200);
    Vec x(p.spec.inputs());
    for (double& v : x) v = rng.normal();
    const Vec a = forward(p, x);
    const Vec b = forward(p, x);
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
}

TEST(Jacobian, LinearLayerHandDerivation) {
    // f_i = sum_c W_ic x_c + b_i, theta = [W00 W01 W10 W11 b0 b1]
    const ModelParams p(MlpSpec{{2, 2}}, Vec{0.3, -1.2, 2.0, 0.5, 0.1, -0.4});
    const Mat j = jacobian(p, Vec{1.5, -2.0});
    const Mat expected(2, 6, {1.5, -2.0, 0, 0, 1, 0, 0, 0, 1.5, -2.0, 0, 1});
    EXPECT_EQ(j, expected);
}

TEST(Jacobian, ZeroInputLinearLayer) {
    const ModelParams p(MlpSpec{{3, 2}}, Vec{1, 2, 3, 4, 5, 6, 7, 8});
    const Mat j = jacobian(p, Vec{0, 0, 0});
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(j(i, c), 0.0);
        EXPECT_EQ(j(i, 6), i == 0 ? 1.0 : 0.0);
        EXPECT_EQ(j(i, 7), i == 1 ? 1.0 : 0.0);
    }
}

TEST(JacobianProperty, MatchesFiniteDifferences) {
    Rng rng(2024);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const ModelParams p = random_params(rng, 200);
        Vec x(p.spec.inputs());
        for (double& v : x) v = rng.uniform(-2, 2);
        const double err = frob_rel(jacobian(p, x), fd_jacobian(p, x, 1e-6));
        worst = std::max(worst, err);
        EXPECT_LE(err, 1e-5) << "trial " << trial;
    }
    RecordProperty("worst_rel_error", std::to_string(worst));
}

TEST(Vjp, ZeroAndUnitWeights) {
    Rng rng(8);
    const ModelParams p = random_params(rng, 150);
    Vec x(p.spec.inputs());
    for (double& v : x) v = rng.normal();
    const Mat j = jacobian(p, x);
    const Vec zero = vjp(p, x, Vec(p.spec.outputs(), 0.0));
    for (double v : zero) EXPECT_EQ(v, 0.0);
    for (std::size_t i = 0; i < p.spec.outputs(); ++i) {
        Vec e(p.spec.outputs(), 0.0);
        e[i] = 1.0;
        const Vec row = vjp(p, x, e);
        for (std::size_t c = 0; c < p.size(); ++c) EXPECT_EQ(row[c], j(i, c));
    }
}

TEST(VjpProperty, EqualsWeightedJacobianRows) {
    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        const ModelParams p = random_params(rng, 200);
        Vec x(p.spec.inputs()), w(p.spec.outputs());
        for (double& v : x) v = rng.normal();
        for (double& v : w) v = rng.normal();
        const Mat j = jacobian(p, x);
        const Vec g = vjp(p, x, w);
        for (std::size_t c = 0; c < p.size(); ++c) {
            double expect = 0.0;
            for (std::size_t i = 0; i < w.size(); ++i) expect += w[i] * j(i, c);
            EXPECT_NEAR(g[c], expect, 1e-10);
        }
    }
}

TEST(InitParams, DeterministicWithZeroBiases) {
    const MlpSpec spec{{5, 7, 3}};
    Rng a(123), b(123);
    const ModelParams pa = init_params(spec, a);
    const ModelParams pb = init_params(spec, b);
    EXPECT_EQ(pa.theta, pb.theta);
    // biases: after the 5x7 block and after the 7x3 block
    for (std::size_t i = 35; i < 42; ++i) EXPECT_EQ(pa.theta[i], 0.0);
    for (std::size_t i = 42 + 21; i < 42 + 24; ++i) EXPECT_EQ(pa.theta[i], 0.0);
    const double limit = std::sqrt(6.0 / 12.0);
    for (std::size_t i = 0; i < 35; ++i) EXPECT_LE(std::fabs(pa.theta[i]), limit);
}

TEST(InitParams, WeightMeanWithinThreeSigma) {
    // 100 x 100 weights: the sample mean of 10^4 uniform(-L, L) draws has
    // standard deviation (L / sqrt 3) / 100.
    const MlpSpec spec{{100, 100}};
    Rng rng(77);
    const ModelParams p = init_params(spec, rng);
    double sum = 0.0;
    for (std::size_t i = 0; i < 10000; ++i) sum += p.theta[i];
    const double limit = std::sqrt(6.0 / 200.0);
    EXPECT_LE(std::fabs(sum / 10000.0), 3.0 * (limit / std::sqrt(3.0)) / 100.0);
}

TEST(Checkpoint, BitExactRoundTrip) {
    Rng rng(31);
    ModelParams p = random_params(rng, 200);
    p.theta[0] = -0.0;
    p.theta[1] = 5e-324;
    std::stringstream ss;
    save_params(ss, p);
    const std::string bytes = ss.str();
    EXPECT_EQ(bytes.rfind("FEDKNOW-PARAMS v1\n", 0), 0u);
    const ModelParams q = load_params(ss);
    EXPECT_EQ(q.spec, p.spec);
    ASSERT_EQ(q.size(), p.size());
    EXPECT_EQ(std::memcmp(q.theta.data(), p.theta.data(), p.size() * sizeof(double)), 0);
}

TEST(Checkpoint, LittleEndianLayout) {
    const ModelParams p(MlpSpec{{1, 1}}, Vec{1.0, -2.0});
    std::stringstream ss;
    save_params(ss, p);
    const std::string bytes = ss.str();
    const std::string header = "FEDKNOW-PARAMS v1\n2 1 1\n";
    ASSERT_EQ(bytes.size(), header.size() + 16);
    EXPECT_EQ(bytes.substr(0, header.size()), header);
    // 1.0 = 0x3FF0000000000000, least significant byte first
    const unsigned char one[8] = {0, 0, 0, 0, 0, 0, 0xF0, 0x3F};
    EXPECT_EQ(std::memcmp(bytes.data() + header.size(), one, 8), 0);
}

TEST(Checkpoint, RejectsCorruptInput) {
    std::stringstream bad_header("FEDKNOW-PARAMS v2\n2 1 1\n");
    EXPECT_THROW(load_params(bad_header), std::runtime_error);
    std::stringstream truncated("FEDKNOW-PARAMS v1\n2 1 1\nabc");
    EXPECT_THROW(load_params(truncated), std::runtime_error);
}
