#include <gtest/gtest.h>

#include <cmath>

#include "fedknow/linalg.hpp"

using namespace fedknow;

TEST(Matvec, IdentityAndZero) {
    EXPECT_EQ(matvec(Mat::identity(2), Vec{3, 4}), (Vec{3, 4}));
    EXPECT_EQ(matvec(Mat(3, 2), Vec{5, -7}), (Vec{0, 0, 0}));
}

TEST(Matvec, HandComputed) {
    const Mat a(2, 2, {1, 2, 3, 4});
    EXPECT_EQ(matvec(a, Vec{1, 1}), (Vec{3, 7}));
}

TEST(Matvec, DimensionMismatchThrows) {
    EXPECT_THROW(matvec(Mat(2, 3), Vec{1, 1}), DimensionError);
    EXPECT_THROW(Mat(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Softmax, Examples) {
    const Vec u = softmax(Vec{0, 0, 0});
    for (double v : u) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);

    EXPECT_EQ(softmax(Vec{5, kMaskedLogit}), (Vec{1, 0}));

    // e^1 / (e^1 + e^3) and e^3 / (e^1 + e^3)
    const Vec s = softmax(Vec{1, kMaskedLogit, 3});
    EXPECT_NEAR(s[0], 0.11920292202211755, 1e-12);
    EXPECT_EQ(s[1], 0.0);
    EXPECT_NEAR(s[2], 0.8807970779778824, 1e-12);
}

TEST(Softmax, AllMaskedIsAnError) {
    EXPECT_THROW(softmax(Vec{kMaskedLogit, kMaskedLogit}), std::domain_error);
    EXPECT_THROW(softmax(Vec{1.0, std::nan("")}), std::domain_error);
}

TEST(Softmax, LargeLogitsStayFinite) {
    const Vec s = softmax(Vec{1000.0, 999.0, -1000.0});
    EXPECT_TRUE(std::isfinite(s[0]));
    EXPECT_NEAR(s[0] + s[1] + s[2], 1.0, 1e-15);
}

TEST(SoftmaxProperty, SimplexAndShiftInvariance) {
    Rng rng(11);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t k = 1 + rng.below(12);
        Vec z(k);
        bool any = false;
        for (double& v : z) {
            if (rng.uniform() < 0.3) {
                v = kMaskedLogit;
            } else {
                v = rng.uniform(-30, 30);
                any = true;
            }
        }
        if (!any) z[rng.below(k)] = rng.uniform(-5, 5);
        const Vec s = softmax(z);
        double total = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            EXPECT_GE(s[i], 0.0);
            EXPECT_LE(s[i], 1.0);
            if (is_masked(z[i])) {
                EXPECT_EQ(s[i], 0.0);
            }
            total += s[i];
        }
        EXPECT_NEAR(total, 1.0, 1e-12);

        const double c = rng.uniform(-50, 50);
        Vec shifted = z;
        for (double& v : shifted)
            if (!is_masked(v)) v += c;
        const Vec t = softmax(shifted);
        for (std::size_t i = 0; i < k; ++i) EXPECT_NEAR(s[i], t[i], 1e-12);
    }
}

TEST(CrossEntropy, ClosedForms) {
    EXPECT_LE(cross_entropy(Vec{0, 1, 0}, Vec{0, 1, 0}), 1e-12);
    EXPECT_NEAR(cross_entropy(Vec{0.25, 0.25, 0.25, 0.25}, Vec{0, 0, 1, 0}), std::log(4.0), 1e-15);
    EXPECT_NEAR(cross_entropy(Vec{0.9, 0.1}, Vec{1, 0}), 0.10536051565782628, 1e-12);
    EXPECT_NEAR(cross_entropy(Vec{0.9, 0.1}, std::size_t{0}), 0.10536051565782628, 1e-12);
}

TEST(CrossEntropy, ClampAndErrors) {
    // p_i = 0 on the target is clamped, not infinite.
    EXPECT_NEAR(cross_entropy(Vec{1, 0}, Vec{0, 1}), -std::log(kProbFloor), 1e-9);
    EXPECT_THROW(cross_entropy(Vec{1, 0}, Vec{1, 0, 0}), DimensionError);
}

TEST(CrossEntropyProperty, NonNegative) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t k = 2 + rng.below(8);
        Vec z(k);
        for (double& v : z) v = rng.uniform(-4, 4);
        const Vec p = softmax(z);
        Vec q(k, 0.0);
        q[rng.below(k)] = 1.0;
        EXPECT_GE(cross_entropy(p, q), 0.0);
    }
}

TEST(Argmax, TiesGoToLowestIndex) {
    EXPECT_EQ(argmax(Vec{0.5, 0.5}), 0u);
    EXPECT_EQ(argmax(Vec{0.1, 0.4, 0.4, 0.1}), 1u);
}

TEST(Rng, ReferenceStream) {
    // SplitMix64 with seed 0; first outputs of the reference generator.
    Rng rng(0);
    EXPECT_EQ(rng.next_u64(), 0xE220A8397B1DCDAFULL);
    EXPECT_EQ(rng.next_u64(), 0x6E789E6AA1B965F4ULL);
    EXPECT_EQ(rng.next_u64(), 0x06C45D188009454FULL);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
    Rng c(42), d(42);
    for (int i = 0; i < 100; ++i) ASSERT_EQ(c.normal(), d.normal());
}

TEST(Rng, DeriveIsIndependentOfConsumption) {
    Rng a(9);
    const Rng before = a.derive({1, 2});
    a.next_u64();
    Rng after = a.derive({1, 2});
    Rng b = before;
    EXPECT_EQ(b.next_u64(), after.next_u64());
    EXPECT_NE(a.derive({1, 2}).seed(), a.derive({2, 1}).seed());
}

TEST(Rng, BelowAndShuffle) {
    Rng rng(3);
    std::vector<int> counts(5, 0);
    for (int i = 0; i < 50000; ++i) ++counts[rng.below(5)];
    for (int c : counts) EXPECT_NEAR(c, 10000, 5 * std::sqrt(10000 * 0.8));

    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
    rng.shuffle(v);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(Rng, NormalMoments) {
    Rng rng(17);
    const int n = 100000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = rng.normal();
        sum += v;
        sq += v * v;
    }
    EXPECT_NEAR(sum / n, 0.0, 4.0 / std::sqrt(n));
    EXPECT_NEAR(sq / n, 1.0, 0.02);
}
