#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "mixcert/rng.hpp"

using mixcert::Philox4x32;
using mixcert::Rng;

TEST(Philox, KnownAnswerVectors) {
    const auto zero = Philox4x32::block({0, 0, 0, 0}, {0, 0});
    EXPECT_EQ(zero, (Philox4x32::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
    const auto ones = Philox4x32::block({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
    EXPECT_EQ(ones, (Philox4x32::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
    const auto pi = Philox4x32::block({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
    EXPECT_EQ(pi, (Philox4x32::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42), c(43), d(42, 1);
    bool differs_seed = false, differs_stream = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        differs_seed |= x != c.next_u64();
        differs_stream |= x != d.next_u64();
    }
    EXPECT_TRUE(differs_seed);
    EXPECT_TRUE(differs_stream);
}

TEST(Rng, UniformMomentsAndRange) {
    Rng rng(7);
    const int n = 200000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
        s2 += u * u;
    }
    EXPECT_NEAR(s / n, 0.5, 5 * std::sqrt(1.0 / 12.0 / n));
    EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0 / 12.0, 2e-3);
}

TEST(Rng, NormalMoments) {
    Rng rng(11);
    const int n = 200000;
    double s = 0.0, s2 = 0.0, s4 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        s += z;
        s2 += z * z;
        s4 += z * z * z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 5.0 / std::sqrt(double(n)));
    EXPECT_NEAR(s2 / n, 1.0, 5.0 * std::sqrt(2.0 / n));
    EXPECT_NEAR(s4 / n, 3.0, 5.0 * std::sqrt(96.0 / n));
}

TEST(Rng, IndexIsUniform) {
    Rng rng(3);
    const int n = 70000;
    std::vector<int> counts(7, 0);
    for (int i = 0; i < n; ++i) ++counts[rng.index(7)];
    // chi-square with 6 degrees of freedom; 22.46 is the 0.999 quantile
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - n / 7.0) * (c - n / 7.0) / (n / 7.0);
    EXPECT_LT(chi2, 22.46);
}

TEST(Rng, SampleWithoutReplacementIsDistinctAndUniform) {
    Rng rng(5);
    std::vector<int> counts(10, 0);
    for (int t = 0; t < 20000; ++t) {
        const auto s = rng.sample_without_replacement(10, 3);
        ASSERT_EQ(s.size(), 3u);
        std::set<std::size_t> u(s.begin(), s.end());
        ASSERT_EQ(u.size(), 3u);
        for (auto v : s) {
            ASSERT_LT(v, 10u);
            ++counts[v];
        }
    }
    for (int c : counts) EXPECT_NEAR(c, 6000, 5 * std::sqrt(6000.0));
    const auto all = rng.sample_without_replacement(5, 5);
    EXPECT_EQ(std::set<std::size_t>(all.begin(), all.end()).size(), 5u);
}
