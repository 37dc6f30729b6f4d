#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_util.hpp"

using namespace mixcert;

TEST(OptimalityRatio, Examples) {
    EXPECT_EQ(optimality_ratio(-1.0, -1.0, -6.0), 1.0);
    EXPECT_EQ(optimality_ratio(-6.0, -1.0, -6.0), 0.0);
    EXPECT_NEAR(optimality_ratio(-2.0, -1.0, -6.0), 0.8, 1e-15);
}

TEST(OptimalityRatio, DegenerateCalibration) {
    EXPECT_THROW(optimality_ratio(-2.0, -3.0, -3.0), DegenerateCalibration);
    EXPECT_THROW(optimality_ratio(-2.0, -3.0, -2.0), DegenerateCalibration);
    EXPECT_THROW(optimality_ratio(-2.0, -3.0 + 5e-13, -3.0), DegenerateCalibration);
    EXPECT_THROW(optimality_ratio(std::nan(""), -1.0, -3.0), InvalidArgument);
}

TEST(OptimalityRatio, InvariantUnderCommonShift) {
    Rng rng(1);
    for (int t = 0; t < 1000; ++t) {
        const double rand = rng.uniform(-10, -5);
        const double ub = rng.uniform(-4, -1);
        const double lb = rng.uniform(rand, ub);
        const double shift = rng.uniform(-3, 3);
        EXPECT_NEAR(optimality_ratio(lb + shift, ub + shift, rand + shift), optimality_ratio(lb, ub, rand), 1e-12);
    }
}

TEST(OptimalityRatio, ReportedValueClampsRoundOff) {
    EXPECT_EQ(reported_ratio(-5e-10), 0.0);
    EXPECT_EQ(reported_ratio(1.0 + 5e-10), 1.0);
    EXPECT_EQ(reported_ratio(-2e-9), -2e-9);
    EXPECT_EQ(reported_ratio(1.0 + 2e-9), 1.0 + 2e-9);
    EXPECT_EQ(reported_ratio(0.5), 0.5);
}

namespace {

struct Pipeline {
    testutil::Instance inst;
    BoundResult bound;
    DiscreteSolution solution;
    double ll_rand;
};

Pipeline run_pipeline(std::uint64_t seed, std::size_t n, std::size_t m, std::size_t k) {
    auto inst = testutil::random_instance(seed, n, m);
    auto bound = convex_em(inst.mat);
    auto solution = brute_force_mle(inst.mat, k);
    const double ll_rand = random_baseline_ll(inst.mat, k, 1000, seed);
    return {std::move(inst), std::move(bound), std::move(solution), ll_rand};
}

}  // namespace

TEST(Certify, BruteForceRatioIsAtMostOne) {
    for (int t = 0; t < 10; ++t) {
        const auto p = run_pipeline(10 + t, 40, 12, 3);
        const auto c = certify(p.inst.mat, p.inst.set, p.inst.data, 3, p.bound, p.solution, p.ll_rand,
                               {{1, 2}, 77, "2020-01-01T00:00:00Z"});
        EXPECT_LE(c.ratio_raw, 1.0 + 1e-9);
        EXPECT_GT(c.ratio_raw, 0.0);
        EXPECT_EQ(c.lb, p.solution.ll);
        EXPECT_EQ(c.ub, p.bound.certified_ub);
        EXPECT_NEAR(c.ratio_raw, (c.lb - c.ll_rand) / (c.ub - c.ll_rand), 1e-15);
        EXPECT_EQ(c.n_points, 40u);
        EXPECT_EQ(c.n_models, 12u);
        EXPECT_EQ(c.config_hash, 77u);
        EXPECT_EQ(c.timestamp, "2020-01-01T00:00:00Z");
        EXPECT_EQ(c.lb_provenance, "brute-force");
        // any other K-sparse solution sits below the brute-force ratio
        EmConfig em;
        em.k = 3;
        const auto ms = projected_em_multistart(p.inst.data, p.inst.set, p.inst.mat, em, 3, 5);
        const auto c2 = certify(p.inst.mat, p.inst.set, p.inst.data, 3, p.bound, ms.best, p.ll_rand);
        EXPECT_LE(c2.ratio_raw, c.ratio_raw + 1e-12);
    }
}

TEST(Certify, RatioIsOneWhenDenseOptimumIsSparse) {
    // with K = M every support is allowed, so brute force reaches the bound
    const auto p = run_pipeline(30, 50, 4, 4);
    auto bound = p.bound;
    const auto c = certify(p.inst.mat, p.inst.set, p.inst.data, 4, bound,
                           brute_force_mle(p.inst.mat, 4), random_baseline_ll(p.inst.mat, 1, 1000, 1));
    EXPECT_NEAR(c.optimality_ratio, 1.0, 1e-7);
}

TEST(Certify, RejectsMismatchedInputs) {
    const auto p = run_pipeline(40, 30, 8, 2);
    const auto other = run_pipeline(41, 30, 8, 2);
    EXPECT_THROW(certify(p.inst.mat, p.inst.set, p.inst.data, 2, other.bound, p.solution, p.ll_rand),
                 InconsistentInputs);
    EXPECT_THROW(certify(p.inst.mat, p.inst.set, p.inst.data, 2, p.bound, other.solution, p.ll_rand),
                 InconsistentInputs);
    EXPECT_THROW(certify(p.inst.mat, other.inst.set, p.inst.data, 2, p.bound, p.solution, p.ll_rand),
                 InconsistentInputs);
    EXPECT_THROW(certify(p.inst.mat, p.inst.set, other.inst.data, 2, p.bound, p.solution, p.ll_rand),
                 InconsistentInputs);
    EXPECT_THROW(certify(p.inst.mat, p.inst.set, p.inst.data, 1, p.bound, p.solution, p.ll_rand), InvalidArgument);
    // a chunked bound carries dataset and set hashes instead of a matrix hash
    const auto chunked = convex_em_chunked(p.inst.data, p.inst.set, {}, {});
    EXPECT_NO_THROW(certify(p.inst.mat, p.inst.set, p.inst.data, 2, chunked, p.solution, p.ll_rand));
    EXPECT_THROW(certify(p.inst.mat, p.inst.set, p.inst.data, 2, p.bound, p.solution, p.bound.certified_ub + 1.0),
                 DegenerateCalibration);
}

TEST(Certify, SandwichViolationIsNumericalFailure) {
    const auto p = run_pipeline(50, 30, 8, 3);
    auto bad = p.bound;
    bad.certified_ub = p.solution.ll - 1e-6;
    EXPECT_THROW(certify(p.inst.mat, p.inst.set, p.inst.data, 3, bad, p.solution, p.ll_rand), NumericalFailure);
}

TEST(EeDiagnostic, IdenticalSamplesGiveZeroDeviation) {
    Rng rng(3);
    const auto set = testutil::random_set(rng, 5);
    const MixtureModel gen({0.4, 0.6}, {set[1], set[3]});
    const auto w = WeightVector::sparse(5, {1, 3}, std::vector<double>{0.4, 0.6});
    const auto ee = ee_diagnostic(gen, {w, WeightVector::uniform(5)}, set, 500, 500, 9, 9);
    for (const auto& c : ee.candidates) EXPECT_EQ(c.deviation, 0.0);
    EXPECT_EQ(ee.lower_estimate, 0.0);
}

TEST(EeDiagnostic, GaussianCrossEntropyMatchesEntropy) {
    Matrix cov(2, 2);
    cov << 2.0, 0.3, 0.3, 0.5;
    const GaussianComponent g(Vector{{1.0, -1.0}}, cov);
    const ComponentSet set({g});
    const MixtureModel gen({1.0}, {g});
    const auto ee = ee_diagnostic(gen, {WeightVector::uniform(1)}, set, 100, 200000, 1, 2);
    const double entropy = 0.5 * std::log(std::pow(2 * std::numbers::pi * std::numbers::e, 2) * cov.determinant());
    EXPECT_NEAR(ee.candidates[0].cross_entropy, -entropy, 3.0 * ee.candidates[0].cross_entropy_se);
}

TEST(EeDiagnostic, DeviationDecaysLikeInverseRootN) {
    Rng rng(4);
    const auto set = testutil::random_set(rng, 6);
    const MixtureModel gen({0.3, 0.3, 0.4}, {set[0], set[2], set[5]});
    const auto w = WeightVector::sparse(6, {0, 2, 5}, std::vector<double>{0.3, 0.3, 0.4});
    const std::vector<std::size_t> grid{100, 400, 1600, 6400};
    std::vector<double> xs, ys;
    for (auto n : grid) {
        double total = 0.0;
        for (std::uint64_t s = 0; s < 30; ++s) total += ee_diagnostic(gen, {w}, set, n, 400000, 100 + s, 7).lower_estimate;
        xs.push_back(std::log(double(n)));
        ys.push_back(std::log(total / 30.0));
    }
    const double mx = mean(xs), my = mean(ys);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    const double slope = sxy / sxx;
    EXPECT_GE(slope, -0.7);
    EXPECT_LE(slope, -0.3);
}

TEST(TightnessCurve, SingleModelCollapses) {
    const GaussianComponent g(Vector{{0.0, 0.0}}, Matrix::Identity(2, 2));
    const ComponentSet set({g});
    TightnessOptions opts;
    opts.restarts = 1;
    opts.true_pi = WeightVector::uniform(1);
    const auto rows = tightness_curve(MixtureModel({1.0}, {g}), set, 1, {20000}, {1, 2}, opts);
    ASSERT_EQ(rows.size(), 2u);
    for (const auto& r : rows) {
        EXPECT_NEAR(r.ub, r.ll_true, 1e-12);
        EXPECT_NEAR(r.lb, r.ll_true, 1e-12);
        // the baseline coincides with the bound, so no ratio is defined
        EXPECT_TRUE(r.error.has_value());
    }
}

TEST(TightnessCurve, RowsAreOrderedAndDeterministic) {
    Rng rng(6);
    const auto set = testutil::random_set(rng, 15);
    const MixtureModel gen({0.5, 0.5}, {set[3], set[8]});
    TightnessOptions opts;
    opts.restarts = 2;
    opts.baseline_samples = 100;
    opts.true_pi = WeightVector::sparse(15, {3, 8}, std::vector<double>{0.5, 0.5});
    const auto a = tightness_curve(gen, set, 2, {30, 60}, {1, 2, 3}, opts);
    const auto b = tightness_curve(gen, set, 2, {30, 60}, {1, 2, 3}, opts);
    ASSERT_EQ(a.size(), 6u);
    EXPECT_EQ(a[0].n, 30u);
    EXPECT_EQ(a[3].n, 60u);
    EXPECT_EQ(a[4].seed, 2u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_FALSE(a[i].error.has_value());
        EXPECT_EQ(a[i].ub, b[i].ub);
        EXPECT_EQ(a[i].lb, b[i].lb);
        EXPECT_LE(a[i].lb, a[i].ub + kSandwichSlack);
        EXPECT_LE(a[i].ll_true, a[i].ub + kSandwichSlack);
        EXPECT_LE(a[i].opt_ratio_true, 1.0 + kRatioClamp);
    }
}
