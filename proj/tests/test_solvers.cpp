#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace mixcert;

namespace {

Dataset two_clusters(std::uint64_t seed, std::size_t n) {
    const MixtureModel truth({0.5, 0.5}, {GaussianComponent(Vector{{-4.0, 0.0}}, Matrix::Identity(2, 2)),
                                          GaussianComponent(Vector{{4.0, 0.0}}, Matrix::Identity(2, 2))});
    return sample_mixture(truth, n, seed);
}

}  // namespace

TEST(ContinuousEm, SingleComponentIsClosedForm) {
    const auto data = two_clusters(1, 300);
    EmConfig cfg;
    cfg.k = 1;
    const auto res = continuous_em(data, cfg, 0);
    const auto [mean, cov] = sample_moments(data.points);
    const double ridge = 1e-6 * cov.trace() / 2.0;
    EXPECT_TRUE(res.model.components[0].mean().isApprox(mean, 1e-12));
    EXPECT_TRUE(res.model.components[0].covariance().isApprox(cov + ridge * Matrix::Identity(2, 2), 1e-10));
    EXPECT_TRUE(res.converged);
}

TEST(ContinuousEm, RecoversWellSeparatedClusters) {
    EmConfig cfg;
    cfg.k = 2;
    int good = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(5000 + seed);
        RowMatrix p(100, 2);
        for (Eigen::Index i = 0; i < 100; ++i) {
            p(i, 0) = (i < 50 ? -10.0 : 10.0) + rng.normal();
            p(i, 1) = rng.normal();
        }
        const Vector lo = p.topRows(50).colwise().mean().transpose();
        const Vector hi = p.bottomRows(50).colwise().mean().transpose();
        const auto res = continuous_em(Dataset(p), cfg, seed);
        auto a = res.model.components[0].mean(), b = res.model.components[1].mean();
        if (a[0] > b[0]) std::swap(a, b);
        if ((a - lo).norm() < 0.1 && (b - hi).norm() < 0.1) ++good;
    }
    EXPECT_GE(good, 95);
}

TEST(ContinuousEm, SeedPointsAreDistinct) {
    RowMatrix p = RowMatrix::Zero(6, 2);
    p(5, 0) = 1.0;
    Rng rng(1);
    for (int t = 0; t < 20; ++t) {
        auto picks = detail::seed_points(p, 4, rng);
        std::sort(picks.begin(), picks.end());
        EXPECT_EQ(std::adjacent_find(picks.begin(), picks.end()), picks.end());
    }
}

TEST(ContinuousEm, TraceIsMonotoneOutsideReseeds) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto inst = testutil::random_instance(seed, 150, 10);
        EmConfig cfg;
        cfg.k = 3;
        const auto res = continuous_em(inst.data, cfg, seed);
        for (std::size_t t = 1; t < res.trace.size(); ++t) {
            if (!res.trace[t].after_reseed) EXPECT_GE(res.trace[t].ll, res.trace[t - 1].ll - 1e-12);
        }
        EXPECT_NEAR(res.ll, res.trace.back().ll, 0.0);
    }
}

TEST(ContinuousEm, DeterministicAndValidated) {
    const auto data = two_clusters(3, 100);
    EmConfig cfg;
    cfg.k = 2;
    const auto a = continuous_em(data, cfg, 7);
    const auto b = continuous_em(data, cfg, 7);
    EXPECT_EQ(a.ll, b.ll);
    EXPECT_TRUE(a.model.components[0] == b.model.components[0]);
    cfg.k = 0;
    EXPECT_THROW(continuous_em(data, cfg, 0), InvalidArgument);
    cfg.k = 100;
    EXPECT_THROW(continuous_em(data, cfg, 0), InvalidArgument);
}

TEST(Projection, MembersAreFixedPoints) {
    Rng rng(1);
    const auto set = testutil::random_set(rng, 20);
    const SetProjector proj(set);
    const SetProjector eucl(set, ProjectionMetric::euclidean_parameters);
    for (std::size_t m = 0; m < set.size(); ++m) {
        EXPECT_EQ(proj.nearest(set[m]), m);
        EXPECT_EQ(eucl.nearest(set[m]), m);
    }
}

TEST(Projection, MatchesBruteForceNearestNeighbour) {
    Rng rng(2);
    const auto set = testutil::random_set(rng, 30);
    const SetProjector proj(set);
    for (int t = 0; t < 100; ++t) {
        const auto q = testutil::random_component(rng);
        // symmetrized KL from its closed form in terms of both precisions
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t m = 0; m < set.size(); ++m) {
            const auto& p = set[m];
            const Matrix pi = p.covariance().inverse(), qi = q.covariance().inverse();
            const Vector dm = p.mean() - q.mean();
            const double kl_pq = 0.5 * ((qi * p.covariance()).trace() + dm.dot(qi * dm) - 2.0 +
                                        std::log(q.covariance().determinant() / p.covariance().determinant()));
            const double kl_qp = 0.5 * ((pi * q.covariance()).trace() + dm.dot(pi * dm) - 2.0 +
                                        std::log(p.covariance().determinant() / q.covariance().determinant()));
            const double d = 0.5 * (kl_pq + kl_qp);
            if (d < best_d - 1e-12) {
                best_d = d;
                best = m;
            }
        }
        EXPECT_EQ(proj.nearest(q), best);
    }
}

TEST(Projection, MergesCollidingComponents) {
    Rng rng(3);
    const auto inst = testutil::random_instance(3, 50, 6);
    const MixtureModel mix({0.2, 0.3, 0.5}, {inst.set[2], inst.set[2], inst.set[4]});
    const auto sol = project_to_set(mix, inst.set, inst.mat);
    EXPECT_EQ(sol.support(), (std::vector<std::size_t>{2, 4}));
    EXPECT_NEAR(sol.weights[2], 0.5, 1e-15);
    EXPECT_NEAR(sol.weights[4], 0.5, 1e-15);
    EXPECT_EQ(sol.ll, mixture_ll(inst.mat, sol.weights));
    EXPECT_EQ(sol.matrix_hash, inst.mat.content_hash());
}

TEST(Refit, SingletonSupport) {
    const auto inst = testutil::random_instance(4, 50, 6);
    const std::vector<std::size_t> s{3};
    const auto w = refit_weights(inst.mat, s);
    EXPECT_EQ(w[3], 1.0);
}

TEST(Refit, FullSupportMatchesConvexEm) {
    const auto inst = testutil::random_instance(5, 120, 8);
    std::vector<std::size_t> all(8);
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto w = refit_weights(inst.mat, all);
    EXPECT_NEAR(mixture_ll(inst.mat, w), convex_em(inst.mat).ub_ll, 1e-9);
}

TEST(Refit, MatchesGridOracle) {
    for (int t = 0; t < 10; ++t) {
        const auto inst = testutil::random_instance(600 + t, 80, 10);
        Rng rng(600 + t);
        auto s = rng.sample_without_replacement(10, t % 2 ? 2 : 3);
        std::sort(s.begin(), s.end());
        const auto w = refit_weights(inst.mat, s);
        const double oracle = double(testutil::simplex_grid_oracle(inst.mat, s, s.size() == 2 ? 20000 : 600));
        EXPECT_GE(mixture_ll(inst.mat, w), oracle - 1e-12);
        EXPECT_NEAR(mixture_ll(inst.mat, w), oracle, 1e-5);
    }
}

TEST(Refit, NeverWorseThanStart) {
    const auto inst = testutil::random_instance(7, 100, 12);
    Rng rng(7);
    for (int t = 0; t < 20; ++t) {
        auto s = rng.sample_without_replacement(12, 3);
        std::sort(s.begin(), s.end());
        const auto start = WeightVector::sparse(12, s, testutil::random_simplex(rng, 3));
        const auto w = refit_weights(inst.mat, s, start.values());
        EXPECT_GE(mixture_ll(inst.mat, w), mixture_ll(inst.mat, start) - 1e-12);
    }
    const std::vector<std::size_t> dup{1, 1};
    EXPECT_THROW(refit_weights(inst.mat, dup), InvalidArgument);
}

TEST(Multistart, SingleRestartIsEmThenProjectThenRefit) {
    const auto inst = testutil::random_instance(8, 150, 15);
    EmConfig em;
    em.k = 3;
    const auto res = projected_em_multistart(inst.data, inst.set, inst.mat, em, 1, 42);
    const auto cont = continuous_em(inst.data, em, 42);
    const auto proj = project_to_set(cont.model, inst.set, inst.mat);
    const auto w = refit_weights(inst.mat, proj.support(), proj.weights.values());
    EXPECT_EQ(res.trace[0].continuous_ll, cont.ll);
    EXPECT_EQ(res.trace[0].projected_ll, proj.ll);
    EXPECT_NEAR(res.best.ll, std::max(mixture_ll(inst.mat, w), proj.ll), 0.0);
    EXPECT_EQ(res.best.provenance, "projected-em:restart=0");
    EXPECT_LE(res.best.support().size(), 3u);
}

TEST(Multistart, PrefixPropertyAndBestSoFar) {
    const auto inst = testutil::random_instance(9, 150, 15);
    EmConfig em;
    em.k = 3;
    const auto few = projected_em_multistart(inst.data, inst.set, inst.mat, em, 4, 5);
    const auto many = projected_em_multistart(inst.data, inst.set, inst.mat, em, 12, 5);
    for (std::size_t r = 0; r < 4; ++r) {
        EXPECT_EQ(few.trace[r].projected_ll, many.trace[r].projected_ll);
        EXPECT_EQ(few.best_so_far[r], many.best_so_far[r]);
    }
    EXPECT_GE(many.best.ll, few.best.ll);
    for (std::size_t r = 1; r < many.best_so_far.size(); ++r) EXPECT_GE(many.best_so_far[r], many.best_so_far[r - 1]);
    EXPECT_EQ(many.best.ll, many.best_so_far.back());
    MultistartOptions off;
    off.refit = false;
    const auto plain = projected_em_multistart(inst.data, inst.set, inst.mat, em, 4, 5, off);
    EXPECT_FALSE(plain.trace[0].refit_ll.has_value());
    EXPECT_LE(plain.best.ll, few.best.ll);
}

TEST(BruteForce, EdgeCases) {
    const auto inst = testutil::random_instance(10, 60, 6);
    const auto all = brute_force_mle(inst.mat, 6);
    EXPECT_NEAR(all.ll, convex_em(inst.mat).ub_ll, 1e-8);
    const auto one = brute_force_mle(inst.mat, 1);
    double best = -1e300;
    for (std::size_t m = 0; m < 6; ++m) best = std::max(best, mixture_ll(inst.mat, WeightVector::indicator(6, m)));
    EXPECT_EQ(one.ll, best);
    EXPECT_THROW(brute_force_mle(inst.mat, 7), InvalidArgument);
    EXPECT_THROW(brute_force_mle(inst.mat, 3, 5), ResourceLimit);
    EXPECT_EQ(binomial(20, 3), 1140u);
    EXPECT_EQ(binomial(5, 7), 0u);
}

TEST(BruteForce, NeverExceedsCertifiedBound) {
    for (int t = 0; t < 15; ++t) {
        const auto inst = testutil::random_instance(1100 + t, 30, 10);
        const auto ub = convex_em(inst.mat);
        for (std::size_t k = 1; k <= 3; ++k) EXPECT_LE(brute_force_mle(inst.mat, k).ll, ub.certified_ub + 1e-10);
    }
}

TEST(RandomBaseline, ExactWhenKEqualsM) {
    const auto inst = testutil::random_instance(12, 40, 4);
    const auto est = random_baseline(inst.mat, 4, 10, 3);
    EXPECT_NEAR(est.mean, mixture_ll(inst.mat, WeightVector::uniform(4)), 1e-13);
    EXPECT_NEAR(est.std_error, 0.0, 1e-13);
}

TEST(RandomBaseline, DeterministicAndUnbiased) {
    const auto inst = testutil::random_instance(13, 40, 8);
    EXPECT_EQ(random_baseline_ll(inst.mat, 2, 100, 9), random_baseline_ll(inst.mat, 2, 100, 9));
    // exhaustive average over all C(8, 2) supports
    long double total = 0.0L;
    std::size_t count = 0;
    for (std::size_t a = 0; a < 8; ++a) {
        for (std::size_t b = a + 1; b < 8; ++b) {
            std::vector<double> w(8, 0.0);
            w[a] = w[b] = 0.5;
            total += mixture_ll(inst.mat, w);
            ++count;
        }
    }
    const double exact = double(total / count);
    const auto est = random_baseline(inst.mat, 2, 4000, 11);
    EXPECT_NEAR(est.mean, exact, 3.0 * est.std_error);
}
