#pragma once

// Feasible K-sparse solutions (lower bounds on the constrained MLE).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixcert/convex_bound.hpp"
#include "mixcert/error.hpp"
#include "mixcert/likelihood.hpp"
#include "mixcert/model_space.hpp"
#include "mixcert/numeric.hpp"
#include "mixcert/rng.hpp"

namespace mixcert {

struct EmConfig {
    std::size_t k = 3;
    std::size_t max_iterations = 500;
    double relative_ll_tolerance = 1e-10;
    /// Negative means the default 1e-6 * trace(data covariance) / d.
    double covariance_ridge = -1.0;
};

struct EmTracePoint {
    double ll;
    bool after_reseed;  // first evaluation after a component was re-seeded
};

struct ContinuousEmResult {
    MixtureModel model;
    double ll;  // nats per point
    std::vector<EmTracePoint> trace;
    std::size_t iterations = 0;
    std::size_t reseeds = 0;
    bool converged = false;
};

namespace detail {

/// K distinct rows: the first uniformly, each next one with probability
/// proportional to its squared distance from the nearest row already taken.
inline std::vector<std::size_t> seed_points(const RowMatrix& x, std::size_t k, Rng& rng) {
    const auto n = static_cast<std::size_t>(x.rows());
    std::vector<std::size_t> picks{static_cast<std::size_t>(rng.index(n))};
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::vector<bool> taken(n, false);
    taken[picks[0]] = true;
    while (picks.size() < k) {
        const auto last = x.row(Eigen::Index(picks.back()));
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], (x.row(Eigen::Index(i)) - last).squaredNorm());
        for (std::size_t i = 0; i < n; ++i) {
            if (taken[i]) d2[i] = 0.0;
        }
        const double total = stable_sum(d2);
        std::size_t next = n;
        if (total > 0.0) {
            double u = rng.uniform() * total;
            for (std::size_t i = 0; i < n; ++i) {
                if (d2[i] <= 0.0) continue;
                next = i;
                if ((u -= d2[i]) < 0.0) break;
            }
        } else {
            // every remaining row duplicates a taken one
            std::vector<std::size_t> free;
            for (std::size_t i = 0; i < n; ++i) {
                if (!taken[i]) free.push_back(i);
            }
            next = free[rng.index(free.size())];
        }
        taken[next] = true;
        picks.push_back(next);
    }
    return picks;
}

}  // namespace detail

/// Standard EM for a K-component Gaussian mixture. Means start at K distinct
/// data points drawn by seed_points, covariances at the ridge-regularized data covariance. The
/// ridge makes the M-step inexact, so an update that would lower the data
/// log-likelihood is discarded and the iteration stops there.
inline ContinuousEmResult continuous_em(const Dataset& data, const EmConfig& cfg, std::uint64_t seed) {
    const std::size_t n = data.size();
    const std::size_t d = data.dimension();
    const std::size_t k = cfg.k;
    if (k < 1) throw InvalidArgument("EM needs K >= 1");
    if (n <= k) throw InvalidArgument("EM needs more points than components");

    const auto [data_mean, data_cov] = sample_moments(data.points);
    const double ridge = cfg.covariance_ridge < 0.0 ? 1e-6 * data_cov.trace() / double(d) : cfg.covariance_ridge;
    const Matrix ridge_eye = ridge * Matrix::Identity(Eigen::Index(d), Eigen::Index(d));

    Rng rng(seed);
    const auto picks = detail::seed_points(data.points, k, rng);
    std::vector<double> weights(k, 1.0 / double(k));
    std::vector<GaussianComponent> comps;
    for (auto p : picks) comps.emplace_back(Vector(data.points.row(Eigen::Index(p)).transpose()), data_cov + ridge_eye);

    RowMatrix log_r(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
    std::vector<double> ell(n);
    auto e_step = [&](const std::vector<double>& w, const std::vector<GaussianComponent>& c) {
        std::vector<double> log_w(k);
        for (std::size_t j = 0; j < k; ++j) log_w[j] = std::log(w[j]);
        parallel_for(n, [&](std::size_t i) {
            const double* x = data.points.data() + i * d;
            LogSumExp acc;
            for (std::size_t j = 0; j < k; ++j) {
                const double v = log_w[j] + c[j].log_density_unchecked(x);
                log_r(Eigen::Index(i), Eigen::Index(j)) = v;
                acc.add(v);
            }
            ell[i] = acc.value();
        });
        return normalized_sum(ell);
    };

    ContinuousEmResult out{MixtureModel(weights, comps), 0.0, {}, 0, 0, false};
    double ll = e_step(weights, comps);
    if (!std::isfinite(ll)) throw NumericalFailure("non-finite log-likelihood in continuous EM", 0);
    out.trace.push_back({ll, false});
    bool reseeded = false;

    for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
        // M-step from the responsibilities of the current parameters
        std::vector<double> next_w(k);
        std::vector<GaussianComponent> next_c;
        next_c.reserve(k);
        reseeded = false;
        for (std::size_t j = 0; j < k; ++j) {
            Vector r(static_cast<Eigen::Index>(n));
            for (std::size_t i = 0; i < n; ++i) r[Eigen::Index(i)] = std::exp(log_r(Eigen::Index(i), Eigen::Index(j)) - ell[i]);
            const double nk = stable_sum({r.data(), n});
            if (nk < 1e-12 * double(n)) {
                if (++out.reseeds > 10) throw NumericalFailure("repeated component collapse in continuous EM", it);
                const auto worst = static_cast<std::size_t>(std::min_element(ell.begin(), ell.end()) - ell.begin());
                next_c.emplace_back(Vector(data.points.row(Eigen::Index(worst)).transpose()), data_cov + ridge_eye);
                next_w[j] = 1.0 / double(k);
                reseeded = true;
                continue;
            }
            Vector mean = (data.points.transpose() * r) / nk;
            const RowMatrix centered = data.points.rowwise() - mean.transpose();
            Matrix cov = (centered.transpose() * r.asDiagonal() * centered) / nk;
            cov = 0.5 * (cov + cov.transpose()) + ridge_eye;
            try {
                next_c.emplace_back(std::move(mean), std::move(cov));
            } catch (const InvalidModel&) {
                throw NumericalFailure("degenerate covariance in continuous EM", it);
            }
            next_w[j] = nk / double(n);
        }
        const double total = stable_sum(next_w);
        for (auto& x : next_w) x /= total;

        const double next_ll = e_step(next_w, next_c);
        if (!std::isfinite(next_ll)) throw NumericalFailure("non-finite log-likelihood in continuous EM", it);
        if (!reseeded && next_ll < ll) {
            out.converged = true;
            break;
        }
        const double prev = ll;
        weights = std::move(next_w);
        comps = std::move(next_c);
        ll = next_ll;
        out.trace.push_back({ll, reseeded});
        out.iterations = it;
        if (!reseeded && std::abs(ll - prev) <= cfg.relative_ll_tolerance * std::max(1.0, std::abs(ll))) {
            out.converged = true;
            break;
        }
    }
    out.model = MixtureModel(std::move(weights), std::move(comps));
    out.ll = ll;
    return out;
}

// ---------------------------------------------------------------------------
// Projection onto the candidate set

enum class ProjectionMetric {
    symmetrized_kl,       // 1/2 [KL(p||q) + KL(q||p)]
    euclidean_parameters  // ||mu - mu'||^2 + ||Sigma - Sigma'||_F^2
};

/// Nearest-member queries against a fixed set; precisions are computed once.
class SetProjector {
public:
    SetProjector(const ComponentSet& set, ProjectionMetric metric = ProjectionMetric::symmetrized_kl)
        : set_(&set), metric_(metric) {
        if (metric_ == ProjectionMetric::symmetrized_kl) {
            precisions_.reserve(set.size());
            for (const auto& c : set.components()) precisions_.push_back(c.precision());
        }
    }

    const ComponentSet& set() const noexcept { return *set_; }

    double distance(const GaussianComponent& p, std::size_t m, const Matrix& p_precision) const {
        const auto& q = (*set_)[m];
        const Vector delta = p.mean() - q.mean();
        if (metric_ == ProjectionMetric::euclidean_parameters) {
            return delta.squaredNorm() + (p.covariance() - q.covariance()).squaredNorm();
        }
        const Matrix& q_precision = precisions_[m];
        const double d = static_cast<double>(p.dimension());
        const double tr_qp = (q_precision.cwiseProduct(p.covariance())).sum();
        const double tr_pq = (p_precision.cwiseProduct(q.covariance())).sum();
        const double maha = delta.dot((p_precision + q_precision) * delta);
        return 0.25 * (tr_qp + tr_pq + maha - 2.0 * d);
    }

    /// Lowest-index member at minimal distance.
    std::size_t nearest(const GaussianComponent& p) const {
        if (p.dimension() != set_->dimension()) throw InvalidArgument("component dimension does not match the set");
        const Matrix p_precision = metric_ == ProjectionMetric::symmetrized_kl ? p.precision() : Matrix();
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t m = 0; m < set_->size(); ++m) {
            const double dist = distance(p, m, p_precision);
            if (dist < best_d) {
                best_d = dist;
                best = m;
            }
        }
        return best;
    }

private:
    const ComponentSet* set_;
    ProjectionMetric metric_;
    std::vector<Matrix> precisions_;
};

struct DiscreteSolution {
    WeightVector weights;
    double ll = 0.0;
    std::string provenance;  // "projected-em:restart=<r>", "brute-force", "user", ...
    std::uint64_t matrix_hash = 0;

    std::vector<std::size_t> support() const { return weights.support() ? *weights.support() : weights.nonzero(); }
};

inline DiscreteSolution make_solution(const LogLikelihoodMatrix& mat, WeightVector w, std::string provenance) {
    const double ll = mixture_ll(mat, w);
    return {std::move(w), ll, std::move(provenance), mat.content_hash()};
}

/// Snaps every component to its nearest member; weights of components that
/// land on the same member are summed.
inline DiscreteSolution project_to_set(const MixtureModel& mix, const SetProjector& proj, const LogLikelihoodMatrix& mat) {
    if (mat.cols() != proj.set().size()) throw InvalidArgument("matrix and component set sizes differ");
    std::vector<std::pair<std::size_t, double>> mapped;
    for (std::size_t k = 0; k < mix.size(); ++k) {
        if (mix.weights[k] > 0.0) mapped.emplace_back(proj.nearest(mix.components[k]), mix.weights[k]);
    }
    std::sort(mapped.begin(), mapped.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::size_t> support;
    std::vector<double> weights;
    for (const auto& [m, w] : mapped) {
        if (!support.empty() && support.back() == m) {
            weights.back() += w;
        } else {
            support.push_back(m);
            weights.push_back(w);
        }
    }
    const double total = stable_sum(weights);
    for (auto& w : weights) w /= total;
    return make_solution(mat, WeightVector::sparse(mat.cols(), std::move(support), weights), "projected");
}

inline DiscreteSolution project_to_set(const MixtureModel& mix, const ComponentSet& set, const LogLikelihoodMatrix& mat) {
    return project_to_set(mix, SetProjector(set), mat);
}

/// Convex EM restricted to the columns in `support`. Starting from `initial`
/// (when given) makes the result at least as likely as the starting weights.
inline WeightVector refit_weights(const LogLikelihoodMatrix& mat, std::span<const std::size_t> support,
                                  std::optional<std::span<const double>> initial = std::nullopt,
                                  ConvexEmConfig cfg = {}) {
    if (support.empty()) throw InvalidArgument("refit needs a nonempty support");
    std::vector<std::size_t> cols(support.begin(), support.end());
    std::sort(cols.begin(), cols.end());
    if (std::adjacent_find(cols.begin(), cols.end()) != cols.end() || cols.back() >= mat.cols()) {
        throw InvalidArgument("support indices must be distinct and in range");
    }
    if (cols.size() == 1) return WeightVector::sparse(mat.cols(), cols, std::vector<double>{1.0});
    const auto sub = mat.select_columns(cols);
    cfg.init = UniformInit{};
    if (initial) {
        if (initial->size() != mat.cols()) throw InvalidArgument("initial weights have the wrong length");
        std::vector<double> w0(cols.size());
        double total = 0.0;
        for (std::size_t j = 0; j < cols.size(); ++j) total += w0[j] = (*initial)[cols[j]];
        if (total > 0.0) {
            for (auto& x : w0) x /= total;
            cfg.init = WeightVector(std::move(w0));
        }
    }
    cfg.prune_threshold = std::min(cfg.prune_for(mat.cols()), 0.5 / double(cols.size()));
    const auto res = convex_em(sub, cfg);
    std::vector<std::size_t> out_support;
    std::vector<double> out_w;
    for (std::size_t j = 0; j < cols.size(); ++j) {
        if (res.pi_dense[j] > 0.0) {
            out_support.push_back(cols[j]);
            out_w.push_back(res.pi_dense[j]);
        }
    }
    return WeightVector::sparse(mat.cols(), std::move(out_support), out_w);
}

// ---------------------------------------------------------------------------
// Multistart projected EM

struct RestartRecord {
    std::size_t restart = 0;
    double continuous_ll = std::numeric_limits<double>::quiet_NaN();
    double projected_ll = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> refit_ll;
    std::optional<std::string> error;
    std::vector<EmTracePoint> em_trace;
};

struct MultistartOptions {
    bool refit = true;
    ProjectionMetric metric = ProjectionMetric::symmetrized_kl;
    ConvexEmConfig refit_config{};
};

struct MultistartResult {
    DiscreteSolution best;
    std::size_t best_restart = 0;
    std::vector<RestartRecord> trace;
    /// best_so_far[r] = best lower bound among restarts 0..r (failed restarts carry the previous value).
    std::vector<double> best_so_far;
};

inline double restart_score(const RestartRecord& r) { return r.refit_ll ? *r.refit_ll : r.projected_ll; }

/// Restart r runs continuous EM with seed + r, projects, and optionally refits the weights.
inline MultistartResult projected_em_multistart(const Dataset& data, const SetProjector& proj,
                                                const LogLikelihoodMatrix& mat, const EmConfig& cfg,
                                                std::size_t restarts, std::uint64_t seed,
                                                const MultistartOptions& opts = {}) {
    if (restarts < 1) throw InvalidArgument("at least one restart is required");
    if (data.dimension() != proj.set().dimension() || mat.rows() != data.size() || mat.cols() != proj.set().size()) {
        throw InvalidArgument("dataset, component set and matrix do not match");
    }
    std::vector<RestartRecord> trace(restarts);
    std::vector<std::optional<DiscreteSolution>> solutions(restarts);
    parallel_for(restarts, [&](std::size_t r) {
        auto& rec = trace[r];
        rec.restart = r;
        try {
            auto em = continuous_em(data, cfg, seed + r);
            rec.continuous_ll = em.ll;
            rec.em_trace = std::move(em.trace);
            auto sol = project_to_set(em.model, proj, mat);
            rec.projected_ll = sol.ll;
            if (opts.refit) {
                auto w = refit_weights(mat, sol.support(), sol.weights.values(), opts.refit_config);
                sol = make_solution(mat, std::move(w), "");
                // refit starts at the projected weights; keep them if round-off says otherwise
                if (sol.ll < rec.projected_ll) {
                    sol = project_to_set(em.model, proj, mat);
                }
                rec.refit_ll = sol.ll;
            }
            sol.provenance = "projected-em:restart=" + std::to_string(r);
            solutions[r] = std::move(sol);
        } catch (const Error& e) {
            rec.error = e.what();
        }
    });

    MultistartResult out{DiscreteSolution{WeightVector::uniform(1), 0.0, "", 0}, 0, std::move(trace), {}};
    std::optional<std::size_t> best;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < restarts; ++r) {
        if (solutions[r] && restart_score(out.trace[r]) > best_score) {
            best_score = restart_score(out.trace[r]);
            best = r;
        }
        out.best_so_far.push_back(best_score);
    }
    if (!best) {
        std::string msg = "all restarts of projected EM failed";
        if (out.trace.front().error) msg += ": " + *out.trace.front().error;
        throw NumericalFailure(msg, 0);
    }
    out.best_restart = *best;
    out.best = std::move(*solutions[*best]);
    return out;
}

inline MultistartResult projected_em_multistart(const Dataset& data, const ComponentSet& set,
                                                const LogLikelihoodMatrix& mat, const EmConfig& cfg,
                                                std::size_t restarts, std::uint64_t seed,
                                                const MultistartOptions& opts = {}) {
    return projected_em_multistart(data, SetProjector(set, opts.metric), mat, cfg, restarts, seed, opts);
}

// ---------------------------------------------------------------------------
// Exact solver for small instances

inline constexpr std::size_t kDefaultEnumerationBudget = 200000;

/// C(n, k), saturating at SIZE_MAX.
inline std::size_t binomial(std::size_t n, std::size_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    long double r = 1.0L;
    for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<long double>(n - k + i) / static_cast<long double>(i);
    if (r >= static_cast<long double>(SIZE_MAX)) return SIZE_MAX;
    return static_cast<std::size_t>(std::llround(r));
}

/// Enumerates every size-k support, refits its weights and keeps the best.
inline DiscreteSolution brute_force_mle(const LogLikelihoodMatrix& mat, std::size_t k,
                                        std::size_t budget = kDefaultEnumerationBudget, ConvexEmConfig cfg = {}) {
    const std::size_t m = mat.cols();
    if (k < 1 || k > m) throw InvalidArgument("brute force needs 1 <= k <= M");
    const std::size_t count = binomial(m, k);
    if (count > budget) {
        throw ResourceLimit("brute force would enumerate C(" + std::to_string(m) + ", " + std::to_string(k) +
                                ") = " + std::to_string(count) + " supports",
                            count);
    }
    std::vector<std::size_t> combo(k);
    std::iota(combo.begin(), combo.end(), std::size_t{0});
    std::optional<DiscreteSolution> best;
    while (true) {
        auto sol = make_solution(mat, refit_weights(mat, combo, std::nullopt, cfg), "brute-force");
        if (!best || sol.ll > best->ll) best = std::move(sol);
        // next combination in lexicographic order
        std::size_t i = k;
        while (i > 0 && combo[i - 1] == m - k + (i - 1)) --i;
        if (i == 0) break;
        ++combo[i - 1];
        for (std::size_t j = i; j < k; ++j) combo[j] = combo[j - 1] + 1;
    }
    return std::move(*best);
}

// ---------------------------------------------------------------------------
// Random baseline

struct BaselineEstimate {
    double mean;
    double std_error;
};

/// Average LL of random size-k supports with uniform weights 1/k.
inline BaselineEstimate random_baseline(const LogLikelihoodMatrix& mat, std::size_t k, std::size_t samples,
                                        std::uint64_t seed) {
    if (samples < 1) throw InvalidArgument("random baseline needs at least one sample");
    if (k < 1 || k > mat.cols()) throw InvalidArgument("random baseline needs 1 <= k <= M");
    Rng rng(seed);
    const MatrixColumns src(mat);
    const std::vector<double> log_w(k, -std::log(double(k)));
    std::vector<double> values(samples);
    std::vector<double> ell(mat.rows());
    for (std::size_t s = 0; s < samples; ++s) {
        auto cols = rng.sample_without_replacement(mat.cols(), k);
        std::sort(cols.begin(), cols.end());
        row_log_normalizers(src, cols, log_w, ell);
        values[s] = normalized_sum(ell);
    }
    const double mean = stable_sum(values) / double(samples);
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    const double se = samples > 1 ? std::sqrt(var / double(samples - 1) / double(samples)) : 0.0;
    return {mean, se};
}

inline double random_baseline_ll(const LogLikelihoodMatrix& mat, std::size_t k, std::size_t samples = 1000,
                                 std::uint64_t seed = 0) {
    return random_baseline(mat, k, samples, seed).mean;
}

}  // namespace mixcert
