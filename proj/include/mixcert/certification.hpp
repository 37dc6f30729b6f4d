#pragma once

// Optimality-ratio certificates and the empirical tightness diagnostics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ctime>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mixcert/convex_bound.hpp"
#include "mixcert/error.hpp"
#include "mixcert/likelihood.hpp"
#include "mixcert/model_space.hpp"
#include "mixcert/solvers.hpp"

namespace mixcert {

inline constexpr double kSandwichSlack = 1e-10;
inline constexpr double kRatioClamp = 1e-9;

/// (lb - ll_rand) / (ub - ll_rand).
inline double optimality_ratio(double lb, double ub, double ll_rand) {
    if (!std::isfinite(lb) || !std::isfinite(ub) || !std::isfinite(ll_rand)) {
        throw InvalidArgument("optimality ratio needs finite inputs");
    }
    if (ub <= ll_rand + 1e-12) {
        throw DegenerateCalibration("upper bound " + std::to_string(ub) + " does not exceed the random baseline " +
                                    std::to_string(ll_rand));
    }
    return (lb - ll_rand) / (ub - ll_rand);
}

/// Round-off at the ends of [0, 1] is snapped to the endpoint.
inline double reported_ratio(double raw) {
    if (raw < 0.0 && raw >= -kRatioClamp) return 0.0;
    if (raw > 1.0 && raw <= 1.0 + kRatioClamp) return 1.0;
    return raw;
}

inline std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct Certificate {
    double ub = 0.0;  // certified upper bound (ub_ll plus the remaining gap)
    double ub_ll = 0.0;
    double ub_gap = 0.0;
    double lb = 0.0;
    double ll_rand = 0.0;
    double ratio_raw = 0.0;
    double optimality_ratio = 0.0;
    std::size_t k = 0;
    std::size_t n_points = 0;
    std::size_t n_models = 0;
    std::vector<std::size_t> lb_support;
    std::vector<double> lb_weights;
    std::string lb_provenance;
    std::vector<std::uint64_t> seeds;
    std::string timestamp;
    std::uint64_t dataset_hash = 0;
    std::uint64_t set_hash = 0;
    std::uint64_t matrix_hash = 0;
    std::uint64_t config_hash = 0;
};

struct CertifyOptions {
    std::vector<std::uint64_t> seeds;
    std::uint64_t config_hash = 0;
    /// Empty means the current UTC time.
    std::string timestamp;
};

/// Assembles the certificate after checking that every input belongs to the
/// same (dataset, set) pair. The lower bound is recomputed from the weights.
inline Certificate certify(const LogLikelihoodMatrix& mat, const ComponentSet& set, const Dataset& data, std::size_t k,
                           const BoundResult& bound, const DiscreteSolution& solution, double ll_rand,
                           const CertifyOptions& opts = {}) {
    const auto dh = dataset_hash(data);
    const auto sh = set_hash(set);
    if (mat.rows() != data.size() || mat.cols() != set.size()) {
        throw InconsistentInputs("matrix shape does not match the dataset and component set");
    }
    if (mat.dataset_hash() != dh || mat.set_hash() != sh) {
        throw InconsistentInputs("matrix was not built from this dataset and component set");
    }
    if (bound.matrix_hash != 0 ? bound.matrix_hash != mat.content_hash()
                               : (bound.dataset_hash != dh || bound.set_hash != sh)) {
        throw InconsistentInputs("upper bound was computed on different inputs");
    }
    if (bound.pi_dense.size() != mat.cols()) throw InconsistentInputs("upper bound has the wrong number of weights");
    if (solution.matrix_hash != mat.content_hash()) {
        throw InconsistentInputs("discrete solution was evaluated on a different matrix");
    }
    if (solution.weights.size() != mat.cols()) throw InconsistentInputs("discrete solution has the wrong length");
    const auto support = solution.support();
    if (k < 1 || support.size() > k) {
        throw InvalidArgument("discrete solution has " + std::to_string(support.size()) + " components, K = " +
                              std::to_string(k));
    }

    Certificate c;
    c.ub = bound.certified_ub;
    c.ub_ll = bound.ub_ll;
    c.ub_gap = bound.final_gap;
    c.lb = mixture_ll(mat, solution.weights);
    c.ll_rand = ll_rand;
    if (c.lb > c.ub + kSandwichSlack) {
        throw NumericalFailure("certificate sandwich violated: lb " + std::to_string(c.lb) + " > ub " +
                                   std::to_string(c.ub),
                               bound.iterations_used);
    }
    c.ratio_raw = optimality_ratio(c.lb, c.ub, ll_rand);
    c.optimality_ratio = reported_ratio(c.ratio_raw);
    c.k = k;
    c.n_points = mat.rows();
    c.n_models = mat.cols();
    c.lb_support = support;
    for (auto m : support) c.lb_weights.push_back(solution.weights[m]);
    c.lb_provenance = solution.provenance;
    c.seeds = opts.seeds;
    c.timestamp = opts.timestamp.empty() ? utc_timestamp() : opts.timestamp;
    c.dataset_hash = dh;
    c.set_hash = sh;
    c.matrix_hash = mat.content_hash();
    c.config_hash = opts.config_hash;
    return c;
}

// ---------------------------------------------------------------------------
// Cross-entropy estimation error

/// LL(pi) on `data`, with densities computed on the fly for the support of pi.
inline double streamed_ll(const Dataset& data, const ComponentSet& set, const WeightVector& w) {
    if (w.size() != set.size()) throw InvalidArgument("weight vector length does not match the component set");
    StreamedColumns src(data, set, 4096, kDefaultMemoryBudget);
    return normalized_sum(point_log_likelihoods(src, w.values()));
}

struct EeCandidate {
    double sample_ll = 0.0;      // LL(pi) on the size-n sample
    double cross_entropy = 0.0;  // Monte Carlo estimate of E_p[log p_pi]
    double cross_entropy_se = 0.0;
    double deviation = 0.0;      // |cross_entropy - sample_ll|
};

struct EeDiagnostic {
    std::vector<EeCandidate> candidates;
    /// Max deviation over the candidates; a lower estimate of EE(p, n).
    double lower_estimate = 0.0;
};

/// Compares each candidate's sample log-likelihood with its cross-entropy
/// under the generator. The sample uses `seed`, the Monte Carlo draw `mc_seed`.
inline EeDiagnostic ee_diagnostic(const MixtureModel& generator, const std::vector<WeightVector>& candidates,
                                  const ComponentSet& set, std::size_t n, std::size_t mc_samples, std::uint64_t seed,
                                  std::uint64_t mc_seed) {
    if (candidates.empty()) throw InvalidArgument("ee_diagnostic needs at least one candidate");
    if (n < 1 || mc_samples < 1) throw InvalidArgument("sample sizes must be positive");
    if (generator.dimension() != set.dimension()) throw InvalidArgument("generator and component set dimensions differ");
    const auto sample = sample_mixture(generator, n, seed);
    const auto mc = sample_mixture(generator, mc_samples, mc_seed);
    StreamedColumns sample_src(sample, set, 4096, kDefaultMemoryBudget);
    StreamedColumns mc_src(mc, set, 4096, kDefaultMemoryBudget);

    EeDiagnostic out;
    for (const auto& w : candidates) {
        if (w.size() != set.size()) throw InvalidArgument("candidate length does not match the component set");
        EeCandidate c;
        c.sample_ll = normalized_sum(point_log_likelihoods(sample_src, w.values()));
        const auto ell = point_log_likelihoods(mc_src, w.values());
        c.cross_entropy = normalized_sum(ell);
        double var = 0.0;
        for (double v : ell) var += (v - c.cross_entropy) * (v - c.cross_entropy);
        c.cross_entropy_se = mc_samples > 1 ? std::sqrt(var / double(mc_samples - 1) / double(mc_samples)) : 0.0;
        c.deviation = std::abs(c.cross_entropy - c.sample_ll);
        out.lower_estimate = std::max(out.lower_estimate, c.deviation);
        out.candidates.push_back(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tightness curves

struct TightnessOptions {
    ConvexEmConfig bound{};
    EmConfig em{};
    std::size_t restarts = 10;
    MultistartOptions multistart{};
    std::size_t baseline_samples = 1000;
    /// Weights of the generating mixture on the set, when its components are members.
    std::optional<WeightVector> true_pi;
    std::size_t memory_budget = kDefaultMemoryBudget;
};

struct TightnessRow {
    std::size_t n = 0;
    std::uint64_t seed = 0;
    double ub = std::numeric_limits<double>::quiet_NaN();
    double lb = std::numeric_limits<double>::quiet_NaN();
    double ll_true = std::numeric_limits<double>::quiet_NaN();
    double ll_rand = std::numeric_limits<double>::quiet_NaN();
    double opt_ratio = std::numeric_limits<double>::quiet_NaN();
    double opt_ratio_true = std::numeric_limits<double>::quiet_NaN();
    bool converged = false;
    std::optional<std::string> error;
};

/// One row per (n, seed): sample, bound, multistart lower bound and, when
/// given, the likelihood of the true weights. Rows are ordered n-major.
inline std::vector<TightnessRow> tightness_curve(const DataGenerator& generator, const ComponentSet& set, std::size_t k,
                                                 const std::vector<std::size_t>& n_grid,
                                                 const std::vector<std::uint64_t>& seeds,
                                                 const TightnessOptions& opts = {}) {
    if (opts.true_pi && opts.true_pi->size() != set.size()) {
        throw InvalidArgument("true weights do not match the component set");
    }
    const SetProjector projector(set, opts.multistart.metric);
    const std::size_t cells = n_grid.size() * seeds.size();
    std::vector<TightnessRow> rows(cells);
    parallel_for(cells, [&](std::size_t c) {
        auto& row = rows[c];
        row.n = n_grid[c / seeds.size()];
        row.seed = seeds[c % seeds.size()];
        try {
            const auto data = sample_generator(generator, row.n, row.seed);
            const auto mat = build_matrix(data, set, {opts.memory_budget});
            const auto bound = convex_em(mat, opts.bound);
            row.ub = bound.certified_ub;
            row.converged = bound.converged;
            row.ll_rand = random_baseline_ll(mat, k, opts.baseline_samples, row.seed);
            if (opts.true_pi) row.ll_true = mixture_ll(mat, *opts.true_pi);
            if (opts.restarts > 0) {
                EmConfig em = opts.em;
                em.k = k;
                const auto ms = projected_em_multistart(data, projector, mat, em, opts.restarts, row.seed, opts.multistart);
                row.lb = ms.best.ll;
            }
            if (opts.true_pi) row.opt_ratio_true = optimality_ratio(row.ll_true, row.ub, row.ll_rand);
            if (opts.restarts > 0) row.opt_ratio = optimality_ratio(row.lb, row.ub, row.ll_rand);
        } catch (const Error& e) {
            row.error = e.what();
        }
    });
    return rows;
}

}  // namespace mixcert
