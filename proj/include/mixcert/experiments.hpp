#pragma once

// Desk-scale experiment drivers: random instances drawn from a candidate set,
// the separation sweep, the restart study and image segmentation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mixcert/certification.hpp"
#include "mixcert/convex_bound.hpp"
#include "mixcert/error.hpp"
#include "mixcert/image.hpp"
#include "mixcert/likelihood.hpp"
#include "mixcert/model_space.hpp"
#include "mixcert/rng.hpp"
#include "mixcert/solvers.hpp"

namespace mixcert {

// ---------------------------------------------------------------------------
// Statistics helpers

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

inline double mean(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    return stable_sum(v) / double(v.size());
}

/// Ranks starting at 1; tied values share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * double(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw InvalidArgument("correlation needs two equal-length samples");
    const double mx = mean(x);
    const double my = mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sxy / std::sqrt(sxx * syy);
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    return pearson(average_ranks(x), average_ranks(y));
}

// ---------------------------------------------------------------------------
// Random instances whose generating components are members of the set

struct SetInstance {
    MixtureModel mixture;
    std::vector<std::size_t> members;  // set indices of the components, sorted
    WeightVector true_pi;
};

/// Picks k distinct members uniformly and draws weights from a flat Dirichlet
/// floored at min_weight.
inline SetInstance random_set_instance(const ComponentSet& set, std::size_t k, std::uint64_t seed,
                                       double min_weight = 0.1) {
    if (k < 1 || k > set.size()) throw InvalidArgument("instance needs 1 <= k <= M");
    if (!(min_weight >= 0.0) || min_weight * double(k) >= 1.0) throw InvalidArgument("min_weight too large for k");
    Rng rng(seed);
    auto members = rng.sample_without_replacement(set.size(), k);
    std::sort(members.begin(), members.end());
    std::vector<double> w(k);
    for (auto& x : w) x = rng.exponential();
    const double total = stable_sum(w);
    for (auto& x : w) x = min_weight + (1.0 - min_weight * double(k)) * x / total;
    const double renorm = stable_sum(w);
    for (auto& x : w) x /= renorm;
    std::vector<GaussianComponent> comps;
    for (auto m : members) comps.push_back(set[m]);
    auto true_pi = WeightVector::sparse(set.size(), members, w);
    return {MixtureModel(w, std::move(comps)), std::move(members), std::move(true_pi)};
}

struct InstanceEvaluation {
    double ub = 0.0;
    double ll_rand = 0.0;
    MultistartResult multistart;
    std::vector<double> ratio_by_restart;  // ratio of the best solution after r + 1 restarts
};

/// Bound, baseline and multistart lower bound for one sample.
inline InstanceEvaluation evaluate_instance(const Dataset& data, const ComponentSet& set, std::size_t k,
                                            const ConvexEmConfig& bound_cfg, EmConfig em, std::size_t restarts,
                                            std::uint64_t seed, const MultistartOptions& ms_opts,
                                            std::size_t baseline_samples) {
    const auto mat = build_matrix(data, set);
    const auto bound = convex_em(mat, bound_cfg);
    em.k = k;
    InstanceEvaluation out{bound.certified_ub, random_baseline_ll(mat, k, baseline_samples, seed),
                           projected_em_multistart(data, set, mat, em, restarts, seed, ms_opts), {}};
    for (double b : out.multistart.best_so_far) out.ratio_by_restart.push_back(optimality_ratio(b, out.ub, out.ll_rand));
    return out;
}

// ---------------------------------------------------------------------------
// Separation sweep

struct SeparationOptions {
    std::vector<std::size_t> ks{2, 3, 4};
    std::size_t instances_per_k = 10;
    std::size_t n_points = 300;
    std::size_t restarts = 10;
    std::vector<double> bin_edges{0.0, 0.5, 1.0, 1.5, 2.0, std::numeric_limits<double>::infinity()};
    ConvexEmConfig bound{};
    EmConfig em{};
    MultistartOptions multistart{};
    std::size_t baseline_samples = 1000;
    std::uint64_t seed = 0;
};

struct SeparationRecord {
    std::size_t instance = 0;
    std::size_t k = 0;
    double c_separation = 0.0;
    double ub = 0.0;
    double lb = 0.0;
    double ll_rand = 0.0;
    double ratio = std::numeric_limits<double>::quiet_NaN();
    std::optional<std::string> error;
};

struct SeparationBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    double mean_ratio = std::numeric_limits<double>::quiet_NaN();
    double median_ratio = std::numeric_limits<double>::quiet_NaN();
};

struct SeparationSweep {
    std::vector<SeparationRecord> records;
    std::vector<SeparationBin> bins;
};

inline std::vector<SeparationBin> bin_by_separation(const std::vector<SeparationRecord>& records,
                                                    const std::vector<double>& edges) {
    if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end())) {
        throw InvalidArgument("bin edges must be sorted with at least two entries");
    }
    std::vector<SeparationBin> bins;
    for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
        SeparationBin bin{edges[b], edges[b + 1]};
        std::vector<double> ratios;
        for (const auto& r : records) {
            if (!r.error && r.c_separation >= bin.lo && r.c_separation < bin.hi) ratios.push_back(r.ratio);
        }
        bin.count = ratios.size();
        bin.mean_ratio = mean(ratios);
        bin.median_ratio = median(ratios);
        bins.push_back(bin);
    }
    return bins;
}

inline SeparationSweep separation_sweep(const ComponentSet& set, const SeparationOptions& opts) {
    if (opts.ks.empty() || opts.instances_per_k < 1) throw InvalidArgument("separation sweep needs instances");
    for (auto k : opts.ks) {
        if (k < 2) throw InvalidArgument("separation sweep needs k >= 2");
    }
    const std::size_t total = opts.ks.size() * opts.instances_per_k;
    std::vector<SeparationRecord> records(total);
    for (std::size_t idx = 0; idx < total; ++idx) {
        auto& rec = records[idx];
        rec.instance = idx;
        rec.k = opts.ks[idx / opts.instances_per_k];
        const std::uint64_t seed = opts.seed + 7919 * idx;
        try {
            const auto inst = random_set_instance(set, rec.k, seed);
            rec.c_separation = c_separation(inst.mixture);
            const auto data = sample_mixture(inst.mixture, opts.n_points, seed + 1);
            const auto ev = evaluate_instance(data, set, rec.k, opts.bound, opts.em, opts.restarts, seed + 2,
                                              opts.multistart, opts.baseline_samples);
            rec.ub = ev.ub;
            rec.lb = ev.multistart.best.ll;
            rec.ll_rand = ev.ll_rand;
            rec.ratio = ev.ratio_by_restart.back();
        } catch (const Error& e) {
            rec.error = e.what();
        }
    }
    return {records, bin_by_separation(records, opts.bin_edges)};
}

// ---------------------------------------------------------------------------
// Restart study

struct RestartStudyOptions {
    std::size_t instances = 30;
    std::vector<std::size_t> ks{3};
    std::size_t n_points = 200;
    std::size_t restarts = 100;
    ConvexEmConfig bound{};
    EmConfig em{};
    MultistartOptions multistart{};
    std::size_t baseline_samples = 1000;
    std::uint64_t seed = 0;
};

struct RestartStudyRecord {
    std::size_t instance = 0;
    std::size_t k = 0;
    double ratio_first = std::numeric_limits<double>::quiet_NaN();
    double ratio_best = std::numeric_limits<double>::quiet_NaN();
    double improvement = std::numeric_limits<double>::quiet_NaN();
    std::optional<std::string> error;
};

struct RestartStudy {
    std::vector<RestartStudyRecord> records;
    double spearman = std::numeric_limits<double>::quiet_NaN();
};

/// Ratio after the first restart against the gain from all restarts.
inline RestartStudy restart_study(const ComponentSet& set, const RestartStudyOptions& opts) {
    if (opts.instances < 2 || opts.ks.empty() || opts.restarts < 1) {
        throw InvalidArgument("restart study needs instances, ks and restarts");
    }
    RestartStudy out;
    std::vector<double> first;
    std::vector<double> gain;
    for (std::size_t i = 0; i < opts.instances; ++i) {
        RestartStudyRecord rec;
        rec.instance = i;
        rec.k = opts.ks[i % opts.ks.size()];
        const std::uint64_t seed = opts.seed + 104729 * i;
        try {
            const auto inst = random_set_instance(set, rec.k, seed);
            const auto data = sample_mixture(inst.mixture, opts.n_points, seed + 1);
            const auto ev = evaluate_instance(data, set, rec.k, opts.bound, opts.em, opts.restarts, seed + 2,
                                              opts.multistart, opts.baseline_samples);
            rec.ratio_first = ev.ratio_by_restart.front();
            rec.ratio_best = ev.ratio_by_restart.back();
            rec.improvement = rec.ratio_best - rec.ratio_first;
            first.push_back(rec.ratio_first);
            gain.push_back(rec.improvement);
        } catch (const Error& e) {
            rec.error = e.what();
        }
        out.records.push_back(rec);
    }
    if (first.size() >= 2) out.spearman = spearman(first, gain);
    return out;
}

// ---------------------------------------------------------------------------
// Segmentation

inline constexpr std::size_t kDefaultPixelCap = 20000;

struct SegmentationOptions {
    std::size_t k = 5;
    PatchSpec patches{{{8, 8}, {16, 16}}, 4, 0.1};
    std::size_t pixel_cap = kDefaultPixelCap;
    std::size_t restarts = 10;
    std::uint64_t seed = 0;
    ConvexEmConfig bound{};
    EmConfig em{};
    MultistartOptions multistart{};
    std::size_t baseline_samples = 1000;
    std::size_t memory_budget = kDefaultMemoryBudget;
};

struct SegmentationResult {
    std::vector<int> labels;  // per pixel, row-major; index into the solution support
    Image mask;
    ComponentSet set;
    std::size_t patches_skipped = 0;
    Dataset sample;
    BoundResult bound;
    MultistartResult multistart;
    Certificate certificate;
};

/// Fixed palette for label masks.
inline std::array<std::uint8_t, 3> label_color(std::size_t label) {
    static constexpr std::array<std::array<std::uint8_t, 3>, 10> kPalette{{{230, 25, 75},
                                                                          {60, 180, 75},
                                                                          {255, 225, 25},
                                                                          {0, 130, 200},
                                                                          {245, 130, 48},
                                                                          {145, 30, 180},
                                                                          {70, 240, 240},
                                                                          {240, 50, 230},
                                                                          {210, 245, 60},
                                                                          {250, 190, 190}}};
    return kPalette[label % kPalette.size()];
}

/// Assigns every pixel to the support member with the largest responsibility.
inline std::vector<int> assign_pixels(const Dataset& pixels, const ComponentSet& set, const WeightVector& w) {
    std::vector<std::size_t> support;
    std::vector<double> log_w;
    detail::active_columns(w.values(), support, log_w);
    std::vector<int> labels(pixels.size());
    parallel_for(pixels.size(), [&](std::size_t i) {
        const double* x = pixels.points.data() + i * pixels.dimension();
        double best = -std::numeric_limits<double>::infinity();
        int arg = 0;
        for (std::size_t j = 0; j < support.size(); ++j) {
            const double v = log_w[j] + set[support[j]].log_density_unchecked(x);
            if (v > best) {
                best = v;
                arg = static_cast<int>(j);
            }
        }
        labels[i] = arg;
    });
    return labels;
}

inline Image label_mask(const std::vector<int>& labels, std::size_t width, std::size_t height) {
    if (labels.size() != width * height) throw InvalidArgument("label count does not match the image size");
    Image mask(width, height);
    for (std::size_t p = 0; p < labels.size(); ++p) {
        const auto c = label_color(static_cast<std::size_t>(labels[p]));
        std::copy(c.begin(), c.end(), mask.rgb.begin() + std::ptrdiff_t(p * 3));
    }
    return mask;
}

inline SegmentationResult segment_image(const Image& img, const SegmentationOptions& opts) {
    if (img.empty()) throw InvalidArgument("empty image");
    if (opts.k < 1 || opts.pixel_cap < 1) throw InvalidArgument("segmentation needs k >= 1 and a positive pixel cap");
    auto fit = fit_patch_models(img, opts.patches);
    const auto pixels = pixel_features(img);

    Dataset sample = pixels;
    if (pixels.size() > opts.pixel_cap) {
        Rng rng(opts.seed);
        auto idx = rng.sample_without_replacement(pixels.size(), opts.pixel_cap);
        std::sort(idx.begin(), idx.end());
        RowMatrix pts(Eigen::Index(idx.size()), Eigen::Index(kPixelFeatureDim));
        for (std::size_t i = 0; i < idx.size(); ++i) pts.row(Eigen::Index(i)) = pixels.points.row(Eigen::Index(idx[i]));
        sample = Dataset(std::move(pts));
    }
    if (sample.size() <= opts.k) throw InvalidArgument("image has too few pixels for k components");

    const auto mat = build_matrix(sample, fit.set, {opts.memory_budget});
    auto bound = convex_em(mat, opts.bound);
    EmConfig em = opts.em;
    em.k = opts.k;
    auto ms = projected_em_multistart(sample, fit.set, mat, em, opts.restarts, opts.seed + 1, opts.multistart);
    const double ll_rand = random_baseline_ll(mat, opts.k, opts.baseline_samples, opts.seed + 2);
    CertifyOptions cert_opts;
    cert_opts.seeds = {opts.seed};
    auto cert = certify(mat, fit.set, sample, opts.k, bound, ms.best, ll_rand, cert_opts);

    auto labels = assign_pixels(pixels, fit.set, ms.best.weights);
    auto mask = label_mask(labels, img.width, img.height);
    return {std::move(labels), std::move(mask), std::move(fit.set), fit.skipped, std::move(sample),
            std::move(bound), std::move(ms), std::move(cert)};
}

}  // namespace mixcert
