#pragma once

// Component densities, discrete candidate sets and the data generators used
// throughout the library.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "mixcert/error.hpp"
#include "mixcert/image.hpp"
#include "mixcert/numeric.hpp"
#include "mixcert/rng.hpp"

namespace mixcert {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Multivariate normal density. Immutable; the Cholesky factor and the
/// normalizing constant are computed once at construction.
class GaussianComponent {
public:
    GaussianComponent(Vector mean, Matrix covariance) : mean_(std::move(mean)), cov_(std::move(covariance)) {
        const auto d = mean_.size();
        if (d < 1 || cov_.rows() != d || cov_.cols() != d) {
            throw InvalidArgument("mean and covariance dimensions disagree");
        }
        if (!mean_.allFinite() || !cov_.allFinite()) throw InvalidModel("non-finite component parameters");
        const double scale = cov_.cwiseAbs().maxCoeff();
        if ((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
            throw InvalidModel("covariance is not symmetric");
        }
        Eigen::LLT<Matrix> llt(cov_);
        if (llt.info() != Eigen::Success) throw InvalidModel("covariance is not positive definite");
        const Matrix l = llt.matrixL();
        double log_det = 0.0;
        for (Eigen::Index a = 0; a < d; ++a) {
            if (!(l(a, a) > 0.0)) throw InvalidModel("covariance is not positive definite");
            log_det += 2.0 * std::log(l(a, a));
        }
        log_det_ = log_det;
        log_norm_ = -0.5 * (static_cast<double>(d) * kLog2Pi + log_det);
        chol_.reserve(static_cast<std::size_t>(d * (d + 1) / 2));
        for (Eigen::Index a = 0; a < d; ++a) {
            for (Eigen::Index b = 0; b <= a; ++b) chol_.push_back(l(a, b));
        }
    }

    std::size_t dimension() const noexcept { return static_cast<std::size_t>(mean_.size()); }
    const Vector& mean() const noexcept { return mean_; }
    const Matrix& covariance() const noexcept { return cov_; }
    double log_det() const noexcept { return log_det_; }

    /// -1/2 log det(2 pi Sigma)
    double log_normalizer() const noexcept { return log_norm_; }

    /// Hot-path evaluation; `x` must have dimension() entries.
    double log_density_unchecked(const double* x) const noexcept {
        const std::size_t d = dimension();
        std::array<double, 8> small;
        std::vector<double> large;
        double* z = small.data();
        if (d > small.size()) {
            large.resize(d);
            z = large.data();
        }
        const double* mu = mean_.data();
        double quad = 0.0;
        std::size_t row = 0;
        for (std::size_t a = 0; a < d; ++a) {
            double s = x[a] - mu[a];
            for (std::size_t b = 0; b < a; ++b) s -= chol_[row + b] * z[b];
            z[a] = s / chol_[row + a];
            quad += z[a] * z[a];
            row += a + 1;
        }
        return log_norm_ - 0.5 * quad;
    }

    Matrix precision() const {
        return cov_.llt().solve(Matrix::Identity(cov_.rows(), cov_.cols()));
    }

    double max_eigenvalue() const {
        Eigen::SelfAdjointEigenSolver<Matrix> es(cov_, Eigen::EigenvaluesOnly);
        return es.eigenvalues().maxCoeff();
    }

    bool operator==(const GaussianComponent& o) const { return mean_ == o.mean_ && cov_ == o.cov_; }

private:
    Vector mean_;
    Matrix cov_;
    std::vector<double> chol_;  // packed lower-triangular factor, row by row
    double log_det_ = 0.0;
    double log_norm_ = 0.0;
};

inline double gaussian_log_density(const GaussianComponent& c, std::span<const double> x) {
    if (x.size() != c.dimension()) throw InvalidArgument("point dimension does not match component");
    return c.log_density_unchecked(x.data());
}

/// The discrete candidate set. Index m identifies the same component everywhere.
class ComponentSet {
public:
    ComponentSet(std::vector<GaussianComponent> components, nlohmann::json provenance = {{"type", "explicit"}})
        : components_(std::move(components)), provenance_(std::move(provenance)) {
        if (components_.empty()) throw InvalidArgument("component set must contain at least one model");
        dim_ = components_.front().dimension();
        for (const auto& c : components_) {
            if (c.dimension() != dim_) throw InvalidArgument("components of a set must share one dimension");
        }
    }

    std::size_t size() const noexcept { return components_.size(); }
    std::size_t dimension() const noexcept { return dim_; }
    const GaussianComponent& operator[](std::size_t m) const { return components_[m]; }
    const std::vector<GaussianComponent>& components() const noexcept { return components_; }
    const nlohmann::json& provenance() const noexcept { return provenance_; }

private:
    std::vector<GaussianComponent> components_;
    std::size_t dim_ = 0;
    nlohmann::json provenance_;
};

/// Continuous-space finite mixture; components need not belong to any set.
struct MixtureModel {
    std::vector<double> weights;
    std::vector<GaussianComponent> components;

    MixtureModel(std::vector<double> w, std::vector<GaussianComponent> c) : weights(std::move(w)), components(std::move(c)) {
        if (components.empty() || weights.size() != components.size()) {
            throw InvalidArgument("mixture needs K >= 1 components and K weights");
        }
        double total = 0.0;
        for (double x : weights) {
            if (!(x >= 0.0) || !std::isfinite(x)) throw InvalidArgument("mixture weights must be nonnegative");
            total += x;
        }
        if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("mixture weights must sum to 1");
        for (const auto& comp : components) {
            if (comp.dimension() != components.front().dimension()) {
                throw InvalidArgument("mixture components must share one dimension");
            }
        }
    }

    std::size_t size() const noexcept { return components.size(); }
    std::size_t dimension() const noexcept { return components.front().dimension(); }

    double log_density(std::span<const double> x) const {
        LogSumExp acc;
        for (std::size_t k = 0; k < size(); ++k) {
            if (weights[k] > 0.0) acc.add(std::log(weights[k]) + gaussian_log_density(components[k], x));
        }
        return acc.value();
    }
};

struct Dataset {
    RowMatrix points;           // N x d
    std::vector<int> labels;    // empty, or one ground-truth label per point

    Dataset() = default;
    explicit Dataset(RowMatrix p, std::vector<int> l = {}) : points(std::move(p)), labels(std::move(l)) {
        if (points.rows() < 1 || points.cols() < 1) throw InvalidArgument("dataset must contain at least one point");
        if (!points.allFinite()) throw InvalidArgument("dataset contains non-finite values");
        if (!labels.empty() && labels.size() != static_cast<std::size_t>(points.rows())) {
            throw InvalidArgument("label count does not match point count");
        }
    }

    std::size_t size() const noexcept { return static_cast<std::size_t>(points.rows()); }
    std::size_t dimension() const noexcept { return static_cast<std::size_t>(points.cols()); }
    std::span<const double> row(std::size_t i) const { return {points.data() + i * dimension(), dimension()}; }
};

// ---------------------------------------------------------------------------
// Grid enumeration (2-D)

enum class EigenPairing {
    descending,   // lambda1 >= lambda2; isotropic pairs emitted once, without rotation
    all_ordered,  // every ordered pair at every angle, duplicates included
};

struct GridSpec {
    std::vector<Vector> mean_sites;
    std::vector<double> eigenvalues;
    std::vector<double> angles;  // radians in [0, pi)
    EigenPairing pairing = EigenPairing::descending;
};

inline std::vector<Vector> lattice_sites(const Vector& lo, const Vector& hi, std::size_t nx, std::size_t ny) {
    std::vector<Vector> out;
    out.reserve(nx * ny);
    for (std::size_t i = 0; i < nx; ++i) {
        const double x = nx == 1 ? 0.5 * (lo[0] + hi[0]) : lo[0] + (hi[0] - lo[0]) * double(i) / double(nx - 1);
        for (std::size_t j = 0; j < ny; ++j) {
            const double y = ny == 1 ? 0.5 * (lo[1] + hi[1]) : lo[1] + (hi[1] - lo[1]) * double(j) / double(ny - 1);
            out.push_back(Vector{{x, y}});
        }
    }
    return out;
}

namespace detail {

inline void validate_grid(const GridSpec& spec) {
    if (spec.mean_sites.empty() || spec.eigenvalues.empty() || spec.angles.empty()) {
        throw InvalidArgument("grid spec lists must be nonempty");
    }
    for (const auto& s : spec.mean_sites) {
        if (s.size() != 2) throw InvalidArgument("grid enumeration with rotations requires d = 2");
    }
    for (double e : spec.eigenvalues) {
        if (!(e > 0.0) || !std::isfinite(e)) throw InvalidArgument("grid eigenvalues must be positive");
    }
    auto sorted = spec.eigenvalues;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw InvalidArgument("grid eigenvalues must be distinct");
    }
    for (double a : spec.angles) {
        if (!(a >= 0.0 && a < std::numbers::pi)) throw InvalidArgument("grid angles must lie in [0, pi)");
    }
}

inline Matrix rotated_covariance(double l1, double l2, double angle) {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    Matrix cov(2, 2);
    cov(0, 0) = l1 * c * c + l2 * s * s;
    cov(1, 1) = l1 * s * s + l2 * c * c;
    cov(0, 1) = cov(1, 0) = (l1 - l2) * c * s;
    return cov;
}

}  // namespace detail

/// Closed-form size of build_grid_set(spec).
inline std::size_t grid_set_size(const GridSpec& spec) {
    detail::validate_grid(spec);
    const std::size_t e = spec.eigenvalues.size();
    const std::size_t a = spec.angles.size();
    const std::size_t per_site = spec.pairing == EigenPairing::descending ? e + e * (e - 1) / 2 * a : e * e * a;
    return spec.mean_sites.size() * per_site;
}

/// Enumerates means (outer), eigenvalue pairs (middle) and angles (inner).
inline ComponentSet build_grid_set(const GridSpec& spec) {
    detail::validate_grid(spec);
    auto eig = spec.eigenvalues;
    std::sort(eig.begin(), eig.end(), std::greater<>());
    std::vector<std::pair<double, double>> pairs;
    for (std::size_t i = 0; i < eig.size(); ++i) {
        for (std::size_t j = 0; j < eig.size(); ++j) {
            if (spec.pairing == EigenPairing::descending && j < i) continue;
            pairs.emplace_back(eig[i], eig[j]);
        }
    }
    std::vector<GaussianComponent> comps;
    comps.reserve(grid_set_size(spec));
    for (const auto& site : spec.mean_sites) {
        for (const auto& [l1, l2] : pairs) {
            if (spec.pairing == EigenPairing::descending && l1 == l2) {
                comps.emplace_back(site, detail::rotated_covariance(l1, l2, 0.0));
                continue;
            }
            for (double angle : spec.angles) comps.emplace_back(site, detail::rotated_covariance(l1, l2, angle));
        }
    }
    nlohmann::json prov = {{"type", "grid"},
                           {"mean_sites", spec.mean_sites.size()},
                           {"eigenvalues", spec.eigenvalues},
                           {"angles", spec.angles},
                           {"pairing", spec.pairing == EigenPairing::descending ? "descending" : "all_ordered"}};
    return ComponentSet(std::move(comps), std::move(prov));
}

// ---------------------------------------------------------------------------
// Patch dictionaries for segmentation

inline constexpr std::size_t kPixelFeatureDim = 5;
inline constexpr double kRidgeScale = 1e-6;
inline constexpr double kRidgeFloor = 1e-8;

/// (x, y, R, G, B) with every coordinate scaled into [0, 1].
inline std::array<double, kPixelFeatureDim> pixel_feature(const Image& img, std::size_t row, std::size_t col) {
    const auto* p = img.pixel(row, col);
    return {(double(col) + 0.5) / double(img.width), (double(row) + 0.5) / double(img.height), p[0] / 255.0,
            p[1] / 255.0, p[2] / 255.0};
}

inline Dataset pixel_features(const Image& img) {
    if (img.empty()) throw InvalidArgument("empty image");
    RowMatrix pts(static_cast<Eigen::Index>(img.width * img.height), kPixelFeatureDim);
    for (std::size_t r = 0; r < img.height; ++r) {
        for (std::size_t c = 0; c < img.width; ++c) {
            const auto f = pixel_feature(img, r, c);
            for (std::size_t a = 0; a < kPixelFeatureDim; ++a) pts(Eigen::Index(r * img.width + c), Eigen::Index(a)) = f[a];
        }
    }
    return Dataset(std::move(pts));
}

/// Adds eps * (trace/d + floor) to the diagonal.
inline Matrix regularize_covariance(Matrix cov) {
    const double d = static_cast<double>(cov.rows());
    const double ridge = kRidgeScale * (cov.trace() / d + kRidgeFloor);
    cov.diagonal().array() += ridge;
    return cov;
}

/// Maximum-likelihood (1/n) sample mean and covariance of the given rows.
inline std::pair<Vector, Matrix> sample_moments(const RowMatrix& x) {
    const double n = static_cast<double>(x.rows());
    Vector mean = x.colwise().sum().transpose() / n;
    const RowMatrix centered = x.rowwise() - mean.transpose();
    Matrix cov = (centered.transpose() * centered) / n;
    cov = 0.5 * (cov + cov.transpose());
    return {std::move(mean), std::move(cov)};
}

struct PatchSpec {
    std::vector<std::pair<std::size_t, std::size_t>> sizes;  // (height, width)
    std::size_t stride = 1;
    double trim_fraction = 0.0;
};

struct PatchFitResult {
    ComponentSet set;
    std::size_t skipped = 0;
};

/// Fits one trimmed Gaussian per patch position and size. Patches that keep
/// fewer than d + 1 pixels after trimming are skipped and counted.
inline PatchFitResult fit_patch_models(const Image& img, const PatchSpec& spec) {
    if (img.empty()) throw InvalidArgument("empty image");
    if (spec.sizes.empty() || spec.stride == 0) throw InvalidArgument("patch spec needs sizes and a positive stride");
    if (!(spec.trim_fraction >= 0.0 && spec.trim_fraction < 0.5)) throw InvalidArgument("trim_fraction must be in [0, 0.5)");
    struct Window {
        std::size_t row, col, h, w;
    };
    std::vector<Window> windows;
    for (const auto& [h, w] : spec.sizes) {
        if (h == 0 || w == 0 || h > img.height || w > img.width) {
            throw InvalidArgument("patch size " + std::to_string(h) + "x" + std::to_string(w) + " does not fit the image");
        }
        for (std::size_t r = 0; r + h <= img.height; r += spec.stride) {
            for (std::size_t c = 0; c + w <= img.width; c += spec.stride) windows.push_back({r, c, h, w});
        }
    }

    std::vector<std::optional<GaussianComponent>> fitted(windows.size());
    parallel_for(windows.size(), [&](std::size_t k) {
        const auto& win = windows[k];
        RowMatrix x(Eigen::Index(win.h * win.w), kPixelFeatureDim);
        Eigen::Index i = 0;
        for (std::size_t r = win.row; r < win.row + win.h; ++r) {
            for (std::size_t c = win.col; c < win.col + win.w; ++c, ++i) {
                const auto f = pixel_feature(img, r, c);
                for (std::size_t a = 0; a < kPixelFeatureDim; ++a) x(i, Eigen::Index(a)) = f[a];
            }
        }
        auto [mean, cov] = sample_moments(x);
        const auto n = static_cast<std::size_t>(x.rows());
        const auto drop = static_cast<std::size_t>(std::floor(spec.trim_fraction * double(n)));
        if (drop > 0) {
            const GaussianComponent initial(mean, regularize_covariance(cov));
            std::vector<std::pair<double, std::size_t>> dist(n);
            for (std::size_t p = 0; p < n; ++p) {
                dist[p] = {initial.log_normalizer() - initial.log_density_unchecked(x.row(Eigen::Index(p)).data()), p};
            }
            // largest Mahalanobis distance first; ties resolved by pixel order
            std::sort(dist.begin(), dist.end(), [](const auto& a, const auto& b) {
                return a.first != b.first ? a.first > b.first : a.second < b.second;
            });
            std::vector<std::size_t> keep;
            for (std::size_t p = drop; p < n; ++p) keep.push_back(dist[p].second);
            std::sort(keep.begin(), keep.end());
            if (keep.size() < kPixelFeatureDim + 1) return;
            RowMatrix kept(Eigen::Index(keep.size()), kPixelFeatureDim);
            for (std::size_t p = 0; p < keep.size(); ++p) kept.row(Eigen::Index(p)) = x.row(Eigen::Index(keep[p]));
            std::tie(mean, cov) = sample_moments(kept);
        }
        try {
            fitted[k].emplace(std::move(mean), regularize_covariance(std::move(cov)));
        } catch (const InvalidModel&) {
        }
    });

    std::vector<GaussianComponent> comps;
    std::size_t skipped = 0;
    for (auto& f : fitted) {
        if (f) {
            comps.push_back(std::move(*f));
        } else {
            ++skipped;
        }
    }
    if (comps.empty()) throw InvalidArgument("no patch produced a valid model");
    nlohmann::json sizes = nlohmann::json::array();
    for (const auto& [h, w] : spec.sizes) sizes.push_back({h, w});
    nlohmann::json prov = {{"type", "patches"},
                           {"sizes", sizes},
                           {"stride", spec.stride},
                           {"trim_fraction", spec.trim_fraction},
                           {"image", {img.width, img.height}},
                           {"skipped", skipped}};
    return {ComponentSet(std::move(comps), std::move(prov)), skipped};
}

// ---------------------------------------------------------------------------
// Generators

inline Dataset sample_mixture(const MixtureModel& mix, std::size_t n, std::uint64_t seed) {
    if (n < 1) throw InvalidArgument("sample size must be positive");
    const auto d = static_cast<Eigen::Index>(mix.dimension());
    std::vector<Matrix> factors;
    for (const auto& c : mix.components) factors.push_back(c.covariance().llt().matrixL());
    Rng rng(seed);
    RowMatrix pts(Eigen::Index(n), d);
    std::vector<int> labels(n);
    Vector z(d);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform();
        std::size_t k = 0;
        double acc = mix.weights[0];
        while (k + 1 < mix.size() && (u >= acc || mix.weights[k] == 0.0)) acc += mix.weights[++k];
        for (Eigen::Index a = 0; a < d; ++a) z[a] = rng.normal();
        pts.row(Eigen::Index(i)) = (mix.components[k].mean() + factors[k] * z).transpose();
        labels[i] = static_cast<int>(k);
    }
    return Dataset(std::move(pts), std::move(labels));
}

/// Minimum pairwise ||mu_i - mu_j|| / sqrt(d * max(lambda_max_i, lambda_max_j)).
inline double c_separation(const MixtureModel& mix) {
    if (mix.size() < 2) throw InvalidArgument("c-separation needs at least two components");
    const double d = static_cast<double>(mix.dimension());
    std::vector<double> lmax;
    for (const auto& c : mix.components) lmax.push_back(c.max_eigenvalue());
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < mix.size(); ++i) {
        for (std::size_t j = i + 1; j < mix.size(); ++j) {
            const double dist = (mix.components[i].mean() - mix.components[j].mean()).norm();
            best = std::min(best, dist / std::sqrt(d * std::max(lmax[i], lmax[j])));
        }
    }
    return best;
}

struct Rectangle {
    Vector lo;
    Vector hi;
    double weight = 1.0;
};

inline Dataset sample_rectangles(const std::vector<Rectangle>& rects, std::size_t n, std::uint64_t seed) {
    if (rects.empty() || n < 1) throw InvalidArgument("need at least one rectangle and one sample");
    const auto d = rects.front().lo.size();
    double total = 0.0;
    for (const auto& r : rects) {
        if (r.lo.size() != d || r.hi.size() != d) throw InvalidArgument("rectangle dimensions disagree");
        if (((r.hi - r.lo).array() <= 0.0).any()) throw InvalidArgument("rectangles must have positive area");
        if (!(r.weight >= 0.0)) throw InvalidArgument("rectangle weights must be nonnegative");
        total += r.weight;
    }
    if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("rectangle weights must sum to 1");
    Rng rng(seed);
    RowMatrix pts(Eigen::Index(n), d);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform();
        std::size_t k = 0;
        double acc = rects[0].weight;
        while (k + 1 < rects.size() && (u >= acc || rects[k].weight == 0.0)) acc += rects[++k].weight;
        for (Eigen::Index a = 0; a < d; ++a) pts(Eigen::Index(i), a) = rng.uniform(rects[k].lo[a], rects[k].hi[a]);
        labels[i] = static_cast<int>(k);
    }
    return Dataset(std::move(pts), std::move(labels));
}

/// Source of synthetic data: a Gaussian mixture or a mixture of uniform rectangles.
using DataGenerator = std::variant<MixtureModel, std::vector<Rectangle>>;

inline Dataset sample_generator(const DataGenerator& gen, std::size_t n, std::uint64_t seed) {
    if (const auto* mix = std::get_if<MixtureModel>(&gen)) return sample_mixture(*mix, n, seed);
    return sample_rectangles(std::get<std::vector<Rectangle>>(gen), n, seed);
}

}  // namespace mixcert
