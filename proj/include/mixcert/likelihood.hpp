#pragma once

// The N x M log-density matrix and the likelihood functionals evaluated on it.
//
// Every kernel visits the selected columns in increasing index order, one
// element at a time per row, and reduces rows over fixed 128-row chunks. The
// arithmetic is therefore identical whether the columns come from a stored
// matrix or are recomputed block by block, and whatever the thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixcert/error.hpp"
#include "mixcert/hash.hpp"
#include "mixcert/model_space.hpp"
#include "mixcert/numeric.hpp"

namespace mixcert {

inline constexpr std::size_t kDefaultMemoryBudget = std::size_t{8} << 30;

inline std::uint64_t dataset_hash(const Dataset& data) {
    Fnv1a h;
    h.u64(data.size()).u64(data.dimension());
    h.doubles({data.points.data(), static_cast<std::size_t>(data.points.size())});
    return h.value();
}

inline std::uint64_t set_hash(const ComponentSet& set) {
    Fnv1a h;
    h.u64(set.size()).u64(set.dimension());
    for (const auto& c : set.components()) {
        h.doubles({c.mean().data(), static_cast<std::size_t>(c.mean().size())});
        h.doubles({c.covariance().data(), static_cast<std::size_t>(c.covariance().size())});
    }
    return h.value();
}

/// Entry (i, m) = log Pr(x_i; theta_m). Dense, row-major by data point.
class LogLikelihoodMatrix {
public:
    LogLikelihoodMatrix(std::size_t n, std::size_t m, std::vector<double> entries, std::uint64_t data_hash = 0,
                        std::uint64_t models_hash = 0)
        : n_(n), m_(m), data_(std::move(entries)), dataset_hash_(data_hash), set_hash_(models_hash) {
        if (n_ < 1 || m_ < 1) throw InvalidArgument("log-likelihood matrix needs N >= 1 and M >= 1");
        if (data_.size() != n_ * m_) throw InvalidArgument("entry count does not match N x M");
        for (double v : data_) {
            if (!std::isfinite(v)) throw InvalidArgument("log-likelihood matrix entries must be finite");
        }
        Fnv1a h;
        h.u64(n_).u64(m_).doubles(data_);
        content_hash_ = h.value();
    }

    std::size_t rows() const noexcept { return n_; }
    std::size_t cols() const noexcept { return m_; }
    double operator()(std::size_t i, std::size_t m) const noexcept { return data_[i * m_ + m]; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * m_, m_}; }
    std::span<const double> entries() const noexcept { return data_; }

    std::uint64_t dataset_hash() const noexcept { return dataset_hash_; }
    std::uint64_t set_hash() const noexcept { return set_hash_; }
    std::uint64_t content_hash() const noexcept { return content_hash_; }

    /// Copy of the given columns, in the given order.
    LogLikelihoodMatrix select_columns(std::span<const std::size_t> columns) const {
        std::vector<double> out(n_ * columns.size());
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = 0; j < columns.size(); ++j) out[i * columns.size() + j] = data_[i * m_ + columns[j]];
        }
        return {n_, columns.size(), std::move(out)};
    }

private:
    std::size_t n_;
    std::size_t m_;
    std::vector<double> data_;
    std::uint64_t dataset_hash_;
    std::uint64_t set_hash_;
    std::uint64_t content_hash_ = 0;
};

/// A point on the M-simplex, optionally declared K-sparse with an explicit support.
class WeightVector {
public:
    explicit WeightVector(std::vector<double> weights) : w_(std::move(weights)) { validate(); }

    static WeightVector uniform(std::size_t m) { return WeightVector(std::vector<double>(m, 1.0 / double(m))); }

    static WeightVector indicator(std::size_t m, std::size_t index) {
        std::vector<double> w(m, 0.0);
        w.at(index) = 1.0;
        return WeightVector(std::move(w));
    }

    /// `support` must be sorted and unique; `weights` are listed in support order.
    static WeightVector sparse(std::size_t m, std::vector<std::size_t> support, std::span<const double> weights) {
        if (support.empty() || support.size() != weights.size()) throw InvalidArgument("support and weights disagree");
        if (!std::is_sorted(support.begin(), support.end()) ||
            std::adjacent_find(support.begin(), support.end()) != support.end()) {
            throw InvalidArgument("support must be sorted and unique");
        }
        std::vector<double> w(m, 0.0);
        for (std::size_t j = 0; j < support.size(); ++j) {
            if (support[j] >= m) throw InvalidArgument("support index out of range");
            w[support[j]] = weights[j];
        }
        WeightVector out(std::move(w));
        out.support_ = std::move(support);
        return out;
    }

    std::size_t size() const noexcept { return w_.size(); }
    double operator[](std::size_t m) const noexcept { return w_[m]; }
    std::span<const double> values() const noexcept { return w_; }
    const std::optional<std::vector<std::size_t>>& support() const noexcept { return support_; }

    std::vector<std::size_t> nonzero() const {
        std::vector<std::size_t> out;
        for (std::size_t m = 0; m < w_.size(); ++m) {
            if (w_[m] > 0.0) out.push_back(m);
        }
        return out;
    }

private:
    void validate() const {
        if (w_.empty()) throw InvalidArgument("weight vector must be nonempty");
        double total = 0.0;
        for (double x : w_) {
            if (!(x >= 0.0) || !std::isfinite(x)) throw InvalidArgument("weights must be finite and nonnegative");
            total += x;
        }
        if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("weights must sum to 1");
    }

    std::vector<double> w_;
    std::optional<std::vector<std::size_t>> support_;
};

// ---------------------------------------------------------------------------
// Column sources

/// Columns served from a stored matrix.
class MatrixColumns {
public:
    explicit MatrixColumns(const LogLikelihoodMatrix& mat) : mat_(&mat) {}

    std::size_t rows() const noexcept { return mat_->rows(); }
    std::size_t cols() const noexcept { return mat_->cols(); }
    std::size_t cache_budget() const noexcept { return kDefaultMemoryBudget; }

    /// fn(offset, count, value) where value(i, j) is entry (i, cols[offset + j]).
    template <class Fn>
    void visit(std::span<const std::size_t> cols, Fn&& fn) const {
        const double* base = mat_->entries().data();
        const std::size_t stride = mat_->cols();
        const std::size_t* idx = cols.data();
        fn(std::size_t{0}, cols.size(), [=](std::size_t i, std::size_t j) { return base[i * stride + idx[j]]; });
    }

private:
    const LogLikelihoodMatrix* mat_;
};

/// Columns recomputed from (dataset, component set) in blocks of `block`
/// columns; at most one block is resident at a time.
class StreamedColumns {
public:
    StreamedColumns(const Dataset& data, const ComponentSet& set, std::size_t block, std::size_t budget_bytes)
        : data_(&data), set_(&set), block_(std::clamp<std::size_t>(block, 1, std::max<std::size_t>(set.size(), 1))),
          budget_(budget_bytes) {
        if (data.dimension() != set.dimension()) throw InvalidArgument("dataset and component set dimensions differ");
        const std::size_t need = data.size() * block_ * sizeof(double);
        if (need > budget_) {
            throw ResourceLimit("column block of " + std::to_string(block_) + " needs " + std::to_string(need) +
                                    " bytes, over the memory budget",
                                need);
        }
    }

    std::size_t rows() const noexcept { return data_->size(); }
    std::size_t cols() const noexcept { return set_->size(); }
    std::size_t cache_budget() const noexcept { return budget_; }

    template <class Fn>
    void visit(std::span<const std::size_t> cols, Fn&& fn) const {
        std::vector<double> buf;
        for (std::size_t offset = 0; offset < cols.size(); offset += block_) {
            const std::size_t count = std::min(block_, cols.size() - offset);
            buf.resize(rows() * count);
            fill(cols.subspan(offset, count), buf.data());
            const double* base = buf.data();
            fn(offset, count, [=](std::size_t i, std::size_t j) { return base[i * count + j]; });
        }
    }

private:
    void fill(std::span<const std::size_t> cols, double* out) const {
        const std::size_t width = cols.size();
        parallel_for(rows(), [&](std::size_t i) {
            const double* x = data_->points.data() + i * data_->dimension();
            for (std::size_t j = 0; j < width; ++j) out[i * width + j] = (*set_)[cols[j]].log_density_unchecked(x);
        });
    }

    const Dataset* data_;
    const ComponentSet* set_;
    std::size_t block_;
    std::size_t budget_;
};

// ---------------------------------------------------------------------------
// Kernels

/// out[i] = logsumexp_j (log_w[j] + L(i, cols[j])).
template <class Source>
void row_log_normalizers(const Source& src, std::span<const std::size_t> cols, std::span<const double> log_w,
                         std::span<double> out) {
    std::vector<LogSumExp> acc(src.rows());
    src.visit(cols, [&](std::size_t offset, std::size_t count, auto value) {
        parallel_for(src.rows(), [&](std::size_t i) {
            auto& a = acc[i];
            for (std::size_t j = 0; j < count; ++j) a.add(log_w[offset + j] + value(i, j));
        });
    });
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = acc[i].value();
}

/// out[j] = (1/N) sum_i exp(L(i, cols[j]) - ell[i]).
template <class Source>
void column_gradients(const Source& src, std::span<const std::size_t> cols, std::span<const double> ell,
                      std::span<double> out) {
    constexpr std::size_t kChunk = 128;
    const std::size_t n = src.rows();
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    std::vector<double> partial;
    src.visit(cols, [&](std::size_t offset, std::size_t count, auto value) {
        partial.assign(count * chunks, 0.0);
        parallel_for(chunks, [&](std::size_t c) {
            const std::size_t end = std::min(n, (c + 1) * kChunk);
            for (std::size_t i = c * kChunk; i < end; ++i) {
                for (std::size_t j = 0; j < count; ++j) partial[j * chunks + c] += std::exp(value(i, j) - ell[i]);
            }
        });
        for (std::size_t j = 0; j < count; ++j) {
            out[offset + j] = stable_sum({partial.data() + j * chunks, chunks}) / double(n);
        }
    });
}

namespace detail {

inline void active_columns(std::span<const double> w, std::vector<std::size_t>& cols, std::vector<double>& log_w) {
    cols.clear();
    log_w.clear();
    for (std::size_t m = 0; m < w.size(); ++m) {
        if (w[m] > 0.0) {
            cols.push_back(m);
            log_w.push_back(std::log(w[m]));
        }
    }
    if (cols.empty()) throw InvalidArgument("weight vector has no positive entry");
}

inline void check_length(const LogLikelihoodMatrix& mat, std::span<const double> w) {
    if (w.size() != mat.cols()) throw InvalidArgument("weight vector length does not match the number of models");
}

}  // namespace detail

/// Per-point log mixture density; zero-weight columns are skipped.
template <class Source>
std::vector<double> point_log_likelihoods(const Source& src, std::span<const double> w) {
    std::vector<std::size_t> cols;
    std::vector<double> log_w;
    detail::active_columns(w, cols, log_w);
    std::vector<double> ell(src.rows());
    row_log_normalizers(src, cols, log_w, ell);
    return ell;
}

/// (1/N) sum of per-point values, reduced in a fixed order.
inline double normalized_sum(std::span<const double> ell) { return stable_sum(ell) / double(ell.size()); }

/// Normalized log-likelihood LL(pi), nats per point.
inline double mixture_ll(const LogLikelihoodMatrix& mat, std::span<const double> w) {
    detail::check_length(mat, w);
    return normalized_sum(point_log_likelihoods(MatrixColumns(mat), w));
}

inline double mixture_ll(const LogLikelihoodMatrix& mat, const WeightVector& w) { return mixture_ll(mat, w.values()); }

/// Posterior q_i(m); exact zeros where pi_m = 0.
inline RowMatrix responsibilities(const LogLikelihoodMatrix& mat, const WeightVector& w) {
    detail::check_length(mat, w.values());
    const auto ell = point_log_likelihoods(MatrixColumns(mat), w.values());
    RowMatrix q = RowMatrix::Zero(Eigen::Index(mat.rows()), Eigen::Index(mat.cols()));
    std::vector<std::size_t> cols;
    std::vector<double> log_w;
    detail::active_columns(w.values(), cols, log_w);
    parallel_for(mat.rows(), [&](std::size_t i) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
            q(Eigen::Index(i), Eigen::Index(cols[j])) = std::exp(log_w[j] + mat(i, cols[j]) - ell[i]);
        }
    });
    return q;
}

/// Gradient of LL at pi for every column: g_m = (1/N) sum_i Pr(x_i; theta_m) / p_pi(x_i).
template <class Source>
std::vector<double> full_gradient(const Source& src, std::span<const double> ell) {
    std::vector<std::size_t> all(src.cols());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::vector<double> g(src.cols());
    column_gradients(src, all, ell, g);
    return g;
}

/// Linearization gap max_m g_m - 1. Because LL is concave and g . pi = 1,
/// LL(pi') <= LL(pi) + fw_gap(pi) for every pi' on the simplex.
inline double fw_gap(const LogLikelihoodMatrix& mat, std::span<const double> w) {
    detail::check_length(mat, w);
    const MatrixColumns src(mat);
    const auto ell = point_log_likelihoods(src, w);
    const auto g = full_gradient(src, ell);
    return *std::max_element(g.begin(), g.end()) - 1.0;
}

inline double fw_gap(const LogLikelihoodMatrix& mat, const WeightVector& w) { return fw_gap(mat, w.values()); }

struct BuildOptions {
    std::size_t memory_budget = kDefaultMemoryBudget;
};

inline LogLikelihoodMatrix build_matrix(const Dataset& data, const ComponentSet& set, const BuildOptions& opts = {}) {
    if (data.dimension() != set.dimension()) throw InvalidArgument("dataset and component set dimensions differ");
    const std::size_t n = data.size();
    const std::size_t m = set.size();
    const std::size_t bytes = n * m * sizeof(double);
    if (bytes > opts.memory_budget) {
        throw ResourceLimit("log-likelihood matrix needs " + std::to_string(bytes) + " bytes (budget " +
                                std::to_string(opts.memory_budget) + ")",
                            bytes);
    }
    std::vector<double> entries(n * m);
    parallel_for(n, [&](std::size_t i) {
        const double* x = data.points.data() + i * data.dimension();
        for (std::size_t k = 0; k < m; ++k) entries[i * m + k] = set[k].log_density_unchecked(x);
    });
    return {n, m, std::move(entries), dataset_hash(data), set_hash(set)};
}

}  // namespace mixcert
