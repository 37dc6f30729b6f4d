#pragma once

// Upper bound on the K-sparse constrained likelihood: maximize the concave
// LL(pi) over the whole simplex with EM on the mixing weights alone, with
// safeguarded overrelaxation, and certify the result by its linearization gap.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "mixcert/error.hpp"
#include "mixcert/likelihood.hpp"
#include "mixcert/numeric.hpp"
#include "mixcert/rng.hpp"

namespace mixcert {

struct UniformInit {};
struct RandomInit {
    std::uint64_t seed = 0;
};
using ConvexEmInit = std::variant<UniformInit, WeightVector, RandomInit>;

struct ConvexEmConfig {
    std::size_t max_iterations = 10000;
    double gap_tolerance = 1e-8;
    double relative_ll_tolerance = 1e-12;
    double eta = 1.8;
    /// Negative means the default 1e-12 / M.
    double prune_threshold = -1.0;
    /// Passes between full-gradient evaluations once the iterate is sparse.
    std::size_t gap_check_interval = 10;
    ConvexEmInit init = UniformInit{};

    double prune_for(std::size_t m) const { return prune_threshold < 0.0 ? 1e-12 / double(m) : prune_threshold; }

    void validate(std::size_t m) const {
        if (!(gap_tolerance > 0.0) || !(relative_ll_tolerance > 0.0)) throw InvalidArgument("tolerances must be positive");
        if (!(eta >= 1.0 && eta < 2.0)) throw InvalidArgument("overrelaxation factor must lie in [1, 2)");
        const double p = prune_for(m);
        if (!(p >= 0.0 && p < 1.0 / double(m))) throw InvalidArgument("prune threshold must lie in [0, 1/M)");
        if (max_iterations < 1 || gap_check_interval < 1) throw InvalidArgument("iteration counts must be positive");
        if (const auto* w = std::get_if<WeightVector>(&init); w && w->size() != m) {
            throw InvalidArgument("initial weight vector has the wrong length");
        }
    }
};

struct TraceEntry {
    double ll;
    std::optional<double> gap;  // present on passes that evaluated the full gradient
};

enum class StopReason { gap, relative_change, max_iterations };

struct BoundResult {
    WeightVector pi_dense = WeightVector::uniform(1);
    double ub_ll = 0.0;
    double certified_ub = 0.0;
    double final_gap = 0.0;
    std::size_t iterations_used = 0;
    std::vector<TraceEntry> trace;
    bool converged = false;
    StopReason stop = StopReason::max_iterations;
    std::size_t monotone_violations = 0;
    std::size_t overrelaxed_steps = 0;
    std::size_t readmissions = 0;
    std::uint64_t matrix_hash = 0;  // content hash when computed on a stored matrix
    std::uint64_t dataset_hash = 0;
    std::uint64_t set_hash = 0;
};

namespace detail {

// Working columns held as raw log-densities and as exp(L - shift) with a
// per-row shift, so that LL and its gradient over these columns cost one
// multiply-add per entry instead of one exponential.
class WorkingColumns {
public:
    static constexpr double kNegligible = 1e-150;

    template <class Source>
    void load(const Source& src, std::span<const std::size_t> cols) {
        if (covers(cols)) {
            if (2 * cols.size() < cols_.size()) compact(cols);
            return;
        }
        n_ = src.rows();
        const std::size_t width = cols.size();
        if (2 * n_ * width * sizeof(double) > src.cache_budget()) {
            clear();
            return;
        }
        cols_.assign(cols.begin(), cols.end());
        raw_.assign(n_ * width, 0.0);
        src.visit(cols, [&](std::size_t offset, std::size_t count, auto value) {
            parallel_for(n_, [&](std::size_t i) {
                for (std::size_t j = 0; j < count; ++j) raw_[i * width + offset + j] = value(i, j);
            });
        });
        shift_.assign(n_, 0.0);
        scaled_.assign(n_ * width, 0.0);
        parallel_for(n_, [&](std::size_t i) {
            const double* r = raw_.data() + i * width;
            const double s = *std::max_element(r, r + width);
            shift_[i] = s;
            for (std::size_t j = 0; j < width; ++j) {
                const double e = std::exp(r[j] - s);
                scaled_[i * width + j] = e < kNegligible ? 0.0 : e;
            }
        });
        enabled_ = true;
    }

    void clear() {
        enabled_ = false;
        cols_.clear();
        raw_.clear();
        scaled_.clear();
        shift_.clear();
    }

    bool covers(std::span<const std::size_t> cols) const {
        return enabled_ && std::includes(cols_.begin(), cols_.end(), cols.begin(), cols.end());
    }

    /// ell[i] = log sum_j w[cols[j]] exp(L(i, cols[j])); returns their mean.
    double evaluate(std::span<const double> w, std::span<const std::size_t> cols, std::span<double> ell) const {
        const auto pos = positions(cols);
        const std::size_t width = cols_.size();
        // held columns outside `cols` get weight 0, which leaves every sum unchanged
        std::vector<double> wk(width, 0.0);
        for (std::size_t j = 0; j < cols.size(); ++j) wk[pos[j]] = w[cols[j]];
        parallel_for(n_, [&](std::size_t i) {
            const double* e = scaled_.data() + i * width;
            double part[4] = {0.0, 0.0, 0.0, 0.0};
            std::size_t k = 0;
            for (; k + 4 <= width; k += 4) {
                for (std::size_t u = 0; u < 4; ++u) part[u] += wk[k + u] * e[k + u];
            }
            for (; k < width; ++k) part[0] += wk[k] * e[k];
            const double p = (part[0] + part[1]) + (part[2] + part[3]);
            if (p >= std::numeric_limits<double>::min()) {
                ell[i] = shift_[i] + std::log(p);
                return;
            }
            const double* r = raw_.data() + i * width;
            LogSumExp acc;
            for (std::size_t j = 0; j < cols.size(); ++j) acc.add(std::log(wk[pos[j]]) + r[pos[j]]);
            ell[i] = acc.value();
        });
        return normalized_sum(ell);
    }

    /// out[j] = (1/N) sum_i exp(L(i, cols[j]) - ell[i]).
    void gradients(std::span<const std::size_t> cols, std::span<const double> ell, std::span<double> out) const {
        constexpr std::size_t kChunk = 128;
        const auto pos = positions(cols);
        const std::size_t width = cols_.size();
        const std::size_t chunks = (n_ + kChunk - 1) / kChunk;
        std::vector<double> partial(chunks * width, 0.0);
        parallel_for(chunks, [&](std::size_t c) {
            double* acc = partial.data() + c * width;
            const std::size_t end = std::min(n_, (c + 1) * kChunk);
            for (std::size_t i = c * kChunk; i < end; ++i) {
                const double scale = std::exp(shift_[i] - ell[i]);
                if (scale <= 1e300) {
                    const double* e = scaled_.data() + i * width;
                    for (std::size_t k = 0; k < width; ++k) acc[k] += e[k] * scale;
                } else {
                    const double* r = raw_.data() + i * width;
                    for (std::size_t k = 0; k < width; ++k) acc[k] += std::exp(r[k] - ell[i]);
                }
            }
        });
        std::vector<double> column(chunks);
        for (std::size_t j = 0; j < cols.size(); ++j) {
            for (std::size_t c = 0; c < chunks; ++c) column[c] = partial[c * width + pos[j]];
            out[j] = stable_sum(column) / double(n_);
        }
    }

private:
    std::vector<std::size_t> positions(std::span<const std::size_t> cols) const {
        std::vector<std::size_t> pos(cols.size());
        for (std::size_t j = 0, k = 0; j < cols.size(); ++j) {
            while (cols_[k] != cols[j]) ++k;
            pos[j] = k;
        }
        return pos;
    }

    void compact(std::span<const std::size_t> cols) {
        const auto pos = positions(cols);
        const std::size_t old_width = cols_.size();
        const std::size_t width = cols.size();
        std::vector<double> raw(n_ * width), scaled(n_ * width);
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = 0; j < width; ++j) {
                raw[i * width + j] = raw_[i * old_width + pos[j]];
                scaled[i * width + j] = scaled_[i * old_width + pos[j]];
            }
        }
        raw_ = std::move(raw);
        scaled_ = std::move(scaled);
        cols_.assign(cols.begin(), cols.end());
    }

    bool enabled_ = false;
    std::size_t n_ = 0;
    std::vector<std::size_t> cols_;
    std::vector<double> raw_;
    std::vector<double> scaled_;
    std::vector<double> shift_;
};

template <class Source>
class ConvexEm {
public:
    ConvexEm(Source& src, const ConvexEmConfig& cfg) : src_(src), cfg_(cfg), n_(src.rows()), m_(src.cols()) {}

    BoundResult run() {
        cfg_.validate(m_);
        w_ = initial_weights();
        ell_.resize(n_);
        set_active();
        ll_ = evaluate(w_, active_, ell_);
        if (!std::isfinite(ll_)) throw NumericalFailure("non-finite log-likelihood at initialization", 0);

        BoundResult out;
        bool stall = false;
        double gap = std::numeric_limits<double>::infinity();
        std::vector<double> g_active;
        std::size_t it = 1;
        for (;; ++it) {
            // gradient at the current iterate; full on check passes
            const bool full = it == 1 || stall || it % cfg_.gap_check_interval == 0 || it == cfg_.max_iterations ||
                              near_converged_;
            std::vector<double> g_full;
            if (full) {
                g_full = gradient_all();
                gap = *std::max_element(g_full.begin(), g_full.end()) - 1.0;
                out.trace.push_back({ll_, gap});
                if (gap <= cfg_.gap_tolerance) {
                    out.stop = StopReason::gap;
                    break;
                }
                if (readmit(g_full, stall)) {
                    ++out.readmissions;
                    stall = false;
                    near_converged_ = false;
                    if (it == cfg_.max_iterations) break;
                    continue;
                }
                if (stall) {
                    out.stop = StopReason::relative_change;
                    break;
                }
                if (it == cfg_.max_iterations) break;
                g_active.resize(active_.size());
                for (std::size_t j = 0; j < active_.size(); ++j) g_active[j] = g_full[active_[j]];
            } else {
                out.trace.push_back({ll_, std::nullopt});
                g_active.resize(active_.size());
                if (work_.covers(active_)) {
                    work_.gradients(active_, ell_, g_active);
                } else {
                    column_gradients(src_, active_, ell_, g_active);
                }
            }

            const double prev_ll = ll_;
            step(g_active, it, out);
            stall = std::abs(ll_ - prev_ll) <= cfg_.relative_ll_tolerance * std::max(1.0, std::abs(ll_));
            double active_gap = -1.0;
            for (double g : g_active) active_gap = std::max(active_gap, g - 1.0);
            near_converged_ = active_gap <= cfg_.gap_tolerance;
        }
        out.iterations_used = it;

        // prune at termination only
        const double prune = cfg_.prune_for(m_);
        bool pruned = false;
        for (auto& x : w_) {
            if (x > 0.0 && x < prune) {
                x = 0.0;
                pruned = true;
            }
        }
        // the reported bound comes from the exact kernels
        if (pruned) normalize(w_);
        set_active();
        ll_ = evaluate_exact(w_, active_, ell_);
        const auto g_exact = full_gradient(src_, ell_);
        gap = *std::max_element(g_exact.begin(), g_exact.end()) - 1.0;
        out.final_gap = gap;
        out.ub_ll = ll_;
        out.certified_ub = ll_ + std::max(gap, 0.0);
        out.converged = gap <= 10.0 * cfg_.gap_tolerance;
        out.pi_dense = WeightVector(w_);
        return out;
    }

private:
    std::vector<double> initial_weights() const {
        if (const auto* w = std::get_if<WeightVector>(&cfg_.init)) {
            return {w->values().begin(), w->values().end()};
        }
        std::vector<double> w(m_, 1.0 / double(m_));
        if (const auto* r = std::get_if<RandomInit>(&cfg_.init)) {
            Rng rng(r->seed);
            for (auto& x : w) x = rng.exponential();  // flat Dirichlet
            normalize(w);
        }
        return w;
    }

    std::vector<double> gradient_all() const {
        if (!work_.covers(active_)) return full_gradient(src_, ell_);
        std::vector<std::size_t> held, rest;
        for (std::size_t m = 0, j = 0; m < m_; ++m) {
            if (j < active_.size() && active_[j] == m) {
                held.push_back(m);
                ++j;
            } else {
                rest.push_back(m);
            }
        }
        std::vector<double> g(m_), part(held.size()), other(rest.size());
        work_.gradients(held, ell_, part);
        if (!rest.empty()) column_gradients(src_, rest, ell_, other);
        for (std::size_t j = 0; j < held.size(); ++j) g[held[j]] = part[j];
        for (std::size_t j = 0; j < rest.size(); ++j) g[rest[j]] = other[j];
        return g;
    }

    static void normalize(std::vector<double>& w) {
        const double total = stable_sum(w);
        for (auto& x : w) x /= total;
    }

    // Weights under the floor are zeroed before they turn subnormal; they
    // return through readmission if their gradient calls for it.
    void set_active() {
        std::vector<std::size_t> next;
        for (std::size_t m = 0; m < m_; ++m) {
            if (w_[m] < WorkingColumns::kNegligible) w_[m] = 0.0;
            if (w_[m] > 0.0) next.push_back(m);
        }
        if (next != active_) {
            active_ = std::move(next);
            work_.load(src_, active_);
        }
    }

    double evaluate(const std::vector<double>& w, std::span<const std::size_t> cols, std::vector<double>& ell) const {
        if (work_.covers(cols)) return work_.evaluate(w, cols, ell);
        return evaluate_exact(w, cols, ell);
    }

    double evaluate_exact(const std::vector<double>& w, std::span<const std::size_t> cols,
                          std::vector<double>& ell) const {
        std::vector<double> log_w(cols.size());
        for (std::size_t j = 0; j < cols.size(); ++j) log_w[j] = std::log(w[cols[j]]);
        row_log_normalizers(src_, cols, log_w, ell);
        return normalized_sum(ell);
    }

    // One EM update of the weights, then the overrelaxed candidate if it does
    // at least as well as the plain update.
    void step(const std::vector<double>& g, std::size_t it, BoundResult& out) {
        std::vector<double> plain(m_, 0.0);
        for (std::size_t j = 0; j < active_.size(); ++j) plain[active_[j]] = w_[active_[j]] * g[j];
        normalize(plain);
        std::vector<double> ell_plain(n_);
        const double ll_plain = evaluate(plain, active_, ell_plain);
        if (!std::isfinite(ll_plain)) throw NumericalFailure("non-finite log-likelihood", it);
        if (ll_plain < ll_ - 1e-12) ++out.monotone_violations;

        if (cfg_.eta > 1.0) {
            std::vector<double> extra(m_, 0.0);
            std::vector<std::size_t> cols;
            for (auto m : active_) {
                const double x = w_[m] + cfg_.eta * (plain[m] - w_[m]);
                if (x > 0.0) {
                    extra[m] = x;
                    cols.push_back(m);
                }
            }
            normalize(extra);
            std::vector<double> ell_extra(n_);
            const double ll_extra = evaluate(extra, cols, ell_extra);
            if (std::isfinite(ll_extra) && ll_extra >= ll_plain) {
                w_ = std::move(extra);
                ell_ = std::move(ell_extra);
                ll_ = ll_extra;
                ++out.overrelaxed_steps;
                set_active();
                return;
            }
        }
        w_ = std::move(plain);
        ell_ = std::move(ell_plain);
        ll_ = ll_plain;
        set_active();
    }

    // Columns zeroed by clipping cannot regrow under multiplicative updates,
    // and columns with a small weight regrow too slowly to move LL. When such
    // a column has g_m > 1 the iterate is moved toward it by a backtracking
    // line search that only accepts an increase of LL.
    static constexpr double kStarvedWeight = 1e-6;

    bool readmit(const std::vector<double>& g, bool stalled) {
        std::vector<double> dir(m_, 0.0);
        double mass = 0.0;
        for (std::size_t m = 0; m < m_; ++m) {
            if ((w_[m] < kStarvedWeight || stalled) && g[m] - 1.0 > cfg_.gap_tolerance) {
                dir[m] = g[m] - 1.0;
                mass += dir[m];
            }
        }
        if (mass == 0.0) return false;
        double slope = -1.0;
        std::vector<std::size_t> reach;
        for (std::size_t m = 0; m < m_; ++m) {
            dir[m] /= mass;
            slope += dir[m] * g[m];
            if (w_[m] > 0.0 || dir[m] > 0.0) reach.push_back(m);
        }
        if (reach != active_) work_.load(src_, reach);
        std::vector<double> trial(m_);
        std::vector<double> ell_trial(n_);
        std::vector<std::size_t> cols;
        for (double tau = 0.5; tau > 1e-12; tau *= 0.5) {
            cols.clear();
            for (std::size_t m = 0; m < m_; ++m) {
                trial[m] = (1.0 - tau) * w_[m] + tau * dir[m];
                if (trial[m] > 0.0) cols.push_back(m);
            }
            const double ll = evaluate(trial, cols, ell_trial);
            if (std::isfinite(ll) && ll >= ll_ + 1e-4 * tau * slope) {
                w_ = trial;
                ell_ = ell_trial;
                ll_ = ll;
                set_active();
                return true;
            }
        }
        return false;
    }

    Source& src_;
    const ConvexEmConfig& cfg_;
    std::size_t n_;
    std::size_t m_;
    std::vector<double> w_;
    std::vector<double> ell_;
    std::vector<std::size_t> active_;
    WorkingColumns work_;
    double ll_ = 0.0;
    bool near_converged_ = false;
};

}  // namespace detail

inline BoundResult convex_em(const LogLikelihoodMatrix& mat, const ConvexEmConfig& cfg = {}) {
    MatrixColumns src(mat);
    auto out = detail::ConvexEm<MatrixColumns>(src, cfg).run();
    out.matrix_hash = mat.content_hash();
    out.dataset_hash = mat.dataset_hash();
    out.set_hash = mat.set_hash();
    return out;
}

struct ChunkOptions {
    std::size_t column_block = 4096;
    std::size_t memory_budget = kDefaultMemoryBudget;
};

/// Same iterations as convex_em, with the log-density columns recomputed from
/// (dataset, set) in blocks instead of being stored.
inline BoundResult convex_em_chunked(const Dataset& data, const ComponentSet& set, const ConvexEmConfig& cfg,
                                     const ChunkOptions& chunk) {
    StreamedColumns src(data, set, chunk.column_block, chunk.memory_budget);
    auto out = detail::ConvexEm<StreamedColumns>(src, cfg).run();
    out.dataset_hash = dataset_hash(data);
    out.set_hash = set_hash(set);
    return out;
}

}  // namespace mixcert
