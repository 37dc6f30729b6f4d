#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace mixcert {

/// Caps the worker count used by parallel loops. Results never depend on it.
inline void set_thread_count(int n) {
#if defined(_OPENMP)
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

/// Runs fn(i) for i in [0, n). Each index must write only its own outputs.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
#if defined(_OPENMP)
    const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
#else
    for (std::size_t i = 0; i < n; ++i) fn(i);
#endif
}

/// Pairwise summation with a fixed split rule, so the rounding is a function
/// of the input alone.
inline double stable_sum(std::span<const double> v) {
    constexpr std::size_t kLeaf = 32;
    if (v.size() <= kLeaf) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t half = v.size() / 2;
    return stable_sum(v.first(half)) + stable_sum(v.subspan(half));
}

/// Single-pass log-sum-exp. Feeding the same values in the same order gives
/// bit-identical results however the stream is split into chunks.
struct LogSumExp {
    double max = -std::numeric_limits<double>::infinity();
    double sum = 0.0;

    void add(double x) noexcept {
        if (x == -std::numeric_limits<double>::infinity()) return;
        if (x <= max) {
            sum += std::exp(x - max);
        } else if (max == -std::numeric_limits<double>::infinity()) {
            max = x;
            sum = 1.0;
        } else {
            sum = sum * std::exp(max - x) + 1.0;
            max = x;
        }
    }

    double value() const noexcept {
        if (sum == 0.0) return -std::numeric_limits<double>::infinity();
        return max + std::log(sum);
    }
};

}  // namespace mixcert
