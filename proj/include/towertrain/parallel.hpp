#pragma once

#include <cstddef>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace towertrain {

// Number of OpenMP workers used by the kernels (1 when built without OpenMP).
int worker_count();

// 0 restores the hardware default.
void set_worker_count(int n);

namespace detail {

// Deterministic parallel sum: the index range is cut into a fixed number of
// blocks independent of the worker count and per-block partial sums are
// combined serially in block order, so the result is bit-identical for any
// number of workers.
inline constexpr std::size_t kReductionBlocks = 64;

template <class Body>
double blocked_sum(std::size_t n, Body&& body) {
    if (n == 0) return 0.0;
    const std::size_t nb = n < kReductionBlocks ? n : kReductionBlocks;
    const std::size_t chunk = (n + nb - 1) / nb;
    std::vector<double> partial(nb, 0.0);
#pragma omp parallel for schedule(static)
    for (std::size_t b = 0; b < nb; ++b) {
        const std::size_t lo = b * chunk;
        const std::size_t hi = lo + chunk < n ? lo + chunk : n;
        if (lo < hi) partial[b] = body(lo, hi);
    }
    double s = 0.0;
    for (std::size_t b = 0; b < nb; ++b) s += partial[b];
    return s;
}

}  // namespace detail
}  // namespace towertrain
