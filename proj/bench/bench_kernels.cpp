// Timing comparison of the OpenMP kernels against their serial references.
// Usage: bench_kernels [reps]
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <vector>

#include "towertrain/linalg.hpp"
#include "towertrain/parallel.hpp"

using namespace towertrain;
using clock_type = std::chrono::steady_clock;

namespace {

double urand(std::mt19937_64& eng) { return double(eng() >> 11) * 0x1p-53; }

DenseMatrix random_matrix(std::mt19937_64& eng, std::size_t r, std::size_t c) {
    DenseMatrix m(r, c);
    for (std::size_t t = 0; t < m.size(); ++t) m.data()[t] = 2.0 * urand(eng) - 1.0;
    return m;
}

template <class Fn>
double time_best(int reps, Fn&& fn) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = clock_type::now();
        fn();
        const double s = std::chrono::duration<double>(clock_type::now() - t0).count();
        if (s < best) best = s;
    }
    return best;
}

void report(const char* name, double serial_s, double parallel_s) {
    std::printf("%-18s %10.3f ms %10.3f ms %8.2fx\n", name, serial_s * 1e3, parallel_s * 1e3,
                serial_s / parallel_s);
}

}  // namespace

int main(int argc, char** argv) {
    const int reps = argc > 1 ? std::atoi(argv[1]) : 5;
    std::mt19937_64 eng(42);

    const std::size_t m = 4000, n = 3000, k = 128, nnz = 400000;
    std::vector<Triple> entries;
    entries.reserve(nnz);
    {
        std::vector<char> seen(m * n, 0);
        while (entries.size() < nnz) {
            const std::size_t i = eng() % m, j = eng() % n;
            if (seen[i * n + j]) continue;
            seen[i * n + j] = 1;
            entries.push_back({i, j, 2.0 * urand(eng) - 1.0});
        }
    }
    const SparseMatrixDual x(m, n, entries);
    const DenseMatrix p = random_matrix(eng, m, k);
    const DenseMatrix q = random_matrix(eng, n, k);
    const DenseMatrix a = random_matrix(eng, 2000, 256);
    const DenseMatrix b = random_matrix(eng, 256, 256);
    const DenseMatrix bt = random_matrix(eng, 256, 256);
    Vec w(m);
    for (double& v : w) v = urand(eng) + 0.5;

    std::printf("workers: %d, reps: %d (best-of)\n", worker_count(), reps);
    std::printf("%-18s %13s %13s %9s\n", "kernel", "serial", "parallel", "speedup");

    report("spmm",
           time_best(reps, [&] { (void)serial::spmm(x, q); }),
           time_best(reps, [&] { (void)spmm(x, q); }));
    report("spmm^T",
           time_best(reps, [&] { (void)serial::spmm(x, p, true); }),
           time_best(reps, [&] { (void)spmm(x, p, true); }));
    report("weighted_gram",
           time_best(reps, [&] { (void)serial::weighted_gram(p, w, p); }),
           time_best(reps, [&] { (void)weighted_gram(p, w, p); }));
    report("matmul",
           time_best(reps, [&] { (void)serial::matmul(a, b); }),
           time_best(reps, [&] { (void)matmul(a, b); }));
    report("matmul_bt",
           time_best(reps, [&] { (void)serial::matmul_bt(a, bt); }),
           time_best(reps, [&] { (void)matmul_bt(a, bt); }));
    report("matmul_at",
           time_best(reps, [&] { (void)serial::matmul_at(a, a); }),
           time_best(reps, [&] { (void)matmul_at(a, a); }));
    return 0;
}
