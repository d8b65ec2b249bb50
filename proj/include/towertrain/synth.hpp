#pragma once

#include <cstdint>

#include "towertrain/data_io.hpp"
#include "towertrain/objective.hpp"

namespace towertrain {

// Small random problem for exhaustive checks: up to 6 x 6 entities, up to
// two hidden layers per tower, random loss, omega in {0, 1/4, 1}, lambda in
// {0, 0.1, 1}, nonuniform entity weights and random imputed embeddings.
// theta sits near a Glorot init with noise on weights and biases.
struct TinyInstance {
    TowerSpec spec_u, spec_v;
    ProblemData data;
    Vec theta;
};

// full_coverage guarantees every row and every column carries at least one
// observed pair, which the per-pair estimators need for exact unbiasedness.
TinyInstance random_tiny_instance(std::uint64_t seed, bool full_coverage = false);

// Interactions with planted groups: row entity i belongs to group
// i % n_clusters, column entity j to j % n_clusters, and each sampled pair
// stays inside its row's group with probability in_cluster_prob (uniform over
// all columns otherwise).  Labels are +1 for matching groups and -1
// otherwise.  Exactly count distinct pairs; deterministic per seed.
ObservedSet clustered_interactions(std::size_t rows, std::size_t cols, std::size_t count,
                                   std::size_t n_clusters, double in_cluster_prob,
                                   std::uint64_t seed);

}  // namespace towertrain
