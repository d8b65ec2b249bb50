#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "towertrain/linalg.hpp"

namespace towertrain {

enum class InputMode { one_hot, dense };

// Feed-forward tower: dims input_dim -> hidden... -> output_dim, ELU on
// hidden layers, identity output.  one_hot input feeds entity identities,
// which turns the first layer into a row lookup of its weight matrix.
struct TowerSpec {
    InputMode input_mode = InputMode::one_hot;
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;
    std::size_t output_dim = 0;
};

// Input rows for one side.  In one_hot mode only the entity count is stored;
// in dense mode rows holds one feature row per entity.
struct FeatureSet {
    InputMode mode = InputMode::one_hot;
    std::size_t count = 0;
    std::size_t dim = 0;
    DenseMatrix rows;

    static FeatureSet one_hot(std::size_t count);
    static FeatureSet dense(DenseMatrix rows);
};

// Intermediate activations recorded by forward passes.  A tape is valid only
// for the exact (params, features, ids) triple that produced it.
struct ForwardTape {
    std::vector<std::size_t> ids;   // batch entity ids, ascending and distinct
    std::vector<DenseMatrix> pre;   // hidden pre-activations, one per hidden layer
    std::vector<DenseMatrix> post;  // hidden post-activations
    std::size_t batch = 0;
};

// Flattened parameter layout: layers in order, weights before bias, weight
// matrices row-major with shape fan_in x fan_out.
class Tower {
  public:
    struct LayerView {
        std::size_t w_off = 0, b_off = 0, in = 0, out = 0;
    };

    explicit Tower(TowerSpec spec);

    const TowerSpec& spec() const { return spec_; }
    std::size_t param_count() const { return dim_; }
    std::size_t layer_count() const { return layers_.size(); }
    const std::vector<LayerView>& layers() const { return layers_; }

    // Glorot-uniform weights, zero biases; identical output per seed.
    Vec init_params(std::uint64_t seed) const;

    // Embeddings for the given entity batch (ids ascending, distinct).
    // tape may be null when no backward/forward derivative pass will follow.
    DenseMatrix forward(std::span<const double> params, const FeatureSet& feats,
                        std::span<const std::size_t> ids, ForwardTape* tape) const;
    // All entities of feats in order.
    DenseMatrix forward_all(std::span<const double> params, const FeatureSet& feats,
                            ForwardTape* tape) const;

    // Parameter gradient of <embeddings, cotangents>: flat vector of size
    // param_count().
    Vec vjp(std::span<const double> params, const FeatureSet& feats, const ForwardTape& tape,
            const DenseMatrix& cotangents) const;

    // Embedding directional derivative along a flat parameter direction.
    DenseMatrix jvp(std::span<const double> params, const FeatureSet& feats,
                    const ForwardTape& tape, std::span<const double> direction) const;

  private:
    TowerSpec spec_;
    std::vector<LayerView> layers_;
    std::size_t dim_ = 0;
};

// Model file: both tower shapes plus the joint flat parameter vector.
struct Checkpoint {
    TowerSpec spec_u, spec_v;
    Vec theta;
};

void save_checkpoint(const std::string& path, const TowerSpec& u, const TowerSpec& v,
                     std::span<const double> theta);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace towertrain
