#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "btl/matrix.hpp"
#include "btl/rng.hpp"

namespace btl {

// Flat parameter storage. Structure lives in ParamLayout, values here.
using ParamVector = std::vector<double>;

// One contiguous named slice of the flat parameter vector. `filters` is the
// number of per-filter subgroups used by filter-normalized directions: rows
// of a weight matrix count individually, a bias block is a single filter.
struct ParamBlock {
    std::string name;
    int offset = 0;
    int length = 0;
    int filters = 1;
};

struct ParamLayout {
    std::vector<ParamBlock> blocks;
    // group name -> block names; at minimum "feature_extractor" and "head".
    std::map<std::string, std::vector<std::string>> groups;
    int total_dim = 0;

    void validate() const;
    const ParamBlock& block(const std::string& name) const;
    bool has_group(const std::string& group) const { return groups.count(group) > 0; }
    // Flat indices covered by a group, in block order (ascending offsets).
    std::vector<int> group_indices(const std::string& group) const;
    int group_length(const std::string& group) const;
};

std::vector<double> read_block(const ParamVector& params, const ParamBlock& block);
void write_block(ParamVector& params, const ParamBlock& block, const std::vector<double>& values);

enum class Activation { relu, tanh };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);

// Feed-forward network over the flat parameter vector. Blocks are
// "layer<i>.weight" (out x in, row-major) and "layer<i>.bias"; all layers but
// the last form the feature_extractor group, the last layer is the head.
struct MlpModel {
    std::vector<int> layer_dims;
    Activation activation = Activation::tanh;
    ParamLayout layout;

    int input_dim() const { return layer_dims.front(); }
    int output_dim() const { return layer_dims.back(); }
    int layer_count() const { return static_cast<int>(layer_dims.size()) - 1; }
};

MlpModel make_mlp(const std::vector<int>& layer_dims, Activation activation);

// Standard init: weights N(0, 1/fan_in), biases zero.
ParamVector init_params(const MlpModel& model, RngStream& rng);

struct LossKind {
    enum class Kind { cross_entropy, info_nce };
    Kind kind = Kind::cross_entropy;
    double temperature = 0.5;  // info_nce only

    static LossKind cross_entropy() { return {Kind::cross_entropy, 0.0}; }
    static LossKind info_nce(double tau);
    bool is_info_nce() const { return kind == Kind::info_nce; }
};

// A labeled batch (cross_entropy) or a batch of anchor/positive view pairs
// (info_nce, `positives` set and row-aligned with `inputs`).
struct Batch {
    Matrix inputs;
    std::vector<int> labels;
    std::optional<Matrix> positives;

    int size() const { return inputs.rows(); }
};

// Logits for cross_entropy models, embeddings for info_nce models.
Matrix forward(const MlpModel& model, const ParamVector& params, const Matrix& inputs);

// Activations of the last hidden layer (the feature extractor output).
Matrix forward_features(const MlpModel& model, const ParamVector& params, const Matrix& inputs);

struct LossGrad {
    double loss = 0.0;
    ParamVector grad;
};

// Mean per-example negative log-likelihood and its exact gradient.
LossGrad loss_and_grad(const MlpModel& model, const ParamVector& params, const Batch& batch,
                       const LossKind& loss);

// Contrastive cross-entropy for one anchor given its positive similarity and
// the similarities of every in-batch negative.
double info_nce_anchor_loss(double positive_sim, const std::vector<double>& negative_sims,
                            double tau);

// Numerically stable in-place row softmax.
void softmax_rows(Matrix& logits);

struct ScaleRange {
    double min = 1.0;
    double max = 1.0;
};

// Two stochastic views of x: uniform per-view scaling plus Gaussian noise.
std::pair<std::vector<double>, std::vector<double>> augment_pair(
    const std::vector<double>& x, RngStream& rng, double noise_sd, ScaleRange scale_range);

}  // namespace btl
