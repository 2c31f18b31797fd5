#include "btl/param_model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "btl/errors.hpp"

namespace btl {

void ParamLayout::validate() const {
    int expected_offset = 0;
    std::set<std::string> names;
    for (const auto& b : blocks) {
        if (b.offset != expected_offset) {
            throw ConfigError("layout: block '" + b.name + "' offset " + std::to_string(b.offset) +
                              " leaves a gap (expected " + std::to_string(expected_offset) + ")");
        }
        if (b.length <= 0) throw ConfigError("layout: block '" + b.name + "' has non-positive length");
        if (b.filters < 1 || b.length % b.filters != 0) {
            throw ConfigError("layout: block '" + b.name + "' filter count does not divide its length");
        }
        if (!names.insert(b.name).second) throw ConfigError("layout: duplicate block name '" + b.name + "'");
        expected_offset += b.length;
    }
    if (expected_offset != total_dim) {
        throw ConfigError("layout: blocks cover " + std::to_string(expected_offset) +
                          " of total_dim " + std::to_string(total_dim));
    }
    for (const char* required : {"feature_extractor", "head"}) {
        if (!has_group(required)) throw ConfigError(std::string("layout: missing group '") + required + "'");
    }
    std::set<std::string> covered;
    for (const auto& [group, members] : groups) {
        for (const auto& name : members) {
            if (!names.count(name)) {
                throw ConfigError("layout: group '" + group + "' references unknown block '" + name + "'");
            }
            if (!covered.insert(name).second) {
                throw ConfigError("layout: block '" + name + "' assigned to more than one group");
            }
        }
    }
}

const ParamBlock& ParamLayout::block(const std::string& name) const {
    for (const auto& b : blocks)
        if (b.name == name) return b;
    throw ConfigError("layout: no block named '" + name + "'");
}

std::vector<int> ParamLayout::group_indices(const std::string& group) const {
    auto it = groups.find(group);
    if (it == groups.end()) throw ConfigError("layout: no group named '" + group + "'");
    std::vector<const ParamBlock*> members;
    for (const auto& name : it->second) members.push_back(&block(name));
    std::sort(members.begin(), members.end(),
              [](const ParamBlock* a, const ParamBlock* b) { return a->offset < b->offset; });
    std::vector<int> idx;
    for (const ParamBlock* b : members)
        for (int i = 0; i < b->length; ++i) idx.push_back(b->offset + i);
    return idx;
}

int ParamLayout::group_length(const std::string& group) const {
    auto it = groups.find(group);
    if (it == groups.end()) throw ConfigError("layout: no group named '" + group + "'");
    int n = 0;
    for (const auto& name : it->second) n += block(name).length;
    return n;
}

std::vector<double> read_block(const ParamVector& params, const ParamBlock& block) {
    return {params.begin() + block.offset, params.begin() + block.offset + block.length};
}

void write_block(ParamVector& params, const ParamBlock& block, const std::vector<double>& values) {
    if (static_cast<int>(values.size()) != block.length) {
        throw DimensionError("write_block: got " + std::to_string(values.size()) +
                             " values for block '" + block.name + "' of length " +
                             std::to_string(block.length));
    }
    std::copy(values.begin(), values.end(), params.begin() + block.offset);
}

const char* activation_name(Activation a) {
    return a == Activation::relu ? "relu" : "tanh";
}

Activation activation_from_name(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    throw ConfigError("unknown activation '" + name + "' (expected relu or tanh)");
}

MlpModel make_mlp(const std::vector<int>& layer_dims, Activation activation) {
    if (layer_dims.size() < 2) throw ConfigError("make_mlp: need at least input and output dims");
    for (int d : layer_dims)
        if (d <= 0) throw ConfigError("make_mlp: non-positive layer dimension");

    MlpModel model;
    model.layer_dims = layer_dims;
    model.activation = activation;

    ParamLayout layout;
    layout.groups["feature_extractor"] = {};
    layout.groups["head"] = {};
    int offset = 0;
    const int n_layers = static_cast<int>(layer_dims.size()) - 1;
    for (int l = 0; l < n_layers; ++l) {
        const int in = layer_dims[l], out = layer_dims[l + 1];
        const std::string prefix = "layer" + std::to_string(l);
        layout.blocks.push_back({prefix + ".weight", offset, in * out, out});
        offset += in * out;
        layout.blocks.push_back({prefix + ".bias", offset, out, 1});
        offset += out;
        const std::string group = (l == n_layers - 1) ? "head" : "feature_extractor";
        layout.groups[group].push_back(prefix + ".weight");
        layout.groups[group].push_back(prefix + ".bias");
    }
    layout.total_dim = offset;
    layout.validate();
    model.layout = layout;
    return model;
}

ParamVector init_params(const MlpModel& model, RngStream& rng) {
    ParamVector params(model.layout.total_dim, 0.0);
    const int n_layers = model.layer_count();
    for (int l = 0; l < n_layers; ++l) {
        const auto& w = model.layout.block("layer" + std::to_string(l) + ".weight");
        const double sd = 1.0 / std::sqrt(static_cast<double>(model.layer_dims[l]));
        for (int i = 0; i < w.length; ++i) params[w.offset + i] = sd * rng.normal();
    }
    return params;
}

LossKind LossKind::info_nce(double tau) {
    if (!(tau > 0.0)) throw ConfigError("info_nce temperature must be positive");
    return {Kind::info_nce, tau};
}

namespace {

struct ForwardCache {
    // acts[0] = inputs, acts[l+1] = layer l output (post-activation except last).
    std::vector<Matrix> acts;
};

void check_forward_shapes(const MlpModel& model, const ParamVector& params, const Matrix& inputs) {
    if (inputs.cols() != model.input_dim()) {
        throw DimensionError("forward: input width " + std::to_string(inputs.cols()) +
                             " does not match layer_dims[0] = " + std::to_string(model.input_dim()));
    }
    if (static_cast<int>(params.size()) != model.layout.total_dim) {
        throw DimensionError("forward: params length " + std::to_string(params.size()) +
                             " does not match layout total_dim = " +
                             std::to_string(model.layout.total_dim));
    }
}

Matrix forward_impl(const MlpModel& model, const ParamVector& params, const Matrix& inputs,
                    ForwardCache* cache, int stop_after_layer = -1) {
    check_forward_shapes(model, params, inputs);
    const int n = inputs.rows();
    const int n_layers = model.layer_count();
    const int last = stop_after_layer < 0 ? n_layers : stop_after_layer;

    Matrix h = inputs;
    if (cache) cache->acts.push_back(h);
    for (int l = 0; l < last; ++l) {
        const int in = model.layer_dims[l], out = model.layer_dims[l + 1];
        const double* w = params.data() + model.layout.block("layer" + std::to_string(l) + ".weight").offset;
        const double* b = params.data() + model.layout.block("layer" + std::to_string(l) + ".bias").offset;
        Matrix next(n, out);
        for (int i = 0; i < n; ++i) {
            const double* hi = h.row(i);
            double* ni = next.row(i);
            for (int o = 0; o < out; ++o) {
                const double* wo = w + static_cast<size_t>(o) * in;
                double s = b[o];
                for (int k = 0; k < in; ++k) s += wo[k] * hi[k];
                ni[o] = s;
            }
        }
        if (l < n_layers - 1) {
            if (model.activation == Activation::tanh) {
                for (size_t i = 0; i < next.size(); ++i) next.data()[i] = std::tanh(next.data()[i]);
            } else {
                for (size_t i = 0; i < next.size(); ++i) next.data()[i] = std::max(0.0, next.data()[i]);
            }
        }
        h = std::move(next);
        if (cache) cache->acts.push_back(h);
    }
    return h;
}

// Gradient of the loss w.r.t. params given d(loss)/d(output).
ParamVector backward_impl(const MlpModel& model, const ParamVector& params, const ForwardCache& cache,
                          Matrix dout) {
    ParamVector grad(model.layout.total_dim, 0.0);
    const int n = dout.rows();
    const int n_layers = model.layer_count();
    for (int l = n_layers - 1; l >= 0; --l) {
        const int in = model.layer_dims[l], out = model.layer_dims[l + 1];
        const Matrix& act_out = cache.acts[l + 1];
        if (l < n_layers - 1) {
            // dout currently holds d/d(post-activation); convert to pre-activation.
            if (model.activation == Activation::tanh) {
                for (int i = 0; i < n; ++i)
                    for (int o = 0; o < out; ++o) {
                        const double a = act_out(i, o);
                        dout(i, o) *= (1.0 - a * a);
                    }
            } else {
                for (int i = 0; i < n; ++i)
                    for (int o = 0; o < out; ++o)
                        if (act_out(i, o) <= 0.0) dout(i, o) = 0.0;
            }
        }
        const Matrix& h = cache.acts[l];
        double* gw = grad.data() + model.layout.block("layer" + std::to_string(l) + ".weight").offset;
        double* gb = grad.data() + model.layout.block("layer" + std::to_string(l) + ".bias").offset;
        for (int i = 0; i < n; ++i) {
            const double* di = dout.row(i);
            const double* hi = h.row(i);
            for (int o = 0; o < out; ++o) {
                const double d = di[o];
                gb[o] += d;
                double* gwo = gw + static_cast<size_t>(o) * in;
                for (int k = 0; k < in; ++k) gwo[k] += d * hi[k];
            }
        }
        if (l > 0) {
            const double* w = params.data() + model.layout.block("layer" + std::to_string(l) + ".weight").offset;
            Matrix dprev(n, in, 0.0);
            for (int i = 0; i < n; ++i) {
                const double* di = dout.row(i);
                double* dpi = dprev.row(i);
                for (int o = 0; o < out; ++o) {
                    const double d = di[o];
                    const double* wo = w + static_cast<size_t>(o) * in;
                    for (int k = 0; k < in; ++k) dpi[k] += d * wo[k];
                }
            }
            dout = std::move(dprev);
        }
    }
    return grad;
}

double log_sum_exp(const std::vector<double>& xs) {
    double m = xs[0];
    for (double x : xs) m = std::max(m, x);
    double s = 0.0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace

Matrix forward(const MlpModel& model, const ParamVector& params, const Matrix& inputs) {
    return forward_impl(model, params, inputs, nullptr);
}

Matrix forward_features(const MlpModel& model, const ParamVector& params, const Matrix& inputs) {
    return forward_impl(model, params, inputs, nullptr, model.layer_count() - 1);
}

void softmax_rows(Matrix& logits) {
    for (int i = 0; i < logits.rows(); ++i) {
        double* r = logits.row(i);
        double m = r[0];
        for (int j = 1; j < logits.cols(); ++j) m = std::max(m, r[j]);
        double s = 0.0;
        for (int j = 0; j < logits.cols(); ++j) {
            r[j] = std::exp(r[j] - m);
            s += r[j];
        }
        for (int j = 0; j < logits.cols(); ++j) r[j] /= s;
    }
}

double info_nce_anchor_loss(double positive_sim, const std::vector<double>& negative_sims,
                            double tau) {
    if (!(tau > 0.0)) throw ConfigError("info_nce temperature must be positive");
    std::vector<double> scaled;
    scaled.reserve(negative_sims.size() + 1);
    scaled.push_back(positive_sim / tau);
    for (double s : negative_sims) scaled.push_back(s / tau);
    return log_sum_exp(scaled) - positive_sim / tau;
}

namespace {

LossGrad cross_entropy_loss(const MlpModel& model, const ParamVector& params, const Batch& batch) {
    const int n = batch.size();
    if (static_cast<int>(batch.labels.size()) != n) {
        throw DimensionError("cross_entropy: " + std::to_string(batch.labels.size()) +
                             " labels for " + std::to_string(n) + " inputs");
    }
    const int k = model.output_dim();
    for (int i = 0; i < n; ++i) {
        if (batch.labels[i] < 0 || batch.labels[i] >= k) {
            throw ConfigError("cross_entropy: label " + std::to_string(batch.labels[i]) +
                              " out of range [0, " + std::to_string(k) + ") at row " +
                              std::to_string(i));
        }
    }

    ForwardCache cache;
    Matrix logits = forward_impl(model, params, batch.inputs, &cache);
    Matrix probs = logits;
    softmax_rows(probs);

    double loss = 0.0;
    Matrix dlogits(n, k);
    for (int i = 0; i < n; ++i) {
        const double p = std::max(probs(i, batch.labels[i]), 1e-300);
        loss -= std::log(p);
        for (int c = 0; c < k; ++c) {
            dlogits(i, c) = (probs(i, c) - (c == batch.labels[i] ? 1.0 : 0.0)) / n;
        }
    }
    loss /= n;
    return {loss, backward_impl(model, params, cache, std::move(dlogits))};
}

// Symmetric in-batch contrastive loss on cosine similarities: every view is an
// anchor, its partner is the positive, all other views are negatives.
LossGrad info_nce_loss(const MlpModel& model, const ParamVector& params, const Batch& batch,
                       double tau) {
    if (!batch.positives.has_value()) throw ConfigError("info_nce: batch has no positive views");
    const Matrix& pos = *batch.positives;
    if (pos.rows() != batch.inputs.rows() || pos.cols() != batch.inputs.cols()) {
        throw DimensionError("info_nce: positives shape (" + std::to_string(pos.rows()) + "x" +
                             std::to_string(pos.cols()) + ") does not match anchors (" +
                             std::to_string(batch.inputs.rows()) + "x" +
                             std::to_string(batch.inputs.cols()) + ")");
    }
    const int n_pairs = batch.inputs.rows();
    const int m = 2 * n_pairs;  // total views; partner(i) = (i + n_pairs) mod m

    Matrix stacked(m, batch.inputs.cols());
    for (int i = 0; i < n_pairs; ++i) {
        std::copy(batch.inputs.row(i), batch.inputs.row(i) + batch.inputs.cols(), stacked.row(i));
        std::copy(pos.row(i), pos.row(i) + pos.cols(), stacked.row(n_pairs + i));
    }

    ForwardCache cache;
    Matrix z = forward_impl(model, params, stacked, &cache);
    const int e = z.cols();

    std::vector<double> norm(m);
    Matrix zhat(m, e);
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < e; ++j) s += z(i, j) * z(i, j);
        norm[i] = std::sqrt(s);
        const double inv = norm[i] > 1e-12 ? 1.0 / norm[i] : 0.0;
        for (int j = 0; j < e; ++j) zhat(i, j) = z(i, j) * inv;
    }

    Matrix sims(m, m, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j) {
            double s = 0.0;
            for (int c = 0; c < e; ++c) s += zhat(i, c) * zhat(j, c);
            sims(i, j) = sims(j, i) = s;
        }

    double loss = 0.0;
    Matrix dsim(m, m, 0.0);  // dsim(k, j): d(loss)/d sims(k, j) as seen from anchor k
    for (int k = 0; k < m; ++k) {
        const int partner = (k + n_pairs) % m;
        std::vector<double> negs;
        negs.reserve(m - 2);
        for (int j = 0; j < m; ++j)
            if (j != k && j != partner) negs.push_back(sims(k, j));
        loss += info_nce_anchor_loss(sims(k, partner), negs, tau);

        // softmax over candidates j != k of sims(k, j)/tau
        double mx = sims(k, partner);
        for (int j = 0; j < m; ++j)
            if (j != k) mx = std::max(mx, sims(k, j));
        double denom = 0.0;
        for (int j = 0; j < m; ++j)
            if (j != k) denom += std::exp((sims(k, j) - mx) / tau);
        for (int j = 0; j < m; ++j) {
            if (j == k) continue;
            const double p = std::exp((sims(k, j) - mx) / tau) / denom;
            dsim(k, j) = (p - (j == partner ? 1.0 : 0.0)) / (tau * m);
        }
    }
    loss /= m;

    // d(loss)/d zhat_k = sum_j (dsim(k,j) + dsim(j,k)) * zhat_j
    Matrix dzhat(m, e, 0.0);
    for (int k = 0; k < m; ++k) {
        for (int j = 0; j < m; ++j) {
            if (j == k) continue;
            const double g = dsim(k, j) + dsim(j, k);
            if (g == 0.0) continue;
            for (int c = 0; c < e; ++c) dzhat(k, c) += g * zhat(j, c);
        }
    }

    // Through the normalization: dz = (dzhat - (dzhat . zhat) zhat) / |z|
    Matrix dz(m, e, 0.0);
    for (int i = 0; i < m; ++i) {
        if (norm[i] <= 1e-12) continue;
        double dot = 0.0;
        for (int c = 0; c < e; ++c) dot += dzhat(i, c) * zhat(i, c);
        for (int c = 0; c < e; ++c) dz(i, c) = (dzhat(i, c) - dot * zhat(i, c)) / norm[i];
    }

    return {loss, backward_impl(model, params, cache, std::move(dz))};
}

}  // namespace

LossGrad loss_and_grad(const MlpModel& model, const ParamVector& params, const Batch& batch,
                       const LossKind& loss) {
    if (batch.size() == 0) throw ConfigError("loss_and_grad: empty batch");
    if (loss.kind == LossKind::Kind::cross_entropy) {
        return cross_entropy_loss(model, params, batch);
    }
    return info_nce_loss(model, params, batch, loss.temperature);
}

std::pair<std::vector<double>, std::vector<double>> augment_pair(
    const std::vector<double>& x, RngStream& rng, double noise_sd, ScaleRange scale_range) {
    if (noise_sd < 0.0) throw ConfigError("augment_pair: noise_sd must be non-negative");
    if (!(scale_range.min > 0.0) || scale_range.min > scale_range.max) {
        throw ConfigError("augment_pair: invalid scale range [" + std::to_string(scale_range.min) +
                          ", " + std::to_string(scale_range.max) + "]");
    }
    auto view = [&]() {
        const double s = scale_range.min == scale_range.max
                             ? scale_range.min
                             : rng.uniform(scale_range.min, scale_range.max);
        std::vector<double> v(x.size());
        for (size_t i = 0; i < x.size(); ++i) {
            v[i] = s * x[i] + (noise_sd > 0.0 ? noise_sd * rng.normal() : 0.0);
        }
        return v;
    };
    auto a = view();
    auto b = view();
    return {std::move(a), std::move(b)};
}

}  // namespace btl
