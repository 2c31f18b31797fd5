#include "btl/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "btl/errors.hpp"
#include "btl/threading.hpp"

namespace btl {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

int dataset_classes(const TransferPair& pair) {
    int k = pair.target_train.num_classes();
    k = std::max(k, pair.target_val.num_classes());
    k = std::max(k, pair.target_test.num_classes());
    return k;
}

}  // namespace

TransferPair load_task(const ExperimentConfig& cfg) {
    if (cfg.task.synthetic) return make_transfer_pair(cfg.task.spec);
    TransferPair pair;
    pair.source = load_csv(cfg.task.csv.source);
    pair.target_train = load_csv(cfg.task.csv.target_train);
    pair.target_val = load_csv(cfg.task.csv.target_val);
    pair.target_test = load_csv(cfg.task.csv.target_test);
    if (!cfg.task.csv.target_shifted_test.empty()) {
        pair.target_shifted_test = load_csv(cfg.task.csv.target_shifted_test);
    }
    return pair;
}

std::pair<Dataset, Dataset> seed_target_data(const ExperimentConfig& cfg, uint64_t seed) {
    if (!cfg.task.synthetic) {
        TransferPair pair = load_task(cfg);
        return {std::move(pair.target_train), std::move(pair.target_val)};
    }
    TransferSpec spec = cfg.task.spec;
    spec.target_seed = derive_seed(spec.target_seed, derive_seed(seed, "trial-target"));
    TransferPair pair = make_transfer_pair(spec);
    return {std::move(pair.target_train), std::move(pair.target_val)};
}

MlpModel make_source_model(const ExperimentConfig& cfg, int input_dim, int source_classes) {
    std::vector<int> dims;
    dims.push_back(input_dim);
    for (int h : cfg.model.hidden) dims.push_back(h);
    dims.push_back(cfg.pretrain.info_nce ? cfg.model.embed_dim : source_classes);
    return make_mlp(dims, cfg.model.activation);
}

MlpModel make_target_model(const ExperimentConfig& cfg, int input_dim, int target_classes) {
    std::vector<int> dims;
    dims.push_back(input_dim);
    for (int h : cfg.model.hidden) dims.push_back(h);
    dims.push_back(target_classes);
    return make_mlp(dims, cfg.model.activation);
}

ParamVector pretrain_source(const ExperimentConfig& cfg, const Dataset& source,
                            const MlpModel& source_model, uint64_t seed,
                            std::vector<TraceRow>* trace) {
    const IsotropicGaussian iso{cfg.pretrain.prior_variance};
    CompositePrior prior(source_model.layout, std::nullopt,
                         {{"feature_extractor", iso}, {"head", iso}});
    const LossKind loss = cfg.pretrain.info_nce
                              ? LossKind::info_nce(cfg.pretrain.info_nce_temperature)
                              : LossKind::cross_entropy();
    PosteriorTarget target(source_model, source.features, source.labels, loss, prior);
    if (cfg.pretrain.info_nce) {
        target.set_augmentation(cfg.pretrain.augment_noise_sd,
                                {cfg.pretrain.augment_scale_min, cfg.pretrain.augment_scale_max});
    }

    SamplerConfig run;
    run.kind = SamplerKind::sgd_map;
    run.step_size = cfg.pretrain.step_size;
    run.momentum = cfg.pretrain.momentum;
    run.n_steps = cfg.pretrain.steps;
    run.batch_size = std::min(cfg.pretrain.batch_size, source.size());
    run.cycle_count = cfg.pretrain.cycles;

    RngStream init_rng(derive_seed(seed, "pretrain-init"));
    const ParamVector init = init_params(source_model, init_rng);

    std::function<void(int, const ParamVector&, double)> hook;
    if (trace) {
        hook = [&run, trace](int step, const ParamVector&, double energy) {
            trace->push_back(
                {step, energy, cyclical_step_size(step, run.n_steps, run.step_size, run.cycle_count)});
        };
    }
    return run_map(target, run, init, derive_seed(seed, "pretrain"), hook);
}

LowRankGaussian restrict_to_group(const LowRankGaussian& full, const ParamLayout& layout,
                                  const std::string& group) {
    const std::vector<int> idx = layout.group_indices(group);
    if (idx.empty()) throw ConfigError("restrict_to_group: group '" + group + "' is empty");
    if (full.dim() != layout.total_dim) {
        throw DimensionError("restrict_to_group: prior dimension " + std::to_string(full.dim()) +
                             " vs layout total_dim " + std::to_string(layout.total_dim));
    }
    const int d = static_cast<int>(idx.size());
    ParamVector mean(d);
    std::vector<double> diag(d);
    Matrix dev(full.rank() > 0 ? d : 0, full.rank());
    for (int i = 0; i < d; ++i) {
        mean[i] = full.mean()[idx[i]];
        diag[i] = full.diag_var()[idx[i]];
        for (int c = 0; c < full.rank(); ++c) dev(i, c) = full.deviations()(idx[i], c);
    }
    return LowRankGaussian(std::move(mean), std::move(diag), std::move(dev), full.scale(),
                           full.dev_denom());
}

LowRankGaussian fit_feature_prior(const ExperimentConfig& cfg, const Dataset& source,
                                  const MlpModel& source_model, const ParamVector& checkpoint,
                                  uint64_t seed) {
    const IsotropicGaussian iso{cfg.pretrain.prior_variance};
    CompositePrior prior(source_model.layout, std::nullopt,
                         {{"feature_extractor", iso}, {"head", iso}});
    const LossKind loss = cfg.pretrain.info_nce
                              ? LossKind::info_nce(cfg.pretrain.info_nce_temperature)
                              : LossKind::cross_entropy();
    PosteriorTarget target(source_model, source.features, source.labels, loss, prior);
    if (cfg.pretrain.info_nce) {
        target.set_augmentation(cfg.pretrain.augment_noise_sd,
                                {cfg.pretrain.augment_scale_min, cfg.pretrain.augment_scale_max});
    }

    SamplerConfig run;
    run.kind = SamplerKind::sgd_map;
    run.step_size = cfg.swag.step_size;
    run.momentum = cfg.swag.momentum;
    run.n_steps = cfg.swag.steps;
    run.batch_size = std::min(cfg.swag.batch_size, source.size());
    run.cycle_count = cfg.swag.cycles;

    const SwagConfig swag_cfg{cfg.swag.snapshot_interval, cfg.swag.max_rank,
                              cfg.swag.total_snapshots, 1e-8};
    SwagState state(source_model.layout.total_dim, swag_cfg.max_rank);

    const int cycle_len = (run.n_steps + run.cycle_count - 1) / run.cycle_count;
    int qualifying = 0;
    auto hook = [&](int step, const ParamVector& w, double) {
        if (state.count() >= swag_cfg.total_snapshots) return;
        // Collect in the low-step-size band of each cycle, excluding the tail
        // where the cosine schedule freezes the iterate.
        const int pos = (step - 1) % cycle_len;
        if (pos < cycle_len / 2 || pos >= (9 * cycle_len) / 10) return;
        ++qualifying;
        if (qualifying % swag_cfg.snapshot_interval == 0) state.update(w);
    };
    run_map(target, run, checkpoint, derive_seed(seed, "swag-ft"), hook);

    if (state.count() < swag_cfg.total_snapshots) {
        throw ConfigError("fit_feature_prior: collected " + std::to_string(state.count()) +
                          " snapshots, config promised " + std::to_string(swag_cfg.total_snapshots));
    }
    const LowRankGaussian full = finalize(state, swag_cfg);
    return restrict_to_group(full, source_model.layout, "feature_extractor");
}

ParamVector make_transfer_init(const MlpModel& source_model, const ParamVector& checkpoint,
                               const MlpModel& target_model) {
    ParamVector init(target_model.layout.total_dim, 0.0);
    const auto fe_blocks = target_model.layout.groups.at("feature_extractor");
    for (const auto& name : fe_blocks) {
        const ParamBlock& src = source_model.layout.block(name);
        const ParamBlock& dst = target_model.layout.block(name);
        if (src.length != dst.length) {
            throw DimensionError("make_transfer_init: block '" + name + "' length " +
                                 std::to_string(src.length) + " vs " + std::to_string(dst.length));
        }
        std::copy(checkpoint.begin() + src.offset, checkpoint.begin() + src.offset + src.length,
                  init.begin() + dst.offset);
    }
    return init;
}

CompositePrior build_downstream_prior(const MlpModel& target_model, PriorMode mode,
                                      const LowRankGaussian* fe_prior, HyperParams hp) {
    const ParamLayout& layout = target_model.layout;
    switch (mode) {
        case PriorMode::learned: {
            if (!fe_prior) throw ConfigError("learned prior mode requires a fitted prior");
            return CompositePrior(layout,
                                  std::make_pair(std::string("feature_extractor"),
                                                 fe_prior->rescaled(hp.lambda)),
                                  {{"head", IsotropicGaussian{hp.head_variance}}});
        }
        case PriorMode::learned_mean_iso: {
            if (!fe_prior) throw ConfigError("learned_mean_iso prior mode requires a fitted prior");
            // Same mean, isotropic covariance: Sigma = feature_variance * I.
            std::vector<double> diag(fe_prior->dim(), 2.0 * hp.feature_variance);
            LowRankGaussian iso_mean(fe_prior->mean(), std::move(diag), Matrix(), 1.0, 1.0);
            return CompositePrior(layout,
                                  std::make_pair(std::string("feature_extractor"), std::move(iso_mean)),
                                  {{"head", IsotropicGaussian{hp.head_variance}}});
        }
        case PriorMode::zero_mean_iso:
        case PriorMode::transfer_init: {
            const IsotropicGaussian iso{hp.feature_variance};
            return CompositePrior(layout, std::nullopt,
                                  {{"feature_extractor", iso}, {"head", iso}});
        }
    }
    throw ConfigError("unknown prior mode");
}

MethodOutcome run_method(const ExperimentConfig& cfg, const Downstream& ds,
                         const LowRankGaussian* fe_prior, const ParamVector* transfer_init,
                         SamplerKind method, PriorMode mode, HyperParams hp, uint64_t seed,
                         SampleSet* samples_out, ParamVector* map_out) {
    const auto t0 = Clock::now();
    const MlpModel& model = *ds.model;
    const CompositePrior prior = build_downstream_prior(model, mode, fe_prior, hp);

    ParamVector init;
    if (mode == PriorMode::zero_mean_iso) {
        RngStream rng(derive_seed(seed, "random-init"));
        init = init_params(model, rng);
    } else if (mode == PriorMode::transfer_init) {
        if (!transfer_init) throw ConfigError("transfer_init mode requires checkpoint parameters");
        init = *transfer_init;
    } else {
        init = prior.mode();
    }
    if (cfg.inference.init_jitter_sd > 0 && mode != PriorMode::zero_mean_iso) {
        RngStream rng(derive_seed(seed, "init-jitter"));
        for (double& v : init) v += cfg.inference.init_jitter_sd * rng.normal();
    }

    PosteriorTarget target(model, ds.train->features, ds.train->labels, LossKind::cross_entropy(),
                           prior);
    SamplerConfig run = cfg.inference.sampler_config();
    run.kind = method;
    run.batch_size = std::min(run.batch_size, ds.train->size());

    MethodOutcome out;
    out.hp = hp;
    auto eval_params = [&](const ParamVector& w, const Dataset& data) {
        return evaluate(predict(model, w, data.features, data.labels), cfg.eval.bins,
                        cfg.eval.mean_per_class);
    };
    auto eval_samples = [&](const SampleSet& s, const Dataset& data) {
        return evaluate(bma_predict(model, s, data.features, data.labels), cfg.eval.bins,
                        cfg.eval.mean_per_class);
    };

    if (method == SamplerKind::sgd_map) {
        const ParamVector w = run_map(target, run, init, derive_seed(seed, "map"));
        out.val = eval_params(w, *ds.val);
        out.test = eval_params(w, *ds.test);
        if (ds.shifted) out.shifted = eval_params(w, *ds.shifted);
        if (map_out) *map_out = w;
    } else {
        const SampleSet samples =
            run_sampling(target, run, init, derive_seed(seed, "chains"), cfg.threads);
        out.val = eval_samples(samples, *ds.val);
        out.test = eval_samples(samples, *ds.test);
        if (ds.shifted) out.shifted = eval_samples(samples, *ds.shifted);
        if (samples_out) *samples_out = samples;
    }
    out.runtime_s = seconds_since(t0);
    return out;
}

TunedOutcome tune_method(const ExperimentConfig& cfg, const Downstream& ds,
                         const LowRankGaussian* fe_prior, const ParamVector* transfer_init,
                         SamplerKind method, PriorMode mode, uint64_t seed) {
    std::vector<HyperParams> grid;
    auto sorted = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v;
    };
    if (mode == PriorMode::learned) {
        for (double lam : sorted(cfg.prior.lambda_grid)) {
            for (double hv : sorted(cfg.prior.head_variance_grid)) {
                grid.push_back({lam, hv, 1.0});
            }
        }
    } else if (mode == PriorMode::learned_mean_iso) {
        for (double fv : sorted(cfg.prior.feature_variance_grid)) {
            for (double hv : sorted(cfg.prior.head_variance_grid)) {
                grid.push_back({1.0, hv, fv});
            }
        }
    } else {
        for (double fv : sorted(cfg.prior.feature_variance_grid)) {
            grid.push_back({1.0, fv, fv});
        }
    }

    std::vector<MethodOutcome> outcomes(grid.size());
    parallel_for(static_cast<int>(grid.size()), cfg.threads, [&](int i) {
        // One fixed inference seed per trial: grid points differ only in hp.
        // A grid point whose chains diverge is infeasible, not fatal: it gets
        // the worst possible validation error and loses the selection.
        try {
            outcomes[i] =
                run_method(cfg, ds, fe_prior, transfer_init, method, mode, grid[i], seed);
        } catch (const DivergenceError&) {
            MethodOutcome& o = outcomes[i];
            o.hp = grid[i];
            o.val.error = o.test.error = 1.0;
            o.val.ece = o.test.ece = 1.0;
            o.val.nll = o.test.nll = std::numeric_limits<double>::infinity();
        }
    });

    TunedOutcome out;
    size_t best = 0;
    for (size_t i = 0; i < grid.size(); ++i) {
        out.rows.push_back({grid[i], outcomes[i].val.error, outcomes[i].val.nll});
        if (outcomes[i].val.error < outcomes[best].val.error) best = i;  // ties keep earlier point
    }
    out.best = outcomes[best];
    return out;
}

MethodOutcome run_sgd_ensemble(const ExperimentConfig& cfg, const Downstream& ds,
                               const ParamVector& transfer_init, int members, HyperParams hp,
                               uint64_t seed) {
    if (members < 1) throw ConfigError("ensemble: members must be >= 1");
    std::vector<uint64_t> member_seeds;
    for (int m = 0; m < members; ++m) {
        member_seeds.push_back(derive_seed(seed, "member-" + std::to_string(m)));
    }
    return run_sgd_ensemble(cfg, ds, transfer_init, member_seeds, hp);
}

MethodOutcome run_sgd_ensemble(const ExperimentConfig& cfg, const Downstream& ds,
                               const ParamVector& transfer_init,
                               const std::vector<uint64_t>& member_seeds, HyperParams hp) {
    if (member_seeds.empty()) throw ConfigError("ensemble: members must be >= 1");
    const int members = static_cast<int>(member_seeds.size());

    const auto t0 = Clock::now();
    const MlpModel& model = *ds.model;
    const CompositePrior prior =
        build_downstream_prior(model, PriorMode::transfer_init, nullptr, hp);
    SamplerConfig run = cfg.inference.sampler_config();
    run.kind = SamplerKind::sgd_map;
    run.batch_size = std::min(run.batch_size, ds.train->size());

    std::vector<ParamVector> fits(members);
    parallel_for(members, cfg.threads, [&](int m) {
        ParamVector init = transfer_init;
        if (cfg.inference.init_jitter_sd > 0) {
            RngStream rng(derive_seed(member_seeds[m], "init-jitter"));
            for (double& v : init) v += cfg.inference.init_jitter_sd * rng.normal();
        }
        PosteriorTarget target(model, ds.train->features, ds.train->labels,
                               LossKind::cross_entropy(), prior);
        fits[m] = run_map(target, run, init, derive_seed(member_seeds[m], "map"));
    });

    auto averaged = [&](const Dataset& data) {
        Matrix acc(data.size(), model.output_dim(), 0.0);
        for (const auto& w : fits) {
            Matrix probs = forward(model, w, data.features);
            softmax_rows(probs);
            for (size_t i = 0; i < acc.size(); ++i) acc.data()[i] += probs.data()[i];
        }
        for (size_t i = 0; i < acc.size(); ++i) acc.data()[i] /= members;
        return evaluate(PredictionSet{std::move(acc), data.labels}, cfg.eval.bins,
                        cfg.eval.mean_per_class);
    };

    MethodOutcome out;
    out.hp = hp;
    out.val = averaged(*ds.val);
    out.test = averaged(*ds.test);
    if (ds.shifted) out.shifted = averaged(*ds.shifted);
    out.runtime_s = seconds_since(t0);
    return out;
}

ParamVector fit_linear_probe(const MlpModel& model, const ParamVector& base, const Dataset& train,
                             double l2, int steps, double step_size) {
    const Matrix features = forward_features(model, base, train.features);
    const int h = features.cols();
    const int k = model.output_dim();

    // Softmax regression on the frozen features via a one-layer model.
    const MlpModel head_model = make_mlp({h, k}, model.activation);
    ParamVector head(head_model.layout.total_dim, 0.0);
    ParamVector velocity(head.size(), 0.0);
    Batch batch{features, train.labels, std::nullopt};
    for (int t = 1; t <= steps; ++t) {
        LossGrad lg = loss_and_grad(head_model, head, batch, LossKind::cross_entropy());
        for (size_t i = 0; i < head.size(); ++i) lg.grad[i] += l2 * head[i];
        const double eta = cyclical_step_size(t, steps, step_size, 1);
        step_sgd(head, velocity, lg.grad, eta, 0.9);
    }

    ParamVector out = base;
    const std::string prefix = "layer" + std::to_string(model.layer_count() - 1);
    write_block(out, model.layout.block(prefix + ".weight"),
                read_block(head, head_model.layout.block("layer0.weight")));
    write_block(out, model.layout.block(prefix + ".bias"),
                read_block(head, head_model.layout.block("layer0.bias")));
    return out;
}

double accuracy(const MlpModel& model, const ParamVector& params, const Dataset& ds) {
    const Matrix logits = forward(model, params, ds.features);
    int correct = 0;
    for (int i = 0; i < ds.size(); ++i) {
        const double* row = logits.row(i);
        int arg = 0;
        for (int c = 1; c < logits.cols(); ++c)
            if (row[c] > row[arg]) arg = c;
        if (arg == ds.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / ds.size();
}

// ---- CLI commands -----------------------------------------------------------

namespace {

namespace fs = std::filesystem;

std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
    fs::create_directories(cfg.out_dir);
    return (fs::path(cfg.out_dir) / name).string();
}

class CsvWriter {
public:
    CsvWriter(const ExperimentConfig& cfg, uint64_t seed, const std::string& path)
        : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open '" + path + "' for writing");
        char prov[128];
        std::snprintf(prov, sizeof(prov), "# bayestl v%s config=%016llx seed=%llu\n", kVersion,
                      static_cast<unsigned long long>(cfg.config_hash()),
                      static_cast<unsigned long long>(seed));
        out_ << prov;
    }
    CsvWriter& header(const std::string& line) {
        out_ << line << "\n";
        return *this;
    }
    CsvWriter& row(const std::string& line) {
        out_ << line << "\n";
        return *this;
    }
    void close() {
        out_.flush();
        if (!out_) throw IoError("write failure on '" + path_ + "'");
    }

private:
    std::string path_;
    std::ofstream out_;
};

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string metric_row(const std::string& method, int n_train, uint64_t seed,
                       const EvalReport& report, double runtime_s) {
    return method + "," + std::to_string(n_train) + "," + std::to_string(seed) + "," +
           fmt(report.error) + "," + fmt(report.nll) + "," + fmt(report.ece) + "," +
           fmt(runtime_s);
}

struct LoadedArtifacts {
    TransferPair data;
    MlpModel source_model;
    MlpModel target_model;
    Checkpoint checkpoint;
    std::optional<PriorBundle> bundle;
    ParamVector transfer_init;

    bool has_bundle() const { return bundle.has_value(); }
    const LowRankGaussian* fe_prior() const { return bundle ? &bundle->prior : nullptr; }
};

LoadedArtifacts load_artifacts(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                               const std::string& prior_path) {
    LoadedArtifacts a;
    a.data = load_task(cfg);
    const int d_in = a.data.source.dim();
    a.source_model = make_source_model(cfg, d_in, a.data.source.num_classes());
    a.target_model = make_target_model(cfg, d_in, dataset_classes(a.data));

    if (!checkpoint_path.empty()) {
        a.checkpoint = load_checkpoint(checkpoint_path);
        if (a.checkpoint.layout.total_dim != a.source_model.layout.total_dim) {
            throw DimensionError("checkpoint '" + checkpoint_path + "' has " +
                                 std::to_string(a.checkpoint.layout.total_dim) +
                                 " parameters, model expects " +
                                 std::to_string(a.source_model.layout.total_dim));
        }
        a.transfer_init = make_transfer_init(a.source_model, a.checkpoint.params, a.target_model);
    }
    if (!prior_path.empty()) {
        a.bundle = load_prior_bundle(prior_path);
        const int fe_len = a.target_model.layout.group_length(a.bundle->group);
        if (fe_len != a.bundle->prior.dim()) {
            throw DimensionError("prior bundle '" + prior_path + "' covers " +
                                 std::to_string(a.bundle->prior.dim()) +
                                 " parameters, model group '" + a.bundle->group + "' has " +
                                 std::to_string(fe_len));
        }
    }
    return a;
}

HyperParams config_hyperparams(const ExperimentConfig& cfg) {
    HyperParams hp;
    hp.lambda = cfg.prior.lambda.value_or(1.0);
    hp.head_variance = cfg.prior.head_variance.value_or(1.0);
    hp.feature_variance = cfg.prior.feature_variance.value_or(1.0);
    return hp;
}

std::string method_label(const ExperimentConfig& cfg) {
    return std::string(sampler_kind_name(cfg.inference.method)) + "_" +
           prior_mode_name(cfg.inference.prior_mode);
}

}  // namespace

void cmd_pretrain(const ExperimentConfig& cfg, uint64_t seed) {
    const TransferPair data = load_task(cfg);
    const MlpModel source_model =
        make_source_model(cfg, data.source.dim(), data.source.num_classes());
    std::vector<TraceRow> trace;
    const ParamVector checkpoint = pretrain_source(cfg, data.source, source_model, seed, &trace);
    save_checkpoint(out_path(cfg, "checkpoint.bin"), checkpoint, source_model.layout);

    CsvWriter csv(cfg, seed, out_path(cfg, "pretrain_trace.csv"));
    csv.header("step,energy,step_size");
    for (const auto& row : trace) {
        csv.row(std::to_string(row.step) + "," + fmt(row.energy) + "," + fmt(row.step_size));
    }
    csv.close();
}

void cmd_fit_prior(const ExperimentConfig& cfg, const std::string& checkpoint_path, uint64_t seed) {
    LoadedArtifacts a = load_artifacts(cfg, checkpoint_path, "");
    const LowRankGaussian prior =
        fit_feature_prior(cfg, a.data.source, a.source_model, a.checkpoint.params, seed);
    save_prior_bundle(out_path(cfg, "prior.bin"),
                      {prior, a.source_model.layout, "feature_extractor"});
}

void cmd_rescale_sweep(const ExperimentConfig& cfg, const std::string& prior_path,
                       const std::string& checkpoint_path, uint64_t seed) {
    LoadedArtifacts a = load_artifacts(cfg, checkpoint_path, prior_path);
    auto [train, val] = seed_target_data(cfg, seed);
    Downstream ds{&a.target_model, &train, &val, &a.data.target_test, nullptr};

    const TunedOutcome tuned = tune_method(cfg, ds, a.fe_prior(),
                                           a.transfer_init.empty() ? nullptr : &a.transfer_init,
                                           cfg.inference.method, PriorMode::learned, seed);

    CsvWriter csv(cfg, seed, out_path(cfg, "sweep.csv"));
    csv.header("lambda,head_variance,val_error,val_nll");
    for (const auto& row : tuned.rows) {
        csv.row(fmt(row.hp.lambda) + "," + fmt(row.hp.head_variance) + "," + fmt(row.val_error) +
                "," + fmt(row.val_nll));
    }
    csv.close();
    std::printf("selected lambda=%g head_variance=%g (val_error=%g)\n", tuned.best.hp.lambda,
                tuned.best.hp.head_variance, tuned.best.val.error);
}

void cmd_infer(const ExperimentConfig& cfg, const CliPaths& paths, std::optional<double> lambda,
               std::optional<double> head_variance, uint64_t seed) {
    LoadedArtifacts a = load_artifacts(cfg, paths.checkpoint, paths.prior);
    auto [train, val] = seed_target_data(cfg, seed);
    const Dataset* shifted =
        cfg.eval.shifted_test && a.data.target_shifted_test.size() > 0 ? &a.data.target_shifted_test
                                                                       : nullptr;
    Downstream ds{&a.target_model, &train, &val, &a.data.target_test, shifted};

    HyperParams hp = config_hyperparams(cfg);
    if (lambda.has_value()) hp.lambda = *lambda;
    if (head_variance.has_value()) hp.head_variance = *head_variance;

    SampleSet samples;
    ParamVector map_params;
    const MethodOutcome outcome = run_method(
        cfg, ds, a.fe_prior(), a.transfer_init.empty() ? nullptr : &a.transfer_init,
        cfg.inference.method, cfg.inference.prior_mode, hp, seed, &samples, &map_params);

    CsvWriter csv(cfg, seed, out_path(cfg, "metrics.csv"));
    csv.header("method,n_train,seed,error,nll,ece,runtime_s");
    csv.row(metric_row(method_label(cfg), train.size(), seed, outcome.test, outcome.runtime_s));
    if (outcome.shifted.has_value()) {
        csv.row(metric_row(method_label(cfg) + "+shift", train.size(), seed, *outcome.shifted,
                           outcome.runtime_s));
    }
    csv.close();

    if (cfg.inference.method == SamplerKind::sgd_map) {
        save_checkpoint(out_path(cfg, "map_checkpoint.bin"), map_params, a.target_model.layout);
    } else {
        save_samples(out_path(cfg, "samples.bin"), samples);
    }
}

void cmd_analyze(const ExperimentConfig& cfg, const std::string& prior_path,
                 const std::string& checkpoint_path, uint64_t seed) {
    LoadedArtifacts a = load_artifacts(cfg, checkpoint_path, prior_path);
    if (!a.has_bundle()) throw ConfigError("analyze: requires a prior bundle");
    const LowRankGaussian& prior = a.bundle->prior;

    // Scan base: feature extractor at the prior mean, linear head fitted on
    // frozen features.
    ParamVector base(a.target_model.layout.total_dim, 0.0);
    {
        const std::vector<int> idx = a.target_model.layout.group_indices("feature_extractor");
        for (size_t i = 0; i < idx.size(); ++i) base[idx[i]] = prior.mean()[i];
        base = fit_linear_probe(a.target_model, base, a.data.target_train, 1e-3,
                                cfg.analyze.probe_steps, 0.5);
    }

    std::vector<double> grid;
    for (int i = -cfg.analyze.scan_grid_points; i <= cfg.analyze.scan_grid_points; ++i) {
        grid.push_back(cfg.analyze.scan_max_distance * i / cfg.analyze.scan_grid_points);
    }
    const int k = std::min(cfg.analyze.scan_directions, prior.rank());
    const DirectionSet top = top_singular_directions(prior, k);
    const DirectionSet rnd = random_directions(prior.dim(), cfg.analyze.scan_random_directions,
                                               derive_seed(seed, "scan-dirs"));

    // Directions live on the feature extractor; embed into full layout.
    auto embed = [&](const DirectionSet& dirs) {
        DirectionSet out;
        out.origin = dirs.origin;
        const std::vector<int> idx = a.target_model.layout.group_indices("feature_extractor");
        for (const auto& d : dirs.directions) {
            ParamVector full(a.target_model.layout.total_dim, 0.0);
            for (size_t i = 0; i < idx.size(); ++i) full[idx[i]] = d[i];
            out.directions.push_back(std::move(full));
        }
        return out;
    };

    CsvWriter scan_csv(cfg, seed, out_path(cfg, "scan.csv"));
    scan_csv.header("direction_kind,direction_index,t,loss");
    for (const DirectionSet* dirs : {&top, &rnd}) {
        const DirectionSet full = embed(*dirs);
        const ScanResult scan =
            perturbation_scan(a.target_model, base, full, grid, a.data.target_test.features,
                              a.data.target_test.labels, true);
        for (size_t di = 0; di < full.directions.size(); ++di) {
            for (size_t gi = 0; gi < grid.size(); ++gi) {
                scan_csv.row(full.origin + "," + std::to_string(di) + "," + fmt(grid[gi]) + "," +
                             fmt(scan.losses(static_cast<int>(di), static_cast<int>(gi))));
            }
        }
    }
    scan_csv.close();

    // Downstream runner for the ablations: learned-prior inference at the
    // configured hyperparameters, fresh trial data per seed.
    const HyperParams hp = config_hyperparams(cfg);
    auto runner = [&](const LowRankGaussian& p, uint64_t run_seed) {
        auto [train, val] = seed_target_data(cfg, run_seed);
        Downstream ds{&a.target_model, &train, &val, &a.data.target_test, nullptr};
        HyperParams local = hp;
        local.lambda = 1.0;  // the sweep pre-scales the prior
        try {
            const MethodOutcome r =
                run_method(cfg, ds, &p, a.transfer_init.empty() ? nullptr : &a.transfer_init,
                           cfg.inference.method, PriorMode::learned, local, run_seed);
            return r.test.error;
        } catch (const DivergenceError&) {
            return 1.0;  // infeasible point: chains diverge at this scale
        }
    };

    std::vector<int> ranks = cfg.analyze.ranks;
    if (ranks.empty()) {
        for (int r = 0; r <= prior.rank();) {
            ranks.push_back(r);
            r = r == 0 ? 1 : 2 * r;
        }
        if (ranks.back() != prior.rank()) ranks.push_back(prior.rank());
    }
    const LowRankGaussian scaled = prior.rescaled(hp.lambda);
    const auto rank_table = rank_ablation(scaled, ranks, cfg.seeds, runner);
    CsvWriter rank_csv(cfg, seed, out_path(cfg, "rank_ablation.csv"));
    rank_csv.header("rank,mean_error,se_error,runs");
    for (const auto& p : rank_table) {
        rank_csv.row(std::to_string(static_cast<int>(p.key)) + "," + fmt(p.mean_error) + "," +
                     fmt(p.se_error) + "," + std::to_string(p.runs));
    }
    rank_csv.close();

    const auto lambda_table = lambda_sweep(prior, cfg.prior.lambda_grid, cfg.seeds, runner);
    CsvWriter lambda_csv(cfg, seed, out_path(cfg, "lambda_sweep.csv"));
    lambda_csv.header("lambda,mean_error,se_error,runs");
    for (const auto& p : lambda_table) {
        lambda_csv.row(fmt(p.key) + "," + fmt(p.mean_error) + "," + fmt(p.se_error) + "," +
                       std::to_string(p.runs));
    }
    lambda_csv.close();
}

void cmd_ensemble(const ExperimentConfig& cfg, const std::string& checkpoint_path, int members,
                  uint64_t seed) {
    LoadedArtifacts a = load_artifacts(cfg, checkpoint_path, "");
    auto [train, val] = seed_target_data(cfg, seed);
    const Dataset* shifted =
        cfg.eval.shifted_test && a.data.target_shifted_test.size() > 0 ? &a.data.target_shifted_test
                                                                       : nullptr;
    Downstream ds{&a.target_model, &train, &val, &a.data.target_test, shifted};

    const MethodOutcome outcome =
        run_sgd_ensemble(cfg, ds, a.transfer_init, members, config_hyperparams(cfg), seed);

    CsvWriter csv(cfg, seed, out_path(cfg, "metrics.csv"));
    csv.header("method,n_train,seed,error,nll,ece,runtime_s");
    const std::string label = "ensemble" + std::to_string(members) + "_transfer_init";
    csv.row(metric_row(label, train.size(), seed, outcome.test, outcome.runtime_s));
    if (outcome.shifted.has_value()) {
        csv.row(metric_row(label + "+shift", train.size(), seed, *outcome.shifted,
                           outcome.runtime_s));
    }
    csv.close();
}

void cmd_evaluate(const ExperimentConfig& cfg, const CliPaths& paths, uint64_t seed) {
    LoadedArtifacts a = load_artifacts(cfg, "", "");
    const Dataset& test = a.data.target_test;
    const Dataset* shifted =
        cfg.eval.shifted_test && a.data.target_shifted_test.size() > 0 ? &a.data.target_shifted_test
                                                                       : nullptr;

    EvalReport report;
    std::optional<EvalReport> shifted_report;
    std::string label;
    if (!paths.samples.empty()) {
        const SampleSet samples = load_samples(paths.samples);
        report = evaluate(bma_predict(a.target_model, samples, test.features, test.labels),
                          cfg.eval.bins, cfg.eval.mean_per_class);
        if (shifted) {
            shifted_report =
                evaluate(bma_predict(a.target_model, samples, shifted->features, shifted->labels),
                         cfg.eval.bins, cfg.eval.mean_per_class);
        }
        label = "bma_samples";
    } else if (!paths.checkpoint.empty()) {
        const Checkpoint ck = load_checkpoint(paths.checkpoint);
        if (ck.layout.total_dim != a.target_model.layout.total_dim) {
            throw DimensionError("evaluate: checkpoint has " + std::to_string(ck.layout.total_dim) +
                                 " parameters, target model expects " +
                                 std::to_string(a.target_model.layout.total_dim));
        }
        report = evaluate(predict(a.target_model, ck.params, test.features, test.labels),
                          cfg.eval.bins, cfg.eval.mean_per_class);
        if (shifted) {
            shifted_report =
                evaluate(predict(a.target_model, ck.params, shifted->features, shifted->labels),
                         cfg.eval.bins, cfg.eval.mean_per_class);
        }
        label = "map_checkpoint";
    } else {
        throw ConfigError("evaluate: need --samples or --checkpoint");
    }

    CsvWriter csv(cfg, seed, out_path(cfg, "metrics.csv"));
    csv.header("method,n_train,seed,error,nll,ece,runtime_s");
    csv.row(metric_row(label, 0, seed, report, 0.0));
    if (shifted_report.has_value()) {
        csv.row(metric_row(label + "+shift", 0, seed, *shifted_report, 0.0));
    }
    csv.close();
}

void save_samples(const std::string& path, const SampleSet& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    const char magic[8] = {'B', 'S', 'A', 'M', 'P', 'L', '1', '\0'};
    out.write(magic, 8);
    auto u32 = [&](uint32_t v) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        out.write(b, 4);
    };
    auto f64 = [&](double v) {
        uint64_t u;
        static_assert(sizeof(u) == sizeof(v));
        std::memcpy(&u, &v, 8);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xff);
        out.write(b, 8);
    };
    const int dim = samples.size() > 0 ? static_cast<int>(samples.samples[0].params.size()) : 0;
    u32(1);  // version
    u32(static_cast<uint32_t>(dim));
    u32(static_cast<uint32_t>(samples.size()));
    for (const auto& s : samples.samples) {
        u32(static_cast<uint32_t>(s.chain_id));
        u32(static_cast<uint32_t>(s.step_index));
        for (double v : s.params) f64(v);
    }
    out.flush();
    if (!out) throw IoError("write failure on '" + path + "'");
}

SampleSet load_samples(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    auto need = [&](void* p, size_t n) {
        in.read(static_cast<char*>(p), n);
        if (static_cast<size_t>(in.gcount()) != n) throw ParseError("'" + path + "': truncated");
    };
    char magic[8];
    need(magic, 8);
    const char expected[8] = {'B', 'S', 'A', 'M', 'P', 'L', '1', '\0'};
    if (std::memcmp(magic, expected, 8) != 0) {
        throw ParseError("'" + path + "': not a sample container");
    }
    auto u32 = [&]() {
        unsigned char b[4];
        need(b, 4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
        return v;
    };
    auto f64 = [&]() {
        unsigned char b[8];
        need(b, 8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
        double d;
        std::memcpy(&d, &v, 8);
        return d;
    };
    const uint32_t version = u32();
    if (version != 1) throw ParseError("'" + path + "': unsupported sample container version");
    const uint32_t dim = u32();
    const uint32_t count = u32();
    SampleSet set;
    for (uint32_t i = 0; i < count; ++i) {
        SampleEntry e;
        e.chain_id = static_cast<int>(u32());
        e.step_index = static_cast<int>(u32());
        e.params.resize(dim);
        for (auto& v : e.params) v = f64();
        set.samples.push_back(std::move(e));
    }
    return set;
}

}  // namespace btl
