#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "btl/errors.hpp"
#include "btl/pipeline.hpp"
#include "oracles.hpp"

using namespace btl;

namespace {

ExperimentConfig tiny_config() {
    ExperimentConfig cfg = parse_config(R"({
        "task": {"dim": 4, "active_dims": 2, "source_classes": 3, "target_classes": 3,
                 "cluster_sd": 0.3, "shift": 0.4,
                 "n_source": 120, "n_target_train": 24, "n_target_val": 60,
                 "n_target_test": 120, "n_shifted_test": 60,
                 "source_seed": 5, "target_seed": 6},
        "model": {"hidden": [6], "activation": "tanh"},
        "pretrain": {"steps": 400, "step_size": 2e-3, "batch_size": 30, "prior_variance": 50.0},
        "swag": {"steps": 240, "step_size": 1e-3, "batch_size": 30, "cycles": 4,
                 "snapshot_interval": 3, "max_rank": 6, "total_snapshots": 12},
        "prior": {"lambda_grid": [1, 10, 100], "head_variance_grid": [0.1, 1.0],
                  "feature_variance_grid": [0.01, 0.1, 1.0]},
        "inference": {"steps": 400, "batch_size": 12, "chains": 2, "samples_per_chain": 2,
                      "cycles": 1, "temperature": 0.01, "step_size": 3e-5,
                      "sample_phase_fraction": 0.5},
        "seeds": [0, 1],
        "out_dir": "BTL_TEST_OUT"
    })",
                                        "inline");
    return cfg;
}

struct Fixture {
    ExperimentConfig cfg;
    TransferPair data;
    MlpModel source_model;
    MlpModel target_model;
    ParamVector checkpoint;
    LowRankGaussian fe_prior;
    ParamVector transfer_init;

    static Fixture make() {
        ExperimentConfig cfg = tiny_config();
        TransferPair data = load_task(cfg);
        MlpModel source_model = make_source_model(cfg, data.source.dim(), data.source.num_classes());
        MlpModel target_model = make_target_model(cfg, data.source.dim(), 3);
        ParamVector checkpoint = pretrain_source(cfg, data.source, source_model, 42);
        LowRankGaussian fe_prior =
            fit_feature_prior(cfg, data.source, source_model, checkpoint, 42);
        ParamVector transfer_init = make_transfer_init(source_model, checkpoint, target_model);
        return {std::move(cfg),        std::move(data),     std::move(source_model),
                std::move(target_model), std::move(checkpoint), std::move(fe_prior),
                std::move(transfer_init)};
    }

    Downstream downstream() const {
        return {&target_model, &data.target_train, &data.target_val, &data.target_test,
                &data.target_shifted_test};
    }
};

const Fixture& fixture() {
    static const Fixture f = Fixture::make();
    return f;
}

}  // namespace

TEST_CASE("pretrain_source: deterministic and better than init") {
    const Fixture& f = fixture();
    std::vector<TraceRow> trace;
    const ParamVector again =
        pretrain_source(f.cfg, f.data.source, f.source_model, 42, &trace);
    CHECK(again == f.checkpoint);
    REQUIRE(trace.size() == 400);
    // minibatch energy estimates are noisy; compare averaged head and tail
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 20; ++i) {
        head += trace[i].energy / 20.0;
        tail += trace[trace.size() - 1 - i].energy / 20.0;
    }
    CHECK(tail < head);

    const double acc = accuracy(f.source_model, f.checkpoint, f.data.source);
    CHECK(acc > 0.8);
}

TEST_CASE("fit_feature_prior: covers the feature extractor with sane spread") {
    const Fixture& f = fixture();
    const int fe_len = f.source_model.layout.group_length("feature_extractor");
    CHECK(f.fe_prior.dim() == fe_len);
    CHECK(f.fe_prior.rank() == f.cfg.swag.max_rank);
    CHECK(f.fe_prior.scale() == 1.0);
    for (double v : f.fe_prior.diag_var()) CHECK(v >= 1e-8);

    // the SWA mean is a decent source solution: a probe on top of it works
    ParamVector at_mean(f.target_model.layout.total_dim, 0.0);
    const auto idx = f.target_model.layout.group_indices("feature_extractor");
    for (size_t i = 0; i < idx.size(); ++i) at_mean[idx[i]] = f.fe_prior.mean()[i];
    const ParamVector probed =
        fit_linear_probe(f.target_model, at_mean, f.data.target_train, 1e-3, 300, 0.5);
    CHECK(accuracy(f.target_model, probed, f.data.target_test) > 0.5);
}

TEST_CASE("make_transfer_init: feature extractor copied, head zero") {
    const Fixture& f = fixture();
    const auto fe_idx = f.target_model.layout.group_indices("feature_extractor");
    const auto src_idx = f.source_model.layout.group_indices("feature_extractor");
    REQUIRE(fe_idx.size() == src_idx.size());
    for (size_t i = 0; i < fe_idx.size(); ++i) {
        CHECK(f.transfer_init[fe_idx[i]] == f.checkpoint[src_idx[i]]);
    }
    for (int i : f.target_model.layout.group_indices("head")) {
        CHECK(f.transfer_init[i] == 0.0);
    }
}

TEST_CASE("probe difficulty: source-frozen probe accuracy drops as shift grows") {
    const Fixture& f = fixture();
    double prev = 1.0;
    ParamVector base(f.target_model.layout.total_dim, 0.0);
    const auto idx = f.target_model.layout.group_indices("feature_extractor");
    for (size_t i = 0; i < idx.size(); ++i) base[idx[i]] = f.fe_prior.mean()[i];

    for (double shift : {0.0, 0.8, 1.6}) {
        TransferSpec spec = f.cfg.task.spec;
        spec.shift = shift;
        spec.n_target_train = 120;
        spec.n_target_test = 400;
        const TransferPair pair = make_transfer_pair(spec);
        const ParamVector probed =
            fit_linear_probe(f.target_model, base, pair.target_train, 1e-3, 300, 0.5);
        const double acc = accuracy(f.target_model, probed, pair.target_test);
        CHECK(acc <= prev + 0.02);
        prev = acc;
    }
}

TEST_CASE("run_method: deterministic per seed across prior modes") {
    const Fixture& f = fixture();
    const Downstream ds = f.downstream();
    for (PriorMode mode : {PriorMode::learned, PriorMode::learned_mean_iso,
                           PriorMode::zero_mean_iso, PriorMode::transfer_init}) {
        const HyperParams hp{100.0, 0.5, 0.1};
        const MethodOutcome a = run_method(f.cfg, ds, &f.fe_prior, &f.transfer_init,
                                           SamplerKind::sghmc, mode, hp, 7);
        const MethodOutcome b = run_method(f.cfg, ds, &f.fe_prior, &f.transfer_init,
                                           SamplerKind::sghmc, mode, hp, 7);
        CHECK(a.test.error == b.test.error);
        CHECK(a.test.nll == b.test.nll);
        CHECK(a.shifted.has_value());
    }
}

TEST_CASE("run_method: map mode returns the optimized parameters") {
    const Fixture& f = fixture();
    const Downstream ds = f.downstream();
    ParamVector map_params;
    ExperimentConfig cfg = f.cfg;
    cfg.inference.step_size = 1e-3;  // non-learned priors are not stiff
    const MethodOutcome out =
        run_method(cfg, ds, &f.fe_prior, &f.transfer_init, SamplerKind::sgd_map,
                   PriorMode::transfer_init, HyperParams{1.0, 1.0, 0.1}, 3, nullptr, &map_params);
    CHECK(map_params.size() == static_cast<size_t>(f.target_model.layout.total_dim));
    CHECK(out.test.error <= 0.5);  // far better than chance on a 3-class task
}

TEST_CASE("tune_method: picks the best validation row, ties to the smaller point") {
    const Fixture& f = fixture();
    const Downstream ds = f.downstream();
    const TunedOutcome tuned = tune_method(f.cfg, ds, &f.fe_prior, &f.transfer_init,
                                           SamplerKind::sgd_map, PriorMode::learned, 5);
    CHECK(tuned.rows.size() == 6);  // 3 lambdas x 2 head variances
    double best = 1e9;
    for (const auto& row : tuned.rows) best = std::min(best, row.val_error);
    CHECK(tuned.best.val.error == best);
    // rows are emitted in ascending (lambda, head_variance) order
    CHECK(tuned.rows[0].hp.lambda <= tuned.rows.back().hp.lambda);
}

TEST_CASE("ensemble: identical member seeds collapse to the single model") {
    const Fixture& f = fixture();
    const Downstream ds = f.downstream();
    const HyperParams hp{1.0, 0.1, 0.1};
    const MethodOutcome one = run_sgd_ensemble(f.cfg, ds, f.transfer_init, {99, 99}, hp);
    const MethodOutcome single = run_sgd_ensemble(f.cfg, ds, f.transfer_init, {99}, hp);
    CHECK(one.test.error == single.test.error);
    CHECK(one.test.nll == doctest::Approx(single.test.nll).epsilon(1e-12));
    CHECK_THROWS_AS(run_sgd_ensemble(f.cfg, ds, f.transfer_init, {}, hp), ConfigError);
}

TEST_CASE("cli commands: full chain writes deterministic artifacts") {
    namespace fs = std::filesystem;
    ExperimentConfig cfg = fixture().cfg;
    cfg.out_dir = (fs::temp_directory_path() / "btl_cli_test").string();
    fs::remove_all(cfg.out_dir);

    cmd_pretrain(cfg, 0);
    const std::string ck = cfg.out_dir + "/checkpoint.bin";
    REQUIRE(fs::exists(ck));
    REQUIRE(fs::exists(cfg.out_dir + "/pretrain_trace.csv"));

    cmd_fit_prior(cfg, ck, 0);
    const std::string prior = cfg.out_dir + "/prior.bin";
    REQUIRE(fs::exists(prior));

    cfg.prior.lambda = 100.0;
    cfg.prior.head_variance = 0.5;
    cfg.prior.feature_variance = 0.1;
    CliPaths paths;
    paths.checkpoint = ck;
    paths.prior = prior;
    cmd_infer(cfg, paths, std::nullopt, std::nullopt, 0);
    REQUIRE(fs::exists(cfg.out_dir + "/metrics.csv"));
    REQUIRE(fs::exists(cfg.out_dir + "/samples.bin"));

    // metrics has a provenance comment, a header, and a data row
    std::ifstream in(cfg.out_dir + "/metrics.csv");
    std::string provenance, header, row;
    std::getline(in, provenance);
    std::getline(in, header);
    std::getline(in, row);
    CHECK(provenance.rfind("# bayestl", 0) == 0);
    CHECK(provenance.find("config=") != std::string::npos);
    CHECK(header == "method,n_train,seed,error,nll,ece,runtime_s");
    CHECK(row.rfind("sghmc_learned,24,0,", 0) == 0);

    // reruns are byte-identical for the deterministic artifacts
    auto bytes = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    };
    const std::string ck_bytes = bytes(ck);
    const std::string prior_bytes = bytes(prior);
    cmd_pretrain(cfg, 0);
    cmd_fit_prior(cfg, ck, 0);
    CHECK(bytes(ck) == ck_bytes);
    CHECK(bytes(prior) == prior_bytes);

    // evaluate the samples we just wrote
    CliPaths eval_paths;
    eval_paths.samples = cfg.out_dir + "/samples.bin";
    cmd_evaluate(cfg, eval_paths, 0);
    REQUIRE(fs::exists(cfg.out_dir + "/metrics.csv"));

    fs::remove_all(cfg.out_dir);
}

TEST_CASE("cli commands: rescale sweep emits every grid row") {
    namespace fs = std::filesystem;
    ExperimentConfig cfg = fixture().cfg;
    cfg.out_dir = (fs::temp_directory_path() / "btl_sweep_test").string();
    fs::remove_all(cfg.out_dir);

    cmd_pretrain(cfg, 1);
    cmd_fit_prior(cfg, cfg.out_dir + "/checkpoint.bin", 1);
    cmd_rescale_sweep(cfg, cfg.out_dir + "/prior.bin", cfg.out_dir + "/checkpoint.bin", 1);

    std::ifstream in(cfg.out_dir + "/sweep.csv");
    REQUIRE(in);
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] != '#') ++rows;
    }
    CHECK(rows == 1 + 6);  // header + 3 lambdas x 2 head variances
    fs::remove_all(cfg.out_dir);
}
