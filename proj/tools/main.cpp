#include <cstdio>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "btl/errors.hpp"
#include "btl/pipeline.hpp"

namespace {

struct GlobalArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::string out_dir;
    int threads = 0;
};

btl::ExperimentConfig load(const GlobalArgs& g) {
    btl::ExperimentConfig cfg = btl::load_config(g.config_path);
    if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
    if (g.threads > 0) cfg.threads = g.threads;
    cfg.validate();
    return cfg;
}

uint64_t pick_seed(const GlobalArgs& g, const btl::ExperimentConfig& cfg) {
    return g.seed.value_or(cfg.seeds.front());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bayesian transfer learning with learned priors"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "experiment config JSON")->required();
    uint64_t seed_value = 0;
    bool seed_set = false;
    app.add_option("--seed", seed_value, "override the first config seed")
        ->each([&](const std::string&) { seed_set = true; });
    app.add_option("--out-dir", g.out_dir, "override the output directory");
    app.add_option("--threads", g.threads, "worker threads for grids and chains");

    auto* pretrain = app.add_subcommand("pretrain", "train the source model, write checkpoint.bin");

    std::string checkpoint_path;
    auto* fit_prior = app.add_subcommand("fit-prior", "fit the SWAG feature-extractor prior");
    fit_prior->add_option("--checkpoint", checkpoint_path, "source checkpoint")->required();

    auto* sweep = app.add_subcommand("rescale-sweep",
                                     "grid-search lambda and head variance on validation data");
    std::string sweep_prior, sweep_checkpoint;
    sweep->add_option("--prior", sweep_prior, "prior bundle")->required();
    sweep->add_option("--checkpoint", sweep_checkpoint, "source checkpoint");

    auto* infer = app.add_subcommand("infer", "downstream MAP or MCMC inference plus evaluation");
    btl::CliPaths infer_paths;
    double lambda_flag = 0.0, head_var_flag = 0.0;
    bool lambda_set = false, head_var_set = false;
    infer->add_option("--prior", infer_paths.prior, "prior bundle");
    infer->add_option("--checkpoint", infer_paths.checkpoint, "source checkpoint");
    infer->add_option("--lambda", lambda_flag, "prior covariance scale")
        ->each([&](const std::string&) { lambda_set = true; });
    infer->add_option("--head-variance", head_var_flag, "head prior variance")
        ->each([&](const std::string&) { head_var_set = true; });

    auto* analyze = app.add_subcommand("analyze", "loss-surface scans and rank/lambda ablations");
    std::string analyze_prior, analyze_checkpoint;
    analyze->add_option("--prior", analyze_prior, "prior bundle")->required();
    analyze->add_option("--checkpoint", analyze_checkpoint, "source checkpoint");

    auto* ensemble = app.add_subcommand("ensemble", "same-init MAP ensemble evaluation");
    std::string ensemble_checkpoint;
    int members = 0;
    ensemble->add_option("--checkpoint", ensemble_checkpoint, "source checkpoint")->required();
    ensemble->add_option("-k,--members", members, "ensemble size (default from config)");

    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint or sample set");
    btl::CliPaths eval_paths;
    evaluate->add_option("--checkpoint", eval_paths.checkpoint, "MAP checkpoint to evaluate");
    evaluate->add_option("--samples", eval_paths.samples, "sample container to evaluate");

    CLI11_PARSE(app, argc, argv);
    if (seed_set) g.seed = seed_value;

    try {
        const btl::ExperimentConfig cfg = load(g);
        const uint64_t seed = pick_seed(g, cfg);
        if (pretrain->parsed()) {
            btl::cmd_pretrain(cfg, seed);
        } else if (fit_prior->parsed()) {
            btl::cmd_fit_prior(cfg, checkpoint_path, seed);
        } else if (sweep->parsed()) {
            btl::cmd_rescale_sweep(cfg, sweep_prior, sweep_checkpoint, seed);
        } else if (infer->parsed()) {
            btl::cmd_infer(cfg, infer_paths,
                           lambda_set ? std::optional<double>(lambda_flag) : std::nullopt,
                           head_var_set ? std::optional<double>(head_var_flag) : std::nullopt,
                           seed);
        } else if (analyze->parsed()) {
            btl::cmd_analyze(cfg, analyze_prior, analyze_checkpoint, seed);
        } else if (ensemble->parsed()) {
            btl::cmd_ensemble(cfg, ensemble_checkpoint, members > 0 ? members : cfg.ensemble_members,
                              seed);
        } else if (evaluate->parsed()) {
            btl::cmd_evaluate(cfg, eval_paths, seed);
        }
    } catch (const btl::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const btl::DivergenceError& e) {
        std::fprintf(stderr, "numeric divergence: %s\n", e.what());
        return 3;
    } catch (const btl::IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 4;
    } catch (const btl::ParseError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
