#pragma once

#include <optional>
#include <string>
#include <vector>

#include "btl/data.hpp"
#include "btl/param_model.hpp"
#include "btl/samplers.hpp"

namespace btl {

struct CsvTaskConfig {
    std::string source;
    std::string target_train;
    std::string target_val;
    std::string target_test;
    std::string target_shifted_test;  // optional
};

struct TaskConfig {
    bool synthetic = true;
    TransferSpec spec;
    CsvTaskConfig csv;
};

struct ModelConfig {
    std::vector<int> hidden = {16, 8};
    Activation activation = Activation::tanh;
    int embed_dim = 8;  // output width when pre-training with info_nce
};

struct PretrainConfig {
    bool info_nce = false;
    double info_nce_temperature = 0.5;
    int steps = 4000;
    double step_size = 0.05;
    double momentum = 0.9;
    int batch_size = 64;
    int cycles = 1;
    double prior_variance = 100.0;  // isotropic prior (weight decay) during pre-training
    double augment_noise_sd = 0.1;
    double augment_scale_min = 0.8;
    double augment_scale_max = 1.2;
};

struct SwagRunConfig {
    int steps = 2000;
    double step_size = 0.02;
    double momentum = 0.9;
    int batch_size = 64;
    int cycles = 4;
    int snapshot_interval = 5;
    int max_rank = 16;
    int total_snapshots = 48;
};

struct PriorConfig {
    std::vector<double> lambda_grid = {1, 3, 10, 30, 100, 300, 1e3, 1e4, 1e5};
    std::vector<double> head_variance_grid;     // default: 8 log-spaced in [1e-3, 1e1]
    std::vector<double> feature_variance_grid;  // isotropic feature-extractor priors
    std::optional<double> lambda;
    std::optional<double> head_variance;
    std::optional<double> feature_variance;

    PriorConfig();
};

// How the downstream prior/initialization is assembled.
enum class PriorMode {
    learned,            // rescaled learned prior on the feature extractor
    learned_mean_iso,   // isotropic prior centered at the learned mean
    zero_mean_iso,      // zero-mean isotropic prior, random init
    transfer_init,      // zero-mean isotropic prior, init at the pre-trained checkpoint
};

const char* prior_mode_name(PriorMode m);
PriorMode prior_mode_from_name(const std::string& name);

struct InferenceConfig {
    SamplerKind method = SamplerKind::sghmc;
    PriorMode prior_mode = PriorMode::learned;
    double step_size = 0.02;
    double momentum = 0.9;
    double temperature = 0.01;
    int steps = 1200;
    int batch_size = 20;
    int chains = 5;
    int samples_per_chain = 2;
    int cycles = 2;
    double sample_phase_fraction = 0.25;
    double init_jitter_sd = 1e-3;

    SamplerConfig sampler_config() const;
};

struct EvalConfig {
    int bins = 15;
    bool shifted_test = false;
    bool mean_per_class = false;
};

struct AnalyzeConfig {
    int scan_directions = 3;
    int scan_random_directions = 10;
    double scan_max_distance = 1.0;
    int scan_grid_points = 10;  // per side, symmetric around 0
    std::vector<int> ranks;     // default: {0, 1, 2, ..pow2.., max_rank}
    int probe_steps = 400;      // linear-head fit for the scan base point
};

struct ExperimentConfig {
    TaskConfig task;
    ModelConfig model;
    PretrainConfig pretrain;
    SwagRunConfig swag;
    PriorConfig prior;
    InferenceConfig inference;
    EvalConfig eval;
    AnalyzeConfig analyze;
    int ensemble_members = 10;
    std::vector<uint64_t> seeds = {0, 1, 2, 3, 4};
    std::string out_dir = "runs/out";
    int threads = 1;

    void validate() const;
    // Canonical serialization with every default materialized; config_hash is
    // the FNV-1a of this string.
    std::string canonical_json() const;
    uint64_t config_hash() const;
};

// Parses and validates; unknown keys anywhere are errors.
ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config(const std::string& json_text, const std::string& origin);

}  // namespace btl
