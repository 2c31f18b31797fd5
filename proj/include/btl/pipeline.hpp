#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "btl/bma_eval.hpp"
#include "btl/bundle.hpp"
#include "btl/config.hpp"
#include "btl/data.hpp"
#include "btl/geometry.hpp"
#include "btl/prior.hpp"
#include "btl/samplers.hpp"
#include "btl/swag.hpp"

namespace btl {

inline constexpr const char* kVersion = "0.1.0";

// ---- data / model assembly -------------------------------------------------

TransferPair load_task(const ExperimentConfig& cfg);

// Fresh target train/val draws for one trial; test sets are the canonical
// ones. CSV tasks return the configured files unchanged.
std::pair<Dataset, Dataset> seed_target_data(const ExperimentConfig& cfg, uint64_t seed);

MlpModel make_source_model(const ExperimentConfig& cfg, int input_dim, int source_classes);
MlpModel make_target_model(const ExperimentConfig& cfg, int input_dim, int target_classes);

// ---- pre-training and prior fitting ----------------------------------------

struct TraceRow {
    int step;
    double energy;
    double step_size;
};

// MAP on the source task (cross-entropy or InfoNCE) under an isotropic prior.
ParamVector pretrain_source(const ExperimentConfig& cfg, const Dataset& source,
                            const MlpModel& source_model, uint64_t seed,
                            std::vector<TraceRow>* trace = nullptr);

// Cyclical fine-tuning from the checkpoint, snapshots in the low-step-size
// phase, SWAG finalize, restriction to the feature_extractor group.
LowRankGaussian fit_feature_prior(const ExperimentConfig& cfg, const Dataset& source,
                                  const MlpModel& source_model, const ParamVector& checkpoint,
                                  uint64_t seed);

LowRankGaussian restrict_to_group(const LowRankGaussian& full, const ParamLayout& layout,
                                  const std::string& group);

// Target-model parameters holding the checkpoint's feature extractor and a
// zero head.
ParamVector make_transfer_init(const MlpModel& source_model, const ParamVector& checkpoint,
                               const MlpModel& target_model);

// ---- downstream inference ---------------------------------------------------

struct Downstream {
    const MlpModel* model = nullptr;
    const Dataset* train = nullptr;
    const Dataset* val = nullptr;
    const Dataset* test = nullptr;
    const Dataset* shifted = nullptr;  // optional
};

struct HyperParams {
    double lambda = 1.0;            // learned-prior covariance scale
    double head_variance = 1.0;     // isotropic prior on the new head
    double feature_variance = 1.0;  // isotropic feature-extractor prior (non-learned modes)
};

struct MethodOutcome {
    HyperParams hp;
    EvalReport val;
    EvalReport test;
    std::optional<EvalReport> shifted;
    double runtime_s = 0.0;
};

CompositePrior build_downstream_prior(const MlpModel& target_model, PriorMode mode,
                                      const LowRankGaussian* fe_prior, HyperParams hp);

// One downstream run: assemble the prior and the initialization for `mode`,
// run MAP or a sampler, evaluate. fe_prior is required for learned modes,
// transfer_init for transfer_init mode.
MethodOutcome run_method(const ExperimentConfig& cfg, const Downstream& ds,
                         const LowRankGaussian* fe_prior, const ParamVector* transfer_init,
                         SamplerKind method, PriorMode mode, HyperParams hp, uint64_t seed,
                         SampleSet* samples_out = nullptr, ParamVector* map_out = nullptr);

struct SweepRow {
    HyperParams hp;
    double val_error = 0.0;
    double val_nll = 0.0;
};

struct TunedOutcome {
    MethodOutcome best;
    std::vector<SweepRow> rows;
};

// Grid search on validation error (ties: smaller lambda, then smaller
// variance); returns the winning run and every grid row.
TunedOutcome tune_method(const ExperimentConfig& cfg, const Downstream& ds,
                         const LowRankGaussian* fe_prior, const ParamVector* transfer_init,
                         SamplerKind method, PriorMode mode, uint64_t seed);

// k MAP runs from the same initialization with different seeds, probability
// averaged. The second overload takes the member seeds explicitly.
MethodOutcome run_sgd_ensemble(const ExperimentConfig& cfg, const Downstream& ds,
                               const ParamVector& transfer_init, int members, HyperParams hp,
                               uint64_t seed);
MethodOutcome run_sgd_ensemble(const ExperimentConfig& cfg, const Downstream& ds,
                               const ParamVector& transfer_init,
                               const std::vector<uint64_t>& member_seeds, HyperParams hp);

// ---- probes and geometry helpers -------------------------------------------

// Full-batch softmax-regression fit of the head on frozen features.
ParamVector fit_linear_probe(const MlpModel& model, const ParamVector& base, const Dataset& train,
                             double l2, int steps, double step_size);

double accuracy(const MlpModel& model, const ParamVector& params, const Dataset& ds);

// ---- CLI commands ------------------------------------------------------------

struct CliPaths {
    std::string checkpoint;
    std::string prior;
    std::string samples;
};

void cmd_pretrain(const ExperimentConfig& cfg, uint64_t seed);
void cmd_fit_prior(const ExperimentConfig& cfg, const std::string& checkpoint_path, uint64_t seed);
void cmd_rescale_sweep(const ExperimentConfig& cfg, const std::string& prior_path,
                       const std::string& checkpoint_path, uint64_t seed);
void cmd_infer(const ExperimentConfig& cfg, const CliPaths& paths,
               std::optional<double> lambda, std::optional<double> head_variance, uint64_t seed);
void cmd_analyze(const ExperimentConfig& cfg, const std::string& prior_path,
                 const std::string& checkpoint_path, uint64_t seed);
void cmd_ensemble(const ExperimentConfig& cfg, const std::string& checkpoint_path, int members,
                  uint64_t seed);
void cmd_evaluate(const ExperimentConfig& cfg, const CliPaths& paths, uint64_t seed);

// Sample-set container I/O (magic "BSAMPL1\0").
void save_samples(const std::string& path, const SampleSet& samples);
SampleSet load_samples(const std::string& path);

}  // namespace btl
