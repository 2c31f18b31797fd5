#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "btl/param_model.hpp"
#include "btl/prior.hpp"
#include "btl/rng.hpp"

namespace btl {

enum class SamplerKind { sgd_map, sgld, sghmc };

const char* sampler_kind_name(SamplerKind k);
SamplerKind sampler_kind_from_name(const std::string& name);

struct SamplerConfig {
    SamplerKind kind = SamplerKind::sghmc;
    double step_size = 0.01;   // eta0 of the cyclical schedule
    double momentum = 0.9;     // sgd_map / sghmc (friction = 1 - momentum)
    double temperature = 1.0;  // multiplies injected noise variance only
    int n_steps = 1000;
    int batch_size = 32;
    int n_chains = 5;
    int samples_per_chain = 2;
    int cycle_count = 1;
    double sample_phase_fraction = 0.25;

    void validate(int dataset_size) const;
};

// Anything that exposes a (possibly stochastic) energy U and its gradient.
// dataset_size() == 0 means the gradient is deterministic and batches are
// ignored; otherwise the runner feeds minibatch index sets.
class EnergyTarget {
public:
    virtual ~EnergyTarget() = default;
    virtual int dim() const = 0;
    virtual int dataset_size() const = 0;
    virtual double energy_and_grad(const ParamVector& w, std::span<const int> batch,
                                   RngStream& rng, ParamVector& grad) const = 0;
};

// U(w) = N * (mean minibatch NLL) - log prior(w). Model, data and prior are
// shared read-only across chains; all per-chain state lives in the runner.
class PosteriorTarget final : public EnergyTarget {
public:
    PosteriorTarget(const MlpModel& model, const Matrix& features, const std::vector<int>& labels,
                    LossKind loss, const CompositePrior& prior);

    // info_nce targets build anchor/positive views per batch with these.
    void set_augmentation(double noise_sd, ScaleRange range);

    int dim() const override;
    int dataset_size() const override { return features_.rows(); }
    double energy_and_grad(const ParamVector& w, std::span<const int> batch, RngStream& rng,
                           ParamVector& grad) const override;

private:
    const MlpModel& model_;
    const Matrix& features_;
    const std::vector<int>& labels_;
    LossKind loss_;
    const CompositePrior& prior_;
    double noise_sd_ = 0.0;
    ScaleRange scale_range_{1.0, 1.0};
};

// One low-rate step; shared by MAP and the zero-temperature SGHMC limit.
inline void step_sgd(ParamVector& w, ParamVector& velocity, const ParamVector& grad, double eta,
                     double momentum) {
    for (size_t i = 0; i < w.size(); ++i) {
        velocity[i] = momentum * velocity[i] - eta * grad[i];
        w[i] += velocity[i];
    }
}

void step_sgld(ParamVector& w, const ParamVector& grad, double eta, double temperature,
               RngStream& rng);

void step_sghmc(ParamVector& w, ParamVector& velocity, const ParamVector& grad, double eta,
                double friction_alpha, double temperature, RngStream& rng);

// Cosine schedule restarted cycle_count times over n_steps; t is 1-based.
double cyclical_step_size(int t, int n_steps, double eta0, int cycle_count);

// 1-based step indices at which a chain snapshots its parameters: the last
// sample_phase_fraction of each designated cycle, evenly spaced, ending on the
// cycle's final step.
std::vector<int> sample_step_schedule(const SamplerConfig& cfg);

struct ChainResult {
    std::vector<std::pair<int, ParamVector>> samples;  // (step index, params)
    std::vector<double> energy_trace;
    ParamVector final_params;
};

ChainResult run_chain(const EnergyTarget& target, const SamplerConfig& cfg,
                      const ParamVector& init, uint64_t chain_seed);

struct SampleEntry {
    int chain_id = 0;
    int step_index = 0;
    ParamVector params;
};

struct SampleSet {
    std::vector<SampleEntry> samples;  // ordered by (chain, step)
    SamplerConfig provenance;

    int size() const { return static_cast<int>(samples.size()); }
};

// Runs cfg.n_chains chains with isolated RNG streams (seed ^ chain_id) and
// merges samples in chain order. n_threads > 1 runs chains concurrently.
SampleSet run_sampling(const EnergyTarget& target, const SamplerConfig& cfg,
                       const ParamVector& init, uint64_t seed, int n_threads = 1);

// SGD-with-momentum MAP optimization; returns the final iterate. The optional
// hook observes every iterate and its energy estimate (SWAG snapshot
// collection, training traces).
ParamVector run_map(
    const EnergyTarget& target, const SamplerConfig& cfg, const ParamVector& init, uint64_t seed,
    const std::function<void(int step, const ParamVector&, double energy)>& step_hook = {});

}  // namespace btl
