#include "btl/samplers.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>
#include <thread>

#include "btl/errors.hpp"

namespace btl {

const char* sampler_kind_name(SamplerKind k) {
    switch (k) {
        case SamplerKind::sgd_map: return "map";
        case SamplerKind::sgld: return "sgld";
        case SamplerKind::sghmc: return "sghmc";
    }
    return "?";
}

SamplerKind sampler_kind_from_name(const std::string& name) {
    if (name == "map" || name == "sgd" || name == "sgd_map") return SamplerKind::sgd_map;
    if (name == "sgld") return SamplerKind::sgld;
    if (name == "sghmc") return SamplerKind::sghmc;
    throw ConfigError("unknown sampler kind '" + name + "' (expected map, sgld or sghmc)");
}

void SamplerConfig::validate(int dataset_size) const {
    if (!(step_size > 0.0)) throw ConfigError("sampler: step_size must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("sampler: momentum must be in [0, 1)");
    if (temperature < 0.0) throw ConfigError("sampler: temperature must be non-negative");
    if (n_steps < 0) throw ConfigError("sampler: n_steps must be non-negative");
    if (n_chains < 1) throw ConfigError("sampler: n_chains must be >= 1");
    if (cycle_count < 1) throw ConfigError("sampler: cycle_count must be >= 1");
    if (!(sample_phase_fraction > 0.0) || sample_phase_fraction > 1.0) {
        throw ConfigError("sampler: sample_phase_fraction must be in (0, 1]");
    }
    if (dataset_size > 0) {
        if (batch_size < 1) throw ConfigError("sampler: batch_size must be >= 1");
        if (batch_size > dataset_size) {
            throw ConfigError("sampler: batch_size " + std::to_string(batch_size) +
                              " exceeds dataset size " + std::to_string(dataset_size));
        }
    }
    if (kind != SamplerKind::sgd_map) {
        if (samples_per_chain < 1) throw ConfigError("sampler: samples_per_chain must be >= 1");
        sample_step_schedule(*this);  // throws if samples do not fit the windows
    }
}

PosteriorTarget::PosteriorTarget(const MlpModel& model, const Matrix& features,
                                 const std::vector<int>& labels, LossKind loss,
                                 const CompositePrior& prior)
    : model_(model), features_(features), labels_(labels), loss_(loss), prior_(prior) {
    if (features_.rows() == 0) throw ConfigError("posterior target: empty dataset");
    if (!loss_.is_info_nce() && static_cast<int>(labels_.size()) != features_.rows()) {
        throw DimensionError("posterior target: " + std::to_string(labels_.size()) +
                             " labels for " + std::to_string(features_.rows()) + " rows");
    }
    if (prior_.layout().total_dim != model_.layout.total_dim) {
        throw DimensionError("posterior target: prior dimension " +
                             std::to_string(prior_.layout().total_dim) + " vs model dimension " +
                             std::to_string(model_.layout.total_dim));
    }
}

void PosteriorTarget::set_augmentation(double noise_sd, ScaleRange range) {
    noise_sd_ = noise_sd;
    scale_range_ = range;
}

int PosteriorTarget::dim() const { return model_.layout.total_dim; }

double PosteriorTarget::energy_and_grad(const ParamVector& w, std::span<const int> batch,
                                        RngStream& rng, ParamVector& grad) const {
    const int d_in = features_.cols();
    Batch b;
    b.inputs = Matrix(static_cast<int>(batch.size()), d_in);
    if (loss_.is_info_nce()) {
        Matrix positives(static_cast<int>(batch.size()), d_in);
        std::vector<double> x(d_in);
        for (size_t i = 0; i < batch.size(); ++i) {
            const double* row = features_.row(batch[i]);
            std::copy(row, row + d_in, x.begin());
            auto [va, vb] = augment_pair(x, rng, noise_sd_, scale_range_);
            std::copy(va.begin(), va.end(), b.inputs.row(static_cast<int>(i)));
            std::copy(vb.begin(), vb.end(), positives.row(static_cast<int>(i)));
        }
        b.positives = std::move(positives);
    } else {
        b.labels.resize(batch.size());
        for (size_t i = 0; i < batch.size(); ++i) {
            const double* row = features_.row(batch[i]);
            std::copy(row, row + d_in, b.inputs.row(static_cast<int>(i)));
            b.labels[i] = labels_[batch[i]];
        }
    }

    const LossGrad lg = loss_and_grad(model_, w, b, loss_);
    auto [logp, gprior] = prior_.log_density_and_grad(w);

    const double n = static_cast<double>(dataset_size());
    grad.resize(w.size());
    for (size_t i = 0; i < w.size(); ++i) grad[i] = n * lg.grad[i] - gprior[i];
    return n * lg.loss - logp;
}

void step_sgld(ParamVector& w, const ParamVector& grad, double eta, double temperature,
               RngStream& rng) {
    const double noise_sd = temperature > 0.0 ? std::sqrt(eta * temperature) : 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        w[i] -= 0.5 * eta * grad[i];
        if (temperature > 0.0) w[i] += noise_sd * rng.normal();
    }
}

void step_sghmc(ParamVector& w, ParamVector& velocity, const ParamVector& grad, double eta,
                double friction_alpha, double temperature, RngStream& rng) {
    const double keep = 1.0 - friction_alpha;
    const double noise_sd =
        temperature > 0.0 ? std::sqrt(2.0 * friction_alpha * eta * temperature) : 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        velocity[i] = keep * velocity[i] - eta * grad[i];
        if (temperature > 0.0) velocity[i] += noise_sd * rng.normal();
        w[i] += velocity[i];
    }
}

double cyclical_step_size(int t, int n_steps, double eta0, int cycle_count) {
    const int cycle_len = (n_steps + cycle_count - 1) / cycle_count;
    const int pos = (t - 1) % cycle_len;
    return 0.5 * eta0 * (std::cos(std::numbers::pi * static_cast<double>(pos) / cycle_len) + 1.0);
}

std::vector<int> sample_step_schedule(const SamplerConfig& cfg) {
    const int c = cfg.cycle_count;
    const int cycle_len = (cfg.n_steps + c - 1) / c;
    struct Span {
        int a, b;
    };
    std::vector<Span> spans;
    for (int i = 0; i < c; ++i) {
        const int a = i * cycle_len + 1;
        const int b = std::min((i + 1) * cycle_len, cfg.n_steps);
        if (a <= b) spans.push_back({a, b});
    }
    if (spans.empty()) {
        if (cfg.samples_per_chain > 0) throw ConfigError("sampler: no steps to sample from");
        return {};
    }

    const int n_spans = static_cast<int>(spans.size());
    const int base = cfg.samples_per_chain / n_spans;
    const int extra = cfg.samples_per_chain % n_spans;

    std::vector<int> steps;
    for (int i = 0; i < n_spans; ++i) {
        // later cycles take the remainder
        const int want = base + (i >= n_spans - extra ? 1 : 0);
        if (want == 0) continue;
        const auto [a, b] = spans[i];
        const int width = b - a + 1;
        const int window = std::max(1, static_cast<int>(std::llround(cfg.sample_phase_fraction * width)));
        if (want > window) {
            throw ConfigError("sampler: " + std::to_string(want) + " samples do not fit a " +
                              std::to_string(window) + "-step collection window (cycle " +
                              std::to_string(i) + ")");
        }
        const int ws = b - window + 1;
        if (want == 1) {
            steps.push_back(b);
        } else {
            for (int k = 0; k < want; ++k) {
                steps.push_back(ws + static_cast<int>((static_cast<long long>(k) * (window - 1)) /
                                                      (want - 1)));
            }
        }
    }
    return steps;
}

namespace {

// Shuffled-epoch minibatch feeder; a trailing partial batch is dropped and the
// order reshuffled.
class BatchFeeder {
public:
    BatchFeeder(int n, int batch_size) : batch_size_(batch_size), order_(n) {
        std::iota(order_.begin(), order_.end(), 0);
        pos_ = order_.size();  // force shuffle on first use
    }

    std::span<const int> next(RngStream& rng) {
        if (order_.empty()) return {};
        if (pos_ + batch_size_ > order_.size()) {
            std::shuffle(order_.begin(), order_.end(), rng.engine());
            pos_ = 0;
        }
        std::span<const int> s(order_.data() + pos_, static_cast<size_t>(batch_size_));
        pos_ += batch_size_;
        return s;
    }

private:
    size_t batch_size_;
    std::vector<int> order_;
    size_t pos_ = 0;
};

constexpr double kEnergyDivergenceBound = 1e12;

void check_finite(const ParamVector& w, int step) {
    for (double x : w) {
        if (!std::isfinite(x)) {
            throw DivergenceError(step, x,
                                  "divergence: non-finite parameter at step " + std::to_string(step));
        }
    }
}

void check_energy(double u, int step) {
    if (!std::isfinite(u) || std::abs(u) > kEnergyDivergenceBound) {
        throw DivergenceError(step, u, "divergence: energy " + std::to_string(u) + " at step " +
                                           std::to_string(step));
    }
}

}  // namespace

ChainResult run_chain(const EnergyTarget& target, const SamplerConfig& cfg,
                      const ParamVector& init, uint64_t chain_seed) {
    cfg.validate(target.dataset_size());
    if (static_cast<int>(init.size()) != target.dim()) {
        throw DimensionError("run_chain: init length " + std::to_string(init.size()) +
                             " does not match target dimension " + std::to_string(target.dim()));
    }
    const std::vector<int> snapshot_steps =
        cfg.kind == SamplerKind::sgd_map ? std::vector<int>{} : sample_step_schedule(cfg);

    RngStream rng(chain_seed);
    BatchFeeder feeder(target.dataset_size(), cfg.batch_size);
    const double friction = 1.0 - cfg.momentum;

    ChainResult out;
    out.energy_trace.reserve(cfg.n_steps);
    ParamVector w = init;
    ParamVector velocity(w.size(), 0.0);
    ParamVector grad(w.size(), 0.0);
    size_t next_snapshot = 0;

    for (int t = 1; t <= cfg.n_steps; ++t) {
        const double eta = cyclical_step_size(t, cfg.n_steps, cfg.step_size, cfg.cycle_count);
        const double u = target.energy_and_grad(w, feeder.next(rng), rng, grad);
        check_energy(u, t);
        out.energy_trace.push_back(u);

        switch (cfg.kind) {
            case SamplerKind::sgd_map:
                step_sgd(w, velocity, grad, eta, cfg.momentum);
                break;
            case SamplerKind::sgld:
                step_sgld(w, grad, eta, cfg.temperature, rng);
                break;
            case SamplerKind::sghmc:
                step_sghmc(w, velocity, grad, eta, friction, cfg.temperature, rng);
                break;
        }
        check_finite(w, t);

        while (next_snapshot < snapshot_steps.size() && snapshot_steps[next_snapshot] == t) {
            out.samples.emplace_back(t, w);
            ++next_snapshot;
        }
    }
    out.final_params = std::move(w);
    return out;
}

SampleSet run_sampling(const EnergyTarget& target, const SamplerConfig& cfg,
                       const ParamVector& init, uint64_t seed, int n_threads) {
    cfg.validate(target.dataset_size());
    std::vector<ChainResult> results(cfg.n_chains);
    std::vector<std::exception_ptr> errors(cfg.n_chains);

    auto work = [&](int chain) {
        try {
            results[chain] = run_chain(target, cfg, init, seed ^ static_cast<uint64_t>(chain));
        } catch (...) {
            errors[chain] = std::current_exception();
        }
    };

    if (n_threads <= 1 || cfg.n_chains == 1) {
        for (int c = 0; c < cfg.n_chains; ++c) work(c);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        const int workers = std::min(n_threads, cfg.n_chains);
        for (int i = 0; i < workers; ++i) {
            pool.emplace_back([&]() {
                for (int c = next.fetch_add(1); c < cfg.n_chains; c = next.fetch_add(1)) work(c);
            });
        }
        for (auto& th : pool) th.join();
    }
    for (int c = 0; c < cfg.n_chains; ++c) {
        if (errors[c]) std::rethrow_exception(errors[c]);
    }

    SampleSet set;
    set.provenance = cfg;
    for (int c = 0; c < cfg.n_chains; ++c) {
        for (auto& [step, params] : results[c].samples) {
            set.samples.push_back({c, step, std::move(params)});
        }
    }
    return set;
}

ParamVector run_map(const EnergyTarget& target, const SamplerConfig& cfg, const ParamVector& init,
                    uint64_t seed,
                    const std::function<void(int, const ParamVector&, double)>& step_hook) {
    SamplerConfig map_cfg = cfg;
    map_cfg.kind = SamplerKind::sgd_map;
    map_cfg.validate(target.dataset_size());
    if (static_cast<int>(init.size()) != target.dim()) {
        throw DimensionError("run_map: init length " + std::to_string(init.size()) +
                             " does not match target dimension " + std::to_string(target.dim()));
    }

    RngStream rng(seed);
    BatchFeeder feeder(target.dataset_size(), map_cfg.batch_size);
    ParamVector w = init;
    ParamVector velocity(w.size(), 0.0);
    ParamVector grad(w.size(), 0.0);
    for (int t = 1; t <= map_cfg.n_steps; ++t) {
        const double eta = cyclical_step_size(t, map_cfg.n_steps, map_cfg.step_size, map_cfg.cycle_count);
        const double u = target.energy_and_grad(w, feeder.next(rng), rng, grad);
        check_energy(u, t);
        step_sgd(w, velocity, grad, eta, map_cfg.momentum);
        check_finite(w, t);
        if (step_hook) step_hook(t, w, u);
    }
    return w;
}

}  // namespace btl
