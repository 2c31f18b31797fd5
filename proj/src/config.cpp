#include "btl/config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "btl/errors.hpp"
#include "btl/swag.hpp"

namespace btl {

using nlohmann::json;

PriorConfig::PriorConfig() {
    for (int i = 0; i < 8; ++i) {
        // 8 log-spaced points in [1e-3, 1e1]
        head_variance_grid.push_back(std::pow(10.0, -3.0 + 4.0 * i / 7.0));
    }
    feature_variance_grid = head_variance_grid;
}

const char* prior_mode_name(PriorMode m) {
    switch (m) {
        case PriorMode::learned: return "learned";
        case PriorMode::learned_mean_iso: return "learned_mean_iso";
        case PriorMode::zero_mean_iso: return "zero_mean_iso";
        case PriorMode::transfer_init: return "transfer_init";
    }
    return "?";
}

PriorMode prior_mode_from_name(const std::string& name) {
    if (name == "learned") return PriorMode::learned;
    if (name == "learned_mean_iso") return PriorMode::learned_mean_iso;
    if (name == "zero_mean_iso") return PriorMode::zero_mean_iso;
    if (name == "transfer_init") return PriorMode::transfer_init;
    throw ConfigError("inference.prior_mode: unknown value '" + name + "'");
}

SamplerConfig InferenceConfig::sampler_config() const {
    SamplerConfig cfg;
    cfg.kind = method;
    cfg.step_size = step_size;
    cfg.momentum = momentum;
    cfg.temperature = temperature;
    cfg.n_steps = steps;
    cfg.batch_size = batch_size;
    cfg.n_chains = chains;
    cfg.samples_per_chain = samples_per_chain;
    cfg.cycle_count = cycles;
    cfg.sample_phase_fraction = sample_phase_fraction;
    return cfg;
}

namespace {

void check_keys(const json& j, const std::string& context,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(context + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed) {
            if (key == a) {
                known = true;
                break;
            }
        }
        if (!known) throw ConfigError(context + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read_field(const json& j, const std::string& context, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(context + "." + key + ": wrong type");
    }
}

void parse_task(const json& j, TaskConfig& task) {
    check_keys(j, "task",
               {"type", "dim", "active_dims", "source_classes", "target_classes", "cluster_sd",
                "shift", "shifted_test_extra", "n_source", "n_target_train", "n_target_val",
                "n_target_test", "n_shifted_test", "source_seed", "target_seed", "source",
                "target_train", "target_val", "target_test", "target_shifted_test"});
    std::string type = "synthetic";
    read_field(j, "task", "type", type);
    if (type == "synthetic") {
        task.synthetic = true;
        auto& s = task.spec;
        read_field(j, "task", "dim", s.dim);
        read_field(j, "task", "active_dims", s.active_dims);
        read_field(j, "task", "source_classes", s.source_classes);
        read_field(j, "task", "target_classes", s.target_classes);
        read_field(j, "task", "cluster_sd", s.cluster_sd);
        read_field(j, "task", "shift", s.shift);
        read_field(j, "task", "shifted_test_extra", s.shifted_test_extra);
        read_field(j, "task", "n_source", s.n_source);
        read_field(j, "task", "n_target_train", s.n_target_train);
        read_field(j, "task", "n_target_val", s.n_target_val);
        read_field(j, "task", "n_target_test", s.n_target_test);
        read_field(j, "task", "n_shifted_test", s.n_shifted_test);
        read_field(j, "task", "source_seed", s.source_seed);
        read_field(j, "task", "target_seed", s.target_seed);
    } else if (type == "csv") {
        task.synthetic = false;
        auto& c = task.csv;
        read_field(j, "task", "source", c.source);
        read_field(j, "task", "target_train", c.target_train);
        read_field(j, "task", "target_val", c.target_val);
        read_field(j, "task", "target_test", c.target_test);
        read_field(j, "task", "target_shifted_test", c.target_shifted_test);
    } else {
        throw ConfigError("task.type: expected 'synthetic' or 'csv', got '" + type + "'");
    }
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text, const std::string& origin) {
    json j = json::parse(json_text, nullptr, false, true);
    if (j.is_discarded()) throw ConfigError(origin + ": malformed JSON");

    check_keys(j, "config",
               {"task", "model", "pretrain", "swag", "prior", "inference", "eval", "analyze",
                "ensemble", "seeds", "out_dir", "threads"});

    ExperimentConfig cfg;
    if (j.contains("task")) parse_task(j.at("task"), cfg.task);

    if (j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m, "model", {"hidden", "activation", "embed_dim"});
        read_field(m, "model", "hidden", cfg.model.hidden);
        std::string act = activation_name(cfg.model.activation);
        read_field(m, "model", "activation", act);
        cfg.model.activation = activation_from_name(act);
        read_field(m, "model", "embed_dim", cfg.model.embed_dim);
    }

    if (j.contains("pretrain")) {
        const json& p = j.at("pretrain");
        check_keys(p, "pretrain",
                   {"loss", "info_nce_temperature", "steps", "step_size", "momentum", "batch_size",
                    "cycles", "prior_variance", "augment_noise_sd", "augment_scale_min",
                    "augment_scale_max"});
        std::string loss = cfg.pretrain.info_nce ? "info_nce" : "cross_entropy";
        read_field(p, "pretrain", "loss", loss);
        if (loss == "info_nce") {
            cfg.pretrain.info_nce = true;
        } else if (loss == "cross_entropy") {
            cfg.pretrain.info_nce = false;
        } else {
            throw ConfigError("pretrain.loss: expected 'cross_entropy' or 'info_nce', got '" +
                              loss + "'");
        }
        read_field(p, "pretrain", "info_nce_temperature", cfg.pretrain.info_nce_temperature);
        read_field(p, "pretrain", "steps", cfg.pretrain.steps);
        read_field(p, "pretrain", "step_size", cfg.pretrain.step_size);
        read_field(p, "pretrain", "momentum", cfg.pretrain.momentum);
        read_field(p, "pretrain", "batch_size", cfg.pretrain.batch_size);
        read_field(p, "pretrain", "cycles", cfg.pretrain.cycles);
        read_field(p, "pretrain", "prior_variance", cfg.pretrain.prior_variance);
        read_field(p, "pretrain", "augment_noise_sd", cfg.pretrain.augment_noise_sd);
        read_field(p, "pretrain", "augment_scale_min", cfg.pretrain.augment_scale_min);
        read_field(p, "pretrain", "augment_scale_max", cfg.pretrain.augment_scale_max);
    }

    if (j.contains("swag")) {
        const json& s = j.at("swag");
        check_keys(s, "swag",
                   {"steps", "step_size", "momentum", "batch_size", "cycles", "snapshot_interval",
                    "max_rank", "total_snapshots"});
        read_field(s, "swag", "steps", cfg.swag.steps);
        read_field(s, "swag", "step_size", cfg.swag.step_size);
        read_field(s, "swag", "momentum", cfg.swag.momentum);
        read_field(s, "swag", "batch_size", cfg.swag.batch_size);
        read_field(s, "swag", "cycles", cfg.swag.cycles);
        read_field(s, "swag", "snapshot_interval", cfg.swag.snapshot_interval);
        read_field(s, "swag", "max_rank", cfg.swag.max_rank);
        read_field(s, "swag", "total_snapshots", cfg.swag.total_snapshots);
    }

    if (j.contains("prior")) {
        const json& p = j.at("prior");
        check_keys(p, "prior",
                   {"lambda_grid", "head_variance_grid", "feature_variance_grid", "lambda",
                    "head_variance", "feature_variance"});
        read_field(p, "prior", "lambda_grid", cfg.prior.lambda_grid);
        read_field(p, "prior", "head_variance_grid", cfg.prior.head_variance_grid);
        read_field(p, "prior", "feature_variance_grid", cfg.prior.feature_variance_grid);
        if (p.contains("lambda")) cfg.prior.lambda = p.at("lambda").get<double>();
        if (p.contains("head_variance")) cfg.prior.head_variance = p.at("head_variance").get<double>();
        if (p.contains("feature_variance")) {
            cfg.prior.feature_variance = p.at("feature_variance").get<double>();
        }
    }

    if (j.contains("inference")) {
        const json& i = j.at("inference");
        check_keys(i, "inference",
                   {"method", "prior_mode", "step_size", "momentum", "temperature", "steps",
                    "batch_size", "chains", "samples_per_chain", "cycles",
                    "sample_phase_fraction", "init_jitter_sd"});
        std::string method = sampler_kind_name(cfg.inference.method);
        read_field(i, "inference", "method", method);
        cfg.inference.method = sampler_kind_from_name(method);
        std::string mode = prior_mode_name(cfg.inference.prior_mode);
        read_field(i, "inference", "prior_mode", mode);
        cfg.inference.prior_mode = prior_mode_from_name(mode);
        read_field(i, "inference", "step_size", cfg.inference.step_size);
        read_field(i, "inference", "momentum", cfg.inference.momentum);
        read_field(i, "inference", "temperature", cfg.inference.temperature);
        read_field(i, "inference", "steps", cfg.inference.steps);
        read_field(i, "inference", "batch_size", cfg.inference.batch_size);
        read_field(i, "inference", "chains", cfg.inference.chains);
        read_field(i, "inference", "samples_per_chain", cfg.inference.samples_per_chain);
        read_field(i, "inference", "cycles", cfg.inference.cycles);
        read_field(i, "inference", "sample_phase_fraction", cfg.inference.sample_phase_fraction);
        read_field(i, "inference", "init_jitter_sd", cfg.inference.init_jitter_sd);
    }

    if (j.contains("eval")) {
        const json& e = j.at("eval");
        check_keys(e, "eval", {"bins", "shifted_test", "mean_per_class"});
        read_field(e, "eval", "bins", cfg.eval.bins);
        read_field(e, "eval", "shifted_test", cfg.eval.shifted_test);
        read_field(e, "eval", "mean_per_class", cfg.eval.mean_per_class);
    }

    if (j.contains("analyze")) {
        const json& a = j.at("analyze");
        check_keys(a, "analyze",
                   {"scan_directions", "scan_random_directions", "scan_max_distance",
                    "scan_grid_points", "ranks", "probe_steps"});
        read_field(a, "analyze", "scan_directions", cfg.analyze.scan_directions);
        read_field(a, "analyze", "scan_random_directions", cfg.analyze.scan_random_directions);
        read_field(a, "analyze", "scan_max_distance", cfg.analyze.scan_max_distance);
        read_field(a, "analyze", "scan_grid_points", cfg.analyze.scan_grid_points);
        read_field(a, "analyze", "ranks", cfg.analyze.ranks);
        read_field(a, "analyze", "probe_steps", cfg.analyze.probe_steps);
    }

    if (j.contains("ensemble")) {
        const json& e = j.at("ensemble");
        check_keys(e, "ensemble", {"members"});
        read_field(e, "ensemble", "members", cfg.ensemble_members);
    }

    read_field(j, "config", "seeds", cfg.seeds);
    read_field(j, "config", "out_dir", cfg.out_dir);
    read_field(j, "config", "threads", cfg.threads);

    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path);
}

void ExperimentConfig::validate() const {
    if (task.synthetic) {
        task.spec.validate();
    } else {
        for (const auto& [field, path] :
             {std::pair<std::string, std::string>{"source", task.csv.source},
              {"target_train", task.csv.target_train},
              {"target_val", task.csv.target_val},
              {"target_test", task.csv.target_test}}) {
            if (path.empty()) throw ConfigError("task." + field + ": required for csv tasks");
            if (!std::filesystem::exists(path)) {
                throw ConfigError("task." + field + ": file '" + path + "' does not exist");
            }
        }
        if (!task.csv.target_shifted_test.empty() &&
            !std::filesystem::exists(task.csv.target_shifted_test)) {
            throw ConfigError("task.target_shifted_test: file '" + task.csv.target_shifted_test +
                              "' does not exist");
        }
    }

    if (model.hidden.empty()) throw ConfigError("model.hidden: at least one hidden layer required");
    for (int h : model.hidden) {
        if (h < 1) throw ConfigError("model.hidden: layer widths must be >= 1");
    }
    if (model.embed_dim < 1) throw ConfigError("model.embed_dim: must be >= 1");

    if (pretrain.steps < 0) throw ConfigError("pretrain.steps: must be >= 0");
    if (!(pretrain.step_size > 0)) throw ConfigError("pretrain.step_size: must be positive");
    if (!(pretrain.prior_variance > 0)) throw ConfigError("pretrain.prior_variance: must be positive");
    if (pretrain.info_nce && !(pretrain.info_nce_temperature > 0)) {
        throw ConfigError("pretrain.info_nce_temperature: must be positive");
    }
    if (pretrain.augment_noise_sd < 0) throw ConfigError("pretrain.augment_noise_sd: must be >= 0");
    if (!(pretrain.augment_scale_min > 0) ||
        pretrain.augment_scale_min > pretrain.augment_scale_max) {
        throw ConfigError("pretrain: invalid augment scale range");
    }

    SwagConfig sc{swag.snapshot_interval, swag.max_rank, swag.total_snapshots, 1e-8};
    sc.validate();
    if (swag.steps < 1) throw ConfigError("swag.steps: must be >= 1");
    if (swag.cycles < 1 || swag.steps % swag.cycles != 0) {
        throw ConfigError("swag.cycles: must divide swag.steps");
    }
    // Snapshots only happen in the [0.5, 0.9) band of each cycle; make sure
    // the run is long enough to collect them all.
    const int cycle_len = (swag.steps + swag.cycles - 1) / swag.cycles;
    const int qualifying = swag.cycles * ((9 * cycle_len) / 10 - cycle_len / 2);
    if (qualifying / swag.snapshot_interval < swag.total_snapshots) {
        throw ConfigError("swag: " + std::to_string(swag.total_snapshots) +
                          " snapshots at interval " + std::to_string(swag.snapshot_interval) +
                          " do not fit in the low-phase steps of " + std::to_string(swag.steps) +
                          " total steps");
    }

    if (prior.lambda_grid.empty()) throw ConfigError("prior.lambda_grid: must be non-empty");
    for (double l : prior.lambda_grid) {
        if (!(l > 0)) throw ConfigError("prior.lambda_grid: values must be positive");
    }
    if (prior.head_variance_grid.empty()) throw ConfigError("prior.head_variance_grid: must be non-empty");
    for (double v : prior.head_variance_grid) {
        if (!(v > 0)) throw ConfigError("prior.head_variance_grid: values must be positive");
    }
    if (prior.feature_variance_grid.empty()) {
        throw ConfigError("prior.feature_variance_grid: must be non-empty");
    }
    for (double v : prior.feature_variance_grid) {
        if (!(v > 0)) throw ConfigError("prior.feature_variance_grid: values must be positive");
    }
    if (prior.lambda.has_value() && !(*prior.lambda > 0)) {
        throw ConfigError("prior.lambda: must be positive");
    }
    if (prior.head_variance.has_value() && !(*prior.head_variance > 0)) {
        throw ConfigError("prior.head_variance: must be positive");
    }
    if (prior.feature_variance.has_value() && !(*prior.feature_variance > 0)) {
        throw ConfigError("prior.feature_variance: must be positive");
    }

    inference.sampler_config().validate(0);
    if (inference.init_jitter_sd < 0) throw ConfigError("inference.init_jitter_sd: must be >= 0");

    if (eval.bins < 1) throw ConfigError("eval.bins: must be >= 1");
    if (analyze.scan_directions < 1) throw ConfigError("analyze.scan_directions: must be >= 1");
    if (analyze.scan_grid_points < 1) throw ConfigError("analyze.scan_grid_points: must be >= 1");
    if (!(analyze.scan_max_distance > 0)) throw ConfigError("analyze.scan_max_distance: must be positive");
    for (int r : analyze.ranks) {
        if (r < 0 || r > swag.max_rank) {
            throw ConfigError("analyze.ranks: rank " + std::to_string(r) + " outside [0, " +
                              std::to_string(swag.max_rank) + "]");
        }
    }
    if (analyze.probe_steps < 1) throw ConfigError("analyze.probe_steps: must be >= 1");
    if (ensemble_members < 1) throw ConfigError("ensemble.members: must be >= 1");
    if (seeds.empty()) throw ConfigError("seeds: must be non-empty");
    if (threads < 1) throw ConfigError("threads: must be >= 1");
}

std::string ExperimentConfig::canonical_json() const {
    json j;
    if (task.synthetic) {
        const auto& s = task.spec;
        j["task"] = {{"type", "synthetic"},
                     {"dim", s.dim},
                     {"active_dims", s.active_dims},
                     {"source_classes", s.source_classes},
                     {"target_classes", s.target_classes},
                     {"cluster_sd", s.cluster_sd},
                     {"shift", s.shift},
                     {"shifted_test_extra", s.shifted_test_extra},
                     {"n_source", s.n_source},
                     {"n_target_train", s.n_target_train},
                     {"n_target_val", s.n_target_val},
                     {"n_target_test", s.n_target_test},
                     {"n_shifted_test", s.n_shifted_test},
                     {"source_seed", s.source_seed},
                     {"target_seed", s.target_seed}};
    } else {
        j["task"] = {{"type", "csv"},
                     {"source", task.csv.source},
                     {"target_train", task.csv.target_train},
                     {"target_val", task.csv.target_val},
                     {"target_test", task.csv.target_test},
                     {"target_shifted_test", task.csv.target_shifted_test}};
    }
    j["model"] = {{"hidden", model.hidden},
                  {"activation", activation_name(model.activation)},
                  {"embed_dim", model.embed_dim}};
    j["pretrain"] = {{"loss", pretrain.info_nce ? "info_nce" : "cross_entropy"},
                     {"info_nce_temperature", pretrain.info_nce_temperature},
                     {"steps", pretrain.steps},
                     {"step_size", pretrain.step_size},
                     {"momentum", pretrain.momentum},
                     {"batch_size", pretrain.batch_size},
                     {"cycles", pretrain.cycles},
                     {"prior_variance", pretrain.prior_variance},
                     {"augment_noise_sd", pretrain.augment_noise_sd},
                     {"augment_scale_min", pretrain.augment_scale_min},
                     {"augment_scale_max", pretrain.augment_scale_max}};
    j["swag"] = {{"steps", swag.steps},
                 {"step_size", swag.step_size},
                 {"momentum", swag.momentum},
                 {"batch_size", swag.batch_size},
                 {"cycles", swag.cycles},
                 {"snapshot_interval", swag.snapshot_interval},
                 {"max_rank", swag.max_rank},
                 {"total_snapshots", swag.total_snapshots}};
    j["prior"] = {{"lambda_grid", prior.lambda_grid},
                  {"head_variance_grid", prior.head_variance_grid},
                  {"feature_variance_grid", prior.feature_variance_grid}};
    if (prior.lambda.has_value()) j["prior"]["lambda"] = *prior.lambda;
    if (prior.head_variance.has_value()) j["prior"]["head_variance"] = *prior.head_variance;
    if (prior.feature_variance.has_value()) j["prior"]["feature_variance"] = *prior.feature_variance;
    j["inference"] = {{"method", sampler_kind_name(inference.method)},
                      {"prior_mode", prior_mode_name(inference.prior_mode)},
                      {"step_size", inference.step_size},
                      {"momentum", inference.momentum},
                      {"temperature", inference.temperature},
                      {"steps", inference.steps},
                      {"batch_size", inference.batch_size},
                      {"chains", inference.chains},
                      {"samples_per_chain", inference.samples_per_chain},
                      {"cycles", inference.cycles},
                      {"sample_phase_fraction", inference.sample_phase_fraction},
                      {"init_jitter_sd", inference.init_jitter_sd}};
    j["eval"] = {{"bins", eval.bins},
                 {"shifted_test", eval.shifted_test},
                 {"mean_per_class", eval.mean_per_class}};
    j["analyze"] = {{"scan_directions", analyze.scan_directions},
                    {"scan_random_directions", analyze.scan_random_directions},
                    {"scan_max_distance", analyze.scan_max_distance},
                    {"scan_grid_points", analyze.scan_grid_points},
                    {"ranks", analyze.ranks},
                    {"probe_steps", analyze.probe_steps}};
    j["ensemble"] = {{"members", ensemble_members}};
    j["seeds"] = seeds;
    j["out_dir"] = out_dir;
    j["threads"] = threads;
    return j.dump();
}

uint64_t ExperimentConfig::config_hash() const {
    const std::string s = canonical_json();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace btl
