#pragma once

#include <string>

#include "btl/param_model.hpp"
#include "btl/prior.hpp"

namespace btl {

// Little-endian binary container for a learned prior: magic "BPRIOR1\0",
// version u32, d u32, L u32, lambda f64, mean (d f64), diag variances (d f64),
// deviations (d x L f64, column-major), then a length-prefixed UTF-8 JSON
// record of the parameter layout, the group the prior covers, and the
// deviation-denominator. save/load round-trips bit-exactly.
struct PriorBundle {
    LowRankGaussian prior;
    ParamLayout layout;  // layout of the full model the prior was fitted on
    std::string group;   // the block group the prior covers
};

void save_prior_bundle(const std::string& path, const PriorBundle& bundle);
PriorBundle load_prior_bundle(const std::string& path);

// Flat parameter checkpoint with its layout: magic "BCHKPT1\0", version u32,
// d u32, params (d f64), length-prefixed layout JSON.
void save_checkpoint(const std::string& path, const ParamVector& params, const ParamLayout& layout);

struct Checkpoint {
    ParamVector params;
    ParamLayout layout;
};
Checkpoint load_checkpoint(const std::string& path);

std::string layout_to_json(const ParamLayout& layout);
ParamLayout layout_from_json(const std::string& text);

}  // namespace btl
