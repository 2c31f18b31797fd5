#pragma once

#include <optional>
#include <vector>

#include "btl/matrix.hpp"
#include "btl/param_model.hpp"
#include "btl/samplers.hpp"

namespace btl {

// Per-example class probabilities (rows on the simplex) with true labels.
struct PredictionSet {
    Matrix probs;
    std::vector<int> labels;

    int size() const { return probs.rows(); }
    int num_classes() const { return probs.cols(); }
};

struct ReliabilityBin {
    double mid = 0.0;
    double mean_confidence = 0.0;
    double accuracy = 0.0;
    int count = 0;
};

struct EvalReport {
    double error = 0.0;
    double nll = 0.0;
    double ece = 0.0;
    std::vector<ReliabilityBin> bins;
    int clamped = 0;  // examples whose true-label probability hit the floor
    std::optional<double> mean_per_class_accuracy;
};

// Softmax predictions of a single parameter vector.
PredictionSet predict(const MlpModel& model, const ParamVector& params, const Matrix& inputs,
                      const std::vector<int>& labels);

// Monte Carlo posterior predictive: the arithmetic mean of per-sample softmax
// probabilities over every parameter vector in the sample set.
PredictionSet bma_predict(const MlpModel& model, const SampleSet& samples, const Matrix& inputs,
                          const std::vector<int>& labels);

// Misclassification rate (argmax, ties to the lowest class index), mean NLL
// with a 1e-12 probability floor, and ECE over equal-width confidence bins.
EvalReport evaluate(const PredictionSet& preds, int n_bins = 15, bool mean_per_class = false);

}  // namespace btl
