#include "btl/bma_eval.hpp"

#include <algorithm>
#include <cmath>

#include "btl/errors.hpp"

namespace btl {

namespace {
constexpr double kProbFloor = 1e-12;

void check_labels(const Matrix& inputs, const std::vector<int>& labels) {
    if (static_cast<int>(labels.size()) != inputs.rows()) {
        throw DimensionError("predict: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(inputs.rows()) + " rows");
    }
}
}  // namespace

PredictionSet predict(const MlpModel& model, const ParamVector& params, const Matrix& inputs,
                      const std::vector<int>& labels) {
    check_labels(inputs, labels);
    Matrix probs = forward(model, params, inputs);
    softmax_rows(probs);
    return {std::move(probs), labels};
}

PredictionSet bma_predict(const MlpModel& model, const SampleSet& samples, const Matrix& inputs,
                          const std::vector<int>& labels) {
    check_labels(inputs, labels);
    if (samples.size() == 0) throw ConfigError("bma_predict: empty sample set");

    Matrix acc(inputs.rows(), model.output_dim(), 0.0);
    for (const auto& entry : samples.samples) {
        Matrix probs = forward(model, entry.params, inputs);
        softmax_rows(probs);
        for (size_t i = 0; i < acc.size(); ++i) acc.data()[i] += probs.data()[i];
    }
    const double inv = 1.0 / samples.size();
    for (size_t i = 0; i < acc.size(); ++i) acc.data()[i] *= inv;
    return {std::move(acc), labels};
}

EvalReport evaluate(const PredictionSet& preds, int n_bins, bool mean_per_class) {
    const int n = preds.size();
    const int k = preds.num_classes();
    if (n < 1) throw ConfigError("evaluate: empty prediction set");
    if (n_bins < 1) throw ConfigError("evaluate: n_bins must be >= 1");

    EvalReport report;
    report.bins.resize(n_bins);
    for (int b = 0; b < n_bins; ++b) report.bins[b].mid = (b + 0.5) / n_bins;

    std::vector<double> bin_conf(n_bins, 0.0);
    std::vector<int> bin_correct(n_bins, 0);

    int errors = 0;
    double nll = 0.0;
    std::vector<int> class_total(k, 0), class_correct(k, 0);

    for (int i = 0; i < n; ++i) {
        const int y = preds.labels[i];
        if (y < 0 || y >= k) {
            throw ConfigError("evaluate: label " + std::to_string(y) + " out of range [0, " +
                              std::to_string(k) + ") at row " + std::to_string(i));
        }
        const double* row = preds.probs.row(i);
        int arg = 0;
        for (int c = 1; c < k; ++c) {
            if (row[c] > row[arg]) arg = c;  // ties keep the lowest index
        }
        const bool correct = (arg == y);
        if (!correct) ++errors;
        ++class_total[y];
        if (correct) ++class_correct[y];

        double p = row[y];
        if (p < kProbFloor) {
            p = kProbFloor;
            ++report.clamped;
        }
        nll -= std::log(p);

        const double conf = row[arg];
        int b = static_cast<int>(conf * n_bins);
        b = std::clamp(b, 0, n_bins - 1);
        report.bins[b].count += 1;
        bin_conf[b] += conf;
        bin_correct[b] += correct ? 1 : 0;
    }

    report.error = static_cast<double>(errors) / n;
    report.nll = nll / n;

    double ece = 0.0;
    for (int b = 0; b < n_bins; ++b) {
        auto& bin = report.bins[b];
        if (bin.count > 0) {
            bin.mean_confidence = bin_conf[b] / bin.count;
            bin.accuracy = static_cast<double>(bin_correct[b]) / bin.count;
            ece += (static_cast<double>(bin.count) / n) *
                   std::abs(bin.accuracy - bin.mean_confidence);
        }
    }
    report.ece = ece;

    if (mean_per_class) {
        double s = 0.0;
        int present = 0;
        for (int c = 0; c < k; ++c) {
            if (class_total[c] > 0) {
                s += static_cast<double>(class_correct[c]) / class_total[c];
                ++present;
            }
        }
        report.mean_per_class_accuracy = present > 0 ? s / present : 0.0;
    }
    return report;
}

}  // namespace btl
