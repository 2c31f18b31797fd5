#pragma once

#include <string>
#include <vector>

#include "btl/matrix.hpp"

namespace btl {

struct Dataset {
    Matrix features;
    std::vector<int> labels;  // empty for unlabeled data
    std::string name;

    int size() const { return features.rows(); }
    int dim() const { return features.cols(); }
    bool labeled() const { return !labels.empty(); }
    int num_classes() const;
};

// Gaussian class clusters with means on the unit sphere of the first
// `active_dims` coordinates (0 means all of them). The target task rotates the
// means plane-wise by `shift` radians and translates them by `shift` along a
// fixed unit vector, so a single scalar controls source/target relatedness;
// the shifted test set applies `shifted_test_extra` more of the same.
struct TransferSpec {
    int dim = 2;
    int active_dims = 0;
    int source_classes = 2;
    int target_classes = 2;
    double cluster_sd = 0.2;
    double shift = 0.0;
    double shifted_test_extra = 0.25;
    int n_source = 1024;
    int n_target_train = 64;
    int n_target_val = 256;
    int n_target_test = 1024;
    int n_shifted_test = 1024;
    uint64_t source_seed = 1;
    uint64_t target_seed = 2;

    void validate() const;
};

struct TransferPair {
    Dataset source;
    Dataset target_train;
    Dataset target_val;
    Dataset target_test;
    Dataset target_shifted_test;
};

TransferPair make_transfer_pair(const TransferSpec& spec);

// Class means of the target distribution at a given total shift (exposed so
// tests can check the shift = 0 identity directly).
std::vector<std::vector<double>> transfer_class_means(const TransferSpec& spec, double total_shift,
                                                      bool target);

// Header "f0,...,f{d-1}[,y]"; UTF-8, LF, '.' decimal separator. Values
// round-trip bit-exactly through save_csv/load_csv.
Dataset load_csv(const std::string& path);
void save_csv(const Dataset& ds, const std::string& path);

struct SplitResult {
    Dataset train;
    Dataset val;
    Dataset test;
};

// Disjoint shuffled splits; same seed and growing fractions give nested
// training sets. Fractions must be positive and sum to at most 1.
SplitResult split(const Dataset& ds, const std::vector<double>& fractions, uint64_t seed);

}  // namespace btl
