#include "btl/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "btl/errors.hpp"
#include "btl/rng.hpp"

namespace btl {

int Dataset::num_classes() const {
    int k = 0;
    for (int y : labels) k = std::max(k, y + 1);
    return k;
}

void TransferSpec::validate() const {
    if (dim < 1) throw ConfigError("transfer spec: dim must be >= 1");
    const int active = active_dims == 0 ? dim : active_dims;
    if (active < 1 || active > dim) {
        throw ConfigError("transfer spec: active_dims " + std::to_string(active_dims) +
                          " outside [1, dim = " + std::to_string(dim) + "]");
    }
    if (source_classes < 1 || target_classes < 1) {
        throw ConfigError("transfer spec: class counts must be >= 1");
    }
    if (!(cluster_sd > 0.0)) throw ConfigError("transfer spec: cluster_sd must be positive");
    if (shift < 0.0) throw ConfigError("transfer spec: shift must be non-negative");
    for (int n : {n_source, n_target_train, n_target_val, n_target_test, n_shifted_test}) {
        if (n < 1) throw ConfigError("transfer spec: dataset sizes must be >= 1");
    }
}

namespace {

std::vector<std::vector<double>> base_class_means(const TransferSpec& spec, int count) {
    const int active = spec.active_dims == 0 ? spec.dim : spec.active_dims;
    RngStream rng(derive_seed(spec.source_seed, "class-means"));
    std::vector<std::vector<double>> means;
    for (int c = 0; c < count; ++c) {
        std::vector<double> m(spec.dim, 0.0);
        double norm = 0.0;
        for (int i = 0; i < active; ++i) {
            m[i] = rng.normal();
            norm += m[i] * m[i];
        }
        norm = std::sqrt(norm);
        if (norm < 1e-12) norm = 1.0;
        for (int i = 0; i < active; ++i) m[i] /= norm;
        means.push_back(std::move(m));
    }
    return means;
}

// Rotation by `angle` applied in consecutive coordinate planes of the active
// subspace, followed by a translation of magnitude `angle` along a fixed unit
// vector drawn over the full space. The translation component outside the
// active subspace moves the target task onto input coordinates the source
// never used.
void apply_shift(std::vector<std::vector<double>>& means, const TransferSpec& spec, double angle) {
    const int active = spec.active_dims == 0 ? spec.dim : spec.active_dims;
    if (angle == 0.0) return;
    const double c = std::cos(angle), s = std::sin(angle);
    for (auto& m : means) {
        for (int p = 0; p + 1 < active; p += 2) {
            const double a = m[p], b = m[p + 1];
            m[p] = c * a - s * b;
            m[p + 1] = s * a + c * b;
        }
    }
    RngStream rng(derive_seed(spec.source_seed, "shift-direction"));
    std::vector<double> u(spec.dim, 0.0);
    double norm = 0.0;
    for (int i = 0; i < spec.dim; ++i) {
        u[i] = rng.normal();
        norm += u[i] * u[i];
    }
    norm = std::sqrt(norm);
    for (auto& m : means) {
        for (int i = 0; i < spec.dim; ++i) m[i] += angle * u[i] / norm;
    }
}

Dataset draw_clusters(const std::vector<std::vector<double>>& means, int n, double sd, int dim,
                      uint64_t seed, const std::string& name) {
    RngStream rng(seed);
    const int k = static_cast<int>(means.size());
    Dataset ds;
    ds.name = name;
    ds.features = Matrix(n, dim);
    ds.labels.resize(n);
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i % k;  // balanced classes
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (int i = 0; i < n; ++i) {
        const int y = order[i];
        ds.labels[i] = y;
        double* row = ds.features.row(i);
        for (int j = 0; j < dim; ++j) row[j] = means[y][j] + sd * rng.normal();
    }
    return ds;
}

}  // namespace

std::vector<std::vector<double>> transfer_class_means(const TransferSpec& spec, double total_shift,
                                                      bool target) {
    const int count = std::max(spec.source_classes, target ? spec.target_classes : 0);
    auto means = base_class_means(spec, count);
    means.resize(target ? spec.target_classes : spec.source_classes);
    if (target) apply_shift(means, spec, total_shift);
    return means;
}

TransferPair make_transfer_pair(const TransferSpec& spec) {
    spec.validate();
    const auto source_means = transfer_class_means(spec, 0.0, false);
    const auto target_means = transfer_class_means(spec, spec.shift, true);
    const auto shifted_means =
        transfer_class_means(spec, spec.shift + spec.shifted_test_extra, true);

    TransferPair pair;
    pair.source = draw_clusters(source_means, spec.n_source, spec.cluster_sd, spec.dim,
                                derive_seed(spec.source_seed, "source-draws"), "source");
    pair.target_train = draw_clusters(target_means, spec.n_target_train, spec.cluster_sd, spec.dim,
                                      derive_seed(spec.target_seed, "train-draws"), "target_train");
    pair.target_val = draw_clusters(target_means, spec.n_target_val, spec.cluster_sd, spec.dim,
                                    derive_seed(spec.target_seed, "val-draws"), "target_val");
    pair.target_test = draw_clusters(target_means, spec.n_target_test, spec.cluster_sd, spec.dim,
                                     derive_seed(spec.target_seed, "test-draws"), "target_test");
    pair.target_shifted_test =
        draw_clusters(shifted_means, spec.n_shifted_test, spec.cluster_sd, spec.dim,
                      derive_seed(spec.target_seed, "shifted-draws"), "target_shifted_test");
    return pair;
}

Dataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_csv: cannot open '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw ParseError("load_csv: '" + path + "' missing header at line 1");
    if (!line.empty() && line.back() == '\r') line.pop_back();

    std::vector<std::string> header;
    {
        size_t start = 0;
        while (start <= line.size()) {
            const size_t comma = line.find(',', start);
            header.push_back(line.substr(start, comma == std::string::npos ? std::string::npos
                                                                           : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
    }
    const bool labeled = !header.empty() && header.back() == "y";
    const int d = static_cast<int>(header.size()) - (labeled ? 1 : 0);
    if (d < 1) throw ParseError("load_csv: '" + path + "' header has no feature columns at line 1");
    for (int i = 0; i < d; ++i) {
        if (header[i] != "f" + std::to_string(i)) {
            throw ParseError("load_csv: '" + path + "' malformed header at line 1 (expected f" +
                             std::to_string(i) + ", got '" + header[i] + "')");
        }
    }

    std::vector<double> values;
    std::vector<int> labels;
    int n = 0, line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        size_t start = 0;
        int col = 0;
        const int expected_cols = d + (labeled ? 1 : 0);
        while (start <= line.size()) {
            const size_t comma = line.find(',', start);
            const std::string cell =
                line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
            if (col >= expected_cols) {
                throw ParseError("load_csv: '" + path + "' line " + std::to_string(line_no) +
                                 " has more than " + std::to_string(expected_cols) + " columns");
            }
            const char* begin = cell.data();
            const char* end = begin + cell.size();
            if (col < d) {
                double v = 0.0;
                auto [ptr, ec] = std::from_chars(begin, end, v);
                if (ec != std::errc{} || ptr != end) {
                    throw ParseError("load_csv: '" + path + "' non-numeric cell '" + cell +
                                     "' at line " + std::to_string(line_no));
                }
                values.push_back(v);
            } else {
                int y = 0;
                auto [ptr, ec] = std::from_chars(begin, end, y);
                if (ec != std::errc{} || ptr != end || y < 0) {
                    throw ParseError("load_csv: '" + path + "' bad label '" + cell + "' at line " +
                                     std::to_string(line_no));
                }
                labels.push_back(y);
            }
            ++col;
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (col != expected_cols) {
            throw ParseError("load_csv: '" + path + "' line " + std::to_string(line_no) + " has " +
                             std::to_string(col) + " columns, expected " +
                             std::to_string(expected_cols));
        }
        ++n;
    }
    if (n == 0) throw ParseError("load_csv: '" + path + "' has no data rows");

    Dataset ds;
    ds.name = path;
    ds.features = Matrix(n, d);
    std::copy(values.begin(), values.end(), ds.features.data());
    ds.labels = std::move(labels);
    return ds;
}

void save_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_csv: cannot open '" + path + "' for writing");
    for (int j = 0; j < ds.dim(); ++j) out << (j ? ",f" : "f") << j;
    if (ds.labeled()) out << ",y";
    out << "\n";
    char buf[64];
    for (int i = 0; i < ds.size(); ++i) {
        for (int j = 0; j < ds.dim(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", ds.features(i, j));
            if (j) out << ',';
            out << buf;
        }
        if (ds.labeled()) out << ',' << ds.labels[i];
        out << "\n";
    }
    if (!out) throw IoError("save_csv: write failure on '" + path + "'");
}

SplitResult split(const Dataset& ds, const std::vector<double>& fractions, uint64_t seed) {
    if (fractions.empty() || fractions.size() > 3) {
        throw ConfigError("split: need 1 to 3 fractions");
    }
    double total = 0.0;
    for (double f : fractions) {
        if (!(f > 0.0)) throw ConfigError("split: fractions must be positive");
        total += f;
    }
    if (total > 1.0 + 1e-12) throw ConfigError("split: fractions sum to more than 1");

    std::vector<int> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    RngStream rng(seed);
    std::shuffle(order.begin(), order.end(), rng.engine());

    auto take = [&](int from, int count, const std::string& name) {
        Dataset part;
        part.name = ds.name.empty() ? name : ds.name + "/" + name;
        part.features = Matrix(count, ds.dim());
        if (ds.labeled()) part.labels.resize(count);
        for (int i = 0; i < count; ++i) {
            const int src = order[from + i];
            std::copy(ds.features.row(src), ds.features.row(src) + ds.dim(),
                      part.features.row(i));
            if (ds.labeled()) part.labels[i] = ds.labels[src];
        }
        return part;
    };

    SplitResult out;
    double cum = 0.0;
    int prev_boundary = 0;
    const char* names[] = {"train", "val", "test"};
    Dataset* parts[] = {&out.train, &out.val, &out.test};
    for (size_t i = 0; i < fractions.size(); ++i) {
        cum += fractions[i];
        const int boundary = static_cast<int>(std::llround(cum * ds.size()));
        const int count = boundary - prev_boundary;
        if (count <= 0) {
            throw ConfigError("split: fraction " + std::to_string(fractions[i]) +
                              " yields an empty '" + names[i] + "' split");
        }
        *parts[i] = take(prev_boundary, count, names[i]);
        prev_boundary = boundary;
    }
    return out;
}

}  // namespace btl
