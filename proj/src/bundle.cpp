#include "btl/bundle.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "btl/errors.hpp"

namespace btl {

namespace {

constexpr char kPriorMagic[8] = {'B', 'P', 'R', 'I', 'O', 'R', '1', '\0'};
constexpr char kCheckpointMagic[8] = {'B', 'C', 'H', 'K', 'P', 'T', '1', '\0'};
constexpr uint32_t kFormatVersion = 1;

class Writer {
public:
    explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open '" + path + "' for writing");
    }
    void bytes(const void* p, size_t n) { out_.write(static_cast<const char*>(p), n); }
    void u32(uint32_t v) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        bytes(b, 4);
    }
    void f64(double v) {
        const uint64_t u = std::bit_cast<uint64_t>(v);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xff);
        bytes(b, 8);
    }
    void close() {
        out_.flush();
        if (!out_) throw IoError("write failure on '" + path_ + "'");
    }

private:
    std::string path_;
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open '" + path + "'");
    }
    void bytes(void* p, size_t n) {
        in_.read(static_cast<char*>(p), n);
        if (static_cast<size_t>(in_.gcount()) != n) {
            throw ParseError("'" + path_ + "': truncated file (wanted " + std::to_string(n) +
                             " more bytes)");
        }
    }
    uint32_t u32() {
        unsigned char b[4];
        bytes(b, 4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
        return v;
    }
    double f64() {
        unsigned char b[8];
        bytes(b, 8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
        return std::bit_cast<double>(v);
    }
    void expect_magic(const char (&magic)[8]) {
        char got[8];
        bytes(got, 8);
        if (std::memcmp(got, magic, 8) != 0) {
            throw ParseError("'" + path_ + "': bad magic, not a recognized container");
        }
    }
    void expect_eof() {
        char c;
        in_.read(&c, 1);
        if (!in_.eof()) throw ParseError("'" + path_ + "': trailing bytes after payload");
    }
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ifstream in_;
};

void write_string(Writer& w, const std::string& s) {
    w.u32(static_cast<uint32_t>(s.size()));
    w.bytes(s.data(), s.size());
}

std::string read_string(Reader& r) {
    const uint32_t n = r.u32();
    std::string s(n, '\0');
    if (n > 0) r.bytes(s.data(), n);
    return s;
}

}  // namespace

std::string layout_to_json(const ParamLayout& layout) {
    nlohmann::json j;
    j["total_dim"] = layout.total_dim;
    j["blocks"] = nlohmann::json::array();
    for (const auto& b : layout.blocks) {
        j["blocks"].push_back(
            {{"name", b.name}, {"offset", b.offset}, {"length", b.length}, {"filters", b.filters}});
    }
    j["groups"] = nlohmann::json::object();
    for (const auto& [group, members] : layout.groups) j["groups"][group] = members;
    return j.dump();
}

ParamLayout layout_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParseError("layout JSON: malformed document");
    ParamLayout layout;
    try {
        layout.total_dim = j.at("total_dim").get<int>();
        for (const auto& b : j.at("blocks")) {
            layout.blocks.push_back({b.at("name").get<std::string>(), b.at("offset").get<int>(),
                                     b.at("length").get<int>(), b.at("filters").get<int>()});
        }
        for (const auto& [group, members] : j.at("groups").items()) {
            layout.groups[group] = members.get<std::vector<std::string>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("layout JSON: ") + e.what());
    }
    layout.validate();
    return layout;
}

void save_prior_bundle(const std::string& path, const PriorBundle& bundle) {
    const LowRankGaussian& p = bundle.prior;
    const int d = p.dim();
    const int rank = p.rank();

    Writer w(path);
    w.bytes(kPriorMagic, 8);
    w.u32(kFormatVersion);
    w.u32(static_cast<uint32_t>(d));
    w.u32(static_cast<uint32_t>(rank));
    w.f64(p.scale());
    for (int i = 0; i < d; ++i) w.f64(p.mean()[i]);
    for (int i = 0; i < d; ++i) w.f64(p.diag_var()[i]);
    for (int c = 0; c < rank; ++c)
        for (int i = 0; i < d; ++i) w.f64(p.deviations()(i, c));

    nlohmann::json meta;
    meta["layout"] = nlohmann::json::parse(layout_to_json(bundle.layout));
    meta["group"] = bundle.group;
    meta["dev_denom"] = p.dev_denom();
    write_string(w, meta.dump());
    w.close();
}

PriorBundle load_prior_bundle(const std::string& path) {
    Reader r(path);
    r.expect_magic(kPriorMagic);
    const uint32_t version = r.u32();
    if (version != kFormatVersion) {
        throw ParseError("'" + path + "': unsupported prior bundle version " +
                         std::to_string(version));
    }
    const uint32_t d = r.u32();
    const uint32_t rank = r.u32();
    if (d == 0 || d > (1u << 28) || rank > d) {
        throw ParseError("'" + path + "': implausible dimensions d=" + std::to_string(d) +
                         " L=" + std::to_string(rank));
    }
    const double scale = r.f64();
    ParamVector mean(d);
    for (auto& v : mean) v = r.f64();
    std::vector<double> diag(d);
    for (auto& v : diag) v = r.f64();
    Matrix dev(rank > 0 ? static_cast<int>(d) : 0, static_cast<int>(rank));
    for (uint32_t c = 0; c < rank; ++c)
        for (uint32_t i = 0; i < d; ++i) dev(static_cast<int>(i), static_cast<int>(c)) = r.f64();

    nlohmann::json meta = nlohmann::json::parse(read_string(r), nullptr, false);
    if (meta.is_discarded()) throw ParseError("'" + path + "': malformed metadata JSON");
    r.expect_eof();

    try {
        PriorBundle bundle{
            LowRankGaussian(std::move(mean), std::move(diag), std::move(dev), scale,
                            meta.at("dev_denom").get<double>()),
            layout_from_json(meta.at("layout").dump()), meta.at("group").get<std::string>()};
        if (bundle.layout.group_length(bundle.group) != bundle.prior.dim()) {
            throw ParseError("'" + path + "': prior dimension does not match its group length");
        }
        return bundle;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("'" + path + "': metadata: " + e.what());
    }
}

void save_checkpoint(const std::string& path, const ParamVector& params,
                     const ParamLayout& layout) {
    if (static_cast<int>(params.size()) != layout.total_dim) {
        throw DimensionError("save_checkpoint: params length " + std::to_string(params.size()) +
                             " vs layout total_dim " + std::to_string(layout.total_dim));
    }
    Writer w(path);
    w.bytes(kCheckpointMagic, 8);
    w.u32(kFormatVersion);
    w.u32(static_cast<uint32_t>(params.size()));
    for (double v : params) w.f64(v);
    write_string(w, layout_to_json(layout));
    w.close();
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader r(path);
    r.expect_magic(kCheckpointMagic);
    const uint32_t version = r.u32();
    if (version != kFormatVersion) {
        throw ParseError("'" + path + "': unsupported checkpoint version " +
                         std::to_string(version));
    }
    const uint32_t d = r.u32();
    Checkpoint ck;
    ck.params.resize(d);
    for (auto& v : ck.params) v = r.f64();
    ck.layout = layout_from_json(read_string(r));
    r.expect_eof();
    if (ck.layout.total_dim != static_cast<int>(d)) {
        throw ParseError("'" + path + "': params length does not match layout");
    }
    return ck;
}

}  // namespace btl
