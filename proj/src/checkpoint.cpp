#include "kdc/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace kdc {

namespace {

constexpr std::array<char, 8> kMagic{'K', 'D', 'C', 'T', '0', '0', '0', '1'};
constexpr const char* kMetaName = "meta";

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    void u32(std::uint32_t v) {
        std::array<char, 4> b;
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
        out_.write(b.data(), 4);
    }
    void f64(double v) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        std::array<char, 8> b;
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
        out_.write(b.data(), 8);
    }
    void bytes(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
    void finish() {
        out_.flush();
        if (!out_) throw std::runtime_error("write failed: " + path_.string());
    }

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw std::runtime_error("cannot open " + path.string());
    }
    void bytes(char* p, std::size_t n) {
        in_.read(p, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw std::runtime_error(path_.string() + ": truncated checkpoint");
        }
    }
    std::uint32_t u32() {
        std::array<unsigned char, 4> b;
        bytes(reinterpret_cast<char*>(b.data()), 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    double f64() {
        std::array<unsigned char, 8> b;
        bytes(reinterpret_cast<char*>(b.data()), 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return std::bit_cast<double>(v);
    }
    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

private:
    std::filesystem::path path_;
    std::ifstream in_;
};

std::vector<double> meta_values(const NetworkConfig& c) {
    return {static_cast<double>(c.depth),           static_cast<double>(c.in_channels),
            static_cast<double>(c.filters),         static_cast<double>(c.bottleneck),
            static_cast<double>(c.kernel_sizes[0]), static_cast<double>(c.kernel_sizes[1]),
            static_cast<double>(c.kernel_sizes[2]), static_cast<double>(c.residual_every),
            static_cast<double>(c.num_classes)};
}

NetworkConfig config_from_meta(const TensorRecord& r) {
    if (r.values.size() != 9) throw std::runtime_error("checkpoint: malformed meta record");
    std::array<std::size_t, 9> v;
    for (std::size_t i = 0; i < 9; ++i) {
        const double x = r.values[i];
        if (!(x >= 0.0) || x != std::floor(x) || x > 1e9) {
            throw std::runtime_error("checkpoint: malformed meta record");
        }
        v[i] = static_cast<std::size_t>(x);
    }
    NetworkConfig c;
    c.depth = v[0];
    c.in_channels = v[1];
    c.filters = v[2];
    c.bottleneck = v[3];
    c.kernel_sizes = {v[4], v[5], v[6]};
    c.residual_every = v[7];
    c.num_classes = v[8];
    return c;
}

void append_store(std::vector<TensorRecord>& out, const ParamStore& store) {
    for (std::size_t s = 0; s < store.slots().size(); ++s) {
        const auto values = store[s];
        out.push_back({store.slots()[s].name, store.slots()[s].shape,
                       std::vector<double>(values.begin(), values.end())});
    }
}

}  // namespace

void write_records(const std::filesystem::path& path, const std::vector<TensorRecord>& records) {
    Writer w(path);
    w.bytes(kMagic.data(), kMagic.size());
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        std::size_t expected = 1;
        for (auto d : r.shape) expected *= d;
        if (expected != r.values.size()) {
            throw std::invalid_argument("record " + r.name + ": shape does not match value count");
        }
        w.u32(static_cast<std::uint32_t>(r.name.size()));
        w.bytes(r.name.data(), r.name.size());
        w.u32(static_cast<std::uint32_t>(r.shape.size()));
        for (auto d : r.shape) w.u32(d);
        for (double v : r.values) w.f64(v);
    }
    w.finish();
}

std::vector<TensorRecord> read_records(const std::filesystem::path& path) {
    Reader r(path);
    std::array<char, 8> magic;
    r.bytes(magic.data(), magic.size());
    if (magic != kMagic) throw std::runtime_error(path.string() + ": not a KDCT0001 checkpoint");
    const std::uint32_t count = r.u32();
    std::vector<TensorRecord> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorRecord rec;
        rec.name.resize(r.u32());
        r.bytes(rec.name.data(), rec.name.size());
        rec.shape.resize(r.u32());
        std::size_t n = 1;
        for (auto& d : rec.shape) {
            d = r.u32();
            n *= d;
        }
        rec.values.resize(n);
        for (double& v : rec.values) v = r.f64();
        out.push_back(std::move(rec));
    }
    if (!r.at_end()) throw std::runtime_error(path.string() + ": trailing bytes after last record");
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    std::vector<TensorRecord> records;
    records.push_back({kMetaName, {9}, meta_values(params.config)});
    append_store(records, params.weights);
    append_store(records, params.buffers);
    write_records(path, records);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    const auto records = read_records(path);
    if (records.empty() || records.front().name != kMetaName) {
        throw std::runtime_error(path.string() + ": missing meta record");
    }
    ModelParams p = ModelParams::build(config_from_meta(records.front()));
    const std::size_t expected = 1 + p.weights.slots().size() + p.buffers.slots().size();
    if (records.size() != expected) {
        throw std::runtime_error(path.string() + ": expected " + std::to_string(expected) +
                                 " records, found " + std::to_string(records.size()));
    }
    std::vector<std::string> seen;
    for (std::size_t i = 1; i < records.size(); ++i) {
        const auto& rec = records[i];
        if (std::find(seen.begin(), seen.end(), rec.name) != seen.end()) {
            throw std::runtime_error(path.string() + ": duplicate tensor " + rec.name);
        }
        seen.push_back(rec.name);
        ParamStore* store = &p.weights;
        std::size_t slot = store->find(rec.name);
        if (slot == store->slots().size()) {
            store = &p.buffers;
            slot = store->find(rec.name);
        }
        if (slot == store->slots().size()) {
            throw std::runtime_error(path.string() + ": unknown tensor " + rec.name);
        }
        if (store->slots()[slot].shape != rec.shape) {
            throw std::runtime_error(path.string() + ": shape mismatch for " + rec.name);
        }
        std::copy(rec.values.begin(), rec.values.end(), (*store)[slot].begin());
    }
    return p;
}

}  // namespace kdc
