#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "l0drop/config.hpp"
#include "l0drop/errors.hpp"
#include "l0drop/l0drop.hpp"
#include "l0drop/model.hpp"
#include "l0drop/optim.hpp"
#include "l0drop/trainer.hpp"

namespace l0drop {

// Checkpoint file layout (all integers little-endian):
//
//   8 bytes   magic "L0DROPCK"
//   u32       format version (1)
//   u64       metadata length, then that many bytes of key=value lines
//   u64       entry count
//   entries:  u32 name length, name bytes, u8 dtype (1 = f32, 2 = f64),
//             u32 rank, rank x u64 dims, u64 payload offset, u64 payload bytes
//   payload:  raw little-endian values; offsets are relative to its start
//
// Entries are "param/<name>", "adam_m/<name>" and "adam_v/<name>", sorted by
// name. Metadata holds the model and training configuration, the optimizer
// step, random-stream counters and vocabulary hashes; it contains nothing
// time-dependent, so saving a loaded checkpoint reproduces the same bytes.
inline constexpr char kCheckpointMagic[8] = {'L', '0', 'D', 'R', 'O', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    std::uint8_t dtype = 2;
    std::vector<std::uint64_t> dims;
    std::vector<unsigned char> bytes;
};

struct CheckpointFile {
    ConfigMap meta;
    std::vector<CheckpointEntry> entries;  // sorted by name

    const CheckpointEntry* find(const std::string& name) const {
        for (const auto& e : entries) {
            if (e.name == name) {
                return &e;
            }
        }
        return nullptr;
    }
};

namespace detail {

inline void put_u(std::vector<unsigned char>& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) {
        out.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
}

class ByteReader {
public:
    explicit ByteReader(const std::vector<unsigned char>& b) : b_{b} {}
    std::uint64_t u(int bytes) {
        need(static_cast<std::size_t>(bytes));
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) {
            v |= static_cast<std::uint64_t>(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        }
        pos_ += static_cast<std::size_t>(bytes);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(b_.begin() + static_cast<long>(pos_), b_.begin() + static_cast<long>(pos_ + n));
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    std::size_t size() const { return b_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) {
            throw DataError("checkpoint is truncated");
        }
    }
    const std::vector<unsigned char>& b_;
    std::size_t pos_ = 0;
};

template <class T>
constexpr std::uint8_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 1 : 2;
}

template <class T>
std::vector<unsigned char> encode_values(const std::vector<T>& v) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    std::vector<unsigned char> out;
    out.reserve(v.size() * sizeof(T));
    for (const T x : v) {
        U bits;
        std::memcpy(&bits, &x, sizeof(T));
        put_u(out, bits, sizeof(T));
    }
    return out;
}

template <class T>
std::vector<T> decode_values(const CheckpointEntry& e) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    if (e.dtype != dtype_code<T>()) {
        throw DataError("checkpoint entry " + e.name + " has a different numeric precision");
    }
    if (e.bytes.size() % sizeof(T) != 0) {
        throw DataError("checkpoint entry " + e.name + " has a ragged payload");
    }
    std::vector<T> out(e.bytes.size() / sizeof(T));
    ByteReader r(e.bytes);
    for (auto& x : out) {
        const U bits = static_cast<U>(r.u(sizeof(T)));
        std::memcpy(&x, &bits, sizeof(T));
    }
    return out;
}

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const CheckpointFile& f) {
    std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 8);
    detail::put_u(out, kCheckpointVersion, 4);
    const std::string meta = f.meta.to_text();
    detail::put_u(out, meta.size(), 8);
    out.insert(out.end(), meta.begin(), meta.end());
    auto entries = f.entries;
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    detail::put_u(out, entries.size(), 8);
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        detail::put_u(out, e.name.size(), 4);
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.push_back(e.dtype);
        detail::put_u(out, e.dims.size(), 4);
        for (auto d : e.dims) {
            detail::put_u(out, d, 8);
        }
        detail::put_u(out, offset, 8);
        detail::put_u(out, e.bytes.size(), 8);
        offset += e.bytes.size();
    }
    for (const auto& e : entries) {
        out.insert(out.end(), e.bytes.begin(), e.bytes.end());
    }
    return out;
}

inline CheckpointFile parse_checkpoint(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw DataError("not a checkpoint file (bad magic)");
    }
    detail::ByteReader r(bytes);
    r.str(8);
    const auto version = r.u(4);
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    CheckpointFile f;
    f.meta = ConfigMap::parse(r.str(r.u(8)));
    const auto count = r.u(8);
    struct Pending {
        std::uint64_t offset, size;
    };
    std::vector<Pending> pend;
    for (std::uint64_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name = r.str(r.u(4));
        e.dtype = static_cast<std::uint8_t>(r.u(1));
        if (e.dtype != 1 && e.dtype != 2) {
            throw DataError("checkpoint entry " + e.name + " has unknown dtype");
        }
        const auto rank = r.u(4);
        std::uint64_t numel = 1;
        for (std::uint64_t k = 0; k < rank; ++k) {
            e.dims.push_back(r.u(8));
            numel *= e.dims.back();
        }
        const auto off = r.u(8), size = r.u(8);
        if (size != numel * (e.dtype == 1 ? 4 : 8)) {
            throw DataError("checkpoint entry " + e.name + " size does not match its shape");
        }
        pend.push_back({off, size});
        f.entries.push_back(std::move(e));
    }
    const std::size_t base = r.pos();
    for (std::size_t i = 0; i < f.entries.size(); ++i) {
        const auto [off, size] = pend[i];
        if (base + off + size > bytes.size()) {
            throw DataError("checkpoint payload is truncated");
        }
        f.entries[i].bytes.assign(bytes.begin() + static_cast<long>(base + off),
                                  bytes.begin() + static_cast<long>(base + off + size));
    }
    return f;
}

inline void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& f) {
    const auto bytes = serialize_checkpoint(f);
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw DataError("cannot write checkpoint " + path.string());
    }
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw DataError("cannot read " + path.string());
    }
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
    return parse_checkpoint(read_file_bytes(path));
}

// Metadata the checkpoint carries beyond tensors.
struct CheckpointInfo {
    std::uint64_t src_vocab_hash = 0;
    std::uint64_t tgt_vocab_hash = 0;
    TrainConfig train;
};

template <class T>
CheckpointFile make_checkpoint(const TrainState<T>& st, const CheckpointInfo& info) {
    CheckpointFile f;
    model_config_to(st.model.cfg, f.meta);
    train_config_to(info.train, f.meta);
    std::ostringstream b, e;
    b << std::setprecision(17) << st.model.hc.beta;
    e << std::setprecision(17) << st.model.hc.eps;
    f.meta.set("beta", b.str());
    f.meta.set("eps", e.str());
    std::string layers;
    for (auto l : st.model.placement.layers) {
        layers += (layers.empty() ? "" : ",") + std::to_string(l);
    }
    f.meta.set("gate_layers", layers);
    f.meta.set("placement", st.model.placement.kind == GatePlacement::Kind::top        ? "top"
                            : st.model.placement.kind == GatePlacement::Kind::per_layer ? "per_layer"
                                                                                        : "custom");
    f.meta.set("src_vocab", std::to_string(st.model.cfg.src_vocab));
    f.meta.set("tgt_vocab", std::to_string(st.model.cfg.tgt_vocab));
    f.meta.set("src_vocab_hash", std::to_string(info.src_vocab_hash));
    f.meta.set("tgt_vocab_hash", std::to_string(info.tgt_vocab_hash));
    f.meta.set("numeric", std::is_same_v<T, float> ? "fast" : "verify");
    f.meta.set("step", std::to_string(st.step));
    f.meta.set("adam_steps", std::to_string(st.adam.steps()));
    f.meta.set("rng.data", std::to_string(st.data_rng.seed()) + ":" + std::to_string(st.data_rng.stream()) + ":" +
                               std::to_string(st.data_rng.counter()));
    f.meta.set("rng.dropout", std::to_string(st.dropout_rng.seed()) + ":" + std::to_string(st.dropout_rng.stream()) +
                                  ":" + std::to_string(st.dropout_rng.counter()));
    f.meta.set("rng.gate", std::to_string(st.gate_rng.seed()) + ":" + std::to_string(st.gate_rng.stream()) + ":" +
                               std::to_string(st.gate_rng.counter()));
    auto add = [&](const std::string& name, const Shape& shape, const std::vector<T>& v) {
        CheckpointEntry en;
        en.name = name;
        en.dtype = detail::dtype_code<T>();
        en.dims.assign(shape.begin(), shape.end());
        en.bytes = detail::encode_values(v);
        f.entries.push_back(std::move(en));
    };
    for (const auto& [name, t] : st.model.params.tensors) {
        add("param/" + name, t.shape(), t.values());
    }
    for (const auto& [name, m] : st.adam.first_moments()) {
        add("adam_m/" + name, st.model.params.get(name).shape(), m);
    }
    for (const auto& [name, v] : st.adam.second_moments()) {
        add("adam_v/" + name, st.model.params.get(name).shape(), v);
    }
    std::sort(f.entries.begin(), f.entries.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return f;
}

namespace detail {

inline RngState parse_rng(const std::string& s) {
    std::uint64_t seed = 0, stream = 0, counter = 0;
    char c1 = 0, c2 = 0;
    std::istringstream is(s);
    if (!(is >> seed >> c1 >> stream >> c2 >> counter) || c1 != ':' || c2 != ':') {
        throw DataError("malformed random-stream state '" + s + "' in checkpoint");
    }
    RngState r(seed, stream);
    r.set_counter(counter);
    return r;
}

}  // namespace detail

inline std::string checkpoint_numeric_mode(const CheckpointFile& f) { return f.meta.get("numeric", "verify"); }

template <class T>
TrainState<T> restore_checkpoint(const CheckpointFile& f, CheckpointInfo* info = nullptr) {
    const std::string want = std::is_same_v<T, float> ? "fast" : "verify";
    if (checkpoint_numeric_mode(f) != want) {
        throw DataError("checkpoint was written in " + checkpoint_numeric_mode(f) + " mode");
    }
    ModelConfig cfg = model_config_from(f.meta);
    cfg.src_vocab = f.meta.get_uint("src_vocab", 0);
    cfg.tgt_vocab = f.meta.get_uint("tgt_vocab", 0);
    cfg.validate();
    const TrainConfig tc = train_config_from(f.meta);
    TrainState<T> st;
    st.model.cfg = cfg;
    st.model.hc.beta = f.meta.get_double("beta", st.model.hc.beta);
    st.model.hc.eps = f.meta.get_double("eps", st.model.hc.eps);
    st.model.hc.validate();
    std::vector<std::size_t> layers;
    {
        std::stringstream ss(f.meta.get("gate_layers", ""));
        std::string item;
        while (std::getline(ss, item, ',')) {
            layers.push_back(std::stoul(item));
        }
    }
    const auto kind_s = f.meta.get("placement", "top");
    st.model.placement.kind = kind_s == "top"         ? GatePlacement::Kind::top
                              : kind_s == "per_layer" ? GatePlacement::Kind::per_layer
                                                      : GatePlacement::Kind::custom;
    st.model.placement.layers = layers.empty() ? std::vector<std::size_t>{cfg.layers} : layers;
    for (const auto& e : f.entries) {
        const auto slash = e.name.find('/');
        const auto group = e.name.substr(0, slash);
        const auto name = e.name.substr(slash + 1);
        auto values = detail::decode_values<T>(e);
        if (group == "param") {
            Shape shape(e.dims.begin(), e.dims.end());
            st.model.params.tensors.emplace(name, Tensor<T>(std::move(shape), std::move(values), true));
        } else if (group == "adam_m") {
            st.adam.first_moments()[name] = std::move(values);
        } else if (group == "adam_v") {
            st.adam.second_moments()[name] = std::move(values);
        } else {
            throw DataError("unknown checkpoint entry " + e.name);
        }
    }
    st.adam = [&] {
        Adam<T> a(tc.adam);
        a.first_moments() = st.adam.first_moments();
        a.second_moments() = st.adam.second_moments();
        a.set_steps(f.meta.get_uint("adam_steps", 0));
        return a;
    }();
    st.step = f.meta.get_uint("step", 0);
    st.data_rng = detail::parse_rng(f.meta.get("rng.data", "0:1:0"));
    st.dropout_rng = detail::parse_rng(f.meta.get("rng.dropout", "0:2:0"));
    st.gate_rng = detail::parse_rng(f.meta.get("rng.gate", "0:3:0"));
    if (info) {
        info->src_vocab_hash = f.meta.get_uint("src_vocab_hash", 0);
        info->tgt_vocab_hash = f.meta.get_uint("tgt_vocab_hash", 0);
        info->train = tc;
    }
    return st;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const TrainState<T>& st, const CheckpointInfo& info) {
    write_checkpoint_file(path, make_checkpoint(st, info));
}

template <class T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr) {
    return restore_checkpoint<T>(read_checkpoint_file(path), info);
}

}  // namespace l0drop
