#include "matssl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace matssl {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'S', 'L'};

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& bytes;
    const std::string& path;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > bytes.size()) {
            throw CheckpointError(path + ": truncated " + what + " at byte " + std::to_string(pos));
        }
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

Checkpoint make_checkpoint(const std::vector<NamedParam>& params, std::uint32_t epoch,
                           const std::array<std::uint64_t, 4>& rng_state,
                           std::string config_snapshot) {
    Checkpoint ckpt;
    ckpt.epoch = epoch;
    ckpt.rng_state = rng_state;
    ckpt.config_snapshot = std::move(config_snapshot);
    ckpt.params.reserve(params.size());
    for (const auto& p : params) {
        // deep copy so later optimizer steps cannot mutate the snapshot
        Tensor copy = Tensor::from(p.tensor.shape(),
                                   {p.tensor.data().begin(), p.tensor.data().end()});
        ckpt.params.push_back({p.name, copy});
    }
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string out;
    out.append(kMagic, 4);
    put_u16(out, ckpt.version);
    put_u32(out, ckpt.epoch);
    for (auto w : ckpt.rng_state) put_u64(out, w);
    put_u32(out, static_cast<std::uint32_t>(ckpt.config_snapshot.size()));
    out += ckpt.config_snapshot;
    put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& p : ckpt.params) {
        put_u16(out, static_cast<std::uint16_t>(p.name.size()));
        out += p.name;
        put_u32(out, static_cast<std::uint32_t>(p.tensor.ndim()));
        for (int i = 0; i < p.tensor.ndim(); ++i) {
            put_u32(out, static_cast<std::uint32_t>(p.tensor.dim(i)));
        }
    }
    for (const auto& p : ckpt.params) {
        for (float v : p.tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("write failed on '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{bytes, path};

    const std::string magic = r.str(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw CheckpointError(path + ": bad magic, not a checkpoint file");
    }
    Checkpoint ckpt;
    ckpt.version = r.u16("version");
    if (ckpt.version != 1) {
        throw CheckpointError(path + ": unsupported version " + std::to_string(ckpt.version));
    }
    ckpt.epoch = r.u32("epoch");
    for (auto& w : ckpt.rng_state) w = r.u64("rng state");
    const std::uint32_t cfg_len = r.u32("config length");
    ckpt.config_snapshot = r.str(cfg_len, "config snapshot");
    const std::uint32_t count = r.u32("parameter count");
    std::uint64_t payload_floats = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("name length");
        std::string name = r.str(name_len, "name");
        const std::uint32_t ndim = r.u32("rank");
        if (ndim == 0 || ndim > 8) {
            throw CheckpointError(path + ": parameter '" + name + "' has invalid rank " +
                                  std::to_string(ndim));
        }
        Shape shape(ndim);
        for (auto& d : shape) d = r.u32("dimension");
        payload_floats += static_cast<std::uint64_t>(shape_numel(shape));
        ckpt.params.push_back({std::move(name), Tensor::zeros(shape)});
    }
    const std::uint64_t have = (bytes.size() - r.pos) / 4;
    if (have != payload_floats || (bytes.size() - r.pos) % 4 != 0) {
        throw CheckpointError(path + ": payload length mismatch, manifest promises " +
                              std::to_string(payload_floats) + " floats, file carries " +
                              std::to_string(have));
    }
    for (auto& p : ckpt.params) {
        for (auto& v : p.tensor.data()) {
            v = std::bit_cast<float>(r.u32("payload"));
        }
    }
    return ckpt;
}

void apply_checkpoint(const Checkpoint& ckpt, std::vector<NamedParam>& target) {
    std::vector<bool> used(ckpt.params.size(), false);
    for (auto& t : target) {
        const NamedParam* found = nullptr;
        for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
            if (ckpt.params[i].name == t.name) {
                found = &ckpt.params[i];
                used[i] = true;
                break;
            }
        }
        if (!found) {
            throw CheckpointError("checkpoint is missing parameter '" + t.name + "'");
        }
        if (found->tensor.shape() != t.tensor.shape()) {
            throw CheckpointError("parameter '" + t.name + "' has shape " +
                                  shape_str(found->tensor.shape()) + " in the checkpoint, model expects " +
                                  shape_str(t.tensor.shape()));
        }
        std::copy(found->tensor.data().begin(), found->tensor.data().end(), t.tensor.data().begin());
        t.tensor.zero_grad();
    }
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        if (!used[i]) {
            throw CheckpointError("checkpoint parameter '" + ckpt.params[i].name +
                                  "' has no counterpart in the model");
        }
    }
}

void apply_checkpoint(const Checkpoint& ckpt, ParamStore& target) {
    apply_checkpoint(ckpt, target.entries());
}

}  // namespace matssl
