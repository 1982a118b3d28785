// Binary checkpoint: magic "MSSL", version, epoch, rng state, config snapshot,
// a name/shape manifest, then the little-endian float32 payload in manifest
// order. All multi-byte fields are written little-endian byte by byte, so the
// format is identical on every platform and save -> load -> save is a no-op.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "matssl/params.hpp"

namespace matssl {

struct Checkpoint {
    std::uint16_t version = 1;
    std::uint32_t epoch = 0;
    std::array<std::uint64_t, 4> rng_state{};
    std::string config_snapshot;
    std::vector<NamedParam> params;
};

Checkpoint make_checkpoint(const std::vector<NamedParam>& params, std::uint32_t epoch = 0,
                           const std::array<std::uint64_t, 4>& rng_state = {},
                           std::string config_snapshot = {});

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint values into the target parameters. The name sets must
// match exactly and shapes must agree; the error names the first offending
// parameter.
void apply_checkpoint(const Checkpoint& ckpt, std::vector<NamedParam>& target);
void apply_checkpoint(const Checkpoint& ckpt, ParamStore& target);

}  // namespace matssl
