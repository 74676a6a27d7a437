#pragma once

#include <string>

#include "rtcl/experiment.hpp"
#include "rtcl/state.hpp"

namespace rtcl {

// Binary container: magic "RTCL", format version, then named sections
// (config, backbone, adapters, router, memory), each digest-protected.
// Tensors are stored as little-endian float32 with shape headers, so a
// round trip is bit-exact for f32-representable values.
inline constexpr char kCheckpointMagic[4] = {'R', 'T', 'C', 'L'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
    ExperimentConfig config;
    ContinualState state;
};

void save_checkpoint(const ContinualState& state, const ExperimentConfig& config,
                     const std::string& path);
LoadedCheckpoint load_checkpoint(const std::string& path);

// In-memory forms, used by the file functions and the round-trip tests.
std::string encode_checkpoint(const ContinualState& state, const ExperimentConfig& config);
LoadedCheckpoint decode_checkpoint(const std::string& bytes);

}  // namespace rtcl
