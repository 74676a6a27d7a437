#pragma once

#include "rtcl/adapters.hpp"
#include "rtcl/backbone.hpp"
#include "rtcl/replay.hpp"
#include "rtcl/router.hpp"

namespace rtcl {

// Everything the continual learner accumulates across tasks.
struct ContinualState {
    FrozenBackbone backbone;
    AdapterBank bank{-1};
    RouterBank router;
    GateMap gate_map;
    ReplayMemory memory;
};

}  // namespace rtcl
