#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rtcl {

// Storage scalar. Arithmetic runs in 64-bit; every persisted parameter is
// kept float32-representable (see Tensor::snap_f32), and checkpoint files
// store little-endian float32.
using real = double;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct RoutingError : Error { using Error::Error; };
struct LabelError : Error { using Error::Error; };
struct IndexError : Error { using Error::Error; };
struct CapacityError : Error { using Error::Error; };
struct FusionError : Error { using Error::Error; };
struct CheckpointError : Error { using Error::Error; };

inline constexpr uint64_t kFnvBasis = 1469598103934665603ull;

inline uint64_t fnv1a64(const void* data, std::size_t n, uint64_t h = kFnvBasis) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

// Round through float32 so the value survives a checkpoint round trip bit-exactly.
inline real snap32(real v) { return static_cast<real>(static_cast<float>(v)); }

inline std::string dims_str(const std::vector<int>& d) {
    std::string s = "[";
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(d[i]);
    }
    return s + "]";
}

}  // namespace rtcl
