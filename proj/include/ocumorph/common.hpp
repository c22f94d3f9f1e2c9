#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace ocumorph {

// Landmarks, heatmaps and the landmark generator all live in this frame.
inline constexpr int kFrameSize = 256;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or missing on-disk data.
struct LoadError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct CheckpointError : Error {
    using Error::Error;
};

// Non-fatal conditions an operation reports back to its caller.
using Warnings = std::vector<std::string>;

}  // namespace ocumorph
