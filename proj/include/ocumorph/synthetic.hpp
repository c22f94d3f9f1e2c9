#pragma once

#include <cstdint>

#include <opencv2/core.hpp>

#include "ocumorph/data_io.hpp"
#include "ocumorph/landmark_set.hpp"

// Procedural periocular images with exact landmark and iris-mask ground truth.
// Used for fixtures, overfit checks and the synthetic detection corpus.
namespace ocumorph::synthetic {

struct EyeParams {
    double cx = 128, cy = 132;
    double half_width = 70;
    double upper_height = 30, lower_height = 22;
    double iris_radius = 22;
    double iris_dx = 0, iris_dy = 0;  // iris center offset from the eye center (gaze)
    double brow_gap = 26, brow_arch = 12, brow_thickness = 9;
    double crease_gap = 18, crease_depth = 6;
    cv::Vec3f skin{205, 160, 135};
    cv::Vec3f sclera{238, 234, 228};
    cv::Vec3f iris{95, 60, 35};
    cv::Vec3f brow{60, 42, 32};
    double texture = 6.0;  // amplitude of seeded skin noise, gray levels
    std::uint64_t texture_seed = 0;
};

EyeParams random_eye_params(std::uint64_t seed);

struct SyntheticEye {
    io::OcularImage image;  // raw 0..255 RGB, size x size
    LandmarkSet landmarks;  // in the image's own pixel frame
    cv::Mat1b iris_mask;    // 255 where the visible iris is
};

// Renders at 256 and downsizes to `size` when size < 256; landmarks follow.
SyntheticEye render_eye(const EyeParams& params, int size = kFrameSize);

// Exact layout landmarks for the parameters in the 256 frame.
LandmarkSet eye_landmarks(const EyeParams& params);

}  // namespace ocumorph::synthetic
