#pragma once

#include <array>
#include <span>
#include <vector>

#include <opencv2/core.hpp>

#include "ocumorph/common.hpp"
#include "ocumorph/data_io.hpp"
#include "ocumorph/landmark_set.hpp"

namespace ocumorph::morph {

using Triangle = std::array<int, 3>;  // counter-clockwise vertex indices

struct TriangleMesh {
    std::vector<Point2> vertices;
    std::vector<Triangle> triangles;
    // Input index each vertex came from (duplicates collapse onto the first).
    std::vector<int> origin;
    Warnings warnings;
};

// Delaunay triangulation of arbitrary points. Points closer than 0.5 px to an
// earlier point are merged into it (with a warning). Throws when fewer than
// three distinct points remain or all are collinear. Cocircular ties are
// broken deterministically by input order.
TriangleMesh delaunay(std::span<const Point2> points);

// The 8 frame anchors: 4 corners and 4 edge midpoints at pixel-center extremes.
std::array<Point2, 8> frame_anchors(int height, int width);

// Anchors first, then `landmarks`; mesh covers the whole frame.
TriangleMesh triangulate(std::span<const Point2> landmarks, int height, int width);

struct WarpedPatch {
    cv::Mat image;     // same size and type as the source, zero outside the mask
    cv::Mat1b mask;    // 255 on the pixels covered by the destination triangle
    Warnings warnings;
};

// Affine-maps the source triangle onto the destination triangle and samples the
// source bilinearly at every destination pixel center inside it.
WarpedPatch warp_triangle(const cv::Mat& src, const std::array<Point2, 3>& src_tri,
                          const std::array<Point2, 3>& dst_tri);

// Affine A (2x3) with A * [p;1] = q for the three vertex correspondences.
std::array<double, 6> solve_affine(const std::array<Point2, 3>& from, const std::array<Point2, 3>& to);

struct MorphOptions {
    double alpha = 0.5;
    bool seamless_clone = false;
    int clone_dilation = 10;  // px around the hull of the 19 core landmarks
    bool mixed_gradients = false;
};

struct MorphResult {
    io::OcularImage image;
    LandmarkSet landmarks;  // the alpha-interpolated geometry
    TriangleMesh mesh;
    cv::Mat1b clone_mask;   // empty when cloning is off
    Warnings warnings;
};

// I_m = (1 - alpha) W_s(I_s) + alpha W_t(I_t) over a mesh built on the
// interpolated landmarks. Alpha is snapped to a 2^-20 grid so that
// morph(s, t, a) and morph(t, s, 1 - a) are bit-identical.
MorphResult morph(const io::OcularImage& source, const io::OcularImage& target, const LandmarkSet& source_landmarks,
                  const LandmarkSet& target_landmarks, const MorphOptions& options = {});

// Region used for seamless cloning: hull of the 19 core points dilated by
// `dilation` px, kept one pixel away from the frame border.
cv::Mat1b clone_region(const LandmarkSet& landmarks, int height, int width, int dilation);

struct CloneOptions {
    bool mixed_gradients = false;
    double tolerance = 1e-7;  // max |residual| per pixel
    int max_iterations = 0;   // 0: 10 * unknowns + 1000
};

// Poisson blending: inside the mask, solve  laplacian(f) = div(guidance) with
// f = target on the mask boundary; guidance is the patch gradient (or the
// stronger of patch/target gradients when mixed). Float or double images, any
// channels; the result has the input type.
cv::Mat seamless_clone(const cv::Mat& patch, const cv::Mat& target, const cv::Mat1b& mask,
                       const CloneOptions& options = {});

// Debug overlay: mesh edges drawn over an 8-bit copy of the image.
cv::Mat draw_mesh(const io::OcularImage& image, const TriangleMesh& mesh);

}  // namespace ocumorph::morph
