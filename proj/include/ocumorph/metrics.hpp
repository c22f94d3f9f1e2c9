#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "ocumorph/common.hpp"
#include "ocumorph/data_io.hpp"
#include "ocumorph/landmark_set.hpp"

namespace ocumorph::metrics {

// ---- image quality -----------------------------------------------------------

// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
// valid filtering, averaged over channels. Inputs: same-size float or 8-bit.
double ssim(const cv::Mat& x, const cv::Mat& y, double data_range);
// Range-aware: raw images use L = 255, normalized ones are compared on [0, 1].
double ssim(const io::OcularImage& x, const io::OcularImage& y);

// ---- vulnerability -------------------------------------------------------------

// Smallest threshold t with #(impostor >= t) / N <= fmr. Among thresholds with
// the same false-match count the largest (a score value) is returned; when no
// score qualifies, t is the next double above the maximum.
double threshold_at_fmr(std::span<const double> impostor_scores, double fmr, Warnings* warnings = nullptr);
// Fraction of impostor scores >= t.
double false_match_rate(std::span<const double> impostor_scores, double threshold);

struct MorphScores {
    std::string morph_id;
    std::string subject_a, subject_b;
    std::vector<double> a, b;  // probe scores against each contributing subject
};

// A morph succeeds when both subjects have at least one probe >= t.
double mmpmr(std::span<const MorphScores> scores, double threshold);
// A morph succeeds when every paired attempt (probe k of a with probe k of b)
// has both scores >= t. Unequal probe counts are truncated to the shorter list.
double fmmpmr(std::span<const MorphScores> scores, double threshold, Warnings* warnings = nullptr);

// CSV with header `morph_id,subject,probe_id,score`; each morph names exactly
// two subjects, the first one seen becomes subject a. Probes are ordered by probe_id.
std::vector<MorphScores> read_morph_scores(const std::filesystem::path& path);
// CSV with a `score` column (other columns ignored).
std::vector<double> read_scores(const std::filesystem::path& path);

// ---- geometry ------------------------------------------------------------------

struct Ellipse {
    double cx = 0, cy = 0;
    double a = 0, b = 0;  // semi-axes, a >= b
    double theta = 0;     // rotation of the a-axis from +x, in (-pi/2, pi/2]
    double rms_residual = 0;  // RMS approximate orthogonal distance of the fitted points
};

// Direct least-squares ellipse fit (numerically stable split-matrix form)
// followed by damped Gauss-Newton refinement of the geometric residual.
Ellipse fit_ellipse(std::span<const Point2> points);
bool inside(const Ellipse& e, double x, double y);

struct IrResult {
    double ir = 0;
    Ellipse ellipse;
    Warnings warnings;
};

// Boundary IoU between the iris region and its fitted ellipse: the largest
// 8-connected component's crack-edge boundary is fitted, the fitted ellipse is
// rasterized at pixel centers and IoU of the two filled regions is returned.
IrResult iris_irregularity(const cv::Mat1b& mask);

inline constexpr int kGazeFormulaVersion = 1;
// max(0, 1 - d / (|c1 - c2| / 2 + 1)), d = distance of the morph's iris center
// to the segment [c1, c2].
double gaze_consistency(const LandmarkSet& morph, const LandmarkSet& l1, const LandmarkSet& l2);
double gaze_consistency(const Point2& cm, const Point2& c1, const Point2& c2);

// Median wall time in milliseconds of `n_runs` calls after 3 warm-up calls.
double time_inference(const std::function<void()>& run, int n_runs);

}  // namespace ocumorph::metrics
