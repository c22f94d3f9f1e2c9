#include "ocumorph/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <opencv2/imgproc.hpp>

namespace ocumorph::synthetic {

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

cv::Vec3f mix(const cv::Vec3f& a, const cv::Vec3f& b, double t) {
    return a * static_cast<float>(1.0 - t) + b * static_cast<float>(t);
}

struct Shapes {
    const EyeParams& p;

    // Half-opening profile: |sin(theta)| for the point on the lid above/below x.
    double lid_profile(double x) const {
        const double u = (x - p.cx) / p.half_width;
        return std::sqrt(std::max(0.0, 1.0 - u * u));
    }
    bool in_opening(double x, double y) const {
        if (std::abs(x - p.cx) >= p.half_width) return false;
        const double s = lid_profile(x);
        return y > p.cy - p.upper_height * s && y < p.cy + p.lower_height * s;
    }
    double brow_center(double x) const {
        const double u = (x - p.cx) / (1.15 * p.half_width);
        return p.cy - p.upper_height - p.brow_gap - p.brow_arch * (1.0 - u * u);
    }
    bool in_brow(double x, double y) const {
        const double u = (x - p.cx) / (1.15 * p.half_width);
        if (std::abs(u) >= 1.0) return false;
        const double half = 0.5 * p.brow_thickness * (1.0 - 0.5 * u * u);
        return std::abs(y - brow_center(x)) < half;
    }
    double arc_center(double x) const {
        const double u = (x - p.cx) / p.half_width;
        return p.cy + p.lower_height + p.crease_gap - p.crease_depth * u * u;
    }
    double upper_crease(double x) const {
        const double u = (x - p.cx) / p.half_width;
        return p.cy - p.upper_height - 0.35 * p.brow_gap + 0.4 * p.crease_depth * u * u;
    }
    cv::Vec3f color(double x, double y, bool& iris_hit) const {
        iris_hit = false;
        if (in_opening(x, y)) {
            const double ix = p.cx + p.iris_dx, iy = p.cy + p.iris_dy;
            const double r = std::hypot(x - ix, y - iy);
            if (r < 0.42 * p.iris_radius) {
                iris_hit = true;
                return {18, 14, 12};
            }
            if (r < p.iris_radius) {
                iris_hit = true;
                const double ang = std::atan2(y - iy, x - ix);
                const double streak = 0.85 + 0.15 * std::sin(14.0 * ang);
                const double rim = r > 0.88 * p.iris_radius ? 0.6 : 1.0;
                return p.iris * static_cast<float>(streak * rim);
            }
            // darker sclera near the corners
            const double u = std::abs(x - p.cx) / p.half_width;
            return mix(p.sclera, p.skin, 0.25 * u * u);
        }
        if (in_brow(x, y)) return p.brow;
        cv::Vec3f c = p.skin;
        const double shade = std::exp(-std::pow((y - p.cy) / 70.0, 2.0));
        c = mix(c * 0.88f, c, shade);
        if (std::abs(x - p.cx) < 0.95 * p.half_width) {
            if (std::abs(y - arc_center(x)) < 1.2) c = c * 0.86f;
            if (std::abs(y - upper_crease(x)) < 1.2) c = c * 0.82f;
        }
        return c;
    }
};

}  // namespace

EyeParams random_eye_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 17);
    EyeParams p;
    p.cx = uniform(rng, 118, 138);
    p.cy = uniform(rng, 124, 140);
    p.half_width = uniform(rng, 60, 76);
    p.upper_height = uniform(rng, 24, 33);
    p.lower_height = uniform(rng, 18, 25);
    p.iris_radius = uniform(rng, 18, 24);
    const double travel = 0.35 * (p.half_width - p.iris_radius);
    p.iris_dx = uniform(rng, -travel, travel);
    p.iris_dy = uniform(rng, -4, 4);
    p.brow_gap = uniform(rng, 18, 26);
    p.brow_arch = uniform(rng, 6, 14);
    p.brow_thickness = uniform(rng, 7, 11);
    p.crease_gap = uniform(rng, 14, 20);
    p.crease_depth = uniform(rng, 3, 8);

    const cv::Vec3f skins[] = {{230, 190, 165}, {200, 150, 120}, {150, 100, 75}, {95, 65, 50}};
    const cv::Vec3f irises[] = {{95, 60, 35}, {70, 110, 150}, {85, 115, 70}, {120, 90, 50}};
    const double t = uniform(rng, 0, 3);
    const int k = std::min(2, static_cast<int>(t));
    p.skin = mix(skins[k], skins[k + 1], t - k);
    p.iris = irises[rng() % 4];
    p.brow = p.skin * 0.3f;
    p.texture_seed = seed;
    return p;
}

LandmarkSet eye_landmarks(const EyeParams& p) {
    Shapes s{p};
    LandmarkSet l;
    for (std::size_t k = 0; k < layout::kEyeCount; ++k) {
        const double theta = std::numbers::pi - 2.0 * std::numbers::pi * static_cast<double>(k) / 14.0;
        const double sn = std::sin(theta);
        const double h = sn >= 0 ? p.upper_height : p.lower_height;
        l[layout::kEyeBegin + k] = {p.cx + p.half_width * std::cos(theta), p.cy - h * sn};
    }
    const double ix = p.cx + p.iris_dx, iy = p.cy + p.iris_dy, r = p.iris_radius;
    l[14] = {ix, iy};
    l[15] = {ix - r, iy};
    l[16] = {ix, iy - r};
    l[17] = {ix + r, iy};
    l[18] = {ix, iy + r};
    for (std::size_t j = 0; j < 7; ++j) {
        const double t = -1.0 + static_cast<double>(j) / 3.0;
        const double bx = p.cx + 1.1 * p.half_width * t;
        l[19 + j] = {bx, s.brow_center(bx)};
        const double ax = p.cx + 0.9 * p.half_width * t;
        l[26 + j] = {ax, s.arc_center(ax)};
    }
    return l;
}

SyntheticEye render_eye(const EyeParams& params, int size) {
    if (size <= 0 || size > kFrameSize) throw Error("synthetic eye size must be in (0, 256]");
    constexpr int kSub = 4;
    Shapes shapes{params};
    cv::Mat3f img(kFrameSize, kFrameSize);
    cv::Mat1f iris_cov(kFrameSize, kFrameSize);

    std::mt19937_64 rng(params.texture_seed ^ 0xa5a5a5a5ULL);
    std::normal_distribution<float> noise(0.0f, 1.0f);
    for (int y = 0; y < kFrameSize; ++y) {
        for (int x = 0; x < kFrameSize; ++x) {
            cv::Vec3f acc(0, 0, 0);
            int hits = 0;
            for (int sy = 0; sy < kSub; ++sy) {
                for (int sx = 0; sx < kSub; ++sx) {
                    const double px = x - 0.5 + (sx + 0.5) / kSub;
                    const double py = y - 0.5 + (sy + 0.5) / kSub;
                    bool iris = false;
                    acc += shapes.color(px, py, iris);
                    hits += iris ? 1 : 0;
                }
            }
            acc *= 1.0f / (kSub * kSub);
            const float n = static_cast<float>(params.texture) * noise(rng);
            for (int c = 0; c < 3; ++c) acc[c] = std::clamp(acc[c] + n, 0.0f, 255.0f);
            img(y, x) = acc;
            iris_cov(y, x) = static_cast<float>(hits) / (kSub * kSub);
        }
    }

    SyntheticEye out;
    LandmarkSet l = eye_landmarks(params);
    if (size != kFrameSize) {
        const double s = static_cast<double>(size) / kFrameSize;
        cv::resize(img, img, cv::Size(size, size), 0, 0, cv::INTER_AREA);
        cv::resize(iris_cov, iris_cov, cv::Size(size, size), 0, 0, cv::INTER_AREA);
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            l[i] = {(l[i].x + 0.5) * s - 0.5, (l[i].y + 0.5) * s - 0.5};
        }
    }
    out.image = io::from_mat(img, io::ValueRange::raw_0_255);
    out.landmarks = l;
    out.iris_mask = cv::Mat1b(iris_cov.size());
    for (int y = 0; y < iris_cov.rows; ++y) {
        for (int x = 0; x < iris_cov.cols; ++x) out.iris_mask(y, x) = iris_cov(y, x) >= 0.5f ? 255 : 0;
    }
    return out;
}

}  // namespace ocumorph::synthetic
