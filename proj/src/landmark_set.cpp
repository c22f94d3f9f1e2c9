#include "ocumorph/landmark_set.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ocumorph/common.hpp"

namespace ocumorph {

std::array<std::size_t, kNumLandmarks> layout::flip_permutation() {
    std::array<std::size_t, kNumLandmarks> perm{};
    // Eyelid contour: angle theta -> pi - theta, i.e. k -> (7 - k) mod 14.
    for (std::size_t k = 0; k < kEyeCount; ++k) {
        perm[kEyeBegin + k] = kEyeBegin + (kEyeCount + 7 - k) % kEyeCount;
    }
    perm[kIrisCenter] = kIrisCenter;
    perm[15] = 17;  // left <-> right
    perm[16] = 16;
    perm[17] = 15;
    perm[18] = 18;
    for (std::size_t k = 0; k < 7; ++k) {
        perm[19 + k] = 19 + (6 - k);
        perm[26 + k] = 26 + (6 - k);
    }
    return perm;
}

LandmarkSet LandmarkSet::from_flat(std::span<const double> values) {
    if (values.size() != 2 * kNumLandmarks) {
        throw FormatError("landmark record: expected 33 points (66 values), got " +
                          std::to_string(values.size()) + " values");
    }
    LandmarkSet set;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        set.points_[i] = {values[2 * i], values[2 * i + 1]};
    }
    return set;
}

std::vector<double> LandmarkSet::to_flat() const {
    std::vector<double> out;
    out.reserve(2 * kNumLandmarks);
    for (const auto& p : points_) {
        out.push_back(p.x);
        out.push_back(p.y);
    }
    return out;
}

bool LandmarkSet::all_finite() const {
    return std::all_of(points_.begin(), points_.end(),
                       [](const Point2& p) { return std::isfinite(p.x) && std::isfinite(p.y); });
}

bool LandmarkSet::out_of_frame(int width, int height) const {
    return std::any_of(points_.begin(), points_.end(), [&](const Point2& p) {
        return p.x < 0.0 || p.y < 0.0 || p.x > width - 1 || p.y > height - 1;
    });
}

LandmarkSet LandmarkSet::lerp(const LandmarkSet& other, double alpha) const {
    LandmarkSet out;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        out.points_[i] = {(1.0 - alpha) * points_[i].x + alpha * other.points_[i].x,
                          (1.0 - alpha) * points_[i].y + alpha * other.points_[i].y};
    }
    return out;
}

LandmarkSet LandmarkSet::scaled(double factor) const {
    LandmarkSet out;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        out.points_[i] = {points_[i].x * factor, points_[i].y * factor};
    }
    return out;
}

std::vector<Point2> select_landmarks(const LandmarkSet& set, LandmarkGroup group) {
    auto range = [&](std::size_t begin, std::size_t count) {
        return std::vector<Point2>(set.points().begin() + begin, set.points().begin() + begin + count);
    };
    switch (group) {
        case LandmarkGroup::center:
            return {set[layout::kIrisCenter]};
        case LandmarkGroup::iris:
            return range(layout::kIrisBegin, layout::kIrisCount);
        case LandmarkGroup::eye:
            return range(layout::kEyeBegin, layout::kEyeCount);
        case LandmarkGroup::extension:
            return range(layout::kExtensionBegin, layout::kExtensionCount);
    }
    return {};
}

std::vector<Point2> select_landmarks(const LandmarkSet& set, std::span<const bool> mask) {
    if (mask.size() != kNumLandmarks) {
        throw Error("custom landmark mask must have 33 entries");
    }
    std::vector<Point2> out;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        if (mask[i]) out.push_back(set[i]);
    }
    if (out.empty()) throw Error("custom landmark mask selects no points");
    return out;
}

std::vector<Point2> core_landmarks(const LandmarkSet& set) {
    // eye (0..13) followed by iris (14..18)
    return {set.points().begin(), set.points().begin() + kNumCoreLandmarks};
}

LandmarkGroup parse_landmark_group(std::string_view name) {
    if (name == "center") return LandmarkGroup::center;
    if (name == "iris") return LandmarkGroup::iris;
    if (name == "eye") return LandmarkGroup::eye;
    if (name == "extension") return LandmarkGroup::extension;
    throw Error("unknown landmark group '" + std::string(name) + "'");
}

}  // namespace ocumorph
