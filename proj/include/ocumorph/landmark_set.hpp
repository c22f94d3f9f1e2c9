#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace ocumorph {

struct Point2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point2&, const Point2&) = default;
};

inline constexpr std::size_t kNumLandmarks = 33;
inline constexpr std::size_t kNumCoreLandmarks = 19;

// Fixed 33-point ocular layout.
//
//   index  group      description
//   0..13  eye        eyelid contour. 0 = left corner, 1..6 upper lid left to
//                     right, 7 = right corner, 8..13 lower lid right to left.
//   14     iris       iris center
//   15..18 iris       iris boundary: left, top, right, bottom
//   19..25 extension  eyebrow, left to right
//   26..32 extension  lower periocular arc, left to right
//
// "Left" is the smaller x coordinate in image space.
namespace layout {
inline constexpr std::size_t kEyeBegin = 0;
inline constexpr std::size_t kEyeCount = 14;
inline constexpr std::size_t kIrisBegin = 14;
inline constexpr std::size_t kIrisCount = 5;
inline constexpr std::size_t kIrisCenter = 14;
inline constexpr std::size_t kExtensionBegin = 19;
inline constexpr std::size_t kExtensionCount = 14;

// Index a point moves to under a horizontal flip of the image.
std::array<std::size_t, kNumLandmarks> flip_permutation();
}  // namespace layout

enum class LandmarkGroup { center, iris, eye, extension };

class LandmarkSet {
public:
    LandmarkSet() = default;
    explicit LandmarkSet(const std::array<Point2, kNumLandmarks>& points) : points_(points) {}

    // Interleaved x1,y1,...,x33,y33; throws FormatError unless exactly 66 values.
    static LandmarkSet from_flat(std::span<const double> values);
    std::vector<double> to_flat() const;

    const Point2& operator[](std::size_t i) const { return points_[i]; }
    Point2& operator[](std::size_t i) { return points_[i]; }
    const std::array<Point2, kNumLandmarks>& points() const { return points_; }

    bool all_finite() const;
    // True when any point lies outside [0, size-1]^2.
    bool out_of_frame(int width, int height) const;

    // (1-alpha) * this + alpha * other, point by point.
    LandmarkSet lerp(const LandmarkSet& other, double alpha) const;
    LandmarkSet scaled(double factor) const;

    friend bool operator==(const LandmarkSet&, const LandmarkSet&) = default;

private:
    std::array<Point2, kNumLandmarks> points_{};
};

// Subset of points by group, in layout order. `eye` + `iris` gives the 19 core points.
std::vector<Point2> select_landmarks(const LandmarkSet& set, LandmarkGroup group);
// Custom selection; mask must have 33 entries with at least one set.
std::vector<Point2> select_landmarks(const LandmarkSet& set, std::span<const bool> mask);
std::vector<Point2> core_landmarks(const LandmarkSet& set);

LandmarkGroup parse_landmark_group(std::string_view name);

}  // namespace ocumorph
