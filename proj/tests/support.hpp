#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <opencv2/core.hpp>

#include "ocumorph/data_io.hpp"

namespace testing {

namespace fs = std::filesystem;

// Scratch directory removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = fs::temp_directory_path() / ("ocumorph_" + tag + "_" + std::to_string(rd()));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Random float RGB image in the given range.
inline ocumorph::io::OcularImage random_image(int h, int w, std::uint64_t seed,
                                               ocumorph::io::ValueRange range = ocumorph::io::ValueRange::normalized_minus1_1) {
    cv::Mat m(h, w, CV_32FC3);
    cv::RNG rng(seed);
    if (range == ocumorph::io::ValueRange::raw_0_255) {
        rng.fill(m, cv::RNG::UNIFORM, 0.0, 255.0);
    } else {
        rng.fill(m, cv::RNG::UNIFORM, -1.0, 1.0);
    }
    return {m, range, {}};
}

inline double max_abs_diff(const cv::Mat& a, const cv::Mat& b) {
    return cv::norm(a, b, cv::NORM_INF);
}

}  // namespace testing
