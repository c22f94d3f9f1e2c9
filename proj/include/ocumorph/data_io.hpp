#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "ocumorph/common.hpp"
#include "ocumorph/landmark_set.hpp"

namespace ocumorph::io {

namespace fs = std::filesystem;

enum class ValueRange { raw_0_255, normalized_minus1_1 };

// H x W x 3 RGB image stored as CV_32FC3.
struct OcularImage {
    cv::Mat pixels;
    ValueRange range = ValueRange::raw_0_255;
    std::string subject_id;

    int height() const { return pixels.rows; }
    int width() const { return pixels.cols; }
};

// Reads PNG/JPEG into a raw-range RGB image. Throws LoadError naming the path.
OcularImage read_image(const fs::path& path, std::string subject_id = {});
// Writes PNG (8-bit). Normalized images are mapped back to 0..255 first.
void write_png(const fs::path& path, const OcularImage& image);
// Wraps an existing 8-bit or float BGR/RGB matrix; rejects anything but 3 channels.
OcularImage from_mat(const cv::Mat& rgb, ValueRange range, std::string subject_id = {});

struct DatasetEntry {
    std::string image_path;  // relative to the dataset root
    std::string subject_id;
    std::string session_id;
};

struct DatasetIndex {
    fs::path root;
    std::vector<DatasetEntry> entries;

    fs::path absolute(std::size_t i) const { return root / entries[i].image_path; }
    // subject id -> entry indices, in entry order
    std::map<std::string, std::vector<std::size_t>> subjects() const;
};

// Manifest: one `relative_path<TAB>subject_id<TAB>session_id` line per image.
// Blank lines and lines starting with '#' are ignored. Entries keep manifest order.
DatasetIndex load_dataset(const fs::path& root, const fs::path& manifest);
void write_manifest(const fs::path& manifest, const DatasetIndex& index);

enum class PairPolicy { all_cross, random_k };

struct MorphPair {
    std::size_t a = 0;  // entry index into the DatasetIndex
    std::size_t b = 0;
    double alpha = 0.5;

    friend bool operator==(const MorphPair&, const MorphPair&) = default;
};

// Cross-subject pairs. all_cross enumerates every pair of entries with distinct
// subjects; random_k draws k of those without replacement using `seed`.
std::vector<MorphPair> pair_subjects(const DatasetIndex& index, PairPolicy policy,
                                     std::size_t k, std::uint64_t seed, double alpha = 0.5);
PairPolicy parse_pair_policy(const std::string& name);

struct Preprocessed {
    OcularImage image;
    std::optional<LandmarkSet> landmarks;
    bool flipped = false;
};

// Center-crop to square, resize to 256x256, map to [-1, 1]. With augment=true a
// horizontal flip is applied with probability 0.5 drawn from `seed`.
OcularImage preprocess(const OcularImage& image, bool augment, std::uint64_t seed);
// Same, carrying landmarks through crop, resize and flip (flip also permutes
// left/right point pairs).
Preprocessed preprocess(const OcularImage& image, const std::optional<LandmarkSet>& landmarks,
                        bool augment, std::uint64_t seed);

struct LandmarkRecord {
    LandmarkSet landmarks;
    std::string image;          // optional source image name
    bool out_of_frame = false;  // some point lies outside the 256x256 frame
};

// JSON record: {"image": ..., "landmarks": [x1, y1, ..., x33, y33], "out_of_frame": bool}
void write_landmarks(const fs::path& path, const LandmarkSet& landmarks, const std::string& image = {});
LandmarkRecord read_landmarks(const fs::path& path);

// Normalized [-1,1] -> 8-bit style [0,255] range and back.
cv::Mat to_raw(const OcularImage& image);
cv::Mat to_normalized(const OcularImage& image);

}  // namespace ocumorph::io
