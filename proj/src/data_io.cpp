#include "ocumorph/data_io.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <json.hpp>

namespace ocumorph::io {

using nlohmann::json;

OcularImage from_mat(const cv::Mat& rgb, ValueRange range, std::string subject_id) {
    if (rgb.empty()) throw Error("image is empty");
    if (rgb.channels() != 3) {
        throw Error("ocular image must have 3 channels, got " + std::to_string(rgb.channels()));
    }
    OcularImage out;
    rgb.convertTo(out.pixels, CV_32FC3);
    out.range = range;
    out.subject_id = std::move(subject_id);
    return out;
}

OcularImage read_image(const fs::path& path, std::string subject_id) {
    if (!fs::exists(path)) throw LoadError("image not found: " + path.string());
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (bgr.empty()) throw LoadError("cannot decode image: " + path.string());
    if (bgr.channels() == 4) cv::cvtColor(bgr, bgr, cv::COLOR_BGRA2BGR);
    if (bgr.channels() != 3) {
        throw LoadError("expected a 3-channel image: " + path.string());
    }
    if (bgr.depth() == CV_16U) bgr.convertTo(bgr, CV_8U, 1.0 / 257.0);
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return from_mat(rgb, ValueRange::raw_0_255, std::move(subject_id));
}

cv::Mat to_raw(const OcularImage& image) {
    if (image.range == ValueRange::raw_0_255) return image.pixels.clone();
    cv::Mat out;
    image.pixels.convertTo(out, CV_32FC3, 127.5, 127.5);
    return out;
}

cv::Mat to_normalized(const OcularImage& image) {
    if (image.range == ValueRange::normalized_minus1_1) return image.pixels.clone();
    cv::Mat out;
    image.pixels.convertTo(out, CV_32FC3, 1.0 / 127.5, -1.0);
    return out;
}

void write_png(const fs::path& path, const OcularImage& image) {
    cv::Mat raw = to_raw(image);
    cv::Mat bgr8;
    raw.convertTo(bgr8, CV_8UC3);  // saturating round
    cv::cvtColor(bgr8, bgr8, cv::COLOR_RGB2BGR);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), bgr8)) throw Error("cannot write image: " + path.string());
}

std::map<std::string, std::vector<std::size_t>> DatasetIndex::subjects() const {
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < entries.size(); ++i) groups[entries[i].subject_id].push_back(i);
    return groups;
}

DatasetIndex load_dataset(const fs::path& root, const fs::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw LoadError("cannot open manifest: " + manifest.string());

    DatasetIndex index;
    index.root = root;
    std::set<std::string> seen;
    std::vector<std::string> missing;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;

        std::vector<std::string> fields;
        std::stringstream ss(line);
        for (std::string field; std::getline(ss, field, '\t');) fields.push_back(field);
        if (fields.size() < 2 || fields.size() > 3 || fields[0].empty() || fields[1].empty()) {
            throw FormatError(manifest.string() + ":" + std::to_string(line_no) +
                              ": expected path<TAB>subject<TAB>session");
        }
        if (!seen.insert(fields[0]).second) {
            throw FormatError("duplicate manifest entry: " + fields[0]);
        }
        if (!fs::exists(root / fields[0])) missing.push_back((root / fields[0]).string());
        index.entries.push_back({fields[0], fields[1], fields.size() == 3 ? fields[2] : ""});
    }
    if (!missing.empty()) {
        std::string msg = "manifest references missing files:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw LoadError(msg);
    }
    return index;
}

void write_manifest(const fs::path& manifest, const DatasetIndex& index) {
    std::ofstream out(manifest);
    if (!out) throw Error("cannot write manifest: " + manifest.string());
    for (const auto& e : index.entries) {
        out << e.image_path << '\t' << e.subject_id << '\t' << e.session_id << '\n';
    }
}

PairPolicy parse_pair_policy(const std::string& name) {
    if (name == "all_cross") return PairPolicy::all_cross;
    if (name == "random_k") return PairPolicy::random_k;
    throw Error("unknown pairing policy '" + name + "'");
}

std::vector<MorphPair> pair_subjects(const DatasetIndex& index, PairPolicy policy, std::size_t k,
                                     std::uint64_t seed, double alpha) {
    if (index.subjects().size() < 2) throw Error("pairing needs at least 2 subjects");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("alpha must lie in [0, 1]");

    std::vector<MorphPair> all;
    for (std::size_t i = 0; i < index.entries.size(); ++i) {
        for (std::size_t j = i + 1; j < index.entries.size(); ++j) {
            if (index.entries[i].subject_id != index.entries[j].subject_id) {
                all.push_back({i, j, alpha});
            }
        }
    }
    if (policy == PairPolicy::all_cross) return all;

    // Partial Fisher-Yates with an explicitly seeded engine; std::shuffle's
    // distribution use is implementation-defined, so do it by hand.
    std::mt19937_64 rng(seed);
    const std::size_t n = std::min(k, all.size());
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng() % (all.size() - i));
        std::swap(all[i], all[j]);
    }
    all.resize(n);
    return all;
}

namespace {

cv::Mat crop_resize(const cv::Mat& src, int x0, int y0, int side) {
    cv::Mat roi = src(cv::Rect(x0, y0, side, side));
    if (side == kFrameSize) return roi.clone();
    cv::Mat out;
    const int interp = side > kFrameSize ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(roi, out, cv::Size(kFrameSize, kFrameSize), 0, 0, interp);
    return out;
}

}  // namespace

Preprocessed preprocess(const OcularImage& image, const std::optional<LandmarkSet>& landmarks,
                        bool augment, std::uint64_t seed) {
    if (image.pixels.empty() || image.pixels.channels() != 3) {
        throw Error("preprocess: input must be a non-empty 3-channel image");
    }
    const int h = image.height();
    const int w = image.width();
    const int side = std::min(h, w);
    const int x0 = (w - side) / 2;
    const int y0 = (h - side) / 2;

    Preprocessed out;
    out.image.subject_id = image.subject_id;
    out.image.range = ValueRange::normalized_minus1_1;

    cv::Mat resized = crop_resize(image.pixels, x0, y0, side);
    if (image.range == ValueRange::raw_0_255) {
        resized.convertTo(out.image.pixels, CV_32FC3, 1.0 / 127.5, -1.0);
    } else {
        out.image.pixels = resized;
    }

    if (landmarks) {
        // cv::resize maps pixel centers: dst = (src + 0.5) * scale - 0.5
        const double scale = static_cast<double>(kFrameSize) / side;
        LandmarkSet moved;
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            const Point2& p = (*landmarks)[i];
            moved[i] = side == kFrameSize
                           ? Point2{p.x - x0, p.y - y0}
                           : Point2{(p.x - x0 + 0.5) * scale - 0.5, (p.y - y0 + 0.5) * scale - 0.5};
        }
        out.landmarks = moved;
    }

    if (augment) {
        std::mt19937_64 rng(seed);
        out.flipped = (rng() >> 63) != 0;
    }
    if (out.flipped) {
        cv::flip(out.image.pixels, out.image.pixels, 1);
        if (out.landmarks) {
            const auto perm = layout::flip_permutation();
            LandmarkSet flipped;
            for (std::size_t i = 0; i < kNumLandmarks; ++i) {
                const Point2& p = (*out.landmarks)[i];
                flipped[perm[i]] = {(kFrameSize - 1) - p.x, p.y};
            }
            out.landmarks = flipped;
        }
    }
    return out;
}

OcularImage preprocess(const OcularImage& image, bool augment, std::uint64_t seed) {
    return preprocess(image, std::nullopt, augment, seed).image;
}

void write_landmarks(const fs::path& path, const LandmarkSet& landmarks, const std::string& image) {
    json record;
    record["image"] = image;
    record["landmarks"] = landmarks.to_flat();
    record["out_of_frame"] = landmarks.out_of_frame(kFrameSize, kFrameSize);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write landmarks: " + path.string());
    out << record.dump() << '\n';
}

LandmarkRecord read_landmarks(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open landmark file: " + path.string());
    json record;
    try {
        in >> record;
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (!record.contains("landmarks") || !record["landmarks"].is_array()) {
        throw FormatError(path.string() + ": missing 'landmarks' array");
    }
    std::vector<double> values;
    for (const auto& v : record["landmarks"]) {
        if (!v.is_number()) throw FormatError(path.string() + ": non-numeric coordinate");
        values.push_back(v.get<double>());
    }
    LandmarkRecord out;
    try {
        out.landmarks = LandmarkSet::from_flat(values);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    out.image = record.value("image", std::string{});
    out.out_of_frame = out.landmarks.out_of_frame(kFrameSize, kFrameSize);
    return out;
}

}  // namespace ocumorph::io
