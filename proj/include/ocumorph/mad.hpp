#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "ocumorph/common.hpp"
#include "ocumorph/data_io.hpp"

// Morph attack detection baselines. Scores follow one convention throughout:
// higher means more morph-like.
namespace ocumorph::mad {

namespace fs = std::filesystem;

// Luma in [0, 1] (Rec. 601 weights) from either value range.
cv::Mat1d to_gray(const io::OcularImage& image);

// ---- descriptors -------------------------------------------------------------

// 8-bit codes from the signs of the real and imaginary parts of four
// low-frequency STFT coefficients (uniform window), evaluated at every pixel
// whose window lies inside the image. Returns the normalized 256-bin histogram.
// `decorrelate` whitens the coefficients under a rho = 0.9 pixel correlation model.
std::vector<double> lpq_features(const cv::Mat1d& gray, int window = 7, bool decorrelate = false);

struct FilterBank {
    int size = 7;
    std::vector<cv::Mat1d> filters;  // size x size each, at most 12
};
// Seeded random projections: zero-mean, unit-norm 7x7 filters.
FilterBank default_bsif_bank(int n_filters = 8, std::uint64_t seed = 0);
// Bit i is set where the (valid) correlation with filter i is > 0.
std::vector<double> bsif_features(const cv::Mat1d& gray, const FilterBank& bank);

struct HogOptions {
    int cell = 8;
    int block = 2;  // cells per block side, stride one cell
    int bins = 9;   // unsigned orientation, bin i centered at i * 180 / bins degrees
};
// Centered-difference gradients (replicated border), per-cell orientation
// histograms with linear bin interpolation, L2-normalized overlapping blocks.
std::vector<double> hog_features(const cv::Mat1d& gray, const HogOptions& options = {});
std::size_t hog_length(int height, int width, const HogOptions& options = {});

enum class Descriptor { lpq, bsif, hog };
Descriptor parse_descriptor(const std::string& name);
std::string to_string(Descriptor d);
std::vector<double> describe(Descriptor d, const cv::Mat1d& gray);

// ---- classifiers ---------------------------------------------------------------

enum class Label { bonafide = 0, morph = 1 };

enum class DetectorKind { linear_margin, tree_ensemble, deep };
DetectorKind parse_detector_kind(const std::string& name);
std::string to_string(DetectorKind k);

struct DetectorOptions {
    std::uint64_t seed = 0;
    // linear margin: L1-loss SVM, dual coordinate descent on standardized features
    double c = 1.0;
    int max_epochs = 1000;
    double tolerance = 1e-4;
    // tree ensemble
    int n_trees = 100;
    int max_depth = 12;
    int min_leaf = 1;
    // deep
    int image_size = 64;
    int deep_epochs = 30;
    double deep_lr = 1e-3;
};

// Classifier over descriptor vectors.
class FeatureDetector {
public:
    virtual ~FeatureDetector() = default;
    virtual DetectorKind kind() const = 0;
    virtual double score(std::span<const double> features) const = 0;
    virtual void save(const fs::path& path) const = 0;
};

// Throws on an empty, ragged or single-class training set.
std::unique_ptr<FeatureDetector> train_detector(const std::vector<std::vector<double>>& features,
                                                const std::vector<Label>& labels, DetectorKind kind,
                                                const DetectorOptions& options = {});
std::unique_ptr<FeatureDetector> load_detector(const fs::path& path);

// Any image classifier honoring the score convention.
class ImageClassifier {
public:
    virtual ~ImageClassifier() = default;
    virtual double score(const io::OcularImage& image) = 0;
};

// Built-in deep slot: a small convolutional network on gray images resized to
// `image_size`, trained with binary cross-entropy; the score is the logit.
class CnnDetector : public ImageClassifier {
public:
    explicit CnnDetector(int image_size = 64);
    void train(const std::vector<io::OcularImage>& images, const std::vector<Label>& labels,
               const DetectorOptions& options);
    double score(const io::OcularImage& image) override;
    void save(const fs::path& path) const;
    static std::unique_ptr<CnnDetector> load(const fs::path& path);

private:
    torch::Tensor batch(std::span<const io::OcularImage> images) const;

    int image_size_;
    torch::nn::Sequential net_;
};

// ---- error rates ----------------------------------------------------------------

struct ScoreRecord {
    std::string sample_id;
    Label label = Label::bonafide;
    double score = 0;
};

struct MadScoreSet {
    std::vector<ScoreRecord> records;
    // Throws unless both labels are present and every score is finite.
    void validate() const;
};

struct ErrorRates {
    double apcer = 0;  // morphs scored < t, i.e. accepted as bona fide
    double bpcer = 0;  // bona fide scored >= t
};
ErrorRates apcer_bpcer(const MadScoreSet& scores, double threshold);

struct ThresholdRow {
    double threshold = 0;
    ErrorRates rates;
};
// One row per distinct score plus one above the maximum, ascending.
std::vector<ThresholdRow> threshold_table(const MadScoreSet& scores);

// Rate where APCER and BPCER cross, linearly interpolated between the two
// adjacent thresholds of the table that bracket the crossing.
double d_eer(const MadScoreSet& scores);

struct OperatingPoint {
    double threshold = 0;
    ErrorRates rates;
};
// Lowest BPCER over thresholds with APCER <= target.
OperatingPoint bpcer_at_apcer(const MadScoreSet& scores, double target_apcer = 0.05);

// CSV with header `sample_id,label,score`, label bonafide|morph.
MadScoreSet read_mad_scores(const fs::path& path);
void write_mad_scores(const fs::path& path, const MadScoreSet& scores);

}  // namespace ocumorph::mad
