#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ocumorph/common.hpp"

namespace ocumorph::cli {

namespace fs = std::filesystem;

// Bad flag combinations found after parsing; reported with exit code 2.
struct UsageError : Error {
    using Error::Error;
};

struct Common {
    fs::path out;
    std::uint64_t seed = 0;
    bool seed_given = false;  // --seed on the command line overrides config files
    std::string snapshot;  // resolved configuration text, written next to the outputs
};

struct FixtureOptions {
    int count = 6;
    int subjects = 3;
    int size = 64;
};

struct DataOptions {
    fs::path data;      // dataset root
    fs::path manifest;  // TSV manifest, relative to the working directory
    fs::path landmarks;       // per-image landmark JSON directory (image frame)
    fs::path landmark_model;  // or predict them
};

struct LandmarksTrainOptions {
    DataOptions data;
    int epochs = 30;
    int input_size = 64;
    double learning_rate = 1e-3;
    int batch_size = 16;
};

struct LandmarksPredictOptions {
    fs::path model;
    fs::path in;
};

struct MorphOptions {
    DataOptions data;
    fs::path masks;  // optional iris masks named like the images (classical only)
    fs::path checkpoint;
    std::string pairs = "all";  // "all" or a count of random cross-subject pairs
    double alpha = 0.5;
    bool clone = false;
    double sigma = 5.0;
};

struct TrainGanOptions {
    DataOptions data;
    fs::path config;
    std::vector<std::string> settings;  // key=value overrides
    fs::path resume;
    fs::path embedding, features;  // TorchScript plug-ins
    std::vector<std::string> feature_layers;
    bool dry_run = false;
};

struct TrainMadOptions {
    fs::path bonafide, morph;
    std::string descriptor = "lpq";
    std::string classifier = "linear_margin";
    int image_size = 128;
    int deep_epochs = 30;
};

struct EvalVulnerabilityOptions {
    fs::path impostor;
    fs::path morph_scores;
    std::vector<double> fmrs{1e-2, 1e-3, 1e-4};
};

struct EvalQualityOptions {
    fs::path morphs;  // manifest.csv written by `morph`
    fs::path masks;   // optional <morph_id>.png iris masks overriding the manifest
    fs::path landmark_model;
};

struct EvalMadOptions {
    fs::path model;  // mad_model.json from `train mad`
    fs::path bonafide, morph;
    fs::path scores;  // or a ready score CSV
};

void fixture(const Common& c, const FixtureOptions& o);
void landmarks_train(const Common& c, const LandmarksTrainOptions& o);
void landmarks_predict(const Common& c, const LandmarksPredictOptions& o);
void morph_classical(const Common& c, const MorphOptions& o);
void morph_gan(const Common& c, const MorphOptions& o);
void train_gan(const Common& c, const TrainGanOptions& o);
void train_mad(const Common& c, const TrainMadOptions& o);
void eval_vulnerability(const Common& c, const EvalVulnerabilityOptions& o);
void eval_quality(const Common& c, const EvalQualityOptions& o);
void eval_mad(const Common& c, const EvalMadOptions& o);

}  // namespace ocumorph::cli
