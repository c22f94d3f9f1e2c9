#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ocumorph/data_io.hpp"
#include "ocumorph/dyn_weights.hpp"
#include "ocumorph/landmark_gen.hpp"
#include "ocumorph/losses.hpp"
#include "ocumorph/networks.hpp"

namespace ocumorph::train {

namespace fs = std::filesystem;

struct TrainConfig {
    int batch_size = 64;  // pairs per step
    double lr_e = 2e-4;   // image encoder and landmark encoder
    double lr_g = 2e-4;
    double lr_d = 1e-5;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double weight_decay = 1e-5;
    double lr_gamma = 0.9998;  // per-epoch decay
    double gp_weight = 10;
    int epochs = 1;
    std::int64_t max_steps = 0;  // 0 = no limit besides epochs
    std::uint64_t seed = 0;
    int checkpoint_every = 10;  // epochs
    double adjust_rate = 0.05;
    double epsilon = 1e-8;
    double heatmap_sigma = landmarks::kDefaultSigma;  // 256-frame pixels
    int ms_ssim_scales = 0;                            // 0 = as many as the image size allows (<= 5)

    void validate() const;
};

// `key = value` lines; '#' starts a comment. Unknown keys throw ConfigError.
// Keys covering NetConfig fields (ndf, ngf, nz, image_size, landmark_dim,
// sn_warmup) go to `net`.
void apply_setting(TrainConfig& train, nets::NetConfig& net, const std::string& key, const std::string& value);
void read_config(const fs::path& path, TrainConfig& train, nets::NetConfig& net);
std::string to_text(const TrainConfig& train, const nets::NetConfig& net);

// lr_0 * gamma^epoch
double scheduled_lr(double lr0, double gamma, int epoch);
// Scales for MS-SSIM at this image size under the config.
losses::MsSsimOptions ms_ssim_options(const TrainConfig& config, int image_size);

struct Models {
    explicit Models(const nets::NetConfig& config);

    nets::NetConfig config;
    nets::LandmarkEncoder landmark_encoder;
    nets::ImageEncoder encoder;
    nets::Generator generator;
    nets::Discriminator discriminator;

    void train(bool on);
    void save(torch::serialize::OutputArchive& archive) const;
    void load(torch::serialize::InputArchive& archive);
};

struct Sample {
    torch::Tensor image;     // [3, S, S] in [-1, 1]
    torch::Tensor heatmaps;  // [19, S, S]
    LandmarkSet landmarks;   // 256 frame
};

struct TrainingSet {
    std::vector<Sample> samples;
    std::vector<io::MorphPair> pairs;  // indices into samples
};

// Preprocessed 256x256 normalized images and their landmarks -> samples at
// `image_size`.
Sample make_sample(const io::OcularImage& image, const LandmarkSet& landmarks, int image_size, double sigma);

struct PlugIns {
    std::shared_ptr<losses::EmbeddingModel> embedding;
    std::shared_ptr<losses::FeatureExtractor> features;
    std::vector<std::string> perceptual_layers;  // empty = first four stages
    bool fallback = false;                       // built-in tiny models in use
};
PlugIns fallback_plugins();

struct StepRecord {
    std::int64_t step = 0;  // 1-based
    int epoch = 0;          // 0-based
    weights::Vector losses{};   // raw values, order of losses::kLossNames
    weights::Vector weights{};  // weights applied in this step
    double critic_loss = 0;     // E[D(fake)] - E[D(real)] averaged over scales
    double gp = 0;
};

void write_log_header(std::ostream& out);
void write_log_row(std::ostream& out, const StepRecord& record);

// Raised when a loss turns non-finite; checkpoints already on disk are untouched.
struct TrainingAborted : Error {
    using Error::Error;
};

class Trainer {
public:
    Trainer(const nets::NetConfig& net, const TrainConfig& config, TrainingSet data, PlugIns plugins);

    // One critic update, one encoder/generator update, one weight adjustment.
    StepRecord step();
    // Steps until `epochs` (or `max_steps`) are done. With a non-empty
    // directory a CSV log is appended and checkpoints are written every
    // `checkpoint_every` epochs and at the end.
    std::vector<StepRecord> run(const fs::path& out_dir = {},
                                const std::function<void(const StepRecord&)>& on_step = {});

    // Atomic: written to a temporary file, then renamed.
    void save_checkpoint(const fs::path& path) const;
    // Restores the full state; the net and train configs must match.
    void load_checkpoint(const fs::path& path);

    bool finished() const;
    int epoch() const { return epoch_; }
    std::int64_t steps_done() const { return step_; }
    std::size_t steps_per_epoch() const;
    const weights::WeightState& weight_state() const { return weights_; }
    Models& models() { return models_; }
    const TrainConfig& config() const { return config_; }
    double learning_rate(char which) const;  // 'e', 'g' or 'd'

private:
    void begin_epoch();
    void set_learning_rates();

    nets::NetConfig net_;
    TrainConfig config_;
    TrainingSet data_;
    PlugIns plugins_;
    losses::MsSsimOptions ms_ssim_;
    Models models_;
    std::unique_ptr<torch::optim::AdamW> opt_e_, opt_g_, opt_d_;
    weights::WeightState weights_;
    std::mt19937_64 order_rng_;
    at::Generator gp_generator_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    int epoch_ = 0;
    std::int64_t step_ = 0;
};

// Network weights and config from a trainer checkpoint.
std::unique_ptr<Models> load_models(const fs::path& checkpoint);

struct Latent {
    torch::Tensor z;  // [1, nz]
    torch::Tensor f;  // [1, landmark_dim]
};

// E(x, h) and L_e(l) in eval mode. `image` is a normalized OcularImage of any
// size; it is resized to the model size.
Latent encode(Models& models, const io::OcularImage& image, const LandmarkSet& landmarks, double sigma);
// (1 - alpha) a + alpha b for both codes.
Latent interpolate(const Latent& a, const Latent& b, double alpha);
torch::Tensor decode(Models& models, const Latent& code);  // [1, 3, S, S]

// G((1-a) E(x1,h1) + a E(x2,h2), (1-a) L_e(l1) + a L_e(l2)).
io::OcularImage make_morph(Models& models, const io::OcularImage& x1, const io::OcularImage& x2,
                           const LandmarkSet& l1, const LandmarkSet& l2, double alpha = 0.5,
                           double sigma = landmarks::kDefaultSigma);

}  // namespace ocumorph::train
