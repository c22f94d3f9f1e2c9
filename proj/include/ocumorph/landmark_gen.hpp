#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "ocumorph/data_io.hpp"
#include "ocumorph/landmark_set.hpp"

namespace ocumorph::landmarks {

inline constexpr double kDefaultSigma = 5.0;  // pixels in the 256 frame

struct HeatmapStack {
    torch::Tensor maps;  // [N, H, W], float
    double sigma = kDefaultSigma;
};

// map_i(p) = exp(-|p - l_i|^2 / (2 sigma^2)) evaluated at integer pixel centers.
HeatmapStack render_heatmaps(std::span<const Point2> points, int height, int width, double sigma);

// The 19 core heatmaps for landmarks given in the 256 frame, rendered at
// size x size. Points and sigma are rescaled by size / 256.
torch::Tensor core_heatmaps(const LandmarkSet& landmarks, int size, double sigma = kDefaultSigma);

struct LgConfig {
    int input_size = kFrameSize;  // image is resized to this before the conv blocks
    int conv1_channels = 32;
    int conv2_channels = 64;
    int fc1 = 512;
    int fc2 = 128;
    int output_neurons = 2 * static_cast<int>(kNumLandmarks);

    // training
    double learning_rate = 1e-3;
    double lr_gamma = 0.99;  // per-epoch exponential decay
    int batch_size = 16;
    int max_shift = 0;  // random integer translation augmentation, 256-frame pixels

    void validate() const;
};

// (conv3x3 -> ReLU -> maxpool2) x 2 -> fc -> ReLU -> fc -> ReLU -> fc(66).
// Outputs coordinates divided by 256.
struct LandmarkNetImpl : torch::nn::Module {
    explicit LandmarkNetImpl(const LgConfig& config);
    torch::Tensor forward(torch::Tensor x);

    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
    torch::nn::Linear fc1{nullptr}, fc2{nullptr}, out{nullptr};
};
TORCH_MODULE(LandmarkNet);

class LandmarkModel {
public:
    LandmarkModel(const LgConfig& config, std::uint64_t seed);

    // Preprocessed 256x256 normalized image -> 33 points in the 256 frame.
    LandmarkSet predict(const io::OcularImage& image);
    std::vector<LandmarkSet> predict(std::span<const io::OcularImage> images);

    // [3, input_size, input_size] tensor fed to the network.
    torch::Tensor prepare(const io::OcularImage& image) const;

    void save(const std::filesystem::path& path) const;
    static LandmarkModel load(const std::filesystem::path& path);

    const LgConfig& config() const { return config_; }
    LandmarkNet& net() { return net_; }
    std::int64_t parameter_count() const;

private:
    LgConfig config_;
    LandmarkNet net_;
};

struct LabeledImage {
    io::OcularImage image;  // preprocessed, 256x256 normalized
    LandmarkSet landmarks;  // 256-frame pixels
};

struct TrainedLandmarkModel {
    LandmarkModel model;
    // epoch_mse[0] is before any update; epoch_mse[e] after epoch e. px^2.
    std::vector<double> epoch_mse;
};

TrainedLandmarkModel train_landmark_model(std::span<const LabeledImage> data, const LgConfig& config,
                                          int epochs, std::uint64_t seed);

// Mean squared coordinate error in px^2 over all 66 scalars.
double landmark_mse(LandmarkModel& model, std::span<const LabeledImage> data);

}  // namespace ocumorph::landmarks
