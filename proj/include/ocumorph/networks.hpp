#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ocumorph/landmark_set.hpp"

namespace ocumorph::nets {

struct NetConfig {
    int ndf = 64;
    int ngf = 64;
    int nz = 200;
    int nc = 3;
    int n_heatmaps = 19;
    int image_size = 256;
    int landmark_dim = 128;
    int sn_warmup = 30;  // power iterations run once at construction

    // Down/upsampling stages between image_size and 4x4.
    int stages() const;
    void validate() const;
    std::string describe() const;
};

// Conv2d whose weight is divided by a running estimate of its largest
// singular value. One power iteration per training-mode forward; eval mode
// reuses the stored vectors.
class SpectralNormConvImpl : public torch::nn::Module {
public:
    SpectralNormConvImpl(int in, int out, int kernel, int stride, int padding, bool bias = true, int warmup = 30);

    torch::Tensor forward(const torch::Tensor& x);
    // W / sigma with the current vectors, as used by forward in eval mode.
    torch::Tensor effective_weight() const;
    // Extra power iterations (no gradient).
    void power_iterate(int steps);

    torch::Tensor weight_orig, bias, u, v;

private:
    int stride_, padding_;
};
TORCH_MODULE(SpectralNormConv);

// x + gamma * (softmax(q^T k) applied to v); q, k at max(C/8, 1) channels.
class SelfAttentionImpl : public torch::nn::Module {
public:
    explicit SelfAttentionImpl(int channels);
    torch::Tensor forward(const torch::Tensor& x);
    // [B, N, N] attention weights, row i = distribution over positions for query i.
    torch::Tensor attention(const torch::Tensor& x);

    torch::nn::Conv2d query{nullptr}, key{nullptr}, value{nullptr};
    torch::Tensor gamma;
};
TORCH_MODULE(SelfAttention);

// x + block(x), block = SNconv3x3 [-> IN] -> ReLU -> SNconv3x3 [-> IN].
class ResidualBlockImpl : public torch::nn::Module {
public:
    ResidualBlockImpl(int channels, bool instance_norm, int warmup);
    torch::Tensor forward(const torch::Tensor& x);

    SpectralNormConv conv1{nullptr}, conv2{nullptr};
    torch::nn::InstanceNorm2d norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(ResidualBlock);

// L_e: [B, 66] coordinates scaled to [0, 1] -> [B, landmark_dim].
class LandmarkEncoderImpl : public torch::nn::Module {
public:
    explicit LandmarkEncoderImpl(const NetConfig& config);
    torch::Tensor forward(const torch::Tensor& coords);

    torch::nn::Sequential net{nullptr};
    int out_dim;
};
TORCH_MODULE(LandmarkEncoder);

// E: image [B, nc, S, S] + heatmaps [B, 19, S, S] -> z [B, nz].
class ImageEncoderImpl : public torch::nn::Module {
public:
    explicit ImageEncoderImpl(const NetConfig& config);
    torch::Tensor forward(const torch::Tensor& image, const torch::Tensor& heatmaps);

    torch::nn::Sequential features{nullptr};
    torch::nn::Conv2d project{nullptr};
    NetConfig config;
};
TORCH_MODULE(ImageEncoder);

// G: z [B, nz] and f_l [B, landmark_dim] -> image [B, nc, S, S] in [-1, 1].
class GeneratorImpl : public torch::nn::Module {
public:
    explicit GeneratorImpl(const NetConfig& config);
    torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& f);

    torch::nn::Sequential body{nullptr};
    NetConfig config;
};
TORCH_MODULE(Generator);

// D: four critic maps at S/4, S/8, S/16 and S/32.
class DiscriminatorImpl : public torch::nn::Module {
public:
    explicit DiscriminatorImpl(const NetConfig& config);
    std::vector<torch::Tensor> forward(const torch::Tensor& image, const torch::Tensor& heatmaps);

    torch::nn::Sequential stem{nullptr};
    std::vector<torch::nn::Sequential> stages;
    std::vector<SpectralNormConv> heads;
    NetConfig config;
};
TORCH_MODULE(Discriminator);

// [33 points] -> [1, 66] float tensor scaled by 1/256.
torch::Tensor landmark_input(const LandmarkSet& landmarks);
torch::Tensor landmark_input(const std::vector<LandmarkSet>& batch);

std::int64_t parameter_count(const torch::nn::Module& module);
// Every spectral-norm layer reachable from `module`.
std::vector<SpectralNormConv> spectral_layers(const torch::nn::Module& module);

}  // namespace ocumorph::nets
