#include "ocumorph/networks.hpp"

#include <bit>
#include <sstream>

#include "ocumorph/common.hpp"

namespace ocumorph::nets {

namespace F = torch::nn::functional;

int NetConfig::stages() const { return std::countr_zero(static_cast<unsigned>(image_size)) - 2; }

void NetConfig::validate() const {
    if (image_size < 32 || image_size > 1024 || !std::has_single_bit(static_cast<unsigned>(image_size))) {
        throw ConfigError("image_size must be a power of two in [32, 1024]");
    }
    if (ndf <= 0 || ngf <= 0 || nz <= 0 || nc <= 0 || n_heatmaps <= 0 || landmark_dim <= 0) {
        throw ConfigError("network widths must be positive");
    }
    if (sn_warmup < 0) throw ConfigError("sn_warmup must be non-negative");
}

std::string NetConfig::describe() const {
    std::ostringstream s;
    s << "ndf=" << ndf << " ngf=" << ngf << " nz=" << nz << " nc=" << nc << " n_heatmaps=" << n_heatmaps
      << " image_size=" << image_size << " landmark_dim=" << landmark_dim;
    return s.str();
}

namespace {

torch::Tensor l2_normalize(const torch::Tensor& t) { return t / (t.norm() + 1e-12); }

torch::nn::InstanceNorm2d instance_norm(int channels) {
    return torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(channels).affine(true));
}

torch::nn::LeakyReLU leaky() { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); }

// Channel multiplier of encoder stage i (0-based): 1, 4, 8, 16, 16, ...
int encoder_mult(int i) { return i == 0 ? 1 : std::min(1 << (i + 1), 16); }

// Generator width at 2^j stages above the output: ngf * 2^j, capped at 16.
int decoder_mult(int j) { return std::min(1 << j, 16); }

}  // namespace

SpectralNormConvImpl::SpectralNormConvImpl(int in, int out, int kernel, int stride, int padding, bool with_bias,
                                           int warmup)
    : stride_(stride), padding_(padding) {
    // Same initialisation as torch.nn.Conv2d.
    auto w = torch::empty({out, in, kernel, kernel});
    torch::nn::init::kaiming_uniform_(w, std::sqrt(5.0));
    weight_orig = register_parameter("weight_orig", w);
    if (with_bias) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
        bias = register_parameter("bias", torch::empty({out}).uniform_(-bound, bound));
    }
    u = register_buffer("u", l2_normalize(torch::randn({out})));
    v = register_buffer("v", l2_normalize(torch::randn({in * kernel * kernel})));
    power_iterate(warmup);
}

void SpectralNormConvImpl::power_iterate(int steps) {
    torch::NoGradGuard no_grad;
    const auto w = weight_orig.reshape({weight_orig.size(0), -1});
    for (int i = 0; i < steps; ++i) {
        v.copy_(l2_normalize(torch::mv(w.t(), u)));
        u.copy_(l2_normalize(torch::mv(w, v)));
    }
}

torch::Tensor SpectralNormConvImpl::effective_weight() const {
    const auto w = weight_orig.reshape({weight_orig.size(0), -1});
    // clones: later power iterations update u, v in place while this graph is alive
    const auto sigma = torch::dot(u.clone(), torch::mv(w, v.clone()));
    return weight_orig / sigma;
}

torch::Tensor SpectralNormConvImpl::forward(const torch::Tensor& x) {
    if (is_training()) power_iterate(1);
    return F::conv2d(x, effective_weight(), F::Conv2dFuncOptions().bias(bias).stride(stride_).padding(padding_));
}

SelfAttentionImpl::SelfAttentionImpl(int channels) {
    const int inner = std::max(channels / 8, 1);
    query = register_module("query", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, inner, 1)));
    key = register_module("key", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, inner, 1)));
    value = register_module("value", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 1)));
    gamma = register_parameter("gamma", torch::zeros({1}));
}

torch::Tensor SelfAttentionImpl::attention(const torch::Tensor& x) {
    const auto b = x.size(0);
    const auto q = query->forward(x).reshape({b, -1, x.size(2) * x.size(3)});  // [B, C', N]
    const auto k = key->forward(x).reshape({b, -1, x.size(2) * x.size(3)});
    return torch::softmax(torch::bmm(q.transpose(1, 2), k), -1);  // [B, N, N]
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
    const auto b = x.size(0);
    const auto attn = attention(x);
    const auto v = value->forward(x).reshape({b, x.size(1), -1});  // [B, C, N]
    const auto out = torch::bmm(v, attn.transpose(1, 2)).reshape(x.sizes());
    return x + gamma * out;
}

ResidualBlockImpl::ResidualBlockImpl(int channels, bool instance_norm_layers, int warmup) {
    conv1 = register_module("conv1", SpectralNormConv(channels, channels, 3, 1, 1, true, warmup));
    conv2 = register_module("conv2", SpectralNormConv(channels, channels, 3, 1, 1, true, warmup));
    if (instance_norm_layers) {
        norm1 = register_module("norm1", instance_norm(channels));
        norm2 = register_module("norm2", instance_norm(channels));
    }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
    auto h = conv1->forward(x);
    if (norm1) h = norm1->forward(h);
    h = conv2->forward(torch::relu(h));
    if (norm2) h = norm2->forward(h);
    return x + h;
}

LandmarkEncoderImpl::LandmarkEncoderImpl(const NetConfig& c) : out_dim(c.landmark_dim) {
    c.validate();
    const int in = 2 * static_cast<int>(kNumLandmarks);
    net = register_module("net", torch::nn::Sequential(torch::nn::Linear(in, 256), leaky(), torch::nn::Linear(256, 256),
                                                       leaky(), torch::nn::Linear(256, c.landmark_dim)));
}

torch::Tensor LandmarkEncoderImpl::forward(const torch::Tensor& coords) {
    if (coords.dim() != 2 || coords.size(1) != 2 * static_cast<long>(kNumLandmarks)) {
        throw Error("landmark encoder expects [B, 66] coordinates");
    }
    return net->forward(coords);
}

ImageEncoderImpl::ImageEncoderImpl(const NetConfig& c) : config(c) {
    c.validate();
    const int s = c.stages();
    features = torch::nn::Sequential();
    // first block without spectral norm
    features->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c.nc + c.n_heatmaps, c.ndf, 4).stride(2).padding(1)));
    features->push_back(instance_norm(c.ndf));
    features->push_back(leaky());
    int channels = c.ndf;
    for (int i = 1; i < s; ++i) {
        const int out = c.ndf * encoder_mult(i);
        features->push_back(SpectralNormConv(channels, out, 4, 2, 1, true, c.sn_warmup));
        features->push_back(instance_norm(out));
        features->push_back(leaky());
        channels = out;
        if (i == 2) {  // image_size / 8
            features->push_back(ResidualBlock(channels, true, c.sn_warmup));
            features->push_back(SelfAttention(channels));
        }
    }
    features->push_back(torch::nn::AdaptiveAvgPool2d(torch::nn::AdaptiveAvgPool2dOptions(1)));
    register_module("features", features);
    project = register_module("project", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, c.nz, 1)));
}

namespace {

void check_pair(const torch::Tensor& image, const torch::Tensor& heatmaps, const NetConfig& c) {
    if (image.dim() != 4 || image.size(1) != c.nc || image.size(2) != c.image_size || image.size(3) != c.image_size) {
        throw Error("expected images [B, " + std::to_string(c.nc) + ", " + std::to_string(c.image_size) + ", " +
                    std::to_string(c.image_size) + "]");
    }
    if (heatmaps.dim() != 4 || heatmaps.size(1) != c.n_heatmaps) {
        throw Error("expected " + std::to_string(c.n_heatmaps) + " heatmaps, got " +
                    (heatmaps.dim() == 4 ? std::to_string(heatmaps.size(1)) : std::string("a non-4D tensor")));
    }
    if (heatmaps.size(0) != image.size(0) || heatmaps.size(2) != image.size(2) || heatmaps.size(3) != image.size(3)) {
        throw Error("heatmaps and images differ in batch or spatial size");
    }
}

}  // namespace

torch::Tensor ImageEncoderImpl::forward(const torch::Tensor& image, const torch::Tensor& heatmaps) {
    check_pair(image, heatmaps, config);
    auto h = features->forward(torch::cat({image, heatmaps.to(image.dtype())}, 1));
    return project->forward(h).flatten(1);
}

GeneratorImpl::GeneratorImpl(const NetConfig& c) : config(c) {
    c.validate();
    const int s = c.stages();
    auto convt = [](int in, int out, int k, int stride, int pad) {
        return torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(in, out, k).stride(stride).padding(pad));
    };
    body = torch::nn::Sequential();
    int channels = c.ngf * decoder_mult(s - 1);
    body->push_back(convt(c.nz + c.landmark_dim, channels, 4, 1, 0));  // 1x1 -> 4x4
    body->push_back(instance_norm(channels));
    body->push_back(torch::nn::ReLU());
    body->push_back(ResidualBlock(channels, true, c.sn_warmup));
    for (int i = 1; i < s; ++i) {
        const int out = c.ngf * decoder_mult(s - 1 - i);
        body->push_back(convt(channels, out, 4, 2, 1));
        body->push_back(instance_norm(out));
        body->push_back(torch::nn::ReLU());
        channels = out;
        if (i == 1) body->push_back(SelfAttention(channels));  // 8x8
    }
    body->push_back(convt(channels, c.nc, 4, 2, 1));
    body->push_back(torch::nn::Tanh());
    register_module("body", body);
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& z, const torch::Tensor& f) {
    if (z.dim() != 2 || z.size(1) != config.nz) throw Error("generator expects z of shape [B, " + std::to_string(config.nz) + "]");
    if (f.dim() != 2 || f.size(1) != config.landmark_dim || f.size(0) != z.size(0)) {
        throw Error("generator expects landmark features of shape [B, " + std::to_string(config.landmark_dim) + "]");
    }
    return body->forward(torch::cat({z, f}, 1).unsqueeze(-1).unsqueeze(-1));
}

DiscriminatorImpl::DiscriminatorImpl(const NetConfig& c) : config(c) {
    c.validate();
    const int w = c.sn_warmup;
    stem = register_module("stem", torch::nn::Sequential(
                                        torch::nn::Conv2d(torch::nn::Conv2dOptions(c.nc + c.n_heatmaps, c.ndf, 4).stride(2).padding(1)),
                                        leaky()));
    // No instance norm anywhere in D: it would mix statistics across patches.
    const int widths[4] = {c.ndf * 2, c.ndf * 4, c.ndf * 8, c.ndf * 8};
    int channels = c.ndf;
    for (int i = 0; i < 4; ++i) {
        torch::nn::Sequential stage(SpectralNormConv(channels, widths[i], 4, 2, 1, true, w), leaky());
        if (i == 0) stage->push_back(ResidualBlock(widths[i], false, w));
        if (i == 1) stage->push_back(SelfAttention(widths[i]));
        channels = widths[i];
        stages.push_back(register_module("stage" + std::to_string(i + 1), stage));
        heads.push_back(register_module("head" + std::to_string(i + 1), SpectralNormConv(channels, 1, 3, 1, 1, true, w)));
    }
}

std::vector<torch::Tensor> DiscriminatorImpl::forward(const torch::Tensor& image, const torch::Tensor& heatmaps) {
    check_pair(image, heatmaps, config);
    auto h = stem->forward(torch::cat({image, heatmaps.to(image.dtype())}, 1));
    std::vector<torch::Tensor> maps;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        h = stages[i]->forward(h);
        maps.push_back(heads[i]->forward(h));
    }
    return maps;
}

torch::Tensor landmark_input(const LandmarkSet& landmarks) {
    return landmark_input(std::vector<LandmarkSet>{landmarks});
}

torch::Tensor landmark_input(const std::vector<LandmarkSet>& batch) {
    std::vector<double> flat;
    for (const auto& l : batch) {
        const auto f = l.to_flat();
        flat.insert(flat.end(), f.begin(), f.end());
    }
    auto t = torch::tensor(flat, torch::kFloat64).reshape({static_cast<long>(batch.size()), 2 * static_cast<long>(kNumLandmarks)});
    return (t / kFrameSize).to(torch::kFloat32);
}

std::int64_t parameter_count(const torch::nn::Module& module) {
    std::int64_t n = 0;
    for (const auto& p : module.parameters()) n += p.numel();
    return n;
}

std::vector<SpectralNormConv> spectral_layers(const torch::nn::Module& module) {
    std::vector<SpectralNormConv> out;
    for (const auto& m : module.modules()) {
        if (auto sn = std::dynamic_pointer_cast<SpectralNormConvImpl>(m)) out.emplace_back(sn);
    }
    return out;
}

}  // namespace ocumorph::nets
