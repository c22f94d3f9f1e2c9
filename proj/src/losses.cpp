#include "ocumorph/losses.hpp"

#include <cmath>
#include <numeric>

#include <torch/script.h>

#include "ocumorph/common.hpp"

namespace ocumorph::losses {

namespace F = torch::nn::functional;

std::array<double, kNumLosses> LossTerms::values() const {
    std::array<double, kNumLosses> out{};
    const auto l = list();
    for (std::size_t i = 0; i < kNumLosses; ++i) out[i] = l[i].item<double>();
    return out;
}

torch::Tensor total_loss(const LossTerms& losses, const std::array<double, kNumLosses>& weights) {
    const auto l = losses.list();
    torch::Tensor total = weights[0] * l[0];
    for (std::size_t i = 1; i < kNumLosses; ++i) total = total + weights[i] * l[i];
    return total;
}

double total_loss(const std::array<double, kNumLosses>& losses, const std::array<double, kNumLosses>& weights) {
    return std::inner_product(losses.begin(), losses.end(), weights.begin(), 0.0);
}

torch::Tensor adv_loss_discriminator(const std::vector<torch::Tensor>& real_maps,
                                     const std::vector<torch::Tensor>& fake_maps) {
    if (real_maps.empty() || real_maps.size() != fake_maps.size()) {
        throw Error("critic loss needs the same non-zero number of real and fake score maps");
    }
    torch::Tensor sum = fake_maps[0].mean() - real_maps[0].mean();
    for (std::size_t i = 1; i < real_maps.size(); ++i) sum = sum + (fake_maps[i].mean() - real_maps[i].mean());
    return sum / static_cast<double>(real_maps.size());
}

torch::Tensor adv_loss_generator(const std::vector<torch::Tensor>& fake_maps) {
    if (fake_maps.empty()) throw Error("generator adversarial loss needs at least one score map");
    torch::Tensor sum = fake_maps[0].mean();
    for (std::size_t i = 1; i < fake_maps.size(); ++i) sum = sum + fake_maps[i].mean();
    return -sum / static_cast<double>(fake_maps.size());
}

torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& reals, const torch::Tensor& fakes,
                               const torch::Tensor& heatmaps, torch::Generator& generator) {
    auto u = torch::rand({reals.size(0)}, generator, reals.options().requires_grad(false));
    return gradient_penalty(critic, reals, fakes, heatmaps, u);
}

torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& reals, const torch::Tensor& fakes,
                               const torch::Tensor& heatmaps, const torch::Tensor& u) {
    if (reals.sizes() != fakes.sizes()) throw Error("gradient penalty: real and fake batches differ in shape");
    if (u.dim() != 1 || u.size(0) != reals.size(0)) throw Error("gradient penalty: one coefficient per sample");
    std::vector<int64_t> shape(reals.dim(), 1);
    shape[0] = reals.size(0);
    const auto w = u.to(reals.dtype()).reshape(shape);
    auto xhat = (w * reals.detach() + (1 - w) * fakes.detach()).requires_grad_(true);

    const auto maps = critic(xhat, heatmaps.detach());
    if (maps.empty()) throw Error("gradient penalty: critic returned no maps");
    torch::Tensor per_sample = maps[0].flatten(1).mean(1);
    for (std::size_t i = 1; i < maps.size(); ++i) per_sample = per_sample + maps[i].flatten(1).mean(1);

    const auto grad = torch::autograd::grad({per_sample.sum()}, {xhat}, {}, /*retain_graph=*/true,
                                            /*create_graph=*/true)[0];
    const auto norm = grad.flatten(1).norm(2, 1);
    return (norm - 1).square().mean();
}

namespace {

torch::Tensor gaussian_1d(int window, double sigma, const torch::TensorOptions& opts) {
    auto x = torch::arange(window, opts.dtype(torch::kFloat64)) - (window - 1) / 2.0;
    auto g = torch::exp(-x.square() / (2 * sigma * sigma));
    return (g / g.sum()).to(opts.dtype());
}

// Depthwise valid separable Gaussian filter.
torch::Tensor blur(const torch::Tensor& x, const torch::Tensor& g) {
    const auto c = x.size(1);
    const auto w = g.numel();
    auto kx = g.reshape({1, 1, 1, w}).expand({c, 1, 1, w}).contiguous();
    auto ky = g.reshape({1, 1, w, 1}).expand({c, 1, w, 1}).contiguous();
    auto h = F::conv2d(x, kx, F::Conv2dFuncOptions().groups(c));
    return F::conv2d(h, ky, F::Conv2dFuncOptions().groups(c));
}

}  // namespace

std::pair<torch::Tensor, torch::Tensor> ssim_components(const torch::Tensor& x, const torch::Tensor& y, int window,
                                                        double sigma, double data_range, double k1, double k2) {
    if (x.sizes() != y.sizes() || x.dim() != 4) throw Error("ssim: inputs must share a [B, C, H, W] shape");
    if (x.size(2) < window || x.size(3) < window) throw Error("ssim: image smaller than the window");
    const double c1 = std::pow(k1 * data_range, 2), c2 = std::pow(k2 * data_range, 2);
    const auto g = gaussian_1d(window, sigma, x.options());
    const auto mx = blur(x, g), my = blur(y, g);
    const auto sxx = blur(x * x, g) - mx * mx;
    const auto syy = blur(y * y, g) - my * my;
    const auto sxy = blur(x * y, g) - mx * my;
    const auto cs_map = (2 * sxy + c2) / (sxx + syy + c2);
    const auto ssim_map = ((2 * mx * my + c1) / (mx * mx + my * my + c1)) * cs_map;
    return {ssim_map.flatten(2).mean(2), cs_map.flatten(2).mean(2)};
}

MsSsimOptions MsSsimOptions::truncated(int scales) {
    MsSsimOptions o;
    if (scales < 1 || scales > static_cast<int>(o.weights.size())) throw ConfigError("ms-ssim scales must be in [1, 5]");
    o.weights.resize(scales);
    const double sum = std::accumulate(o.weights.begin(), o.weights.end(), 0.0);
    for (auto& w : o.weights) w /= sum;
    return o;
}

torch::Tensor ms_ssim(const torch::Tensor& x, const torch::Tensor& y, const MsSsimOptions& o) {
    if (x.sizes() != y.sizes() || x.dim() != 4) throw Error("ms-ssim: inputs must share a [B, C, H, W] shape");
    if (o.weights.empty()) throw ConfigError("ms-ssim needs at least one scale");
    if (std::min(x.size(2), x.size(3)) < o.min_size()) {
        throw Error("ms-ssim: image side " + std::to_string(std::min(x.size(2), x.size(3))) + " is below the " +
                    std::to_string(o.min_size()) + " px minimum for " + std::to_string(o.weights.size()) + " scales");
    }
    auto a = (x + 1) / 2, b = (y + 1) / 2;
    const std::size_t n = o.weights.size();
    torch::Tensor result;
    for (std::size_t i = 0; i < n; ++i) {
        auto [s, cs] = ssim_components(a, b, o.window, o.sigma, 1.0, o.k1, o.k2);
        torch::Tensor term = i + 1 < n ? torch::relu(cs) : torch::relu(s);
        term = term.pow(o.weights[i]);
        result = i == 0 ? term : result * term;
        if (i + 1 < n) {
            const auto opts = F::AvgPool2dFuncOptions(2).padding({a.size(2) % 2, a.size(3) % 2});
            a = F::avg_pool2d(a, opts);
            b = F::avg_pool2d(b, opts);
        }
    }
    return result.mean();
}

torch::Tensor ms_ssim_loss(const torch::Tensor& x, const torch::Tensor& y, const MsSsimOptions& options) {
    return 1 - ms_ssim(x, y, options);
}

torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& y) {
    if (x.sizes() != y.sizes()) throw Error("reconstruction loss: shape mismatch");
    return (x - y).square().mean();
}

torch::Tensor perceptual_loss(FeatureExtractor& phi, const torch::Tensor& x, const torch::Tensor& y,
                              std::vector<std::string> layers) {
    if (x.sizes() != y.sizes()) throw Error("perceptual loss: shape mismatch");
    if (layers.empty()) {
        const auto names = phi.stage_names();
        layers.assign(names.begin(), names.begin() + std::min<std::size_t>(4, names.size()));
    }
    const auto fx = phi.features(x, layers);
    const auto fy = phi.features(y, layers);
    torch::Tensor total = torch::zeros({}, x.options());
    for (const auto& name : layers) total = total + (fx.at(name) - fy.at(name)).square().mean();
    return total;
}

namespace {

// cos(a_i, b_i) per row; throws on zero-norm rows.
torch::Tensor cosine(const torch::Tensor& a, const torch::Tensor& b) {
    const auto na = a.norm(2, 1), nb = b.norm(2, 1);
    if ((na < 1e-12).any().item<bool>() || (nb < 1e-12).any().item<bool>()) {
        throw Error("identity loss: zero-norm embedding");
    }
    return (a * b).sum(1) / (na * nb);
}

void check_embeddings(const torch::Tensor& e1, const torch::Tensor& e2, const torch::Tensor& em) {
    if (e1.dim() != 2 || e1.sizes() != e2.sizes() || e1.sizes() != em.sizes()) {
        throw Error("identity loss: embeddings must share a [B, D] shape");
    }
}

}  // namespace

torch::Tensor identity_loss(const torch::Tensor& e1, const torch::Tensor& e2, const torch::Tensor& em) {
    check_embeddings(e1, e2, em);
    return (1 - 0.5 * (cosine(e1, em) + cosine(e2, em))).mean();
}

torch::Tensor identity_diff_loss(const torch::Tensor& e1, const torch::Tensor& e2, const torch::Tensor& em) {
    check_embeddings(e1, e2, em);
    return (cosine(e2, em) - cosine(e1, em)).mean();
}

torch::Tensor identity_loss(EmbeddingModel& f, const torch::Tensor& x1, const torch::Tensor& x2,
                            const torch::Tensor& morph) {
    return identity_loss(f.embed(x1), f.embed(x2), f.embed(morph));
}

torch::Tensor identity_diff_loss(EmbeddingModel& f, const torch::Tensor& x1, const torch::Tensor& x2,
                                 const torch::Tensor& morph) {
    return identity_diff_loss(f.embed(x1), f.embed(x2), f.embed(morph));
}

namespace {

struct ConvSpec {
    torch::Tensor weight, bias;
    int stride;
};

ConvSpec seeded_conv(at::Generator& gen, int in, int out, int stride) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(in * 9));
    return {torch::randn({out, in, 3, 3}, gen) * scale, torch::randn({out}, gen) * 0.1, stride};
}

torch::Tensor apply(const ConvSpec& c, const torch::Tensor& x) {
    return F::conv2d(x, c.weight.to(x.dtype()), F::Conv2dFuncOptions().bias(c.bias.to(x.dtype())).stride(c.stride).padding(1));
}

// Four tanh conv stages, average-pooled by 2 between stages. Smooth so that
// finite-difference checks are meaningful.
class TinyFeatureExtractor final : public FeatureExtractor {
public:
    explicit TinyFeatureExtractor(std::uint64_t seed) {
        auto gen = at::detail::createCPUGenerator(seed);
        const int widths[5] = {3, 8, 16, 32, 32};
        for (int i = 0; i < 4; ++i) convs_.push_back(seeded_conv(gen, widths[i], widths[i + 1], 1));
    }
    std::vector<std::string> stage_names() const override { return {"stage1", "stage2", "stage3", "stage4"}; }
    std::map<std::string, torch::Tensor> features(const torch::Tensor& x,
                                                  const std::vector<std::string>& stages) override {
        const auto names = stage_names();
        std::size_t deepest = 0;
        for (const auto& s : stages) {
            const auto it = std::find(names.begin(), names.end(), s);
            if (it == names.end()) throw Error("unknown perceptual layer '" + s + "'");
            deepest = std::max(deepest, static_cast<std::size_t>(it - names.begin()) + 1);
        }
        std::map<std::string, torch::Tensor> out;
        torch::Tensor h = x;
        for (std::size_t i = 0; i < deepest; ++i) {
            if (i > 0 && h.size(2) >= 2 && h.size(3) >= 2) h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(2));
            h = torch::tanh(apply(convs_[i], h));
            if (std::find(stages.begin(), stages.end(), names[i]) != stages.end()) out[names[i]] = h;
        }
        return out;
    }
    std::string description() const override { return "built-in tiny feature extractor (seeded, untrained)"; }

private:
    std::vector<ConvSpec> convs_;
};

class TinyEmbeddingModel final : public EmbeddingModel {
public:
    TinyEmbeddingModel(std::uint64_t seed, int dim) {
        auto gen = at::detail::createCPUGenerator(seed);
        convs_ = {seeded_conv(gen, 3, 8, 2), seeded_conv(gen, 8, 16, 2), seeded_conv(gen, 16, 32, 2)};
        proj_ = torch::randn({dim, 32}, gen) / std::sqrt(32.0);
        bias_ = torch::randn({dim}, gen) * 0.1;
    }
    torch::Tensor embed(const torch::Tensor& x) override {
        torch::Tensor h = x;
        for (const auto& c : convs_) h = torch::tanh(apply(c, h));
        h = h.mean({2, 3});
        return torch::addmm(bias_.to(h.dtype()), h, proj_.to(h.dtype()).t());
    }
    std::string description() const override { return "built-in tiny embedding model (seeded, untrained)"; }

private:
    std::vector<ConvSpec> convs_;
    torch::Tensor proj_, bias_;
};

class ScriptFeatureExtractor final : public FeatureExtractor {
public:
    ScriptFeatureExtractor(torch::jit::script::Module module, std::vector<std::string> names, std::string path)
        : module_(std::move(module)), names_(std::move(names)), path_(std::move(path)) {
        module_.eval();
    }
    std::vector<std::string> stage_names() const override { return names_; }
    std::map<std::string, torch::Tensor> features(const torch::Tensor& x,
                                                  const std::vector<std::string>& stages) override {
        for (const auto& s : stages) {
            if (std::find(names_.begin(), names_.end(), s) == names_.end()) {
                throw Error("unknown perceptual layer '" + s + "'");
            }
        }
        const auto result = module_.forward({x});
        std::vector<torch::Tensor> outs;
        if (result.isTuple()) {
            for (const auto& v : result.toTuple()->elements()) outs.push_back(v.toTensor());
        } else if (result.isTensorList()) {
            outs = result.toTensorVector();
        } else if (result.isList()) {
            for (const auto& v : result.toListRef()) outs.push_back(v.toTensor());
        } else {
            throw Error("feature extractor " + path_ + " must return a tuple or list of tensors");
        }
        if (outs.size() != names_.size()) {
            throw Error("feature extractor " + path_ + " returned " + std::to_string(outs.size()) + " stages, expected " +
                        std::to_string(names_.size()));
        }
        std::map<std::string, torch::Tensor> out;
        for (std::size_t i = 0; i < names_.size(); ++i) {
            if (std::find(stages.begin(), stages.end(), names_[i]) != stages.end()) out[names_[i]] = outs[i];
        }
        return out;
    }
    std::string description() const override { return "TorchScript feature extractor " + path_; }

private:
    torch::jit::script::Module module_;
    std::vector<std::string> names_;
    std::string path_;
};

class ScriptEmbeddingModel final : public EmbeddingModel {
public:
    ScriptEmbeddingModel(torch::jit::script::Module module, std::string path)
        : module_(std::move(module)), path_(std::move(path)) {
        module_.eval();
    }
    torch::Tensor embed(const torch::Tensor& x) override {
        auto out = module_.forward({x}).toTensor();
        return out.flatten(1);
    }
    std::string description() const override { return "TorchScript embedding model " + path_; }

private:
    torch::jit::script::Module module_;
    std::string path_;
};

torch::jit::script::Module load_script(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw LoadError("model not found: " + path.string());
    try {
        auto m = torch::jit::load(path.string());
        for (auto p : m.parameters()) p.set_requires_grad(false);
        return m;
    } catch (const c10::Error& e) {
        throw LoadError("cannot load TorchScript model " + path.string() + ": " + e.what_without_backtrace());
    }
}

}  // namespace

std::unique_ptr<FeatureExtractor> tiny_feature_extractor(std::uint64_t seed) {
    return std::make_unique<TinyFeatureExtractor>(seed);
}

std::unique_ptr<EmbeddingModel> tiny_embedding_model(std::uint64_t seed, int dim) {
    return std::make_unique<TinyEmbeddingModel>(seed, dim);
}

std::unique_ptr<FeatureExtractor> load_feature_extractor(const std::filesystem::path& path,
                                                         std::vector<std::string> stage_names) {
    if (stage_names.empty()) throw ConfigError("feature extractor needs its stage names");
    return std::make_unique<ScriptFeatureExtractor>(load_script(path), std::move(stage_names), path.string());
}

std::unique_ptr<EmbeddingModel> load_embedding_model(const std::filesystem::path& path) {
    return std::make_unique<ScriptEmbeddingModel>(load_script(path), path.string());
}

}  // namespace ocumorph::losses
