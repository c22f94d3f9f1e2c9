#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace ocumorph::losses {

inline constexpr std::size_t kNumLosses = 6;
// Order used for loss vectors, weight vectors and log columns.
inline constexpr std::array<const char*, kNumLosses> kLossNames = {"adv",            "ms_ssim",  "perceptual",
                                                                   "reconstruction", "identity", "identity_diff"};

struct LossTerms {
    torch::Tensor adv, ms_ssim, perceptual, reconstruction, identity, identity_diff;

    std::array<torch::Tensor, kNumLosses> list() const {
        return {adv, ms_ssim, perceptual, reconstruction, identity, identity_diff};
    }
    std::array<double, kNumLosses> values() const;
};

// sum_i w_i L_i
torch::Tensor total_loss(const LossTerms& losses, const std::array<double, kNumLosses>& weights);
double total_loss(const std::array<double, kNumLosses>& losses, const std::array<double, kNumLosses>& weights);

// ---- adversarial -----------------------------------------------------------

// Image [B, C, H, W] + heatmaps [B, K, H, W] -> one or more critic maps [B, 1, h, w].
using Critic = std::function<std::vector<torch::Tensor>(const torch::Tensor&, const torch::Tensor&)>;

// mean over scales of (E[D(fake)] - E[D(real)])
torch::Tensor adv_loss_discriminator(const std::vector<torch::Tensor>& real_maps,
                                     const std::vector<torch::Tensor>& fake_maps);
// -mean over scales of E[D(fake)]
torch::Tensor adv_loss_generator(const std::vector<torch::Tensor>& fake_maps);

// E[(||grad_xhat c(xhat)||_2 - 1)^2], xhat = u real + (1-u) fake with u ~ U(0,1)
// per sample; c(x) = sum over scales of the spatial mean of the critic map.
// The graph is kept so the penalty can be backpropagated into the critic.
torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& reals, const torch::Tensor& fakes,
                               const torch::Tensor& heatmaps, torch::Generator& generator);
// Same with explicit interpolation coefficients u [B].
torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& reals, const torch::Tensor& fakes,
                               const torch::Tensor& heatmaps, const torch::Tensor& u);

// ---- structural ------------------------------------------------------------

struct MsSsimOptions {
    int window = 11;
    double sigma = 1.5;
    // one weight per scale; the standard five-scale weights by default
    std::vector<double> weights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    double k1 = 0.01, k2 = 0.03;

    // Smallest image side the pyramid supports.
    int min_size() const { return (window - 1) * (1 << (weights.size() - 1)) + 1; }
    // First `scales` standard weights renormalized to sum to 1.
    static MsSsimOptions truncated(int scales);
};

// Inputs in [-1, 1] (rescaled to [0, 1] internally), [B, C, H, W].
torch::Tensor ms_ssim(const torch::Tensor& x, const torch::Tensor& y, const MsSsimOptions& options = {});
torch::Tensor ms_ssim_loss(const torch::Tensor& x, const torch::Tensor& y, const MsSsimOptions& options = {});

// Mean SSIM and contrast-structure term for data in [0, data_range]; valid
// Gaussian filtering. Returns {ssim, cs}, each [B, C].
std::pair<torch::Tensor, torch::Tensor> ssim_components(const torch::Tensor& x, const torch::Tensor& y, int window,
                                                        double sigma, double data_range, double k1 = 0.01,
                                                        double k2 = 0.03);

torch::Tensor reconstruction_loss(const torch::Tensor& x, const torch::Tensor& y);

// ---- plug-in backbones -----------------------------------------------------

class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::vector<std::string> stage_names() const = 0;
    // Features for the requested stages; throws on unknown names.
    virtual std::map<std::string, torch::Tensor> features(const torch::Tensor& x,
                                                          const std::vector<std::string>& stages) = 0;
    virtual std::string description() const = 0;
};

class EmbeddingModel {
public:
    virtual ~EmbeddingModel() = default;
    // [B, C, H, W] -> [B, D]; need not be normalized.
    virtual torch::Tensor embed(const torch::Tensor& x) = 0;
    virtual std::string description() const = 0;
};

// Small frozen CNNs with seeded weights, used when no backbone is supplied.
std::unique_ptr<FeatureExtractor> tiny_feature_extractor(std::uint64_t seed = 7);
std::unique_ptr<EmbeddingModel> tiny_embedding_model(std::uint64_t seed = 11, int dim = 64);

// TorchScript modules loaded by path. The feature module must return a tuple or
// list of tensors, one per entry of `stage_names`.
std::unique_ptr<FeatureExtractor> load_feature_extractor(const std::filesystem::path& path,
                                                         std::vector<std::string> stage_names);
std::unique_ptr<EmbeddingModel> load_embedding_model(const std::filesystem::path& path);

// sum over layers of mean((phi_l(x) - phi_l(y))^2); empty layers = first four stages.
torch::Tensor perceptual_loss(FeatureExtractor& phi, const torch::Tensor& x, const torch::Tensor& y,
                              std::vector<std::string> layers = {});

// Embedding-level forms, embeddings [B, D]; batch mean. Zero-norm embeddings throw.
torch::Tensor identity_loss(const torch::Tensor& e1, const torch::Tensor& e2, const torch::Tensor& em);
torch::Tensor identity_diff_loss(const torch::Tensor& e1, const torch::Tensor& e2, const torch::Tensor& em);

torch::Tensor identity_loss(EmbeddingModel& f, const torch::Tensor& x1, const torch::Tensor& x2,
                            const torch::Tensor& morph);
torch::Tensor identity_diff_loss(EmbeddingModel& f, const torch::Tensor& x1, const torch::Tensor& x2,
                                 const torch::Tensor& morph);

}  // namespace ocumorph::losses
