#include "ocumorph/landmark_gen.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include <opencv2/imgproc.hpp>

#include "ocumorph/tensor_image.hpp"

namespace ocumorph::landmarks {

namespace F = torch::nn::functional;

HeatmapStack render_heatmaps(std::span<const Point2> points, int height, int width, double sigma) {
    if (!(sigma > 0.0)) throw Error("heatmap sigma must be positive");
    if (height <= 0 || width <= 0) throw Error("heatmap size must be positive");

    const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    const auto xs = torch::arange(width, opts);
    const auto ys = torch::arange(height, opts);
    const double inv = 1.0 / (2.0 * sigma * sigma);

    auto maps = torch::empty({static_cast<long>(points.size()), height, width}, opts);
    for (std::size_t i = 0; i < points.size(); ++i) {
        // separable: exp(-(dx^2 + dy^2) k) = exp(-dx^2 k) * exp(-dy^2 k)
        auto gx = torch::exp(-(xs - points[i].x).square() * inv);
        auto gy = torch::exp(-(ys - points[i].y).square() * inv);
        maps[static_cast<long>(i)] = torch::outer(gy, gx);
    }
    return {maps, sigma};
}

torch::Tensor core_heatmaps(const LandmarkSet& landmarks, int size, double sigma) {
    const double scale = static_cast<double>(size) / kFrameSize;
    auto core = core_landmarks(landmarks.scaled(scale));
    return render_heatmaps(core, size, size, sigma * scale).maps.to(torch::kFloat32);
}

void LgConfig::validate() const {
    if (input_size < 8 || input_size % 4 != 0) throw ConfigError("landmark input_size must be a multiple of 4, >= 8");
    if (output_neurons != 2 * static_cast<int>(kNumLandmarks)) throw ConfigError("landmark output layer must have 66 neurons");
    if (conv1_channels <= 0 || conv2_channels <= 0 || fc1 <= 0 || fc2 <= 0) throw ConfigError("layer widths must be positive");
    if (learning_rate < 0.0 || lr_gamma <= 0.0 || batch_size <= 0 || max_shift < 0) {
        throw ConfigError("invalid landmark training hyperparameters");
    }
}

LandmarkNetImpl::LandmarkNetImpl(const LgConfig& c) {
    c.validate();
    conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, c.conv1_channels, 3).padding(1)));
    conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(c.conv1_channels, c.conv2_channels, 3).padding(1)));
    const int spatial = c.input_size / 4;
    fc1 = register_module("fc1", torch::nn::Linear(c.conv2_channels * spatial * spatial, c.fc1));
    fc2 = register_module("fc2", torch::nn::Linear(c.fc1, c.fc2));
    out = register_module("out", torch::nn::Linear(c.fc2, c.output_neurons));
    // Start predictions near the frame center.
    torch::NoGradGuard no_grad;
    out->weight.mul_(0.1);
    out->bias.fill_(0.5);
}

torch::Tensor LandmarkNetImpl::forward(torch::Tensor x) {
    x = F::max_pool2d(torch::relu(conv1->forward(x)), F::MaxPool2dFuncOptions(2));
    x = F::max_pool2d(torch::relu(conv2->forward(x)), F::MaxPool2dFuncOptions(2));
    x = x.flatten(1);
    x = torch::relu(fc1->forward(x));
    x = torch::relu(fc2->forward(x));
    return out->forward(x);
}

LandmarkModel::LandmarkModel(const LgConfig& config, std::uint64_t seed) : config_(config), net_(nullptr) {
    config_.validate();
    torch::manual_seed(seed);
    net_ = LandmarkNet(config_);
}

torch::Tensor LandmarkModel::prepare(const io::OcularImage& image) const {
    if (image.range != io::ValueRange::normalized_minus1_1) {
        throw Error("landmark prediction needs a preprocessed [-1, 1] image");
    }
    if (image.width() != kFrameSize || image.height() != kFrameSize) {
        throw Error("landmark prediction needs a 256x256 image");
    }
    return image_to_tensor(resize_image(image, config_.input_size));
}

std::vector<LandmarkSet> LandmarkModel::predict(std::span<const io::OcularImage> images) {
    std::vector<LandmarkSet> out;
    if (images.empty()) return out;
    std::vector<torch::Tensor> batch;
    for (const auto& img : images) batch.push_back(prepare(img));

    torch::NoGradGuard no_grad;
    net_->eval();
    auto coords = (net_->forward(torch::stack(batch)) * kFrameSize).to(torch::kFloat64).contiguous();
    for (long i = 0; i < coords.size(0); ++i) {
        auto row = coords[i];
        out.push_back(LandmarkSet::from_flat({row.data_ptr<double>(), static_cast<std::size_t>(row.numel())}));
    }
    return out;
}

LandmarkSet LandmarkModel::predict(const io::OcularImage& image) {
    return predict(std::span<const io::OcularImage>(&image, 1)).front();
}

std::int64_t LandmarkModel::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : net_->parameters()) n += p.numel();
    return n;
}

namespace {
constexpr const char* kFormat = "ocumorph.landmark_model";
constexpr std::int64_t kVersion = 1;
}  // namespace

void LandmarkModel::save(const std::filesystem::path& path) const {
    torch::serialize::OutputArchive archive;
    archive.write("format", c10::IValue(std::string(kFormat)));
    archive.write("version", c10::IValue(kVersion));
    archive.write("input_size", c10::IValue(static_cast<std::int64_t>(config_.input_size)));
    archive.write("conv1", c10::IValue(static_cast<std::int64_t>(config_.conv1_channels)));
    archive.write("conv2", c10::IValue(static_cast<std::int64_t>(config_.conv2_channels)));
    archive.write("fc1", c10::IValue(static_cast<std::int64_t>(config_.fc1)));
    archive.write("fc2", c10::IValue(static_cast<std::int64_t>(config_.fc2)));
    torch::serialize::OutputArchive weights;
    net_->save(weights);
    archive.write("net", weights);

    auto tmp = path;
    tmp += ".tmp";
    archive.save_to(tmp.string());
    std::filesystem::rename(tmp, path);
}

LandmarkModel LandmarkModel::load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw CheckpointError("landmark model not found: " + path.string());
    try {
        torch::serialize::InputArchive archive;
        archive.load_from(path.string());
        c10::IValue v;
        archive.read("format", v);
        if (!v.isString() || v.toStringRef() != kFormat) throw CheckpointError("not a landmark model: " + path.string());
        archive.read("version", v);
        if (v.toInt() != kVersion) {
            throw CheckpointError("landmark model version " + std::to_string(v.toInt()) + " unsupported (expected " +
                                  std::to_string(kVersion) + ")");
        }
        LgConfig config;
        auto read_int = [&](const char* key) {
            archive.read(key, v);
            return static_cast<int>(v.toInt());
        };
        config.input_size = read_int("input_size");
        config.conv1_channels = read_int("conv1");
        config.conv2_channels = read_int("conv2");
        config.fc1 = read_int("fc1");
        config.fc2 = read_int("fc2");
        LandmarkModel model(config, 0);
        torch::serialize::InputArchive weights;
        archive.read("net", weights);
        model.net_->load(weights);
        return model;
    } catch (const c10::Error& e) {
        throw CheckpointError("corrupt landmark model " + path.string() + ": " + e.what_without_backtrace());
    }
}

namespace {

// Integer translation with edge replication; labels move with the image.
LabeledImage shifted(const LabeledImage& sample, int dx, int dy) {
    LabeledImage out = sample;
    if (dx == 0 && dy == 0) return out;
    cv::Mat m = (cv::Mat_<double>(2, 3) << 1, 0, dx, 0, 1, dy);
    out.image.pixels = cv::Mat();  // the copy above shares the source buffer
    cv::warpAffine(sample.image.pixels, out.image.pixels, m, sample.image.pixels.size(), cv::INTER_NEAREST,
                   cv::BORDER_REPLICATE);
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        out.landmarks[i] = {sample.landmarks[i].x + dx, sample.landmarks[i].y + dy};
    }
    return out;
}

torch::Tensor label_tensor(const LandmarkSet& l) {
    auto flat = l.to_flat();
    return torch::tensor(flat, torch::kFloat64).to(torch::kFloat32) / static_cast<float>(kFrameSize);
}

}  // namespace

double landmark_mse(LandmarkModel& model, std::span<const LabeledImage> data) {
    if (data.empty()) throw Error("landmark_mse: empty dataset");
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& sample : data) {
        auto pred = model.predict(sample.image).to_flat();
        auto truth = sample.landmarks.to_flat();
        for (std::size_t i = 0; i < pred.size(); ++i) {
            sum += (pred[i] - truth[i]) * (pred[i] - truth[i]);
        }
        count += pred.size();
    }
    return sum / static_cast<double>(count);
}

TrainedLandmarkModel train_landmark_model(std::span<const LabeledImage> data, const LgConfig& config, int epochs,
                                          std::uint64_t seed) {
    if (data.empty()) throw Error("train_landmark_model: empty dataset");
    if (epochs < 0) throw Error("train_landmark_model: negative epoch count");

    TrainedLandmarkModel result{LandmarkModel(config, seed), {}};
    LandmarkModel& model = result.model;
    torch::optim::Adam optim(model.net()->parameters(), torch::optim::AdamOptions(config.learning_rate));

    std::vector<torch::Tensor> inputs, labels;
    for (const auto& s : data) {
        inputs.push_back(model.prepare(s.image));
        labels.push_back(label_tensor(s.landmarks));
    }

    result.epoch_mse.push_back(landmark_mse(model, data));
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(data.size());

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        model.net()->train();
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<torch::Tensor> xb, yb;
            for (std::size_t j = start; j < end; ++j) {
                const std::size_t idx = order[j];
                if (config.max_shift > 0) {
                    const int span = 2 * config.max_shift + 1;
                    const int dx = static_cast<int>(rng() % span) - config.max_shift;
                    const int dy = static_cast<int>(rng() % span) - config.max_shift;
                    auto moved = shifted(data[idx], dx, dy);
                    xb.push_back(model.prepare(moved.image));
                    yb.push_back(label_tensor(moved.landmarks));
                } else {
                    xb.push_back(inputs[idx]);
                    yb.push_back(labels[idx]);
                }
            }
            optim.zero_grad();
            auto loss = F::mse_loss(model.net()->forward(torch::stack(xb)), torch::stack(yb));
            loss.backward();
            optim.step();
        }
        for (auto& group : optim.param_groups()) {
            auto& opts = static_cast<torch::optim::AdamOptions&>(group.options());
            opts.lr(config.learning_rate * std::pow(config.lr_gamma, epoch));
        }
        result.epoch_mse.push_back(landmark_mse(model, data));
    }
    return result;
}

}  // namespace ocumorph::landmarks
