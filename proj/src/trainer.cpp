#include "ocumorph/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "ocumorph/common.hpp"
#include "ocumorph/tensor_image.hpp"

namespace ocumorph::train {

using losses::kNumLosses;

// ---- configuration ---------------------------------------------------------

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr_e >= 0 && lr_g >= 0 && lr_d >= 0)) throw ConfigError("learning rates must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
    if (!(lr_gamma > 0 && lr_gamma <= 1)) throw ConfigError("lr_gamma must be in (0, 1]");
    if (!(gp_weight >= 0)) throw ConfigError("gp_weight must be >= 0");
    if (epochs < 0 || max_steps < 0) throw ConfigError("epochs and max_steps must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (!(adjust_rate > 0 && adjust_rate <= 1)) throw ConfigError("adjust_rate must be in (0, 1]");
    if (!(epsilon >= 0)) throw ConfigError("epsilon must be >= 0");
    if (!(heatmap_sigma > 0)) throw ConfigError("heatmap_sigma must be > 0");
    if (ms_ssim_scales < 0 || ms_ssim_scales > 5) throw ConfigError("ms_ssim_scales must be in [0, 5]");
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
    return out;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    long long out = 0;
    try {
        out = std::stoll(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
    return out;
}

}  // namespace

void apply_setting(TrainConfig& t, nets::NetConfig& n, const std::string& key, const std::string& value) {
    const auto d = [&] { return parse_double(key, value); };
    const auto i = [&] { return static_cast<int>(parse_int(key, value)); };
    if (key == "batch_size") t.batch_size = i();
    else if (key == "lr_e") t.lr_e = d();
    else if (key == "lr_g") t.lr_g = d();
    else if (key == "lr_d") t.lr_d = d();
    else if (key == "beta1") t.beta1 = d();
    else if (key == "beta2") t.beta2 = d();
    else if (key == "weight_decay") t.weight_decay = d();
    else if (key == "lr_gamma") t.lr_gamma = d();
    else if (key == "gp_weight") t.gp_weight = d();
    else if (key == "epochs") t.epochs = i();
    else if (key == "max_steps") t.max_steps = parse_int(key, value);
    else if (key == "seed") t.seed = static_cast<std::uint64_t>(parse_int(key, value));
    else if (key == "checkpoint_every") t.checkpoint_every = i();
    else if (key == "adjust_rate") t.adjust_rate = d();
    else if (key == "epsilon") t.epsilon = d();
    else if (key == "heatmap_sigma") t.heatmap_sigma = d();
    else if (key == "ms_ssim_scales") t.ms_ssim_scales = i();
    else if (key == "ndf") n.ndf = i();
    else if (key == "ngf") n.ngf = i();
    else if (key == "nz") n.nz = i();
    else if (key == "image_size") n.image_size = i();
    else if (key == "landmark_dim") n.landmark_dim = i();
    else if (key == "sn_warmup") n.sn_warmup = i();
    else throw ConfigError("unknown config key '" + key + "'");
}

void read_config(const fs::path& path, TrainConfig& train, nets::NetConfig& net) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open config " + path.string());
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path.string() + ":" + std::to_string(number) + ": expected 'key = value'");
        }
        apply_setting(train, net, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    train.validate();
    net.validate();
}

std::string to_text(const TrainConfig& t, const nets::NetConfig& n) {
    std::ostringstream s;
    s << std::setprecision(17);
    s << "batch_size = " << t.batch_size << "\nlr_e = " << t.lr_e << "\nlr_g = " << t.lr_g << "\nlr_d = " << t.lr_d
      << "\nbeta1 = " << t.beta1 << "\nbeta2 = " << t.beta2 << "\nweight_decay = " << t.weight_decay
      << "\nlr_gamma = " << t.lr_gamma << "\ngp_weight = " << t.gp_weight << "\nepochs = " << t.epochs
      << "\nmax_steps = " << t.max_steps << "\nseed = " << t.seed << "\ncheckpoint_every = " << t.checkpoint_every
      << "\nadjust_rate = " << t.adjust_rate << "\nepsilon = " << t.epsilon << "\nheatmap_sigma = " << t.heatmap_sigma
      << "\nms_ssim_scales = " << t.ms_ssim_scales << "\nndf = " << n.ndf << "\nngf = " << n.ngf << "\nnz = " << n.nz
      << "\nimage_size = " << n.image_size << "\nlandmark_dim = " << n.landmark_dim << "\nsn_warmup = " << n.sn_warmup
      << "\n";
    return s.str();
}

double scheduled_lr(double lr0, double gamma, int epoch) { return lr0 * std::pow(gamma, epoch); }

losses::MsSsimOptions ms_ssim_options(const TrainConfig& config, int image_size) {
    if (config.ms_ssim_scales > 0) return losses::MsSsimOptions::truncated(config.ms_ssim_scales);
    for (int scales = 5; scales >= 1; --scales) {
        const auto o = losses::MsSsimOptions::truncated(scales);
        if (o.min_size() <= image_size) return o;
    }
    throw ConfigError("image too small for MS-SSIM");
}

// ---- models ----------------------------------------------------------------

Models::Models(const nets::NetConfig& c)
    : config(c),
      landmark_encoder(c),
      encoder(c),
      generator(c),
      discriminator(c) {}

void Models::train(bool on) {
    landmark_encoder->train(on);
    encoder->train(on);
    generator->train(on);
    discriminator->train(on);
}

void Models::save(torch::serialize::OutputArchive& archive) const {
    const std::pair<const char*, const torch::nn::Module*> parts[] = {
        {"landmark_encoder", landmark_encoder.get()},
        {"encoder", encoder.get()},
        {"generator", generator.get()},
        {"discriminator", discriminator.get()}};
    for (const auto& [name, module] : parts) {
        torch::serialize::OutputArchive sub;
        module->save(sub);
        archive.write(name, sub);
    }
}

void Models::load(torch::serialize::InputArchive& archive) {
    const std::pair<const char*, torch::nn::Module*> parts[] = {{"landmark_encoder", landmark_encoder.get()},
                                                                {"encoder", encoder.get()},
                                                                {"generator", generator.get()},
                                                                {"discriminator", discriminator.get()}};
    for (const auto& [name, module] : parts) {
        torch::serialize::InputArchive sub;
        archive.read(name, sub);
        module->load(sub);
    }
}

Sample make_sample(const io::OcularImage& image, const LandmarkSet& l, int image_size, double sigma) {
    if (image.range != io::ValueRange::normalized_minus1_1) throw Error("training images must be normalized");
    const auto resized = image.height() == image_size && image.width() == image_size ? image : resize_image(image, image_size);
    return {image_to_tensor(resized), landmarks::core_heatmaps(l, image_size, sigma), l};
}

PlugIns fallback_plugins() {
    PlugIns p;
    p.embedding = losses::tiny_embedding_model();
    p.features = losses::tiny_feature_extractor();
    p.fallback = true;
    return p;
}

void write_log_header(std::ostream& out) {
    out << "step,epoch";
    for (const auto* n : losses::kLossNames) out << "," << n;
    for (const auto* n : losses::kLossNames) out << ",w_" << n;
    out << ",critic_loss,gp\n";
}

void write_log_row(std::ostream& out, const StepRecord& r) {
    out << r.step << "," << r.epoch << std::setprecision(10);
    for (double v : r.losses) out << "," << v;
    for (double v : r.weights) out << "," << v;
    out << "," << r.critic_loss << "," << r.gp << "\n";
}

// ---- trainer ---------------------------------------------------------------

namespace {

constexpr const char* kFormat = "ocumorph.trainer_checkpoint";
constexpr std::int64_t kVersion = 1;

torch::optim::AdamW make_adamw(std::vector<torch::Tensor> params, double lr, const TrainConfig& c) {
    return torch::optim::AdamW(std::move(params), torch::optim::AdamWOptions(lr)
                                                      .betas({c.beta1, c.beta2})
                                                      .weight_decay(c.weight_decay));
}

std::vector<torch::Tensor> concat(std::vector<torch::Tensor> a, const std::vector<torch::Tensor>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

void set_requires_grad(torch::nn::Module& m, bool on) {
    for (auto& p : m.parameters()) p.set_requires_grad(on);
}

bool finite(double v) { return std::isfinite(v); }

std::string describe_losses(const weights::Vector& l) {
    std::ostringstream s;
    for (std::size_t i = 0; i < l.size(); ++i) s << (i ? " " : "") << losses::kLossNames[i] << "=" << l[i];
    return s.str();
}

}  // namespace

Trainer::Trainer(const nets::NetConfig& net, const TrainConfig& config, TrainingSet data, PlugIns plugins)
    : net_(net),
      config_(config),
      data_(std::move(data)),
      plugins_(std::move(plugins)),
      ms_ssim_((config.validate(), net.validate(), ms_ssim_options(config, net.image_size))),
      models_((torch::manual_seed(config.seed), net)),
      order_rng_(config.seed),
      gp_generator_(at::detail::createCPUGenerator(config.seed ^ 0x9e3779b97f4a7c15ULL)) {
    if (data_.pairs.empty()) throw Error("training needs at least one pair");
    for (const auto& p : data_.pairs) {
        if (p.a >= data_.samples.size() || p.b >= data_.samples.size()) throw Error("pair index out of range");
    }
    for (const auto& s : data_.samples) {
        if (s.image.dim() != 3 || s.image.size(1) != net.image_size || s.image.size(2) != net.image_size) {
            throw Error("sample size does not match image_size " + std::to_string(net.image_size));
        }
    }
    if (!plugins_.embedding || !plugins_.features) throw Error("trainer needs an embedding model and a feature extractor");

    opt_e_ = std::make_unique<torch::optim::AdamW>(
        make_adamw(concat(models_.encoder->parameters(), models_.landmark_encoder->parameters()), config.lr_e, config));
    opt_g_ = std::make_unique<torch::optim::AdamW>(make_adamw(models_.generator->parameters(), config.lr_g, config));
    opt_d_ = std::make_unique<torch::optim::AdamW>(make_adamw(models_.discriminator->parameters(), config.lr_d, config));

    weights_.rate = config.adjust_rate;
    weights_.epsilon = config.epsilon;
    weights_.validate();
    models_.train(true);
    begin_epoch();
}

std::size_t Trainer::steps_per_epoch() const {
    const auto b = static_cast<std::size_t>(config_.batch_size);
    return (data_.pairs.size() + b - 1) / b;
}

bool Trainer::finished() const {
    if (config_.max_steps > 0 && step_ >= config_.max_steps) return true;
    return epoch_ >= config_.epochs;
}

double Trainer::learning_rate(char which) const {
    const double lr0 = which == 'e' ? config_.lr_e : which == 'g' ? config_.lr_g : config_.lr_d;
    return scheduled_lr(lr0, config_.lr_gamma, epoch_);
}

void Trainer::set_learning_rates() {
    const std::pair<torch::optim::AdamW*, char> opts[] = {{opt_e_.get(), 'e'}, {opt_g_.get(), 'g'}, {opt_d_.get(), 'd'}};
    for (const auto& [opt, which] : opts) {
        for (auto& group : opt->param_groups()) {
            static_cast<torch::optim::AdamWOptions&>(group.options()).lr(learning_rate(which));
        }
    }
}

void Trainer::begin_epoch() {
    order_.resize(data_.pairs.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    // Fisher-Yates with explicit draws so the order only depends on the engine
    for (std::size_t i = order_.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(order_rng_() % i);
        std::swap(order_[i - 1], order_[j]);
    }
    cursor_ = 0;
    set_learning_rates();
}

StepRecord Trainer::step() {
    namespace L = losses;
    const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(config_.batch_size));
    std::vector<torch::Tensor> x1v, x2v, h1v, h2v, hmv, alphas;
    std::vector<LandmarkSet> l1v, l2v;
    for (std::size_t k = cursor_; k < end; ++k) {
        const auto& pair = data_.pairs[order_[k]];
        const auto& a = data_.samples[pair.a];
        const auto& b = data_.samples[pair.b];
        x1v.push_back(a.image);
        x2v.push_back(b.image);
        h1v.push_back(a.heatmaps);
        h2v.push_back(b.heatmaps);
        hmv.push_back(landmarks::core_heatmaps(a.landmarks.lerp(b.landmarks, pair.alpha), net_.image_size,
                                               config_.heatmap_sigma));
        l1v.push_back(a.landmarks);
        l2v.push_back(b.landmarks);
        alphas.push_back(torch::tensor(static_cast<float>(pair.alpha)));
    }
    cursor_ = end;
    const auto x1 = torch::stack(x1v), x2 = torch::stack(x2v);
    const auto h1 = torch::stack(h1v), h2 = torch::stack(h2v), hm = torch::stack(hmv);
    const auto alpha = torch::stack(alphas).unsqueeze(1);

    auto& m = models_;
    // encoder / generator forward, kept for the generator update
    const auto z1 = m.encoder->forward(x1, h1), z2 = m.encoder->forward(x2, h2);
    const auto f1 = m.landmark_encoder->forward(nets::landmark_input(l1v));
    const auto f2 = m.landmark_encoder->forward(nets::landmark_input(l2v));
    const auto rec1 = m.generator->forward(z1, f1), rec2 = m.generator->forward(z2, f2);
    const auto morph = m.generator->forward((1 - alpha) * z1 + alpha * z2, (1 - alpha) * f1 + alpha * f2);

    const auto reals = torch::cat({x1, x2}), real_heat = torch::cat({h1, h2});
    const auto fakes = torch::cat({rec1, rec2, morph}), fake_heat = torch::cat({h1, h2, hm});

    // critic update; fakes are constants here
    set_requires_grad(*m.discriminator, true);
    opt_d_->zero_grad();
    const auto critic = [&](const torch::Tensor& x, const torch::Tensor& h) { return m.discriminator->forward(x, h); };
    const auto critic_loss = L::adv_loss_discriminator(critic(reals, real_heat), critic(fakes.detach(), fake_heat));
    const auto gp = L::gradient_penalty(critic, reals, torch::cat({rec1, rec2}).detach(), real_heat, gp_generator_);
    const auto err_d = critic_loss + config_.gp_weight * gp;
    const double critic_value = critic_loss.item<double>(), gp_value = gp.item<double>();
    if (!finite(critic_value) || !finite(gp_value)) {
        throw TrainingAborted("non-finite critic loss at step " + std::to_string(step_ + 1));
    }
    err_d.backward();
    opt_d_->step();

    // encoder / generator update with the current dynamic weights
    set_requires_grad(*m.discriminator, false);
    L::LossTerms terms;
    terms.adv = L::adv_loss_generator(critic(fakes, fake_heat));
    terms.ms_ssim = 0.5 * (L::ms_ssim_loss(rec1, x1, ms_ssim_) + L::ms_ssim_loss(rec2, x2, ms_ssim_));
    terms.perceptual = 0.5 * (L::perceptual_loss(*plugins_.features, rec1, x1, plugins_.perceptual_layers) +
                              L::perceptual_loss(*plugins_.features, rec2, x2, plugins_.perceptual_layers));
    terms.reconstruction = 0.5 * (L::reconstruction_loss(rec1, x1) + L::reconstruction_loss(rec2, x2));
    torch::Tensor e1, e2;
    {
        torch::NoGradGuard ng;  // the contributing images are fixed targets
        e1 = plugins_.embedding->embed(x1);
        e2 = plugins_.embedding->embed(x2);
    }
    const auto em = plugins_.embedding->embed(morph);
    terms.identity = L::identity_loss(e1, e2, em);
    terms.identity_diff = L::identity_diff_loss(e1, e2, em);

    StepRecord record;
    record.step = step_ + 1;
    record.epoch = epoch_;
    record.losses = terms.values();
    record.weights = weights_.weights;
    record.critic_loss = critic_value;
    record.gp = gp_value;
    for (double v : record.losses) {
        if (!finite(v)) {
            throw TrainingAborted("non-finite loss at step " + std::to_string(record.step) + ": " +
                                  describe_losses(record.losses));
        }
    }

    opt_e_->zero_grad();
    opt_g_->zero_grad();
    L::total_loss(terms, weights_.weights).backward();
    opt_e_->step();
    opt_g_->step();
    set_requires_grad(*m.discriminator, true);

    weights_ = weights::update(weights_, weights::inverter_inputs(record.losses));
    ++step_;
    if (cursor_ >= order_.size()) {
        ++epoch_;
        begin_epoch();
    }
    return record;
}

std::vector<StepRecord> Trainer::run(const fs::path& out_dir, const std::function<void(const StepRecord&)>& on_step) {
    std::vector<StepRecord> records;
    std::ofstream log;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        const auto log_path = out_dir / "train_log.csv";
        const bool fresh = !fs::exists(log_path) || step_ == 0;
        log.open(log_path, fresh ? std::ios::trunc : std::ios::app);
        if (!log) throw Error("cannot write " + log_path.string());
        if (fresh) write_log_header(log);
    }
    while (!finished()) {
        auto r = step();
        records.push_back(r);
        if (log.is_open()) {
            write_log_row(log, r);
            log.flush();
        }
        if (on_step) on_step(r);
        const bool epoch_done = epoch_ != r.epoch;
        if (!out_dir.empty() && epoch_done && (r.epoch + 1) % config_.checkpoint_every == 0) {
            std::ostringstream name;
            name << "checkpoint_epoch" << std::setw(4) << std::setfill('0') << r.epoch + 1 << ".pt";
            save_checkpoint(out_dir / name.str());
        }
    }
    if (!out_dir.empty()) save_checkpoint(out_dir / "checkpoint_last.pt");
    return records;
}

void Trainer::save_checkpoint(const fs::path& path) const {
    torch::serialize::OutputArchive archive;
    archive.write("format", c10::IValue(std::string(kFormat)));
    archive.write("version", c10::IValue(kVersion));
    archive.write("config", c10::IValue(to_text(config_, net_)));
    archive.write("n_heatmaps", c10::IValue(static_cast<std::int64_t>(net_.n_heatmaps)));
    archive.write("nc", c10::IValue(static_cast<std::int64_t>(net_.nc)));

    torch::serialize::OutputArchive nets_archive;
    models_.save(nets_archive);
    archive.write("models", nets_archive);

    const std::pair<const char*, const torch::optim::AdamW*> opts[] = {
        {"opt_e", opt_e_.get()}, {"opt_g", opt_g_.get()}, {"opt_d", opt_d_.get()}};
    for (const auto& [name, opt] : opts) {
        torch::serialize::OutputArchive sub;
        opt->save(sub);
        archive.write(name, sub);
    }

    archive.write("loss_weights", torch::tensor(std::vector<double>(weights_.weights.begin(), weights_.weights.end()),
                                                torch::kFloat64));
    archive.write("adjust_rate", c10::IValue(weights_.rate));
    archive.write("epsilon", c10::IValue(weights_.epsilon));
    archive.write("epoch", c10::IValue(static_cast<std::int64_t>(epoch_)));
    archive.write("step", c10::IValue(step_));
    archive.write("cursor", c10::IValue(static_cast<std::int64_t>(cursor_)));
    std::vector<std::int64_t> order(order_.begin(), order_.end());
    archive.write("order", torch::tensor(order, torch::kInt64));
    std::ostringstream rng;
    rng << order_rng_;
    archive.write("order_rng", c10::IValue(rng.str()));
    archive.write("gp_rng", gp_generator_.get_state());

    auto tmp = path;
    tmp += ".tmp";
    archive.save_to(tmp.string());
    fs::rename(tmp, path);
}

namespace {

torch::serialize::InputArchive open_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path.string());
    } catch (const c10::Error& e) {
        throw CheckpointError("corrupt checkpoint " + path.string() + ": " + e.what_without_backtrace());
    }
    c10::IValue v;
    if (!archive.try_read("format", v) || !v.isString() || v.toStringRef() != kFormat) {
        throw CheckpointError("not a trainer checkpoint: " + path.string());
    }
    archive.read("version", v);
    if (v.toInt() != kVersion) {
        throw CheckpointError("checkpoint version " + std::to_string(v.toInt()) + " unsupported (expected " +
                              std::to_string(kVersion) + ")");
    }
    return archive;
}

nets::NetConfig stored_net_config(torch::serialize::InputArchive& archive) {
    c10::IValue v;
    archive.read("config", v);
    TrainConfig t;
    nets::NetConfig n;
    std::istringstream in(v.toStringRef());
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        apply_setting(t, n, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    archive.read("n_heatmaps", v);
    n.n_heatmaps = static_cast<int>(v.toInt());
    archive.read("nc", v);
    n.nc = static_cast<int>(v.toInt());
    return n;
}

bool same_shape(const nets::NetConfig& a, const nets::NetConfig& b) {
    return a.ndf == b.ndf && a.ngf == b.ngf && a.nz == b.nz && a.nc == b.nc && a.n_heatmaps == b.n_heatmaps &&
           a.image_size == b.image_size && a.landmark_dim == b.landmark_dim;
}

}  // namespace

void Trainer::load_checkpoint(const fs::path& path) {
    auto archive = open_checkpoint(path);
    try {
        const auto stored = stored_net_config(archive);
        if (!same_shape(stored, net_)) {
            throw CheckpointError("checkpoint network config (" + stored.describe() + ") differs from the trainer's (" +
                                  net_.describe() + ")");
        }
        // Stage everything, then commit, so a failure leaves this trainer untouched.
        Models models(net_);
        torch::serialize::InputArchive nets_archive;
        archive.read("models", nets_archive);
        models.load(nets_archive);

        c10::IValue v;
        torch::Tensor w;
        archive.read("loss_weights", w);
        weights::WeightState ws;
        for (std::size_t i = 0; i < kNumLosses; ++i) ws.weights[i] = w[i].item<double>();
        archive.read("adjust_rate", v);
        ws.rate = v.toDouble();
        archive.read("epsilon", v);
        ws.epsilon = v.toDouble();
        ws.validate();
        archive.read("epoch", v);
        const int epoch = static_cast<int>(v.toInt());
        archive.read("step", v);
        const auto step = v.toInt();
        archive.read("cursor", v);
        const auto cursor = static_cast<std::size_t>(v.toInt());
        torch::Tensor order_t;
        archive.read("order", order_t);
        std::vector<std::size_t> order(order_t.numel());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::size_t>(order_t[i].item<std::int64_t>());
        if (order.size() != data_.pairs.size() || cursor > order.size()) {
            throw CheckpointError("checkpoint was written for a different pair list");
        }
        archive.read("order_rng", v);
        std::mt19937_64 rng;
        std::istringstream(v.toStringRef()) >> rng;
        torch::Tensor gp_state;
        archive.read("gp_rng", gp_state);

        // commit
        for (auto [dst, src] : {std::pair<torch::nn::Module*, torch::nn::Module*>{models_.landmark_encoder.get(),
                                                                                  models.landmark_encoder.get()},
                                {models_.encoder.get(), models.encoder.get()},
                                {models_.generator.get(), models.generator.get()},
                                {models_.discriminator.get(), models.discriminator.get()}}) {
            torch::NoGradGuard ng;
            auto dp = dst->named_parameters(), sp = src->named_parameters();
            for (auto& item : dp) item.value().copy_(sp[item.key()]);
            auto db = dst->named_buffers(), sb = src->named_buffers();
            for (auto& item : db) item.value().copy_(sb[item.key()]);
        }
        const std::pair<const char*, torch::optim::AdamW*> opts[] = {
            {"opt_e", opt_e_.get()}, {"opt_g", opt_g_.get()}, {"opt_d", opt_d_.get()}};
        for (const auto& [name, opt] : opts) {
            torch::serialize::InputArchive sub;
            archive.read(name, sub);
            opt->load(sub);
        }
        weights_ = ws;
        epoch_ = epoch;
        step_ = step;
        cursor_ = cursor;
        order_ = std::move(order);
        order_rng_ = rng;
        gp_generator_.set_state(gp_state);
        set_learning_rates();
        models_.train(true);
    } catch (const c10::Error& e) {
        throw CheckpointError("corrupt checkpoint " + path.string() + ": " + e.what_without_backtrace());
    }
}

std::unique_ptr<Models> load_models(const fs::path& checkpoint) {
    auto archive = open_checkpoint(checkpoint);
    try {
        const auto config = stored_net_config(archive);
        auto models = std::make_unique<Models>(config);
        torch::serialize::InputArchive nets_archive;
        archive.read("models", nets_archive);
        models->load(nets_archive);
        models->train(false);
        return models;
    } catch (const c10::Error& e) {
        throw CheckpointError("corrupt checkpoint " + checkpoint.string() + ": " + e.what_without_backtrace());
    }
}

// ---- inference -------------------------------------------------------------

Latent encode(Models& models, const io::OcularImage& image, const LandmarkSet& l, double sigma) {
    torch::NoGradGuard ng;
    models.train(false);
    const auto s = make_sample(image, l, models.config.image_size, sigma);
    return {models.encoder->forward(s.image.unsqueeze(0), s.heatmaps.unsqueeze(0)),
            models.landmark_encoder->forward(nets::landmark_input(l))};
}

Latent interpolate(const Latent& a, const Latent& b, double alpha) {
    return {(1 - alpha) * a.z + alpha * b.z, (1 - alpha) * a.f + alpha * b.f};
}

torch::Tensor decode(Models& models, const Latent& code) {
    torch::NoGradGuard ng;
    models.train(false);
    return models.generator->forward(code.z, code.f);
}

io::OcularImage make_morph(Models& models, const io::OcularImage& x1, const io::OcularImage& x2, const LandmarkSet& l1,
                           const LandmarkSet& l2, double alpha, double sigma) {
    if (!(alpha >= 0 && alpha <= 1)) throw Error("alpha must be in [0, 1]");
    const auto a = encode(models, x1, l1, sigma);
    const auto b = encode(models, x2, l2, sigma);
    return tensor_to_image(decode(models, interpolate(a, b, alpha)));
}

}  // namespace ocumorph::train
