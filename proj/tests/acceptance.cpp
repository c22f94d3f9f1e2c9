// Acceptance run: one PASS/FAIL line per criterion. `acceptance 3 5` runs a subset.

#include <Eigen/Dense>
#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include "ocumorph/classical_morph.hpp"
#include "ocumorph/dyn_weights.hpp"
#include "ocumorph/landmark_gen.hpp"
#include "ocumorph/losses.hpp"
#include "ocumorph/mad.hpp"
#include "ocumorph/metrics.hpp"
#include "ocumorph/networks.hpp"
#include "ocumorph/synthetic.hpp"
#include "ocumorph/tensor_image.hpp"
#include "ocumorph/trainer.hpp"

using namespace ocumorph;
namespace fs = std::filesystem;

namespace {

const auto kDouble = torch::TensorOptions().dtype(torch::kFloat64);

// Collects failed checks; the detail line lists the first few.
class Checks {
public:
    void expect(bool ok, const std::string& what) {
        ++count_;
        if (!ok) failures_.push_back(what);
    }
    bool ok() const { return failures_.empty(); }
    std::string detail() const {
        if (ok()) return std::to_string(count_) + " checks";
        std::string out = std::to_string(failures_.size()) + "/" + std::to_string(count_) + " failed: ";
        for (std::size_t i = 0; i < std::min<std::size_t>(failures_.size(), 3); ++i) out += (i ? "; " : "") + failures_[i];
        return out;
    }
    std::vector<std::string> notes;

private:
    int count_ = 0;
    std::vector<std::string> failures_;
};

std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(6) << v;
    return s.str();
}

// Central differences on a random subset of coordinates versus autograd.
double fd_relative_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x0,
                         int samples = 24, double h = 1e-6) {
    auto x = x0.clone().requires_grad_(true);
    const auto analytic = torch::autograd::grad({f(x)}, {x})[0].flatten();
    std::mt19937_64 rng(23);
    std::uniform_int_distribution<std::int64_t> pick(0, x0.numel() - 1);
    double num = 0, den = 0;
    torch::NoGradGuard ng;
    for (int s = 0; s < samples; ++s) {
        const auto i = pick(rng);
        auto xp = x0.clone(), xm = x0.clone();
        xp.view(-1)[i] += h;
        xm.view(-1)[i] -= h;
        const double fd = (f(xp).item<double>() - f(xm).item<double>()) / (2 * h);
        const double a = analytic[i].item<double>();
        num += (a - fd) * (a - fd);
        den += fd * fd;
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

// ---- 1 ----------------------------------------------------------------------------

void dynamic_weighting(Checks& c) {
    using weights::Vector;
    weights::WeightState s;
    s.epsilon = 0;
    s.rate = 0.05;
    s.weights = {0.5, 0.5, 0, 0, 0, 0};
    const double inactive = 1e300;  // slots outside the pair get no target mass
    const auto next = weights::update(s, {1.0, 4.0, inactive, inactive, inactive, inactive});
    c.expect(std::abs(next.weights[0] - 0.515) <= 1e-12, "w1 = " + fmt(next.weights[0]));
    c.expect(std::abs(next.weights[1] - 0.485) <= 1e-12, "w2 = " + fmt(next.weights[1]));

    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0, 1), rate(1e-3, 1);
    std::uniform_int_distribution<int> decade(-6, 3);
    int off = 0, wrong = 0;
    for (int t = 0; t < 100000; ++t) {
        weights::WeightState w;
        double sum = 0;
        for (auto& x : w.weights) sum += x = -std::log(1 - u(rng));
        for (auto& x : w.weights) x /= sum;
        w.rate = rate(rng);
        w.epsilon = t % 5 == 0 ? 0.0 : 1e-8;
        Vector l;
        for (auto& x : l) x = u(rng) * std::pow(10.0, decade(rng));
        const auto n = weights::update(w, l);
        double total = 0;
        bool nonneg = true;
        for (double x : n.weights) total += x, nonneg = nonneg && x >= 0;
        if (std::abs(total - 1) > 1e-9 || !nonneg) ++off;
        const auto target = weights::compute_targets(l, w.epsilon);
        const auto imax = std::max_element(target.begin(), target.end()) - target.begin();
        if (l[imax] != *std::min_element(l.begin(), l.end())) ++wrong;
    }
    c.expect(off == 0, std::to_string(off) + " updates left the simplex");
    c.expect(wrong == 0, std::to_string(wrong) + " argmax/argmin mismatches");
}

// ---- 2 ----------------------------------------------------------------------------

void gradient_penalty(Checks& c) {
    torch::manual_seed(8);
    const auto reals = torch::rand({3, 3, 8, 8}, kDouble) * 2 - 1;
    const auto fakes = torch::rand({3, 3, 8, 8}, kDouble) * 2 - 1;
    const auto heat = torch::rand({3, 19, 8, 8}, kDouble);
    auto w = torch::randn({3, 8, 8}, kDouble);
    w = w / w.norm();
    auto linear = [&](double scale) -> losses::Critic {
        return [=](const torch::Tensor& x, const torch::Tensor&) {
            return std::vector<torch::Tensor>{(scale * (x * w).sum({1, 2, 3})).reshape({-1, 1, 1, 1})};
        };
    };
    torch::Generator gen = at::detail::createCPUGenerator(1);
    const double p1 = losses::gradient_penalty(linear(1.0), reals, fakes, heat, gen).item<double>();
    const double p2 = losses::gradient_penalty(linear(2.0), reals, fakes, heat, gen).item<double>();
    c.expect(std::abs(p1) <= 1e-9, "unit critic penalty " + fmt(p1));
    c.expect(std::abs(p2 - 1) <= 1e-6, "doubled critic penalty " + fmt(p2));

    // nonlinear two-scale critic: penalty versus a finite-difference gradient norm
    const auto k1 = torch::randn({4, 22, 3, 3}, kDouble) * 0.3;
    const auto k2 = torch::randn({1, 4, 3, 3}, kDouble) * 0.3;
    losses::Critic tiny = [&](const torch::Tensor& x, const torch::Tensor& h) {
        namespace F = torch::nn::functional;
        auto a = torch::tanh(F::conv2d(torch::cat({x, h}, 1), k1, F::Conv2dFuncOptions().padding(1)));
        auto m1 = F::conv2d(a, k2);
        return std::vector<torch::Tensor>{m1, F::avg_pool2d(m1, F::AvgPool2dFuncOptions(2))};
    };
    const auto u = torch::tensor({0.2, 0.5, 0.9}, kDouble);
    const double gp = losses::gradient_penalty(tiny, reals, fakes, heat, u).item<double>();
    double expected = 0;
    for (int b = 0; b < 3; ++b) {
        const auto xhat = (u[b] * reals[b] + (1 - u[b]) * fakes[b]).unsqueeze(0);
        auto value = [&](const torch::Tensor& x) {
            const auto maps = tiny(x, heat[b].unsqueeze(0));
            return maps[0].mean() + maps[1].mean();
        };
        double sq = 0;
        for (int i = 0; i < xhat.numel(); ++i) {
            auto p = xhat.clone(), m = xhat.clone();
            p.view(-1)[i] += 1e-6;
            m.view(-1)[i] -= 1e-6;
            const double d = (value(p).item<double>() - value(m).item<double>()) / 2e-6;
            sq += d * d;
        }
        expected += std::pow(std::sqrt(sq) - 1, 2) / 3;
    }
    const double rel = std::abs(gp - expected) / std::abs(expected);
    c.expect(rel < 1e-3, "finite-difference penalty relative error " + fmt(rel));
    c.notes.push_back("fd rel " + fmt(rel));
}

// ---- 3 ----------------------------------------------------------------------------

void loss_gradients(Checks& c) {
    namespace F = torch::nn::functional;
    torch::manual_seed(31);
    const auto rnd = [] { return torch::rand({2, 3, 8, 8}, kDouble) * 1.8 - 0.9; };
    const auto x = rnd(), y = rnd(), x2 = rnd();
    const auto ck = torch::randn({1, 3, 3, 3}, kDouble);
    const auto critic = [&](const torch::Tensor& t) {
        auto h = torch::tanh(F::conv2d(t, ck));
        return std::vector<torch::Tensor>{h, F::avg_pool2d(h, F::AvgPool2dFuncOptions(2))};
    };
    // window 11 does not fit 8x8; a 3-tap window over two scales does
    losses::MsSsimOptions small;
    small.window = 3;
    small.weights = {0.4, 0.6};
    auto phi = losses::tiny_feature_extractor();
    auto emb = losses::tiny_embedding_model();

    const std::vector<std::pair<std::string, std::function<torch::Tensor(const torch::Tensor&)>>> terms = {
        {"adv", [&](const torch::Tensor& t) { return losses::adv_loss_generator(critic(t)); }},
        {"ms_ssim", [&](const torch::Tensor& t) { return losses::ms_ssim_loss(t, y, small); }},
        {"perceptual", [&](const torch::Tensor& t) { return losses::perceptual_loss(*phi, t, y); }},
        {"reconstruction", [&](const torch::Tensor& t) { return losses::reconstruction_loss(t, y); }},
        {"identity", [&](const torch::Tensor& t) { return losses::identity_loss(*emb, y, x2, t); }},
        {"identity_diff", [&](const torch::Tensor& t) { return losses::identity_diff_loss(*emb, y, x2, t); }},
    };
    std::string worst;
    double worst_err = 0;
    for (const auto& [name, f] : terms) {
        const double e = fd_relative_error(f, x);
        c.expect(e < 1e-3, name + " fd relative error " + fmt(e));
        if (e >= worst_err) worst_err = e, worst = name;
    }
    c.notes.push_back("worst fd " + worst + " " + fmt(worst_err));

    const auto e = torch::tensor({{1.0, 0.0, 0.0}}, kDouble);
    const auto o = torch::tensor({{0.0, 2.0, 0.0}}, kDouble);
    c.expect(std::abs(losses::identity_loss(e, e, e).item<double>() - 0) <= 1e-9, "identity anchor 0");
    c.expect(std::abs(losses::identity_loss(e, e, o).item<double>() - 1) <= 1e-9, "identity anchor 1");
    c.expect(std::abs(losses::identity_loss(e, e, -e).item<double>() - 2) <= 1e-9, "identity anchor 2");
}

// ---- 4 ----------------------------------------------------------------------------

// LAPACK SVD of the smaller Gram matrix (its singular values are sigma^2),
// independent of the layer's power iteration.
double largest_singular_value(const torch::Tensor& w) {
    const auto m = w.detach().to(torch::kFloat64).reshape({w.size(0), -1});
    const auto gram = m.size(0) <= m.size(1) ? torch::mm(m, m.t()) : torch::mm(m.t(), m);
    return std::sqrt(torch::linalg_svdvals(gram)[0].item<double>());
}

void network_shapes(Checks& c) {
    torch::manual_seed(1);
    nets::NetConfig cfg;  // full size: 256 x 256, nz 200
    train::Models m(cfg);
    m.train(false);
    torch::NoGradGuard ng;
    const auto image = torch::rand({1, 3, 256, 256}) * 2 - 1;
    const auto heat = torch::rand({1, 19, 256, 256});
    const auto z = m.encoder(image, heat);
    c.expect(z.sizes() == torch::IntArrayRef({1, 200}), "encoder output shape");
    const auto maps = m.discriminator(image, heat);
    c.expect(maps.size() == 4, "discriminator scale count");
    const int expected[4] = {64, 32, 16, 8};
    for (std::size_t i = 0; i < std::min<std::size_t>(maps.size(), 4); ++i) {
        c.expect(maps[i].sizes() == torch::IntArrayRef({1, 1, expected[i], expected[i]}),
                 "critic map " + std::to_string(i) + " is " + std::to_string(maps[i].size(2)));
    }

    nets::SelfAttention sa(32);
    sa->gamma.fill_(0.0);
    const auto x = torch::randn({2, 32, 8, 8});
    c.expect(torch::equal(sa->forward(x), x), "self-attention at gamma 0 is not the identity");

    double lo = 1e9, hi = 0;
    int layers = 0;
    for (const torch::nn::Module* mod :
         {static_cast<torch::nn::Module*>(m.encoder.get()), static_cast<torch::nn::Module*>(m.generator.get()),
          static_cast<torch::nn::Module*>(m.discriminator.get())}) {
        for (auto& layer : nets::spectral_layers(*mod)) {
            const double s = largest_singular_value(layer->effective_weight());
            lo = std::min(lo, s);
            hi = std::max(hi, s);
            ++layers;
        }
    }
    c.expect(layers > 0, "no spectral-norm layers found");
    c.expect(lo >= 0.95 && hi <= 1.05, "spectral norms in [" + fmt(lo) + ", " + fmt(hi) + "]");
    c.notes.push_back(std::to_string(layers) + " SN layers, sigma in [" + fmt(lo) + ", " + fmt(hi) + "]");
}

// ---- 5 ----------------------------------------------------------------------------

// Mean reconstruction loss of every sample through E, L_e and G in eval mode.
double full_set_reconstruction(train::Models& m, const train::TrainingSet& data) {
    torch::NoGradGuard ng;
    m.train(false);
    std::vector<torch::Tensor> images, heat;
    std::vector<LandmarkSet> lms;
    for (const auto& s : data.samples) {
        images.push_back(s.image);
        heat.push_back(s.heatmaps);
        lms.push_back(s.landmarks);
    }
    const auto x = torch::stack(images), h = torch::stack(heat);
    const auto out = m.generator(m.encoder(x, h), m.landmark_encoder(nets::landmark_input(lms)));
    const double loss = losses::reconstruction_loss(out, x).item<double>();
    m.train(true);
    return loss;
}

void overfit_smoke(Checks& c) {
    nets::NetConfig net;
    net.image_size = 64;
    net.ndf = net.ngf = 8;
    net.nz = net.landmark_dim = 64;
    train::TrainConfig tc;
    tc.batch_size = 4;
    tc.lr_e = tc.lr_g = 5e-4;
    tc.lr_d = 2e-4;
    tc.lr_gamma = 0.99;
    tc.epochs = 100000;
    tc.max_steps = 2000;
    train::TrainingSet data;
    io::DatasetIndex idx;
    for (int i = 0; i < 8; ++i) {
        const auto eye = synthetic::render_eye(synthetic::random_eye_params(100 + i));
        data.samples.push_back(
            train::make_sample(io::preprocess(eye.image, false, 0), eye.landmarks, 64, tc.heatmap_sigma));
        idx.entries.push_back({"eye" + std::to_string(i) + ".png", "s" + std::to_string(i), "a"});
    }
    data.pairs = io::pair_subjects(idx, io::PairPolicy::all_cross, 0, 0);
    train::Trainer trainer(net, tc, data, train::fallback_plugins());
    const double before = full_set_reconstruction(trainer.models(), data);
    int nonfinite = 0, off_simplex = 0;
    std::int64_t steps = 0;
    trainer.run({}, [&](const train::StepRecord& r) {
        steps = r.step;
        for (double l : r.losses) nonfinite += !std::isfinite(l);
        double sum = 0;
        bool nonneg = true;
        for (double w : r.weights) sum += w, nonneg = nonneg && w >= 0;
        off_simplex += std::abs(sum - 1) > 1e-9 || !nonneg;
    });
    const double after = full_set_reconstruction(trainer.models(), data);
    const double drop = 1 - after / before;
    c.expect(steps <= 2000, "ran " + std::to_string(steps) + " steps");
    c.expect(nonfinite == 0, std::to_string(nonfinite) + " non-finite losses");
    c.expect(off_simplex == 0, std::to_string(off_simplex) + " steps off the simplex");
    c.expect(drop >= 0.9, "reconstruction drop " + fmt(100 * drop) + "%");
    c.notes.push_back(std::to_string(steps) + " steps, full-set reconstruction " + fmt(before) + " -> " + fmt(after) +
                      " (drop " + fmt(100 * drop) + "%)");
}

// ---- 6 ----------------------------------------------------------------------------

void landmark_generator(Checks& c) {
    std::vector<landmarks::LabeledImage> data;
    for (int i = 0; i < 16; ++i) {
        const auto eye = synthetic::render_eye(synthetic::random_eye_params(300 + i));
        data.push_back({io::preprocess(eye.image, false, 0), eye.landmarks});
    }
    landmarks::LgConfig cfg;
    cfg.input_size = 64;
    cfg.batch_size = 4;
    auto trained = landmarks::train_landmark_model(data, cfg, 150, 5);
    const double mse = landmarks::landmark_mse(trained.model, data);
    c.expect(mse < 1.0, "training MSE " + fmt(mse) + " px^2");
    c.notes.push_back("MSE " + fmt(mse) + " px^2 on 16 images");

    const std::vector<Point2> pts{{100, 140}};
    const auto maps = landmarks::render_heatmaps(pts, 256, 256, 5.0).maps;
    c.expect(maps[0][140][100].item<double>() == 1.0, "peak value at the landmark");
    c.expect(maps.max().item<double>() == 1.0, "maximum value");
    const double at_sigma = maps[0][140][105].item<double>();
    c.expect(std::abs(at_sigma - std::exp(-0.5)) <= 1e-9, "value at d = sigma " + fmt(at_sigma));
}

// ---- 7 ----------------------------------------------------------------------------

double max_abs_diff(const cv::Mat& a, const cv::Mat& b) {
    cv::Mat d;
    cv::absdiff(a, b, d);
    double mx = 0;
    cv::minMaxLoc(d.reshape(1), nullptr, &mx);
    return mx;
}

void classical_morph(Checks& c) {
    const auto ea = synthetic::render_eye(synthetic::random_eye_params(41));
    const auto eb = synthetic::render_eye(synthetic::random_eye_params(42));
    const auto a = io::preprocess(ea.image, false, 0), b = io::preprocess(eb.image, false, 0);
    const auto& la = ea.landmarks;
    const auto& lb = eb.landmarks;
    morph::MorphOptions o;
    o.alpha = 0.0;
    c.expect(max_abs_diff(morph::morph(a, b, la, lb, o).image.pixels, a.pixels) == 0, "alpha 0 != source");
    o.alpha = 1.0;
    c.expect(max_abs_diff(morph::morph(a, b, la, lb, o).image.pixels, b.pixels) == 0, "alpha 1 != target");
    for (double alpha : {0.25, 0.5, 0.8}) {
        o.alpha = alpha;
        c.expect(max_abs_diff(morph::morph(a, a, la, la, o).image.pixels, a.pixels) == 0, "self-morph");
        const auto ab = morph::morph(a, b, la, lb, o);
        o.alpha = 1 - alpha;
        const auto ba = morph::morph(b, a, lb, la, o);
        c.expect(max_abs_diff(ab.image.pixels, ba.image.pixels) == 0, "swap symmetry at " + fmt(alpha));
    }

    // 8x8 masked region in a 10x10 frame against a dense solve of the Poisson system
    const int n = 10;
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 255);
    cv::Mat3d patch(n, n), target(n, n);
    for (auto& p : patch) p = {u(rng), u(rng), u(rng)};
    for (auto& p : target) p = {u(rng), u(rng), u(rng)};
    cv::Mat1b mask = cv::Mat1b::zeros(n, n);
    mask(cv::Rect(1, 1, 8, 8)).setTo(255);
    const cv::Mat out = morph::seamless_clone(patch, target, mask);
    std::vector<cv::Point> cells;
    cv::Mat1i id(n, n, -1);
    for (int yy = 0; yy < n; ++yy)
        for (int xx = 0; xx < n; ++xx)
            if (mask(yy, xx)) id(yy, xx) = static_cast<int>(cells.size()), cells.emplace_back(xx, yy);
    const int m = static_cast<int>(cells.size());
    const cv::Point nb[4] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    double worst = 0;
    for (int ch = 0; ch < 3; ++ch) {
        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m, m);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m);
        for (int i = 0; i < m; ++i) {
            for (const auto& d : nb) {
                const cv::Point q = cells[i] + d;
                A(i, i) += 1;
                rhs(i) += patch(cells[i])[ch] - patch(q)[ch];
                if (id(q) >= 0) A(i, id(q)) -= 1;
                else rhs(i) += target(q)[ch];
            }
        }
        const Eigen::VectorXd f = A.fullPivLu().solve(rhs);
        for (int i = 0; i < m; ++i) worst = std::max(worst, std::abs(out.at<cv::Vec3d>(cells[i])[ch] - f(i)));
    }
    c.expect(worst <= 1e-5, "Poisson clone deviates by " + fmt(worst));
    c.notes.push_back("clone max deviation " + fmt(worst));
}

// ---- 8 ----------------------------------------------------------------------------

void metric_oracles(Checks& c) {
    std::mt19937_64 rng(808);
    std::uniform_int_distribution<int> n_morphs(1, 6), n_probes(1, 4), level(0, 10);
    int mm_bad = 0, fm_bad = 0, order_bad = 0;
    for (int set = 0; set < 10000; ++set) {
        std::vector<metrics::MorphScores> s(n_morphs(rng));
        std::vector<double> values;
        for (std::size_t k = 0; k < s.size(); ++k) {
            s[k].morph_id = "m" + std::to_string(k);
            s[k].subject_a = "a";
            s[k].subject_b = "b";
            const int na = n_probes(rng), nb = n_probes(rng);
            for (int i = 0; i < na; ++i) s[k].a.push_back(level(rng) / 10.0), values.push_back(s[k].a.back());
            for (int i = 0; i < nb; ++i) s[k].b.push_back(level(rng) / 10.0), values.push_back(s[k].b.back());
        }
        const double t = values[std::uniform_int_distribution<std::size_t>(0, values.size() - 1)(rng)];
        int mm = 0, fm = 0;
        for (const auto& x : s) {
            bool a_hit = false, b_hit = false;
            for (double v : x.a) a_hit |= v >= t;
            for (double v : x.b) b_hit |= v >= t;
            mm += a_hit && b_hit;
            bool all = true;
            for (std::size_t k = 0; k < std::min(x.a.size(), x.b.size()); ++k) all &= x.a[k] >= t && x.b[k] >= t;
            fm += all;
        }
        const double n = static_cast<double>(s.size());
        const double got_mm = metrics::mmpmr(s, t), got_fm = metrics::fmmpmr(s, t);
        mm_bad += got_mm != mm / n;
        fm_bad += got_fm != fm / n;
        order_bad += got_fm > got_mm;
    }
    c.expect(mm_bad == 0, std::to_string(mm_bad) + " MMPMR mismatches");
    c.expect(fm_bad == 0, std::to_string(fm_bad) + " FMMPMR mismatches");
    c.expect(order_bad == 0, std::to_string(order_bad) + " sets with FMMPMR > MMPMR");

    std::normal_distribution<double> g(0.3, 0.1);
    std::vector<double> pool(1000);
    for (auto& v : pool) v = g(rng);
    for (int k : {1, 10, 100}) {
        const double fmr = k / 1000.0;
        const double t = metrics::threshold_at_fmr(pool, fmr);
        c.expect(metrics::false_match_rate(pool, t) == fmr, "achieved FMR at " + fmt(fmr));
    }

    std::vector<Point2> pts;
    const double cx = 50, cy = 60, ea = 30, eb = 20, th = 0.3;
    for (int i = 0; i < 100; ++i) {
        const double phi = 2 * M_PI * i / 100;
        const double px = ea * std::cos(phi), py = eb * std::sin(phi);
        pts.push_back({cx + px * std::cos(th) - py * std::sin(th), cy + px * std::sin(th) + py * std::cos(th)});
    }
    const auto e = metrics::fit_ellipse(pts);
    const double err = std::max({std::abs(e.cx - cx), std::abs(e.cy - cy), std::abs(e.a - ea), std::abs(e.b - eb),
                                 std::abs(e.theta - th)});
    c.expect(err <= 1e-6, "ellipse parameter error " + fmt(err));

    cv::Mat1b mask = cv::Mat1b::zeros(256, 256);
    cv::ellipse(mask, {128, 120}, {60, 40}, 25, 0, 360, 255, cv::FILLED);
    const double ir = metrics::iris_irregularity(mask).ir;
    c.expect(ir >= 0.99, "IR of a rasterized ellipse " + fmt(ir));

    const double mid = metrics::gaze_consistency(Point2{5, 0}, Point2{0, 0}, Point2{10, 0});
    const double off = metrics::gaze_consistency(Point2{5, 5}, Point2{0, 0}, Point2{10, 0});
    c.expect(mid == 1.0, "gaze midpoint " + fmt(mid));
    // 1 - 5 / (5 + 1) = 1/6, printed as 0.1667
    c.expect(std::abs(off - 1.0 / 6) <= 1e-6, "gaze offset case " + fmt(off));
    c.notes.push_back("ellipse err " + fmt(err) + ", IR " + fmt(ir) + ", gaze offset " + fmt(off));
}

// ---- 9 ----------------------------------------------------------------------------

void mad_detectors(Checks& c) {
    // descriptor invariants
    std::mt19937_64 rng(909);
    std::uniform_real_distribution<double> u(0, 1);
    cv::Mat1d noise(48, 48);
    for (auto& v : noise) v = u(rng);
    const cv::Mat1d flat(48, 48, 0.4);
    for (auto d : {mad::Descriptor::lpq, mad::Descriptor::bsif}) {
        const auto h = mad::describe(d, noise);
        double sum = 0;
        bool nonneg = true;
        for (double v : h) sum += v, nonneg = nonneg && v >= 0;
        c.expect(std::abs(sum - 1) <= 1e-12 && nonneg, mad::to_string(d) + " histogram not normalized");
        const auto hf = mad::describe(d, flat);
        c.expect(std::count_if(hf.begin(), hf.end(), [](double v) { return v > 0; }) == 1,
                 mad::to_string(d) + " flat image spans several codes");
    }
    const auto hog_flat = mad::hog_features(flat);
    c.expect(std::all_of(hog_flat.begin(), hog_flat.end(), [](double v) { return v == 0; }), "HOG of a flat image");
    const auto hog = mad::hog_features(noise);
    const mad::HogOptions ho;
    const std::size_t block_len = static_cast<std::size_t>(ho.block * ho.block * ho.bins);
    bool unit = hog.size() == mad::hog_length(48, 48) && hog.size() % block_len == 0;
    for (std::size_t i = 0; unit && i < hog.size(); i += block_len) {
        double sq = 0;
        for (std::size_t j = 0; j < block_len; ++j) sq += hog[i + j] * hog[i + j];
        unit = sq <= 1 + 1e-12;
    }
    c.expect(unit, "HOG block norms");

    // separable corpus: sharp noisy captures vs blurred morphs, 100 + 100, half for training
    std::vector<io::OcularImage> sharp;
    std::vector<LandmarkSet> lms;
    std::normal_distribution<float> grain(0, 10);
    for (int i = 0; i < 100; ++i) {
        auto eye = synthetic::render_eye(synthetic::random_eye_params(1000 + i));
        for (auto& p : cv::Mat3f(eye.image.pixels)) p += cv::Vec3f(grain(rng), grain(rng), grain(rng));
        sharp.push_back(eye.image);
        lms.push_back(eye.landmarks);
    }
    std::vector<io::OcularImage> morphs;
    for (int i = 0; i < 100; ++i) {
        const int j = (i + 1 + i / 10) % 100;
        auto m = morph::morph(sharp[i], sharp[j], lms[i], lms[j]).image;
        cv::GaussianBlur(m.pixels, m.pixels, {0, 0}, 1.2);
        morphs.push_back(m);
    }
    const auto gray = [](const io::OcularImage& im) {
        cv::Mat1d g;
        cv::resize(mad::to_gray(im), g, {64, 64}, 0, 0, cv::INTER_AREA);
        return g;
    };
    std::vector<std::string> eers;
    for (auto d : {mad::Descriptor::lpq, mad::Descriptor::bsif, mad::Descriptor::hog}) {
        std::vector<std::vector<double>> train_x, test_x;
        std::vector<mad::Label> train_y, test_y;
        for (int i = 0; i < 100; ++i) {
            auto& xs = i % 2 ? test_x : train_x;
            auto& ys = i % 2 ? test_y : train_y;
            xs.push_back(mad::describe(d, gray(sharp[i])));
            ys.push_back(mad::Label::bonafide);
            xs.push_back(mad::describe(d, gray(morphs[i])));
            ys.push_back(mad::Label::morph);
        }
        for (auto kind : {mad::DetectorKind::linear_margin, mad::DetectorKind::tree_ensemble}) {
            mad::DetectorOptions opts;
            opts.seed = 3;
            const auto det = mad::train_detector(train_x, train_y, kind, opts);
            mad::MadScoreSet scores;
            for (std::size_t i = 0; i < test_x.size(); ++i) scores.records.push_back({"", test_y[i], det->score(test_x[i])});
            const double eer = mad::d_eer(scores);
            const auto name = mad::to_string(d) + "+" + mad::to_string(kind);
            c.expect(eer < 0.10, name + " D-EER " + fmt(eer));
            eers.push_back(name + " " + fmt(100 * eer) + "%");
        }
    }

    // error rates against an exhaustive sweep
    int bad = 0;
    for (int set = 0; set < 2000; ++set) {
        mad::MadScoreSet s;
        std::uniform_int_distribution<int> n(1, 12), lv(0, 8);
        for (auto label : {mad::Label::bonafide, mad::Label::morph}) {
            const int k = n(rng);
            for (int i = 0; i < k; ++i) s.records.push_back({"", label, lv(rng) / 8.0});
        }
        std::set<double> cand;
        for (const auto& r : s.records) cand.insert(r.score);
        cand.insert(std::nextafter(*cand.rbegin(), INFINITY));
        std::vector<std::pair<double, double>> curve;  // (apcer, bpcer) per threshold, ascending
        for (double t : cand) {
            double nb = 0, nm = 0, fb = 0, fm = 0;
            for (const auto& r : s.records) {
                if (r.label == mad::Label::bonafide) ++nb, fb += r.score >= t;
                else ++nm, fm += r.score < t;
            }
            const auto rates = mad::apcer_bpcer(s, t);
            bad += rates.apcer != fm / nm || rates.bpcer != fb / nb;
            curve.emplace_back(fm / nm, fb / nb);
        }
        // D-EER: linear interpolation across the first sign change of apcer - bpcer
        double eer = std::nan("");
        for (std::size_t i = 0; i < curve.size(); ++i) {
            const double di = curve[i].first - curve[i].second;
            if (di == 0) {
                eer = curve[i].first;
                break;
            }
            if (i + 1 < curve.size()) {
                const double dj = curve[i + 1].first - curve[i + 1].second;
                if (di < 0 && dj > 0) {
                    const double w = -di / (dj - di);
                    eer = curve[i].first + w * (curve[i + 1].first - curve[i].first);
                    break;
                }
            }
        }
        bad += mad::d_eer(s) != eer;
        double best = 2;
        for (const auto& [ap, bp] : curve)
            if (ap <= 0.05) best = std::min(best, bp);
        bad += mad::bpcer_at_apcer(s, 0.05).rates.bpcer != best;
    }
    c.expect(bad == 0, std::to_string(bad) + " error-rate mismatches against the sweep");
    std::string joined;
    for (const auto& e : eers) joined += (joined.empty() ? "" : ", ") + e;
    c.notes.push_back("D-EER " + joined);
}

// ---- 10 ---------------------------------------------------------------------------

int sh(const std::string& cmd) {
    const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

bool json_file(const fs::path& p) {
    std::ifstream f(p);
    if (!f) return false;
    try {
        nlohmann::json j;
        f >> j;
        return j.is_object() && j.value("status", "") == "ok";
    } catch (const std::exception&) {
        return false;
    }
}

void end_to_end_cli(Checks& c) {
    const fs::path dir = fs::temp_directory_path() / ("ocumorph_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    const std::string bin = OCUMORPH_CLI;
    const auto run = [&](const std::string& step, const std::string& args, const std::vector<std::string>& reports) {
        const auto out = dir / step;
        const int rc = sh(bin + " --out " + out.string() + " " + args);
        c.expect(rc == 0, step + " exited with " + std::to_string(rc));
        for (const auto& r : reports) c.expect(json_file(out / r), step + ": " + r + " missing or not ok");
    };
    const auto fx = dir / "fixture";
    const std::string data = "--data " + fx.string() + " --manifest " + (fx / "manifest.tsv").string();
    run("fixture", "--seed 1 fixture --count 6 --subjects 3", {"summary.json"});
    run("landmarks_train", "landmarks train " + data + " --landmarks " + (fx / "landmarks").string() + " --epochs 5",
        {"summary.json"});
    run("landmarks_predict",
        "landmarks predict --model " + (dir / "landmarks_train/landmark_model.pt").string() + " --in " +
            (fx / "images").string(),
        {"summary.json"});
    run("morph", "morph classical " + data + " --landmarks " + (dir / "landmarks_predict").string() + " --masks " +
                     (fx / "masks").string(),
        {"summary.json"});
    run("train_gan_dry", "train gan " + data + " --landmarks " + (fx / "landmarks").string() + " --dry-run",
        {"summary.json"});
    run("eval_vulnerability",
        "eval vulnerability --impostor " + (fx / "scores/impostor.csv").string() + " --morph-scores " +
            (fx / "scores/morph_scores.csv").string(),
        {"summary.json", "vulnerability.json"});
    run("eval_quality", "eval quality --morphs " + (dir / "morph/manifest.csv").string(),
        {"summary.json", "quality.json"});
    run("train_mad",
        "train mad --bonafide " + (fx / "images").string() + " --morph " + (dir / "morph/morphs").string() +
            " --image-size 64",
        {"summary.json"});
    run("eval_mad",
        "eval mad --model " + (dir / "train_mad/mad_model.json").string() + " --bonafide " + (fx / "images").string() +
            " --morph " + (dir / "morph/morphs").string(),
        {"summary.json", "mad.json"});
    fs::remove_all(dir);
}

struct Criterion {
    int id;
    const char* name;
    double limit_s;  // 0 = no runtime bound
    void (*run)(Checks&);
};

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    const Criterion all[] = {
        {1, "dynamic weighting", 5, dynamic_weighting},
        {2, "gradient penalty", 30, gradient_penalty},
        {3, "loss gradients", 0, loss_gradients},
        {4, "network shapes", 60, network_shapes},
        {5, "overfit smoke test", 1200, overfit_smoke},
        {6, "landmark generator", 0, landmark_generator},
        {7, "classical morph", 60, classical_morph},
        {8, "metrics", 0, metric_oracles},
        {9, "morph attack detection", 300, mad_detectors},
        {10, "end-to-end CLI", 120, end_to_end_cli},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& cr : all) {
        if (!only.empty() && !only.count(cr.id)) continue;
        Checks checks;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            cr.run(checks);
        } catch (const std::exception& e) {
            checks.expect(false, std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (cr.limit_s > 0) checks.expect(secs < cr.limit_s, "runtime " + fmt(secs) + " s over " + fmt(cr.limit_s) + " s");
        failed += !checks.ok();
        std::string notes;
        for (const auto& n : checks.notes) notes += "; " + n;
        std::cout << (checks.ok() ? "PASS" : "FAIL") << "  " << std::setw(2) << cr.id << ". " << cr.name << " ("
                  << checks.detail() << notes << ", " << std::fixed << std::setprecision(1) << secs << " s)"
                  << std::defaultfloat << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
