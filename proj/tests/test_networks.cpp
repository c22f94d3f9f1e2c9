#include "test_prelude.hpp"

#include <Eigen/Dense>

#include "ocumorph/common.hpp"
#include "ocumorph/networks.hpp"
#include "ocumorph/synthetic.hpp"

using namespace ocumorph;
using namespace ocumorph::nets;

namespace {

NetConfig small_config(int size = 32) {
    NetConfig c;
    c.ndf = 8;
    c.ngf = 8;
    c.nz = 16;
    c.landmark_dim = 16;
    c.image_size = size;
    return c;
}

torch::Tensor random_images(int b, const NetConfig& c, std::uint64_t seed) {
    torch::manual_seed(seed);
    return torch::rand({b, c.nc, c.image_size, c.image_size}) * 2 - 1;
}

torch::Tensor random_heatmaps(int b, const NetConfig& c) {
    return torch::rand({b, c.n_heatmaps, c.image_size, c.image_size});
}

// Largest singular value through the eigenvalues of the smaller Gram matrix.
double spectral_norm_oracle(const torch::Tensor& weight) {
    const auto w2 = weight.detach().to(torch::kFloat64).reshape({weight.size(0), -1}).contiguous();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w(
        w2.data_ptr<double>(), w2.size(0), w2.size(1));
    if (w.rows() * w.cols() <= 4096) {
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
        return svd.singularValues()(0);
    }
    const Eigen::MatrixXd gram = w.rows() <= w.cols() ? Eigen::MatrixXd(w * w.transpose())
                                                      : Eigen::MatrixXd(w.transpose() * w);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram, Eigen::EigenvaluesOnly);
    return std::sqrt(es.eigenvalues().maxCoeff());
}

// Independent parameter tally for the documented layouts.
std::int64_t sn_conv(std::int64_t in, std::int64_t out, std::int64_t k) { return out * in * k * k + out; }
std::int64_t inorm(std::int64_t c) { return 2 * c; }
std::int64_t residual(std::int64_t c, bool in) { return 2 * sn_conv(c, c, 3) + (in ? 2 * inorm(c) : 0); }
std::int64_t attention(std::int64_t c) {
    const std::int64_t i = std::max<std::int64_t>(c / 8, 1);
    return 2 * (c * i + i) + c * c + c + 1;
}

std::int64_t expected_counts(const NetConfig& c, std::int64_t& le, std::int64_t& e, std::int64_t& g, std::int64_t& d) {
    const std::int64_t s = c.stages();
    le = (66 * 256 + 256) + (256 * 256 + 256) + (256 * c.landmark_dim + c.landmark_dim);

    e = sn_conv(c.nc + c.n_heatmaps, c.ndf, 4) + inorm(c.ndf);
    std::int64_t ch = c.ndf;
    for (std::int64_t i = 1; i < s; ++i) {
        const std::int64_t mult = std::min<std::int64_t>(std::int64_t{1} << (i + 1), 16);
        const std::int64_t out = c.ndf * mult;
        e += sn_conv(ch, out, 4) + inorm(out);
        ch = out;
        if (i == 2) e += residual(ch, true) + attention(ch);
    }
    e += ch * c.nz + c.nz;

    auto gwidth = [&](std::int64_t j) { return c.ngf * std::min<std::int64_t>(std::int64_t{1} << j, 16); };
    ch = gwidth(s - 1);
    g = sn_conv(c.nz + c.landmark_dim, ch, 4) + inorm(ch) + residual(ch, true);
    for (std::int64_t i = 1; i < s; ++i) {
        const std::int64_t out = gwidth(s - 1 - i);
        g += sn_conv(ch, out, 4) + inorm(out);
        ch = out;
        if (i == 1) g += attention(ch);
    }
    g += sn_conv(ch, c.nc, 4);

    d = sn_conv(c.nc + c.n_heatmaps, c.ndf, 4);
    ch = c.ndf;
    const std::int64_t widths[4] = {c.ndf * 2, c.ndf * 4, c.ndf * 8, c.ndf * 8};
    for (int i = 0; i < 4; ++i) {
        d += sn_conv(ch, widths[i], 4) + sn_conv(widths[i], 1, 3);
        if (i == 0) d += residual(widths[i], false);
        if (i == 1) d += attention(widths[i]);
        ch = widths[i];
    }
    return le + e + g + d;
}

}  // namespace

TEST_CASE("config validation") {
    NetConfig c;
    CHECK(c.stages() == 6);
    c.validate();
    for (int bad : {0, 16, 48, 100, 2048}) {
        c.image_size = bad;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
    c = NetConfig{};
    c.nz = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("full-size shapes") {
    torch::NoGradGuard ng;
    torch::manual_seed(1);
    const NetConfig c;
    ImageEncoder enc(c);
    Generator gen(c);
    Discriminator disc(c);
    LandmarkEncoder le(c);
    enc->eval();
    gen->eval();
    disc->eval();
    le->eval();

    const auto x = random_images(1, c, 2);
    const auto h = random_heatmaps(1, c);
    const auto z = enc->forward(x, h);
    CHECK(z.sizes() == torch::IntArrayRef({1, 200}));
    CHECK(torch::isfinite(z).all().item<bool>());

    const auto f = le->forward(landmark_input(synthetic::eye_landmarks({})));
    CHECK(f.sizes() == torch::IntArrayRef({1, 128}));

    const auto y = gen->forward(z, f);
    CHECK(y.sizes() == torch::IntArrayRef({1, 3, 256, 256}));
    CHECK(y.abs().max().item<float>() <= 1.0f);

    const auto maps = disc->forward(x, h);
    REQUIRE(maps.size() == 4);
    const int sizes[4] = {64, 32, 16, 8};
    for (int i = 0; i < 4; ++i) CHECK(maps[i].sizes() == torch::IntArrayRef({1, 1, sizes[i], sizes[i]}));

    SUBCASE("parameter counts") {
        std::int64_t le_n, e_n, g_n, d_n;
        const auto total = expected_counts(c, le_n, e_n, g_n, d_n);
        CHECK(parameter_count(*le) == le_n);
        CHECK(parameter_count(*enc) == e_n);
        CHECK(parameter_count(*gen) == g_n);
        CHECK(parameter_count(*disc) == d_n);
        // pinned regression value for the default configuration
        CHECK(total == 110565202);
    }

    SUBCASE("spectral norm of every normalized layer") {
        for (const torch::nn::Module* m : {static_cast<torch::nn::Module*>(enc.get()),
                                           static_cast<torch::nn::Module*>(gen.get()),
                                           static_cast<torch::nn::Module*>(disc.get())}) {
            for (auto& layer : spectral_layers(*m)) {
                const double sigma = spectral_norm_oracle(layer->effective_weight());
                CHECK(sigma >= 0.95);
                CHECK(sigma <= 1.05);
            }
        }
    }
}

TEST_CASE("spectral norm layer") {
    torch::manual_seed(3);
    SpectralNormConv sn(6, 5, 3, 1, 1, true, 30);
    {
        torch::NoGradGuard ng;
        sn->weight_orig.mul_(40.0);  // scale must not matter
    }
    sn->power_iterate(30);
    CHECK(spectral_norm_oracle(sn->effective_weight()) == doctest::Approx(1.0).epsilon(0.05));

    SUBCASE("training forward advances the vectors, eval does not") {
        const auto x = torch::randn({1, 6, 5, 5});
        const auto u0 = sn->u.clone();
        sn->eval();
        sn->forward(x);
        CHECK(torch::equal(u0, sn->u));
        sn->train();
        sn->weight_orig.data().add_(torch::randn_like(sn->weight_orig));
        sn->forward(x);
        CHECK_FALSE(torch::equal(u0, sn->u));
    }
    SUBCASE("gradient flows to the raw weight") {
        const auto x = torch::randn({2, 6, 5, 5});
        sn->forward(x).sum().backward();
        REQUIRE(sn->weight_orig.grad().defined());
        CHECK(sn->weight_orig.grad().abs().sum().item<double>() > 0);
    }
}

TEST_CASE("self-attention") {
    torch::NoGradGuard ng;
    torch::manual_seed(5);
    SelfAttention sa(16);
    const auto x = torch::randn({2, 16, 6, 5});

    SUBCASE("identity at initialization") { CHECK(torch::equal(sa->forward(x), x)); }

    SUBCASE("rows are distributions") {
        const auto a = sa->attention(x);
        CHECK(a.sizes() == torch::IntArrayRef({2, 30, 30}));
        CHECK((a.sum(-1) - 1).abs().max().item<double>() < 1e-6);
        CHECK(a.min().item<double>() >= 0);
    }

    SUBCASE("uniform map stays uniform") {
        sa->gamma.fill_(0.7);
        const auto u = torch::randn({1, 16, 1, 1}).expand({1, 16, 6, 5}).contiguous();
        const auto y = sa->forward(u);
        const auto spread = y.amax({2, 3}) - y.amin({2, 3});
        CHECK(spread.max().item<double>() < 1e-5);
    }

    SUBCASE("single channel uses one inner channel") {
        SelfAttention one(1);
        CHECK(one->query->weight.size(0) == 1);
    }
}

TEST_CASE("encoder projection identity") {
    torch::NoGradGuard ng;
    const auto c = small_config();
    ImageEncoder enc(c);
    enc->eval();
    enc->project->weight.zero_();
    const auto z = enc->forward(random_images(3, c, 9), random_heatmaps(3, c));
    for (int b = 0; b < 3; ++b) CHECK(torch::equal(z[b], enc->project->bias));
}

TEST_CASE("landmark encoder") {
    torch::NoGradGuard ng;
    const auto c = small_config();
    LandmarkEncoder le(c);
    le->eval();
    const auto l = landmark_input(synthetic::eye_landmarks({}));
    CHECK(l.max().item<double>() <= 1.0);
    CHECK(torch::equal(le->forward(l), le->forward(l)));
    CHECK(torch::isfinite(le->forward(torch::zeros({1, 66}))).all().item<bool>());
    CHECK_THROWS_AS(le->forward(torch::zeros({1, 38})), Error);
}

TEST_CASE("input validation") {
    torch::NoGradGuard ng;
    const auto c = small_config();
    ImageEncoder enc(c);
    Discriminator disc(c);
    Generator gen(c);
    const auto x = random_images(1, c, 4);
    const auto wrong = torch::rand({1, 18, c.image_size, c.image_size});
    CHECK_THROWS_AS(enc->forward(x, wrong), Error);
    CHECK_THROWS_AS(disc->forward(x, wrong), Error);
    CHECK_THROWS_AS(enc->forward(torch::rand({1, 3, 64, 64}), random_heatmaps(1, c)), Error);
    CHECK_THROWS_AS(gen->forward(torch::zeros({1, c.nz + 1}), torch::zeros({1, c.landmark_dim})), Error);
    CHECK_THROWS_AS(gen->forward(torch::zeros({1, c.nz}), torch::zeros({2, c.landmark_dim})), Error);
}

TEST_CASE("generator determinism and landmark sensitivity") {
    torch::NoGradGuard ng;
    const auto c = small_config(64);
    torch::manual_seed(12);
    Generator gen(c);
    gen->eval();
    const auto z = torch::randn({2, c.nz});
    const auto f = torch::randn({2, c.landmark_dim});
    const auto a = gen->forward(z, f);
    CHECK(torch::equal(a, gen->forward(z, f)));
    const auto b = gen->forward(z, f + 0.5 * torch::randn_like(f));
    CHECK((a - b).square().sum().item<double>() > 0);
}

TEST_CASE("discriminator locality on random weights") {
    torch::NoGradGuard ng;
    const NetConfig c;
    torch::manual_seed(21);
    Discriminator disc(c);
    disc->eval();
    auto x = random_images(1, c, 22);
    const auto h = random_heatmaps(1, c);
    auto y = x.clone();
    y.index_put_({0, torch::indexing::Slice(), torch::indexing::Slice(0, 4), torch::indexing::Slice(0, 4)},
                 torch::rand({3, 4, 4}) * 2 - 1);
    const auto a = disc->forward(x, h)[3][0][0];
    const auto b = disc->forward(y, h)[3][0][0];
    const auto diff = (a - b).abs();
    CHECK(diff[0][0].item<double>() > 0);  // the probe reaches its own cell
    // receptive field of the 8x8 head spans at most three cells from the corner
    for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 8; ++j) {
            if (i > 2 || j > 2) CHECK(diff[i][j].item<double>() <= 1e-6);
        }
    }
}

TEST_CASE("finite at initialization across seeds") {
    const auto c = small_config();
    int failures = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        torch::manual_seed(seed);
        LandmarkEncoder le(c);
        ImageEncoder enc(c);
        Generator gen(c);
        Discriminator disc(c);
        torch::NoGradGuard ng;
        const auto x = torch::rand({2, c.nc, c.image_size, c.image_size}) * 2 - 1;
        const auto h = torch::rand({2, c.n_heatmaps, c.image_size, c.image_size});
        const auto coords = torch::rand({2, 66});
        const auto z = enc->forward(x, h);
        const auto f = le->forward(coords);
        const auto y = gen->forward(z, f);
        bool ok = torch::isfinite(z).all().item<bool>() && torch::isfinite(f).all().item<bool>() &&
                  torch::isfinite(y).all().item<bool>();
        for (const auto& m : disc->forward(y, h)) ok = ok && torch::isfinite(m).all().item<bool>();
        if (!ok) ++failures;
    }
    CHECK(failures == 0);
}

TEST_CASE("parameter counts of a small config") {
    const auto c = small_config(64);
    std::int64_t le, e, g, d;
    expected_counts(c, le, e, g, d);
    CHECK(parameter_count(*LandmarkEncoder(c)) == le);
    CHECK(parameter_count(*ImageEncoder(c)) == e);
    CHECK(parameter_count(*Generator(c)) == g);
    CHECK(parameter_count(*Discriminator(c)) == d);
    // stable across constructions
    CHECK(parameter_count(*Generator(c)) == parameter_count(*Generator(c)));
}
