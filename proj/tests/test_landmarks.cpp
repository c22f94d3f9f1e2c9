#include "test_prelude.hpp"

#include <cmath>
#include <fstream>

#include <opencv2/imgproc.hpp>

#include "ocumorph/landmark_gen.hpp"
#include "ocumorph/synthetic.hpp"
#include "ocumorph/tensor_image.hpp"
#include "support.hpp"

using namespace ocumorph;
using namespace ocumorph::landmarks;

namespace {

std::vector<LabeledImage> synthetic_set(int n, std::uint64_t seed) {
    std::vector<LabeledImage> out;
    for (int i = 0; i < n; ++i) {
        auto eye = synthetic::render_eye(synthetic::random_eye_params(seed + i));
        out.push_back({io::preprocess(eye.image, false, 0), eye.landmarks});
    }
    return out;
}

LgConfig small_config() {
    LgConfig c;
    c.input_size = 64;
    c.batch_size = 4;
    return c;
}

}  // namespace

TEST_CASE("heatmap peak and Gaussian falloff") {
    std::vector<Point2> pts{{128, 128}};
    auto h = render_heatmaps(pts, 256, 256, 5.0);
    auto m = h.maps[0];
    CHECK(m[128][128].item<double>() == 1.0);
    CHECK(m.max().item<double>() == 1.0);
    // distance exactly sigma along each axis
    const double expected = std::exp(-0.5);
    CHECK(std::abs(m[128][133].item<double>() - expected) < 1e-9);
    CHECK(std::abs(m[123][128].item<double>() - expected) < 1e-9);
    // an oblique point: direct scalar evaluation of the Gaussian
    const double d2 = 3.0 * 3.0 + 4.0 * 4.0;
    CHECK(std::abs(m[131][132].item<double>() - std::exp(-d2 / 50.0)) < 1e-12);
    CHECK_THROWS_AS(render_heatmaps(pts, 8, 8, 0.0), Error);
    CHECK_THROWS_AS(render_heatmaps(pts, 8, 8, -1.0), Error);
}

TEST_CASE("heatmap for an out-of-frame landmark stays below 1") {
    std::vector<Point2> pts{{-4.0, 300.0}};
    auto h = render_heatmaps(pts, 256, 256, 5.0);
    CHECK(h.maps.max().item<double>() < 1.0);
    CHECK(h.maps.min().item<double>() >= 0.0);
    CHECK(torch::isfinite(h.maps).all().item<bool>());
}

TEST_CASE("property: heatmaps are mirror symmetric about the frame center") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Point2 p{testing::uniform(rng, -10, 265), testing::uniform(rng, -10, 265)};
        const Point2 mirrored{255.0 - p.x, p.y};
        const double sigma = testing::uniform(rng, 1, 12);
        auto a = render_heatmaps(std::vector<Point2>{p}, 64, 256, sigma).maps;
        auto b = render_heatmaps(std::vector<Point2>{mirrored}, 64, 256, sigma).maps;
        CHECK(torch::allclose(a, b.flip({2}), 0.0, 1e-12));
        CHECK(a.min().item<double>() >= 0.0);
        CHECK(a.max().item<double>() <= 1.0);
    }
}

TEST_CASE("core heatmaps rescale to the requested size") {
    auto eye = synthetic::eye_landmarks({});
    auto h = core_heatmaps(eye, 64);
    CHECK(h.sizes() == std::vector<int64_t>{19, 64, 64});
    CHECK(h.dtype() == torch::kFloat32);
}

TEST_CASE("predict: shape, finiteness and determinism") {
    LandmarkModel model(small_config(), 1);
    auto data = synthetic_set(2, 10);
    auto a = model.predict(data[0].image);
    auto b = model.predict(data[0].image);
    CHECK(a == b);
    CHECK(a.to_flat().size() == 66);
    CHECK(a.all_finite());
    auto raw = synthetic::render_eye(synthetic::random_eye_params(1)).image;
    CHECK_THROWS_AS(model.predict(raw), Error);
}

TEST_CASE("training with lr = 0 leaves the MSE unchanged") {
    auto data = synthetic_set(4, 20);
    auto cfg = small_config();
    cfg.learning_rate = 0.0;
    auto trained = train_landmark_model(data, cfg, 3, 5);
    REQUIRE(trained.epoch_mse.size() == 4);
    for (double mse : trained.epoch_mse) CHECK(mse == trained.epoch_mse.front());
    CHECK_THROWS_AS(train_landmark_model({}, cfg, 1, 5), Error);
}

TEST_CASE("training is deterministic for a fixed seed") {
    auto data = synthetic_set(4, 30);
    auto a = train_landmark_model(data, small_config(), 3, 9);
    auto b = train_landmark_model(data, small_config(), 3, 9);
    CHECK(a.epoch_mse == b.epoch_mse);
    CHECK(a.epoch_mse.back() <= a.epoch_mse.front());
}

TEST_CASE("checkpoint round-trip and version check") {
    testing::TempDir dir("lg");
    LandmarkModel model(small_config(), 4);
    model.save(dir / "lg.pt");
    auto loaded = LandmarkModel::load(dir / "lg.pt");
    auto data = synthetic_set(1, 40);
    CHECK(loaded.predict(data[0].image) == model.predict(data[0].image));
    CHECK(loaded.parameter_count() == model.parameter_count());

    std::ofstream(dir / "junk.pt") << "not a checkpoint";
    CHECK_THROWS_AS(LandmarkModel::load(dir / "junk.pt"), CheckpointError);
    CHECK_THROWS_AS(LandmarkModel::load(dir / "absent.pt"), CheckpointError);
}

TEST_CASE("translation consistency of an overfit model") {
    // Overfit with shift augmentation, then shift a training image by k px.
    auto data = synthetic_set(8, 50);
    auto cfg = small_config();
    cfg.max_shift = 8;
    auto trained = train_landmark_model(data, cfg, 200, 3);
    auto& model = trained.model;

    for (int k : {-6, 4, 8}) {
    for (const auto& sample : data) {
        LabeledImage moved{{cv::Mat(), sample.image.range, {}}, sample.landmarks};
        cv::Mat m = (cv::Mat_<double>(2, 3) << 1, 0, k, 0, 1, 0);
        cv::warpAffine(sample.image.pixels, moved.image.pixels, m, sample.image.pixels.size(), cv::INTER_NEAREST,
                       cv::BORDER_REPLICATE);
        auto p0 = model.predict(sample.image);
        auto p1 = model.predict(moved.image);
        double mean_dx = 0.0, mean_dy = 0.0;
        for (std::size_t i = 0; i < kNumLandmarks; ++i) {
            mean_dx += (p1[i].x - p0[i].x) / kNumLandmarks;
            mean_dy += (p1[i].y - p0[i].y) / kNumLandmarks;
        }
        CHECK(std::abs(mean_dx - k) < 2.0);
        CHECK(std::abs(mean_dy) < 2.0);
    }
    }
}

TEST_CASE("overfit on one labeled image") {
    auto data = synthetic_set(1, 60);
    auto trained = train_landmark_model(data, small_config(), 200, 2);
    CHECK(trained.epoch_mse.back() < 1.0);
    CHECK(trained.epoch_mse.back() <= trained.epoch_mse.front());
}
