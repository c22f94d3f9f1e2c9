#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <random>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "../src/csv.hpp"
#include "ocumorph/classical_morph.hpp"
#include "ocumorph/data_io.hpp"
#include "ocumorph/landmark_gen.hpp"
#include "ocumorph/mad.hpp"
#include "ocumorph/metrics.hpp"
#include "ocumorph/synthetic.hpp"
#include "ocumorph/tensor_image.hpp"
#include "ocumorph/trainer.hpp"

namespace ocumorph::cli {

using json = nlohmann::json;

namespace {

// Output directory, config snapshot, warnings and the summary report of one command.
class Run {
public:
    Run(const Common& c, std::string command) : common_(c), command_(std::move(command)) {
        fs::create_directories(c.out);
        std::ofstream cfg(c.out / "resolved_config.ini");
        cfg << c.snapshot;
        if (!cfg) throw Error("cannot write " + (c.out / "resolved_config.ini").string());
        report_["command"] = command_;
        report_["seed"] = c.seed;
    }

    json& report() { return report_; }
    fs::path out(const fs::path& name) const { return common_.out / name; }

    void warn(const std::string& message) {
        std::cerr << "warning: " << message << '\n';
        warnings_.push_back(message);
    }
    void warn_all(const Warnings& w, const std::string& context) {
        for (const auto& m : w) warn(context + ": " + m);
    }

    void finish(const std::string& report_name = {}) {
        report_["status"] = "ok";
        report_["warning_count"] = warnings_.size();
        report_["warnings"] = warnings_;
        if (!report_name.empty()) write_json(out(report_name), report_);
        write_json(out("summary.json"), report_);
        std::cerr << command_ << ": done, " << warnings_.size() << " warning(s), outputs in " << common_.out << '\n';
    }

    static void write_json(const fs::path& path, const json& j) {
        std::ofstream f(path);
        f << std::setw(2) << j << '\n';
        if (!f) throw Error("cannot write " + path.string());
    }

private:
    const Common& common_;
    std::string command_;
    json report_;
    Warnings warnings_;
};

bool is_image(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

std::vector<fs::path> list_images(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && is_image(e.path())) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

// 256-frame points of a preprocessed image back to the source image frame.
LandmarkSet to_source_frame(const LandmarkSet& l, int height, int width) {
    const int side = std::min(height, width);
    const double x0 = (width - side) / 2, y0 = (height - side) / 2;
    const double scale = static_cast<double>(kFrameSize) / side;
    LandmarkSet out;
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        const Point2& p = l[i];
        out[i] = side == kFrameSize ? Point2{p.x + x0, p.y + y0}
                                    : Point2{(p.x + 0.5) / scale - 0.5 + x0, (p.y + 0.5) / scale - 0.5 + y0};
    }
    return out;
}

// Pixels above mid-gray in the first channel of a morphed mask image.
cv::Mat1b mask_from(const io::OcularImage& image) {
    std::vector<cv::Mat> ch;
    cv::split(image.pixels, ch);
    const double mid = image.range == io::ValueRange::raw_0_255 ? 127.5 : 0.0;
    cv::Mat1b out = ch[0] > mid;
    return out;
}

// Binary mask through the same crop and resize as the images.
cv::Mat1b preprocess_mask(const cv::Mat1b& mask) {
    cv::Mat rgb;
    cv::Mat f;
    mask.convertTo(f, CV_32F);
    cv::merge(std::vector<cv::Mat>{f, f, f}, rgb);
    const auto p = io::preprocess(io::from_mat(rgb, io::ValueRange::raw_0_255), false, 0);
    return mask_from(p);
}

cv::Mat1b read_mask(const fs::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw LoadError("cannot read mask " + path.string());
    cv::Mat1b out = m > 127;
    return out;
}

// Dataset images preprocessed to the 256 frame with landmarks in that frame.
struct Dataset {
    io::DatasetIndex index;
    std::vector<io::OcularImage> images;
    std::vector<LandmarkSet> landmarks;
    std::vector<std::string> stems;
};

Dataset load_data(const DataOptions& d, Run& run, bool need_landmarks) {
    Dataset out;
    out.index = io::load_dataset(d.data, d.manifest);
    if (out.index.entries.empty()) throw Error("manifest lists no images: " + d.manifest.string());
    if (need_landmarks && d.landmarks.empty() && d.landmark_model.empty()) {
        throw UsageError("landmarks are needed: pass --landmarks or --landmark-model");
    }
    std::unique_ptr<landmarks::LandmarkModel> model;
    if (need_landmarks && !d.landmark_model.empty()) {
        model = std::make_unique<landmarks::LandmarkModel>(landmarks::LandmarkModel::load(d.landmark_model));
    }
    for (std::size_t i = 0; i < out.index.entries.size(); ++i) {
        const auto& e = out.index.entries[i];
        const auto stem = fs::path(e.image_path).stem().string();
        const auto image = io::read_image(out.index.absolute(i), e.subject_id);
        std::optional<LandmarkSet> l;
        if (!d.landmarks.empty()) {
            const auto rec = io::read_landmarks(d.landmarks / (stem + ".json"));
            l = rec.landmarks;
        }
        auto p = io::preprocess(image, l, false, 0);
        if (model) p.landmarks = model->predict(p.image);
        if (p.landmarks && p.landmarks->out_of_frame(kFrameSize, kFrameSize)) {
            run.warn(stem + ": landmarks outside the frame");
        }
        out.images.push_back(p.image);
        out.landmarks.push_back(p.landmarks.value_or(LandmarkSet{}));
        out.stems.push_back(stem);
    }
    return out;
}

std::vector<io::MorphPair> select_pairs(const Dataset& d, const std::string& spec, std::uint64_t seed, double alpha) {
    if (spec == "all") return io::pair_subjects(d.index, io::PairPolicy::all_cross, 0, seed, alpha);
    std::size_t used = 0;
    long long k = 0;
    try {
        k = std::stoll(spec, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != spec.size() || k < 1) throw UsageError("--pairs must be 'all' or a positive count");
    return io::pair_subjects(d.index, io::PairPolicy::random_k, static_cast<std::size_t>(k), seed, alpha);
}

struct MorphRow {
    std::string id, image, subject_a, subject_b, image_a, image_b, method, landmarks, landmarks_a, landmarks_b, mask;
    double alpha = 0.5;
};

const char* kMorphColumns =
    "morph_id,image,subject_a,subject_b,image_a,image_b,alpha,method,landmarks,landmarks_a,landmarks_b,mask";

void write_morph_manifest(const fs::path& path, const std::vector<MorphRow>& rows) {
    std::ofstream f(path);
    f << kMorphColumns << '\n' << std::setprecision(17);
    for (const auto& r : rows) {
        f << r.id << ',' << r.image << ',' << r.subject_a << ',' << r.subject_b << ',' << r.image_a << ','
          << r.image_b << ',' << r.alpha << ',' << r.method << ',' << r.landmarks << ',' << r.landmarks_a << ','
          << r.landmarks_b << ',' << r.mask << '\n';
    }
    if (!f) throw Error("cannot write " + path.string());
}

std::vector<MorphRow> read_morph_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    const auto header = csv::split(line);
    const auto col = [&](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw FormatError(path.string() + ": missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t c[12] = {col("morph_id"),  col("image"),    col("subject_a"),   col("subject_b"),
                               col("image_a"),   col("image_b"),  col("alpha"),       col("method"),
                               col("landmarks"), col("landmarks_a"), col("landmarks_b"), col("mask")};
    std::vector<MorphRow> rows;
    int number = 1;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto cells = csv::split(line);
        if (!line.empty() && line.back() == ',') cells.emplace_back();  // trailing empty cell
        const auto where = path.string() + ":" + std::to_string(number);
        if (cells.size() < header.size()) throw FormatError(where + ": too few columns");
        MorphRow r{cells[c[0]], cells[c[1]], cells[c[2]], cells[c[3]], cells[c[4]], cells[c[5]],
                   cells[c[7]], cells[c[8]], cells[c[9]], cells[c[10]], cells[c[11]]};
        r.alpha = csv::to_double(cells[c[6]], where);
        rows.push_back(r);
    }
    return rows;
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

std::string morph_id(std::size_t k, const Dataset& d, const io::MorphPair& p) {
    std::ostringstream s;
    s << 'm' << std::setw(4) << std::setfill('0') << k + 1 << '_' << d.stems[p.a] << '_' << d.stems[p.b];
    return s.str();
}

void write_source_landmarks(Run& run, const Dataset& d, std::size_t i) {
    io::write_landmarks(run.out("landmarks_256") / (d.stems[i] + ".json"), d.landmarks[i], d.stems[i]);
}

}  // namespace


// ---- fixture -----------------------------------------------------------------

void fixture(const Common& c, const FixtureOptions& o) {
    Run run(c, "fixture");
    if (o.subjects > o.count) throw UsageError("--subjects cannot exceed --count");
    io::DatasetIndex index;
    index.root = c.out;
    for (int i = 0; i < o.count; ++i) {
        const int subject = i % o.subjects, session = i / o.subjects;
        auto params = synthetic::random_eye_params(c.seed * 7919 + static_cast<std::uint64_t>(subject));
        // same subject, new capture: fresh skin noise and a small gaze change
        params.texture_seed = c.seed * 104729 + static_cast<std::uint64_t>(i);
        params.iris_dx += 2.0 * session;
        const auto eye = synthetic::render_eye(params, o.size);
        std::ostringstream stem;
        stem << "s" << subject << "_" << session;
        io::write_png(run.out("images") / (stem.str() + ".png"), eye.image);
        io::write_landmarks(run.out("landmarks") / (stem.str() + ".json"), eye.landmarks, stem.str() + ".png");
        fs::create_directories(run.out("masks"));
        cv::imwrite((run.out("masks") / (stem.str() + ".png")).string(), eye.iris_mask);
        index.entries.push_back({"images/" + stem.str() + ".png", "subject" + std::to_string(subject),
                                 "session" + std::to_string(session)});
    }
    io::write_manifest(run.out("manifest.tsv"), index);

    // toy verification scores: impostors around 0.3, morph probes around 0.6
    std::mt19937_64 rng(c.seed);
    std::normal_distribution<double> impostor(0.3, 0.08), genuine(0.6, 0.12);
    fs::create_directories(run.out("scores"));
    {
        std::ofstream f(run.out("scores/impostor.csv"));
        f << "pair,score\n" << std::setprecision(10);
        for (int i = 0; i < 2000; ++i) f << "imp" << i << ',' << impostor(rng) << '\n';
    }
    const auto pairs = io::pair_subjects(index, io::PairPolicy::all_cross, 0, c.seed);
    {
        std::ofstream f(run.out("scores/morph_scores.csv"));
        f << "morph_id,subject,probe_id,score\n" << std::setprecision(10);
        for (std::size_t k = 0; k < pairs.size(); ++k) {
            for (const auto idx : {pairs[k].a, pairs[k].b}) {
                for (int probe = 0; probe < 2; ++probe) {
                    f << "m" << k + 1 << ',' << index.entries[idx].subject_id << ",p" << probe << ',' << genuine(rng)
                      << '\n';
                }
            }
        }
    }
    run.report()["images"] = o.count;
    run.report()["subjects"] = o.subjects;
    run.report()["size"] = o.size;
    run.report()["manifest"] = run.out("manifest.tsv").string();
    run.finish();
}

// ---- landmarks -------------------------------------------------------------------

void landmarks_train(const Common& c, const LandmarksTrainOptions& o) {
    Run run(c, "landmarks train");
    const auto d = load_data(o.data, run, false);
    std::vector<landmarks::LabeledImage> data;
    for (std::size_t i = 0; i < d.images.size(); ++i) data.push_back({d.images[i], d.landmarks[i]});
    landmarks::LgConfig cfg;
    cfg.input_size = o.input_size;
    cfg.learning_rate = o.learning_rate;
    cfg.batch_size = o.batch_size;
    cfg.validate();
    auto trained = landmarks::train_landmark_model(data, cfg, o.epochs, c.seed);
    trained.model.save(run.out("landmark_model.pt"));
    run.report()["model"] = run.out("landmark_model.pt").string();
    run.report()["images"] = data.size();
    run.report()["epochs"] = o.epochs;
    run.report()["mse_px2_initial"] = trained.epoch_mse.front();
    run.report()["mse_px2_final"] = trained.epoch_mse.back();
    run.finish();
}

void landmarks_predict(const Common& c, const LandmarksPredictOptions& o) {
    Run run(c, "landmarks predict");
    auto model = landmarks::LandmarkModel::load(o.model);
    int written = 0;
    for (const auto& path : list_images(o.in)) {
        io::OcularImage image;
        try {
            image = io::read_image(path);
        } catch (const LoadError& e) {
            run.warn(std::string("skipped: ") + e.what());
            continue;
        }
        const auto l = model.predict(io::preprocess(image, false, 0));
        const auto src = to_source_frame(l, image.height(), image.width());
        io::write_landmarks(run.out(path.stem().string() + ".json"), src, path.filename().string());
        if (src.out_of_frame(image.width(), image.height())) run.warn(path.filename().string() + ": landmarks outside the image");
        ++written;
    }
    run.report()["landmark_files"] = written;
    run.finish();
}

// ---- morph -----------------------------------------------------------------------

void morph_classical(const Common& c, const MorphOptions& o) {
    Run run(c, "morph classical");
    const auto d = load_data(o.data, run, true);
    const auto pairs = select_pairs(d, o.pairs, c.seed, o.alpha);
    std::vector<cv::Mat1b> masks;
    if (!o.masks.empty()) {
        for (const auto& stem : d.stems) masks.push_back(preprocess_mask(read_mask(o.masks / (stem + ".png"))));
    }
    for (std::size_t i = 0; i < d.images.size(); ++i) write_source_landmarks(run, d, i);
    morph::MorphOptions mo;
    mo.alpha = o.alpha;
    mo.seamless_clone = o.clone;
    std::vector<MorphRow> rows;
    std::vector<double> ms;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        const auto& p = pairs[k];
        const auto id = morph_id(k, d, p);
        const auto t0 = std::chrono::steady_clock::now();
        const auto r = morph::morph(d.images[p.a], d.images[p.b], d.landmarks[p.a], d.landmarks[p.b], mo);
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        run.warn_all(r.warnings, id);
        io::write_png(run.out("morphs") / (id + ".png"), r.image);
        io::write_landmarks(run.out("morphs") / (id + ".json"), r.landmarks, id + ".png");
        MorphRow row{id, "morphs/" + id + ".png", d.index.entries[p.a].subject_id, d.index.entries[p.b].subject_id,
                     fs::absolute(d.index.absolute(p.a)).string(), fs::absolute(d.index.absolute(p.b)).string(),
                     "classical", "morphs/" + id + ".json", "landmarks_256/" + d.stems[p.a] + ".json",
                     "landmarks_256/" + d.stems[p.b] + ".json", ""};
        row.alpha = o.alpha;
        if (!masks.empty()) {
            // the iris region follows the same warp and blend as the pixels
            const auto as_image = [](const cv::Mat1b& m) {
                cv::Mat f, rgb;
                m.convertTo(f, CV_32F);
                cv::merge(std::vector<cv::Mat>{f, f, f}, rgb);
                return io::from_mat(rgb, io::ValueRange::raw_0_255);
            };
            morph::MorphOptions plain;
            plain.alpha = o.alpha;
            const auto mm = morph::morph(as_image(masks[p.a]), as_image(masks[p.b]), d.landmarks[p.a],
                                         d.landmarks[p.b], plain);
            const auto mask = mask_from(mm.image);
            fs::create_directories(run.out("masks"));
            cv::imwrite((run.out("masks") / (id + ".png")).string(), mask);
            row.mask = "masks/" + id + ".png";
        }
        rows.push_back(row);
    }
    write_morph_manifest(run.out("manifest.csv"), rows);
    run.report()["morphs"] = rows.size();
    run.report()["alpha"] = o.alpha;
    run.report()["manifest"] = run.out("manifest.csv").string();
    run.report()["mean_ms_per_morph"] = ms.empty() ? 0.0 : std::accumulate(ms.begin(), ms.end(), 0.0) / ms.size();
    run.finish();
}

void morph_gan(const Common& c, const MorphOptions& o) {
    Run run(c, "morph gan");
    auto models = train::load_models(o.checkpoint);
    const auto d = load_data(o.data, run, true);
    const auto pairs = select_pairs(d, o.pairs, c.seed, o.alpha);
    for (std::size_t i = 0; i < d.images.size(); ++i) write_source_landmarks(run, d, i);
    std::vector<MorphRow> rows;
    std::vector<double> ms;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        const auto& p = pairs[k];
        const auto id = morph_id(k, d, p);
        const auto t0 = std::chrono::steady_clock::now();
        const auto image = train::make_morph(*models, d.images[p.a], d.images[p.b], d.landmarks[p.a],
                                             d.landmarks[p.b], o.alpha, o.sigma);
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        io::write_png(run.out("morphs") / (id + ".png"), image);
        MorphRow row{id, "morphs/" + id + ".png", d.index.entries[p.a].subject_id, d.index.entries[p.b].subject_id,
                     fs::absolute(d.index.absolute(p.a)).string(), fs::absolute(d.index.absolute(p.b)).string(),
                     "gan", "", "landmarks_256/" + d.stems[p.a] + ".json", "landmarks_256/" + d.stems[p.b] + ".json",
                     ""};
        row.alpha = o.alpha;
        rows.push_back(row);
    }
    write_morph_manifest(run.out("manifest.csv"), rows);
    run.report()["morphs"] = rows.size();
    run.report()["alpha"] = o.alpha;
    run.report()["image_size"] = models->config.image_size;
    run.report()["manifest"] = run.out("manifest.csv").string();
    run.report()["mean_ms_per_morph"] = ms.empty() ? 0.0 : std::accumulate(ms.begin(), ms.end(), 0.0) / ms.size();
    run.finish();
}

// ---- train ---------------------------------------------------------------------

void train_gan(const Common& c, const TrainGanOptions& o) {
    Run run(c, o.dry_run ? "train gan (dry run)" : "train gan");
    train::TrainConfig tc;
    nets::NetConfig nc;
    if (!o.config.empty()) train::read_config(o.config, tc, nc);
    for (const auto& s : o.settings) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
        const auto trim = [](std::string v) {
            v.erase(0, v.find_first_not_of(' '));
            v.erase(v.find_last_not_of(' ') + 1);
            return v;
        };
        train::apply_setting(tc, nc, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    if (c.seed_given) tc.seed = c.seed;
    tc.validate();
    nc.validate();
    if (!o.embedding.empty() != !o.features.empty()) {
        throw UsageError("--embedding and --features are used together");
    }
    {
        std::ofstream f(run.out("train_config.txt"));
        f << train::to_text(tc, nc);
    }
    run.report()["train_config"] = run.out("train_config.txt").string();

    if (o.dry_run) {
        // files only; no image is decoded and no network is built
        const auto index = io::load_dataset(o.data.data, o.data.manifest);
        if (o.data.landmarks.empty() && o.data.landmark_model.empty()) {
            throw UsageError("landmarks are needed: pass --landmarks or --landmark-model");
        }
        std::size_t missing = 0;
        for (std::size_t i = 0; i < index.entries.size(); ++i) {
            const auto stem = fs::path(index.entries[i].image_path).stem().string();
            if (!fs::exists(index.absolute(i))) {
                run.warn("missing image " + index.absolute(i).string());
                ++missing;
            }
            if (!o.data.landmarks.empty() && !fs::exists(o.data.landmarks / (stem + ".json"))) {
                run.warn("missing landmarks for " + stem);
                ++missing;
            }
        }
        for (const auto& p : {o.data.landmark_model, o.resume, o.embedding, o.features}) {
            if (!p.empty() && !fs::exists(p)) {
                run.warn("missing file " + p.string());
                ++missing;
            }
        }
        const auto pairs = io::pair_subjects(index, io::PairPolicy::all_cross, 0, tc.seed);
        if (pairs.empty()) throw Error("the dataset has no cross-subject pairs");
        const auto per_epoch = (pairs.size() + tc.batch_size - 1) / tc.batch_size;
        run.report()["images"] = index.entries.size();
        run.report()["pairs"] = pairs.size();
        run.report()["steps_per_epoch"] = per_epoch;
        run.report()["planned_steps"] =
            tc.max_steps > 0 ? std::min<std::int64_t>(tc.max_steps, per_epoch * tc.epochs) : per_epoch * tc.epochs;
        run.report()["missing_files"] = missing;
        run.report()["valid"] = missing == 0;
        run.finish();
        if (missing > 0) throw Error(std::to_string(missing) + " input file(s) missing");
        return;
    }

    const auto d = load_data(o.data, run, true);
    train::TrainingSet data;
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        data.samples.push_back(train::make_sample(d.images[i], d.landmarks[i], nc.image_size, tc.heatmap_sigma));
    }
    data.pairs = io::pair_subjects(d.index, io::PairPolicy::all_cross, 0, tc.seed);
    train::PlugIns plugins;
    if (o.embedding.empty()) {
        plugins = train::fallback_plugins();
        run.warn("no embedding / feature backbones given; using the built-in tiny models");
    } else {
        plugins.embedding = losses::load_embedding_model(o.embedding);
        plugins.features = losses::load_feature_extractor(o.features, o.feature_layers);
        plugins.perceptual_layers = o.feature_layers;
    }
    train::Trainer trainer(nc, tc, std::move(data), std::move(plugins));
    if (!o.resume.empty()) trainer.load_checkpoint(o.resume);
    train::StepRecord last;
    trainer.run(c.out, [&](const train::StepRecord& r) {
        last = r;
        if (r.step % 10 == 0 || r.step == 1) {
            std::cerr << "step " << r.step << " epoch " << r.epoch << " rec " << r.losses[3] << " adv " << r.losses[0]
                      << '\n';
        }
    });
    run.report()["steps"] = trainer.steps_done();
    run.report()["epochs"] = trainer.epoch();
    json losses;
    for (std::size_t i = 0; i < losses::kNumLosses; ++i) losses[losses::kLossNames[i]] = last.losses[i];
    run.report()["last_losses"] = losses;
    run.report()["loss_weights"] = trainer.weight_state().weights;
    run.report()["checkpoint"] = run.out("checkpoint_last.pt").string();
    run.finish();
}

namespace {

struct MadModelFile {
    mad::Descriptor descriptor = mad::Descriptor::lpq;
    mad::DetectorKind kind = mad::DetectorKind::linear_margin;
    int image_size = 128;
    fs::path detector;
};

cv::Mat1d mad_gray(const io::OcularImage& image, int size) {
    cv::Mat1d g;
    cv::resize(mad::to_gray(image), g, {size, size}, 0, 0, cv::INTER_AREA);
    return g;
}

std::vector<std::pair<std::string, io::OcularImage>> read_dir(const fs::path& dir, Run& run) {
    std::vector<std::pair<std::string, io::OcularImage>> out;
    for (const auto& p : list_images(dir)) {
        try {
            out.emplace_back(p.filename().string(), io::read_image(p));
        } catch (const LoadError& e) {
            run.warn(std::string("skipped: ") + e.what());
        }
    }
    return out;
}

}  // namespace

void train_mad(const Common& c, const TrainMadOptions& o) {
    Run run(c, "train mad");
    MadModelFile m;
    m.descriptor = mad::parse_descriptor(o.descriptor);
    m.kind = mad::parse_detector_kind(o.classifier);
    m.image_size = o.image_size;
    const auto bona = read_dir(o.bonafide, run), morphs = read_dir(o.morph, run);
    std::vector<io::OcularImage> images;
    std::vector<mad::Label> labels;
    for (const auto& [name, img] : bona) images.push_back(img), labels.push_back(mad::Label::bonafide);
    for (const auto& [name, img] : morphs) images.push_back(img), labels.push_back(mad::Label::morph);

    mad::DetectorOptions opts;
    opts.seed = c.seed;
    opts.image_size = o.image_size;
    opts.deep_epochs = o.deep_epochs;
    mad::MadScoreSet train_scores;
    if (m.kind == mad::DetectorKind::deep) {
        mad::CnnDetector det(o.image_size);
        det.train(images, labels, opts);
        m.detector = "detector.pt";
        det.save(run.out(m.detector));
        for (std::size_t i = 0; i < images.size(); ++i) train_scores.records.push_back({"", labels[i], det.score(images[i])});
    } else {
        std::vector<std::vector<double>> features;
        for (const auto& img : images) features.push_back(mad::describe(m.descriptor, mad_gray(img, o.image_size)));
        const auto det = mad::train_detector(features, labels, m.kind, opts);
        m.detector = "detector.json";
        det->save(run.out(m.detector));
        for (std::size_t i = 0; i < images.size(); ++i) train_scores.records.push_back({"", labels[i], det->score(features[i])});
    }
    Run::write_json(run.out("mad_model.json"), {{"format", "ocumorph.mad_model"},
                                                {"descriptor", mad::to_string(m.descriptor)},
                                                {"classifier", mad::to_string(m.kind)},
                                                {"image_size", m.image_size},
                                                {"detector", m.detector.string()}});
    run.report()["model"] = run.out("mad_model.json").string();
    run.report()["bonafide"] = bona.size();
    run.report()["morphs"] = morphs.size();
    run.report()["training_d_eer"] = mad::d_eer(train_scores);
    run.finish();
}

// ---- eval ----------------------------------------------------------------------

void eval_vulnerability(const Common& c, const EvalVulnerabilityOptions& o) {
    Run run(c, "eval vulnerability");
    const auto impostor = metrics::read_scores(o.impostor);
    const auto morphs = metrics::read_morph_scores(o.morph_scores);
    json points = json::array();
    for (double fmr : o.fmrs) {
        if (!(fmr > 0 && fmr <= 1)) throw UsageError("--fmr values must be in (0, 1]");
        Warnings w;
        const double t = metrics::threshold_at_fmr(impostor, fmr, &w);
        run.warn_all(w, "fmr " + std::to_string(fmr));
        Warnings fw;
        const double fm = metrics::fmmpmr(morphs, t, &fw);
        run.warn_all(fw, "fmmpmr");
        points.push_back({{"fmr", fmr},
                          {"threshold", t},
                          {"achieved_fmr", metrics::false_match_rate(impostor, t)},
                          {"mmpmr", metrics::mmpmr(morphs, t)},
                          {"fmmpmr", fm}});
    }
    run.report()["impostor_scores"] = impostor.size();
    run.report()["morphs"] = morphs.size();
    run.report()["operating_points"] = points;
    run.finish("vulnerability.json");
}

void eval_quality(const Common& c, const EvalQualityOptions& o) {
    Run run(c, "eval quality");
    const auto base = o.morphs.parent_path();
    const auto rows = read_morph_manifest(o.morphs);
    std::unique_ptr<landmarks::LandmarkModel> model;
    if (!o.landmark_model.empty()) {
        model = std::make_unique<landmarks::LandmarkModel>(landmarks::LandmarkModel::load(o.landmark_model));
    }
    json per = json::array();
    double ssim_sum = 0, ir_sum = 0, gaze_sum = 0;
    int ssim_n = 0, ir_n = 0, gaze_n = 0;
    for (const auto& r : rows) {
        json item{{"morph_id", r.id}};
        const auto morph_img = io::read_image(resolve(base, r.image));
        // contributing images in the frame the morph was produced in
        const auto source = [&](const std::string& p) {
            const auto pre = io::preprocess(io::read_image(resolve(base, p)), false, 0);
            cv::Mat raw = io::to_raw(pre), sized;
            cv::resize(raw, sized, morph_img.pixels.size(), 0, 0, cv::INTER_AREA);
            return io::from_mat(sized, io::ValueRange::raw_0_255);
        };
        const double sa = metrics::ssim(morph_img, source(r.image_a));
        const double sb = metrics::ssim(morph_img, source(r.image_b));
        item["ssim_a"] = sa;
        item["ssim_b"] = sb;
        ssim_sum += 0.5 * (sa + sb);
        ++ssim_n;

        fs::path mask_path;
        if (!o.masks.empty()) mask_path = o.masks / (r.id + ".png");
        else if (!r.mask.empty()) mask_path = resolve(base, r.mask);
        if (!mask_path.empty() && fs::exists(mask_path)) {
            try {
                const auto ir = metrics::iris_irregularity(read_mask(mask_path));
                run.warn_all(ir.warnings, r.id);
                item["ir"] = ir.ir;
                ir_sum += ir.ir;
                ++ir_n;
            } catch (const Error& e) {
                run.warn(r.id + ": IR skipped: " + e.what());
            }
        } else {
            run.warn(r.id + ": no iris mask, IR skipped");
        }

        std::optional<LandmarkSet> lm;
        if (!r.landmarks.empty()) {
            lm = io::read_landmarks(resolve(base, r.landmarks)).landmarks;
        } else if (model) {
            lm = model->predict(io::preprocess(morph_img, false, 0));
        }
        if (lm && !r.landmarks_a.empty() && !r.landmarks_b.empty()) {
            const auto la = io::read_landmarks(resolve(base, r.landmarks_a)).landmarks;
            const auto lb = io::read_landmarks(resolve(base, r.landmarks_b)).landmarks;
            const double g = metrics::gaze_consistency(*lm, la, lb);
            item["gaze"] = g;
            gaze_sum += g;
            ++gaze_n;
        } else {
            run.warn(r.id + ": no landmarks, gaze skipped");
        }
        per.push_back(item);
    }
    run.report()["morphs"] = per;
    run.report()["aggregate"] = {{"ssim", ssim_n ? ssim_sum / ssim_n : 0.0},
                                 {"ir", ir_n ? json(ir_sum / ir_n) : json(nullptr)},
                                 {"gaze", gaze_n ? json(gaze_sum / gaze_n) : json(nullptr)},
                                 {"count", per.size()},
                                 {"ir_count", ir_n},
                                 {"gaze_count", gaze_n}};
    run.report()["gaze_formula_version"] = metrics::kGazeFormulaVersion;
    run.finish("quality.json");
}

void eval_mad(const Common& c, const EvalMadOptions& o) {
    Run run(c, "eval mad");
    mad::MadScoreSet scores;
    if (!o.scores.empty()) {
        scores = mad::read_mad_scores(o.scores);
    } else {
        if (o.model.empty() || o.bonafide.empty() || o.morph.empty()) {
            throw UsageError("pass --scores, or --model with --bonafide and --morph");
        }
        std::ifstream in(o.model);
        if (!in) throw LoadError("cannot open " + o.model.string());
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw FormatError(o.model.string() + ": " + e.what());
        }
        const auto descriptor = mad::parse_descriptor(j.at("descriptor").get<std::string>());
        const auto kind = mad::parse_detector_kind(j.at("classifier").get<std::string>());
        const int size = j.at("image_size").get<int>();
        const auto det_path = o.model.parent_path() / j.at("detector").get<std::string>();
        std::function<double(const io::OcularImage&)> score;
        std::unique_ptr<mad::CnnDetector> cnn;
        std::unique_ptr<mad::FeatureDetector> det;
        if (kind == mad::DetectorKind::deep) {
            cnn = mad::CnnDetector::load(det_path);
            score = [&](const io::OcularImage& img) { return cnn->score(img); };
        } else {
            det = mad::load_detector(det_path);
            score = [&](const io::OcularImage& img) { return det->score(mad::describe(descriptor, mad_gray(img, size))); };
        }
        for (const auto& [name, img] : read_dir(o.bonafide, run)) {
            scores.records.push_back({name, mad::Label::bonafide, score(img)});
        }
        for (const auto& [name, img] : read_dir(o.morph, run)) {
            scores.records.push_back({name, mad::Label::morph, score(img)});
        }
        mad::write_mad_scores(run.out("mad_scores.csv"), scores);
    }
    const auto op = mad::bpcer_at_apcer(scores, 0.05);
    json table = json::array();
    for (const auto& row : mad::threshold_table(scores)) {
        table.push_back({{"threshold", row.threshold}, {"apcer", row.rates.apcer}, {"bpcer", row.rates.bpcer}});
    }
    run.report()["samples"] = scores.records.size();
    run.report()["d_eer"] = mad::d_eer(scores);
    run.report()["bpcer_at_5_apcer"] = {{"bpcer", op.rates.bpcer}, {"apcer", op.rates.apcer}, {"threshold", op.threshold}};
    run.report()["thresholds"] = table;
    run.finish("mad.json");
}

}  // namespace ocumorph::cli
