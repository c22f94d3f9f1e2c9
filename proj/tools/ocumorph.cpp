// ocumorph command-line tool. Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "commands.hpp"

using namespace ocumorph;

namespace {

void add_data(CLI::App* cmd, cli::DataOptions& d, bool landmarks) {
    cmd->add_option("--data", d.data, "Dataset root")->required();
    cmd->add_option("--manifest", d.manifest, "TSV manifest: path, subject, session")->required();
    if (landmarks) {
        auto* files = cmd->add_option("--landmarks", d.landmarks, "Directory of <image stem>.json landmark files");
        auto* model = cmd->add_option("--landmark-model", d.landmark_model, "Predict landmarks with this model");
        files->excludes(model);
    }
}

std::string quoted(const std::string& v) {
    std::string out = "\"";
    for (char ch : v) {
        if (ch == '"' || ch == '\\') out += '\\';
        out += ch;
    }
    return out + '"';
}

void write_options(std::ostringstream& out, const CLI::App* app) {
    for (const CLI::Option* opt : app->get_options()) {
        const auto name = opt->get_single_name();
        if (name == "help" || name == "run-config" || !opt->get_configurable()) continue;
        std::vector<std::string> values = opt->count() > 0 ? opt->reduced_results() : std::vector<std::string>{};
        if (opt->count() == 0) {
            if (opt->get_type_size() == 0) values = {"false"};
            else if (!opt->get_default_str().empty()) values = {opt->get_default_str()};
        }
        if (opt->get_type_size() == 0 && opt->count() > 0) values = {"true"};
        if (values.empty()) continue;
        out << name << '=';
        if (opt->get_expected_max() > 1 && !(values.size() == 1 && values[0].front() == '[')) {
            out << '[';
            for (std::size_t i = 0; i < values.size(); ++i) out << (i ? "," : "") << quoted(values[i]);
            out << ']';
        } else {
            out << quoted(values[0]);
        }
        out << '\n';
    }
}

// Global options and the chosen subcommand's options, replayable with --run-config.
std::string snapshot(const CLI::App& app) {
    std::ostringstream out;
    write_options(out, &app);
    std::string section;
    const CLI::App* cur = &app;
    while (true) {
        const auto subs = cur->get_subcommands();
        if (subs.empty()) break;
        cur = subs.front();
        section += (section.empty() ? "" : ".") + cur->get_name();
    }
    out << '[' << section << "]\n";
    write_options(out, cur);
    return out.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ocular morph generation, training and evaluation"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--run-config", "", "Replay a resolved_config.ini snapshot");

    cli::Common common;
    app.add_option("--out", common.out, "Output directory")->required();
    app.add_option("--seed", common.seed, "Random seed")->capture_default_str();

    // fixture
    cli::FixtureOptions fixture;
    auto* fx = app.add_subcommand("fixture", "Write a synthetic dataset with landmarks, iris masks and toy scores");
    fx->add_option("--count", fixture.count, "Images")->capture_default_str()->check(CLI::Range(2, 10000));
    fx->add_option("--subjects", fixture.subjects, "Subjects")->capture_default_str()->check(CLI::Range(2, 10000));
    fx->add_option("--size", fixture.size, "Image side in pixels")->capture_default_str()->check(CLI::Range(32, 256));

    // landmarks
    auto* lm = app.add_subcommand("landmarks", "Landmark generator");
    lm->require_subcommand(1);
    cli::LandmarksTrainOptions lm_train;
    auto* lmt = lm->add_subcommand("train", "Train a landmark model from labeled images");
    add_data(lmt, lm_train.data, false);
    lmt->add_option("--landmarks", lm_train.data.landmarks, "Ground-truth landmark directory")->required();
    lmt->add_option("--epochs", lm_train.epochs)->capture_default_str()->check(CLI::PositiveNumber);
    lmt->add_option("--input-size", lm_train.input_size)->capture_default_str()->check(CLI::Range(16, 256));
    lmt->add_option("--lr", lm_train.learning_rate)->capture_default_str()->check(CLI::PositiveNumber);
    lmt->add_option("--batch-size", lm_train.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
    cli::LandmarksPredictOptions lm_pred;
    auto* lmp = lm->add_subcommand("predict", "Predict landmarks for every image in a directory");
    lmp->add_option("--model", lm_pred.model, "Landmark model")->required();
    lmp->add_option("--in", lm_pred.in, "Image directory")->required()->check(CLI::ExistingDirectory);

    // morph
    auto* mo = app.add_subcommand("morph", "Generate morphs for cross-subject pairs");
    mo->require_subcommand(1);
    cli::MorphOptions morph;
    const auto add_morph = [&](CLI::App* cmd) {
        add_data(cmd, morph.data, true);
        cmd->add_option("--pairs", morph.pairs, "'all' or the number of random pairs")->capture_default_str();
        cmd->add_option("--alpha", morph.alpha)->capture_default_str()->check(CLI::Range(0.0, 1.0));
    };
    auto* mc = mo->add_subcommand("classical", "Landmark-based triangulation morph");
    add_morph(mc);
    mc->add_flag("--clone", morph.clone, "Poisson-blend the eye region");
    mc->add_option("--masks", morph.masks, "Iris masks named like the images; morphed alongside");
    auto* mg = mo->add_subcommand("gan", "Latent interpolation with a trained generator");
    add_morph(mg);
    mg->add_option("--checkpoint", morph.checkpoint, "Trainer checkpoint")->required();
    mg->add_option("--sigma", morph.sigma, "Heatmap sigma (256-frame pixels)")->capture_default_str();

    // train
    auto* tr = app.add_subcommand("train", "Train the morph generator or a detector");
    tr->require_subcommand(1);
    cli::TrainGanOptions gan;
    auto* tg = tr->add_subcommand("gan", "Adversarial morph generator");
    add_data(tg, gan.data, true);
    tg->add_option("--config", gan.config, "key = value training config")->check(CLI::ExistingFile);
    tg->add_option("--set", gan.settings, "key=value override (repeatable)");
    tg->add_option("--resume", gan.resume, "Continue from a checkpoint");
    tg->add_option("--embedding", gan.embedding, "TorchScript identity embedding");
    tg->add_option("--features", gan.features, "TorchScript feature extractor for the perceptual loss");
    tg->add_option("--feature-layers", gan.feature_layers, "Stage names the feature module returns");
    tg->add_flag("--dry-run", gan.dry_run, "Validate config and data, then stop");
    cli::TrainMadOptions mad_train;
    auto* tm = tr->add_subcommand("mad", "Morph attack detector");
    tm->add_option("--bonafide", mad_train.bonafide, "Bona fide image directory")->required()->check(CLI::ExistingDirectory);
    tm->add_option("--morph", mad_train.morph, "Morph image directory")->required()->check(CLI::ExistingDirectory);
    tm->add_option("--descriptor", mad_train.descriptor, "lpq, bsif or hog")->capture_default_str();
    tm->add_option("--classifier", mad_train.classifier, "linear_margin, tree_ensemble or deep")->capture_default_str();
    tm->add_option("--image-size", mad_train.image_size)->capture_default_str()->check(CLI::Range(16, 1024));
    tm->add_option("--deep-epochs", mad_train.deep_epochs)->capture_default_str()->check(CLI::PositiveNumber);

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluation reports");
    ev->require_subcommand(1);
    cli::EvalVulnerabilityOptions vuln;
    auto* evv = ev->add_subcommand("vulnerability", "MMPMR / FMMPMR at fixed false match rates");
    evv->add_option("--impostor", vuln.impostor, "CSV with a score column")->required()->check(CLI::ExistingFile);
    evv->add_option("--morph-scores", vuln.morph_scores, "CSV morph_id,subject,probe_id,score")
        ->required()
        ->check(CLI::ExistingFile);
    evv->add_option("--fmr", vuln.fmrs, "False match rates")->capture_default_str()->delimiter(',');
    cli::EvalQualityOptions quality;
    auto* evq = ev->add_subcommand("quality", "SSIM, iris irregularity and gaze per morph");
    evq->add_option("--morphs", quality.morphs, "manifest.csv written by `morph`")->required()->check(CLI::ExistingFile);
    evq->add_option("--masks", quality.masks, "Directory of <morph_id>.png iris masks");
    evq->add_option("--landmark-model", quality.landmark_model, "Predict morph landmarks when absent");
    cli::EvalMadOptions mad_eval;
    auto* evm = ev->add_subcommand("mad", "APCER / BPCER / D-EER of a detector");
    auto* model = evm->add_option("--model", mad_eval.model, "mad_model.json from `train mad`");
    evm->add_option("--bonafide", mad_eval.bonafide)->needs(model);
    evm->add_option("--morph", mad_eval.morph)->needs(model);
    auto* scores = evm->add_option("--scores", mad_eval.scores, "CSV sample_id,label,score")->check(CLI::ExistingFile);
    scores->excludes(model);

    for (auto* sub : {fx, lm, lmt, lmp, mo, mc, mg, tr, tg, tm, ev, evv, evq, evm}) sub->configurable();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    common.snapshot = snapshot(app);
    common.seed_given = app.get_option("--seed")->count() > 0;

    try {
        if (*fx) cli::fixture(common, fixture);
        else if (*lmt) cli::landmarks_train(common, lm_train);
        else if (*lmp) cli::landmarks_predict(common, lm_pred);
        else if (*mc) cli::morph_classical(common, morph);
        else if (*mg) cli::morph_gan(common, morph);
        else if (*tg) cli::train_gan(common, gan);
        else if (*tm) cli::train_mad(common, mad_train);
        else if (*evv) cli::eval_vulnerability(common, vuln);
        else if (*evq) cli::eval_quality(common, quality);
        else if (*evm) cli::eval_mad(common, mad_eval);
    } catch (const cli::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n\n" << app.help();
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
