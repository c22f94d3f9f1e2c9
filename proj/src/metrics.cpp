#include "ocumorph/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>
#include <opencv2/imgproc.hpp>

#include "csv.hpp"

namespace ocumorph::metrics {

// ---- SSIM ------------------------------------------------------------------

double ssim(const cv::Mat& x_in, const cv::Mat& y_in, double data_range) {
    if (x_in.size() != y_in.size() || x_in.channels() != y_in.channels()) throw Error("ssim: image shapes differ");
    constexpr int kWindow = 11;
    if (x_in.rows < kWindow || x_in.cols < kWindow) throw Error("ssim: images must be at least 11x11");
    if (!(data_range > 0)) throw Error("ssim: data range must be positive");
    cv::Mat x, y;
    x_in.convertTo(x, CV_64F);
    y_in.convertTo(y, CV_64F);
    const cv::Mat g = cv::getGaussianKernel(kWindow, 1.5, CV_64F);
    const double c1 = std::pow(0.01 * data_range, 2), c2 = std::pow(0.03 * data_range, 2);
    const cv::Rect valid(kWindow / 2, kWindow / 2, x.cols - kWindow + 1, x.rows - kWindow + 1);

    std::vector<cv::Mat> xs, ys;
    cv::split(x, xs);
    cv::split(y, ys);
    double total = 0;
    for (std::size_t c = 0; c < xs.size(); ++c) {
        auto blur = [&](const cv::Mat& m) {
            cv::Mat out;
            cv::sepFilter2D(m, out, CV_64F, g, g, cv::Point(-1, -1), 0, cv::BORDER_REFLECT);
            return out(valid);
        };
        const cv::Mat& a = xs[c];
        const cv::Mat& b = ys[c];
        const cv::Mat mx = blur(a), my = blur(b);
        const cv::Mat sxx = blur(a.mul(a)) - mx.mul(mx);
        const cv::Mat syy = blur(b.mul(b)) - my.mul(my);
        const cv::Mat sxy = blur(a.mul(b)) - mx.mul(my);
        cv::Mat num = (2 * mx.mul(my) + c1).mul(2 * sxy + c2);
        cv::Mat den = (mx.mul(mx) + my.mul(my) + c1).mul(sxx + syy + c2);
        cv::Mat map;
        cv::divide(num, den, map);
        total += cv::mean(map)[0];
    }
    return total / static_cast<double>(xs.size());
}

double ssim(const io::OcularImage& x, const io::OcularImage& y) {
    if (x.range != y.range) throw Error("ssim: images use different value ranges");
    if (x.range == io::ValueRange::raw_0_255) return ssim(x.pixels, y.pixels, 255.0);
    cv::Mat a, b;
    x.pixels.convertTo(a, CV_64F, 0.5, 0.5);
    y.pixels.convertTo(b, CV_64F, 0.5, 0.5);
    return ssim(a, b, 1.0);
}

// ---- thresholds and match rates ---------------------------------------------

double false_match_rate(std::span<const double> impostors, double threshold) {
    if (impostors.empty()) throw Error("no impostor scores");
    const auto n = std::count_if(impostors.begin(), impostors.end(), [&](double s) { return s >= threshold; });
    return static_cast<double>(n) / static_cast<double>(impostors.size());
}

double threshold_at_fmr(std::span<const double> impostors, double fmr, Warnings* warnings) {
    if (impostors.empty()) throw Error("threshold_at_fmr: no impostor scores");
    if (!(fmr >= 0 && fmr <= 1)) throw Error("threshold_at_fmr: fmr must be in [0, 1]");
    std::vector<double> s(impostors.begin(), impostors.end());
    for (double v : s) {
        if (!std::isfinite(v)) throw Error("threshold_at_fmr: non-finite score");
    }
    std::sort(s.begin(), s.end());
    const auto n = static_cast<double>(s.size());
    if (warnings && fmr > 0 && n * fmr < 1) {
        warnings->push_back("only " + std::to_string(s.size()) + " impostor scores for FMR " + std::to_string(fmr) +
                            "; the threshold lies above every score");
    }
    // allowed false matches; the tolerance absorbs products like 0.1 * 30 = 3.0000000000000004
    const auto allowed = static_cast<std::size_t>(std::floor(fmr * n * (1 + 1e-12) + 1e-9));
    // the smallest score value v whose count #(>= v) is within budget
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i > 0 && s[i] == s[i - 1]) continue;
        if (s.size() - i <= allowed) return s[i];
    }
    return std::nextafter(s.back(), std::numeric_limits<double>::infinity());
}

namespace {

void check_scores(std::span<const MorphScores> scores) {
    if (scores.empty()) throw Error("no morph scores");
    for (const auto& m : scores) {
        if (m.a.empty() || m.b.empty()) throw Error("morph " + m.morph_id + " lacks probes for a contributing subject");
    }
}

}  // namespace

double mmpmr(std::span<const MorphScores> scores, double t) {
    check_scores(scores);
    std::size_t success = 0;
    for (const auto& m : scores) {
        const bool a = *std::max_element(m.a.begin(), m.a.end()) >= t;
        const bool b = *std::max_element(m.b.begin(), m.b.end()) >= t;
        if (a && b) ++success;
    }
    return static_cast<double>(success) / static_cast<double>(scores.size());
}

double fmmpmr(std::span<const MorphScores> scores, double t, Warnings* warnings) {
    check_scores(scores);
    std::size_t success = 0;
    for (const auto& m : scores) {
        const std::size_t k = std::min(m.a.size(), m.b.size());
        if (warnings && m.a.size() != m.b.size()) {
            warnings->push_back("morph " + m.morph_id + ": unequal probe counts, pairing the first " +
                                std::to_string(k));
        }
        bool all = true;
        for (std::size_t i = 0; i < k && all; ++i) all = m.a[i] >= t && m.b[i] >= t;
        if (all) ++success;
    }
    return static_cast<double>(success) / static_cast<double>(scores.size());
}

std::vector<MorphScores> read_morph_scores(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open score file " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty score file");
    const auto header = csv::split(line);
    auto column = [&](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw FormatError(path.string() + ": missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto c_morph = column("morph_id"), c_subject = column("subject"), c_probe = column("probe_id"),
               c_score = column("score");

    struct Probe {
        std::string id;
        double score;
    };
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::pair<std::string, std::vector<Probe>>>> by_morph;
    int number = 1;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = csv::split(line);
        const auto where = path.string() + ":" + std::to_string(number);
        if (cells.size() < header.size()) throw FormatError(where + ": too few columns");
        const auto& morph = cells[c_morph];
        if (!by_morph.count(morph)) order.push_back(morph);
        auto& subjects = by_morph[morph];
        auto it = std::find_if(subjects.begin(), subjects.end(), [&](auto& s) { return s.first == cells[c_subject]; });
        if (it == subjects.end()) {
            if (subjects.size() == 2) throw FormatError(where + ": morph " + morph + " names a third subject");
            subjects.push_back({cells[c_subject], {}});
            it = subjects.end() - 1;
        }
        it->second.push_back({cells[c_probe], csv::to_double(cells[c_score], where)});
    }
    std::vector<MorphScores> out;
    for (const auto& id : order) {
        auto& subjects = by_morph[id];
        if (subjects.size() != 2) throw FormatError(path.string() + ": morph " + id + " needs two subjects");
        MorphScores m;
        m.morph_id = id;
        for (int k = 0; k < 2; ++k) {
            auto probes = subjects[k].second;
            std::stable_sort(probes.begin(), probes.end(), [](const Probe& p, const Probe& q) { return p.id < q.id; });
            auto& dst = k == 0 ? m.a : m.b;
            for (const auto& p : probes) dst.push_back(p.score);
            (k == 0 ? m.subject_a : m.subject_b) = subjects[k].first;
        }
        out.push_back(std::move(m));
    }
    if (out.empty()) throw FormatError(path.string() + ": no score rows");
    return out;
}

std::vector<double> read_scores(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open score file " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty score file");
    const auto header = csv::split(line);
    const auto it = std::find(header.begin(), header.end(), "score");
    if (it == header.end()) throw FormatError(path.string() + ": missing column 'score'");
    const auto col = static_cast<std::size_t>(it - header.begin());
    std::vector<double> out;
    int number = 1;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = csv::split(line);
        const auto where = path.string() + ":" + std::to_string(number);
        if (cells.size() <= col) throw FormatError(where + ": too few columns");
        out.push_back(csv::to_double(cells[col], where));
    }
    return out;
}

// ---- ellipse -----------------------------------------------------------------

namespace {

// Conic A x^2 + B xy + C y^2 + D x + E y + F = 0 -> geometric parameters.
Ellipse from_conic(const Eigen::Matrix<double, 6, 1>& k) {
    const double A = k(0), B = k(1), C = k(2), D = k(3), E = k(4), F = k(5);
    const double det = 4 * A * C - B * B;
    if (!(det > 0)) throw Error("ellipse fit: conic is not an ellipse");
    Ellipse e;
    e.cx = (B * E - 2 * C * D) / det;
    e.cy = (B * D - 2 * A * E) / det;
    const double f0 = A * e.cx * e.cx + B * e.cx * e.cy + C * e.cy * e.cy + D * e.cx + E * e.cy + F;
    Eigen::Matrix2d q;
    q << A, B / 2, B / 2, C;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(q);
    const double l0 = es.eigenvalues()(0), l1 = es.eigenvalues()(1);  // ascending
    if (!(-f0 / l0 > 0) || !(-f0 / l1 > 0)) throw Error("ellipse fit: degenerate conic");
    // the smaller eigenvalue belongs to the longer axis
    e.a = std::sqrt(-f0 / l0);
    e.b = std::sqrt(-f0 / l1);
    const Eigen::Vector2d major = es.eigenvectors().col(0);
    e.theta = std::atan2(major.y(), major.x());
    if (e.theta <= -std::numbers::pi / 2) e.theta += std::numbers::pi;
    if (e.theta > std::numbers::pi / 2) e.theta -= std::numbers::pi;
    return e;
}

// First-order orthogonal distance (rho - 1) / |grad rho| with
// rho = |R^T (p - c) / (a, b)|; exact on circles.
double residual(const Ellipse& e, const Point2& p) {
    const double c = std::cos(e.theta), s = std::sin(e.theta);
    const double dx = p.x - e.cx, dy = p.y - e.cy;
    const double u = (c * dx + s * dy) / e.a, v = (-s * dx + c * dy) / e.b;
    const double rho = std::sqrt(u * u + v * v);
    if (rho < 1e-12) return -std::min(e.a, e.b);
    const double g = std::hypot(u / e.a, v / e.b) / rho;
    return (rho - 1) / g;
}

double cost(const Ellipse& e, std::span<const Point2> pts) {
    double s = 0;
    for (const auto& p : pts) s += std::pow(residual(e, p), 2);
    return s;
}

Ellipse with(const Ellipse& e, const Eigen::Matrix<double, 5, 1>& d) {
    Ellipse out = e;
    out.cx += d(0);
    out.cy += d(1);
    out.a += d(2);
    out.b += d(3);
    out.theta += d(4);
    return out;
}

void canonicalize(Ellipse& e) {
    if (e.b > e.a) {
        std::swap(e.a, e.b);
        e.theta += std::numbers::pi / 2;
    }
    e.theta = std::remainder(e.theta, std::numbers::pi);  // (-pi/2, pi/2]
    if (e.theta <= -std::numbers::pi / 2) e.theta += std::numbers::pi;
}

Ellipse refine(Ellipse e, std::span<const Point2> pts) {
    double lambda = 1e-3;
    double current = cost(e, pts);
    for (int iter = 0; iter < 100 && current > 0; ++iter) {
        Eigen::MatrixXd J(pts.size(), 5);
        Eigen::VectorXd r(pts.size());
        for (std::size_t i = 0; i < pts.size(); ++i) {
            r(i) = residual(e, pts[i]);
            for (int j = 0; j < 5; ++j) {
                Eigen::Matrix<double, 5, 1> d = Eigen::Matrix<double, 5, 1>::Zero();
                const double h = 1e-7 * (j < 4 ? std::max(1.0, std::abs(j == 0 ? e.cx : j == 1 ? e.cy : j == 2 ? e.a : e.b)) : 1.0);
                d(j) = h;
                const double rp = residual(with(e, d), pts[i]);
                d(j) = -h;
                const double rm = residual(with(e, d), pts[i]);
                J(i, j) = (rp - rm) / (2 * h);
            }
        }
        const Eigen::MatrixXd JtJ = J.transpose() * J;
        const Eigen::VectorXd g = J.transpose() * r;
        bool improved = false;
        while (lambda < 1e10) {
            Eigen::MatrixXd damped = JtJ;
            damped.diagonal() += lambda * JtJ.diagonal().cwiseMax(1e-12);
            const Eigen::Matrix<double, 5, 1> step = -damped.ldlt().solve(g);
            const Ellipse trial = with(e, step);
            if (trial.a > 0 && trial.b > 0) {
                const double c = cost(trial, pts);
                if (c < current) {
                    const double gain = current - c;
                    e = trial;
                    current = c;
                    lambda = std::max(lambda / 10, 1e-12);
                    improved = true;
                    if (gain < 1e-15 * (1 + current)) iter = 100;
                    break;
                }
            }
            lambda *= 10;
        }
        if (!improved) break;
    }
    return e;
}

}  // namespace

Ellipse fit_ellipse(std::span<const Point2> pts) {
    if (pts.size() < 6) throw Error("ellipse fit: insufficient points (" + std::to_string(pts.size()) + " < 6)");
    // normalize for conditioning
    double mx = 0, my = 0;
    for (const auto& p : pts) mx += p.x, my += p.y;
    mx /= static_cast<double>(pts.size());
    my /= static_cast<double>(pts.size());
    double scale = 0;
    for (const auto& p : pts) scale += std::hypot(p.x - mx, p.y - my);
    scale /= static_cast<double>(pts.size());
    if (!(scale > 0)) throw Error("ellipse fit: degenerate points");

    const auto n = static_cast<Eigen::Index>(pts.size());
    Eigen::MatrixXd D1(n, 3), D2(n, 3);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double x = (pts[i].x - mx) / scale, y = (pts[i].y - my) / scale;
        D1.row(i) << x * x, x * y, y * y;
        D2.row(i) << x, y, 1;
    }
    const Eigen::Matrix3d S1 = D1.transpose() * D1, S2 = D1.transpose() * D2, S3 = D2.transpose() * D2;
    Eigen::FullPivLU<Eigen::Matrix3d> s3(S3);
    if (!s3.isInvertible()) throw Error("ellipse fit: degenerate points (collinear)");
    const Eigen::Matrix3d T = -s3.inverse() * S2.transpose();
    const Eigen::Matrix3d M = S1 + S2 * T;
    Eigen::Matrix3d Mc;  // inverse of the constraint matrix applied to M
    Mc.row(0) = M.row(2) / 2;
    Mc.row(1) = -M.row(1);
    Mc.row(2) = M.row(0) / 2;
    Eigen::EigenSolver<Eigen::Matrix3d> es(Mc);
    int best = -1;
    double best_eval = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 3; ++i) {
        const Eigen::Vector3d v = es.eigenvectors().col(i).real();
        const double cond = 4 * v(0) * v(2) - v(1) * v(1);
        const double ev = es.eigenvalues()(i).real();
        if (cond > 0 && std::abs(es.eigenvalues()(i).imag()) < 1e-12 && ev < best_eval) {
            best = i;
            best_eval = ev;
        }
    }
    if (best < 0) throw Error("ellipse fit: no elliptical solution");
    const Eigen::Vector3d a1 = es.eigenvectors().col(best).real();
    const Eigen::Vector3d a2 = T * a1;
    Eigen::Matrix<double, 6, 1> conic;
    conic << a1, a2;
    Ellipse e = from_conic(conic);
    e.cx = e.cx * scale + mx;
    e.cy = e.cy * scale + my;
    e.a *= scale;
    e.b *= scale;

    e = refine(e, pts);
    canonicalize(e);
    e.rms_residual = std::sqrt(cost(e, pts) / static_cast<double>(pts.size()));
    return e;
}

bool inside(const Ellipse& e, double x, double y) {
    const double c = std::cos(e.theta), s = std::sin(e.theta);
    const double dx = x - e.cx, dy = y - e.cy;
    const double u = (c * dx + s * dy) / e.a, v = (-s * dx + c * dy) / e.b;
    return u * u + v * v <= 1;
}

IrResult iris_irregularity(const cv::Mat1b& mask) {
    if (mask.empty()) throw Error("iris_irregularity: empty mask");
    cv::Mat labels, stats, centroids;
    const int n = cv::connectedComponentsWithStats(mask > 0, labels, stats, centroids, 8, CV_32S);
    if (n <= 1) throw Error("iris_irregularity: mask has no foreground");
    IrResult out;
    int best = 1;
    for (int i = 2; i < n; ++i) {
        if (stats.at<int>(i, cv::CC_STAT_AREA) > stats.at<int>(best, cv::CC_STAT_AREA)) best = i;
    }
    if (n > 2) out.warnings.push_back("mask has " + std::to_string(n - 1) + " components; using the largest");

    // crack edges: midpoints of pixel sides between the region and the outside
    std::vector<Point2> boundary;
    auto in_region = [&](int r, int c) {
        return r >= 0 && c >= 0 && r < labels.rows && c < labels.cols && labels.at<int>(r, c) == best;
    };
    std::size_t area = 0;
    for (int r = 0; r < labels.rows; ++r) {
        for (int c = 0; c < labels.cols; ++c) {
            if (!in_region(r, c)) continue;
            ++area;
            if (!in_region(r - 1, c)) boundary.push_back({double(c), r - 0.5});
            if (!in_region(r + 1, c)) boundary.push_back({double(c), r + 0.5});
            if (!in_region(r, c - 1)) boundary.push_back({c - 0.5, double(r)});
            if (!in_region(r, c + 1)) boundary.push_back({c + 0.5, double(r)});
        }
    }
    if (area < 2) throw Error("iris_irregularity: region too small to fit an ellipse");
    out.ellipse = fit_ellipse(boundary);

    std::size_t inter = 0, uni = 0;
    // rasterize over the mask frame; an ellipse leaking past the frame is clipped
    for (int r = 0; r < labels.rows; ++r) {
        for (int c = 0; c < labels.cols; ++c) {
            const bool a = labels.at<int>(r, c) == best;
            const bool b = inside(out.ellipse, c, r);
            inter += a && b;
            uni += a || b;
        }
    }
    out.ir = static_cast<double>(inter) / static_cast<double>(uni);
    return out;
}

double gaze_consistency(const Point2& cm, const Point2& c1, const Point2& c2) {
    const double vx = c2.x - c1.x, vy = c2.y - c1.y;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((cm.x - c1.x) * vx + (cm.y - c1.y) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double d = std::hypot(cm.x - (c1.x + t * vx), cm.y - (c1.y + t * vy));
    return std::max(0.0, 1 - d / (std::sqrt(len2) / 2 + 1));
}

double gaze_consistency(const LandmarkSet& morph, const LandmarkSet& l1, const LandmarkSet& l2) {
    const auto k = layout::kIrisCenter;
    for (const auto* l : {&morph, &l1, &l2}) {
        if (!std::isfinite((*l)[k].x) || !std::isfinite((*l)[k].y)) throw Error("gaze: missing iris center landmark");
    }
    return gaze_consistency(morph[k], l1[k], l2[k]);
}

double time_inference(const std::function<void()>& run, int n_runs) {
    if (n_runs < 1) throw Error("time_inference: n_runs must be >= 1");
    for (int i = 0; i < 3; ++i) run();
    std::vector<double> ms;
    for (int i = 0; i < n_runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    const auto m = ms.size();
    return m % 2 ? ms[m / 2] : 0.5 * (ms[m / 2 - 1] + ms[m / 2]);
}

}  // namespace ocumorph::metrics
