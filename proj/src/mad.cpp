#include "ocumorph/mad.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include "csv.hpp"

namespace ocumorph::mad {

using json = nlohmann::json;

cv::Mat1d to_gray(const io::OcularImage& image) {
    if (image.pixels.empty() || image.pixels.channels() != 3) throw Error("to_gray: expected a 3-channel image");
    cv::Mat3d rgb;
    if (image.range == io::ValueRange::raw_0_255) {
        image.pixels.convertTo(rgb, CV_64FC3, 1.0 / 255.0);
    } else {
        image.pixels.convertTo(rgb, CV_64FC3, 0.5, 0.5);
    }
    cv::Mat1d gray(rgb.rows, rgb.cols);
    for (int r = 0; r < rgb.rows; ++r) {
        for (int c = 0; c < rgb.cols; ++c) {
            const auto& p = rgb(r, c);
            gray(r, c) = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
    }
    return gray;
}

namespace {

std::vector<double> normalized(std::vector<double> hist) {
    const double total = std::accumulate(hist.begin(), hist.end(), 0.0);
    if (total > 0) {
        for (auto& v : hist) v /= total;
    }
    return hist;
}

void check_gray(const cv::Mat1d& gray, int min_side, const char* what) {
    if (gray.rows < min_side || gray.cols < min_side) {
        throw Error(std::string(what) + ": image smaller than " + std::to_string(min_side) + " pixels");
    }
}

}  // namespace

// ---- LPQ ---------------------------------------------------------------------

namespace {

using cplx = std::complex<double>;

// 8 x window^2 real kernels such that coefficient j = sum(kernel_j * patch),
// patch in row-major order; the same quantities lpq_features computes separably.
Eigen::MatrixXd lpq_kernels(int window) {
    const int r = (window - 1) / 2;
    const double a = 1.0 / window;
    Eigen::MatrixXd m(8, window * window);
    for (int i = 0; i < window; ++i) {
        for (int j = 0; j < window; ++j) {
            const double y = i - r, x = j - r;
            const double phases[4] = {a * x, a * y, a * (x + y), a * (y - x)};
            for (int k = 0; k < 4; ++k) {
                const cplx w = std::polar(1.0, -2 * std::numbers::pi * phases[k]);
                m(2 * k, i * window + j) = w.real();
                m(2 * k + 1, i * window + j) = w.imag();
            }
        }
    }
    return m;
}

Eigen::Matrix<double, 8, 8> lpq_whitening(int window) {
    const double rho = 0.9;
    const int n = window * window;
    Eigen::MatrixXd c(n, n);
    for (int p = 0; p < n; ++p) {
        for (int q = 0; q < n; ++q) {
            const double d = std::hypot(p / window - q / window, p % window - q % window);
            c(p, q) = std::pow(rho, d);
        }
    }
    const Eigen::MatrixXd m = lpq_kernels(window);
    Eigen::Matrix<double, 8, 8> d = m * c * m.transpose();
    // break ties between equal singular values so the basis is well defined
    Eigen::Matrix<double, 8, 1> a;
    a << 1.000007, 1.000006, 1.000005, 1.000004, 1.000003, 1.000002, 1.000001, 1.0;
    d = a.asDiagonal() * d * a.asDiagonal();
    Eigen::JacobiSVD<Eigen::Matrix<double, 8, 8>> svd(d, Eigen::ComputeFullV);
    return svd.matrixV().transpose();
}

}  // namespace

std::vector<double> lpq_features(const cv::Mat1d& gray, int window, bool decorrelate) {
    if (window < 3 || window % 2 == 0) throw Error("lpq: window must be odd and >= 3");
    check_gray(gray, window, "lpq");
    const int r = (window - 1) / 2;
    const double a = 1.0 / window;
    std::vector<cplx> w1(window);
    for (int k = 0; k < window; ++k) w1[k] = std::polar(1.0, -2 * std::numbers::pi * a * (k - r));

    const int oh = gray.rows - window + 1, ow = gray.cols - window + 1;
    // vertical pass: plain sum (h0) and frequency a along y (h1)
    cv::Mat1d h0(oh, gray.cols);
    std::vector<cplx> h1(static_cast<std::size_t>(oh) * gray.cols);
    for (int i = 0; i < oh; ++i) {
        for (int c = 0; c < gray.cols; ++c) {
            double s0 = 0;
            cplx s1 = 0;
            for (int k = 0; k < window; ++k) {
                const double v = gray(i + k, c);
                s0 += v;
                s1 += v * w1[k];
            }
            h0(i, c) = s0;
            h1[static_cast<std::size_t>(i) * gray.cols + c] = s1;
        }
    }

    const Eigen::Matrix<double, 8, 8> v = decorrelate ? lpq_whitening(window) : Eigen::Matrix<double, 8, 8>::Identity();
    std::vector<double> hist(256, 0.0);
    for (int i = 0; i < oh; ++i) {
        const cplx* row1 = &h1[static_cast<std::size_t>(i) * gray.cols];
        for (int j = 0; j < ow; ++j) {
            cplx f1 = 0, f2 = 0, f3 = 0, f4 = 0;
            for (int k = 0; k < window; ++k) {
                f1 += h0(i, j + k) * w1[k];          // (a, 0)
                f2 += row1[j + k];                   // (0, a)
                f3 += row1[j + k] * w1[k];           // (a, a)
                f4 += row1[j + k] * std::conj(w1[k]);  // (-a, a)
            }
            Eigen::Matrix<double, 8, 1> coeff;
            coeff << f1.real(), f1.imag(), f2.real(), f2.imag(), f3.real(), f3.imag(), f4.real(), f4.imag();
            if (decorrelate) coeff = v * coeff;
            int code = 0;
            for (int b = 0; b < 8; ++b) code |= (coeff(b) > 0 ? 1 : 0) << b;
            hist[code] += 1;
        }
    }
    return normalized(std::move(hist));
}

// ---- BSIF --------------------------------------------------------------------

FilterBank default_bsif_bank(int n_filters, std::uint64_t seed) {
    if (n_filters < 1 || n_filters > 12) throw Error("bsif: 1 to 12 filters");
    FilterBank bank;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int f = 0; f < n_filters; ++f) {
        cv::Mat1d k(bank.size, bank.size);
        for (auto& v : k) v = n(rng);
        k -= cv::mean(k)[0];
        k /= cv::norm(k);
        bank.filters.push_back(k);
    }
    return bank;
}

std::vector<double> bsif_features(const cv::Mat1d& gray, const FilterBank& bank) {
    const auto nf = bank.filters.size();
    if (nf == 0 || nf > 12) throw Error("bsif: 1 to 12 filters required");
    for (const auto& f : bank.filters) {
        if (f.rows != bank.size || f.cols != bank.size) throw Error("bsif: filter size mismatch");
    }
    check_gray(gray, bank.size, "bsif");
    const int s = bank.size;
    const int oh = gray.rows - s + 1, ow = gray.cols - s + 1;
    std::vector<int> codes(static_cast<std::size_t>(oh) * ow, 0);
    for (std::size_t f = 0; f < nf; ++f) {
        const auto& k = bank.filters[f];
        for (int i = 0; i < oh; ++i) {
            for (int j = 0; j < ow; ++j) {
                double acc = 0;
                for (int p = 0; p < s; ++p) {
                    const double* g = gray[i + p] + j;
                    const double* kr = k[p];
                    for (int q = 0; q < s; ++q) acc += g[q] * kr[q];
                }
                if (acc > 0) codes[static_cast<std::size_t>(i) * ow + j] |= 1 << f;
            }
        }
    }
    std::vector<double> hist(std::size_t{1} << nf, 0.0);
    for (int c : codes) hist[c] += 1;
    return normalized(std::move(hist));
}

// ---- HOG ---------------------------------------------------------------------

std::size_t hog_length(int height, int width, const HogOptions& o) {
    const int cy = height / o.cell, cx = width / o.cell;
    if (cy < o.block || cx < o.block) return 0;
    return static_cast<std::size_t>(cy - o.block + 1) * (cx - o.block + 1) * o.block * o.block * o.bins;
}

std::vector<double> hog_features(const cv::Mat1d& gray, const HogOptions& o) {
    if (o.cell < 1 || o.block < 1 || o.bins < 2) throw Error("hog: invalid options");
    if (hog_length(gray.rows, gray.cols, o) == 0) throw Error("hog: image smaller than one block");
    const int cy = gray.rows / o.cell, cx = gray.cols / o.cell;
    std::vector<double> cells(static_cast<std::size_t>(cy) * cx * o.bins, 0.0);
    const double bin_width = 180.0 / o.bins;
    const auto at = [&](int r, int c) {
        return gray(std::clamp(r, 0, gray.rows - 1), std::clamp(c, 0, gray.cols - 1));
    };
    for (int r = 0; r < cy * o.cell; ++r) {
        for (int c = 0; c < cx * o.cell; ++c) {
            const double gx = at(r, c + 1) - at(r, c - 1);
            const double gy = at(r + 1, c) - at(r - 1, c);
            const double mag = std::hypot(gx, gy);
            if (mag == 0) continue;
            double theta = std::atan2(gy, gx) * 180.0 / std::numbers::pi;
            if (theta < 0) theta += 180;
            if (theta >= 180) theta -= 180;
            const double pos = theta / bin_width;
            const int lo = static_cast<int>(std::floor(pos)) % o.bins;
            const int hi = (lo + 1) % o.bins;
            const double frac = pos - std::floor(pos);
            double* h = &cells[(static_cast<std::size_t>(r / o.cell) * cx + c / o.cell) * o.bins];
            h[lo] += mag * (1 - frac);
            h[hi] += mag * frac;
        }
    }
    const double eps2 = 1e-6;
    std::vector<double> out;
    out.reserve(hog_length(gray.rows, gray.cols, o));
    for (int by = 0; by + o.block <= cy; ++by) {
        for (int bx = 0; bx + o.block <= cx; ++bx) {
            const auto start = out.size();
            for (int i = 0; i < o.block; ++i) {
                for (int j = 0; j < o.block; ++j) {
                    const double* h = &cells[(static_cast<std::size_t>(by + i) * cx + bx + j) * o.bins];
                    out.insert(out.end(), h, h + o.bins);
                }
            }
            double sq = 0;
            for (auto k = start; k < out.size(); ++k) sq += out[k] * out[k];
            const double norm = std::sqrt(sq + eps2);
            for (auto k = start; k < out.size(); ++k) out[k] /= norm;
        }
    }
    return out;
}

Descriptor parse_descriptor(const std::string& name) {
    if (name == "lpq") return Descriptor::lpq;
    if (name == "bsif") return Descriptor::bsif;
    if (name == "hog") return Descriptor::hog;
    throw ConfigError("unknown descriptor '" + name + "' (lpq, bsif, hog)");
}

std::string to_string(Descriptor d) {
    switch (d) {
        case Descriptor::lpq: return "lpq";
        case Descriptor::bsif: return "bsif";
        case Descriptor::hog: return "hog";
    }
    return "?";
}

std::vector<double> describe(Descriptor d, const cv::Mat1d& gray) {
    switch (d) {
        case Descriptor::lpq: return lpq_features(gray);
        case Descriptor::bsif: {
            static const FilterBank bank = default_bsif_bank();
            return bsif_features(gray, bank);
        }
        case Descriptor::hog: return hog_features(gray);
    }
    throw Error("unknown descriptor");
}

// ---- classifiers -------------------------------------------------------------

DetectorKind parse_detector_kind(const std::string& name) {
    if (name == "linear_margin" || name == "svm") return DetectorKind::linear_margin;
    if (name == "tree_ensemble" || name == "rf") return DetectorKind::tree_ensemble;
    if (name == "deep" || name == "cnn") return DetectorKind::deep;
    throw ConfigError("unknown detector kind '" + name + "' (linear_margin, tree_ensemble, deep)");
}

std::string to_string(DetectorKind k) {
    switch (k) {
        case DetectorKind::linear_margin: return "linear_margin";
        case DetectorKind::tree_ensemble: return "tree_ensemble";
        case DetectorKind::deep: return "deep";
    }
    return "?";
}

namespace {

constexpr const char* kDetectorFormat = "ocumorph.mad_detector";

void check_training_set(const std::vector<std::vector<double>>& x, const std::vector<Label>& y) {
    if (x.empty()) throw Error("detector training: no samples");
    if (x.size() != y.size()) throw Error("detector training: feature and label counts differ");
    const auto d = x[0].size();
    if (d == 0) throw Error("detector training: empty feature vectors");
    for (const auto& row : x) {
        if (row.size() != d) throw Error("detector training: ragged feature vectors");
        for (double v : row) {
            if (!std::isfinite(v)) throw Error("detector training: non-finite feature");
        }
    }
    const auto morphs = std::count(y.begin(), y.end(), Label::morph);
    if (morphs == 0 || morphs == static_cast<long>(y.size())) {
        throw Error("detector training: both bona fide and morph samples are required");
    }
}

void check_dim(std::span<const double> f, std::size_t d) {
    if (f.size() != d) {
        throw Error("detector: expected " + std::to_string(d) + " features, got " + std::to_string(f.size()));
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump();
    if (!out) throw Error("cannot write " + path.string());
}

// L1-loss linear SVM in the dual, bias folded in as a constant feature.
class LinearMargin : public FeatureDetector {
public:
    LinearMargin() = default;
    LinearMargin(std::vector<double> mean, std::vector<double> scale, std::vector<double> w, double bias)
        : mean_(std::move(mean)), scale_(std::move(scale)), w_(std::move(w)), bias_(bias) {}

    static std::unique_ptr<LinearMargin> fit(const std::vector<std::vector<double>>& x, const std::vector<Label>& y,
                                             const DetectorOptions& o) {
        const auto n = x.size(), d = x[0].size();
        auto m = std::make_unique<LinearMargin>();
        m->mean_.assign(d, 0.0);
        m->scale_.assign(d, 1.0);
        for (const auto& row : x) {
            for (std::size_t k = 0; k < d; ++k) m->mean_[k] += row[k] / n;
        }
        for (std::size_t k = 0; k < d; ++k) {
            double var = 0;
            for (const auto& row : x) var += std::pow(row[k] - m->mean_[k], 2) / n;
            m->scale_[k] = var > 1e-24 ? 1 / std::sqrt(var) : 1.0;
        }
        std::vector<std::vector<double>> z(n, std::vector<double>(d + 1, 1.0));
        std::vector<double> yy(n), q(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < d; ++k) z[i][k] = (x[i][k] - m->mean_[k]) * m->scale_[k];
            yy[i] = y[i] == Label::morph ? 1.0 : -1.0;
            for (double v : z[i]) q[i] += v * v;
        }
        std::vector<double> w(d + 1, 0.0), alpha(n, 0.0);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(o.seed);
        for (int epoch = 0; epoch < o.max_epochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), rng);
            double pg_max = -std::numeric_limits<double>::infinity(), pg_min = std::numeric_limits<double>::infinity();
            for (auto i : order) {
                double g = 0;
                for (std::size_t k = 0; k <= d; ++k) g += w[k] * z[i][k];
                g = yy[i] * g - 1;
                double pg = g;
                if (alpha[i] == 0) pg = std::min(g, 0.0);
                else if (alpha[i] == o.c) pg = std::max(g, 0.0);
                pg_max = std::max(pg_max, pg);
                pg_min = std::min(pg_min, pg);
                if (std::abs(pg) > 1e-12) {
                    const double old = alpha[i];
                    alpha[i] = std::clamp(old - g / q[i], 0.0, o.c);
                    const double delta = (alpha[i] - old) * yy[i];
                    for (std::size_t k = 0; k <= d; ++k) w[k] += delta * z[i][k];
                }
            }
            if (pg_max - pg_min < o.tolerance) break;
        }
        m->bias_ = w[d];
        w.pop_back();
        m->w_ = std::move(w);
        return m;
    }

    DetectorKind kind() const override { return DetectorKind::linear_margin; }

    double score(std::span<const double> f) const override {
        check_dim(f, w_.size());
        double s = bias_;
        for (std::size_t k = 0; k < w_.size(); ++k) s += w_[k] * (f[k] - mean_[k]) * scale_[k];
        return s;
    }

    void save(const fs::path& path) const override {
        write_json(path, {{"format", kDetectorFormat},
                          {"kind", to_string(kind())},
                          {"mean", mean_},
                          {"scale", scale_},
                          {"w", w_},
                          {"bias", bias_}});
    }

    static std::unique_ptr<LinearMargin> from_json(const json& j) {
        auto m = std::make_unique<LinearMargin>(j.at("mean").get<std::vector<double>>(),
                                                j.at("scale").get<std::vector<double>>(),
                                                j.at("w").get<std::vector<double>>(), j.at("bias").get<double>());
        if (m->mean_.size() != m->w_.size() || m->scale_.size() != m->w_.size()) throw FormatError("size mismatch");
        return m;
    }

private:
    std::vector<double> mean_, scale_, w_;
    double bias_ = 0;
};

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0;
    int left = -1, right = -1;
    double value = 0;  // fraction of morphs reaching the node
};

// Bagged CART trees with Gini splits and sqrt(d) candidate features per node.
class TreeEnsemble : public FeatureDetector {
public:
    static std::unique_ptr<TreeEnsemble> fit(const std::vector<std::vector<double>>& x, const std::vector<Label>& y,
                                             const DetectorOptions& o) {
        if (o.n_trees < 1 || o.max_depth < 1 || o.min_leaf < 1) throw ConfigError("tree ensemble: invalid options");
        auto m = std::make_unique<TreeEnsemble>();
        m->dim_ = x[0].size();
        std::mt19937_64 rng(o.seed);
        const auto n = x.size();
        for (int t = 0; t < o.n_trees; ++t) {
            std::vector<std::size_t> idx(n);
            std::uniform_int_distribution<std::size_t> pick(0, n - 1);
            for (auto& i : idx) i = pick(rng);
            std::vector<TreeNode> tree;
            grow(tree, x, y, idx, 0, o, rng);
            m->trees_.push_back(std::move(tree));
        }
        return m;
    }

    DetectorKind kind() const override { return DetectorKind::tree_ensemble; }

    double score(std::span<const double> f) const override {
        check_dim(f, dim_);
        double s = 0;
        for (const auto& tree : trees_) {
            int node = 0;
            while (tree[node].feature >= 0) {
                node = f[tree[node].feature] <= tree[node].threshold ? tree[node].left : tree[node].right;
            }
            s += tree[node].value;
        }
        return s / trees_.size();
    }

    void save(const fs::path& path) const override {
        json trees = json::array();
        for (const auto& tree : trees_) {
            json nodes = json::array();
            for (const auto& n : tree) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.value});
            trees.push_back(nodes);
        }
        write_json(path, {{"format", kDetectorFormat}, {"kind", to_string(kind())}, {"dim", dim_}, {"trees", trees}});
    }

    static std::unique_ptr<TreeEnsemble> from_json(const json& j) {
        auto m = std::make_unique<TreeEnsemble>();
        m->dim_ = j.at("dim").get<std::size_t>();
        for (const auto& t : j.at("trees")) {
            std::vector<TreeNode> tree;
            for (const auto& n : t) tree.push_back({n.at(0), n.at(1), n.at(2), n.at(3), n.at(4)});
            const int size = static_cast<int>(tree.size());
            for (const auto& n : tree) {
                if (n.feature >= static_cast<int>(m->dim_) ||
                    (n.feature >= 0 && (n.left <= 0 || n.left >= size || n.right <= 0 || n.right >= size))) {
                    throw FormatError("invalid tree node");
                }
            }
            if (tree.empty()) throw FormatError("empty tree");
            m->trees_.push_back(std::move(tree));
        }
        if (m->trees_.empty()) throw FormatError("no trees");
        return m;
    }

private:
    static int grow(std::vector<TreeNode>& tree, const std::vector<std::vector<double>>& x, const std::vector<Label>& y,
                    std::vector<std::size_t>& idx, int depth, const DetectorOptions& o, std::mt19937_64& rng) {
        const int id = static_cast<int>(tree.size());
        tree.emplace_back();
        const auto n = idx.size();
        std::size_t pos = 0;
        for (auto i : idx) pos += y[i] == Label::morph;
        tree[id].value = static_cast<double>(pos) / n;
        if (pos == 0 || pos == n || depth >= o.max_depth || n < 2 * static_cast<std::size_t>(o.min_leaf)) return id;

        const auto d = x[0].size();
        const auto mtry = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(d))));
        std::vector<std::size_t> features(d);
        std::iota(features.begin(), features.end(), std::size_t{0});
        // partial Fisher-Yates: the first mtry entries are the candidates
        for (std::size_t k = 0; k < mtry; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, d - 1);
            std::swap(features[k], features[pick(rng)]);
        }

        double best_gain = 1e-12;
        int best_feature = -1;
        double best_threshold = 0;
        const double parent = gini(pos, n);
        std::vector<std::pair<double, int>> vals(n);
        for (std::size_t k = 0; k < mtry; ++k) {
            const auto f = features[k];
            for (std::size_t s = 0; s < n; ++s) vals[s] = {x[idx[s]][f], y[idx[s]] == Label::morph};
            std::sort(vals.begin(), vals.end());
            std::size_t left_pos = 0;
            for (std::size_t s = 1; s < n; ++s) {
                left_pos += vals[s - 1].second;
                if (vals[s].first == vals[s - 1].first) continue;
                if (s < static_cast<std::size_t>(o.min_leaf) || n - s < static_cast<std::size_t>(o.min_leaf)) continue;
                const double child = (s * gini(left_pos, s) + (n - s) * gini(pos - left_pos, n - s)) / n;
                if (parent - child > best_gain) {
                    best_gain = parent - child;
                    best_feature = static_cast<int>(f);
                    best_threshold = 0.5 * (vals[s - 1].first + vals[s].first);
                    // midpoint can round onto the upper value; keep the split strict
                    if (!(best_threshold < vals[s].first)) best_threshold = vals[s - 1].first;
                }
            }
        }
        if (best_feature < 0) return id;

        std::vector<std::size_t> left, right;
        for (auto i : idx) (x[i][best_feature] <= best_threshold ? left : right).push_back(i);
        tree[id].feature = best_feature;
        tree[id].threshold = best_threshold;
        const int l = grow(tree, x, y, left, depth + 1, o, rng);
        const int r = grow(tree, x, y, right, depth + 1, o, rng);
        tree[id].left = l;
        tree[id].right = r;
        return id;
    }

    static double gini(std::size_t pos, std::size_t n) {
        const double p = static_cast<double>(pos) / n;
        return 2 * p * (1 - p);
    }

    std::size_t dim_ = 0;
    std::vector<std::vector<TreeNode>> trees_;
};

}  // namespace

std::unique_ptr<FeatureDetector> train_detector(const std::vector<std::vector<double>>& features,
                                                const std::vector<Label>& labels, DetectorKind kind,
                                                const DetectorOptions& options) {
    check_training_set(features, labels);
    switch (kind) {
        case DetectorKind::linear_margin: return LinearMargin::fit(features, labels, options);
        case DetectorKind::tree_ensemble: return TreeEnsemble::fit(features, labels, options);
        case DetectorKind::deep: break;
    }
    throw Error("the deep detector trains on images; use CnnDetector");
}

std::unique_ptr<FeatureDetector> load_detector(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open detector " + path.string());
    try {
        const auto j = json::parse(in);
        if (j.at("format") != kDetectorFormat) throw FormatError("not a detector file");
        const auto kind = parse_detector_kind(j.at("kind").get<std::string>());
        if (kind == DetectorKind::linear_margin) return LinearMargin::from_json(j);
        if (kind == DetectorKind::tree_ensemble) return TreeEnsemble::from_json(j);
        throw FormatError("unsupported detector kind");
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const Error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---- deep slot ---------------------------------------------------------------

namespace {

torch::nn::Sequential make_cnn() {
    namespace nn = torch::nn;
    return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(1, 8, 3).padding(1)), nn::ReLU(), nn::MaxPool2d(2),
                          nn::Conv2d(nn::Conv2dOptions(8, 16, 3).padding(1)), nn::ReLU(), nn::MaxPool2d(2),
                          nn::Conv2d(nn::Conv2dOptions(16, 32, 3).padding(1)), nn::ReLU(),
                          nn::AdaptiveAvgPool2d(1), nn::Flatten(), nn::Linear(32, 1));
}

}  // namespace

CnnDetector::CnnDetector(int image_size) : image_size_(image_size), net_(make_cnn()) {
    if (image_size < 8) throw ConfigError("deep detector: image_size must be >= 8");
    net_->to(torch::kFloat64);
}

torch::Tensor CnnDetector::batch(std::span<const io::OcularImage> images) const {
    std::vector<torch::Tensor> out;
    for (const auto& image : images) {
        cv::Mat1d g;
        cv::resize(to_gray(image), g, {image_size_, image_size_}, 0, 0, cv::INTER_AREA);
        out.push_back(torch::from_blob(g.ptr<double>(), {1, image_size_, image_size_}, torch::kFloat64).clone() * 2 - 1);
    }
    return torch::stack(out);
}

void CnnDetector::train(const std::vector<io::OcularImage>& images, const std::vector<Label>& labels,
                        const DetectorOptions& o) {
    if (images.size() != labels.size() || images.empty()) throw Error("deep detector: image and label counts differ");
    const auto morphs = std::count(labels.begin(), labels.end(), Label::morph);
    if (morphs == 0 || morphs == static_cast<long>(labels.size())) {
        throw Error("detector training: both bona fide and morph samples are required");
    }
    torch::manual_seed(o.seed);
    net_ = make_cnn();
    net_->to(torch::kFloat64);
    const auto x = batch(images);
    std::vector<double> yv;
    for (auto l : labels) yv.push_back(l == Label::morph ? 1.0 : 0.0);
    const auto y = torch::tensor(yv, torch::kFloat64);
    torch::optim::Adam opt(net_->parameters(), torch::optim::AdamOptions(o.deep_lr));
    std::mt19937_64 rng(o.seed);
    std::vector<std::int64_t> order(images.size());
    std::iota(order.begin(), order.end(), std::int64_t{0});
    const std::size_t bs = 32;
    net_->train();
    for (int epoch = 0; epoch < o.deep_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < order.size(); s += bs) {
            const auto e = std::min(order.size(), s + bs);
            const auto ids = torch::tensor(std::vector<std::int64_t>(order.begin() + s, order.begin() + e));
            opt.zero_grad();
            const auto logits = net_->forward(x.index_select(0, ids)).squeeze(1);
            const auto loss = torch::binary_cross_entropy_with_logits(logits, y.index_select(0, ids));
            if (!std::isfinite(loss.item<double>())) throw Error("deep detector: non-finite loss");
            loss.backward();
            opt.step();
        }
    }
    net_->eval();
}

double CnnDetector::score(const io::OcularImage& image) {
    torch::NoGradGuard ng;
    net_->eval();
    return net_->forward(batch({&image, 1})).item<double>();
}

void CnnDetector::save(const fs::path& path) const {
    torch::serialize::OutputArchive archive;
    archive.write("format", c10::IValue(std::string(kDetectorFormat)));
    archive.write("image_size", c10::IValue(static_cast<std::int64_t>(image_size_)));
    torch::serialize::OutputArchive sub;
    net_->save(sub);
    archive.write("net", sub);
    archive.save_to(path.string());
}

std::unique_ptr<CnnDetector> CnnDetector::load(const fs::path& path) {
    if (!fs::exists(path)) throw LoadError("cannot open detector " + path.string());
    try {
        torch::serialize::InputArchive archive;
        archive.load_from(path.string());
        c10::IValue v;
        archive.read("format", v);
        if (!v.isString() || v.toStringRef() != kDetectorFormat) throw FormatError("not a detector file");
        archive.read("image_size", v);
        auto d = std::make_unique<CnnDetector>(static_cast<int>(v.toInt()));
        torch::serialize::InputArchive sub;
        archive.read("net", sub);
        d->net_->load(sub);
        d->net_->eval();
        return d;
    } catch (const c10::Error& e) {
        throw FormatError(path.string() + ": " + e.what_without_backtrace());
    }
}

// ---- error rates -------------------------------------------------------------

void MadScoreSet::validate() const {
    bool bona = false, morph = false;
    for (const auto& r : records) {
        if (!std::isfinite(r.score)) throw Error("score for '" + r.sample_id + "' is not finite");
        (r.label == Label::morph ? morph : bona) = true;
    }
    if (!bona || !morph) throw Error("error rates need both bona fide and morph scores");
}

namespace {

struct Sorted {
    std::vector<double> bona, morph;
};

Sorted split_sorted(const MadScoreSet& s) {
    s.validate();
    Sorted out;
    for (const auto& r : s.records) (r.label == Label::morph ? out.morph : out.bona).push_back(r.score);
    std::sort(out.bona.begin(), out.bona.end());
    std::sort(out.morph.begin(), out.morph.end());
    return out;
}

ErrorRates rates_at(const Sorted& s, double t) {
    const auto below_morph = std::lower_bound(s.morph.begin(), s.morph.end(), t) - s.morph.begin();
    const auto below_bona = std::lower_bound(s.bona.begin(), s.bona.end(), t) - s.bona.begin();
    return {static_cast<double>(below_morph) / s.morph.size(),
            static_cast<double>(s.bona.size() - below_bona) / s.bona.size()};
}

}  // namespace

ErrorRates apcer_bpcer(const MadScoreSet& scores, double threshold) {
    return rates_at(split_sorted(scores), threshold);
}

std::vector<ThresholdRow> threshold_table(const MadScoreSet& scores) {
    const auto s = split_sorted(scores);
    std::vector<double> t;
    t.insert(t.end(), s.bona.begin(), s.bona.end());
    t.insert(t.end(), s.morph.begin(), s.morph.end());
    std::sort(t.begin(), t.end());
    t.erase(std::unique(t.begin(), t.end()), t.end());
    t.push_back(std::nextafter(t.back(), std::numeric_limits<double>::infinity()));
    std::vector<ThresholdRow> rows;
    for (double v : t) rows.push_back({v, rates_at(s, v)});
    return rows;
}

double d_eer(const MadScoreSet& scores) {
    const auto rows = threshold_table(scores);
    // APCER - BPCER runs from -1 at the lowest threshold to +1 above the maximum
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double diff = rows[i].rates.apcer - rows[i].rates.bpcer;
        if (diff == 0) return rows[i].rates.apcer;
        if (diff > 0) {
            const auto& p = rows[i - 1].rates;
            const auto& q = rows[i].rates;
            const double dp = p.apcer - p.bpcer;
            const double s = -dp / (diff - dp);
            return p.apcer + s * (q.apcer - p.apcer);
        }
    }
    throw Error("d_eer: no crossing");  // unreachable for a validated set
}

OperatingPoint bpcer_at_apcer(const MadScoreSet& scores, double target) {
    if (!(target >= 0 && target <= 1)) throw Error("target APCER must be in [0, 1]");
    OperatingPoint best;
    bool found = false;
    for (const auto& row : threshold_table(scores)) {
        if (row.rates.apcer <= target && (!found || row.rates.bpcer < best.rates.bpcer)) {
            best = {row.threshold, row.rates};
            found = true;
        }
    }
    return best;
}

MadScoreSet read_mad_scores(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open score file " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty score file");
    const auto header = csv::split(line);
    const auto column = [&](const std::string& name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw FormatError(path.string() + ": missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto cid = column("sample_id"), clabel = column("label"), cscore = column("score");
    MadScoreSet out;
    int number = 1;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = csv::split(line);
        const auto where = path.string() + ":" + std::to_string(number);
        if (cells.size() <= std::max({cid, clabel, cscore})) throw FormatError(where + ": too few columns");
        ScoreRecord r;
        r.sample_id = cells[cid];
        if (cells[clabel] == "morph") r.label = Label::morph;
        else if (cells[clabel] == "bonafide") r.label = Label::bonafide;
        else throw FormatError(where + ": label must be bonafide or morph");
        r.score = csv::to_double(cells[cscore], where);
        out.records.push_back(r);
    }
    return out;
}

void write_mad_scores(const fs::path& path, const MadScoreSet& scores) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "sample_id,label,score\n" << std::setprecision(17);
    for (const auto& r : scores.records) {
        out << r.sample_id << ',' << (r.label == Label::morph ? "morph" : "bonafide") << ',' << r.score << '\n';
    }
}

}  // namespace ocumorph::mad
