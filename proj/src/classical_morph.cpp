#include "ocumorph/classical_morph.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <utility>

#include <Eigen/Core>
#include <opencv2/imgproc.hpp>

namespace ocumorph::morph {

namespace {

constexpr double kMergeRadius = 0.5;

double orient(const Point2& a, const Point2& b, const Point2& c) {
    return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

// > 0 when d lies strictly inside the circumcircle of the ccw triangle abc.
double incircle(const Point2& a, const Point2& b, const Point2& c, const Point2& d) {
    const double adx = a.x - d.x, ady = a.y - d.y;
    const double bdx = b.x - d.x, bdy = b.y - d.y;
    const double cdx = c.x - d.x, cdy = c.y - d.y;
    const double ad = adx * adx + ady * ady;
    const double bd = bdx * bdx + bdy * bdy;
    const double cd = cdx * cdx + cdy * cdy;
    return adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx);
}

struct Tolerances {
    double orient;
    double incircle;
};

Tolerances tolerances(std::span<const Point2> pts) {
    double extent = 1.0;
    for (const auto& p : pts) extent = std::max({extent, std::abs(p.x), std::abs(p.y)});
    const double e2 = extent * extent;
    return {1e-12 * e2, 1e-12 * e2 * e2};
}

using Edge = std::pair<int, int>;

// Lawson flips until every interior edge is locally Delaunay. Ties are left
// alone, so the result depends only on the initial triangulation.
void make_delaunay(const std::vector<Point2>& v, std::vector<Triangle>& tris, double eps) {
    bool changed = true;
    std::size_t guard = 0;
    while (changed && guard++ < 10000) {
        changed = false;
        std::map<Edge, std::pair<int, int>> owner;  // directed edge -> (triangle, opposite vertex)
        for (int t = 0; t < static_cast<int>(tris.size()); ++t) {
            for (int k = 0; k < 3; ++k) {
                owner[{tris[t][k], tris[t][(k + 1) % 3]}] = {t, tris[t][(k + 2) % 3]};
            }
        }
        for (const auto& [edge, tv] : owner) {
            const auto twin = owner.find({edge.second, edge.first});
            if (twin == owner.end()) continue;
            const auto [t1, c] = tv;
            const auto [t2, d] = twin->second;
            const int a = edge.first, b = edge.second;
            if (incircle(v[a], v[b], v[c], v[d]) > eps) {
                // a-b is illegal; replace with c-d. Both new triangles stay ccw.
                tris[t1] = {a, d, c};
                tris[t2] = {d, b, c};
                changed = true;
                break;
            }
        }
    }
}

}  // namespace

TriangleMesh delaunay(std::span<const Point2> points) {
    TriangleMesh mesh;
    for (std::size_t i = 0; i < points.size(); ++i) {
        const Point2& p = points[i];
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw Error("triangulation: non-finite point");
        bool merged = false;
        for (std::size_t j = 0; j < mesh.vertices.size(); ++j) {
            if (std::hypot(p.x - mesh.vertices[j].x, p.y - mesh.vertices[j].y) < kMergeRadius) {
                mesh.warnings.push_back("point " + std::to_string(i) + " merged into point " +
                                        std::to_string(mesh.origin[j]) + " (closer than 0.5 px)");
                merged = true;
                break;
            }
        }
        if (!merged) {
            mesh.vertices.push_back(p);
            mesh.origin.push_back(static_cast<int>(i));
        }
    }
    const auto& v = mesh.vertices;
    const int n = static_cast<int>(v.size());
    if (n < 3) throw Error("triangulation needs at least 3 distinct points");
    const Tolerances tol = tolerances(v);

    // Sweep in lexicographic order, growing a ccw hull.
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return v[a].x < v[b].x || (v[a].x == v[b].x && v[a].y < v[b].y);
    });

    std::size_t first = 2;
    while (first < order.size() && std::abs(orient(v[order[0]], v[order[1]], v[order[first]])) <= tol.orient) ++first;
    if (first == order.size()) throw Error("triangulation: all points are collinear");

    // Seed: the leading collinear chain order[0..first-1] fanned to order[first].
    std::vector<Triangle> tris;
    std::vector<int> hull;  // ccw
    const int apex = order[first];
    const bool apex_left = orient(v[order[0]], v[order[first - 1]], v[apex]) > 0;
    for (std::size_t i = 0; i + 1 < first; ++i) {
        const int a = order[i], b = order[i + 1];
        tris.push_back(apex_left ? Triangle{a, b, apex} : Triangle{b, a, apex});
    }
    if (apex_left) {
        for (std::size_t i = 0; i < first; ++i) hull.push_back(order[i]);
        hull.push_back(apex);
    } else {
        for (std::size_t i = first; i-- > 0;) hull.push_back(order[i]);
        hull.push_back(apex);
    }

    for (std::size_t oi = first + 1; oi < order.size(); ++oi) {
        const int p = order[oi];
        const std::size_t h = hull.size();
        std::vector<bool> visible(h);
        bool any = false;
        for (std::size_t i = 0; i < h; ++i) {
            visible[i] = orient(v[hull[i]], v[hull[(i + 1) % h]], v[p]) < -tol.orient;
            any = any || visible[i];
        }
        if (!any) throw Error("triangulation: internal sweep failure");
        // The visible edges form one contiguous run; find where it starts.
        std::size_t start = 0;
        while (!(visible[start] && !visible[(start + h - 1) % h])) ++start;
        std::size_t count = 0;
        while (visible[(start + count) % h]) {
            const int a = hull[(start + count) % h], b = hull[(start + count + 1) % h];
            tris.push_back({b, a, p});
            ++count;
        }
        // Walk from the run's end vertex round to its start vertex, then p.
        std::vector<int> next;
        next.reserve(h - count + 2);
        for (std::size_t i = 0; i <= h - count; ++i) next.push_back(hull[(start + count + i) % h]);
        next.push_back(p);
        hull = std::move(next);
    }

    make_delaunay(v, tris, tol.incircle);

    for (const auto& t : tris) {
        if (orient(v[t[0]], v[t[1]], v[t[2]]) <= tol.orient) {
            mesh.warnings.push_back("dropped a zero-area triangle");
            continue;
        }
        mesh.triangles.push_back(t);
    }
    return mesh;
}

std::array<Point2, 8> frame_anchors(int height, int width) {
    const double r = width - 1.0, b = height - 1.0;
    const double mx = r / 2.0, my = b / 2.0;
    return {{{0, 0}, {r, 0}, {r, b}, {0, b}, {mx, 0}, {r, my}, {mx, b}, {0, my}}};
}

TriangleMesh triangulate(std::span<const Point2> landmarks, int height, int width) {
    if (height < 2 || width < 2) throw Error("triangulation frame must be at least 2x2");
    std::vector<Point2> pts;
    const auto anchors = frame_anchors(height, width);
    pts.insert(pts.end(), anchors.begin(), anchors.end());
    pts.insert(pts.end(), landmarks.begin(), landmarks.end());
    return delaunay(pts);
}

std::array<double, 6> solve_affine(const std::array<Point2, 3>& from, const std::array<Point2, 3>& to) {
    // Rows [x y 1]; Cramer's rule per output coordinate.
    const double det = orient(from[0], from[1], from[2]);
    if (std::abs(det) < 1e-12) throw Error("affine from a degenerate triangle");
    const auto solve = [&](double q0, double q1, double q2) {
        const auto& p = from;
        const double a = (q0 * (p[1].y - p[2].y) + q1 * (p[2].y - p[0].y) + q2 * (p[0].y - p[1].y)) / det;
        const double b = (q0 * (p[2].x - p[1].x) + q1 * (p[0].x - p[2].x) + q2 * (p[1].x - p[0].x)) / det;
        const double c = (q0 * (p[1].x * p[2].y - p[2].x * p[1].y) + q1 * (p[2].x * p[0].y - p[0].x * p[2].y) +
                          q2 * (p[0].x * p[1].y - p[1].x * p[0].y)) /
                         det;
        return std::array<double, 3>{a, b, c};
    };
    const auto rx = solve(to[0].x, to[1].x, to[2].x);
    const auto ry = solve(to[0].y, to[1].y, to[2].y);
    return {rx[0], rx[1], rx[2], ry[0], ry[1], ry[2]};
}

namespace {

double snap(double q) {
    const double r = std::round(q);
    return std::abs(q - r) < 1e-6 ? r : q;
}

// Bilinear sample of a float image at (x, y), coordinates clamped to the frame.
// Writes `channels` values.
void sample(const cv::Mat& img, double x, double y, float* out) {
    const int cn = img.channels();
    x = std::clamp(snap(x), 0.0, img.cols - 1.0);
    y = std::clamp(snap(y), 0.0, img.rows - 1.0);
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const int x1 = std::min(x0 + 1, img.cols - 1), y1 = std::min(y0 + 1, img.rows - 1);
    const double fx = x - x0, fy = y - y0;
    const float* r0 = img.ptr<float>(y0);
    const float* r1 = img.ptr<float>(y1);
    for (int c = 0; c < cn; ++c) {
        const double a = r0[x0 * cn + c], b = r0[x1 * cn + c];
        const double d = r1[x0 * cn + c], e = r1[x1 * cn + c];
        double v = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * d + fx * e);
        // keep inside the neighborhood's range against rounding
        v = std::clamp(v, std::min({a, b, d, e}), std::max({a, b, d, e}));
        out[c] = static_cast<float>(v);
    }
}

struct Raster {
    int x0, x1, y0, y1;
};

Raster bounds(const std::array<Point2, 3>& t, int rows, int cols) {
    const double minx = std::min({t[0].x, t[1].x, t[2].x}), maxx = std::max({t[0].x, t[1].x, t[2].x});
    const double miny = std::min({t[0].y, t[1].y, t[2].y}), maxy = std::max({t[0].y, t[1].y, t[2].y});
    return {std::max(0, static_cast<int>(std::ceil(minx - 1e-9))), std::min(cols - 1, static_cast<int>(std::floor(maxx + 1e-9))),
            std::max(0, static_cast<int>(std::ceil(miny - 1e-9))), std::min(rows - 1, static_cast<int>(std::floor(maxy + 1e-9)))};
}

// Point-in-triangle with a small inclusive tolerance, orientation agnostic.
bool inside(const std::array<Point2, 3>& t, double area, const Point2& p) {
    const double s = area > 0 ? 1.0 : -1.0;
    const double eps = -1e-9 * std::abs(area);
    return s * orient(t[0], t[1], p) >= eps && s * orient(t[1], t[2], p) >= eps && s * orient(t[2], t[0], p) >= eps;
}

void check_float(const cv::Mat& m, const char* what) {
    if (m.depth() != CV_32F) throw Error(std::string(what) + ": expected a float image");
}

}  // namespace

WarpedPatch warp_triangle(const cv::Mat& src, const std::array<Point2, 3>& src_tri,
                          const std::array<Point2, 3>& dst_tri) {
    check_float(src, "warp_triangle");
    WarpedPatch out;
    out.image = cv::Mat::zeros(src.size(), src.type());
    out.mask = cv::Mat1b::zeros(src.size());
    const double area = orient(dst_tri[0], dst_tri[1], dst_tri[2]);
    if (std::abs(area) < 1e-9) {
        out.warnings.push_back("degenerate destination triangle skipped");
        return out;
    }
    const auto A = solve_affine(dst_tri, src_tri);
    const Raster r = bounds(dst_tri, src.rows, src.cols);
    const int cn = src.channels();
    for (int y = r.y0; y <= r.y1; ++y) {
        float* row = out.image.ptr<float>(y);
        for (int x = r.x0; x <= r.x1; ++x) {
            if (!inside(dst_tri, area, {double(x), double(y)})) continue;
            sample(src, A[0] * x + A[1] * y + A[2], A[3] * x + A[4] * y + A[5], row + x * cn);
            out.mask(y, x) = 255;
        }
    }
    return out;
}

cv::Mat1b clone_region(const LandmarkSet& landmarks, int height, int width, int dilation) {
    std::vector<cv::Point2f> pts;
    for (const auto& p : core_landmarks(landmarks)) pts.emplace_back(static_cast<float>(p.x), static_cast<float>(p.y));
    std::vector<cv::Point2f> hull_f;
    cv::convexHull(pts, hull_f);
    std::vector<cv::Point> hull;
    for (const auto& p : hull_f) hull.emplace_back(cvRound(p.x), cvRound(p.y));

    cv::Mat1b mask = cv::Mat1b::zeros(height, width);
    cv::fillConvexPoly(mask, hull, cv::Scalar(255));
    if (dilation > 0) {
        const auto kernel = cv::getStructuringElement(cv::MORPH_ELLIPSE, cv::Size(2 * dilation + 1, 2 * dilation + 1));
        cv::dilate(mask, mask, kernel);
    }
    // boundary condition needs a target ring around the region
    mask.row(0).setTo(0);
    mask.row(height - 1).setTo(0);
    mask.col(0).setTo(0);
    mask.col(width - 1).setTo(0);
    return mask;
}

cv::Mat seamless_clone(const cv::Mat& patch, const cv::Mat& target, const cv::Mat1b& mask,
                       const CloneOptions& options) {
    if (target.depth() != CV_32F && target.depth() != CV_64F) {
        throw Error("seamless_clone: expected a float or double image");
    }
    if (patch.size() != target.size() || patch.type() != target.type() || mask.size() != target.size()) {
        throw Error("seamless_clone: patch, target and mask must share size and type");
    }
    const int rows = target.rows, cols = target.cols, cn = target.channels();
    for (int y = 0; y < rows; ++y) {
        for (int x = 0; x < cols; ++x) {
            if (mask(y, x) && (x == 0 || y == 0 || x == cols - 1 || y == rows - 1)) {
                throw Error("seamless_clone: mask must lie strictly inside the frame");
            }
        }
    }

    std::vector<int> index(static_cast<std::size_t>(rows) * cols, -1);
    std::vector<std::pair<int, int>> cells;
    for (int y = 0; y < rows; ++y) {
        for (int x = 0; x < cols; ++x) {
            if (mask(y, x)) {
                index[y * cols + x] = static_cast<int>(cells.size());
                cells.emplace_back(y, x);
            }
        }
    }
    cv::Mat result = target.clone();
    if (cells.empty()) return result;

    const std::size_t n = cells.size();
    const int max_iter = options.max_iterations > 0 ? options.max_iterations : static_cast<int>(10 * n + 1000);
    constexpr int dy[4] = {-1, 1, 0, 0};
    constexpr int dx[4] = {0, 0, -1, 1};

    const bool dbl = target.depth() == CV_64F;
    const auto at = [dbl](const cv::Mat& m, int y, int x, int c) {
        const int i = x * m.channels() + c;
        return dbl ? m.ptr<double>(y)[i] : static_cast<double>(m.ptr<float>(y)[i]);
    };

    Eigen::VectorXd b(n), f(n), r(n), p(n), ap(n);
    const auto apply = [&](const Eigen::VectorXd& in, Eigen::VectorXd& out) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto [y, x] = cells[i];
            double s = 4.0 * in[i];
            for (int k = 0; k < 4; ++k) {
                const int j = index[(y + dy[k]) * cols + x + dx[k]];
                if (j >= 0) s -= in[j];
            }
            out[i] = s;
        }
    };

    for (int c = 0; c < cn; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto [y, x] = cells[i];
            double rhs = 0.0;
            for (int k = 0; k < 4; ++k) {
                const int qy = y + dy[k], qx = x + dx[k];
                double g = at(patch, y, x, c) - at(patch, qy, qx, c);
                if (options.mixed_gradients) {
                    const double gt = at(target, y, x, c) - at(target, qy, qx, c);
                    if (std::abs(gt) > std::abs(g)) g = gt;
                }
                rhs += g;
                if (index[qy * cols + qx] < 0) rhs += at(target, qy, qx, c);
            }
            b[i] = rhs;
            f[i] = at(patch, y, x, c);
        }
        apply(f, ap);
        r = b - ap;
        p = r;
        double rr = r.squaredNorm();
        for (int it = 0; it < max_iter && r.lpNorm<Eigen::Infinity>() >= options.tolerance; ++it) {
            apply(p, ap);
            const double alpha = rr / p.dot(ap);
            f += alpha * p;
            r -= alpha * ap;
            const double rr_next = r.squaredNorm();
            p = r + (rr_next / rr) * p;
            rr = rr_next;
        }
        // report the true residual, not the recursively updated one
        apply(f, ap);
        if ((b - ap).lpNorm<Eigen::Infinity>() >= std::max(options.tolerance, 1e-5)) {
            throw Error("seamless_clone: conjugate gradient did not converge");
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto [y, x] = cells[i];
            if (dbl) result.ptr<double>(y)[x * cn + c] = f[i];
            else result.ptr<float>(y)[x * cn + c] = static_cast<float>(f[i]);
        }
    }
    return result;
}

MorphResult morph(const io::OcularImage& source, const io::OcularImage& target, const LandmarkSet& source_landmarks,
                  const LandmarkSet& target_landmarks, const MorphOptions& options) {
    if (!(options.alpha >= 0.0 && options.alpha <= 1.0)) throw Error("morph alpha must be in [0, 1]");
    if (source.pixels.size() != target.pixels.size()) throw Error("morph: images differ in size");
    if (source.range != target.range) throw Error("morph: images differ in value range");
    if (!source_landmarks.all_finite() || !target_landmarks.all_finite()) throw Error("morph: non-finite landmarks");
    check_float(source.pixels, "morph");
    check_float(target.pixels, "morph");

    const double wt = std::round(options.alpha * 1048576.0) / 1048576.0;
    const double ws = 1.0 - wt;
    const int rows = source.height(), cols = source.width();

    MorphResult res;
    // ws*s + wt*t, written so that swapping inputs with 1-alpha gives the same sums
    for (std::size_t i = 0; i < kNumLandmarks; ++i) {
        res.landmarks[i] = {ws * source_landmarks[i].x + wt * target_landmarks[i].x,
                            ws * source_landmarks[i].y + wt * target_landmarks[i].y};
    }
    const auto core_m = core_landmarks(res.landmarks);
    const auto core_s = core_landmarks(source_landmarks);
    const auto core_t = core_landmarks(target_landmarks);
    res.mesh = triangulate(core_m, rows, cols);
    res.warnings = res.mesh.warnings;

    const auto anchors = frame_anchors(rows, cols);
    const auto vertex_in = [&](const std::vector<Point2>& core, int origin) {
        return origin < 8 ? anchors[origin] : core[origin - 8];
    };

    const int cn = source.pixels.channels();
    cv::Mat out(rows, cols, source.pixels.type(), cv::Scalar::all(0));
    cv::Mat1b owned = cv::Mat1b::zeros(rows, cols);
    std::vector<float> a(cn), b(cn);

    for (const auto& t : res.mesh.triangles) {
        std::array<Point2, 3> dm, ds, dt;
        for (int k = 0; k < 3; ++k) {
            dm[k] = res.mesh.vertices[t[k]];
            ds[k] = vertex_in(core_s, res.mesh.origin[t[k]]);
            dt[k] = vertex_in(core_t, res.mesh.origin[t[k]]);
        }
        const double area = orient(dm[0], dm[1], dm[2]);
        const auto As = solve_affine(dm, ds);
        const auto At = solve_affine(dm, dt);
        const Raster r = bounds(dm, rows, cols);
        for (int y = r.y0; y <= r.y1; ++y) {
            float* row = out.ptr<float>(y);
            for (int x = r.x0; x <= r.x1; ++x) {
                if (owned(y, x) || !inside(dm, area, {double(x), double(y)})) continue;
                owned(y, x) = 255;
                sample(source.pixels, As[0] * x + As[1] * y + As[2], As[3] * x + As[4] * y + As[5], a.data());
                sample(target.pixels, At[0] * x + At[1] * y + At[2], At[3] * x + At[4] * y + At[5], b.data());
                for (int c = 0; c < cn; ++c) {
                    if (a[c] == b[c]) {
                        row[x * cn + c] = a[c];
                        continue;
                    }
                    const double v = ws * a[c] + wt * b[c];
                    row[x * cn + c] = static_cast<float>(std::clamp(v, double(std::min(a[c], b[c])), double(std::max(a[c], b[c]))));
                }
            }
        }
    }
    // Pixels the mesh missed (only possible with landmarks far outside the
    // frame pulling anchors inside the hull) fall back to the unwarped blend.
    int missed = 0;
    for (int y = 0; y < rows; ++y) {
        for (int x = 0; x < cols; ++x) {
            if (owned(y, x)) continue;
            ++missed;
            const float* ps = source.pixels.ptr<float>(y) + x * cn;
            const float* pt = target.pixels.ptr<float>(y) + x * cn;
            float* po = out.ptr<float>(y) + x * cn;
            for (int c = 0; c < cn; ++c) po[c] = ps[c] == pt[c] ? ps[c] : static_cast<float>(ws * ps[c] + wt * pt[c]);
        }
    }
    if (missed > 0) res.warnings.push_back(std::to_string(missed) + " pixels outside the mesh blended unwarped");

    if (options.seamless_clone) {
        res.clone_mask = clone_region(res.landmarks, rows, cols, options.clone_dilation);
        CloneOptions co;
        co.mixed_gradients = options.mixed_gradients;
        out = seamless_clone(out, source.pixels, res.clone_mask, co);
    }
    res.image = io::OcularImage{out, source.range, {}};
    return res;
}

cv::Mat draw_mesh(const io::OcularImage& image, const TriangleMesh& mesh) {
    cv::Mat raw = image.range == io::ValueRange::raw_0_255 ? image.pixels : io::to_raw(image);
    cv::Mat rgb8;
    raw.convertTo(rgb8, CV_8UC3);
    cv::Mat bgr;
    cv::cvtColor(rgb8, bgr, cv::COLOR_RGB2BGR);
    const auto pt = [&](int i) {
        return cv::Point(cvRound(mesh.vertices[i].x), cvRound(mesh.vertices[i].y));
    };
    for (const auto& t : mesh.triangles) {
        for (int k = 0; k < 3; ++k) cv::line(bgr, pt(t[k]), pt(t[(k + 1) % 3]), cv::Scalar(0, 255, 0), 1, cv::LINE_AA);
    }
    return bgr;
}

}  // namespace ocumorph::morph
