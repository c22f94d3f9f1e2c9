#include "test_prelude.hpp"

#include <numeric>
#include <random>

#include "ocumorph/common.hpp"
#include "ocumorph/dyn_weights.hpp"

using namespace ocumorph;
using namespace ocumorph::weights;

namespace {

double sum(const Vector& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

double distance(const Vector& a, const Vector& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// Random point on the simplex, sometimes with exact zeros.
Vector random_simplex(std::mt19937_64& rng) {
    std::exponential_distribution<double> e(1.0);
    std::bernoulli_distribution zero(0.1);
    Vector v;
    for (auto& x : v) x = zero(rng) ? 0.0 : e(rng);
    if (sum(v) == 0) v[0] = 1;
    const double s = sum(v);
    for (auto& x : v) x /= s;
    return v;
}

Vector random_losses(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> exponent(-8, 4);
    std::bernoulli_distribution zero(0.05);
    Vector v;
    for (auto& x : v) x = zero(rng) ? 0.0 : std::pow(10.0, exponent(rng));
    return v;
}

}  // namespace

TEST_CASE("fixed point at equal losses") {
    WeightState s;
    Vector l;
    l.fill(0.37);
    const auto next = update(s, l);
    for (double w : next.weights) CHECK(w == doctest::Approx(1.0 / 6).epsilon(1e-15));
}

TEST_CASE("two active losses") {
    // (1, 4) with weights (0.5, 0.5): inverse (1, 0.25) -> targets (0.8, 0.2),
    // new = 0.5 + 0.05 (0.8 - 0.5) = 0.515 and 0.485.
    const double l1 = 1.0, l2 = 4.0, r = 0.05;
    const double t1 = (1 / l1) / (1 / l1 + 1 / l2), t2 = (1 / l2) / (1 / l1 + 1 / l2);
    const double n1 = 0.5 + r * (t1 - 0.5), n2 = 0.5 + r * (t2 - 0.5);
    CHECK(t1 == doctest::Approx(0.8));
    CHECK(n1 == doctest::Approx(0.515));
    CHECK(n2 == doctest::Approx(0.485));

    // The six-slot vector carries the pair in two slots; the other four are
    // inactive (zero weight and huge loss, so their targets vanish).
    WeightState s;
    s.epsilon = 0;
    s.rate = r;
    s.weights = {0.5, 0.5, 0, 0, 0, 0};
    const double inactive = 1e300;
    const auto next = update(s, {l1, l2, inactive, inactive, inactive, inactive});
    CHECK(next.weights[0] == doctest::Approx(0.515).epsilon(1e-12));
    CHECK(next.weights[1] == doctest::Approx(0.485).epsilon(1e-12));
    CHECK(sum(next.weights) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("full step lands on the targets") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 200; ++t) {
        WeightState s;
        s.rate = 1;
        s.weights = random_simplex(rng);
        const auto l = random_losses(rng);
        const auto next = update(s, l);
        const auto target = compute_targets(l, s.epsilon);
        for (std::size_t i = 0; i < l.size(); ++i) CHECK(next.weights[i] == doctest::Approx(target[i]).epsilon(1e-14));
    }
}

TEST_CASE("geometric convergence with frozen losses") {
    WeightState s;
    s.weights = {0.9, 0.02, 0.02, 0.02, 0.02, 0.02};
    const Vector l = {0.4, 1.5, 0.2, 3.0, 0.8, 0.1};
    const auto target = compute_targets(l, s.epsilon);
    const double d0 = distance(s.weights, target);
    for (int k = 1; k <= 200; ++k) {
        s = update(s, l);
        CHECK(distance(s.weights, target) == doctest::Approx(std::pow(1 - s.rate, k) * d0).epsilon(1e-9));
    }
}

TEST_CASE("simplex under fuzzing") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> rate(1e-3, 1.0);
    std::bernoulli_distribution no_eps(0.2);
    int off_simplex = 0, wrong_argmax = 0;
    for (int t = 0; t < 100000; ++t) {
        WeightState s;
        s.weights = random_simplex(rng);
        s.rate = rate(rng);
        s.epsilon = no_eps(rng) ? 0.0 : 1e-8;
        const auto l = random_losses(rng);
        const auto next = update(s, l);
        bool ok = std::abs(sum(next.weights) - 1) <= 1e-9;
        for (double w : next.weights) ok = ok && w >= 0;
        if (!ok) ++off_simplex;

        const auto target = compute_targets(l, s.epsilon);
        const auto imax = std::max_element(target.begin(), target.end()) - target.begin();
        const double lmin = *std::min_element(l.begin(), l.end());
        if (l[imax] != lmin) ++wrong_argmax;
    }
    CHECK(off_simplex == 0);
    CHECK(wrong_argmax == 0);
}

TEST_CASE("scale covariance") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 1000; ++t) {
        Vector l = random_losses(rng);
        for (auto& x : l) x += 1e-3;  // keep away from the epsilon regime
        const auto base0 = compute_targets(l, 0.0);
        for (double c : {0.25, 4.0, 1024.0}) {  // powers of two scale exactly
            Vector scaled;
            for (std::size_t i = 0; i < l.size(); ++i) scaled[i] = c * l[i];
            const auto t0 = compute_targets(scaled, 0.0);
            for (std::size_t i = 0; i < l.size(); ++i) CHECK(t0[i] == base0[i]);
        }
        const double c = std::uniform_real_distribution<double>(0.1, 10)(rng);
        Vector scaled;
        for (std::size_t i = 0; i < l.size(); ++i) scaled[i] = c * l[i];
        const auto t0 = compute_targets(scaled, 0.0);
        const auto te = compute_targets(scaled, 1e-8);
        for (std::size_t i = 0; i < l.size(); ++i) {
            CHECK(t0[i] == doctest::Approx(base0[i]).epsilon(1e-13));
            // deviation with epsilon is at most O(epsilon / min loss)
            CHECK(std::abs(te[i] - t0[i]) <= 1e-8 / (c * 1e-3) * 4);
        }
    }
}

TEST_CASE("zero losses without epsilon") {
    const auto t = compute_targets({0.0, 1.0, 0.0, 2.0, 3.0, 4.0}, 0.0);
    CHECK(t[0] == 0.5);
    CHECK(t[2] == 0.5);
    CHECK(t[1] == 0.0);
    const auto e = compute_targets({0.0, 1.0, 1.0, 1.0, 1.0, 1.0}, 1e-8);
    CHECK(e[0] > 0.99999);
}

TEST_CASE("errors") {
    WeightState s;
    Vector l = {1, 1, 1, 1, 1, 1};
    l[2] = std::nan("");
    CHECK_THROWS_AS(update(s, l), Error);
    l[2] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(update(s, l), Error);
    l[2] = -0.5;
    CHECK_THROWS_AS(update(s, l), Error);
    l[2] = 1;
    s.rate = 0;
    CHECK_THROWS_AS(update(s, l), ConfigError);
    s.rate = 1.5;
    CHECK_THROWS_AS(update(s, l), ConfigError);
    s.rate = 0.05;
    s.weights[0] += 0.1;
    CHECK_THROWS_AS(update(s, l), ConfigError);
}

TEST_CASE("signed losses are inverted by magnitude") {
    const auto in = inverter_inputs({-3.0, 0.1, 0.2, 0.3, 0.4, -0.5});
    CHECK(in[0] == 3.0);
    CHECK(in[5] == 0.5);
    CHECK(in[1] == 0.1);
    CHECK_NOTHROW(update(WeightState{}, in));
}
