#include "ocumorph/dyn_weights.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ocumorph/common.hpp"

namespace ocumorph::weights {

namespace {

std::string describe(const Vector& v) {
    std::ostringstream s;
    s.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? ", " : "") << losses::kLossNames[i] << "=" << v[i];
    return s.str();
}

}  // namespace

Vector WeightState::uniform() {
    Vector v;
    v.fill(1.0 / static_cast<double>(losses::kNumLosses));
    return v;
}

void WeightState::validate() const {
    if (!(rate > 0 && rate <= 1)) throw ConfigError("adjustment rate must be in (0, 1]");
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be finite and >= 0");
    double sum = 0;
    for (double w : weights) {
        if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("weights must be finite and non-negative");
        sum += w;
    }
    if (std::abs(sum - 1) > 1e-9) throw ConfigError("weights must sum to 1 (got " + std::to_string(sum) + ")");
}

Vector compute_targets(const Vector& l, double epsilon) {
    for (double v : l) {
        if (!std::isfinite(v)) throw Error("non-finite loss fed to the weight adjuster: " + describe(l));
        if (v < 0) throw Error("negative loss fed to the weight adjuster: " + describe(l));
    }
    Vector t{};
    const bool zero_pole = epsilon == 0 && std::any_of(l.begin(), l.end(), [](double v) { return v == 0; });
    if (zero_pole) {
        for (std::size_t i = 0; i < l.size(); ++i) t[i] = l[i] == 0 ? 1.0 : 0.0;
    } else {
        for (std::size_t i = 0; i < l.size(); ++i) t[i] = 1.0 / (l[i] + epsilon);
    }
    const double sum = std::accumulate(t.begin(), t.end(), 0.0);
    if (!std::isfinite(sum)) {
        // a loss below ~1e-308 + epsilon overflowed; treat it as an exact zero
        for (std::size_t i = 0; i < l.size(); ++i) t[i] = std::isinf(t[i]) ? 1.0 : 0.0;
        const double n = std::accumulate(t.begin(), t.end(), 0.0);
        for (auto& v : t) v /= n;
        return t;
    }
    for (auto& v : t) v /= sum;
    return t;
}

WeightState update(const WeightState& state, const Vector& l) {
    state.validate();
    const auto target = compute_targets(l, state.epsilon);
    WeightState out = state;
    double sum = 0;
    for (std::size_t i = 0; i < l.size(); ++i) {
        out.weights[i] = std::max(0.0, state.weights[i] + state.rate * (target[i] - state.weights[i]));
        sum += out.weights[i];
    }
    for (auto& w : out.weights) w /= sum;
    return out;
}

Vector inverter_inputs(const Vector& raw) {
    Vector out = raw;
    out[0] = std::abs(out[0]);  // adv
    out[5] = std::abs(out[5]);  // identity_diff
    return out;
}

}  // namespace ocumorph::weights
