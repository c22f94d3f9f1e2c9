#pragma once

#include <array>

#include "ocumorph/losses.hpp"

// Inverse-loss weight balancing: losses that are already small get more weight.
namespace ocumorph::weights {

using Vector = std::array<double, losses::kNumLosses>;

struct WeightState {
    Vector weights = uniform();
    double rate = 0.05;     // r in (0, 1]
    double epsilon = 1e-8;  // added to each loss before inversion

    static Vector uniform();
    // Throws ConfigError unless the weights lie on the simplex and r, epsilon are valid.
    void validate() const;
};

// Normalized inverses 1 / (L_i + epsilon). Losses must be finite and >= 0.
// With epsilon = 0 and some L_i = 0 the mass is split equally among the zero losses.
Vector compute_targets(const Vector& losses, double epsilon);

// w + r (target - w), renormalized.
WeightState update(const WeightState& state, const Vector& losses);

// The Wasserstein critic term and the identity difference are signed; the
// inverter sees their magnitudes.
Vector inverter_inputs(const Vector& raw_losses);

}  // namespace ocumorph::weights
