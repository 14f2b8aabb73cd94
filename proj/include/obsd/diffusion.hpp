#pragma once

#include <span>
#include <vector>

#include "obsd/common.hpp"
#include "obsd/image.hpp"

namespace obsd {

// beta/alpha/gamma sequences over T timesteps. Public accessors use the
// 1-based timestep convention t = 1..T; storage is 0-based.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> gammas;  // cumulative products of alpha

    double beta(int t) const { check(t); return betas[t - 1]; }
    double alpha(int t) const { check(t); return alphas[t - 1]; }
    double gamma(int t) const { check(t); return gammas[t - 1]; }

    void check(int t) const {
        if (t < 1 || t > T)
            throw UsageError("timestep " + std::to_string(t) + " out of range 1.." +
                             std::to_string(T));
    }
};

// Linearly spaced beta in [beta_start, beta_end] over T steps.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

// X_t = sqrt(gamma_t) * x0 + sqrt(1 - gamma_t) * eps, elementwise.
void forward_sample(std::span<const float> x0, int t, std::span<const float> eps,
                    const NoiseSchedule& sched, std::span<float> out);
GlyphImage forward_sample(const GlyphImage& x0, int t, const GlyphImage& eps,
                          const NoiseSchedule& sched);

// X_{t-1} = (xt - (1-alpha_t)/sqrt(1-gamma_t) * eps_hat) / sqrt(alpha_t)
//           + sqrt(1-alpha_t) * z, elementwise.
void reverse_step(std::span<const float> xt, std::span<const float> eps_hat, int t,
                  const NoiseSchedule& sched, std::span<const float> z,
                  std::span<float> out);
GlyphImage reverse_step(const GlyphImage& xt, const GlyphImage& eps_hat, int t,
                        const NoiseSchedule& sched, const GlyphImage& z);

}  // namespace obsd
