#include "obsd/diffusion.hpp"

#include <cmath>

namespace obsd {

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw UsageError("schedule needs T >= 1, got " + std::to_string(T));
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw UsageError("schedule needs 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.gammas.resize(T);
    for (int i = 0; i < T; ++i) {
        double b = (T == 1) ? beta_start
                            : beta_start + (beta_end - beta_start) * (double)i / (T - 1);
        s.betas[i] = b;
        s.alphas[i] = 1.0 - b;
        s.gammas[i] = (i == 0) ? s.alphas[0] : s.gammas[i - 1] * s.alphas[i];
    }
    return s;
}

static void check_shapes(size_t a, size_t b, const char* what) {
    if (a != b)
        throw UsageError(std::string(what) + ": shape mismatch (" + std::to_string(a) +
                         " vs " + std::to_string(b) + ")");
}

void forward_sample(std::span<const float> x0, int t, std::span<const float> eps,
                    const NoiseSchedule& sched, std::span<float> out) {
    sched.check(t);
    check_shapes(x0.size(), eps.size(), "forward_sample");
    check_shapes(x0.size(), out.size(), "forward_sample");
    double g = sched.gamma(t);
    float sg = (float)std::sqrt(g);
    float s1g = (float)std::sqrt(1.0 - g);
    for (size_t i = 0; i < x0.size(); ++i) out[i] = sg * x0[i] + s1g * eps[i];
}

GlyphImage forward_sample(const GlyphImage& x0, int t, const GlyphImage& eps,
                          const NoiseSchedule& sched) {
    GlyphImage out(x0.h, x0.w, x0.c, Role::generated);
    forward_sample(x0.pixels, t, eps.pixels, sched, out.pixels);
    return out;
}

void reverse_step(std::span<const float> xt, std::span<const float> eps_hat, int t,
                  const NoiseSchedule& sched, std::span<const float> z,
                  std::span<float> out) {
    sched.check(t);
    check_shapes(xt.size(), eps_hat.size(), "reverse_step");
    check_shapes(xt.size(), z.size(), "reverse_step");
    check_shapes(xt.size(), out.size(), "reverse_step");
    double a = sched.alpha(t), g = sched.gamma(t);
    float inv_sa = (float)(1.0 / std::sqrt(a));
    float coef = (float)((1.0 - a) / std::sqrt(1.0 - g));
    float sz = (float)std::sqrt(1.0 - a);
    for (size_t i = 0; i < xt.size(); ++i)
        out[i] = inv_sa * (xt[i] - coef * eps_hat[i]) + sz * z[i];
}

GlyphImage reverse_step(const GlyphImage& xt, const GlyphImage& eps_hat, int t,
                        const NoiseSchedule& sched, const GlyphImage& z) {
    GlyphImage out(xt.h, xt.w, xt.c, Role::generated);
    reverse_step(xt.pixels, eps_hat.pixels, t, sched, z.pixels, out.pixels);
    return out;
}

}  // namespace obsd
