#include "obsd/sampler.hpp"

#include <cmath>
#include <thread>

namespace obsd {

using nn::Tensor;

namespace {

Tensor crop_patches_tensor(const std::vector<double>& img, int c, int h, int w,
                           const PatchLayout& lay, int d0, int d1) {
    int p = lay.patch;
    Tensor out = Tensor::zeros({d1 - d0, c, p, p});
    for (int d = d0; d < d1; ++d) {
        auto& pos = lay.positions[d];
        double* dst = out.data() + (size_t)(d - d0) * c * p * p;
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    dst[((size_t)ch * p + y) * p + x] =
                        img[((size_t)ch * h + pos.y + y) * w + pos.x + x];
    }
    return out;
}


GlyphImage finish_image(std::vector<double>& x, const GlyphImage& cond) {
    GlyphImage out(cond.h, cond.w, cond.c, Role::generated);
    out.category = cond.category;
    for (size_t i = 0; i < x.size(); ++i)
        out.pixels[i] = (float)std::clamp(x[i], -1.0, 1.0);
    return out;
}

void reverse_update(std::vector<double>& x, const std::vector<double>& eps_hat,
                    const std::vector<double>& z, int t, const NoiseSchedule& sched) {
    double a = sched.alpha(t), g = sched.gamma(t);
    double inv_sa = 1.0 / std::sqrt(a);
    double coef = (1.0 - a) / std::sqrt(1.0 - g);
    double sz = std::sqrt(1.0 - a);
    for (size_t i = 0; i < x.size(); ++i)
        x[i] = inv_sa * (x[i] - coef * eps_hat[i]) + sz * z[i];
}

}  // namespace

std::vector<double> aggregate_patch_predictions(const PatchLayout& layout, int channels,
                                                const std::vector<std::vector<double>>& preds,
                                                const std::vector<int>* order) {
    if ((int)preds.size() != layout.d)
        throw UsageError("aggregate: need one prediction per patch");
    size_t psize = (size_t)channels * layout.patch * layout.patch;
    std::vector<double> omega((size_t)channels * layout.h * layout.w, 0.0);
    for (int i = 0; i < layout.d; ++i) {
        int d = order ? (*order)[i] : i;
        if (preds[d].size() != psize) throw UsageError("aggregate: bad patch size");
        auto& pos = layout.positions[d];
        for (int ch = 0; ch < channels; ++ch)
            for (int y = 0; y < layout.patch; ++y)
                for (int x = 0; x < layout.patch; ++x)
                    omega[((size_t)ch * layout.h + pos.y + y) * layout.w + pos.x + x] +=
                        preds[d][((size_t)ch * layout.patch + y) * layout.patch + x];
    }
    for (int ch = 0; ch < channels; ++ch)
        for (size_t j = 0; j < (size_t)layout.h * layout.w; ++j)
            omega[(size_t)ch * layout.h * layout.w + j] /= (double)layout.coverage[j];
    return omega;
}

GlyphImage lss_sample(const GlyphImage& cond, NoisePredictor& model,
                      const NoiseSchedule& sched, const PatchLayout& layout,
                      uint64_t seed, int workers, SampleStats* stats) {
    if (cond.h != layout.h || cond.w != layout.w)
        throw UsageError("lss_sample: condition does not match layout");
    if (model.patch_size() != layout.patch)
        throw UsageError("lss_sample: model patch size " +
                         std::to_string(model.patch_size()) +
                         " does not match layout patch " + std::to_string(layout.patch));
    if (model.channels() != cond.c)
        throw UsageError("lss_sample: channel mismatch");
    workers = std::max(1, workers);

    int c = cond.c, h = cond.h, w = cond.w, p = layout.patch;
    size_t numel = (size_t)c * h * w;
    std::vector<double> cond_d(cond.pixels.begin(), cond.pixels.end());
    std::vector<double> x(numel), z(numel, 0.0), omega(numel);

    Rng rng(seed);
    rng.fill_normal(x.data(), numel);  // X_T

    // condition patches are constant across timesteps
    std::vector<std::pair<int, int>> chunks;
    int per = (layout.d + workers - 1) / workers;
    for (int d0 = 0; d0 < layout.d; d0 += per)
        chunks.push_back({d0, std::min(layout.d, d0 + per)});
    std::vector<Tensor> cond_chunks;
    for (auto [d0, d1] : chunks)
        cond_chunks.push_back(crop_patches_tensor(cond_d, c, h, w, layout, d0, d1));

    size_t psize = (size_t)c * p * p;
    for (int t = sched.T; t >= 1; --t) {
        std::vector<Tensor> chunk_preds(chunks.size());
        auto run_chunk = [&](size_t ci) {
            auto [d0, d1] = chunks[ci];
            Tensor xt = crop_patches_tensor(x, c, h, w, layout, d0, d1);
            std::vector<int> ts((size_t)(d1 - d0), t);
            chunk_preds[ci] = model.predict(xt, cond_chunks[ci], ts, false);
        };
        if (chunks.size() == 1) {
            run_chunk(0);
        } else {
            std::vector<std::thread> pool;
            for (size_t ci = 0; ci < chunks.size(); ++ci)
                pool.emplace_back(run_chunk, ci);
            for (auto& th : pool) th.join();
        }
        // ordered reduction: chunk order == patch order
        std::vector<std::vector<double>> preds((size_t)layout.d);
        for (size_t ci = 0; ci < chunks.size(); ++ci)
            for (int d = chunks[ci].first; d < chunks[ci].second; ++d) {
                const double* src =
                    chunk_preds[ci].data() + (size_t)(d - chunks[ci].first) * psize;
                preds[d].assign(src, src + psize);
            }
        omega = aggregate_patch_predictions(layout, c, preds);
        for (double v : omega)
            if (!std::isfinite(v))
                throw DivergenceError("lss_sample: non-finite aggregated prediction at t=" +
                                      std::to_string(t));
        if (t > 1)
            rng.fill_normal(z.data(), numel);
        else
            std::fill(z.begin(), z.end(), 0.0);
        reverse_update(x, omega, z, t, sched);
    }

    if (stats) stats->noise_draws = rng.normal_array_calls();
    return finish_image(x, cond);
}

GlyphImage whole_image_sample(const GlyphImage& cond, NoisePredictor& model,
                              const NoiseSchedule& sched, uint64_t seed,
                              SampleStats* stats) {
    if (model.patch_size() != cond.h || cond.h != cond.w)
        throw UsageError("whole_image_sample: model patch size must equal image side");
    if (model.channels() != cond.c)
        throw UsageError("whole_image_sample: channel mismatch");
    int c = cond.c, h = cond.h, w = cond.w;
    size_t numel = (size_t)c * h * w;
    std::vector<double> x(numel), z(numel, 0.0), eps_hat(numel);
    Rng rng(seed);
    rng.fill_normal(x.data(), numel);
    Tensor cond_t = Tensor::from(cond.pixels, {1, c, h, w});
    for (int t = sched.T; t >= 1; --t) {
        Tensor xt = Tensor::from(std::vector<double>(x), {1, c, h, w});
        Tensor pred = model.predict(xt, cond_t, {t}, false);
        std::copy(pred.values().begin(), pred.values().end(), eps_hat.begin());
        for (double v : eps_hat)
            if (!std::isfinite(v))
                throw DivergenceError("whole_image_sample: non-finite prediction");
        if (t > 1)
            rng.fill_normal(z.data(), numel);
        else
            std::fill(z.begin(), z.end(), 0.0);
        reverse_update(x, eps_hat, z, t, sched);
    }
    if (stats) stats->noise_draws = rng.normal_array_calls();
    return finish_image(x, cond);
}

}  // namespace obsd
