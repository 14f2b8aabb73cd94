#pragma once

#include "obsd/denoiser.hpp"
#include "obsd/diffusion.hpp"
#include "obsd/patch.hpp"

namespace obsd {

struct SampleStats {
    size_t noise_draws = 0;  // whole-image Gaussian draws made by the sampler
};

// Overlap-averaged aggregation: sums per-patch predictions into the full
// grid, then divides by the coverage count M. preds[d] is the d-th patch
// prediction, (C, p, p) flattened. `order` optionally permutes accumulation
// order (results are order-independent up to float summation).
std::vector<double> aggregate_patch_predictions(
    const PatchLayout& layout, int channels, const std::vector<std::vector<double>>& preds,
    const std::vector<int>* order = nullptr);

// Localized Structural Sampling: X_T ~ N(0,I); at every timestep, predict
// noise per overlapping patch, average overlaps elementwise (aggregate / M),
// then apply one full-image reverse update with a single fresh whole-image
// noise draw (zero at t = 1). Output clipped to [-1, 1].
//
// Patch predictions within a timestep are independent; `workers` splits them
// across threads with an ordered reduction (parallel and serial runs agree to
// ~1e-5, identical configs are always deterministic).
GlyphImage lss_sample(const GlyphImage& cond, NoisePredictor& model,
                      const NoiseSchedule& sched, const PatchLayout& layout,
                      uint64_t seed, int workers = 1, SampleStats* stats = nullptr);

// Plain conditional reverse process over the full image; consumes the RNG
// stream in the same order as lss_sample so a D = 1 layout reproduces it.
GlyphImage whole_image_sample(const GlyphImage& cond, NoisePredictor& model,
                              const NoiseSchedule& sched, uint64_t seed,
                              SampleStats* stats = nullptr);

}  // namespace obsd
