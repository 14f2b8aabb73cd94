#pragma once

#include <filesystem>
#include <memory>

#include <json.hpp>

#include "obsd/archive.hpp"
#include "obsd/diffusion.hpp"
#include "obsd/glyph_data.hpp"
#include "obsd/nn/modules.hpp"
#include "obsd/patch.hpp"

namespace obsd {

struct DenoiserConfig {
    int patch = 64;
    int channels = 3;
    int base_width = 32;
    int levels = 3;
    int time_embed_dim = 128;
    double lr = 2e-5;
    int batch = 8;
    int epochs = 300;
    double weight_decay = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    int steps_per_epoch = 0;  // 0: derived as ceil(pairs / batch)
    int checkpoint_every = 500;

    void validate() const;
    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);
    nn::AdamConfig adam() const {
        return {lr, adam_beta1, adam_beta2, 1e-8, weight_decay};
    }
};

// Noise-prediction contract f(X_t, cond, t) -> eps_hat; patches are
// (B, C, p, p) tensors, one timestep per batch item.
struct NoisePredictor {
    virtual ~NoisePredictor() = default;
    virtual int patch_size() const = 0;
    virtual int channels() const = 0;
    virtual nn::Tensor predict(const nn::Tensor& xt, const nn::Tensor& cond,
                               const std::vector<int>& ts, bool training) = 0;
    virtual std::vector<nn::Tensor> parameters() { return {}; }
};

// Encoder/decoder with skip connections, residual blocks and sinusoidal
// timestep embeddings injected per block. Conditioning enters by channel
// concatenation (2C input channels).
class UNetDenoiser : public NoisePredictor {
public:
    UNetDenoiser(DenoiserConfig cfg, uint64_t init_seed);

    int patch_size() const override { return cfg_.patch; }
    int channels() const override { return cfg_.channels; }
    nn::Tensor predict(const nn::Tensor& xt, const nn::Tensor& cond,
                       const std::vector<int>& ts, bool training) override;
    std::vector<nn::Tensor> parameters() override { return params_.all(); }

    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    const DenoiserConfig& config() const { return cfg_; }
    uint64_t init_seed() const { return init_seed_; }
    void check_finite() const;

private:
    struct ResBlock {
        nn::GroupNorm gn1, gn2;
        nn::Conv2d conv1, conv2;
        nn::Linear temb_proj;
        nn::Conv2d skip;
        bool has_skip = false;
        ResBlock() = default;
        ResBlock(nn::ParamStore& ps, const std::string& name, int cin, int cout, int temb);
        nn::Tensor forward(const nn::Tensor& x, const nn::Tensor& temb) const;
    };

    DenoiserConfig cfg_;
    uint64_t init_seed_;
    nn::ParamStore params_;
    nn::Linear temb1_, temb2_;
    nn::Conv2d stem_;
    std::vector<ResBlock> enc_;
    std::vector<nn::Conv2d> down_;
    std::vector<nn::Conv2d> up_;
    std::vector<ResBlock> dec_;
    nn::GroupNorm head_gn_;
    nn::Conv2d head_;
};

// Spec-level single-patch wrapper with full validation.
GlyphImage predict_noise(NoisePredictor& model, const GlyphImage& xt_patch,
                         const GlyphImage& cond_patch, int t, const NoiseSchedule& sched);

struct PatchBatch {
    nn::Tensor x0;    // (B,C,p,p)
    nn::Tensor cond;  // (B,C,p,p)
};

PatchBatch to_patch_batch(const std::vector<PatchPair>& patches, int channels);

// Test seam: observes the (t, eps) draws of a training step.
struct TrainingTap {
    std::vector<int> ts;
    std::vector<std::vector<double>> eps;
};

// One optimizer step of L' = mean ||eps_hat - eps||^2 over the batch; samples
// t ~ U{1..T} and eps ~ N(0,I) per item. Returns the loss.
double training_step(NoisePredictor& model, const PatchBatch& batch,
                     const NoiseSchedule& sched, Rng& rng, nn::Adam* opt,
                     TrainingTap* tap = nullptr);

struct TrainOptions {
    int epochs = 1;
    int steps_per_epoch = 0;
    int batch = 8;
    uint64_t seed = 0;
    std::filesystem::path checkpoint_dir;  // empty: no checkpoints
    int checkpoint_every = 500;
    bool verbose = false;
};

// Initial-decipherment training: random aligned patch crops, uniform over the
// layout, per pair per step. Per-step RNG substreams make interrupted and
// resumed runs produce the identical batch sequence.
TrainStats train_initial(UNetDenoiser& model, nn::Adam& opt, const GlyphCorpus& corpus,
                         const std::vector<TrainingPairRef>& pairs,
                         const PatchLayout& layout, const NoiseSchedule& sched,
                         const TrainOptions& opts, TrainStats resume = {});

ArchiveManifest denoiser_manifest(const UNetDenoiser& model, const TrainStats& stats,
                                  uint64_t seed);

}  // namespace obsd
