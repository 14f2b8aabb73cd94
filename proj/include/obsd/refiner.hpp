#pragma once

#include <filesystem>
#include <optional>

#include <json.hpp>

#include "obsd/archive.hpp"
#include "obsd/denoiser.hpp"
#include "obsd/diffusion.hpp"
#include "obsd/glyph_data.hpp"
#include "obsd/nn/modules.hpp"

namespace obsd {

struct RefinerConfig {
    int image = 128;
    int channels = 3;
    int base_width = 24;     // UNet widths w, 2w, 4w at scales 1..3
    int content_width = 12;  // content pyramid widths cw, 2cw, 4cw
    int style_dim = 48;
    int dk = 24;          // attention key/value dim
    int ffn_hidden = 48;  // FFN hidden width producing 2K offset channels
    int t_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double lambda_offset = 0.5;
    double refine_strength = 0.03;  // fraction of t_steps noised during refine
    double lr = 2e-5;
    int batch = 4;
    int epochs = 1;
    double weight_decay = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    int steps_per_epoch = 0;
    int checkpoint_every = 500;

    void validate() const;
    nlohmann::json to_json() const;
    static RefinerConfig from_json(const nlohmann::json& j);
    nn::AdamConfig adam() const {
        return {lr, adam_beta1, adam_beta2, 1e-8, weight_decay};
    }
};

// Cross-attention offset head of one RSI block: Q from flattened reference
// features, K/V from flattened UNet features, FFN mapping attention output to
// per-position 2K deformation offsets.
struct RsiParams {
    nn::Linear phi_q, phi_k, phi_v;
    nn::Linear ffn1, ffn2;
    int dk = 0;
    RsiParams() = default;
    RsiParams(nn::ParamStore& ps, const std::string& name, int c_ref, int c_s, int dk,
              int ffn_hidden);
};

struct RsiOut {
    nn::Tensor f_attn;   // (HW, dv)
    nn::Tensor offsets;  // (1, 2K, H, W)
};

// Eq. 8/9 path for a single item: f_ref_i (C_ref,H,W), o_i (C_s,H,W).
RsiOut rsi_offsets(const nn::Tensor& f_ref_i, const nn::Tensor& o_i,
                   const RsiParams& params);

// Deformable rendering (3x3 DCN, bilinear, zero padding).
nn::Tensor deformable_render(const nn::Tensor& o_i, const nn::Tensor& offsets,
                             const nn::Tensor& kernel);

// Mean Euclidean norm of the per-position offset vectors.
double offset_loss(const nn::Tensor& offsets);

struct ContentFeaturePyramid {
    std::vector<nn::Tensor> scales;  // (1,C_i,H_i,W_i), spatial side halving
};

class RefinerModel {
public:
    RefinerModel(RefinerConfig cfg, uint64_t init_seed);

    // spec surface
    nn::Tensor encode_style(const GlyphImage& x_ref);  // (1, style_dim)
    std::pair<ContentFeaturePyramid, ContentFeaturePyramid> encode_content(
        const GlyphImage& x_o, const GlyphImage& x_ref);

    struct PredictOut {
        nn::Tensor eps_hat;               // (B,C,H,W)
        std::vector<nn::Tensor> offsets;  // per scale: (B,2K,H_i,W_i)
    };
    PredictOut predict(const nn::Tensor& xt, const nn::Tensor& x_o,
                       const nn::Tensor& x_ref, const std::vector<int>& ts,
                       bool training);

    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    const RefinerConfig& config() const { return cfg_; }
    uint64_t init_seed() const { return init_seed_; }

private:
    friend class RefinerEncoders;
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

    nn::Tensor style_embed(const nn::Tensor& x);                 // (B, style_dim)
    std::vector<nn::Tensor> content_pyramid(const nn::Tensor& x);  // 3 scales

    RefinerConfig cfg_;
    uint64_t init_seed_;
    nn::ParamStore params_;
    // style encoder
    nn::Conv2d se_c1_, se_c2_, se_c3_;
    nn::GroupNorm se_n1_, se_n2_, se_n3_;
    nn::Linear se_fc_;
    // content encoder (shared between x_o and x_ref)
    nn::Conv2d ce_c0_, ce_c1_, ce_c2_, ce_c3_;
    nn::GroupNorm ce_n0_, ce_n1_, ce_n2_, ce_n3_;
    // unet
    nn::Linear temb1_, temb2_;
    nn::Conv2d stem1_, stem_;
    std::vector<nn::Conv2d> mca_;           // 1x1 projections after concat
    std::vector<nn::Linear> film_scale_, film_shift_;
    std::vector<ResBlock> enc_;
    std::vector<RsiParams> rsi_;
    std::vector<nn::Tensor> rsi_kernel_;    // DCN weights per scale
    std::vector<nn::Conv2d> down_;
    std::vector<nn::Conv2d> up_;
    std::vector<ResBlock> dec_;
    nn::GroupNorm head_gn_;
    nn::Conv2d head_mid_, head_;
};

// One-to-one font-pair training; the loader rejects any condition-role image.
struct RefinerTrainOptions {
    int epochs = 1;
    int steps_per_epoch = 0;
    int batch = 4;
    uint64_t seed = 0;
    std::filesystem::path checkpoint_dir;
    int checkpoint_every = 500;
    bool verbose = false;
};

TrainStats train_refiner(RefinerModel& model, nn::Adam& opt, const GlyphCorpus& corpus,
                         const std::vector<TrainingPairRef>& font_pairs,
                         const RefinerTrainOptions& opts, TrainStats resume = {});

// Zero-shot refinement: partially noise x0 to t0 = round(strength * T), then
// denoise deterministically (z = 0) conditioned on (x0 content, x_ref style).
GlyphImage refine(const GlyphImage& x0_init, const GlyphImage& x_ref, RefinerModel& model,
                  uint64_t seed);

ArchiveManifest refiner_manifest(const RefinerModel& model, const TrainStats& stats,
                                 uint64_t seed);

}  // namespace obsd
