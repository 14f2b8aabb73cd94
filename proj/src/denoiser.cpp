#include "obsd/denoiser.hpp"

#include <cmath>
#include <iostream>

#include "obsd/sha256.hpp"

namespace obsd {

using nn::Tensor;
using nlohmann::json;

namespace {
int norm_groups(int channels) {
    for (int g = std::min(8, channels); g >= 2; --g)
        if (channels % g == 0) return g;
    return 1;
}
}  // namespace

void DenoiserConfig::validate() const {
    if (patch < 4) throw UsageError("denoiser: patch size too small");
    if (channels < 1 || base_width < 1 || levels < 1 || time_embed_dim < 2 || batch < 1 ||
        epochs < 0 || checkpoint_every < 1)
        throw UsageError("denoiser: counts must be positive");
    if (time_embed_dim % 2 != 0) throw UsageError("denoiser: time_embed_dim must be even");
    if (patch % (1 << (levels - 1)) != 0)
        throw UsageError("denoiser: patch size must be divisible by 2^(levels-1)");
    if (!(lr >= 0.0) || !(weight_decay >= 0.0))
        throw UsageError("denoiser: negative rates");
}

json DenoiserConfig::to_json() const {
    return {{"patch", patch},
            {"channels", channels},
            {"base_width", base_width},
            {"levels", levels},
            {"time_embed_dim", time_embed_dim},
            {"lr", lr},
            {"batch", batch},
            {"epochs", epochs},
            {"weight_decay", weight_decay},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"steps_per_epoch", steps_per_epoch},
            {"checkpoint_every", checkpoint_every}};
}

DenoiserConfig DenoiserConfig::from_json(const json& j) {
    DenoiserConfig c;
    c.patch = j.at("patch");
    c.channels = j.at("channels");
    c.base_width = j.at("base_width");
    c.levels = j.at("levels");
    c.time_embed_dim = j.at("time_embed_dim");
    c.lr = j.at("lr");
    c.batch = j.at("batch");
    c.epochs = j.at("epochs");
    c.weight_decay = j.at("weight_decay");
    c.adam_beta1 = j.at("adam_beta1");
    c.adam_beta2 = j.at("adam_beta2");
    c.steps_per_epoch = j.at("steps_per_epoch");
    c.checkpoint_every = j.at("checkpoint_every");
    c.validate();
    return c;
}

UNetDenoiser::ResBlock::ResBlock(nn::ParamStore& ps, const std::string& name, int cin,
                                 int cout, int temb) {
    gn1 = nn::GroupNorm(ps, name + ".gn1", cin, norm_groups(cin));
    conv1 = nn::Conv2d(ps, name + ".conv1", cin, cout, 3, 1, 1);
    temb_proj = nn::Linear(ps, name + ".temb", temb, cout);
    gn2 = nn::GroupNorm(ps, name + ".gn2", cout, norm_groups(cout));
    conv2 = nn::Conv2d(ps, name + ".conv2", cout, cout, 3, 1, 1);
    has_skip = cin != cout;
    if (has_skip) skip = nn::Conv2d(ps, name + ".skip", cin, cout, 1, 1, 0);
}

Tensor UNetDenoiser::ResBlock::forward(const Tensor& x, const Tensor& temb) const {
    Tensor h = conv1(nn::silu(gn1(x)));
    h = nn::add_sample_channel(h, temb_proj(temb));
    h = conv2(nn::silu(gn2(h)));
    return nn::add(h, has_skip ? skip(x) : x);
}

UNetDenoiser::UNetDenoiser(DenoiserConfig cfg, uint64_t init_seed)
    : cfg_(cfg), init_seed_(init_seed), params_(init_seed) {
    cfg_.validate();
    int w = cfg_.base_width, ted = cfg_.time_embed_dim;
    temb1_ = nn::Linear(params_, "temb.fc1", w, ted);
    temb2_ = nn::Linear(params_, "temb.fc2", ted, ted);
    stem_ = nn::Conv2d(params_, "stem", 2 * cfg_.channels, w, 3, 1, 1);
    std::vector<int> widths;
    for (int l = 0; l < cfg_.levels; ++l) widths.push_back(w << l);
    for (int l = 0; l < cfg_.levels; ++l) {
        enc_.emplace_back(params_, "enc" + std::to_string(l), widths[l], widths[l], ted);
        if (l + 1 < cfg_.levels)
            down_.emplace_back(params_, "down" + std::to_string(l), widths[l],
                               widths[l + 1], 3, 2, 1);
    }
    for (int l = cfg_.levels - 2; l >= 0; --l) {
        up_.emplace_back(params_, "up" + std::to_string(l), widths[l + 1], widths[l], 3,
                         1, 1);
        dec_.emplace_back(params_, "dec" + std::to_string(l), 2 * widths[l], widths[l],
                          ted);
    }
    head_gn_ = nn::GroupNorm(params_, "head.gn", w, norm_groups(w));
    head_ = nn::Conv2d(params_, "head.conv", w, cfg_.channels, 3, 1, 1, /*zero_init=*/true);
}

Tensor UNetDenoiser::predict(const Tensor& xt, const Tensor& cond,
                             const std::vector<int>& ts, bool training) {
    nn::require(xt.shape().size() == 4 && cond.shape() == xt.shape(),
                "denoiser: xt/cond must be matching (B,C,p,p) tensors");
    nn::require(xt.dim(1) == cfg_.channels && xt.dim(2) == cfg_.patch &&
                    xt.dim(3) == cfg_.patch,
                "denoiser: patch shape " + nn::shape_str(xt.shape()) +
                    " does not match config");
    nn::require((int)ts.size() == xt.dim(0), "denoiser: one timestep per batch item");
    for (int t : ts)
        nn::require(t >= 1, "denoiser: timesteps are 1-based");

    std::optional<nn::NoGradGuard> guard;
    if (!training) guard.emplace();

    Tensor temb = nn::timestep_embedding(ts, cfg_.base_width);
    temb = temb2_(nn::silu(temb1_(temb)));

    Tensor h = stem_(nn::concat_channels(xt, cond));
    std::vector<Tensor> skips;
    for (int l = 0; l < cfg_.levels; ++l) {
        h = enc_[l].forward(h, temb);
        if (l + 1 < cfg_.levels) {
            skips.push_back(h);
            h = down_[l](h);
        }
    }
    for (size_t i = 0; i < dec_.size(); ++i) {
        h = up_[i](nn::upsample2x(h));
        h = dec_[i].forward(nn::concat_channels(h, skips[skips.size() - 1 - i]), temb);
    }
    return head_(nn::silu(head_gn_(h)));
}

void UNetDenoiser::check_finite() const {
    for (auto& [name, t] : params_.items())
        for (double v : t.values())
            if (!std::isfinite(v))
                throw DivergenceError("non-finite parameter in " + name);
}

GlyphImage predict_noise(NoisePredictor& model, const GlyphImage& xt_patch,
                         const GlyphImage& cond_patch, int t, const NoiseSchedule& sched) {
    if (xt_patch.h != cond_patch.h || xt_patch.w != cond_patch.w ||
        xt_patch.c != cond_patch.c)
        throw UsageError("predict_noise: patch shape mismatch");
    if (xt_patch.h != model.patch_size() || xt_patch.w != model.patch_size() ||
        xt_patch.c != model.channels())
        throw UsageError("predict_noise: patch does not match model");
    sched.check(t);
    if (auto* unet = dynamic_cast<UNetDenoiser*>(&model)) unet->check_finite();
    Tensor xt = Tensor::from(xt_patch.pixels, {1, xt_patch.c, xt_patch.h, xt_patch.w});
    Tensor cond =
        Tensor::from(cond_patch.pixels, {1, cond_patch.c, cond_patch.h, cond_patch.w});
    Tensor out = model.predict(xt, cond, {t}, false);
    GlyphImage eps(xt_patch.h, xt_patch.w, xt_patch.c, Role::generated);
    for (size_t i = 0; i < eps.pixels.size(); ++i) {
        double v = out.values()[i];
        if (!std::isfinite(v)) throw DivergenceError("predict_noise: non-finite output");
        eps.pixels[i] = (float)v;
    }
    return eps;
}

PatchBatch to_patch_batch(const std::vector<PatchPair>& patches, int channels) {
    if (patches.empty()) throw UsageError("empty batch");
    int p = patches[0].target_patch.h;
    int b = (int)patches.size();
    Tensor x0 = Tensor::zeros({b, channels, p, p});
    Tensor cond = Tensor::zeros({b, channels, p, p});
    size_t stride = (size_t)channels * p * p;
    for (int i = 0; i < b; ++i) {
        const auto& pp = patches[i];
        if (pp.target_patch.h != p || pp.cond_patch.h != p ||
            pp.target_patch.c != channels || pp.cond_patch.c != channels)
            throw UsageError("batch patches not aligned");
        for (size_t j = 0; j < stride; ++j) {
            x0.data()[i * stride + j] = pp.target_patch.pixels[j];
            cond.data()[i * stride + j] = pp.cond_patch.pixels[j];
        }
    }
    return {x0, cond};
}

double training_step(NoisePredictor& model, const PatchBatch& batch,
                     const NoiseSchedule& sched, Rng& rng, nn::Adam* opt,
                     TrainingTap* tap) {
    const auto& shape = batch.x0.shape();
    nn::require(shape.size() == 4 && batch.cond.shape() == shape,
                "training_step: bad batch shapes");
    int b = shape[0];
    if (b < 1) throw UsageError("training_step: empty batch");
    size_t stride = (size_t)batch.x0.numel() / b;

    std::vector<int> ts(b);
    Tensor eps = Tensor::zeros(shape);
    Tensor xt = Tensor::zeros(shape);
    for (int i = 0; i < b; ++i) {
        ts[i] = 1 + (int)rng.bounded((uint64_t)sched.T);
        rng.fill_normal(eps.data() + i * stride, stride);
        double sg = std::sqrt(sched.gamma(ts[i]));
        double s1g = std::sqrt(1.0 - sched.gamma(ts[i]));
        for (size_t j = 0; j < stride; ++j)
            xt.data()[i * stride + j] =
                sg * batch.x0.data()[i * stride + j] + s1g * eps.data()[i * stride + j];
    }
    if (tap) {
        tap->ts = ts;
        tap->eps.clear();
        for (int i = 0; i < b; ++i)
            tap->eps.emplace_back(eps.data() + i * stride, eps.data() + (i + 1) * stride);
    }

    Tensor eps_hat = model.predict(xt, batch.cond, ts, true);
    Tensor loss = nn::mse(eps_hat, eps);
    double loss_val = loss.item();
    if (!std::isfinite(loss_val))
        throw DivergenceError("training loss is not finite (diverged at step " +
                              std::to_string(opt ? opt->step_count() : -1) + ")");
    if (opt) {
        opt->zero_grad();
        nn::backward(loss);
        opt->step();
    }
    return loss_val;
}

TrainStats train_initial(UNetDenoiser& model, nn::Adam& opt, const GlyphCorpus& corpus,
                         const std::vector<TrainingPairRef>& pairs,
                         const PatchLayout& layout, const NoiseSchedule& sched,
                         const TrainOptions& opts, TrainStats resume) {
    if (pairs.empty()) throw DataError("train_initial: empty dataset");
    if (layout.patch != model.patch_size())
        throw UsageError("train_initial: layout patch size does not match model");
    int spe = opts.steps_per_epoch > 0
                  ? opts.steps_per_epoch
                  : std::max<int>(1, (int)((pairs.size() + opts.batch - 1) / opts.batch));
    int64_t total_steps = (int64_t)opts.epochs * spe;

    TrainStats stats = std::move(resume);
    Rng base(opts.seed);
    while (stats.steps < total_steps) {
        // per-step substream: resume-safe and order-deterministic
        Rng step_rng = base.derive(0xABCD0000 + (uint64_t)stats.steps);
        std::vector<PatchPair> batch_patches;
        batch_patches.reserve(opts.batch);
        for (int i = 0; i < opts.batch; ++i) {
            const auto& ref = pairs[step_rng.bounded(pairs.size())];
            TrainingPair pair = resolve_pair(corpus, ref);
            int d = (int)step_rng.bounded((uint64_t)layout.d);
            batch_patches.push_back({crop_patch(pair.target, layout, d),
                                     crop_patch(pair.condition, layout, d), d});
        }
        PatchBatch batch = to_patch_batch(batch_patches, model.channels());
        double loss;
        try {
            loss = training_step(model, batch, sched, step_rng, &opt);
        } catch (const DivergenceError&) {
            // leave the last good checkpoint in place
            throw;
        }
        stats.loss_history.push_back(loss);
        ++stats.steps;
        if (stats.steps % spe == 0) ++stats.epochs_done;
        if (!opts.checkpoint_dir.empty() &&
            (stats.steps % opts.checkpoint_every == 0 || stats.steps == total_steps)) {
            save_archive(opts.checkpoint_dir, denoiser_manifest(model, stats, opts.seed),
                         model.params(), &opt);
        }
        if (opts.verbose && stats.steps % 50 == 0)
            std::cerr << "step " << stats.steps << "/" << total_steps
                      << " loss " << loss << "\n";
    }
    return stats;
}

ArchiveManifest denoiser_manifest(const UNetDenoiser& model, const TrainStats& stats,
                                  uint64_t seed) {
    ArchiveManifest m;
    m.kind = "denoiser";
    m.config = model.config().to_json();
    m.config_digest = sha256_hex(m.config.dump());
    m.seed = seed;
    m.epoch = stats.epochs_done;
    m.step = stats.steps;
    m.loss_history = stats.loss_history;
    m.extra = {{"init_seed", model.init_seed()}};
    return m;
}

}  // namespace obsd
