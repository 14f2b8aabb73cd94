#include "obsd/refiner.hpp"

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

void RefinerConfig::validate() const {
    if (image < 32 || image % 16 != 0)
        throw UsageError("refiner: image side must be a multiple of 16, >= 32");
    if (channels < 1 || base_width < 1 || content_width < 1 || style_dim < 1 || dk < 1 ||
        ffn_hidden < 1 || t_steps < 1 || batch < 1 || epochs < 0)
        throw UsageError("refiner: counts must be positive");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw UsageError("refiner: bad beta range");
    if (!(lambda_offset >= 0.0)) throw UsageError("refiner: bad lambda_offset");
    if (!(refine_strength > 0.0 && refine_strength <= 1.0))
        throw UsageError("refiner: refine_strength must be in (0, 1]");
}

json RefinerConfig::to_json() const {
    return {{"image", image},
            {"channels", channels},
            {"base_width", base_width},
            {"content_width", content_width},
            {"style_dim", style_dim},
            {"dk", dk},
            {"ffn_hidden", ffn_hidden},
            {"t_steps", t_steps},
            {"beta_start", beta_start},
            {"beta_end", beta_end},
            {"lambda_offset", lambda_offset},
            {"refine_strength", refine_strength},
            {"lr", lr},
            {"batch", batch},
            {"epochs", epochs},
            {"weight_decay", weight_decay},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"steps_per_epoch", steps_per_epoch},
            {"checkpoint_every", checkpoint_every}};
}

RefinerConfig RefinerConfig::from_json(const json& j) {
    RefinerConfig c;
    c.image = j.at("image");
    c.channels = j.at("channels");
    c.base_width = j.at("base_width");
    c.content_width = j.at("content_width");
    c.style_dim = j.at("style_dim");
    c.dk = j.at("dk");
    c.ffn_hidden = j.at("ffn_hidden");
    c.t_steps = j.at("t_steps");
    c.beta_start = j.at("beta_start");
    c.beta_end = j.at("beta_end");
    c.lambda_offset = j.at("lambda_offset");
    c.refine_strength = j.at("refine_strength");
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

RsiParams::RsiParams(nn::ParamStore& ps, const std::string& name, int c_ref, int c_s,
                     int dk_, int ffn_hidden) {
    dk = dk_;
    phi_q = nn::Linear(ps, name + ".phi_q", c_ref, dk);
    phi_k = nn::Linear(ps, name + ".phi_k", c_s, dk);
    phi_v = nn::Linear(ps, name + ".phi_v", c_s, dk);
    ffn1 = nn::Linear(ps, name + ".ffn1", dk, ffn_hidden);
    // zero-init last layer: offsets start at zero, rendering starts regular
    ffn2 = nn::Linear(ps, name + ".ffn2", ffn_hidden, 18, /*zero_init=*/true);
}

RsiOut rsi_offsets(const Tensor& f_ref_i, const Tensor& o_i, const RsiParams& params) {
    nn::require(f_ref_i.shape().size() == 3 && o_i.shape().size() == 3,
                "rsi_offsets: expected (C,H,W) feature maps");
    int h = f_ref_i.dim(1), w = f_ref_i.dim(2);
    nn::require(o_i.dim(1) == h && o_i.dim(2) == w,
                "rsi_offsets: spatial dims differ (" + nn::shape_str(f_ref_i.shape()) +
                    " vs " + nn::shape_str(o_i.shape()) + ")");
    nn::require(params.dk > 0, "rsi_offsets: dk must be positive");
    int hw = h * w;
    // flatten to (HW, C) sequences
    Tensor s_ref = nn::transpose2d(nn::reshape(f_ref_i, {f_ref_i.dim(0), hw}));
    Tensor s_s = nn::transpose2d(nn::reshape(o_i, {o_i.dim(0), hw}));
    Tensor q = params.phi_q(s_ref);
    Tensor k = params.phi_k(s_s);
    Tensor v = params.phi_v(s_s);
    Tensor scores =
        nn::mul_scalar(nn::matmul(q, nn::transpose2d(k)), 1.0 / std::sqrt((double)params.dk));
    Tensor attn = nn::softmax_rows(scores);
    Tensor f_attn = nn::matmul(attn, v);  // (HW, dv)
    Tensor hmid = nn::relu(params.ffn1(f_attn));
    Tensor off_seq = params.ffn2(hmid);  // (HW, 18)
    Tensor offsets = nn::reshape(nn::transpose2d(off_seq), {1, 18, h, w});
    return {f_attn, offsets};
}

Tensor deformable_render(const Tensor& o_i, const Tensor& offsets, const Tensor& kernel) {
    Tensor x = o_i;
    Tensor off = offsets;
    if (x.shape().size() == 3)
        x = nn::reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    if (off.shape().size() == 3)
        off = nn::reshape(off, {1, off.dim(0), off.dim(1), off.dim(2)});
    return nn::deformable_conv2d(x, off, kernel, Tensor());
}

double offset_loss(const Tensor& offsets) {
    nn::NoGradGuard guard;
    Tensor off = offsets;
    if (off.shape().size() == 3)
        off = nn::reshape(off, {1, off.dim(0), off.dim(1), off.dim(2)});
    for (double v : off.values())
        if (!std::isfinite(v)) throw UsageError("offset_loss: non-finite offsets");
    return nn::offset_mean_norm(off).item();
}

RefinerModel::ResBlock::ResBlock(nn::ParamStore& ps, const std::string& name, int cin,
                                 int cout, int temb) {
    gn1 = nn::GroupNorm(ps, name + ".gn1", cin, norm_groups(cin));
    conv1 = nn::Conv2d(ps, name + ".conv1", cin, cout, 3, 1, 1);
    temb_proj = nn::Linear(ps, name + ".temb", temb, cout);
    gn2 = nn::GroupNorm(ps, name + ".gn2", cout, norm_groups(cout));
    conv2 = nn::Conv2d(ps, name + ".conv2", cout, cout, 3, 1, 1);
    has_skip = cin != cout;
    if (has_skip) skip = nn::Conv2d(ps, name + ".skip", cin, cout, 1, 1, 0);
}

Tensor RefinerModel::ResBlock::forward(const Tensor& x, const Tensor& temb) const {
    Tensor h = conv1(nn::silu(gn1(x)));
    h = nn::add_sample_channel(h, temb_proj(temb));
    h = conv2(nn::silu(gn2(h)));
    return nn::add(h, has_skip ? skip(x) : x);
}

RefinerModel::RefinerModel(RefinerConfig cfg, uint64_t init_seed)
    : cfg_(cfg), init_seed_(init_seed), params_(init_seed) {
    cfg_.validate();
    int w = cfg_.base_width, cw = cfg_.content_width, ted = 2 * cfg_.base_width;
    int c = cfg_.channels;
    // style encoder
    se_c1_ = nn::Conv2d(params_, "se.c1", c, w, 3, 2, 1);
    se_n1_ = nn::GroupNorm(params_, "se.n1", w, norm_groups(w));
    se_c2_ = nn::Conv2d(params_, "se.c2", w, 2 * w, 3, 2, 1);
    se_n2_ = nn::GroupNorm(params_, "se.n2", 2 * w, norm_groups(2 * w));
    se_c3_ = nn::Conv2d(params_, "se.c3", 2 * w, 2 * w, 3, 2, 1);
    se_n3_ = nn::GroupNorm(params_, "se.n3", 2 * w, norm_groups(2 * w));
    se_fc_ = nn::Linear(params_, "se.fc", 2 * w, cfg_.style_dim);
    // content encoder; pyramid scales live at H/4, H/8, H/16
    ce_c0_ = nn::Conv2d(params_, "ce.c0", c, cw, 3, 2, 1);
    ce_n0_ = nn::GroupNorm(params_, "ce.n0", cw, norm_groups(cw));
    ce_c1_ = nn::Conv2d(params_, "ce.c1", cw, cw, 3, 2, 1);
    ce_n1_ = nn::GroupNorm(params_, "ce.n1", cw, norm_groups(cw));
    ce_c2_ = nn::Conv2d(params_, "ce.c2", cw, 2 * cw, 3, 2, 1);
    ce_n2_ = nn::GroupNorm(params_, "ce.n2", 2 * cw, norm_groups(2 * cw));
    ce_c3_ = nn::Conv2d(params_, "ce.c3", 2 * cw, 4 * cw, 3, 2, 1);
    ce_n3_ = nn::GroupNorm(params_, "ce.n3", 4 * cw, norm_groups(4 * cw));
    // unet over scales H/4, H/8, H/16
    temb1_ = nn::Linear(params_, "temb.fc1", w, ted);
    temb2_ = nn::Linear(params_, "temb.fc2", ted, ted);
    stem1_ = nn::Conv2d(params_, "stem1", c, w, 3, 2, 1);
    stem_ = nn::Conv2d(params_, "stem2", w, w, 3, 2, 1);
    int widths[3] = {w, 2 * w, 4 * w};
    int cwidths[3] = {cw, 2 * cw, 4 * cw};
    for (int l = 0; l < 3; ++l) {
        std::string nm = std::to_string(l);
        mca_.emplace_back(params_, "mca" + nm, widths[l] + cwidths[l], widths[l], 1, 1, 0);
        film_scale_.emplace_back(params_, "film_s" + nm, cfg_.style_dim, widths[l],
                                 /*zero_init=*/true);
        film_shift_.emplace_back(params_, "film_b" + nm, cfg_.style_dim, widths[l],
                                 /*zero_init=*/true);
        enc_.emplace_back(params_, "enc" + nm, widths[l], widths[l], ted);
        rsi_.emplace_back(params_, "rsi" + nm, cwidths[l], widths[l], cfg_.dk,
                          cfg_.ffn_hidden);
        rsi_kernel_.push_back(params_.make_fan_in("rsi" + nm + ".kernel",
                                                  {widths[l], widths[l], 3, 3},
                                                  widths[l] * 9));
        if (l < 2)
            down_.emplace_back(params_, "down" + nm, widths[l], widths[l + 1], 3, 2, 1);
    }
    for (int l = 1; l >= 0; --l) {
        std::string nm = std::to_string(l);
        up_.emplace_back(params_, "up" + nm, widths[l + 1], widths[l], 3, 1, 1);
        dec_.emplace_back(params_, "dec" + nm, 2 * widths[l], widths[l], ted);
    }
    head_gn_ = nn::GroupNorm(params_, "head.gn", w, norm_groups(w));
    head_mid_ = nn::Conv2d(params_, "head.mid", w, w, 3, 1, 1);
    head_ = nn::Conv2d(params_, "head.conv", w, c, 3, 1, 1, /*zero_init=*/true);
}

std::vector<Tensor> RefinerModel::content_pyramid(const Tensor& x) {
    std::vector<Tensor> scales;
    Tensor h = nn::silu(ce_n0_(ce_c0_(x)));
    h = nn::silu(ce_n1_(ce_c1_(h)));
    scales.push_back(h);
    h = nn::silu(ce_n2_(ce_c2_(h)));
    scales.push_back(h);
    h = nn::silu(ce_n3_(ce_c3_(h)));
    scales.push_back(h);
    return scales;
}

Tensor RefinerModel::style_embed(const Tensor& x) {
    Tensor h = nn::silu(se_n1_(se_c1_(x)));
    h = nn::silu(se_n2_(se_c2_(h)));
    h = nn::silu(se_n3_(se_c3_(h)));
    return se_fc_(nn::global_avgpool(h));
}

Tensor RefinerModel::encode_style(const GlyphImage& x_ref) {
    if (x_ref.h != cfg_.image || x_ref.w != cfg_.image || x_ref.c != cfg_.channels)
        throw UsageError("encode_style: image does not match configured dimensions");
    nn::NoGradGuard guard;
    return style_embed(Tensor::from(x_ref.pixels, {1, cfg_.channels, cfg_.image, cfg_.image}));
}

std::pair<ContentFeaturePyramid, ContentFeaturePyramid> RefinerModel::encode_content(
    const GlyphImage& x_o, const GlyphImage& x_ref) {
    for (const GlyphImage* im : {&x_o, &x_ref})
        if (im->h != cfg_.image || im->w != cfg_.image || im->c != cfg_.channels)
            throw UsageError("encode_content: image does not match configured dimensions");
    nn::NoGradGuard guard;
    ContentFeaturePyramid a, b;
    a.scales = content_pyramid(
        Tensor::from(x_o.pixels, {1, cfg_.channels, cfg_.image, cfg_.image}));
    b.scales = content_pyramid(
        Tensor::from(x_ref.pixels, {1, cfg_.channels, cfg_.image, cfg_.image}));
    return {a, b};
}

RefinerModel::PredictOut RefinerModel::predict(const Tensor& xt, const Tensor& x_o,
                                               const Tensor& x_ref,
                                               const std::vector<int>& ts, bool training) {
    nn::require(xt.shape().size() == 4 && xt.shape() == x_o.shape() &&
                    xt.shape() == x_ref.shape(),
                "refiner predict: xt/x_o/x_ref must share (B,C,H,W)");
    nn::require(xt.dim(1) == cfg_.channels && xt.dim(2) == cfg_.image &&
                    xt.dim(3) == cfg_.image,
                "refiner predict: shape does not match config");
    nn::require((int)ts.size() == xt.dim(0), "refiner predict: one timestep per item");
    std::optional<nn::NoGradGuard> guard;
    if (!training) guard.emplace();

    int b = xt.dim(0);
    Tensor temb = nn::timestep_embedding(ts, cfg_.base_width);
    temb = temb2_(nn::silu(temb1_(temb)));
    Tensor e_s = style_embed(x_ref);
    auto f_o = content_pyramid(x_o);
    auto f_ref = content_pyramid(x_ref);

    PredictOut out;
    Tensor h = stem_(nn::silu(stem1_(xt)));
    std::vector<Tensor> skips;
    for (int l = 0; l < 3; ++l) {
        h = mca_[l](nn::concat_channels(h, f_o[l]));
        h = nn::film(h, film_scale_[l](e_s), film_shift_[l](e_s));
        h = enc_[l].forward(h, temb);
        // reference-structure interaction, one item at a time
        std::vector<Tensor> rendered, offs;
        for (int i = 0; i < b; ++i) {
            Tensor oi = nn::select_batch(h, i);
            Tensor fri = nn::select_batch(f_ref[l], i);
            RsiOut r = rsi_offsets(fri, oi, rsi_[l]);
            Tensor i_f = deformable_render(oi, r.offsets, rsi_kernel_[l]);
            rendered.push_back(nn::reshape(i_f, {h.dim(1), h.dim(2), h.dim(3)}));
            offs.push_back(nn::reshape(r.offsets, {18, h.dim(2), h.dim(3)}));
        }
        h = nn::add(h, nn::stack_batch(rendered));
        out.offsets.push_back(nn::stack_batch(offs));
        if (l < 2) {
            skips.push_back(h);
            h = down_[l](h);
        }
    }
    for (size_t i = 0; i < dec_.size(); ++i) {
        h = up_[i](nn::upsample2x(h));
        h = dec_[i].forward(nn::concat_channels(h, skips[skips.size() - 1 - i]), temb);
    }
    h = head_mid_(nn::upsample2x(nn::silu(head_gn_(h))));
    out.eps_hat = head_(nn::upsample2x(nn::silu(h)));
    return out;
}

TrainStats train_refiner(RefinerModel& model, nn::Adam& opt, const GlyphCorpus& corpus,
                         const std::vector<TrainingPairRef>& font_pairs,
                         const RefinerTrainOptions& opts, TrainStats resume) {
    if (font_pairs.empty()) throw DataError("train_refiner: empty corpus");
    const auto& cfg = model.config();
    // zero-shot guard: the refiner never sees condition-role (ancient) images
    for (auto& ref : font_pairs) {
        if (ref.cond_index >= 0)
            throw DataError("train_refiner: corpus contains condition-role pairs");
        TrainingPair pair = resolve_pair(corpus, ref);
        if (pair.condition.role == Role::condition || pair.target.role == Role::condition)
            throw DataError("train_refiner: condition-role image in font pairs");
    }
    NoiseSchedule sched = make_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end);
    int spe = opts.steps_per_epoch > 0
                  ? opts.steps_per_epoch
                  : std::max<int>(1, (int)((font_pairs.size() + opts.batch - 1) / opts.batch));
    int64_t total_steps = (int64_t)opts.epochs * spe;

    size_t stride = (size_t)cfg.channels * cfg.image * cfg.image;
    TrainStats stats = std::move(resume);
    Rng base(opts.seed);
    while (stats.steps < total_steps) {
        Rng step_rng = base.derive(0xEF000000 + (uint64_t)stats.steps);
        int bsz = opts.batch;
        Tensor x0 = Tensor::zeros({bsz, cfg.channels, cfg.image, cfg.image});
        Tensor x_o = Tensor::zeros({bsz, cfg.channels, cfg.image, cfg.image});
        Tensor x_ref = Tensor::zeros({bsz, cfg.channels, cfg.image, cfg.image});
        std::vector<int> ts(bsz);
        Tensor eps = Tensor::zeros(x0.shape());
        Tensor xt = Tensor::zeros(x0.shape());
        for (int i = 0; i < bsz; ++i) {
            const auto& ref = font_pairs[step_rng.bounded(font_pairs.size())];
            TrainingPair pair = resolve_pair(corpus, ref);
            // style reference: the target-style rendering of another category
            int other = (int)step_rng.bounded(corpus.categories.size());
            TrainingPairRef rref = ref;
            rref.category = other;
            TrainingPair refpair = resolve_pair(corpus, rref);
            for (size_t j = 0; j < stride; ++j) {
                x0.data()[i * stride + j] = pair.target.pixels[j];
                x_o.data()[i * stride + j] = pair.condition.pixels[j];
                x_ref.data()[i * stride + j] = refpair.target.pixels[j];
            }
            ts[i] = 1 + (int)step_rng.bounded((uint64_t)sched.T);
            step_rng.fill_normal(eps.data() + i * stride, stride);
            double sg = std::sqrt(sched.gamma(ts[i]));
            double s1g = std::sqrt(1.0 - sched.gamma(ts[i]));
            for (size_t j = 0; j < stride; ++j)
                xt.data()[i * stride + j] =
                    sg * x0.data()[i * stride + j] + s1g * eps.data()[i * stride + j];
        }
        auto out = model.predict(xt, x_o, x_ref, ts, true);
        Tensor loss = nn::mse(out.eps_hat, eps);
        for (auto& off : out.offsets)
            loss = nn::add(loss, nn::mul_scalar(nn::offset_mean_norm(off),
                                                cfg.lambda_offset / out.offsets.size()));
        double loss_val = loss.item();
        if (!std::isfinite(loss_val))
            throw DivergenceError("refiner training loss is not finite");
        opt.zero_grad();
        nn::backward(loss);
        opt.step();
        stats.loss_history.push_back(loss_val);
        ++stats.steps;
        if (stats.steps % spe == 0) ++stats.epochs_done;
        if (!opts.checkpoint_dir.empty() &&
            (stats.steps % opts.checkpoint_every == 0 || stats.steps == total_steps))
            save_archive(opts.checkpoint_dir, refiner_manifest(model, stats, opts.seed),
                         model.params(), &opt);
        if (opts.verbose && stats.steps % 20 == 0)
            std::cerr << "refiner step " << stats.steps << "/" << total_steps << " loss "
                      << loss_val << "\n";
    }
    return stats;
}

GlyphImage refine(const GlyphImage& x0_init, const GlyphImage& x_ref, RefinerModel& model,
                  uint64_t seed) {
    const auto& cfg = model.config();
    for (const GlyphImage* im : {&x0_init, &x_ref})
        if (im->h != cfg.image || im->w != cfg.image || im->c != cfg.channels)
            throw UsageError("refine: image dimensions do not match refiner config");
    NoiseSchedule sched = make_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end);
    int t0 = std::max(1, (int)std::lround(cfg.refine_strength * cfg.t_steps));

    size_t numel = (size_t)cfg.channels * cfg.image * cfg.image;
    Rng rng(seed);
    std::vector<double> x(numel);
    {
        std::vector<double> eps(numel);
        rng.fill_normal(eps.data(), numel);
        double sg = std::sqrt(sched.gamma(t0)), s1g = std::sqrt(1.0 - sched.gamma(t0));
        for (size_t i = 0; i < numel; ++i)
            x[i] = sg * x0_init.pixels[i] + s1g * eps[i];
    }
    Tensor x_o = Tensor::from(x0_init.pixels, {1, cfg.channels, cfg.image, cfg.image});
    Tensor ref = Tensor::from(x_ref.pixels, {1, cfg.channels, cfg.image, cfg.image});
    for (int t = t0; t >= 1; --t) {
        Tensor xt = Tensor::from(std::vector<double>(x), {1, cfg.channels, cfg.image, cfg.image});
        auto out = model.predict(xt, x_o, ref, {t}, false);
        double a = sched.alpha(t), g = sched.gamma(t);
        double inv_sa = 1.0 / std::sqrt(a);
        double coef = (1.0 - a) / std::sqrt(1.0 - g);
        for (size_t i = 0; i < numel; ++i) {
            double v = out.eps_hat.values()[i];
            if (!std::isfinite(v)) throw DivergenceError("refine: non-finite prediction");
            x[i] = inv_sa * (x[i] - coef * v);
        }
    }
    GlyphImage out(cfg.image, cfg.image, cfg.channels, Role::generated);
    out.category = x0_init.category;
    for (size_t i = 0; i < numel; ++i) out.pixels[i] = (float)std::clamp(x[i], -1.0, 1.0);
    return out;
}

ArchiveManifest refiner_manifest(const RefinerModel& model, const TrainStats& stats,
                                 uint64_t seed) {
    ArchiveManifest m;
    m.kind = "refiner";
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
