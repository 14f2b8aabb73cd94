#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "obsd/denoiser.hpp"
#include "obsd/glyph_data.hpp"
#include "test_util.hpp"

using namespace obsd;
using nn::Tensor;
namespace fs = std::filesystem;
using obsd::testutil::max_rel_grad_err;

namespace {

// scripted stand-in model driven by a lambda
struct ScriptedPredictor : NoisePredictor {
    int p, c;
    std::function<Tensor(const Tensor&, const Tensor&, const std::vector<int>&)> fn;
    ScriptedPredictor(int p_, int c_, decltype(fn) f) : p(p_), c(c_), fn(std::move(f)) {}
    int patch_size() const override { return p; }
    int channels() const override { return c; }
    Tensor predict(const Tensor& xt, const Tensor& cond, const std::vector<int>& ts,
                   bool) override {
        return fn(xt, cond, ts);
    }
};

DenoiserConfig tiny_cfg(int patch = 8, int width = 4, int levels = 1) {
    DenoiserConfig cfg;
    cfg.patch = patch;
    cfg.channels = 1;
    cfg.base_width = width;
    cfg.levels = levels;
    cfg.time_embed_dim = 8;
    cfg.batch = 4;
    return cfg;
}

PatchBatch random_batch(Rng& rng, int b, int c, int p) {
    std::vector<PatchPair> pp;
    for (int i = 0; i < b; ++i) {
        GlyphImage x0(p, p, c, Role::target), cond(p, p, c, Role::condition);
        for (auto& v : x0.pixels) v = (float)rng.uniform(-1, 1);
        for (auto& v : cond.pixels) v = (float)rng.uniform(-1, 1);
        pp.push_back({x0, cond, 0});
    }
    return to_patch_batch(pp, c);
}

}  // namespace

TEST_CASE("predict_noise shape and determinism contracts") {
    auto sched = make_schedule(100, 1e-4, 0.02);
    UNetDenoiser model(tiny_cfg(8, 4, 2), 7);
    GlyphImage xt(8, 8, 1, Role::generated), cond(8, 8, 1, Role::condition);
    Rng rng(3);
    rng.fill_normal(xt.pixels.data(), xt.pixels.size());
    rng.fill_normal(cond.pixels.data(), cond.pixels.size());
    auto a = predict_noise(model, xt, cond, 50, sched);
    CHECK(a.h == 8);
    CHECK(a.w == 8);
    CHECK(a.c == 1);
    for (float v : a.pixels) CHECK(std::isfinite(v));
    auto b = predict_noise(model, xt, cond, 50, sched);
    CHECK(a.pixels == b.pixels);

    GlyphImage bad(4, 4, 1, Role::condition);
    CHECK_THROWS_AS(predict_noise(model, xt, bad, 50, sched), UsageError);
    CHECK_THROWS_AS(predict_noise(model, xt, cond, 0, sched), UsageError);
    CHECK_THROWS_AS(predict_noise(model, xt, cond, 101, sched), UsageError);
    auto first = model.params().items()[0].first;
    model.params().get(first).values()[0] = NAN;
    CHECK_THROWS_AS(predict_noise(model, xt, cond, 50, sched), DivergenceError);
}

TEST_CASE("training loss of the identity script matches the direct oracle") {
    auto sched = make_schedule(50, 1e-3, 0.05);
    ScriptedPredictor model(6, 1, [](const Tensor& xt, const Tensor&,
                                     const std::vector<int>&) { return xt; });
    Rng rng(11);
    auto batch = random_batch(rng, 3, 1, 6);
    Rng train_rng(21);
    TrainingTap tap;
    double loss = training_step(model, batch, sched, train_rng, nullptr, &tap);
    // oracle: rebuild xt from the tapped (t, eps) and average ||xt - eps||^2
    double want = 0.0;
    size_t stride = 36;
    for (int i = 0; i < 3; ++i) {
        double sg = std::sqrt(sched.gamma(tap.ts[i]));
        double s1g = std::sqrt(1.0 - sched.gamma(tap.ts[i]));
        for (size_t j = 0; j < stride; ++j) {
            double xt = sg * batch.x0.data()[i * stride + j] + s1g * tap.eps[i][j];
            double d = xt - tap.eps[i][j];
            want += d * d;
        }
    }
    want /= (3.0 * stride);
    CHECK(loss == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("script that returns the tapped noise reaches zero loss") {
    auto sched = make_schedule(50, 1e-3, 0.05);
    TrainingTap tap;
    ScriptedPredictor model(6, 1,
                            [&tap](const Tensor& xt, const Tensor&,
                                   const std::vector<int>&) {
                                Tensor out = Tensor::zeros(xt.shape());
                                size_t stride = (size_t)out.numel() / xt.dim(0);
                                for (int i = 0; i < xt.dim(0); ++i)
                                    std::copy(tap.eps[i].begin(), tap.eps[i].end(),
                                              out.data() + i * stride);
                                return out;
                            });
    Rng rng(31);
    auto batch = random_batch(rng, 4, 1, 6);
    Rng train_rng(41);
    double loss = training_step(model, batch, sched, train_rng, nullptr, &tap);
    CHECK(loss == 0.0);
}

TEST_CASE("all-zero script converges to unit loss over many draws") {
    auto sched = make_schedule(50, 1e-3, 0.05);
    ScriptedPredictor model(6, 1, [](const Tensor& xt, const Tensor&,
                                     const std::vector<int>&) {
        return Tensor::zeros(xt.shape());
    });
    Rng rng(51);
    Rng train_rng(61);
    GlyphImage zero(6, 6, 1, Role::target, 0.0f);
    std::vector<PatchPair> pp(8, PatchPair{zero, zero, 0});
    auto batch = to_patch_batch(pp, 1);
    double acc = 0.0;
    int reps = 300;
    for (int i = 0; i < reps; ++i) {
        // x0 = 0 so xt is pure scaled noise; loss = mean ||eps||^2 -> 1
        acc += training_step(model, batch, sched, train_rng, nullptr);
    }
    CHECK(acc / reps == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("training_step surfaces divergence and empty batches") {
    auto sched = make_schedule(10, 1e-3, 0.05);
    ScriptedPredictor nan_model(4, 1, [](const Tensor& xt, const Tensor&,
                                         const std::vector<int>&) {
        Tensor out = Tensor::zeros(xt.shape());
        out.data()[0] = NAN;
        return out;
    });
    Rng rng(1);
    auto batch = random_batch(rng, 2, 1, 4);
    Rng train_rng(2);
    CHECK_THROWS_AS(training_step(nan_model, batch, sched, train_rng, nullptr),
                    DivergenceError);
    CHECK_THROWS_AS(to_patch_batch({}, 1), UsageError);
}

TEST_CASE("denoiser gradient check on a sub-1k-parameter model") {
    auto cfg = tiny_cfg(8, 4, 1);
    UNetDenoiser model(cfg, 17);
    CHECK(model.params().total_parameters() <= 1000);
    auto sched = make_schedule(20, 1e-3, 0.05);
    Rng rng(71);
    auto batch = random_batch(rng, 2, 1, 8);
    // freeze the (t, eps) draws so the loss is a pure function of parameters
    std::vector<int> ts{3, 17};
    Tensor eps = Tensor::zeros(batch.x0.shape());
    Rng noise_rng(81);
    noise_rng.fill_normal(eps.data(), (size_t)eps.numel());
    auto loss_fn = [&]() {
        Tensor xt = Tensor::zeros(batch.x0.shape());
        size_t stride = (size_t)xt.numel() / 2;
        for (int i = 0; i < 2; ++i) {
            double sg = std::sqrt(sched.gamma(ts[i]));
            double s1g = std::sqrt(1.0 - sched.gamma(ts[i]));
            for (size_t j = 0; j < stride; ++j)
                xt.data()[i * stride + j] = sg * batch.x0.data()[i * stride + j] +
                                            s1g * eps.data()[i * stride + j];
        }
        return nn::mse(model.predict(xt, batch.cond, ts, true), eps);
    };
    CHECK(max_rel_grad_err(loss_fn, model.params().all(), 1e-5) < 1e-3);
}

TEST_CASE("condition ablation changes a trained model's output") {
    auto cfg = tiny_cfg(8, 6, 2);
    cfg.lr = 3e-3;
    UNetDenoiser model(cfg, 23);
    auto sched = make_schedule(20, 1e-3, 0.05);
    nn::Adam opt(model.params().all(), cfg.adam());
    Rng rng(91);
    // target equals condition: the model must learn to use the condition
    for (int step = 0; step < 60; ++step) {
        std::vector<PatchPair> pp;
        for (int i = 0; i < 4; ++i) {
            GlyphImage cond(8, 8, 1, Role::condition);
            for (auto& v : cond.pixels) v = (float)rng.uniform(-1, 1);
            pp.push_back({cond, cond, 0});
        }
        auto batch = to_patch_batch(pp, 1);
        training_step(model, batch, sched, rng, &opt);
    }
    GlyphImage xt(8, 8, 1, Role::generated), cond(8, 8, 1, Role::condition),
        zero(8, 8, 1, Role::condition, 0.0f);
    rng.fill_normal(xt.pixels.data(), xt.pixels.size());
    for (auto& v : cond.pixels) v = (float)rng.uniform(-1, 1);
    auto with_cond = predict_noise(model, xt, cond, 10, sched);
    auto without = predict_noise(model, xt, zero, 10, sched);
    int differing = 0;
    for (size_t i = 0; i < with_cond.pixels.size(); ++i)
        if (std::abs(with_cond.pixels[i] - without.pixels[i]) > 1e-4) ++differing;
    CHECK(differing >= (int)(0.01 * with_cond.pixels.size()));
}

TEST_CASE("train_initial with lr 0 leaves parameters unchanged") {
    auto corpus = synth_corpus(3, 2, 1, 5, 16, 16, 1);
    auto pairs = make_many_to_one_pairs(corpus);
    auto layout = build_patch_layout(16, 16, 8, 8);
    auto cfg = tiny_cfg(8, 4, 1);
    cfg.lr = 0.0;
    UNetDenoiser model(cfg, 3);
    std::vector<std::vector<double>> before;
    for (auto& [_, t] : model.params().items()) before.push_back(t.values());
    nn::Adam opt(model.params().all(), cfg.adam());
    auto sched = make_schedule(10, 1e-3, 0.05);
    TrainOptions opts;
    opts.epochs = 1;
    opts.batch = 4;
    opts.seed = 9;
    train_initial(model, opt, corpus, pairs, layout, sched, opts);
    size_t i = 0;
    for (auto& [_, t] : model.params().items()) CHECK(t.values() == before[i++]);
}

TEST_CASE("train_initial checkpointing, resume continuity and round trip") {
    auto corpus = synth_corpus(3, 2, 1, 5, 16, 16, 1);
    auto pairs = make_many_to_one_pairs(corpus);
    auto layout = build_patch_layout(16, 16, 8, 8);
    auto cfg = tiny_cfg(8, 4, 1);
    cfg.lr = 1e-3;
    auto sched = make_schedule(10, 1e-3, 0.05);

    fs::path dir = fs::temp_directory_path() / "obsd_test_train_ckpt";
    fs::remove_all(dir);

    // uninterrupted run: 2 epochs x 6 steps
    UNetDenoiser full(cfg, 3);
    nn::Adam full_opt(full.params().all(), cfg.adam());
    TrainOptions opts;
    opts.epochs = 2;
    opts.steps_per_epoch = 6;
    opts.batch = 4;
    opts.seed = 9;
    auto full_stats = train_initial(full, full_opt, corpus, pairs, layout, sched, opts);
    CHECK(full_stats.steps == 12);

    // interrupted at step 6, checkpointed, then resumed
    UNetDenoiser part(cfg, 3);
    nn::Adam part_opt(part.params().all(), cfg.adam());
    TrainOptions half = opts;
    half.epochs = 1;
    half.checkpoint_dir = dir;
    half.checkpoint_every = 3;
    auto stats1 = train_initial(part, part_opt, corpus, pairs, layout, sched, half);
    CHECK(stats1.steps == 6);

    UNetDenoiser resumed(cfg, 99);  // init seed differs; load overwrites
    nn::Adam res_opt(resumed.params().all(), cfg.adam());
    auto manifest = load_archive(dir, resumed.params(), &res_opt);
    CHECK(manifest.step == 6);
    TrainStats carry;
    carry.steps = manifest.step;
    carry.epochs_done = manifest.epoch;
    carry.loss_history = manifest.loss_history;
    auto stats2 =
        train_initial(resumed, res_opt, corpus, pairs, layout, sched, opts, carry);
    CHECK(stats2.steps == 12);
    CHECK(stats2.loss_history.size() == 12);
    // resumed loss curve continues the uninterrupted one exactly
    for (int i = 0; i < 12; ++i)
        CHECK(stats2.loss_history[i] == doctest::Approx(full_stats.loss_history[i]).epsilon(1e-12));
    // resume-then-train-zero-epochs round-trips the archive bit-for-bit
    UNetDenoiser reread(cfg, 123);
    load_archive(dir, reread.params());
    TrainOptions zero = opts;
    zero.epochs = 0;
    nn::Adam zopt(reread.params().all(), cfg.adam());
    auto zstats = train_initial(reread, zopt, corpus, pairs, layout, sched, zero);
    CHECK(zstats.steps == 0);
    fs::remove_all(dir);
}

TEST_CASE("train_initial rejects an empty dataset") {
    auto corpus = synth_corpus(2, 1, 1, 5, 16, 16, 1);
    auto layout = build_patch_layout(16, 16, 8, 8);
    auto cfg = tiny_cfg(8, 4, 1);
    UNetDenoiser model(cfg, 3);
    nn::Adam opt(model.params().all(), cfg.adam());
    auto sched = make_schedule(10, 1e-3, 0.05);
    TrainOptions opts;
    CHECK_THROWS_AS(train_initial(model, opt, corpus, {}, layout, sched, opts), DataError);
}

TEST_CASE("loss is non-negative always") {
    auto sched = make_schedule(30, 1e-3, 0.05);
    UNetDenoiser model(tiny_cfg(8, 4, 2), 7);
    Rng rng(111);
    Rng train_rng(121);
    for (int i = 0; i < 5; ++i) {
        auto batch = random_batch(rng, 3, 1, 8);
        CHECK(training_step(model, batch, sched, train_rng, nullptr) >= 0.0);
    }
}
