#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "obsd/sampler.hpp"
#include "test_util.hpp"

using namespace obsd;
using nn::Tensor;

namespace {

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

// deterministic toy denoiser: eps_hat = a*xt + b*cond, optionally t-dependent
ScriptedPredictor affine_stub(int p, int c, double a, double b) {
    return ScriptedPredictor(p, c, [a, b](const Tensor& xt, const Tensor& cond,
                                          const std::vector<int>& ts) {
        Tensor out = Tensor::zeros(xt.shape());
        for (int64_t i = 0; i < out.numel(); ++i)
            out.data()[i] = a * xt.data()[i] + b * cond.data()[i];
        // mild t dependence keeps the trajectory non-trivial
        for (size_t k = 0; k < ts.size(); ++k) {
            size_t stride = (size_t)out.numel() / ts.size();
            double s = 1.0 + 0.001 * ts[k];
            for (size_t j = 0; j < stride; ++j) out.data()[k * stride + j] *= s;
        }
        return out;
    });
}

GlyphImage random_cond(Rng& rng, int h, int w, int c) {
    GlyphImage img(h, w, c, Role::condition);
    for (auto& v : img.pixels) v = (float)rng.uniform(-1, 1);
    return img;
}

}  // namespace

TEST_CASE("single-patch LSS equals the whole-image sampler on one noise stream") {
    auto sched = make_schedule(1000, 1e-4, 0.02);
    auto layout = build_patch_layout(16, 16, 16, 4);
    CHECK(layout.d == 1);
    Rng rng(5);
    auto cond = random_cond(rng, 16, 16, 1);
    auto lss_model = affine_stub(16, 1, 0.4, -0.2);
    auto whole_model = affine_stub(16, 1, 0.4, -0.2);
    SampleStats s1, s2;
    auto a = lss_sample(cond, lss_model, sched, layout, 77, 1, &s1);
    auto b = whole_image_sample(cond, whole_model, sched, 77, &s2);
    CHECK(testutil::max_abs_diff(a.pixels, b.pixels) < 1e-6);
    CHECK(s1.noise_draws == (size_t)sched.T);
    CHECK(s2.noise_draws == (size_t)sched.T);
}

TEST_CASE("constant predictions aggregate to the constant under any overlap") {
    auto sched = make_schedule(40, 1e-3, 0.02);
    auto layout = build_patch_layout(24, 24, 8, 4);  // D = 25, heavy overlap
    const double c0 = 0.37;
    ScriptedPredictor lss_model(8, 1,
                                [&](const Tensor& xt, const Tensor&,
                                    const std::vector<int>&) {
                                    return Tensor::full(xt.shape(), c0);
                                });
    ScriptedPredictor whole_model(24, 1,
                                  [&](const Tensor& xt, const Tensor&,
                                      const std::vector<int>&) {
                                      return Tensor::full(xt.shape(), c0);
                                  });
    Rng rng(9);
    auto cond = random_cond(rng, 24, 24, 1);
    auto a = lss_sample(cond, lss_model, sched, layout, 13);
    auto b = whole_image_sample(cond, whole_model, sched, 13);
    // identical constants in every patch mean Omega == c0 everywhere, so both
    // trajectories coincide
    CHECK(testutil::max_abs_diff(a.pixels, b.pixels) < 1e-6);
}

TEST_CASE("aggregation identity against a brute-force per-pixel oracle") {
    auto layout = build_patch_layout(12, 20, 8, 4);
    Rng rng(17);
    std::vector<std::vector<double>> preds(layout.d);
    for (auto& p : preds) {
        p.resize(2 * 8 * 8);
        for (auto& v : p) v = rng.uniform(-2, 2);
    }
    auto omega = aggregate_patch_predictions(layout, 2, preds);
    // oracle: for every pixel, average the predictions of covering patches
    for (int ch = 0; ch < 2; ++ch)
        for (int y = 0; y < 12; ++y)
            for (int x = 0; x < 20; ++x) {
                double sum = 0.0;
                int count = 0;
                for (int d = 0; d < layout.d; ++d) {
                    auto& pos = layout.positions[d];
                    if (y >= pos.y && y < pos.y + 8 && x >= pos.x && x < pos.x + 8) {
                        sum += preds[d][((size_t)ch * 8 + y - pos.y) * 8 + x - pos.x];
                        ++count;
                    }
                }
                CHECK(count == layout.coverage_at(y, x));
                CHECK(omega[((size_t)ch * 12 + y) * 20 + x] ==
                      doctest::Approx(sum / count).epsilon(1e-12));
            }
}

TEST_CASE("two-patch overlap averages the two constants exactly") {
    // 1-D style layout: 8x12 image, 8x8 patches at x = 0 and x = 4
    auto layout = build_patch_layout(8, 12, 8, 4);
    CHECK(layout.d == 2);
    std::vector<std::vector<double>> preds{std::vector<double>(64, 1.0),
                                           std::vector<double>(64, 3.0)};
    auto omega = aggregate_patch_predictions(layout, 1, preds);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 4; ++x) CHECK(omega[(size_t)y * 12 + x] == 1.0);
        for (int x = 4; x < 8; ++x) CHECK(omega[(size_t)y * 12 + x] == 2.0);  // mean
        for (int x = 8; x < 12; ++x) CHECK(omega[(size_t)y * 12 + x] == 3.0);
    }
}

TEST_CASE("patch accumulation order only perturbs results at float tolerance") {
    auto layout = build_patch_layout(24, 24, 8, 4);
    Rng rng(29);
    std::vector<std::vector<double>> preds(layout.d);
    for (auto& p : preds) {
        p.resize(64);
        for (auto& v : p) v = rng.uniform(-3, 3);
    }
    auto base = aggregate_patch_predictions(layout, 1, preds);
    std::vector<int> order(layout.d);
    for (int i = 0; i < layout.d; ++i) order[i] = i;
    for (int trial = 0; trial < 5; ++trial) {
        rng.shuffle(order);
        auto shuffled = aggregate_patch_predictions(layout, 1, preds, &order);
        CHECK(testutil::max_abs_diff(base, shuffled) < 1e-5);
    }
}

TEST_CASE("lss_sample draws exactly one whole-image noise per timestep") {
    auto sched = make_schedule(37, 1e-3, 0.02);
    auto layout = build_patch_layout(16, 16, 8, 4);
    auto model = affine_stub(8, 1, 0.2, 0.1);
    Rng rng(33);
    auto cond = random_cond(rng, 16, 16, 1);
    SampleStats stats;
    lss_sample(cond, model, sched, layout, 5, 1, &stats);
    // one draw for X_T plus one per timestep t = T..2 (t = 1 injects zeros)
    CHECK(stats.noise_draws == (size_t)sched.T);
}

TEST_CASE("lss_sample determinism and seed sensitivity") {
    auto sched = make_schedule(25, 1e-3, 0.02);
    auto layout = build_patch_layout(16, 16, 8, 4);
    auto model = affine_stub(8, 1, 0.3, -0.1);
    Rng rng(44);
    auto cond = random_cond(rng, 16, 16, 1);
    auto a = lss_sample(cond, model, sched, layout, 21);
    auto b = lss_sample(cond, model, sched, layout, 21);
    CHECK(a.pixels == b.pixels);
    auto c = lss_sample(cond, model, sched, layout, 22);
    CHECK(a.pixels != c.pixels);
    CHECK(a.in_range());
    CHECK(a.role == Role::generated);
}

TEST_CASE("parallel workers agree with the serial run") {
    auto sched = make_schedule(20, 1e-3, 0.02);
    auto layout = build_patch_layout(24, 24, 8, 8);
    auto model = affine_stub(8, 1, 0.25, 0.05);
    Rng rng(55);
    auto cond = random_cond(rng, 24, 24, 1);
    auto serial = lss_sample(cond, model, sched, layout, 7, 1);
    auto par = lss_sample(cond, model, sched, layout, 7, 3);
    CHECK(testutil::max_abs_diff(serial.pixels, par.pixels) < 1e-5);
}

TEST_CASE("patch-boundary columns are no rougher than interior columns") {
    // trained-model generations must not show seam artifacts: mean absolute
    // horizontal gradient at patch-boundary columns <= 1.5x interior columns
    auto corpus = synth_corpus(8, 3, 1, 91, 32, 32, 1);
    auto layout = build_patch_layout(32, 32, 16, 8);
    auto sched = make_schedule(50, 2e-3, 0.4);
    DenoiserConfig cfg;
    cfg.patch = 16;
    cfg.channels = 1;
    cfg.base_width = 8;
    cfg.levels = 2;
    cfg.time_embed_dim = 16;
    cfg.lr = 1e-3;
    cfg.batch = 4;
    UNetDenoiser model(cfg, 7);
    nn::Adam opt(model.params().all(), cfg.adam());
    auto pairs = make_many_to_one_pairs(corpus);
    TrainOptions opts;
    opts.epochs = 1;
    opts.steps_per_epoch = 200;
    opts.batch = 4;
    opts.seed = 5;
    train_initial(model, opt, corpus, pairs, layout, sched, opts);

    double boundary = 0.0, interior = 0.0;
    size_t nb = 0, ni = 0;
    for (int gen = 0; gen < 50; ++gen) {
        const auto& cat = corpus.categories[gen % corpus.categories.size()];
        auto img = lss_sample(cat.conditions[gen % cat.conditions.size()], model, sched,
                              layout, 1000 + gen);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x + 1 < 32; ++x) {
                double g = std::abs(img.at(0, y, x + 1) - img.at(0, y, x));
                bool at_boundary = (x + 1) % 8 == 0;  // patch origins at multiples of 8
                if (at_boundary) {
                    boundary += g;
                    ++nb;
                } else {
                    interior += g;
                    ++ni;
                }
            }
    }
    boundary /= nb;
    interior /= ni;
    CHECK(boundary <= 1.5 * interior);
}

TEST_CASE("lss_sample validates inputs and surfaces divergence") {
    auto sched = make_schedule(10, 1e-3, 0.02);
    auto layout = build_patch_layout(16, 16, 8, 4);
    auto model = affine_stub(4, 1, 0.2, 0.1);  // wrong patch size
    Rng rng(66);
    auto cond = random_cond(rng, 16, 16, 1);
    CHECK_THROWS_AS(lss_sample(cond, model, sched, layout, 1), UsageError);
    auto wrong_dims = random_cond(rng, 8, 8, 1);
    auto ok_model = affine_stub(8, 1, 0.2, 0.1);
    CHECK_THROWS_AS(lss_sample(wrong_dims, ok_model, sched, layout, 1), UsageError);
    ScriptedPredictor nan_model(8, 1, [](const Tensor& xt, const Tensor&,
                                         const std::vector<int>&) {
        return Tensor::full(xt.shape(), NAN);
    });
    CHECK_THROWS_AS(lss_sample(cond, nan_model, sched, layout, 1), DivergenceError);
}
