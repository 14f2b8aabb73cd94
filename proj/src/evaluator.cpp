#include "obsd/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
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

void OcrConfig::validate() const {
    if (input_size < 8 || input_size % 8 != 0)
        throw UsageError("ocr: input size must be a multiple of 8, >= 8");
    if (base_width < 1 || batch < 1 || max_steps < 0 || eval_every < 1)
        throw UsageError("ocr: counts must be positive");
    if (!(target_accuracy >= 0.0 && target_accuracy <= 1.0))
        throw UsageError("ocr: target accuracy must be in [0, 1]");
}

json OcrConfig::to_json() const {
    return {{"input_size", input_size}, {"base_width", base_width},
            {"lr", lr},                 {"batch", batch},
            {"max_steps", max_steps},   {"eval_every", eval_every},
            {"target_accuracy", target_accuracy},
            {"weight_decay", weight_decay},
            {"adam_beta1", adam_beta1}, {"adam_beta2", adam_beta2},
            {"aug_shift", aug_shift},   {"aug_rotate", aug_rotate},
            {"aug_scale", aug_scale},   {"aug_noise", aug_noise}};
}

OcrConfig OcrConfig::from_json(const json& j) {
    OcrConfig c;
    c.input_size = j.at("input_size");
    c.base_width = j.at("base_width");
    c.lr = j.at("lr");
    c.batch = j.at("batch");
    c.max_steps = j.at("max_steps");
    c.eval_every = j.at("eval_every");
    c.target_accuracy = j.at("target_accuracy");
    c.weight_decay = j.at("weight_decay");
    c.adam_beta1 = j.at("adam_beta1");
    c.adam_beta2 = j.at("adam_beta2");
    c.aug_shift = j.at("aug_shift");
    c.aug_rotate = j.at("aug_rotate");
    c.aug_scale = j.at("aug_scale");
    c.aug_noise = j.at("aug_noise");
    c.validate();
    return c;
}

int RankedPrediction::rank_of(const std::string& category) const {
    for (size_t i = 0; i < ranking.size(); ++i)
        if (ranking[i].first == category) return (int)i + 1;
    throw DataError("category not in ranking: " + category);
}

OcrClassifier::OcrClassifier(OcrConfig cfg, std::vector<std::string> categories,
                             uint64_t init_seed)
    : cfg_(cfg), categories_(std::move(categories)), init_seed_(init_seed),
      params_(init_seed) {
    cfg_.validate();
    if (categories_.size() < 2) throw DataError("classifier needs at least 2 categories");
    std::sort(categories_.begin(), categories_.end());
    int w = cfg_.base_width;
    c1_ = nn::Conv2d(params_, "c1", 1, w, 3, 1, 1);
    n1_ = nn::GroupNorm(params_, "n1", w, norm_groups(w));
    c2_ = nn::Conv2d(params_, "c2", w, 2 * w, 3, 1, 1);
    n2_ = nn::GroupNorm(params_, "n2", 2 * w, norm_groups(2 * w));
    c3_ = nn::Conv2d(params_, "c3", 2 * w, 4 * w, 3, 1, 1);
    n3_ = nn::GroupNorm(params_, "n3", 4 * w, norm_groups(4 * w));
    int side = cfg_.input_size / 8;
    fc_ = nn::Linear(params_, "fc", 4 * w * side * side, (int)categories_.size());
}

Tensor OcrClassifier::forward(const Tensor& x, bool training) const {
    std::optional<nn::NoGradGuard> guard;
    if (!training) guard.emplace();
    Tensor h = nn::avgpool2(nn::relu(n1_(c1_(x))));
    h = nn::avgpool2(nn::relu(n2_(c2_(h))));
    h = nn::avgpool2(nn::relu(n3_(c3_(h))));
    int b = h.dim(0);
    return fc_(nn::reshape(h, {b, (int)(h.numel() / b)}));
}

GlyphImage OcrClassifier::preprocess(const GlyphImage& img) const {
    return register_image(img, cfg_.input_size, cfg_.input_size, 1);
}

RankedPrediction OcrClassifier::rank(const GlyphImage& image) const {
    GlyphImage in = preprocess(image);
    Tensor x = Tensor::from(in.pixels, {1, 1, cfg_.input_size, cfg_.input_size});
    Tensor logits = forward(x, false);
    int k = (int)categories_.size();
    // softmax
    double mx = logits.data()[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits.data()[j]);
    std::vector<double> p(k);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
        p[j] = std::exp(logits.data()[j] - mx);
        sum += p[j];
    }
    RankedPrediction out;
    out.ranking.reserve(k);
    for (int j = 0; j < k; ++j) out.ranking.push_back({categories_[j], p[j] / sum});
    // descending score; ties by fixed (ascending) category order, which
    // stable_sort preserves from the sorted categories_ list
    std::stable_sort(out.ranking.begin(), out.ranking.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    return out;
}

std::string OcrClassifier::digest() const {
    Sha256 h;
    h.update(archive_param_digest(params_));
    for (auto& c : categories_) h.update(c);
    return h.hex();
}

double OcrClassifier::accuracy_on_canonical(const GlyphCorpus& corpus) const {
    size_t hits = 0, total = 0;
    for (auto& cat : corpus.categories) {
        if (cat.targets.empty()) continue;
        ++total;
        if (rank(cat.targets[0]).top1() == cat.id) ++hits;
    }
    if (total == 0) throw DataError("no canonical renderings to evaluate");
    return (double)hits / (double)total;
}

void OcrClassifier::save(const std::filesystem::path& dir, const TrainStats& stats,
                         uint64_t seed, double accuracy) const {
    ArchiveManifest m;
    m.kind = "classifier";
    m.config = cfg_.to_json();
    m.config_digest = sha256_hex(m.config.dump());
    m.seed = seed;
    m.epoch = stats.epochs_done;
    m.step = stats.steps;
    m.loss_history = stats.loss_history;
    m.extra = {{"categories", categories_},
               {"canonical_accuracy", accuracy},
               {"init_seed", init_seed_}};
    save_archive(dir, m, params_);
}

std::unique_ptr<OcrClassifier> OcrClassifier::load(const std::filesystem::path& dir) {
    auto manifest = read_manifest(dir);
    if (manifest.kind != "classifier")
        throw DataError("archive at " + dir.string() + " is not a classifier");
    auto cfg = OcrConfig::from_json(manifest.config);
    auto cats = manifest.extra.at("categories").get<std::vector<std::string>>();
    uint64_t init_seed = manifest.extra.value("init_seed", 0);
    auto model = std::make_unique<OcrClassifier>(cfg, cats, init_seed);
    load_archive(dir, model->params());
    return model;
}

namespace {

// small affine warp around the image center with white padding
GlyphImage augment(const GlyphImage& src, const OcrConfig& cfg, Rng& rng) {
    double angle = rng.uniform(-cfg.aug_rotate, cfg.aug_rotate) * M_PI / 180.0;
    double scale = 1.0 + rng.uniform(-cfg.aug_scale, cfg.aug_scale);
    double tx = rng.uniform(-cfg.aug_shift, cfg.aug_shift);
    double ty = rng.uniform(-cfg.aug_shift, cfg.aug_shift);
    double ca = std::cos(angle) / scale, sa = std::sin(angle) / scale;
    int n = src.h;
    GlyphImage out(n, n, 1, src.role, 1.0f);
    double c = (n - 1) / 2.0;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            // inverse map output -> source
            double dx = x - c - tx, dy = y - c - ty;
            double sx = ca * dx + sa * dy + c;
            double sy = -sa * dx + ca * dy + c;
            int x0 = (int)std::floor(sx), y0 = (int)std::floor(sy);
            double wx = sx - x0, wy = sy - y0;
            auto at = [&](int yy, int xx) -> double {
                return (yy >= 0 && yy < n && xx >= 0 && xx < n) ? src.at(0, yy, xx) : 1.0;
            };
            double top = at(y0, x0) * (1 - wx) + at(y0, x0 + 1) * wx;
            double bot = at(y0 + 1, x0) * (1 - wx) + at(y0 + 1, x0 + 1) * wx;
            out.at(0, y, x) = (float)(top * (1 - wy) + bot * wy);
        }
    for (auto& v : out.pixels)
        v = (float)std::clamp(v + cfg.aug_noise * rng.normal(), -1.0, 1.0);
    return out;
}

}  // namespace

OcrClassifier train_ocr(const GlyphCorpus& corpus, const OcrConfig& cfg, uint64_t seed,
                        TrainStats* stats_out, bool verbose) {
    if (corpus.categories.size() < 2)
        throw DataError("train_ocr: need at least 2 categories");
    // training pool: all modern renderings (canonical targets + style variants)
    struct Sample {
        GlyphImage img;
        int label;
    };
    std::vector<Sample> pool;
    std::vector<std::string> ids = corpus.category_ids();
    std::sort(ids.begin(), ids.end());
    OcrClassifier model(cfg, ids, splitmix64(seed ^ 0x0C1A));
    for (auto& cat : corpus.categories) {
        int label =
            (int)(std::lower_bound(ids.begin(), ids.end(), cat.id) - ids.begin());
        if (cat.targets.empty())
            throw DataError("train_ocr: category lacks modern renderings: " + cat.id);
        for (auto& t : cat.targets)
            pool.push_back({register_image(t, cfg.input_size, cfg.input_size, 1), label});
        for (auto& s : cat.styles)
            pool.push_back({register_image(s, cfg.input_size, cfg.input_size, 1), label});
    }

    nn::Adam opt(model.params().all(), cfg.adam());
    Rng rng(seed);
    TrainStats stats;
    double best_acc = 0.0;
    size_t px = (size_t)cfg.input_size * cfg.input_size;
    for (int step = 0; step < cfg.max_steps; ++step) {
        Tensor x = Tensor::zeros({cfg.batch, 1, cfg.input_size, cfg.input_size});
        std::vector<int> labels(cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) {
            auto& s = pool[rng.bounded(pool.size())];
            GlyphImage aug = augment(s.img, cfg, rng);
            for (size_t j = 0; j < px; ++j) x.data()[i * px + j] = aug.pixels[j];
            labels[i] = s.label;
        }
        Tensor loss = nn::cross_entropy(model.forward(x, true), labels);
        double lv = loss.item();
        if (!std::isfinite(lv)) throw DivergenceError("train_ocr: loss diverged");
        opt.zero_grad();
        nn::backward(loss);
        opt.step();
        stats.loss_history.push_back(lv);
        ++stats.steps;
        if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps) {
            best_acc = model.accuracy_on_canonical(corpus);
            if (verbose)
                std::cerr << "ocr step " << step + 1 << " loss " << lv << " canonical acc "
                          << best_acc << "\n";
            if (cfg.target_accuracy > 0.0 && best_acc >= cfg.target_accuracy) break;
        }
    }
    if (cfg.target_accuracy > 0.0 && best_acc < cfg.target_accuracy)
        throw AcceptanceError("train_ocr: canonical accuracy " + std::to_string(best_acc) +
                              " below bar " + std::to_string(cfg.target_accuracy) +
                              " after " + std::to_string(stats.steps) + " steps");
    if (stats_out) *stats_out = std::move(stats);
    return model;
}

// ---------------------------------------------------------------------------
// evaluation

uint64_t eval_item_seed(uint64_t round_seed, size_t item_index) {
    return splitmix64(round_seed ^ splitmix64(0xE7A1 + item_index));
}

namespace {

struct EvalItem {
    std::string category;
    const GlyphImage* cond;
};

std::vector<EvalItem> collect_items(const GlyphCorpus& corpus) {
    std::vector<EvalItem> items;
    for (auto& cat : corpus.categories)
        for (auto& c : cat.conditions) items.push_back({cat.id, &c});
    if (items.empty()) throw DataError("evaluation corpus has no condition images");
    return items;
}

void leak_guard(const GlyphCorpus& test_corpus, const DecipherPipeline& pipeline) {
    auto trained = pipeline.training_categories();
    for (auto& cat : test_corpus.categories)
        if (trained.count(cat.id))
            throw DataError("split leak: test category " + cat.id +
                            " appears in the pipeline training set");
}

}  // namespace

EvalReport single_round_eval(const GlyphCorpus& test_corpus,
                             const DecipherPipeline& pipeline, const Ranker& classifier,
                             const std::vector<int>& ks, uint64_t base_seed) {
    if (ks.empty()) throw UsageError("single_round_eval: no k values");
    for (int k : ks)
        if (k < 1) throw UsageError("single_round_eval: k must be >= 1");
    leak_guard(test_corpus, pipeline);
    auto items = collect_items(test_corpus);

    EvalReport rep;
    rep.ks = ks;
    rep.n_items = items.size();
    rep.seeds = {base_seed};
    rep.pipeline_digest = pipeline.digest();
    rep.classifier_digest = classifier.digest();
    rep.corpus_digest = test_corpus.digest();
    std::vector<size_t> hits(ks.size(), 0);
    for (size_t i = 0; i < items.size(); ++i) {
        uint64_t seed = eval_item_seed(base_seed, i);
        GlyphImage out = pipeline.generate(*items[i].cond, seed);
        auto ranked = classifier.rank(out);
        int r = ranked.rank_of(items[i].category);
        for (size_t j = 0; j < ks.size(); ++j)
            if (r <= ks[j]) ++hits[j];
        rep.per_item.push_back({{"category", items[i].category},
                                {"seed", seed},
                                {"rank", r},
                                {"top1", ranked.top1()}});
    }
    for (size_t j = 0; j < ks.size(); ++j)
        rep.topk_accuracy.push_back((double)hits[j] / items.size());
    return rep;
}

EvalReport multi_round_eval(const GlyphCorpus& test_corpus,
                            const DecipherPipeline& pipeline, const Ranker& classifier,
                            const std::vector<uint64_t>& trial_seeds) {
    if (trial_seeds.empty()) throw UsageError("multi_round_eval: need >= 1 trial seed");
    for (size_t a = 0; a < trial_seeds.size(); ++a)
        for (size_t b = a + 1; b < trial_seeds.size(); ++b)
            if (trial_seeds[a] == trial_seeds[b])
                throw UsageError("multi_round_eval: duplicate trial seeds");
    leak_guard(test_corpus, pipeline);
    auto items = collect_items(test_corpus);

    EvalReport rep;
    rep.n_items = items.size();
    rep.seeds = trial_seeds;
    rep.pipeline_digest = pipeline.digest();
    rep.classifier_digest = classifier.digest();
    rep.corpus_digest = test_corpus.digest();
    size_t n_trials = trial_seeds.size();
    std::vector<size_t> cumulative_hits(n_trials, 0);
    for (size_t i = 0; i < items.size(); ++i) {
        bool hit = false;
        json trials = json::array();
        for (size_t m = 0; m < n_trials; ++m) {
            uint64_t seed = eval_item_seed(trial_seeds[m], i);
            if (!hit) {
                GlyphImage out = pipeline.generate(*items[i].cond, seed);
                auto ranked = classifier.rank(out);
                hit = ranked.top1() == items[i].category;
                trials.push_back({{"seed", seed}, {"top1", ranked.top1()}});
            }
            if (hit) ++cumulative_hits[m];
        }
        rep.per_item.push_back({{"category", items[i].category}, {"trials", trials}});
    }
    for (size_t m = 0; m < n_trials; ++m)
        rep.cumulative_success.push_back((double)cumulative_hits[m] / items.size());
    return rep;
}

std::string EvalReport::to_csv() const {
    std::string out = "metric,index,value\n";
    char buf[128];
    for (size_t j = 0; j < ks.size(); ++j) {
        std::snprintf(buf, sizeof(buf), "top_k,%d,%.6f\n", ks[j], topk_accuracy[j]);
        out += buf;
    }
    for (size_t m = 0; m < cumulative_success.size(); ++m) {
        std::snprintf(buf, sizeof(buf), "cumulative_success,%zu,%.6f\n", m + 1,
                      cumulative_success[m]);
        out += buf;
    }
    return out;
}

json EvalReport::to_json() const {
    json j;
    j["ks"] = ks;
    j["topk_accuracy"] = topk_accuracy;
    j["cumulative_success"] = cumulative_success;
    j["n_items"] = n_items;
    j["seeds"] = seeds;
    j["pipeline_digest"] = pipeline_digest;
    j["classifier_digest"] = classifier_digest;
    j["corpus_digest"] = corpus_digest;
    j["per_item"] = per_item;
    return j;
}

void EvalReport::write(const std::filesystem::path& stem) const {
    {
        std::ofstream f(stem.string() + ".csv");
        if (!f) throw DataError("cannot write report: " + stem.string() + ".csv");
        f << to_csv();
    }
    {
        std::ofstream f(stem.string() + ".json");
        if (!f) throw DataError("cannot write report: " + stem.string() + ".json");
        f << to_json().dump(2) << "\n";
    }
}

}  // namespace obsd
