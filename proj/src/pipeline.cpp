#include "obsd/pipeline.hpp"

#include <fstream>
#include <iostream>

#include "obsd/sha256.hpp"

namespace obsd {

namespace fs = std::filesystem;
using nlohmann::json;

ObsdPipeline::ObsdPipeline(std::shared_ptr<UNetDenoiser> denoiser,
                           std::shared_ptr<RefinerModel> refiner, NoiseSchedule sched,
                           PatchLayout layout, GlyphImage style_exemplar,
                           std::set<std::string> train_categories, int workers)
    : denoiser_(std::move(denoiser)), refiner_(std::move(refiner)),
      sched_(std::move(sched)), layout_(std::move(layout)),
      exemplar_(std::move(style_exemplar)), train_cats_(std::move(train_categories)),
      workers_(workers) {
    if (!denoiser_) throw UsageError("pipeline: missing denoiser");
    Sha256 h;
    h.update(archive_param_digest(denoiser_->params()));
    if (refiner_) h.update(archive_param_digest(refiner_->params()));
    h.update(&sched_.T, sizeof(sched_.T));
    int32_t geo[4] = {layout_.h, layout_.w, layout_.patch, layout_.stride};
    h.update(geo, sizeof(geo));
    if (refiner_) h.update(image_digest(exemplar_));
    digest_ = h.hex();
}

GlyphImage ObsdPipeline::generate_unrefined(const GlyphImage& cond, uint64_t seed) const {
    return lss_sample(cond, *denoiser_, sched_, layout_, seed, workers_);
}

GlyphImage ObsdPipeline::generate(const GlyphImage& cond, uint64_t seed) const {
    GlyphImage x0 = generate_unrefined(cond, seed);
    if (!refiner_) return x0;
    return refine(x0, exemplar_, *refiner_, splitmix64(seed ^ 0x5EF1));
}

CachedPipeline::CachedPipeline(const DecipherPipeline& inner, fs::path dir)
    : inner_(inner), dir_(std::move(dir)) {
    fs::create_directories(dir_);
}

GlyphImage CachedPipeline::generate(const GlyphImage& cond, uint64_t seed) const {
    Sha256 h;
    h.update(inner_.digest());
    h.update(image_digest(cond));
    h.update(&seed, sizeof(seed));
    fs::path file = dir_ / (h.hex().substr(0, 32) + (cond.c == 3 ? ".ppm" : ".pgm"));
    if (!fs::exists(file)) {
        GlyphImage out = inner_.generate(cond, seed);
        write_pnm(file, out);
    }
    GlyphImage img = read_pnm(file);
    img.role = Role::generated;
    img.category = cond.category;
    return img;
}

RunData load_run_data(const RunConfig& cfg) {
    RunData data;
    if (cfg.data_source == "synthetic") {
        data.corpus = synth_corpus(cfg.synth_categories, cfg.synth_variants,
                                   cfg.synth_styles, cfg.data_seed, cfg.image_size,
                                   cfg.image_size, cfg.channels);
    } else {
        data.corpus = ingest(cfg.data_source, cfg.image_size, cfg.image_size, cfg.channels);
    }
    data.split = split_categories(data.corpus, cfg.test_fraction, cfg.split_seed);
    data.train = subset(data.corpus, data.split.train_ids);
    data.test = subset(data.corpus, data.split.test_ids);
    return data;
}

GlyphImage style_exemplar_for(const GlyphCorpus& train, const std::string& category) {
    const GlyphCorpus::Category* cat = nullptr;
    if (category.empty()) {
        if (train.categories.empty()) throw DataError("no train categories for exemplar");
        cat = &train.categories.front();
    } else {
        cat = &train.category(category);
    }
    if (cat->targets.empty())
        throw DataError("exemplar category lacks a canonical rendering: " + cat->id);
    GlyphImage img = cat->targets[0];
    img.role = Role::style_reference;
    return img;
}

// ---------------------------------------------------------------------------
// ablation

namespace {

struct ArmModels {
    std::shared_ptr<UNetDenoiser> denoiser;
    std::shared_ptr<RefinerModel> refiner;
    PatchLayout layout;
    int64_t diffusion_steps = 0;
    int64_t refiner_steps = 0;
};

ArmModels train_arm(const RunConfig& cfg, const RunData& data, bool use_lss,
                    bool use_refiner, const fs::path& arm_dir, bool verbose,
                    std::shared_ptr<UNetDenoiser> reuse_diffusion = nullptr) {
    ArmModels arm;
    DenoiserConfig dcfg = cfg.denoiser;
    dcfg.patch = use_lss ? cfg.patch : cfg.image_size;
    // whole-image arm may need more levels head-room; keep the config's
    // levels, they divide both patch sizes by construction
    dcfg.validate();
    arm.layout = use_lss ? cfg.layout()
                         : build_patch_layout(cfg.image_size, cfg.image_size,
                                              cfg.image_size, cfg.image_size);
    if (reuse_diffusion) {
        arm.denoiser = reuse_diffusion;
        arm.diffusion_steps = cfg.ablate_steps;
    } else {
        arm.denoiser = std::make_shared<UNetDenoiser>(dcfg, splitmix64(cfg.seed ^ 0xD0));
        nn::Adam opt(arm.denoiser->params().all(), dcfg.adam());
        auto pairs = make_many_to_one_pairs(data.train);
        NoiseSchedule sched = cfg.schedule();
        TrainOptions topts;
        topts.epochs = 1;
        topts.steps_per_epoch = cfg.ablate_steps;
        topts.batch = dcfg.batch;
        topts.seed = splitmix64(cfg.seed ^ 0x7A1);  // same data order in every arm
        topts.checkpoint_dir = arm_dir / "initial";
        topts.checkpoint_every = dcfg.checkpoint_every;
        topts.verbose = verbose;
        auto stats = train_initial(*arm.denoiser, opt, data.train, pairs, arm.layout,
                                   sched, topts);
        arm.diffusion_steps = stats.steps;
    }

    if (use_refiner) {
        arm.refiner = std::make_shared<RefinerModel>(cfg.refiner, splitmix64(cfg.seed ^ 0xF00D));
        nn::Adam ropt(arm.refiner->params().all(), cfg.refiner.adam());
        std::vector<std::string> sources = data.train.style_names;
        auto font_pairs = make_one_to_one_font_pairs(data.train, sources, "canonical");
        RefinerTrainOptions ropts;
        ropts.epochs = 1;
        ropts.steps_per_epoch = cfg.ablate_refiner_steps;
        ropts.batch = cfg.refiner.batch;
        ropts.seed = splitmix64(cfg.seed ^ 0x7A2);
        ropts.checkpoint_dir = arm_dir / "refiner";
        ropts.checkpoint_every = cfg.refiner.checkpoint_every;
        ropts.verbose = verbose;
        auto rstats = train_refiner(*arm.refiner, ropt, data.train, font_pairs, ropts);
        arm.refiner_steps = rstats.steps;
    }
    return arm;
}

}  // namespace

AblationReport run_ablation(const RunConfig& cfg, const fs::path& outdir, bool verbose) {
    RunData data = load_run_data(cfg);
    std::string corpus_digest = data.corpus.digest();
    std::set<std::string> train_cats(data.split.train_ids.begin(),
                                     data.split.train_ids.end());

    if (verbose)
        std::cerr << "ablation: corpus " << corpus_digest.substr(0, 12) << ", "
                  << data.train.categories.size() << " train / "
                  << data.test.categories.size() << " test categories\n";

    TrainStats ocr_stats;
    OcrClassifier classifier = train_ocr(data.corpus, cfg.ocr, cfg.seed, &ocr_stats, verbose);
    classifier.save(outdir / "ocr", ocr_stats, cfg.seed,
                    classifier.accuracy_on_canonical(data.corpus));

    AblationReport report;
    report.seed = cfg.seed;
    report.config_digest = cfg.digest();
    report.ks = cfg.ks;

    struct Spec {
        const char* name;
        bool lss, refiner;
    };
    ArmModels lss_arm;  // arms b and c share the identically-trained patch model
    for (auto spec : {Spec{"diffusion", false, false}, Spec{"lss", true, false},
                      Spec{"refinement", true, true}}) {
        // guard against config/data drift between arms
        std::string arm_corpus_digest = data.corpus.digest();
        if (arm_corpus_digest != corpus_digest)
            throw DataError("ablation: corpus digest drifted between arms");
        if (verbose) std::cerr << "ablation arm: " << spec.name << "\n";
        fs::path arm_dir = outdir / ("arm_" + std::string(spec.name));
        ArmModels arm;
        if (spec.lss && lss_arm.denoiser) {
            // training is deterministic in (config, data, seed); the +LSS and
            // +Refinement arms would train bit-identical diffusion models, so
            // reuse the parameters and only add the refiner
            arm = lss_arm;
            arm.refiner = nullptr;
            arm.refiner_steps = 0;
            if (spec.refiner) {
                ArmModels tmp = train_arm(cfg, data, true, true, arm_dir, verbose,
                                          /*skip_diffusion=*/arm.denoiser);
                arm.refiner = tmp.refiner;
                arm.refiner_steps = tmp.refiner_steps;
            }
        } else {
            arm = train_arm(cfg, data, spec.lss, spec.refiner, arm_dir, verbose, nullptr);
            if (spec.lss) lss_arm = arm;
        }
        ObsdPipeline pipeline(arm.denoiser, arm.refiner, cfg.schedule(), arm.layout,
                              style_exemplar_for(data.train, cfg.exemplar_category),
                              train_cats, cfg.workers);
        CachedPipeline cached(pipeline, arm_dir / "cache");
        AblationArm result;
        result.name = spec.name;
        result.corpus_digest = arm_corpus_digest;
        result.diffusion_steps = arm.diffusion_steps;
        result.refiner_steps = arm.refiner_steps;
        result.single_round =
            single_round_eval(data.test, cached, classifier, cfg.ks, cfg.seed);
        std::vector<uint64_t> trial_seeds;
        for (int m = 0; m < cfg.trials; ++m)
            trial_seeds.push_back(m == 0 ? cfg.seed : splitmix64(cfg.seed + m));
        result.multi_round = multi_round_eval(data.test, cached, classifier, trial_seeds);
        report.arms.push_back(std::move(result));
    }
    return report;
}

json AblationReport::to_json() const {
    json j;
    j["seed"] = seed;
    j["config_digest"] = config_digest;
    j["ks"] = ks;
    json arms_j = json::array();
    for (auto& arm : arms) {
        arms_j.push_back({{"name", arm.name},
                          {"corpus_digest", arm.corpus_digest},
                          {"diffusion_steps", arm.diffusion_steps},
                          {"refiner_steps", arm.refiner_steps},
                          {"single_round", arm.single_round.to_json()},
                          {"multi_round", arm.multi_round.to_json()}});
    }
    j["arms"] = arms_j;
    return j;
}

std::string AblationReport::to_csv() const {
    std::string out = "rank";
    for (auto& arm : arms) out += "," + arm.name;
    out += "\n";
    char buf[64];
    for (size_t j = 0; j < ks.size(); ++j) {
        out += "top-" + std::to_string(ks[j]);
        for (auto& arm : arms) {
            std::snprintf(buf, sizeof(buf), ",%.4f", arm.single_round.topk_accuracy[j]);
            out += buf;
        }
        out += "\n";
    }
    if (!arms.empty())
        for (size_t m = 0; m < arms.back().multi_round.cumulative_success.size(); ++m) {
            out += "multi-" + std::to_string(m + 1);
            for (auto& arm : arms) {
                std::snprintf(buf, sizeof(buf), ",%.4f",
                              arm.multi_round.cumulative_success[m]);
                out += buf;
            }
            out += "\n";
        }
    return out;
}

AblationCheck check_ablation(const AblationReport& report) {
    AblationCheck out;
    if (report.arms.size() != 3) {
        out.detail = "expected 3 arms";
        return out;
    }
    auto k_index = [&](int k) {
        for (size_t j = 0; j < report.ks.size(); ++j)
            if (report.ks[j] == k) return (int)j;
        return -1;
    };
    int i1 = k_index(1), i10 = k_index(10);
    if (i1 < 0 || i10 < 0) {
        out.detail = "k set must contain 1 and 10";
        return out;
    }
    const auto& a = report.arms[0];  // whole-image diffusion
    const auto& b = report.arms[1];  // +LSS
    const auto& c = report.arms[2];  // +LSS+Refinement
    double a10 = a.single_round.topk_accuracy[i10];
    double b10 = b.single_round.topk_accuracy[i10];
    double b1 = b.single_round.topk_accuracy[i1];
    double c1 = c.single_round.topk_accuracy[i1];
    size_t m5 = std::min<size_t>(5, c.multi_round.cumulative_success.size());
    double cm5 = c.multi_round.cumulative_success[m5 - 1];
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "top10: diffusion %.3f vs +LSS %.3f (need +0.10); top1: +LSS %.3f vs "
                  "+Refinement %.3f (need >= -0.02); multi@%zu %.3f vs top1 %.3f",
                  a10, b10, b1, c1, m5, cm5, c1);
    out.detail = buf;
    out.ok = (b10 >= a10 + 0.10) && (c1 >= b1 - 0.02) && (cm5 >= c1);
    return out;
}

}  // namespace obsd
