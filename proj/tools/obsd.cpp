// obsd: oracle-glyph decipherment pipeline driver.
//
// Subcommands: synth-data, train-initial, train-refiner, train-ocr, decipher,
// evaluate, ablate, print-config. Configuration comes from an INI-style file
// (--config or $OBSD_CONFIG) overridden by --set section.key=value flags.
// Exit codes: 0 ok, 2 usage, 3 data, 4 divergence, 5 acceptance bar.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "obsd/config.hpp"
#include "obsd/pipeline.hpp"
#include "obsd/sha256.hpp"

using namespace obsd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    bool verbose = false;
};

RunConfig load_config(const GlobalOpts& g) {
    RunConfig cfg;
    std::string path = g.config_path;
    if (path.empty())
        if (const char* env = std::getenv("OBSD_CONFIG")) path = env;
    if (!path.empty()) cfg = RunConfig::from_ini_file(path);
    for (auto& kv : g.overrides) {
        auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw UsageError("--set expects section.key=value, got: " + kv);
        cfg.apply_kv(kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.resolve();
    return cfg;
}

void write_resolved_config(const RunConfig& cfg, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream f(dir / "config.ini");
    f << "# resolved configuration, digest " << cfg.digest() << "\n" << cfg.to_ini();
}

std::shared_ptr<UNetDenoiser> load_denoiser(const fs::path& dir, const RunConfig& cfg) {
    auto manifest = read_manifest(dir);
    if (manifest.kind != "denoiser")
        throw DataError("archive at " + dir.string() + " is not a denoiser");
    auto dcfg = DenoiserConfig::from_json(manifest.config);
    if (dcfg.channels != cfg.channels)
        throw DataError("denoiser archive channel count does not match the run config");
    auto model = std::make_shared<UNetDenoiser>(
        dcfg, manifest.extra.value("init_seed", (uint64_t)0));
    load_archive(dir, model->params());
    std::string want = sha256_hex(cfg.denoiser.to_json().dump());
    if (manifest.config_digest != want)
        std::cerr << "warning: denoiser archive config digest "
                  << manifest.config_digest.substr(0, 12)
                  << " differs from the current run config (" << want.substr(0, 12)
                  << ")\n";
    return model;
}

std::shared_ptr<RefinerModel> load_refiner(const fs::path& dir, const RunConfig& cfg) {
    auto manifest = read_manifest(dir);
    if (manifest.kind != "refiner")
        throw DataError("archive at " + dir.string() + " is not a refiner");
    auto rcfg = RefinerConfig::from_json(manifest.config);
    if (rcfg.image != cfg.image_size || rcfg.channels != cfg.channels)
        throw DataError("refiner archive geometry does not match the run config");
    auto model = std::make_shared<RefinerModel>(
        rcfg, manifest.extra.value("init_seed", (uint64_t)0));
    load_archive(dir, model->params());
    return model;
}

PatchLayout layout_for(const UNetDenoiser& model, const RunConfig& cfg) {
    if (model.patch_size() == cfg.image_size)
        return build_patch_layout(cfg.image_size, cfg.image_size, cfg.image_size,
                                  cfg.image_size);
    return build_patch_layout(cfg.image_size, cfg.image_size, model.patch_size(),
                              cfg.stride);
}

int cmd_synth_data(const RunConfig& cfg, const std::string& out, bool force) {
    fs::path dir = out.empty() ? fs::path(cfg.output_dir) / "corpus" : fs::path(out);
    auto corpus = synth_corpus(cfg.synth_categories, cfg.synth_variants, cfg.synth_styles,
                               cfg.data_seed, cfg.image_size, cfg.image_size,
                               cfg.channels);
    write_corpus(dir, corpus, force);
    std::cout << "corpus: " << dir.string() << "\n"
              << "categories: " << corpus.categories.size() << "\n"
              << "images: " << corpus.image_count() << "\n"
              << "digest: " << corpus.digest() << "\n";
    return 0;
}

int cmd_train_initial(const RunConfig& cfg, bool resume, bool verbose) {
    RunData data = load_run_data(cfg);
    fs::path dir = fs::path(cfg.output_dir) / "initial";
    write_resolved_config(cfg, cfg.output_dir);
    auto model = std::make_shared<UNetDenoiser>(cfg.denoiser, splitmix64(cfg.seed ^ 0xD0));
    nn::Adam opt(model->params().all(), cfg.denoiser.adam());
    TrainStats carry;
    if (resume) {
        auto manifest = load_archive(dir, model->params(), &opt);
        carry.steps = manifest.step;
        carry.epochs_done = manifest.epoch;
        carry.loss_history = manifest.loss_history;
        std::cerr << "resuming from step " << carry.steps << "\n";
    }
    auto pairs = make_many_to_one_pairs(data.train);
    TrainOptions opts;
    opts.epochs = cfg.denoiser.epochs;
    opts.steps_per_epoch = cfg.denoiser.steps_per_epoch;
    opts.batch = cfg.denoiser.batch;
    opts.seed = splitmix64(cfg.seed ^ 0x7A1);
    opts.checkpoint_dir = dir;
    opts.checkpoint_every = cfg.denoiser.checkpoint_every;
    opts.verbose = verbose;
    auto stats = train_initial(*model, opt, data.train, pairs, cfg.layout(),
                               cfg.schedule(), opts, carry);
    auto manifest = denoiser_manifest(*model, stats, opts.seed);
    manifest.extra["run_config_digest"] = cfg.digest();
    manifest.extra["train_categories"] = data.split.train_ids;
    save_archive(dir, manifest, model->params(), &opt);
    std::cout << "initial model: " << dir.string() << " (" << stats.steps << " steps)\n";
    return 0;
}

int cmd_train_refiner(const RunConfig& cfg, bool resume, bool verbose) {
    RunData data = load_run_data(cfg);
    fs::path dir = fs::path(cfg.output_dir) / "refiner";
    write_resolved_config(cfg, cfg.output_dir);
    auto model = std::make_shared<RefinerModel>(cfg.refiner, splitmix64(cfg.seed ^ 0xF00D));
    nn::Adam opt(model->params().all(), cfg.refiner.adam());
    TrainStats carry;
    if (resume) {
        auto manifest = load_archive(dir, model->params(), &opt);
        carry.steps = manifest.step;
        carry.epochs_done = manifest.epoch;
        carry.loss_history = manifest.loss_history;
    }
    auto font_pairs =
        make_one_to_one_font_pairs(data.train, data.train.style_names, "canonical");
    RefinerTrainOptions opts;
    opts.epochs = cfg.refiner.epochs;
    opts.steps_per_epoch = cfg.refiner.steps_per_epoch;
    opts.batch = cfg.refiner.batch;
    opts.seed = splitmix64(cfg.seed ^ 0x7A2);
    opts.checkpoint_dir = dir;
    opts.checkpoint_every = cfg.refiner.checkpoint_every;
    opts.verbose = verbose;
    auto stats = train_refiner(*model, opt, data.train, font_pairs, opts, carry);
    auto manifest = refiner_manifest(*model, stats, opts.seed);
    manifest.extra["run_config_digest"] = cfg.digest();
    save_archive(dir, manifest, model->params(), &opt);
    std::cout << "refiner: " << dir.string() << " (" << stats.steps << " steps)\n";
    return 0;
}

int cmd_train_ocr(const RunConfig& cfg, bool verbose) {
    RunData data = load_run_data(cfg);
    write_resolved_config(cfg, cfg.output_dir);
    TrainStats stats;
    auto model = train_ocr(data.corpus, cfg.ocr, cfg.seed, &stats, verbose);
    double acc = model.accuracy_on_canonical(data.corpus);
    fs::path dir = fs::path(cfg.output_dir) / "ocr";
    model.save(dir, stats, cfg.seed, acc);
    std::cout << "ocr: " << dir.string() << " canonical accuracy " << acc << "\n";
    if (cfg.ocr_dual) {
        OcrConfig second = cfg.ocr;
        second.base_width = cfg.ocr.base_width + cfg.ocr.base_width / 2;
        TrainStats stats2;
        auto model2 =
            train_ocr(data.corpus, second, splitmix64(cfg.seed ^ 0x2), &stats2, verbose);
        double acc2 = model2.accuracy_on_canonical(data.corpus);
        model2.save(fs::path(cfg.output_dir) / "ocr2", stats2, splitmix64(cfg.seed ^ 0x2),
                    acc2);
        std::cout << "ocr2: " << (fs::path(cfg.output_dir) / "ocr2").string()
                  << " canonical accuracy " << acc2 << "\n";
    }
    return 0;
}

int cmd_decipher(const RunConfig& cfg, const std::string& input,
                 const std::string& initial_dir, const std::string& refiner_dir,
                 const std::string& ocr_dir, int trials, bool no_refine,
                 const std::string& out) {
    if (trials < 1) throw UsageError("--trials must be >= 1");
    auto denoiser = load_denoiser(initial_dir, cfg);
    std::shared_ptr<RefinerModel> refiner;
    GlyphImage exemplar;
    if (!no_refine) {
        if (refiner_dir.empty())
            throw UsageError("missing --refiner archive (or pass --no-refine)");
        refiner = load_refiner(refiner_dir, cfg);
        RunData data = load_run_data(cfg);
        exemplar = style_exemplar_for(data.train, cfg.exemplar_category);
    }
    std::unique_ptr<OcrClassifier> classifier;
    if (!ocr_dir.empty()) classifier = OcrClassifier::load(ocr_dir);

    std::vector<fs::path> inputs;
    if (fs::is_directory(input)) {
        for (auto& e : fs::directory_iterator(input))
            if (e.is_regular_file()) inputs.push_back(e.path());
        std::sort(inputs.begin(), inputs.end());
    } else if (fs::is_regular_file(input)) {
        inputs.push_back(input);
    } else {
        throw DataError("input not found: " + input);
    }
    if (inputs.empty()) throw DataError("no input images under " + input);

    ObsdPipeline pipeline(denoiser, refiner, cfg.schedule(), layout_for(*denoiser, cfg),
                          refiner ? exemplar : GlyphImage(), {}, cfg.workers);
    fs::path outdir = out.empty() ? fs::path(cfg.output_dir) / "decipher" : fs::path(out);
    fs::create_directories(outdir);
    write_resolved_config(cfg, outdir);

    json report = json::array();
    for (auto& path : inputs) {
        GlyphImage cond =
            register_image(read_pnm(path), cfg.image_size, cfg.image_size, cfg.channels);
        cond.role = Role::condition;
        std::string stem = path.stem().string();
        std::vector<GlyphImage> candidates;
        json entry;
        entry["input"] = path.string();
        entry["config_digest"] = cfg.digest();
        entry["pipeline_digest"] = pipeline.digest();
        json cand_j = json::array();
        for (int m = 0; m < trials; ++m) {
            uint64_t seed = m == 0 ? cfg.seed : splitmix64(cfg.seed + (uint64_t)m);
            GlyphImage img = pipeline.generate(cond, seed);
            char name[192];
            std::snprintf(name, sizeof(name), "%s_candidate_%02d.%s", stem.c_str(), m,
                          cfg.channels == 3 ? "ppm" : "pgm");
            write_pnm(outdir / name, img);
            json cj = {{"file", name}, {"seed", seed}};
            if (classifier) {
                auto ranked = classifier->rank(img);
                json top = json::array();
                for (int j = 0; j < std::min<int>(5, (int)ranked.ranking.size()); ++j)
                    top.push_back({{"category", ranked.ranking[j].first},
                                   {"score", ranked.ranking[j].second}});
                cj["top5"] = top;
            }
            cand_j.push_back(cj);
            candidates.push_back(std::move(img));
        }
        entry["candidates"] = cand_j;
        report.push_back(entry);
        write_pnm(outdir / (stem + "_montage" + (cfg.channels == 3 ? ".ppm" : ".pgm")),
                  montage({candidates}));
    }
    std::ofstream rf(outdir / "report.json");
    rf << report.dump(2) << "\n";
    std::ofstream tf(outdir / "report.txt");
    for (auto& entry : report) {
        tf << entry["input"].get<std::string>() << "\n";
        for (auto& cj : entry["candidates"]) {
            tf << "  " << cj["file"].get<std::string>() << " seed "
               << cj["seed"].get<uint64_t>();
            if (cj.contains("top5")) {
                tf << " ->";
                for (auto& t : cj["top5"])
                    tf << " " << t["category"].get<std::string>() << ":"
                       << t["score"].get<double>();
            }
            tf << "\n";
        }
    }
    std::cout << "deciphered " << inputs.size() << " input(s) x " << trials
              << " trial(s) -> " << outdir.string() << "\n";
    return 0;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& initial_dir,
                 const std::string& refiner_dir, const std::string& ocr_dir,
                 bool no_refine, bool verbose) {
    RunData data = load_run_data(cfg);
    auto denoiser = load_denoiser(initial_dir, cfg);
    std::shared_ptr<RefinerModel> refiner;
    if (!no_refine && !refiner_dir.empty()) refiner = load_refiner(refiner_dir, cfg);
    auto classifier = OcrClassifier::load(ocr_dir);

    // the split-leak guard also cross-checks the archive's recorded train set
    auto manifest = read_manifest(initial_dir);
    std::set<std::string> train_cats(data.split.train_ids.begin(),
                                     data.split.train_ids.end());
    if (manifest.extra.contains("train_categories")) {
        auto recorded =
            manifest.extra["train_categories"].get<std::vector<std::string>>();
        train_cats.insert(recorded.begin(), recorded.end());
    }

    ObsdPipeline pipeline(denoiser, refiner, cfg.schedule(), layout_for(*denoiser, cfg),
                          refiner ? style_exemplar_for(data.train, cfg.exemplar_category)
                                  : GlyphImage(),
                          train_cats, cfg.workers);
    fs::path outdir = fs::path(cfg.output_dir) / "eval";
    fs::create_directories(outdir);
    write_resolved_config(cfg, outdir);
    CachedPipeline cached(pipeline, outdir / "cache");

    if (verbose)
        std::cerr << "evaluating " << data.test.categories.size()
                  << " held-out categories\n";
    auto single = single_round_eval(data.test, cached, *classifier, cfg.ks, cfg.seed);
    single.write(outdir / "single_round");
    std::vector<uint64_t> trial_seeds;
    for (int m = 0; m < cfg.trials; ++m)
        trial_seeds.push_back(m == 0 ? cfg.seed : splitmix64(cfg.seed + (uint64_t)m));
    auto multi = multi_round_eval(data.test, cached, *classifier, trial_seeds);
    multi.write(outdir / "multi_round");

    for (size_t j = 0; j < single.ks.size(); ++j)
        std::cout << "top-" << single.ks[j] << ": " << single.topk_accuracy[j] << "\n";
    for (size_t m = 0; m < multi.cumulative_success.size(); ++m)
        std::cout << "multi-round@" << m + 1 << ": " << multi.cumulative_success[m]
                  << "\n";
    std::cout << "reports: " << outdir.string() << "\n";
    return 0;
}

int cmd_ablate(const RunConfig& cfg, bool check, bool verbose) {
    fs::path outdir = fs::path(cfg.output_dir) / "ablation";
    fs::create_directories(outdir);
    write_resolved_config(cfg, outdir);
    auto report = run_ablation(cfg, outdir, verbose);
    {
        std::ofstream f(outdir / "ablation.json");
        f << report.to_json().dump(2) << "\n";
    }
    {
        std::ofstream f(outdir / "ablation.csv");
        f << report.to_csv();
    }
    std::cout << report.to_csv();
    std::cout << "report: " << (outdir / "ablation.csv").string() << "\n";
    if (check) {
        auto result = check_ablation(report);
        std::cout << (result.ok ? "ABLATION PASS: " : "ABLATION FAIL: ") << result.detail
                  << "\n";
        if (!result.ok) throw AcceptanceError(result.detail);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"oracle-glyph decipherment pipeline"};
    app.require_subcommand(1);
    GlobalOpts g;
    app.add_option("--config", g.config_path,
                   "INI config file (default: $OBSD_CONFIG when set)");
    app.add_option("--set", g.overrides, "override a config value: section.key=value");
    app.add_flag("--verbose", g.verbose, "log progress to stderr");

    // frequently used shortcuts, routed through the same override mechanism
    std::vector<std::string> shortcut_sets;
    auto add_shortcut = [&](CLI::App* cmd, const char* flag, const char* key) {
        auto cb = [&shortcut_sets, key](const std::string& v) {
            shortcut_sets.push_back(std::string(key) + "=" + v);
        };
        cmd->add_option_function<std::string>(flag, cb);
    };

    auto* synth = app.add_subcommand("synth-data", "generate a synthetic glyph corpus");
    std::string synth_out;
    bool synth_force = false;
    synth->add_option("--out", synth_out, "corpus directory (default <output_dir>/corpus)");
    synth->add_flag("--force", synth_force, "overwrite a non-empty directory");
    add_shortcut(synth, "--categories", "data.categories");
    add_shortcut(synth, "--variants", "data.variants");
    add_shortcut(synth, "--styles", "data.styles");
    add_shortcut(synth, "--seed", "data.seed");

    auto* ti = app.add_subcommand("train-initial", "train the initial decipherment model");
    bool ti_resume = false;
    ti->add_flag("--resume", ti_resume, "resume from the existing archive");
    add_shortcut(ti, "--epochs", "denoiser.epochs");
    add_shortcut(ti, "--seed", "run.seed");

    auto* tr = app.add_subcommand("train-refiner", "train the zero-shot refiner");
    bool tr_resume = false;
    tr->add_flag("--resume", tr_resume, "resume from the existing archive");
    add_shortcut(tr, "--epochs", "refiner.epochs");
    add_shortcut(tr, "--seed", "run.seed");

    auto* to = app.add_subcommand("train-ocr", "train the evaluation classifier");
    add_shortcut(to, "--seed", "run.seed");

    auto* de = app.add_subcommand("decipher", "generate candidate decipherments");
    std::string de_input, de_initial, de_refiner, de_ocr, de_out;
    int de_trials = 10;
    bool de_norefine = false;
    de->add_option("input", de_input, "input image or directory")->required();
    de->add_option("--initial", de_initial, "initial model archive")->required();
    de->add_option("--refiner", de_refiner, "refiner archive");
    de->add_option("--ocr", de_ocr, "classifier archive for ranked reports");
    de->add_option("--trials", de_trials, "candidates per input (distinct seeds)");
    de->add_flag("--no-refine", de_norefine, "emit raw LSS samples");
    de->add_option("--out", de_out, "output directory");
    add_shortcut(de, "--seed", "run.seed");

    auto* ev = app.add_subcommand("evaluate", "held-out split evaluation");
    std::string ev_initial, ev_refiner, ev_ocr;
    bool ev_norefine = false;
    ev->add_option("--initial", ev_initial, "initial model archive")->required();
    ev->add_option("--refiner", ev_refiner, "refiner archive");
    ev->add_option("--ocr", ev_ocr, "classifier archive")->required();
    ev->add_flag("--no-refine", ev_norefine, "evaluate raw LSS samples");
    add_shortcut(ev, "--seed", "run.seed");
    add_shortcut(ev, "--trials", "eval.trials");

    auto* ab = app.add_subcommand("ablate", "three-arm ablation study");
    bool ab_check = false;
    ab->add_flag("--check", ab_check,
                 "apply the acceptance thresholds (exit 5 on failure)");
    add_shortcut(ab, "--steps", "ablate.steps");
    add_shortcut(ab, "--seed", "run.seed");

    auto* pc = app.add_subcommand("print-config", "dump the resolved configuration");

    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        g.overrides.insert(g.overrides.end(), shortcut_sets.begin(), shortcut_sets.end());
        RunConfig cfg = load_config(g);
        if (pc->parsed()) {
            std::cout << "# digest " << cfg.digest() << "\n" << cfg.to_ini();
            return 0;
        }
        if (synth->parsed()) return cmd_synth_data(cfg, synth_out, synth_force);
        if (ti->parsed()) return cmd_train_initial(cfg, ti_resume, g.verbose);
        if (tr->parsed()) return cmd_train_refiner(cfg, tr_resume, g.verbose);
        if (to->parsed()) return cmd_train_ocr(cfg, g.verbose);
        if (de->parsed())
            return cmd_decipher(cfg, de_input, de_initial, de_refiner, de_ocr, de_trials,
                                de_norefine, de_out);
        if (ev->parsed())
            return cmd_evaluate(cfg, ev_initial, ev_refiner, ev_ocr, ev_norefine,
                                g.verbose);
        if (ab->parsed()) return cmd_ablate(cfg, ab_check, g.verbose);
        throw UsageError("no subcommand");
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return UsageError::exit_code;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return DataError::exit_code;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return DivergenceError::exit_code;
    } catch (const AcceptanceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return AcceptanceError::exit_code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
