#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "obsd/archive.hpp"
#include "obsd/common.hpp"
#include "obsd/denoiser.hpp"
#include "obsd/image.hpp"
#include "obsd/sampler.hpp"
#include "obsd/sha256.hpp"

using namespace obsd;
namespace fs = std::filesystem;
using nlohmann::json;

#ifndef OBSD_BIN
#error "OBSD_BIN must point at the obsd executable"
#endif

namespace {

const fs::path kRoot = fs::temp_directory_path() / "obsd_test_cli";

int run(const std::string& args, std::string* out = nullptr) {
    fs::path out_file = kRoot / "cmd_out.txt";
    std::string cmd = std::string(OBSD_BIN) + " " + args + " > " + out_file.string() +
                      " 2> " + (kRoot / "cmd_err.txt").string();
    int status = std::system(cmd.c_str());
    if (out) {
        std::ifstream f(out_file);
        std::stringstream ss;
        ss << f.rdbuf();
        *out = ss.str();
    }
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string micro_args(const std::string& outdir) {
    return " --set run.output_dir=" + outdir +
           " --set image.size=32 --set image.channels=1"
           " --set patch.size=16 --set patch.stride=8 --set schedule.steps=20"
           " --set denoiser.base_width=8 --set denoiser.levels=2"
           " --set denoiser.time_embed_dim=16 --set denoiser.lr=1e-3"
           " --set denoiser.batch=4 --set denoiser.steps_per_epoch=8"
           " --set refiner.base_width=8 --set refiner.content_width=4"
           " --set refiner.style_dim=8 --set refiner.dk=8 --set refiner.ffn_hidden=12"
           " --set refiner.t_steps=50 --set refiner.batch=2"
           " --set refiner.steps_per_epoch=5"
           " --set data.categories=6 --set data.variants=3 --set data.styles=4"
           " --set data.seed=7 --set split.test_fraction=0.2 --set eval.ks=1,2,5"
           " --set eval.trials=2 --set ocr.input_size=16 --set ocr.base_width=8"
           " --set ocr.lr=2e-3 --set ocr.batch=16 --set ocr.max_steps=600"
           " --set ocr.eval_every=50";
}

struct Fixture {
    fs::path out;
    Fixture() {
        fs::create_directories(kRoot);
        out = kRoot / "out";
    }
    // archives shared across cases, built on first use
    void ensure_trained() {
        static bool done = false;
        if (done) return;
        REQUIRE(run(micro_args(out.string()) +
                    " train-initial --set denoiser.epochs=2") == 0);
        REQUIRE(run(micro_args(out.string()) +
                    " train-refiner --set refiner.epochs=1") == 0);
        REQUIRE(run(micro_args(out.string()) + " train-ocr") == 0);
        done = true;
    }
};

}  // namespace

TEST_CASE("print-config digest is stable and reacts to overrides") {
    Fixture fx;
    std::string a, b, c;
    REQUIRE(run("print-config", &a) == 0);
    REQUIRE(run("print-config", &b) == 0);
    CHECK(a == b);
    REQUIRE(run("print-config --set run.seed=99", &c) == 0);
    CHECK(a != c);
    CHECK(a.find("# digest ") == 0);
}

TEST_CASE("usage errors exit with code 2 and report on stderr") {
    Fixture fx;
    CHECK(run("definitely-not-a-command") == 2);
    CHECK(run("print-config --set no.such_key=1") == 2);
    CHECK(run("print-config --set patch.size=999") == 2);  // fails validation
    CHECK(run("decipher") == 2);                           // missing required args
    std::string err = slurp(kRoot / "cmd_err.txt");
    CHECK(!err.empty());
}

TEST_CASE("synth-data writes the expected image count and is reproducible") {
    Fixture fx;
    fs::path c1 = kRoot / "corpus1", c2 = kRoot / "corpus2";
    fs::remove_all(c1);
    fs::remove_all(c2);
    std::string out1, out2;
    REQUIRE(run(micro_args(fx.out.string()) + " synth-data --out " + c1.string(), &out1) == 0);
    REQUIRE(run(micro_args(fx.out.string()) + " synth-data --out " + c2.string(), &out2) == 0);
    // 6 categories x (3 ancient + 4 styles + 1 canonical)
    size_t files = 0;
    for (auto& e : fs::recursive_directory_iterator(c1))
        if (e.is_regular_file() && e.path().extension() == ".pgm") ++files;
    CHECK(files == 6u * (3 + 4 + 1));
    // identical manifests (modulo the path-free content) => identical digests
    auto d1 = json::parse(slurp(c1 / "manifest.json"))["digest"];
    auto d2 = json::parse(slurp(c2 / "manifest.json"))["digest"];
    CHECK(d1 == d2);
    // refuses to overwrite without --force (exit 3), succeeds with it
    CHECK(run(micro_args(fx.out.string()) + " synth-data --out " + c1.string()) == 3);
    CHECK(run(micro_args(fx.out.string()) + " synth-data --out " + c1.string() +
              " --force") == 0);
    // invalid counts are usage errors
    CHECK(run(micro_args(fx.out.string()) + " synth-data --out " + (kRoot / "x").string() +
              " --categories 0") == 2);
}

TEST_CASE("train-initial with zero epochs archives the untouched initialization") {
    Fixture fx;
    fs::path out = kRoot / "zero_epochs";
    fs::remove_all(out);
    REQUIRE(run(micro_args(out.string()) + " train-initial --set denoiser.epochs=0") == 0);
    auto manifest = json::parse(slurp(out / "initial" / "manifest.json"));
    CHECK(manifest["step"] == 0);
    CHECK(manifest["loss_history"].empty());
    // the archived parameters equal a fresh model built with the same seeds
    DenoiserConfig dcfg = DenoiserConfig::from_json(manifest["config"]);
    UNetDenoiser fresh(dcfg, manifest["extra"]["init_seed"]);
    CHECK(manifest["param_digest"] == archive_param_digest(fresh.params()));
    // config digest recorded
    CHECK(manifest["config_digest"] == sha256_hex(dcfg.to_json().dump()));
    CHECK(manifest["extra"].contains("run_config_digest"));
}

TEST_CASE("decipher is deterministic, records distinct seeds, honors --no-refine") {
    Fixture fx;
    fx.ensure_trained();
    // input: one of the corpus condition images, written out by synth-data
    fs::path corpus = kRoot / "corpus1";
    fs::path input = corpus / "cat_0000" / "condition" / "variant_000.pgm";
    REQUIRE(fs::exists(input));
    std::string base = micro_args(fx.out.string()) + " decipher " + input.string() +
                       " --initial " + (fx.out / "initial").string() + " --refiner " +
                       (fx.out / "refiner").string() + " --ocr " +
                       (fx.out / "ocr").string();
    fs::path d1 = kRoot / "dec1", d2 = kRoot / "dec2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    REQUIRE(run(base + " --trials 1 --seed 5 --out " + d1.string()) == 0);
    REQUIRE(run(base + " --trials 1 --seed 5 --out " + d2.string()) == 0);
    CHECK(slurp(d1 / "variant_000_candidate_00.pgm") ==
          slurp(d2 / "variant_000_candidate_00.pgm"));
    CHECK(slurp(d1 / "report.json") == slurp(d2 / "report.json"));

    // 10 trials -> 10 distinct recorded seeds
    fs::path d10 = kRoot / "dec10";
    fs::remove_all(d10);
    REQUIRE(run(base + " --trials 10 --out " + d10.string()) == 0);
    auto rep = json::parse(slurp(d10 / "report.json"));
    std::set<uint64_t> seeds;
    for (auto& cj : rep[0]["candidates"]) seeds.insert(cj["seed"].get<uint64_t>());
    CHECK(seeds.size() == 10);
    CHECK(fs::exists(d10 / "variant_000_montage.pgm"));

    // --no-refine equals the raw LSS sample of the archived model
    fs::path dn = kRoot / "dec_noref";
    fs::remove_all(dn);
    REQUIRE(run(base + " --no-refine --trials 1 --seed 5 --out " + dn.string()) == 0);
    auto manifest = read_manifest(fx.out / "initial");
    auto dcfg = DenoiserConfig::from_json(manifest.config);
    UNetDenoiser model(dcfg, manifest.extra["init_seed"]);
    load_archive(fx.out / "initial", model.params());
    GlyphImage cond = register_image(read_pnm(input), 32, 32, 1);
    auto layout = build_patch_layout(32, 32, 16, 8);
    auto sched = make_schedule(20, 1e-4, 0.02);
    GlyphImage want = lss_sample(cond, model, sched, layout, 5);
    auto got = read_pnm(dn / "variant_000_candidate_00.pgm");
    CHECK(got.to_bytes() == want.to_bytes());

    // missing archives are data errors
    CHECK(run(micro_args(fx.out.string()) + " decipher " + input.string() +
              " --initial /nonexistent --no-refine") == 3);
    // malformed input image
    fs::path junk = kRoot / "junk.pgm";
    std::ofstream(junk) << "nope";
    CHECK(run(micro_args(fx.out.string()) + " decipher " + junk.string() + " --initial " +
              (fx.out / "initial").string() + " --no-refine") == 3);
}

TEST_CASE("evaluate writes monotone reports and reruns byte-identically") {
    Fixture fx;
    fx.ensure_trained();
    std::string args = micro_args(fx.out.string()) + " evaluate --initial " +
                       (fx.out / "initial").string() + " --refiner " +
                       (fx.out / "refiner").string() + " --ocr " +
                       (fx.out / "ocr").string();
    REQUIRE(run(args) == 0);
    auto single1 = slurp(fx.out / "eval" / "single_round.json");
    auto multi1 = slurp(fx.out / "eval" / "multi_round.json");
    auto rep = json::parse(single1);
    auto acc = rep["topk_accuracy"].get<std::vector<double>>();
    for (size_t j = 1; j < acc.size(); ++j) CHECK(acc[j] >= acc[j - 1]);
    auto multi = json::parse(multi1)["cumulative_success"].get<std::vector<double>>();
    for (size_t m = 1; m < multi.size(); ++m) CHECK(multi[m] >= multi[m - 1]);
    // rerun with a warm cache reproduces the reports exactly
    REQUIRE(run(args) == 0);
    CHECK(slurp(fx.out / "eval" / "single_round.json") == single1);
    CHECK(slurp(fx.out / "eval" / "multi_round.json") == multi1);
}

TEST_CASE("train-ocr exits 5 when the accuracy bar is unreachable") {
    Fixture fx;
    fs::path out = kRoot / "ocr_fail";
    CHECK(run(micro_args(out.string()) + " train-ocr --set ocr.max_steps=2") == 5);
}
