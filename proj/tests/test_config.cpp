#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "obsd/config.hpp"

using namespace obsd;
namespace fs = std::filesystem;

TEST_CASE("defaults resolve and digest is stable") {
    auto a = RunConfig::defaults();
    auto b = RunConfig::defaults();
    CHECK(a.digest() == b.digest());
    CHECK(a.denoiser.patch == a.patch);
    CHECK(a.refiner.image == a.image_size);
    // paper-sourced training defaults
    CHECK(a.denoiser.lr == 2e-5);
    CHECK(a.denoiser.batch == 8);
    CHECK(a.denoiser.epochs == 300);
    CHECK(a.denoiser.weight_decay == 1e-4);
    CHECK(a.denoiser.adam_beta1 == 0.9);
    CHECK(a.denoiser.adam_beta2 == 0.999);
    CHECK(a.patch == 64);
    CHECK(a.stride == 16);
    CHECK(a.image_size == 128);
}

TEST_CASE("ini round trip preserves the digest") {
    auto cfg = RunConfig::defaults();
    cfg.seed = 123;
    cfg.patch = 32;
    cfg.stride = 32;
    cfg.ks = {1, 7};
    cfg.resolve();
    fs::path file = fs::temp_directory_path() / "obsd_test_cfg.ini";
    {
        std::ofstream f(file);
        f << cfg.to_ini();
    }
    auto back = RunConfig::from_ini_file(file);
    CHECK(back.digest() == cfg.digest());
    CHECK(back.seed == 123);
    CHECK(back.ks == std::vector<int>{1, 7});
    fs::remove(file);
}

TEST_CASE("overrides apply and are validated") {
    auto cfg = RunConfig::defaults();
    cfg.apply_kv("run.seed", "9");
    cfg.apply_kv("eval.ks", "1, 2, 3");
    cfg.resolve();
    CHECK(cfg.seed == 9);
    CHECK(cfg.ks == std::vector<int>{1, 2, 3});
    CHECK_THROWS_AS(cfg.apply_kv("nope.nope", "1"), UsageError);
    cfg.apply_kv("patch.size", "100");  // breaks divisibility
    CHECK_THROWS_AS(cfg.resolve(), UsageError);
}

TEST_CASE("cross-field consistency is enforced") {
    auto cfg = RunConfig::defaults();
    cfg.stride = 96;  // stride > patch leaves gaps
    CHECK_THROWS_AS(cfg.resolve(), UsageError);
    cfg = RunConfig::defaults();
    cfg.channels = 2;
    CHECK_THROWS_AS(cfg.resolve(), UsageError);
    cfg = RunConfig::defaults();
    cfg.trials = 0;
    CHECK_THROWS_AS(cfg.resolve(), UsageError);
    cfg = RunConfig::defaults();
    cfg.ks = {};
    CHECK_THROWS_AS(cfg.resolve(), UsageError);
}

TEST_CASE("malformed config files are usage errors") {
    fs::path file = fs::temp_directory_path() / "obsd_test_cfg_bad.ini";
    {
        std::ofstream f(file);
        f << "key_without_section = 1\n";
    }
    CHECK_THROWS_AS(RunConfig::from_ini_file(file), UsageError);
    {
        std::ofstream f(file);
        f << "[run]\nthis line has no equals sign\n";
    }
    CHECK_THROWS_AS(RunConfig::from_ini_file(file), UsageError);
    CHECK_THROWS_AS(RunConfig::from_ini_file("/nonexistent.ini"), DataError);
    fs::remove(file);
}
