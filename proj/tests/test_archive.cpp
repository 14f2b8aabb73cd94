#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "obsd/archive.hpp"
#include "obsd/common.hpp"

using namespace obsd;
namespace fs = std::filesystem;

namespace {
struct TempDir {
    fs::path path;
    TempDir(const char* tag) : path(fs::temp_directory_path() / tag) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};
}  // namespace

TEST_CASE("archive round-trips parameters bit-exactly") {
    TempDir dir("obsd_test_archive");
    nn::ParamStore a(42);
    a.make("layer1.w", {4, 3}, 0.5);
    a.make("layer1.b", {4}, 0.1);
    a.make_const("norm.gamma", {4}, 1.0);
    nn::AdamConfig cfg;
    cfg.lr = 0.01;
    nn::Adam opt(a.all(), cfg);

    ArchiveManifest m;
    m.kind = "denoiser";
    m.config = {{"width", 4}};
    m.config_digest = "deadbeef";
    m.seed = 7;
    m.epoch = 2;
    m.step = 123;
    m.loss_history = {1.0, 0.5, 0.25};
    save_archive(dir.path, m, a, &opt);

    nn::ParamStore b(99);  // different init seed; values get overwritten
    b.make("layer1.w", {4, 3}, 0.5);
    b.make("layer1.b", {4}, 0.1);
    b.make_const("norm.gamma", {4}, 2.0);
    nn::Adam opt2(b.all(), cfg);
    auto loaded = load_archive(dir.path, b, &opt2);

    for (size_t i = 0; i < a.items().size(); ++i)
        CHECK(a.items()[i].second.values() == b.items()[i].second.values());
    CHECK(loaded.kind == "denoiser");
    CHECK(loaded.seed == 7);
    CHECK(loaded.epoch == 2);
    CHECK(loaded.step == 123);
    CHECK(loaded.loss_history == std::vector<double>{1.0, 0.5, 0.25});
    CHECK(opt2.step_count() == opt.step_count());
    CHECK(archive_param_digest(a) == archive_param_digest(b));
}

TEST_CASE("archive save/load/save is stable") {
    TempDir dir("obsd_test_archive2");
    nn::ParamStore a(1);
    Rng rng(5);
    auto t = a.make("w", {16}, 1.0);
    for (auto& v : t.values()) v = rng.normal() * 1e-7;  // tiny values survive exactly
    ArchiveManifest m;
    m.kind = "classifier";
    save_archive(dir.path, m, a);
    nn::ParamStore b(2);
    b.make("w", {16}, 1.0);
    load_archive(dir.path, b);
    TempDir dir2("obsd_test_archive3");
    save_archive(dir2.path, m, b);
    nn::ParamStore c(3);
    c.make("w", {16}, 1.0);
    load_archive(dir2.path, c);
    CHECK(c.items()[0].second.values() == t.values());
}

TEST_CASE("archive rejects mismatched models") {
    TempDir dir("obsd_test_archive4");
    nn::ParamStore a(1);
    a.make("w", {4}, 0.5);
    ArchiveManifest m;
    m.kind = "denoiser";
    save_archive(dir.path, m, a);

    nn::ParamStore wrong_shape(1);
    wrong_shape.make("w", {5}, 0.5);
    CHECK_THROWS_AS(load_archive(dir.path, wrong_shape), DataError);

    nn::ParamStore wrong_name(1);
    wrong_name.make("v", {4}, 0.5);
    CHECK_THROWS_AS(load_archive(dir.path, wrong_name), DataError);

    nn::ParamStore wrong_count(1);
    wrong_count.make("w", {4}, 0.5);
    wrong_count.make("w2", {4}, 0.5);
    CHECK_THROWS_AS(load_archive(dir.path, wrong_count), DataError);

    CHECK_THROWS_AS(read_manifest(dir.path / "nope"), DataError);
}
