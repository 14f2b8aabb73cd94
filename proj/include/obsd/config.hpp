#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "obsd/denoiser.hpp"
#include "obsd/evaluator.hpp"
#include "obsd/refiner.hpp"

namespace obsd {

// Resolved run configuration. File format is sectioned key = value text;
// command-line flags override file values; `print-config` dumps the resolved
// form whose SHA-256 is the config digest embedded in artifacts.
struct RunConfig {
    // [run]
    uint64_t seed = 42;
    std::string output_dir = "runs/out";
    int workers = 1;
    // [image]
    int image_size = 128;
    int channels = 3;
    // [patch]
    int patch = 64;
    int stride = 16;
    // [schedule]
    int schedule_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    // [denoiser] / [refiner] / [ocr]
    DenoiserConfig denoiser;
    RefinerConfig refiner;
    OcrConfig ocr;
    bool ocr_dual = false;
    std::string exemplar_category;  // "" -> first train category
    bool use_refiner = true;
    // [data]
    std::string data_source = "synthetic";  // "synthetic" or a directory path
    int synth_categories = 60;
    int synth_variants = 8;
    int synth_styles = 20;
    uint64_t data_seed = 7;
    // [split]
    double test_fraction = 0.1;
    uint64_t split_seed = 7;
    // [eval]
    std::vector<int> ks = {1, 10, 20, 50};
    int trials = 5;
    // [ablate] equal per-arm diffusion budgets
    int ablate_steps = 2000;
    int ablate_refiner_steps = 800;

    static RunConfig defaults();
    static RunConfig from_ini_file(const std::filesystem::path& path);
    void apply_kv(const std::string& dotted_key, const std::string& value);
    void resolve();  // cross-field fill + consistency checks
    std::string to_ini() const;
    std::string digest() const;

    PatchLayout layout() const { return build_patch_layout(image_size, image_size, patch, stride); }
    NoiseSchedule schedule() const { return make_schedule(schedule_steps, beta_start, beta_end); }
};

}  // namespace obsd
