#include "obsd/config.hpp"

#include <fstream>
#include <sstream>

#include "obsd/sha256.hpp"

namespace obsd {

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.resolve();
    return c;
}

void RunConfig::resolve() {
    if (image_size < 8) throw UsageError("config: image size too small");
    if (channels != 1 && channels != 3)
        throw UsageError("config: channels must be 1 or 3");
    if (workers < 1) throw UsageError("config: workers must be >= 1");
    denoiser.patch = patch;
    denoiser.channels = channels;
    refiner.image = image_size;
    refiner.channels = channels;
    // geometry consistency across modules
    build_patch_layout(image_size, image_size, patch, stride);
    make_schedule(schedule_steps, beta_start, beta_end);
    denoiser.validate();
    refiner.validate();
    ocr.validate();
    if (ks.empty()) throw UsageError("config: eval k set is empty");
    for (int k : ks)
        if (k < 1) throw UsageError("config: k values must be >= 1");
    if (trials < 1) throw UsageError("config: trials must be >= 1");
    if (ablate_steps < 1 || ablate_refiner_steps < 0)
        throw UsageError("config: bad ablation budgets");
    if (data_source != "synthetic" && data_source.empty())
        throw UsageError("config: empty data source");
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

uint64_t parse_u64(const std::string& v) { return std::stoull(v); }
int parse_int(const std::string& v) { return std::stoi(v); }
double parse_double(const std::string& v) { return std::stod(v); }
bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw UsageError("config: bad boolean: " + v);
}

std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) out.push_back(parse_int(tok));
    }
    return out;
}

}  // namespace

void RunConfig::apply_kv(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (key == "run.seed") seed = parse_u64(v);
    else if (key == "run.output_dir") output_dir = v;
    else if (key == "run.workers") workers = parse_int(v);
    else if (key == "image.size") image_size = parse_int(v);
    else if (key == "image.channels") channels = parse_int(v);
    else if (key == "patch.size") patch = parse_int(v);
    else if (key == "patch.stride") stride = parse_int(v);
    else if (key == "schedule.steps") schedule_steps = parse_int(v);
    else if (key == "schedule.beta_start") beta_start = parse_double(v);
    else if (key == "schedule.beta_end") beta_end = parse_double(v);
    else if (key == "denoiser.base_width") denoiser.base_width = parse_int(v);
    else if (key == "denoiser.levels") denoiser.levels = parse_int(v);
    else if (key == "denoiser.time_embed_dim") denoiser.time_embed_dim = parse_int(v);
    else if (key == "denoiser.lr") denoiser.lr = parse_double(v);
    else if (key == "denoiser.batch") denoiser.batch = parse_int(v);
    else if (key == "denoiser.epochs") denoiser.epochs = parse_int(v);
    else if (key == "denoiser.weight_decay") denoiser.weight_decay = parse_double(v);
    else if (key == "denoiser.adam_beta1") denoiser.adam_beta1 = parse_double(v);
    else if (key == "denoiser.adam_beta2") denoiser.adam_beta2 = parse_double(v);
    else if (key == "denoiser.steps_per_epoch") denoiser.steps_per_epoch = parse_int(v);
    else if (key == "denoiser.checkpoint_every") denoiser.checkpoint_every = parse_int(v);
    else if (key == "refiner.base_width") refiner.base_width = parse_int(v);
    else if (key == "refiner.content_width") refiner.content_width = parse_int(v);
    else if (key == "refiner.style_dim") refiner.style_dim = parse_int(v);
    else if (key == "refiner.dk") refiner.dk = parse_int(v);
    else if (key == "refiner.ffn_hidden") refiner.ffn_hidden = parse_int(v);
    else if (key == "refiner.t_steps") refiner.t_steps = parse_int(v);
    else if (key == "refiner.beta_start") refiner.beta_start = parse_double(v);
    else if (key == "refiner.beta_end") refiner.beta_end = parse_double(v);
    else if (key == "refiner.lambda_offset") refiner.lambda_offset = parse_double(v);
    else if (key == "refiner.refine_strength") refiner.refine_strength = parse_double(v);
    else if (key == "refiner.lr") refiner.lr = parse_double(v);
    else if (key == "refiner.batch") refiner.batch = parse_int(v);
    else if (key == "refiner.epochs") refiner.epochs = parse_int(v);
    else if (key == "refiner.weight_decay") refiner.weight_decay = parse_double(v);
    else if (key == "refiner.steps_per_epoch") refiner.steps_per_epoch = parse_int(v);
    else if (key == "refiner.checkpoint_every") refiner.checkpoint_every = parse_int(v);
    else if (key == "refiner.exemplar_category") exemplar_category = v;
    else if (key == "refiner.enabled") use_refiner = parse_bool(v);
    else if (key == "data.source") data_source = v;
    else if (key == "data.categories") synth_categories = parse_int(v);
    else if (key == "data.variants") synth_variants = parse_int(v);
    else if (key == "data.styles") synth_styles = parse_int(v);
    else if (key == "data.seed") data_seed = parse_u64(v);
    else if (key == "split.test_fraction") test_fraction = parse_double(v);
    else if (key == "split.seed") split_seed = parse_u64(v);
    else if (key == "eval.ks") ks = parse_int_list(v);
    else if (key == "eval.trials") trials = parse_int(v);
    else if (key == "ocr.input_size") ocr.input_size = parse_int(v);
    else if (key == "ocr.base_width") ocr.base_width = parse_int(v);
    else if (key == "ocr.lr") ocr.lr = parse_double(v);
    else if (key == "ocr.batch") ocr.batch = parse_int(v);
    else if (key == "ocr.max_steps") ocr.max_steps = parse_int(v);
    else if (key == "ocr.eval_every") ocr.eval_every = parse_int(v);
    else if (key == "ocr.target_accuracy") ocr.target_accuracy = parse_double(v);
    else if (key == "ocr.dual") ocr_dual = parse_bool(v);
    else if (key == "ablate.steps") ablate_steps = parse_int(v);
    else if (key == "ablate.refiner_steps") ablate_refiner_steps = parse_int(v);
    else throw UsageError("config: unknown key: " + key);
}

RunConfig RunConfig::from_ini_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read config file: " + path.string());
    RunConfig cfg;
    std::string line, section;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        std::string s = trim(line);
        if (s.empty() || s[0] == '#' || s[0] == ';') continue;
        if (s.front() == '[' && s.back() == ']') {
            section = trim(s.substr(1, s.size() - 2));
            continue;
        }
        auto eq = s.find('=');
        if (eq == std::string::npos)
            throw UsageError("config: malformed line " + std::to_string(lineno) + " in " +
                             path.string());
        std::string key = trim(s.substr(0, eq));
        if (section.empty())
            throw UsageError("config: key outside a section at line " +
                             std::to_string(lineno));
        cfg.apply_kv(section + "." + key, s.substr(eq + 1));
    }
    cfg.resolve();
    return cfg;
}

std::string RunConfig::to_ini() const {
    std::ostringstream o;
    o.precision(17);
    o << "[run]\n";
    o << "seed = " << seed << "\n";
    o << "output_dir = " << output_dir << "\n";
    o << "workers = " << workers << "\n";
    o << "[image]\n";
    o << "size = " << image_size << "\n";
    o << "channels = " << channels << "\n";
    o << "[patch]\n";
    o << "size = " << patch << "\n";
    o << "stride = " << stride << "\n";
    o << "[schedule]\n";
    o << "steps = " << schedule_steps << "\n";
    o << "beta_start = " << beta_start << "\n";
    o << "beta_end = " << beta_end << "\n";
    o << "[denoiser]\n";
    o << "base_width = " << denoiser.base_width << "\n";
    o << "levels = " << denoiser.levels << "\n";
    o << "time_embed_dim = " << denoiser.time_embed_dim << "\n";
    o << "lr = " << denoiser.lr << "\n";
    o << "batch = " << denoiser.batch << "\n";
    o << "epochs = " << denoiser.epochs << "\n";
    o << "weight_decay = " << denoiser.weight_decay << "\n";
    o << "adam_beta1 = " << denoiser.adam_beta1 << "\n";
    o << "adam_beta2 = " << denoiser.adam_beta2 << "\n";
    o << "steps_per_epoch = " << denoiser.steps_per_epoch << "\n";
    o << "checkpoint_every = " << denoiser.checkpoint_every << "\n";
    o << "[refiner]\n";
    o << "enabled = " << (use_refiner ? "true" : "false") << "\n";
    o << "base_width = " << refiner.base_width << "\n";
    o << "content_width = " << refiner.content_width << "\n";
    o << "style_dim = " << refiner.style_dim << "\n";
    o << "dk = " << refiner.dk << "\n";
    o << "ffn_hidden = " << refiner.ffn_hidden << "\n";
    o << "t_steps = " << refiner.t_steps << "\n";
    o << "beta_start = " << refiner.beta_start << "\n";
    o << "beta_end = " << refiner.beta_end << "\n";
    o << "lambda_offset = " << refiner.lambda_offset << "\n";
    o << "refine_strength = " << refiner.refine_strength << "\n";
    o << "lr = " << refiner.lr << "\n";
    o << "batch = " << refiner.batch << "\n";
    o << "epochs = " << refiner.epochs << "\n";
    o << "weight_decay = " << refiner.weight_decay << "\n";
    o << "steps_per_epoch = " << refiner.steps_per_epoch << "\n";
    o << "checkpoint_every = " << refiner.checkpoint_every << "\n";
    o << "exemplar_category = " << exemplar_category << "\n";
    o << "[data]\n";
    o << "source = " << data_source << "\n";
    o << "categories = " << synth_categories << "\n";
    o << "variants = " << synth_variants << "\n";
    o << "styles = " << synth_styles << "\n";
    o << "seed = " << data_seed << "\n";
    o << "[split]\n";
    o << "test_fraction = " << test_fraction << "\n";
    o << "seed = " << split_seed << "\n";
    o << "[eval]\n";
    o << "ks = ";
    for (size_t i = 0; i < ks.size(); ++i) o << (i ? "," : "") << ks[i];
    o << "\n";
    o << "trials = " << trials << "\n";
    o << "[ocr]\n";
    o << "input_size = " << ocr.input_size << "\n";
    o << "base_width = " << ocr.base_width << "\n";
    o << "lr = " << ocr.lr << "\n";
    o << "batch = " << ocr.batch << "\n";
    o << "max_steps = " << ocr.max_steps << "\n";
    o << "eval_every = " << ocr.eval_every << "\n";
    o << "target_accuracy = " << ocr.target_accuracy << "\n";
    o << "dual = " << (ocr_dual ? "true" : "false") << "\n";
    o << "[ablate]\n";
    o << "steps = " << ablate_steps << "\n";
    o << "refiner_steps = " << ablate_refiner_steps << "\n";
    return o.str();
}

std::string RunConfig::digest() const { return sha256_hex(to_ini()); }

}  // namespace obsd
