#pragma once

#include <memory>
#include <set>

#include <json.hpp>

#include "obsd/archive.hpp"
#include "obsd/glyph_data.hpp"
#include "obsd/nn/modules.hpp"

namespace obsd {

struct OcrConfig {
    int input_size = 32;
    int base_width = 16;
    double lr = 1e-3;
    int batch = 64;
    int max_steps = 4000;
    int eval_every = 100;
    double target_accuracy = 0.99;  // bar on canonical renderings; 0 disables
    double weight_decay = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    // augmentation: small affine + pixel noise
    double aug_shift = 2.0;    // pixels at input_size
    double aug_rotate = 6.0;   // degrees
    double aug_scale = 0.10;   // relative
    double aug_noise = 0.05;   // gaussian sigma in [-1,1] units

    void validate() const;
    nlohmann::json to_json() const;
    static OcrConfig from_json(const nlohmann::json& j);
    nn::AdamConfig adam() const {
        return {lr, adam_beta1, adam_beta2, 1e-8, weight_decay};
    }
};

// Full ranking over categories, scores normalized to sum 1, ties broken by
// category order.
struct RankedPrediction {
    std::vector<std::pair<std::string, double>> ranking;
    int rank_of(const std::string& category) const;  // 1-based; throws if absent
    const std::string& top1() const { return ranking.front().first; }
};

struct Ranker {
    virtual ~Ranker() = default;
    virtual RankedPrediction rank(const GlyphImage& image) const = 0;
    virtual std::string digest() const = 0;
};

// Small convolutional classifier over the category set.
class OcrClassifier : public Ranker {
public:
    OcrClassifier(OcrConfig cfg, std::vector<std::string> categories, uint64_t init_seed);

    RankedPrediction rank(const GlyphImage& image) const override;
    std::string digest() const override;

    double accuracy_on_canonical(const GlyphCorpus& corpus) const;
    const std::vector<std::string>& categories() const { return categories_; }
    const OcrConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    void save(const std::filesystem::path& dir, const TrainStats& stats,
              uint64_t seed, double accuracy) const;
    static std::unique_ptr<OcrClassifier> load(const std::filesystem::path& dir);

private:
    friend OcrClassifier train_ocr(const GlyphCorpus&, const OcrConfig&, uint64_t,
                                   TrainStats*, bool);
    nn::Tensor forward(const nn::Tensor& x, bool training) const;
    GlyphImage preprocess(const GlyphImage& img) const;

    OcrConfig cfg_;
    std::vector<std::string> categories_;
    uint64_t init_seed_;
    nn::ParamStore params_;
    nn::Conv2d c1_, c2_, c3_;
    nn::GroupNorm n1_, n2_, n3_;
    nn::Linear fc_;
};

// Trains on all modern renderings (targets + styles) across every category
// with small-affine + noise augmentation. Throws AcceptanceError if the
// canonical-rendering accuracy bar is not reached within max_steps.
OcrClassifier train_ocr(const GlyphCorpus& corpus, const OcrConfig& cfg, uint64_t seed,
                        TrainStats* stats_out = nullptr, bool verbose = false);

// Decipherment backend under evaluation; real pipeline or test stub.
struct DecipherPipeline {
    virtual ~DecipherPipeline() = default;
    virtual GlyphImage generate(const GlyphImage& cond, uint64_t seed) const = 0;
    virtual std::set<std::string> training_categories() const = 0;
    virtual std::string digest() const { return "stub"; }
};

struct EvalReport {
    std::vector<int> ks;
    std::vector<double> topk_accuracy;       // aligned with ks
    std::vector<double> cumulative_success;  // per trial count m = 1..n
    size_t n_items = 0;
    std::vector<uint64_t> seeds;  // base seed (single) or trial seeds (multi)
    std::string pipeline_digest, classifier_digest, corpus_digest;
    nlohmann::json per_item = nlohmann::json::array();

    std::string to_csv() const;
    nlohmann::json to_json() const;
    void write(const std::filesystem::path& stem) const;  // stem.csv + stem.json
};

// Per-item derived seed shared by single- and multi-round evaluation, so a
// 1-trial multi-round run coincides with the single round.
uint64_t eval_item_seed(uint64_t round_seed, size_t item_index);

EvalReport single_round_eval(const GlyphCorpus& test_corpus,
                             const DecipherPipeline& pipeline, const Ranker& classifier,
                             const std::vector<int>& ks, uint64_t base_seed);

EvalReport multi_round_eval(const GlyphCorpus& test_corpus,
                            const DecipherPipeline& pipeline, const Ranker& classifier,
                            const std::vector<uint64_t>& trial_seeds);

}  // namespace obsd
