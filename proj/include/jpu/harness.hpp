#pragma once

// Experiment runner: variant configs, the ablation matrix, evaluation proxies
// (attack success, false refusal, retained-utility NLL, layer-wise mask IoU),
// end-to-end runs persisted as provenance-complete directories, and the CSV
// report generator that turns a tree of runs into figure data files.

#include <cstdint>
#include <string>
#include <vector>

#include "jpu/buffer.hpp"
#include "jpu/corpus.hpp"
#include "jpu/model.hpp"
#include "jpu/rectifier.hpp"

namespace jpu::harness {

using lm::Token;
using lm::TokenSeq;

// jpu is the full method. jp_random / jp_policy / jp_snip / jp_rep / jp_util
// each substitute one stage (random mask, frozen buffer, SNIP ranking, no
// anchor term, no utility term); baseline_eq1 is static full-gradient
// unlearning; base skips training entirely.
enum class Variant { jpu, jp_random, jp_policy, jp_snip, jp_rep, jp_util, baseline_eq1, base };

const char* variant_str(Variant v);
Variant variant_from_str(const std::string& s); // ConfigError on unknown names

// Which layer range the update mask may touch. default_window is the deep
// half; the others are the selection-strategy ablations.
enum class LayerStrategy { default_window, shallow, middle, last };

const char* layer_strategy_str(LayerStrategy s);
LayerStrategy layer_strategy_from_str(const std::string& s);

// default: [ceil(L/2), L); shallow: [0, ceil(L/3)); middle: [ceil(L/3),
// ceil(2L/3)); last: final four layers. ConfigError when the range is empty.
path::Window resolve_window(LayerStrategy s, int layers);

// Mask sparsity used by the IoU diagnostic, held fixed so curves stay
// comparable across runs regardless of the training sparsity.
inline constexpr double kIouSparsity = 0.05;

struct ExperimentConfig {
    uint64_t world_seed = 1;
    corpus::WorldSizes sizes;
    lm::ModelConfig model;
    corpus::PretrainConfig pretrain = {.seed = 1};
    buffer::BufferConfig buffer;
    rect::TrainConfig train;
    Variant variant = Variant::jpu;
    LayerStrategy layers = LayerStrategy::default_window;
    std::string attack_types = "ABC"; // template families seeded into the buffer
    std::string out_dir = "runs/out";

    void validate() const; // ConfigError on any out-of-domain field
    bool operator==(const ExperimentConfig&) const = default;
};

// One "key=value" assignment; nested keys dot-separated (train.eta=0.1).
// The bare key "seed" fans out to world, pretrain, and train seeds.
void apply_config_kv(ExperimentConfig& cfg, const std::string& key, const std::string& value);

// Text config: one assignment per line, '#' comments and blank lines skipped.
ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& cfg, const std::string& path);

// The reported quantities for one model snapshot. iou_curve is the per-layer
// IoU between the jailbreak mask and the direct-harm mask, averaged over
// attack types.
struct MetricsRecord {
    std::string split;                // "base" or "final"
    double asr_proxy = 0.0;           // greedy first token == SURE on templated attacks
    double refusal_rate = 0.0;        // greedy first token == REFUSE on bare harmful
    double false_refusal_rate = 0.0;  // greedy first token == REFUSE on held benign
    double utility_nll = 0.0;         // mean NLL on held retained pairs
    std::vector<double> iou_curve;

    std::string to_line() const;
    static MetricsRecord from_line(const std::string& line);
    bool operator==(const MetricsRecord&) const = default;
};

// Held-out attack set: every eval template wrapped around held-out harmful
// queries round robin; the typed overload keeps only that template family's
// prompts (same queries, same order).
std::vector<TokenSeq> held_attack_prompts(const corpus::World& world, int max_seq);
std::vector<TokenSeq> held_attack_prompts(const corpus::World& world, corpus::AttackType type,
                                          int max_seq);

// Fraction of prompts whose greedy continuation begins with `sure`.
double eval_asr(const lm::ModelState& model, const std::vector<TokenSeq>& attacks, Token sure);

// Fraction of benign prompts whose greedy continuation begins with `refuse`.
double eval_false_refusal(const lm::ModelState& model,
                          const std::vector<const corpus::LabeledPair*>& benign, Token refuse);

// Mean per-token NLL over the holdout pairs.
double eval_utility(const lm::ModelState& model,
                    const std::vector<const corpus::LabeledPair*>& holdout);

// [attack type][layer] IoU between the top-p jailbreak mask (templated
// held-out attacks of one family) and the top-p direct-harm mask (bare
// held-out harmful prompts), both over the full layer range.
std::vector<std::vector<double>> iou_by_attack_type(const lm::ModelState& model,
                                                    const corpus::World& world, double p);

MetricsRecord eval_metrics(const lm::ModelState& model, const corpus::World& world,
                           const std::string& split);

// Drops buffer entries whose attack type is not in `types` ("A", "AB", ...).
void filter_attack_types(buffer::AttackBuffer& buf, const std::string& types);

struct RunResult {
    ExperimentConfig cfg; // as executed, window resolved into train.window
    corpus::PremiseReport premise;
    MetricsRecord base;
    MetricsRecord post;
    rect::TrainResult train;
    double train_wall_ms = 0.0;
};

// Full pipeline into cfg.out_dir: build + save the world, pretrain (or adopt
// `pretrained`, which must match the config's world and pretrain settings),
// apply the variant's substitution, train, evaluate base and final models,
// and persist config.txt, world.tsv, base/final.ckpt, train.log, metrics.tsv,
// run.txt, buffer.tsv, iou.csv, and flow/mask dumps. Identical configs
// produce byte-identical metrics.tsv and train.log streams.
RunResult run_variant(const ExperimentConfig& cfg);
RunResult run_variant(const ExperimentConfig& cfg, const lm::ModelState* pretrained);

struct ReportResult {
    int runs = 0;
    std::vector<std::string> absences; // expected-but-missing report inputs
};

// Scans root's subdirectories for completed runs and writes summary.csv,
// iou_layers.csv, sparsity_sweep.csv, static_dynamic.csv, and absence.txt
// into root. Missing variants shrink the aggregates and land in the absence
// list; an empty root still produces the full set of (header-only) files.
ReportResult report(const std::string& root);

// JPU_LOG = quiet | info | debug (default info); ConfigError on junk values.
enum class LogLevel { quiet = 0, info = 1, debug = 2 };
LogLevel log_level();
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

} // namespace jpu::harness
