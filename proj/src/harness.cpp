#include "jpu/harness.hpp"

#include <algorithm>
#include <chrono>
#include <climits>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "jpu/pathfinder.hpp"
#include "tsv_util.hpp"

namespace fs = std::filesystem;

namespace jpu::harness {

namespace {

constexpr const char* kVariantNames[] = {"jpu",    "jp_random", "jp_policy",    "jp_snip",
                                         "jp_rep", "jp_util",   "baseline_eq1", "base"};
constexpr const char* kLayerNames[] = {"default", "shallow", "middle", "last"};

// the paper's sparsity grid, echoed by the sweep report
constexpr double kSparsityGrid[] = {0.01, 0.03, 0.05, 0.1, 0.2, 1.0};

std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

int parse_int(const std::string& s) {
    size_t used = 0;
    long v = 0;
    try {
        v = std::stol(s, &used);
    } catch (const std::exception&) {
        throw InputError("malformed integer '" + s + "'");
    }
    if (used != s.size() || v < INT_MIN || v > INT_MAX)
        throw InputError("malformed integer '" + s + "'");
    return int(v);
}

uint64_t parse_u64(const std::string& s) {
    size_t used = 0;
    uint64_t v = 0;
    try {
        v = std::stoull(s, &used);
    } catch (const std::exception&) {
        throw InputError("malformed seed '" + s + "'");
    }
    if (used != s.size()) throw InputError("malformed seed '" + s + "'");
    return v;
}

void check_attack_types(const std::string& types) {
    if (types.empty()) throw ConfigError("attack_types must name at least one template family");
    for (size_t i = 0; i < types.size(); ++i) {
        if (types[i] != 'A' && types[i] != 'B' && types[i] != 'C')
            throw ConfigError("attack_types may only contain A, B, C, got '" + types + "'");
        if (i && types[i] <= types[i - 1])
            throw ConfigError("attack_types must be strictly ascending, got '" + types + "'");
    }
}

std::string pjoin(const std::string& dir, const char* name) { return dir + "/" + name; }

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw InputError("cannot write " + path);
    return f;
}

} // namespace

const char* variant_str(Variant v) { return kVariantNames[int(v)]; }

Variant variant_from_str(const std::string& s) {
    for (int i = 0; i < 8; ++i)
        if (s == kVariantNames[i]) return Variant(i);
    throw ConfigError("unknown variant '" + s + "'");
}

const char* layer_strategy_str(LayerStrategy s) { return kLayerNames[int(s)]; }

LayerStrategy layer_strategy_from_str(const std::string& s) {
    for (int i = 0; i < 4; ++i)
        if (s == kLayerNames[i]) return LayerStrategy(i);
    throw ConfigError("unknown layer strategy '" + s + "'");
}

path::Window resolve_window(LayerStrategy s, int layers) {
    if (layers < 1) throw ConfigError("model needs at least one layer");
    auto cdiv = [](int a, int b) { return (a + b - 1) / b; };
    path::Window w;
    switch (s) {
        case LayerStrategy::default_window: w = {cdiv(layers, 2), layers}; break;
        case LayerStrategy::shallow: w = {0, cdiv(layers, 3)}; break;
        case LayerStrategy::middle: w = {cdiv(layers, 3), cdiv(2 * layers, 3)}; break;
        case LayerStrategy::last: w = {std::max(0, layers - 4), layers}; break;
    }
    if (w.lo >= w.hi)
        throw ConfigError(std::string("layer strategy '") + layer_strategy_str(s) +
                          "' is empty at depth " + std::to_string(layers));
    return w;
}

void ExperimentConfig::validate() const {
    model.validate();
    if (sizes.d_f < 2 || sizes.d_r < 2 || sizes.benign < 2)
        throw ConfigError("world pair counts must be at least 2");
    if (sizes.pretrain_templates < 1 || sizes.buffer_templates < 1 || sizes.eval_templates < 1)
        throw ConfigError("template pools must be non-empty");
    check_attack_types(attack_types);
    if (out_dir.empty()) throw ConfigError("output directory must be set");
    resolve_window(layers, model.layers); // throws when the strategy is empty here
}

void apply_config_kv(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "seed") {
        uint64_t s = parse_u64(value);
        cfg.world_seed = s;
        cfg.pretrain.seed = s;
        cfg.train.seed = s;
    } else if (key == "world.seed")
        cfg.world_seed = parse_u64(value);
    else if (key == "world.d_f")
        cfg.sizes.d_f = parse_int(value);
    else if (key == "world.d_r")
        cfg.sizes.d_r = parse_int(value);
    else if (key == "world.benign")
        cfg.sizes.benign = parse_int(value);
    else if (key == "world.pretrain_templates")
        cfg.sizes.pretrain_templates = parse_int(value);
    else if (key == "world.buffer_templates")
        cfg.sizes.buffer_templates = parse_int(value);
    else if (key == "world.eval_templates")
        cfg.sizes.eval_templates = parse_int(value);
    else if (key == "model.vocab")
        cfg.model.vocab = parse_int(value);
    else if (key == "model.embed")
        cfg.model.embed = parse_int(value);
    else if (key == "model.layers")
        cfg.model.layers = parse_int(value);
    else if (key == "model.ffn")
        cfg.model.ffn = parse_int(value);
    else if (key == "model.heads")
        cfg.model.heads = parse_int(value);
    else if (key == "model.max_seq")
        cfg.model.max_seq = parse_int(value);
    else if (key == "pretrain.steps")
        cfg.pretrain.steps = parse_int(value);
    else if (key == "pretrain.batch")
        cfg.pretrain.batch = parse_int(value);
    else if (key == "pretrain.lr")
        cfg.pretrain.lr = tsv::parse_double(value);
    else if (key == "pretrain.lr_final")
        cfg.pretrain.lr_final = tsv::parse_double(value);
    else if (key == "pretrain.seed")
        cfg.pretrain.seed = parse_u64(value);
    else if (key == "buffer.sample_size")
        cfg.buffer.sample_size = parse_int(value);
    else if (key == "buffer.tau")
        cfg.buffer.tau = tsv::parse_double(value);
    else if (key == "buffer.offspring_per_parent")
        cfg.buffer.offspring_per_parent = parse_int(value);
    else if (key == "buffer.cooldown_steps")
        cfg.buffer.cooldown_steps = parse_int(value);
    else if (key == "buffer.retry_cap")
        cfg.buffer.retry_cap = parse_int(value);
    else if (key == "buffer.max_prompt_len")
        cfg.buffer.max_prompt_len = parse_int(value);
    else if (key == "train.eta")
        cfg.train.eta = tsv::parse_double(value);
    else if (key == "train.beta")
        cfg.train.beta = tsv::parse_double(value);
    else if (key == "train.lambda")
        cfg.train.lambda = tsv::parse_double(value);
    else if (key == "train.p")
        cfg.train.p = tsv::parse_double(value);
    else if (key == "train.max_iterations")
        cfg.train.max_iterations = parse_int(value);
    else if (key == "train.convergence_target")
        cfg.train.convergence_target = tsv::parse_double(value);
    else if (key == "train.patience")
        cfg.train.patience = parse_int(value);
    else if (key == "train.utility_batch")
        cfg.train.utility_batch = parse_int(value);
    else if (key == "train.anchor_sample")
        cfg.train.anchor_sample = parse_int(value);
    else if (key == "train.seed")
        cfg.train.seed = parse_u64(value);
    else if (key == "variant")
        cfg.variant = variant_from_str(value);
    else if (key == "layers")
        cfg.layers = layer_strategy_from_str(value);
    else if (key == "attack_types")
        cfg.attack_types = value;
    else if (key == "out")
        cfg.out_dir = value;
    else
        throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open config " + path);
    ExperimentConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw InputError(path + ":" + std::to_string(lineno) + ": expected key=value");
        apply_config_kv(cfg, line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

void save_config(const ExperimentConfig& cfg, const std::string& path) {
    auto f = open_out(path);
    f << "world.seed=" << cfg.world_seed << "\n";
    f << "world.d_f=" << cfg.sizes.d_f << "\n";
    f << "world.d_r=" << cfg.sizes.d_r << "\n";
    f << "world.benign=" << cfg.sizes.benign << "\n";
    f << "world.pretrain_templates=" << cfg.sizes.pretrain_templates << "\n";
    f << "world.buffer_templates=" << cfg.sizes.buffer_templates << "\n";
    f << "world.eval_templates=" << cfg.sizes.eval_templates << "\n";
    f << "model.vocab=" << cfg.model.vocab << "\n";
    f << "model.embed=" << cfg.model.embed << "\n";
    f << "model.layers=" << cfg.model.layers << "\n";
    f << "model.ffn=" << cfg.model.ffn << "\n";
    f << "model.heads=" << cfg.model.heads << "\n";
    f << "model.max_seq=" << cfg.model.max_seq << "\n";
    f << "pretrain.steps=" << cfg.pretrain.steps << "\n";
    f << "pretrain.batch=" << cfg.pretrain.batch << "\n";
    f << "pretrain.lr=" << tsv::fmt_g17(cfg.pretrain.lr) << "\n";
    f << "pretrain.lr_final=" << tsv::fmt_g17(cfg.pretrain.lr_final) << "\n";
    f << "pretrain.seed=" << cfg.pretrain.seed << "\n";
    f << "buffer.sample_size=" << cfg.buffer.sample_size << "\n";
    f << "buffer.tau=" << tsv::fmt_g17(cfg.buffer.tau) << "\n";
    f << "buffer.offspring_per_parent=" << cfg.buffer.offspring_per_parent << "\n";
    f << "buffer.cooldown_steps=" << cfg.buffer.cooldown_steps << "\n";
    f << "buffer.retry_cap=" << cfg.buffer.retry_cap << "\n";
    f << "buffer.max_prompt_len=" << cfg.buffer.max_prompt_len << "\n";
    f << "train.eta=" << tsv::fmt_g17(cfg.train.eta) << "\n";
    f << "train.beta=" << tsv::fmt_g17(cfg.train.beta) << "\n";
    f << "train.lambda=" << tsv::fmt_g17(cfg.train.lambda) << "\n";
    f << "train.p=" << tsv::fmt_g17(cfg.train.p) << "\n";
    f << "train.max_iterations=" << cfg.train.max_iterations << "\n";
    f << "train.convergence_target=" << tsv::fmt_g17(cfg.train.convergence_target) << "\n";
    f << "train.patience=" << cfg.train.patience << "\n";
    f << "train.utility_batch=" << cfg.train.utility_batch << "\n";
    f << "train.anchor_sample=" << cfg.train.anchor_sample << "\n";
    f << "train.seed=" << cfg.train.seed << "\n";
    f << "variant=" << variant_str(cfg.variant) << "\n";
    f << "layers=" << layer_strategy_str(cfg.layers) << "\n";
    f << "attack_types=" << cfg.attack_types << "\n";
    f << "out=" << cfg.out_dir << "\n";
}

std::string MetricsRecord::to_line() const {
    std::string iou = "-";
    if (!iou_curve.empty()) {
        iou.clear();
        for (size_t i = 0; i < iou_curve.size(); ++i) {
            if (i) iou += ',';
            iou += tsv::fmt_g17(iou_curve[i]);
        }
    }
    return "split=" + split + "\tasr=" + tsv::fmt_g17(asr_proxy) +
           "\trefusal=" + tsv::fmt_g17(refusal_rate) + "\tfrr=" +
           tsv::fmt_g17(false_refusal_rate) + "\tnll=" + tsv::fmt_g17(utility_nll) +
           "\tiou=" + iou;
}

MetricsRecord MetricsRecord::from_line(const std::string& line) {
    auto fields = tsv::split_tabs(line);
    if (fields.size() != 6) throw InputError("metrics record needs 6 fields");
    MetricsRecord r;
    r.split = tsv::header_field(fields[0], "split");
    if (r.split.empty()) throw InputError("metrics record without a split name");
    r.asr_proxy = tsv::parse_double(tsv::header_field(fields[1], "asr"));
    r.refusal_rate = tsv::parse_double(tsv::header_field(fields[2], "refusal"));
    r.false_refusal_rate = tsv::parse_double(tsv::header_field(fields[3], "frr"));
    r.utility_nll = tsv::parse_double(tsv::header_field(fields[4], "nll"));
    std::string iou = tsv::header_field(fields[5], "iou");
    if (iou != "-") {
        size_t start = 0;
        while (true) {
            size_t comma = iou.find(',', start);
            r.iou_curve.push_back(tsv::parse_double(iou.substr(start, comma - start)));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
    }
    return r;
}

std::vector<TokenSeq> held_attack_prompts(const corpus::World& world, int max_seq) {
    auto held = world.pairs(corpus::PairSet::harmful, corpus::Split::held);
    if (held.empty() || world.eval_pool.empty())
        throw ContractError("world has no held-out attack material");
    std::vector<TokenSeq> out;
    out.reserve(world.eval_pool.size());
    for (size_t i = 0; i < world.eval_pool.size(); ++i)
        out.push_back(
            corpus::apply_template(world.eval_pool[i], held[i % held.size()]->prompt, max_seq));
    return out;
}

std::vector<TokenSeq> held_attack_prompts(const corpus::World& world, corpus::AttackType type,
                                          int max_seq) {
    auto held = world.pairs(corpus::PairSet::harmful, corpus::Split::held);
    if (held.empty() || world.eval_pool.empty())
        throw ContractError("world has no held-out attack material");
    std::vector<TokenSeq> out;
    for (size_t i = 0; i < world.eval_pool.size(); ++i) {
        if (world.eval_pool[i].attack_type != type) continue;
        out.push_back(
            corpus::apply_template(world.eval_pool[i], held[i % held.size()]->prompt, max_seq));
    }
    return out;
}

double eval_asr(const lm::ModelState& model, const std::vector<TokenSeq>& attacks, Token sure) {
    if (attacks.empty()) throw ContractError("attack set is empty");
    int hits = 0;
    for (const auto& prompt : attacks) {
        auto out = lm::greedy_decode(model, prompt, 1);
        hits += !out.empty() && out[0] == sure;
    }
    return double(hits) / double(attacks.size());
}

double eval_false_refusal(const lm::ModelState& model,
                          const std::vector<const corpus::LabeledPair*>& benign, Token refuse) {
    if (benign.empty()) throw ContractError("benign set is empty");
    int hits = 0;
    for (const auto* p : benign) {
        auto out = lm::greedy_decode(model, p->prompt, 1);
        hits += !out.empty() && out[0] == refuse;
    }
    return double(hits) / double(benign.size());
}

double eval_utility(const lm::ModelState& model,
                    const std::vector<const corpus::LabeledPair*>& holdout) {
    if (holdout.empty()) throw ContractError("utility holdout is empty");
    double nll = 0.0;
    for (const auto* p : holdout) nll += lm::nll_loss(model, p->prompt, p->response);
    return nll / double(holdout.size());
}

std::vector<std::vector<double>> iou_by_attack_type(const lm::ModelState& model,
                                                    const corpus::World& world, double p) {
    path::Window full{0, model.config.layers};
    auto held = world.pairs(corpus::PairSet::harmful, corpus::Split::held);
    if (held.empty()) throw ContractError("world has no held-out harmful prompts");
    std::vector<TokenSeq> direct;
    direct.reserve(held.size());
    for (const auto* pr : held) direct.push_back(pr->prompt);
    SparseMask direct_mask = path::build_mask(
        path::jailbreak_flow(model, direct, world.vocab.sure, full), p);

    std::vector<std::vector<double>> out;
    for (int t = 0; t < 3; ++t) {
        auto prompts = held_attack_prompts(world, corpus::AttackType(t), model.config.max_seq);
        if (prompts.empty()) continue;
        SparseMask jb_mask = path::build_mask(
            path::jailbreak_flow(model, prompts, world.vocab.sure, full), p);
        out.push_back(path::layerwise_iou(jb_mask, direct_mask));
    }
    if (out.empty()) throw ContractError("eval pool covers no attack types");
    return out;
}

namespace {

std::vector<double> mean_curve(const std::vector<std::vector<double>>& per_type) {
    std::vector<double> mean(per_type[0].size(), 0.0);
    for (const auto& curve : per_type)
        for (size_t l = 0; l < curve.size(); ++l) mean[l] += curve[l];
    for (double& v : mean) v /= double(per_type.size());
    return mean;
}

MetricsRecord eval_with_iou(const lm::ModelState& model, const corpus::World& world,
                            const std::string& split,
                            std::vector<std::vector<double>>* per_type_out) {
    MetricsRecord r;
    r.split = split;
    r.asr_proxy =
        eval_asr(model, held_attack_prompts(world, model.config.max_seq), world.vocab.sure);
    int refused = 0;
    for (const auto& p : world.harmful) {
        auto out = lm::greedy_decode(model, p.prompt, 1);
        refused += !out.empty() && out[0] == world.vocab.refuse;
    }
    r.refusal_rate = world.harmful.empty() ? 0.0 : double(refused) / double(world.harmful.size());
    r.false_refusal_rate = eval_false_refusal(
        model, world.pairs(corpus::PairSet::benign, corpus::Split::held), world.vocab.refuse);
    r.utility_nll = eval_utility(model, world.pairs(corpus::PairSet::general, corpus::Split::held));
    auto per_type = iou_by_attack_type(model, world, kIouSparsity);
    r.iou_curve = mean_curve(per_type);
    if (per_type_out) *per_type_out = std::move(per_type);
    return r;
}

} // namespace

MetricsRecord eval_metrics(const lm::ModelState& model, const corpus::World& world,
                           const std::string& split) {
    return eval_with_iou(model, world, split, nullptr);
}

void filter_attack_types(buffer::AttackBuffer& buf, const std::string& types) {
    check_attack_types(types);
    std::erase_if(buf.entries, [&](const buffer::BufferEntry& e) {
        return types.find(corpus::attack_type_char(e.attack_type)) == std::string::npos;
    });
    if (buf.entries.empty())
        throw ContractError("buffer has no entries of types '" + types + "'");
}

namespace {

void write_mask_tsv(const SparseMask& m, const std::string& path) {
    auto f = open_out(path);
    f << "mask\tp=" << tsv::fmt_g17(m.sparsity_p) << "\twindow=" << m.window_lo << ","
      << m.window_hi << "\tbits=" << m.count() << "\n";
    for (size_t l = 0; l < m.bits.size(); ++l)
        for (size_t i = 0; i < m.bits[l].size(); ++i)
            if (m.bits[l][i]) f << l << "\t" << i << "\n";
}

void write_iou_csv(const std::string& path, const corpus::World& world,
                   const std::vector<std::vector<double>>& base_iou,
                   const std::vector<std::vector<double>>& final_iou) {
    auto f = open_out(path);
    f << "attack_type,phase,layer,iou\n";
    auto dump = [&](const char* phase, const std::vector<std::vector<double>>& per_type) {
        for (size_t t = 0; t < per_type.size(); ++t)
            for (size_t l = 0; l < per_type[t].size(); ++l)
                f << corpus::attack_type_char(corpus::AttackType(int(t))) << "," << phase << ","
                  << l << "," << fmt6(per_type[t][l]) << "\n";
    };
    dump("base", base_iou);
    dump("final", final_iou);
    (void)world;
}

} // namespace

RunResult run_variant(const ExperimentConfig& cfg) { return run_variant(cfg, nullptr); }

RunResult run_variant(const ExperimentConfig& cfg0, const lm::ModelState* pretrained) {
    using clock = std::chrono::steady_clock;
    ExperimentConfig cfg = cfg0;
    cfg.validate();
    cfg.train.window = resolve_window(cfg.layers, cfg.model.layers);
    cfg.train.mask_rule = rect::MaskRule::differential;
    cfg.train.buffer_rule = rect::BufferRule::evolve;
    switch (cfg.variant) {
        case Variant::jp_random: cfg.train.mask_rule = rect::MaskRule::random; break;
        case Variant::jp_snip: cfg.train.mask_rule = rect::MaskRule::snip; break;
        case Variant::jp_policy: cfg.train.buffer_rule = rect::BufferRule::frozen; break;
        case Variant::jp_rep: cfg.train.beta = 0.0; break;
        case Variant::jp_util: cfg.train.lambda = 0.0; break;
        default: break;
    }

    fs::create_directories(cfg.out_dir);
    save_config(cfg, pjoin(cfg.out_dir, "config.txt"));

    log_info(std::string("run ") + variant_str(cfg.variant) + " layers=" +
             layer_strategy_str(cfg.layers) + " types=" + cfg.attack_types +
             " seed=" + std::to_string(cfg.world_seed) + " -> " + cfg.out_dir);

    corpus::World world = corpus::build_world(cfg.model.vocab, cfg.sizes, cfg.world_seed);
    corpus::save_world(world, pjoin(cfg.out_dir, "world.tsv"));

    lm::ModelState model;
    if (pretrained) {
        if (!(pretrained->config == cfg.model))
            throw ContractError("supplied base model does not match the experiment's model config");
        model = *pretrained;
        log_info("adopting supplied pretrained base");
    } else {
        log_info("pretraining base (" + std::to_string(cfg.pretrain.steps) + " steps)");
        model = corpus::pretrain_base(cfg.model, world, cfg.pretrain, [](int step, double loss) {
            if (step % 200 == 0)
                log_debug("pretrain step " + std::to_string(step) + " loss " + fmt6(loss));
        });
    }
    lm::save_checkpoint(model, pjoin(cfg.out_dir, "base.ckpt"));

    RunResult r;
    r.cfg = cfg;
    r.premise = corpus::evaluate_premise(model, world);
    log_info("premise: bare refusal " + fmt6(r.premise.bare_refusal_rate) + ", templated asr " +
             fmt6(r.premise.templated_asr) + ", general nll " + fmt6(r.premise.general_nll));

    std::vector<std::vector<double>> base_iou;
    r.base = eval_with_iou(model, world, "base", &base_iou);

    auto t0 = clock::now();
    if (cfg.variant == Variant::baseline_eq1) {
        r.train = rect::train_baseline(model, world, cfg.train, cfg.train.max_iterations);
    } else if (cfg.variant != Variant::base) {
        buffer::AttackBuffer buf = buffer::init_buffer(world, cfg.buffer, cfg.train.seed);
        filter_attack_types(buf, cfg.attack_types);
        r.train = rect::train(model, world, buf, cfg.train);
        buffer::save_buffer(buf, pjoin(cfg.out_dir, "buffer.tsv"));
    }
    r.train_wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();

    if (cfg.variant != Variant::base) {
        auto f = open_out(pjoin(cfg.out_dir, "train.log"));
        for (const auto& rec : r.train.records) f << rec.to_line() << "\n";
        log_info("trained " + std::to_string(r.train.iterations) + " iterations, " +
                 (r.train.converged ? "converged" : r.train.diverged ? "DIVERGED" : "budget hit") +
                 ", " + fmt6(r.train_wall_ms / 1000.0) + " s");
    }

    lm::save_checkpoint(model, pjoin(cfg.out_dir, "final.ckpt"));
    std::vector<std::vector<double>> final_iou;
    r.post = eval_with_iou(model, world, "final", &final_iou);
    log_info("asr " + fmt6(r.base.asr_proxy) + " -> " + fmt6(r.post.asr_proxy) + ", frr " +
             fmt6(r.base.false_refusal_rate) + " -> " + fmt6(r.post.false_refusal_rate) +
             ", utility nll " + fmt6(r.base.utility_nll) + " -> " + fmt6(r.post.utility_nll));

    {
        auto f = open_out(pjoin(cfg.out_dir, "metrics.tsv"));
        f << r.base.to_line() << "\n" << r.post.to_line() << "\n";
    }
    {
        // wall_ms is informational; everything else re-derives from the config
        auto f = open_out(pjoin(cfg.out_dir, "run.txt"));
        f << "variant=" << variant_str(cfg.variant) << "\tlayers=" << layer_strategy_str(cfg.layers)
          << "\twindow=" << cfg.train.window.lo << "," << cfg.train.window.hi
          << "\titerations=" << r.train.iterations << "\tconverged=" << int(r.train.converged)
          << "\tdiverged=" << int(r.train.diverged) << "\twall_ms=" << fmt6(r.train_wall_ms)
          << "\n";
    }
    write_iou_csv(pjoin(cfg.out_dir, "iou.csv"), world, base_iou, final_iou);

    path::Window full{0, cfg.model.layers};
    auto attacks = held_attack_prompts(world, cfg.model.max_seq);
    auto jb = path::jailbreak_flow(model, attacks, world.vocab.sure, full);
    path::save_flow_csv(jb, pjoin(cfg.out_dir, "flow_jailbreak.csv"));
    std::vector<TokenSeq> direct;
    for (const auto* p : world.pairs(corpus::PairSet::harmful, corpus::Split::held))
        direct.push_back(p->prompt);
    path::save_flow_csv(path::jailbreak_flow(model, direct, world.vocab.sure, full),
                        pjoin(cfg.out_dir, "flow_direct.csv"));
    write_mask_tsv(path::build_mask(jb, kIouSparsity), pjoin(cfg.out_dir, "mask_jailbreak.tsv"));
    return r;
}

namespace {

struct RunInfo {
    std::string name;
    ExperimentConfig cfg;
    MetricsRecord base, post;
    int iterations = 0;
    bool converged = false;
    // type -> phase -> per-layer means
    std::map<char, std::map<std::string, std::vector<double>>> iou;
};

bool load_run(const fs::path& dir, RunInfo& info) {
    if (!fs::exists(dir / "config.txt") || !fs::exists(dir / "metrics.tsv")) return false;
    info.name = dir.filename().string();
    info.cfg = load_config((dir / "config.txt").string());
    std::ifstream mf(dir / "metrics.tsv");
    std::string line;
    bool have_base = false, have_final = false;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        MetricsRecord rec = MetricsRecord::from_line(line);
        if (rec.split == "base") {
            info.base = rec;
            have_base = true;
        } else if (rec.split == "final") {
            info.post = rec;
            have_final = true;
        }
    }
    if (!have_base || !have_final) return false;

    std::ifstream rf(dir / "run.txt");
    if (rf && std::getline(rf, line)) {
        auto fields = tsv::split_tabs(line);
        for (const auto& fld : fields) {
            if (fld.rfind("iterations=", 0) == 0) info.iterations = parse_int(fld.substr(11));
            if (fld.rfind("converged=", 0) == 0) info.converged = fld.substr(10) == "1";
        }
    }

    std::ifstream io(dir / "iou.csv");
    if (io) {
        std::getline(io, line); // header
        while (std::getline(io, line)) {
            if (line.empty()) continue;
            std::istringstream is(line);
            std::string type, phase, layer, val;
            if (!std::getline(is, type, ',') || !std::getline(is, phase, ',') ||
                !std::getline(is, layer, ',') || !std::getline(is, val, ','))
                throw InputError("malformed iou row '" + line + "' in " + dir.string());
            auto& curve = info.iou[type[0]][phase];
            size_t l = size_t(parse_int(layer));
            if (curve.size() <= l) curve.resize(l + 1, 0.0);
            curve[l] = tsv::parse_double(val);
        }
    }
    return true;
}

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / double(xs.size());
}

} // namespace

ReportResult report(const std::string& root) {
    if (!fs::is_directory(root)) throw InputError("run root " + root + " is not a directory");

    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());

    std::vector<RunInfo> runs;
    for (const auto& d : dirs) {
        RunInfo info;
        if (load_run(d, info)) runs.push_back(std::move(info));
    }

    ReportResult result;
    result.runs = int(runs.size());
    if (runs.empty()) result.absences.push_back("no completed runs under " + root);

    {
        auto f = open_out(pjoin(root, "summary.csv"));
        f << "run,variant,layers,attack_types,p,seed,window_lo,window_hi,iterations,converged,"
             "base_asr,final_asr,base_refusal,final_refusal,base_frr,final_frr,base_nll,final_nll"
             "\n";
        for (const auto& r : runs) {
            path::Window w = resolve_window(r.cfg.layers, r.cfg.model.layers);
            f << r.name << "," << variant_str(r.cfg.variant) << ","
              << layer_strategy_str(r.cfg.layers) << "," << r.cfg.attack_types << ","
              << fmt6(r.cfg.train.p) << "," << r.cfg.world_seed << "," << w.lo << "," << w.hi
              << "," << r.iterations << "," << int(r.converged) << "," << fmt6(r.base.asr_proxy)
              << "," << fmt6(r.post.asr_proxy) << "," << fmt6(r.base.refusal_rate) << ","
              << fmt6(r.post.refusal_rate) << "," << fmt6(r.base.false_refusal_rate) << ","
              << fmt6(r.post.false_refusal_rate) << "," << fmt6(r.base.utility_nll) << ","
              << fmt6(r.post.utility_nll) << "\n";
        }
    }

    {
        // mean layer-wise IoU over the full-method runs, before and after
        auto f = open_out(pjoin(root, "iou_layers.csv"));
        f << "attack_type,phase,layer,mean_iou,runs\n";
        int used = 0;
        std::map<char, std::map<std::string, std::pair<std::vector<double>, int>>> agg;
        for (const auto& r : runs) {
            if (r.cfg.variant != Variant::jpu || r.iou.empty()) continue;
            ++used;
            for (const auto& [type, phases] : r.iou)
                for (const auto& [phase, curve] : phases) {
                    auto& [sum, n] = agg[type][phase];
                    if (sum.size() < curve.size()) sum.resize(curve.size(), 0.0);
                    for (size_t l = 0; l < curve.size(); ++l) sum[l] += curve[l];
                    ++n;
                }
        }
        for (const auto& [type, phases] : agg)
            for (const auto& [phase, entry] : phases)
                for (size_t l = 0; l < entry.first.size(); ++l)
                    f << type << "," << phase << "," << l << ","
                      << fmt6(entry.first[l] / double(entry.second)) << "," << entry.second
                      << "\n";
        if (!used) result.absences.push_back("iou_layers: no jpu runs with iou data");
    }

    {
        auto f = open_out(pjoin(root, "sparsity_sweep.csv"));
        f << "p,runs,mean_final_asr,mean_final_nll\n";
        for (double p : kSparsityGrid) {
            std::vector<double> asr, nll;
            for (const auto& r : runs)
                if (r.cfg.variant == Variant::jpu && r.cfg.train.p == p) {
                    asr.push_back(r.post.asr_proxy);
                    nll.push_back(r.post.utility_nll);
                }
            f << fmt6(p) << "," << asr.size() << ",";
            if (!asr.empty())
                f << fmt6(mean_of(asr)) << "," << fmt6(mean_of(nll));
            else
                f << ",";
            f << "\n";
            if (asr.empty())
                result.absences.push_back("sparsity_sweep: no jpu runs at p=" + fmt6(p));
        }
    }

    {
        auto f = open_out(pjoin(root, "static_dynamic.csv"));
        f << "variant,attack_types,runs,mean_final_asr\n";
        for (Variant v : {Variant::jpu, Variant::jp_policy})
            for (const char* types : {"A", "AB", "ABC"}) {
                std::vector<double> asr;
                for (const auto& r : runs)
                    if (r.cfg.variant == v && r.cfg.attack_types == types)
                        asr.push_back(r.post.asr_proxy);
                f << variant_str(v) << "," << types << "," << asr.size() << ",";
                if (!asr.empty()) f << fmt6(mean_of(asr));
                f << "\n";
                if (asr.empty())
                    result.absences.push_back(std::string("static_dynamic: no ") + variant_str(v) +
                                              " runs with types " + types);
            }
    }

    {
        auto f = open_out(pjoin(root, "absence.txt"));
        for (const auto& a : result.absences) f << a << "\n";
    }
    return result;
}

LogLevel log_level() {
    static LogLevel lvl = [] {
        const char* e = std::getenv("JPU_LOG");
        if (!e || !*e) return LogLevel::info;
        std::string s(e);
        if (s == "quiet") return LogLevel::quiet;
        if (s == "info") return LogLevel::info;
        if (s == "debug") return LogLevel::debug;
        throw ConfigError("JPU_LOG must be quiet, info, or debug, got '" + s + "'");
    }();
    return lvl;
}

void log_info(const std::string& msg) {
    if (int(log_level()) >= int(LogLevel::info)) std::cerr << "[jpu] " << msg << "\n";
}

void log_debug(const std::string& msg) {
    if (int(log_level()) >= int(LogLevel::debug)) std::cerr << "[jpu] " << msg << "\n";
}

} // namespace jpu::harness
