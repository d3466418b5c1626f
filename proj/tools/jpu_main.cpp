// Command line front end: init-world, pretrain, train, eval, report.
// Honors JPU_LOG (quiet | info | debug) and prints numerics with six
// significant digits.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "jpu/harness.hpp"
#include "jpu/pathfinder.hpp"

namespace fs = std::filesystem;
using namespace jpu;

namespace {

std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string metrics_summary(const harness::MetricsRecord& r) {
    return r.split + ": asr " + fmt6(r.asr_proxy) + ", refusal " + fmt6(r.refusal_rate) +
           ", frr " + fmt6(r.false_refusal_rate) + ", utility nll " + fmt6(r.utility_nll);
}

corpus::World world_for(const harness::ExperimentConfig& cfg) {
    std::string path = cfg.out_dir + "/world.tsv";
    if (fs::exists(path)) {
        harness::log_info("loading " + path);
        return corpus::load_world(path);
    }
    corpus::World w = corpus::build_world(cfg.model.vocab, cfg.sizes, cfg.world_seed);
    fs::create_directories(cfg.out_dir);
    corpus::save_world(w, path);
    return w;
}

int cmd_init_world(const harness::ExperimentConfig& cfg) {
    cfg.validate();
    corpus::World w = corpus::build_world(cfg.model.vocab, cfg.sizes, cfg.world_seed);
    fs::create_directories(cfg.out_dir);
    corpus::save_world(w, cfg.out_dir + "/world.tsv");
    std::cout << "world seed " << w.seed << ": vocab " << w.vocab.size << ", " << w.harmful.size()
              << " harmful / " << w.general.size() << " general / " << w.benign.size()
              << " benign pairs, " << w.pretrain_pool.size() << "/" << w.buffer_pool.size() << "/"
              << w.eval_pool.size() << " templates -> " << cfg.out_dir << "/world.tsv\n";
    return 0;
}

int cmd_pretrain(const harness::ExperimentConfig& cfg) {
    cfg.validate();
    corpus::World w = world_for(cfg);
    lm::ModelState model =
        corpus::pretrain_base(cfg.model, w, cfg.pretrain, [](int step, double loss) {
            if (step % 200 == 0)
                harness::log_debug("pretrain step " + std::to_string(step) + " loss " +
                                   fmt6(loss));
        });
    lm::save_checkpoint(model, cfg.out_dir + "/base.ckpt");
    corpus::PremiseReport rep = corpus::evaluate_premise(model, w);
    std::cout << "base: bare refusal " << fmt6(rep.bare_refusal_rate) << ", templated asr "
              << fmt6(rep.templated_asr) << ", general nll " << fmt6(rep.general_nll)
              << " (uniform " << fmt6(rep.uniform_nll) << "), premise "
              << (rep.pass() ? "holds" : "FAILS") << " -> " << cfg.out_dir << "/base.ckpt\n";
    return rep.pass() ? 0 : 1;
}

int cmd_train(const harness::ExperimentConfig& cfg) {
    harness::RunResult r = harness::run_variant(cfg);
    std::cout << harness::variant_str(cfg.variant) << " run: " << r.train.iterations
              << " iterations, "
              << (r.train.converged   ? "converged"
                  : r.train.diverged  ? "diverged"
                                      : "budget hit")
              << "\n"
              << metrics_summary(r.base) << "\n"
              << metrics_summary(r.post) << "\n";
    return r.train.diverged ? 1 : 0;
}

int cmd_eval(const std::string& out_dir, bool check) {
    std::string world_path = out_dir + "/world.tsv";
    if (!fs::exists(world_path)) throw InputError("no world.tsv under " + out_dir);
    corpus::World w = corpus::load_world(world_path);

    std::vector<std::string> stored;
    if (fs::exists(out_dir + "/metrics.tsv")) {
        std::ifstream f(out_dir + "/metrics.tsv");
        std::string line;
        while (std::getline(f, line))
            if (!line.empty()) stored.push_back(line);
    }

    int mismatches = 0;
    auto eval_split = [&](const char* ckpt, const char* split) {
        std::string path = out_dir + "/" + ckpt;
        if (!fs::exists(path)) return;
        lm::ModelState model = lm::load_checkpoint(path);
        harness::MetricsRecord rec = harness::eval_metrics(model, w, split);
        std::cout << metrics_summary(rec) << "\n";
        if (check) {
            bool found = false;
            for (const auto& line : stored) found = found || line == rec.to_line();
            if (!found) {
                std::cout << split << ": recomputed metrics differ from stored metrics.tsv\n";
                ++mismatches;
            }
        }
    };
    eval_split("base.ckpt", "base");
    eval_split("final.ckpt", "final");
    if (check && !mismatches) std::cout << "stored metrics reproduced exactly\n";
    return mismatches ? 1 : 0;
}

int cmd_report(const std::string& root) {
    harness::ReportResult r = harness::report(root);
    std::cout << r.runs << " runs aggregated under " << root << "\n";
    for (const auto& a : r.absences) std::cout << "absent: " << a << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"jailbreak path unlearning: synthetic-world experiment runner"};
    app.require_subcommand(1);

    std::string config_path, out_dir, variant_name, layers_name;
    uint64_t seed = 0;
    bool check = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key=value config file, dot-nested keys");
        cmd->add_option("--seed", seed, "sets world, pretrain, and train seeds");
        cmd->add_option("--out", out_dir, "run output directory");
    };

    CLI::App* c_init = app.add_subcommand("init-world", "build and save the synthetic world");
    add_common(c_init);
    CLI::App* c_pre = app.add_subcommand("pretrain", "pretrain the aligned base model");
    add_common(c_pre);
    CLI::App* c_train = app.add_subcommand("train", "execute one experiment variant end to end");
    add_common(c_train);
    c_train->add_option("--variant", variant_name,
                        "jpu | jp_random | jp_policy | jp_snip | jp_rep | jp_util | baseline_eq1 "
                        "| base");
    c_train->add_option("--layers", layers_name, "default | shallow | middle | last");
    CLI::App* c_eval = app.add_subcommand("eval", "recompute metrics from persisted artifacts");
    c_eval->add_option("--out", out_dir, "run directory to evaluate")->required();
    c_eval->add_flag("--check", check, "compare against the stored metrics.tsv");
    CLI::App* c_rep = app.add_subcommand("report", "aggregate run directories into CSVs");
    c_rep->add_option("--out", out_dir, "root directory holding run subdirectories")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        harness::log_level(); // reject bad JPU_LOG before any work

        harness::ExperimentConfig cfg;
        if (!config_path.empty()) cfg = harness::load_config(config_path);
        if (app.got_subcommand(c_init) || app.got_subcommand(c_pre) || app.got_subcommand(c_train)) {
            CLI::App* active = app.got_subcommand(c_init)  ? c_init
                               : app.got_subcommand(c_pre) ? c_pre
                                                           : c_train;
            if (active->count("--seed"))
                harness::apply_config_kv(cfg, "seed", std::to_string(seed));
            if (active->count("--out")) cfg.out_dir = out_dir;
        }
        if (!variant_name.empty()) cfg.variant = harness::variant_from_str(variant_name);
        if (!layers_name.empty()) cfg.layers = harness::layer_strategy_from_str(layers_name);

        if (app.got_subcommand(c_init)) return cmd_init_world(cfg);
        if (app.got_subcommand(c_pre)) return cmd_pretrain(cfg);
        if (app.got_subcommand(c_train)) return cmd_train(cfg);
        if (app.got_subcommand(c_eval)) return cmd_eval(out_dir, check);
        if (app.got_subcommand(c_rep)) return cmd_report(out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
