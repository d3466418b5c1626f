#include "jpu/pathfinder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace jpu::path {

const char* flow_source_str(FlowSource s) {
    switch (s) {
        case FlowSource::jailbreak: return "jailbreak";
        case FlowSource::utility: return "utility";
        case FlowSource::differential: return "differential";
        case FlowSource::snip: return "snip";
    }
    return "?";
}

namespace {

void check_window(const lm::ModelConfig& cfg, Window w) {
    if (w.lo < 0 || w.hi > cfg.layers || w.lo >= w.hi)
        throw ConfigError("bad layer window [" + std::to_string(w.lo) + ", " +
                          std::to_string(w.hi) + ") for " + std::to_string(cfg.layers) +
                          " layers");
}

FlowRecord empty_record(const lm::ModelConfig& cfg, FlowSource src, Window w) {
    FlowRecord r;
    r.source = src;
    r.window = w;
    r.scores.assign(size_t(cfg.layers), std::vector<double>(size_t(cfg.ffn), 0.0));
    return r;
}

// A_i * G_i at the final position, where the attribution is anchored
double path_product(const lm::LayerTrace& tr, int neuron) {
    size_t at = size_t(tr.n - 1) * tr.ffn + neuron;
    return tr.activations[at] * tr.activation_grads[at];
}

// mean over (prompt, sink) items of |W_i| * |(1/steps) * sum_k A_i * G_i(alpha_k)|
// with alpha_k = k/steps and A_i the full (unscaled) final-position activation,
// i.e. a path integral from the zero-activation baseline. The alpha = 1 run both
// closes the sum and supplies A_i, and its product is formed exactly like the
// plain flow score, so steps = 1 reproduces that score bitwise.
FlowRecord scored_flow(const lm::ModelState& model,
                       const std::vector<std::pair<const TokenSeq*, Token>>& items, Window w,
                       int steps, FlowSource src) {
    const auto& cfg = model.config;
    check_window(cfg, w);
    if (items.empty()) throw ContractError("flow scoring needs at least one prompt");
    if (steps < 1) throw ConfigError("integral steps must be >= 1");

    FlowRecord r = empty_record(cfg, src, w);
    const double inv_items = 1.0 / double(items.size());
    for (const auto& [prompt, sink] : items) {
        std::vector<std::vector<double>> acc(size_t(cfg.layers),
                                             std::vector<double>(size_t(cfg.ffn), 0.0));
        std::vector<std::vector<double>> norms(size_t(cfg.layers));
        for (int l = 0; l < cfg.layers; ++l) {
            lm::Attribution at_end = lm::attribute(model, *prompt, sink, l, 1.0);
            const lm::LayerTrace& tre = at_end.layers[size_t(l)];
            size_t last = size_t(tre.n - 1) * size_t(tre.ffn);
            std::vector<double> base(size_t(cfg.ffn)), end_term(size_t(cfg.ffn));
            for (int i = 0; i < cfg.ffn; ++i) {
                base[size_t(i)] = tre.activations[last + size_t(i)];
                end_term[size_t(i)] = tre.activations[last + size_t(i)] *
                                      tre.activation_grads[last + size_t(i)];
            }
            for (int k = 1; k < steps; ++k) {
                double alpha = double(k) / double(steps);
                lm::Attribution at = lm::attribute(model, *prompt, sink, l, alpha);
                const lm::LayerTrace& tr = at.layers[size_t(l)];
                size_t off = size_t(tr.n - 1) * size_t(tr.ffn);
                for (int i = 0; i < cfg.ffn; ++i)
                    acc[size_t(l)][size_t(i)] += base[size_t(i)] *
                                                 tr.activation_grads[off + size_t(i)];
            }
            // added last so the accumulation runs in ascending alpha order
            for (int i = 0; i < cfg.ffn; ++i) acc[size_t(l)][size_t(i)] += end_term[size_t(i)];
            norms[size_t(l)] = tre.weight_norms;
        }
        for (int l = 0; l < cfg.layers; ++l)
            for (int i = 0; i < cfg.ffn; ++i)
                r.scores[size_t(l)][size_t(i)] += norms[size_t(l)][size_t(i)] *
                                                  std::fabs(acc[size_t(l)][size_t(i)] /
                                                            double(steps)) *
                                                  inv_items;
    }
    return r;
}

} // namespace

FlowRecord jailbreak_flow(const lm::ModelState& model, const std::vector<TokenSeq>& prompts,
                          Token sink, Window w) {
    const auto& cfg = model.config;
    check_window(cfg, w);
    if (prompts.empty()) throw ContractError("flow scoring needs at least one prompt");

    FlowRecord r = empty_record(cfg, FlowSource::jailbreak, w);
    const double inv = 1.0 / double(prompts.size());
    for (const TokenSeq& prompt : prompts) {
        lm::Attribution at = lm::attribute(model, prompt, sink);
        for (int l = 0; l < cfg.layers; ++l) {
            const lm::LayerTrace& tr = at.layers[size_t(l)];
            for (int i = 0; i < cfg.ffn; ++i)
                r.scores[size_t(l)][size_t(i)] +=
                    tr.weight_norms[size_t(i)] * std::fabs(path_product(tr, i)) * inv;
        }
    }
    return r;
}

FlowRecord utility_flow(const lm::ModelState& model,
                        const std::vector<const corpus::LabeledPair*>& pairs, Window w) {
    const auto& cfg = model.config;
    check_window(cfg, w);
    if (pairs.empty()) throw ContractError("flow scoring needs at least one pair");

    FlowRecord r = empty_record(cfg, FlowSource::utility, w);
    const double inv = 1.0 / double(pairs.size());
    for (const auto* p : pairs) {
        if (p->response.empty()) throw ContractError("utility pair with empty response");
        lm::Attribution at = lm::attribute(model, p->prompt, p->response[0]);
        for (int l = 0; l < cfg.layers; ++l) {
            const lm::LayerTrace& tr = at.layers[size_t(l)];
            for (int i = 0; i < cfg.ffn; ++i)
                r.scores[size_t(l)][size_t(i)] +=
                    tr.weight_norms[size_t(i)] * std::fabs(path_product(tr, i)) * inv;
        }
    }
    return r;
}

FlowRecord integral_flow(const lm::ModelState& model, const std::vector<TokenSeq>& prompts,
                         Token sink, Window w, int steps) {
    std::vector<std::pair<const TokenSeq*, Token>> items;
    items.reserve(prompts.size());
    for (const auto& p : prompts) items.push_back({&p, sink});
    FlowRecord r = scored_flow(model, items, w, steps, FlowSource::jailbreak);
    return r;
}

FlowRecord differential_flow(const FlowRecord& jailbreak, const FlowRecord& utility) {
    if (jailbreak.scores.size() != utility.scores.size())
        throw ContractError("differential flow needs matching layer counts");
    if (!(jailbreak.window == utility.window))
        throw ContractError("differential flow needs matching windows");

    FlowRecord r;
    r.source = FlowSource::differential;
    r.window = jailbreak.window;
    r.scores.resize(jailbreak.scores.size());
    for (size_t l = 0; l < jailbreak.scores.size(); ++l) {
        const auto& ja = jailbreak.scores[l];
        const auto& ua = utility.scores[l];
        if (ja.size() != ua.size()) throw ContractError("differential flow needs matching widths");
        auto norm_share = [](const std::vector<double>& v) {
            double s = 0.0;
            for (double x : v) s += std::fabs(x);
            std::vector<double> out(v.size(), 0.0);
            if (s > 0.0)
                for (size_t i = 0; i < v.size(); ++i) out[i] = std::fabs(v[i]) / s;
            return out;
        };
        auto js = norm_share(ja), us = norm_share(ua);
        r.scores[l].resize(ja.size());
        for (size_t i = 0; i < ja.size(); ++i) r.scores[l][i] = js[i] - us[i];
    }
    return r;
}

FlowRecord snip_flow(const lm::ModelState& model,
                     const std::vector<std::pair<TokenSeq, TokenSeq>>& pairs, Window w) {
    const auto& cfg = model.config;
    check_window(cfg, w);
    if (pairs.empty()) throw ContractError("snip scoring needs at least one pair");

    lm::GradSet grads = lm::make_grads(model);
    grads.zero();
    const double inv = 1.0 / double(pairs.size());
    for (const auto& [prompt, target] : pairs) lm::nll_loss_grads(model, prompt, target, grads, inv);

    FlowRecord r = empty_record(cfg, FlowSource::snip, w);
    for (int l = 0; l < cfg.layers; ++l) {
        size_t pi = size_t(lm::ModelState::idx(l, lm::Part::ffn_down));
        const lm::Tensor& wd = model.params[pi];
        const std::vector<double>& g = grads.g[pi];
        for (int i = 0; i < cfg.ffn; ++i) {
            double s = 0.0;
            for (int j = 0; j < cfg.embed; ++j) {
                size_t at = size_t(i) * cfg.embed + j;
                s += std::fabs(double(wd.v[at]) * g[at]);
            }
            r.scores[size_t(l)][size_t(i)] = s / double(cfg.embed);
        }
    }
    return r;
}

SparseMask build_mask(const FlowRecord& record, double p) {
    if (!(p > 0.0) || p > 1.0) throw ConfigError("mask sparsity p must be in (0, 1]");
    int layers = int(record.scores.size());
    if (layers == 0) throw ContractError("empty flow record");
    int ffn = int(record.scores[0].size());
    if (record.window.lo < 0 || record.window.hi > layers || record.window.lo >= record.window.hi)
        throw ContractError("flow record carries a bad window");

    long n_window = long(record.window.width()) * ffn;
    long k = std::lround(p * double(n_window));
    if (k < 1) throw ContractError("mask would select zero neurons at p=" + std::to_string(p));

    struct Cand {
        double score;
        int layer, neuron;
    };
    std::vector<Cand> cands;
    cands.reserve(size_t(n_window));
    for (int l = record.window.lo; l < record.window.hi; ++l)
        for (int i = 0; i < ffn; ++i) cands.push_back({record.scores[size_t(l)][size_t(i)], l, i});
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.neuron < b.neuron;
    });

    SparseMask m;
    m.sparsity_p = p;
    m.window_lo = record.window.lo;
    m.window_hi = record.window.hi;
    m.bits.assign(size_t(layers), std::vector<uint8_t>(size_t(ffn), 0));
    for (long i = 0; i < k; ++i) m.bits[size_t(cands[size_t(i)].layer)][size_t(cands[size_t(i)].neuron)] = 1;
    return m;
}

SparseMask random_mask(int layers, int ffn, Window w, double p, Rng& rng) {
    if (!(p > 0.0) || p > 1.0) throw ConfigError("mask sparsity p must be in (0, 1]");
    if (layers < 1 || ffn < 1) throw ContractError("empty neuron grid");
    if (w.lo < 0 || w.hi > layers || w.lo >= w.hi)
        throw ContractError("bad layer window for random mask");

    long n_window = long(w.width()) * ffn;
    long k = std::lround(p * double(n_window));
    if (k < 1) throw ContractError("mask would select zero neurons at p=" + std::to_string(p));

    std::vector<long> slots(static_cast<size_t>(n_window));
    std::iota(slots.begin(), slots.end(), 0L);
    // partial Fisher-Yates: only the first k draws matter
    for (long i = 0; i < k; ++i)
        std::swap(slots[size_t(i)], slots[size_t(rng.uniform_int(i, n_window - 1))]);

    SparseMask m;
    m.sparsity_p = p;
    m.window_lo = w.lo;
    m.window_hi = w.hi;
    m.bits.assign(size_t(layers), std::vector<uint8_t>(size_t(ffn), 0));
    for (long i = 0; i < k; ++i)
        m.bits[size_t(w.lo + int(slots[size_t(i)] / ffn))][size_t(slots[size_t(i)] % ffn)] = 1;
    return m;
}

std::vector<double> layerwise_iou(const SparseMask& a, const SparseMask& b) {
    if (a.bits.size() != b.bits.size()) throw ContractError("iou needs matching layer counts");
    std::vector<double> out(a.bits.size(), 0.0);
    for (size_t l = 0; l < a.bits.size(); ++l) {
        if (a.bits[l].size() != b.bits[l].size())
            throw ContractError("iou needs matching layer widths");
        long inter = 0, uni = 0;
        for (size_t i = 0; i < a.bits[l].size(); ++i) {
            bool ba = a.bits[l][i] != 0, bb = b.bits[l][i] != 0;
            inter += ba && bb;
            uni += ba || bb;
        }
        out[l] = uni == 0 ? 1.0 : double(inter) / double(uni);
    }
    return out;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), size_t(0));
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size(), 0.0);
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        double r = 0.5 * double(i + j) + 1.0; // average of 1-based ranks i+1 .. j+1
        for (size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
        i = j + 1;
    }
    return ranks;
}

} // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw ContractError("spearman needs two equal vectors");
    auto ra = average_ranks(a), rb = average_ranks(b);
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= double(ra.size());
    mb /= double(rb.size());
    double num = 0.0, da = 0.0, db = 0.0;
    for (size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0.0 || db == 0.0) throw NumericError("spearman on a constant vector");
    return num / std::sqrt(da * db);
}

void save_flow_csv(const FlowRecord& record, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InputError("cannot open " + path + " for writing");
    f << "source,layer,neuron,in_window,score\n";
    char buf[48];
    for (size_t l = 0; l < record.scores.size(); ++l) {
        bool in_w = int(l) >= record.window.lo && int(l) < record.window.hi;
        for (size_t i = 0; i < record.scores[l].size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.6g", record.scores[l][i]);
            f << flow_source_str(record.source) << ',' << l << ',' << i << ',' << int(in_w) << ','
              << buf << "\n";
        }
    }
    if (!f) throw InputError("write failed for " + path);
}

} // namespace jpu::path
