#include "jpu/rectifier.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include "tsv_util.hpp"

namespace jpu::rect {

namespace {

// greedy next token from one forward pass, plus the pre-out-norm hidden state
struct ProbeResult {
    Token next = 0;
    std::vector<double> hidden;
};

ProbeResult probe_prompt(const lm::ModelState& model, const TokenSeq& prompt) {
    lm::Tape tape;
    lm::forward_tape(model, prompt, tape);
    const int V = model.config.vocab, E = model.config.embed;
    const double* row = tape.logits.data() + size_t(tape.n - 1) * V;
    int best = 0;
    for (int v = 1; v < V; ++v)
        if (row[v] > row[best]) best = v;
    ProbeResult out;
    out.next = Token(best);
    out.hidden.assign(tape.hid.end() - E, tape.hid.end());
    return out;
}

std::vector<const buffer::BufferEntry*> batch_entries(const buffer::OnPolicyBatch& batch) {
    std::vector<const buffer::BufferEntry*> out;
    out.reserve(batch.parents.size() + batch.offspring.size());
    for (const auto& e : batch.parents) out.push_back(&e);
    for (const auto& e : batch.offspring) out.push_back(&e);
    return out;
}

// k distinct pairs drawn by partial shuffle of the index range
std::vector<const corpus::LabeledPair*> draw_pairs(
    const std::vector<const corpus::LabeledPair*>& pool, int k, Rng rng) {
    if (pool.empty()) throw ContractError("drawing from an empty pair pool");
    std::vector<size_t> idx(pool.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    int n = std::min<int>(k, int(pool.size()));
    std::vector<const corpus::LabeledPair*> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) out.push_back(pool[idx[size_t(i)]]);
    return out;
}

// Retain draw. The retain set spans everything the model should keep
// answering, and that includes the training half of the benign probes: they
// share their surface shape with harmful prompts, so leaving them out lets
// the refusal push creep onto benign inputs (and the mask damp neurons they
// route through). One uniform draw over the combined pool feeds both the
// utility loss and the utility side of the differential flow.
std::vector<const corpus::LabeledPair*> retain_batch(const corpus::World& world, int batch,
                                                     uint64_t seed, std::string_view tag,
                                                     uint64_t iteration) {
    auto pool = world.pairs(corpus::PairSet::general, corpus::Split::train);
    auto benign = world.pairs(corpus::PairSet::benign, corpus::Split::train);
    pool.insert(pool.end(), benign.begin(), benign.end());
    return draw_pairs(pool, batch, Rng::derive(seed, tag, iteration));
}

// accumulates scale * d(cos_dist(H(prompt), centroid)) / d theta and returns
// the distance
double anchor_term_grads(const lm::ModelState& model, const TokenSeq& prompt,
                         const std::vector<double>& centroid, lm::GradSet& grads, double scale) {
    lm::Tape tape;
    lm::forward_tape(model, prompt, tape);
    const int E = model.config.embed, V = model.config.vocab;
    std::vector<double> h(tape.hid.end() - E, tape.hid.end());
    double dist = cos_dist(h, centroid);
    std::vector<double> g = cos_dist_grad(h, centroid);
    std::vector<double> dhid(size_t(tape.n) * E, 0.0);
    std::copy(g.begin(), g.end(), dhid.end() - E);
    std::vector<double> dlogits(size_t(tape.n) * V, 0.0);
    lm::backward_tape(model, tape, dlogits, &dhid, &grads, scale);
    return dist;
}

bool finite(double x) { return std::isfinite(x); }

// static draw from an untouched buffer: every scored entry joins the batch,
// refused or not, and nothing is mutated or evicted
buffer::OnPolicyBatch frozen_batch(const buffer::AttackBuffer& buf, const lm::ModelState& model,
                                   int iteration, uint64_t seed) {
    if (buf.entries.empty()) throw ContractError("frozen buffer has no entries");
    Rng rng = Rng::derive(seed, "frozen-sample", uint64_t(iteration));
    std::vector<size_t> order(buf.entries.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t take = std::min(size_t(buf.cfg.sample_size), order.size());
    for (size_t i = 0; i < take; ++i)
        std::swap(order[i], order[size_t(rng.uniform_int(int64_t(i), int64_t(order.size()) - 1))]);

    buffer::OnPolicyBatch b;
    b.iteration = iteration;
    b.scored = int(take);
    int refused = 0;
    for (size_t i = 0; i < take; ++i) {
        buffer::BufferEntry e = buf.entries[order[i]];
        e.last_loss = buffer::refusal_loss(model, e.prompt(), buf.vocab);
        refused += e.last_loss <= buf.cfg.tau;
        b.parents.push_back(std::move(e));
    }
    b.refusal_rate = double(refused) / double(take);
    return b;
}

// the iteration's update mask per the configured rule
SparseMask update_mask(const lm::ModelState& model, const std::vector<TokenSeq>& prompts,
                       const std::vector<const corpus::LabeledPair*>& util_pairs, Token sure,
                       const TokenSeq& y_ref, const TrainConfig& cfg, int iteration) {
    switch (cfg.mask_rule) {
        case MaskRule::random: {
            Rng rng = Rng::derive(cfg.seed, "random-mask", uint64_t(iteration));
            return path::random_mask(model.config.layers, model.config.ffn, cfg.window, cfg.p,
                                     rng);
        }
        case MaskRule::snip: {
            std::vector<std::pair<TokenSeq, TokenSeq>> pairs;
            pairs.reserve(prompts.size());
            for (const auto& pr : prompts) pairs.emplace_back(pr, y_ref);
            return path::build_mask(path::snip_flow(model, pairs, cfg.window), cfg.p);
        }
        case MaskRule::differential: break;
    }
    auto jb = path::jailbreak_flow(model, prompts, sure, cfg.window);
    auto uf = path::utility_flow(model, util_pairs, cfg.window);
    return path::build_mask(path::differential_flow(jb, uf), cfg.p);
}

} // namespace

double cos_dist(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw ContractError("cosine distance shape mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw NumericError("cosine distance of a zero vector");
    return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> cos_dist_grad(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) throw ContractError("cosine distance shape mismatch");
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na2 += a[i] * a[i];
        nb2 += b[i] * b[i];
    }
    if (na2 == 0.0 || nb2 == 0.0) throw NumericError("cosine distance of a zero vector");
    double na = std::sqrt(na2), nb = std::sqrt(nb2);
    double cosine = dot / (na * nb);
    std::vector<double> g(a.size());
    // d(1 - cos)/da_i = cos * a_i / |a|^2 - b_i / (|a||b|)
    for (size_t i = 0; i < a.size(); ++i) g[i] = cosine * a[i] / na2 - b[i] / (na * nb);
    return g;
}

SafetyAnchor compute_safety_anchor(const lm::ModelState& model,
                                   const std::vector<const corpus::LabeledPair*>& sample,
                                   Token refuse, int iteration) {
    if (sample.empty()) throw ContractError("safety anchor needs a prompt sample");
    const int E = model.config.embed;
    std::vector<std::vector<double>> refused, all;
    for (const auto* p : sample) {
        ProbeResult r = probe_prompt(model, p->prompt);
        all.push_back(r.hidden);
        if (r.next == refuse) refused.push_back(std::move(r.hidden));
    }
    SafetyAnchor anchor;
    anchor.frozen_at_iteration = iteration;
    const auto& used = refused.size() >= 8 ? refused : all;
    anchor.fallback = refused.size() < 8;
    anchor.sample_count = int(used.size());
    anchor.centroid.assign(size_t(E), 0.0);
    for (const auto& h : used)
        for (int d = 0; d < E; ++d) anchor.centroid[size_t(d)] += h[size_t(d)];
    for (int d = 0; d < E; ++d) anchor.centroid[size_t(d)] /= double(used.size());
    return anchor;
}

std::vector<TokenSeq> batch_prompts(const buffer::OnPolicyBatch& batch) {
    std::vector<TokenSeq> out;
    out.reserve(batch.parents.size() + batch.offspring.size());
    for (const auto& e : batch.parents) out.push_back(e.prompt());
    for (const auto& e : batch.offspring) out.push_back(e.prompt());
    return out;
}

double refusal_behavior_loss(const lm::ModelState& model, const buffer::OnPolicyBatch& batch,
                             const TokenSeq& y_ref) {
    auto entries = batch_entries(batch);
    if (entries.empty()) throw ContractError("refusal loss on an empty batch");
    double sum = 0.0;
    for (const auto* e : entries) sum += lm::nll_loss(model, e->prompt(), y_ref);
    return sum / double(entries.size());
}

double anchor_alignment_loss(const lm::ModelState& model, const buffer::OnPolicyBatch& batch,
                             const SafetyAnchor& anchor) {
    auto entries = batch_entries(batch);
    if (entries.empty()) throw ContractError("anchor loss on an empty batch");
    double sum = 0.0;
    for (const auto* e : entries)
        sum += cos_dist(lm::hidden_state(model, e->prompt()).h, anchor.centroid);
    return sum / double(entries.size());
}

TotalLoss total_loss(const lm::ModelState& model, const buffer::OnPolicyBatch& batch,
                     const SafetyAnchor& anchor,
                     const std::vector<const corpus::LabeledPair*>& utility_pairs,
                     double beta, double lambda, const TokenSeq& y_ref) {
    auto entries = batch_entries(batch);
    if (entries.empty()) throw ContractError("total loss on an empty batch");
    if (utility_pairs.empty()) throw ContractError("total loss needs utility pairs");

    TotalLoss out;
    out.rect = lm::make_grads(model);
    out.rect.zero();
    out.util = lm::make_grads(model);
    out.util.zero();

    const double inv_b = 1.0 / double(entries.size());
    double lh = 0.0, ls = 0.0;
    for (const auto* e : entries) {
        TokenSeq prompt = e->prompt();
        lh += lm::nll_loss_grads(model, prompt, y_ref, out.rect, inv_b);
        if (beta != 0.0)
            ls += anchor_term_grads(model, prompt, anchor.centroid, out.rect, beta * inv_b);
    }
    lh *= inv_b;
    ls *= inv_b;

    const double inv_u = 1.0 / double(utility_pairs.size());
    double lu = 0.0;
    for (const auto* p : utility_pairs)
        lu += lm::nll_loss_grads(model, p->prompt, p->response, out.util, inv_u);
    lu *= inv_u;

    out.bundle.refusal = lh;
    out.bundle.anchor = ls;
    out.bundle.utility = lu;
    out.bundle.beta = beta;
    out.bundle.lambda = lambda;
    out.bundle.total = lh + beta * ls + lambda * lu;
    return out;
}

double baseline_unlearn_loss(const lm::ModelState& model,
                             const std::vector<const corpus::LabeledPair*>& harmful,
                             const std::vector<const corpus::LabeledPair*>& utility,
                             double lambda, const TokenSeq& y_ref) {
    if (harmful.empty() || utility.empty()) throw ContractError("baseline loss on empty batches");
    double lh = 0.0;
    for (const auto* p : harmful) lh += lm::nll_loss(model, p->prompt, y_ref);
    lh /= double(harmful.size());
    double lu = 0.0;
    for (const auto* p : utility) lu += lm::nll_loss(model, p->prompt, p->response);
    lu /= double(utility.size());
    return lh + lambda * lu;
}

std::string IterationRecord::to_line() const {
    std::string s;
    s += "it=" + std::to_string(iteration);
    s += "\tparents=" + std::to_string(parents);
    s += "\toffspring=" + std::to_string(offspring);
    s += "\tlh=" + tsv::fmt_g17(refusal_loss);
    s += "\tls=" + tsv::fmt_g17(anchor_loss);
    s += "\tlu=" + tsv::fmt_g17(utility_loss);
    s += "\ttotal=" + tsv::fmt_g17(total);
    s += "\tmask=" + std::to_string(mask_size);
    s += "\trr=" + tsv::fmt_g17(buffer_refusal_rate);
    s += "\tskip=" + std::string(skipped ? "1" : "0");
    return s;
}

IterationRecord IterationRecord::from_line(const std::string& line) {
    auto fields = tsv::split_tabs(line);
    if (fields.size() != 10) throw InputError("iteration record needs 10 fields");
    IterationRecord r;
    r.iteration = int(std::stol(tsv::header_field(fields[0], "it")));
    r.parents = int(std::stol(tsv::header_field(fields[1], "parents")));
    r.offspring = int(std::stol(tsv::header_field(fields[2], "offspring")));
    r.refusal_loss = tsv::parse_double(tsv::header_field(fields[3], "lh"));
    r.anchor_loss = tsv::parse_double(tsv::header_field(fields[4], "ls"));
    r.utility_loss = tsv::parse_double(tsv::header_field(fields[5], "lu"));
    r.total = tsv::parse_double(tsv::header_field(fields[6], "total"));
    r.mask_size = std::stol(tsv::header_field(fields[7], "mask"));
    r.buffer_refusal_rate = tsv::parse_double(tsv::header_field(fields[8], "rr"));
    std::string skip = tsv::header_field(fields[9], "skip");
    if (skip != "0" && skip != "1") throw InputError("bad skip flag");
    r.skipped = skip == "1";
    return r;
}

TrainResult train(lm::ModelState& model, const corpus::World& world, buffer::AttackBuffer& buf,
                  const TrainConfig& cfg) {
    if (cfg.eta <= 0.0) throw ConfigError("learning rate must be positive");
    if (cfg.max_iterations < 0) throw ConfigError("negative iteration budget");
    using clock = std::chrono::steady_clock;

    const TokenSeq y_ref = world.vocab.refusal_target();
    auto harm_train = world.pairs(corpus::PairSet::harmful, corpus::Split::train);

    TrainResult result;
    std::vector<lm::Tensor> last_good = model.params;
    int streak = 0;

    for (int it = 0; it < cfg.max_iterations; ++it) {
        auto t0 = clock::now();
        IterationRecord rec;
        double batch_rr = 0.0;
        // the model lib raises NumericError when a loss goes non-finite;
        // anywhere in the iteration that means the last update diverged
        try {
            buffer::OnPolicyBatch batch =
                cfg.buffer_rule == BufferRule::frozen
                    ? frozen_batch(buf, model, buf.iteration + it, cfg.seed)
                    : buffer::step_buffer(buf, model);
            auto util_pairs = retain_batch(world, cfg.utility_batch, cfg.seed, "util-batch",
                                           uint64_t(batch.iteration));

            rec.iteration = batch.iteration;
            rec.parents = int(batch.parents.size());
            rec.offspring = int(batch.offspring.size());
            rec.buffer_refusal_rate = batch.refusal_rate;
            batch_rr = batch.refusal_rate;

            if (batch.empty()) {
                // no surviving attacks: utility-only step, full gradient
                lm::GradSet util = lm::make_grads(model);
                util.zero();
                const double inv_u = 1.0 / double(util_pairs.size());
                double lu = 0.0;
                for (const auto* p : util_pairs)
                    lu += lm::nll_loss_grads(model, p->prompt, p->response, util, inv_u);
                lu *= inv_u;
                if (!finite(lu)) {
                    model.params = last_good;
                    result.diverged = true;
                    break;
                }
                last_good = model.params;
                // lambda = 0 applies no update at all, keeping the refused
                // fixed point exact
                if (cfg.lambda != 0.0) lm::sgd_step(model, util, cfg.eta * cfg.lambda);
                rec.skipped = true;
                rec.utility_loss = lu;
                rec.total = cfg.lambda * lu;
            } else {
                auto prompts = batch_prompts(batch);
                SparseMask mask = update_mask(model, prompts, util_pairs, world.vocab.sure,
                                              y_ref, cfg, batch.iteration);
                auto anchor_sample = draw_pairs(harm_train, cfg.anchor_sample,
                                                Rng::derive(cfg.seed, "anchor",
                                                            uint64_t(batch.iteration)));
                SafetyAnchor anchor =
                    compute_safety_anchor(model, anchor_sample, world.vocab.refuse, batch.iteration);
                TotalLoss tl =
                    total_loss(model, batch, anchor, util_pairs, cfg.beta, cfg.lambda, y_ref);
                if (!finite(tl.bundle.refusal) || !finite(tl.bundle.anchor) ||
                    !finite(tl.bundle.utility)) {
                    model.params = last_good;
                    result.diverged = true;
                    break;
                }
                last_good = model.params;
                lm::masked_update(model, mask, tl.rect, tl.util, cfg.eta, cfg.lambda);
                rec.refusal_loss = tl.bundle.refusal;
                rec.anchor_loss = tl.bundle.anchor;
                rec.utility_loss = tl.bundle.utility;
                rec.total = tl.bundle.total;
                rec.mask_size = long(mask.count());
            }
        } catch (const NumericError&) {
            model.params = last_good;
            result.diverged = true;
            break;
        }

        rec.wall_ms =
            std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        result.records.push_back(rec);
        ++result.iterations;

        streak = batch_rr >= cfg.convergence_target ? streak + 1 : 0;
        if (streak >= cfg.patience) {
            result.converged = true;
            break;
        }
    }
    return result;
}

TrainResult train_baseline(lm::ModelState& model, const corpus::World& world,
                           const TrainConfig& cfg, int iterations) {
    if (cfg.eta <= 0.0) throw ConfigError("learning rate must be positive");
    if (iterations < 0) throw ConfigError("negative iteration budget");
    using clock = std::chrono::steady_clock;

    const TokenSeq y_ref = world.vocab.refusal_target();
    auto harm_pool = world.pairs(corpus::PairSet::harmful, corpus::Split::train);

    TrainResult result;
    std::vector<lm::Tensor> last_good = model.params;

    for (int it = 0; it < iterations; ++it) {
        auto t0 = clock::now();
        auto harm = draw_pairs(harm_pool, 16, Rng::derive(cfg.seed, "eq1-harm", uint64_t(it)));
        auto util = retain_batch(world, cfg.utility_batch, cfg.seed, "eq1-util", uint64_t(it));

        lm::GradSet grads = lm::make_grads(model);
        grads.zero();
        double lh = 0.0, lu = 0.0;
        try {
            const double inv_h = 1.0 / double(harm.size());
            for (const auto* p : harm)
                lh += lm::nll_loss_grads(model, p->prompt, y_ref, grads, inv_h);
            lh *= inv_h;
            const double inv_u = 1.0 / double(util.size());
            for (const auto* p : util)
                lu += lm::nll_loss_grads(model, p->prompt, p->response, grads, cfg.lambda * inv_u);
            lu *= inv_u;
        } catch (const NumericError&) {
            model.params = last_good;
            result.diverged = true;
            break;
        }
        if (!finite(lh) || !finite(lu)) {
            model.params = last_good;
            result.diverged = true;
            break;
        }
        last_good = model.params;
        lm::sgd_step(model, grads, cfg.eta);

        IterationRecord rec;
        rec.iteration = it;
        rec.refusal_loss = lh;
        rec.utility_loss = lu;
        rec.total = lh + cfg.lambda * lu;
        rec.buffer_refusal_rate = -1.0;
        rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        result.records.push_back(rec);
        ++result.iterations;
    }
    return result;
}

} // namespace jpu::rect
