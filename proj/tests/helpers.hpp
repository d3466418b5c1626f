#pragma once

// Shared test scaffolding: small model configs, finite-difference probes, the
// arbitrary-precision NLL oracle, and constant-output stub models.

#include <functional>
#include <mpfr.h>

#include <cmath>
#include <vector>

#include "jpu/model.hpp"

namespace testutil {

using namespace jpu;
using namespace jpu::lm;

inline ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab = 12;
    c.embed = 8;
    c.layers = 2;
    c.ffn = 10;
    c.heads = 2;
    c.max_seq = 12;
    return c;
}

// Central finite difference d f / d theta[pi][ci] using the effective-step
// trick: the perturbed values are rounded to f32 first and the divisor is the
// exact double difference between them, so f32 quantization cancels.
inline double fd_param(ModelState& m, size_t pi, size_t ci,
                       const std::function<double(const ModelState&)>& f, double h = 1e-4) {
    float orig = m.params[pi].v[ci];
    float xp = float(double(orig) + h);
    float xm = float(double(orig) - h);
    m.params[pi].v[ci] = xp;
    double fp = f(m);
    m.params[pi].v[ci] = xm;
    double fm = f(m);
    m.params[pi].v[ci] = orig;
    return (fp - fm) / (double(xp) - double(xm));
}

inline bool grad_close(double analytic, double fd, double rel = 1e-4, double abs = 1e-7) {
    return std::fabs(analytic - fd) <= rel * std::max(std::fabs(analytic), std::fabs(fd)) + abs;
}

// Mean NLL over (position, target) pairs recomputed at 256-bit precision.
inline double mpfr_mean_nll(const std::vector<double>& logits, int vocab,
                            const std::vector<std::pair<int, Token>>& scored) {
    const mpfr_prec_t prec = 256;
    mpfr_t sum, lse, term, li;
    mpfr_inits2(prec, sum, lse, term, li, (mpfr_ptr) nullptr);
    mpfr_set_zero(sum, 1);
    for (auto [pos, tgt] : scored) {
        const double* row = logits.data() + size_t(pos) * vocab;
        mpfr_set_zero(lse, 1);
        for (int i = 0; i < vocab; ++i) {
            mpfr_set_d(li, row[i], MPFR_RNDN);
            mpfr_exp(term, li, MPFR_RNDN);
            mpfr_add(lse, lse, term, MPFR_RNDN);
        }
        mpfr_log(lse, lse, MPFR_RNDN);
        mpfr_set_d(li, row[tgt], MPFR_RNDN);
        mpfr_sub(lse, lse, li, MPFR_RNDN);
        mpfr_add(sum, sum, lse, MPFR_RNDN);
    }
    mpfr_div_ui(sum, sum, (unsigned long)scored.size(), MPFR_RNDN);
    double out = mpfr_get_d(sum, MPFR_RNDN);
    mpfr_clears(sum, lse, term, li, (mpfr_ptr) nullptr);
    return out;
}

// Model that emits `token` with logit `kappa` and 0 for everything else, for
// any input: zeroed blocks keep the residual stream at the all-ones token
// embedding, and the head reads it out through the out norm.
inline ModelState make_constant_stub(const ModelConfig& cfg, Token token, double kappa = 25.0) {
    ModelState m = init_model(cfg, 0);
    for (auto& t : m.params) std::fill(t.v.begin(), t.v.end(), 0.0f);
    auto ones = [&](Tensor& t) { std::fill(t.v.begin(), t.v.end(), 1.0f); };
    ones(m.params[0]); // tok_embed rows all ones
    for (int l = 0; l < cfg.layers; ++l) {
        ones(m.at(l, Part::attn_norm));
        ones(m.at(l, Part::ffn_norm));
    }
    ones(m.params[size_t(m.idx_out_norm())]);
    Tensor& head = m.params[size_t(m.idx_out_head())];
    // on ~= ones, so logit[token] = sum_d head[d][token] = kappa
    for (int d = 0; d < cfg.embed; ++d)
        head.v[size_t(d) * cfg.vocab + token] = float(kappa / cfg.embed);
    return m;
}

// Model implementing the one-step rule "emit `refuse`, unless the last input
// token is `refuse`, then emit `eos`" -- a perfect refuser for the two-token
// refusal target. Needs embed >= vocab: token embeddings are one-hot, blocks
// are dead, and the head reads the rule off the normalized one-hot.
inline ModelState make_refusal_stub(const ModelConfig& cfg, Token refuse, Token eos,
                                    double kappa = 25.0) {
    if (cfg.embed < cfg.vocab) throw ContractError("refusal stub needs embed >= vocab");
    ModelState m = init_model(cfg, 0);
    for (auto& t : m.params) std::fill(t.v.begin(), t.v.end(), 0.0f);
    Tensor& tok = m.params[0];
    for (int t = 0; t < cfg.vocab; ++t) tok.v[size_t(t) * cfg.embed + t] = 1.0f;
    auto ones = [&](Tensor& t) { std::fill(t.v.begin(), t.v.end(), 1.0f); };
    for (int l = 0; l < cfg.layers; ++l) {
        ones(m.at(l, Part::attn_norm));
        ones(m.at(l, Part::ffn_norm));
    }
    ones(m.params[size_t(m.idx_out_norm())]);
    Tensor& head = m.params[size_t(m.idx_out_head())];
    // normalized one-hot for token t is ~sqrt(E) * e_t, so logit[u] given last
    // token t is ~sqrt(E) * head[t][u]
    float w = float(kappa / std::sqrt(double(cfg.embed)));
    for (int t = 0; t < cfg.vocab; ++t)
        head.v[size_t(t) * cfg.vocab + size_t(t == refuse ? eos : refuse)] = w;
    return m;
}

} // namespace testutil
