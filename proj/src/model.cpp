#include "jpu/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "jpu/kernels.hpp"

namespace jpu::lm {

namespace {

constexpr double kNormEps = 1e-8;

double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

void check_tokens(const ModelConfig& cfg, std::span<const Token> tokens) {
    if (tokens.empty()) throw InputError("empty token sequence");
    if (int(tokens.size()) > cfg.max_seq)
        throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                         std::to_string(cfg.max_seq));
    for (Token t : tokens)
        if (t < 0 || t >= cfg.vocab)
            throw InputError("token id " + std::to_string(t) + " outside vocab " +
                             std::to_string(cfg.vocab));
}

// rmsnorm backward shared by all three norm sites.
// y = x * inv * gain, inv = 1/sqrt(mean(x^2) + eps)
// dx_d = inv*w_d - x_d * inv^3/E * (w . x), w = gain ⊙ dy;  dgain_d = dy_d * x_d * inv
void rms_backward(const double* x, double inv, const float* gain, const double* dy, int e,
                  double* dx_out, double* dgain_acc, double* wtmp) {
    const auto& K = kern::active();
    for (int d = 0; d < e; ++d) wtmp[d] = double(gain[d]) * dy[d];
    double dot_wx = K.dot_dd(wtmp, x, size_t(e));
    double c = inv * inv * inv / double(e) * dot_wx;
    for (int d = 0; d < e; ++d) dx_out[d] = inv * wtmp[d] - x[d] * c;
    if (dgain_acc)
        for (int d = 0; d < e; ++d) dgain_acc[d] += dy[d] * x[d] * inv;
}

} // namespace

void ModelConfig::validate() const {
    if (vocab < 2) throw ConfigError("vocab must be >= 2");
    if (embed < 1 || layers < 1 || ffn < 1 || heads < 1 || max_seq < 1)
        throw ConfigError("all model dimensions must be positive");
    if (embed % heads != 0)
        throw ConfigError("embed " + std::to_string(embed) + " not divisible by heads " +
                          std::to_string(heads));
}

ModelState init_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    ModelState m;
    m.config = config;
    const size_t E = size_t(config.embed), F = size_t(config.ffn), V = size_t(config.vocab);

    auto add = [&](const std::string& name, size_t rows, size_t cols) {
        m.params.push_back(Tensor{name, rows, cols, std::vector<float>(rows * cols, 0.0f)});
    };

    add("tok_embed", V, E);
    add("pos_embed", size_t(config.max_seq), E);
    for (int l = 0; l < config.layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        add(p + "attn_norm", E, 1);
        add(p + "wq", E, E);
        add(p + "wk", E, E);
        add(p + "wv", E, E);
        add(p + "wo", E, E);
        add(p + "ffn_norm", E, 1);
        add(p + "ffn_gate", E, F);
        add(p + "ffn_up", E, F);
        add(p + "ffn_down", F, E);
    }
    add("out_norm", E, 1);
    add("out_head", E, V);

    Rng rng = Rng::derive(seed, "model-init");
    const double res_scale = 1.0 / std::sqrt(2.0 * double(config.layers));
    auto fill_normal = [&](Tensor& t, double sigma) {
        for (auto& x : t.v) x = float(rng.normal() * sigma);
    };
    auto fill_ones = [](Tensor& t) { std::fill(t.v.begin(), t.v.end(), 1.0f); };

    fill_normal(m.params[0], 0.05);
    fill_normal(m.params[1], 0.05);
    for (int l = 0; l < config.layers; ++l) {
        fill_ones(m.at(l, Part::attn_norm));
        fill_normal(m.at(l, Part::wq), 1.0 / std::sqrt(double(E)));
        fill_normal(m.at(l, Part::wk), 1.0 / std::sqrt(double(E)));
        fill_normal(m.at(l, Part::wv), 1.0 / std::sqrt(double(E)));
        fill_normal(m.at(l, Part::wo), res_scale / std::sqrt(double(E)));
        fill_ones(m.at(l, Part::ffn_norm));
        fill_normal(m.at(l, Part::ffn_gate), 1.0 / std::sqrt(double(E)));
        fill_normal(m.at(l, Part::ffn_up), 1.0 / std::sqrt(double(E)));
        fill_normal(m.at(l, Part::ffn_down), res_scale / std::sqrt(double(F)));
    }
    fill_ones(m.params[size_t(m.idx_out_norm())]);
    fill_normal(m.params[size_t(m.idx_out_head())], 0.05);
    return m;
}

GradSet make_grads(const ModelState& model) {
    GradSet g;
    g.g.reserve(model.params.size());
    for (const auto& t : model.params) g.g.emplace_back(t.count(), 0.0);
    return g;
}

size_t count_params(const ModelState& model) {
    size_t c = 0;
    for (const auto& t : model.params) c += t.count();
    return c;
}

void forward_tape(const ModelState& model, std::span<const Token> tokens, Tape& tape,
                  const ForwardOpts& opts) {
    const ModelConfig& cfg = model.config;
    check_tokens(cfg, tokens);
    if (opts.scale_layer >= cfg.layers) throw ContractError("scale_layer out of range");
    if (opts.nudge) {
        const ActNudge& nd = *opts.nudge;
        if (nd.layer < 0 || nd.layer >= cfg.layers || nd.pos < 0 || nd.pos >= int(tokens.size()) ||
            nd.neuron < 0 || nd.neuron >= cfg.ffn)
            throw ContractError("activation nudge out of range");
    }

    const int n = int(tokens.size());
    const int E = cfg.embed, F = cfg.ffn, H = cfg.heads, L = cfg.layers, V = cfg.vocab;
    const int Dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(Dh));
    const auto& K = kern::active();

    tape.n = n;
    tape.cfg = cfg;
    tape.opts = opts;
    tape.tokens.assign(tokens.begin(), tokens.end());
    auto sz = [](std::vector<double>& vec, size_t want) { vec.assign(want, 0.0); };
    sz(tape.res_a, size_t(L) * n * E);
    sz(tape.an, size_t(L) * n * E);
    sz(tape.q, size_t(L) * n * E);
    sz(tape.k, size_t(L) * n * E);
    sz(tape.v, size_t(L) * n * E);
    sz(tape.ctx, size_t(L) * n * E);
    sz(tape.att_p, size_t(L) * H * n * n);
    sz(tape.res_f, size_t(L) * n * E);
    sz(tape.fn, size_t(L) * n * E);
    sz(tape.gp, size_t(L) * n * F);
    sz(tape.up, size_t(L) * n * F);
    sz(tape.act, size_t(L) * n * F);
    sz(tape.act_grad, size_t(L) * n * F);
    sz(tape.inv_a, size_t(L) * n);
    sz(tape.inv_f, size_t(L) * n);
    sz(tape.hid, size_t(n) * E);
    sz(tape.on_, size_t(n) * E);
    sz(tape.inv_o, size_t(n));
    sz(tape.logits, size_t(n) * V);

    std::vector<double> x(size_t(n) * E);
    const float* tok_emb = model.params[0].data();
    const float* pos_emb = model.params[1].data();
    for (int t = 0; t < n; ++t) {
        const float* te = tok_emb + size_t(tokens[size_t(t)]) * E;
        const float* pe = pos_emb + size_t(t) * E;
        double* xt = x.data() + size_t(t) * E;
        for (int d = 0; d < E; ++d) xt[d] = double(te[d]) + double(pe[d]);
    }

    auto rms_inv = [&](const double* row) {
        double ss = K.dot_dd(row, row, size_t(E));
        return 1.0 / std::sqrt(ss / double(E) + kNormEps);
    };

    for (int l = 0; l < L; ++l) {
        const float* g_att = model.at(l, Part::attn_norm).data();
        const float* wq = model.at(l, Part::wq).data();
        const float* wk = model.at(l, Part::wk).data();
        const float* wv = model.at(l, Part::wv).data();
        const float* wo = model.at(l, Part::wo).data();
        const float* g_ffn = model.at(l, Part::ffn_norm).data();
        const float* wg = model.at(l, Part::ffn_gate).data();
        const float* wu = model.at(l, Part::ffn_up).data();
        const float* wd = model.at(l, Part::ffn_down).data();

        for (int t = 0; t < n; ++t) {
            double* xt = x.data() + size_t(t) * E;
            std::memcpy(&tape.res_a[tape.e(l, t, 0)], xt, sizeof(double) * size_t(E));
            double inv = rms_inv(xt);
            tape.inv_a[size_t(l) * n + t] = inv;
            double* an = &tape.an[tape.e(l, t, 0)];
            for (int d = 0; d < E; ++d) an[d] = xt[d] * inv * double(g_att[d]);
            K.matvec_acc(wq, an, &tape.q[tape.e(l, t, 0)], size_t(E), size_t(E));
            K.matvec_acc(wk, an, &tape.k[tape.e(l, t, 0)], size_t(E), size_t(E));
            K.matvec_acc(wv, an, &tape.v[tape.e(l, t, 0)], size_t(E), size_t(E));
        }
        std::vector<double> scores(size_t(n), 0.0);
        for (int h = 0; h < H; ++h) {
            const int off = h * Dh;
            for (int t = 0; t < n; ++t) {
                const double* qh = &tape.q[tape.e(l, t, off)];
                double mx = -1e300;
                for (int u = 0; u <= t; ++u) {
                    double s = K.dot_dd(qh, &tape.k[tape.e(l, u, off)], size_t(Dh)) * inv_sqrt_dh;
                    scores[size_t(u)] = s;
                    mx = std::max(mx, s);
                }
                double denom = 0.0;
                for (int u = 0; u <= t; ++u) {
                    double p = std::exp(scores[size_t(u)] - mx);
                    scores[size_t(u)] = p;
                    denom += p;
                }
                double* prow = &tape.att_p[tape.p(l, h, t, 0)];
                double* ch = &tape.ctx[tape.e(l, t, off)];
                for (int u = 0; u <= t; ++u) {
                    double p = scores[size_t(u)] / denom;
                    prow[u] = p;
                    K.axpy_dd(p, &tape.v[tape.e(l, u, off)], ch, size_t(Dh));
                }
            }
        }
        for (int t = 0; t < n; ++t) {
            double* xt = x.data() + size_t(t) * E;
            K.matvec_acc(wo, &tape.ctx[tape.e(l, t, 0)], xt, size_t(E), size_t(E));
            std::memcpy(&tape.res_f[tape.e(l, t, 0)], xt, sizeof(double) * size_t(E));
        }

        for (int t = 0; t < n; ++t) {
            double* xt = x.data() + size_t(t) * E;
            const double* rf = &tape.res_f[tape.e(l, t, 0)];
            double inv = rms_inv(rf);
            tape.inv_f[size_t(l) * n + t] = inv;
            double* fn = &tape.fn[tape.e(l, t, 0)];
            for (int d = 0; d < E; ++d) fn[d] = rf[d] * inv * double(g_ffn[d]);
            double* gp = &tape.gp[tape.f(l, t, 0)];
            double* up = &tape.up[tape.f(l, t, 0)];
            K.matvec_acc(wg, fn, gp, size_t(E), size_t(F));
            K.matvec_acc(wu, fn, up, size_t(E), size_t(F));
            double* act = &tape.act[tape.f(l, t, 0)];
            for (int i = 0; i < F; ++i) act[i] = gp[i] * stable_sigmoid(gp[i]) * up[i];
            if (l == opts.scale_layer && (opts.scale_pos < 0 || t == opts.scale_pos))
                for (int i = 0; i < F; ++i) act[i] *= opts.alpha;
            if (opts.nudge && opts.nudge->layer == l && opts.nudge->pos == t)
                act[opts.nudge->neuron] += opts.nudge->delta;
            K.matvec_acc(wd, act, xt, size_t(F), size_t(E));
        }
    }

    const float* g_out = model.params[size_t(model.idx_out_norm())].data();
    const float* w_head = model.params[size_t(model.idx_out_head())].data();
    std::memcpy(tape.hid.data(), x.data(), sizeof(double) * x.size());
    for (int t = 0; t < n; ++t) {
        const double* ht = &tape.hid[size_t(t) * E];
        double inv = rms_inv(ht);
        tape.inv_o[size_t(t)] = inv;
        double* on = &tape.on_[size_t(t) * E];
        for (int d = 0; d < E; ++d) on[d] = ht[d] * inv * double(g_out[d]);
        K.matvec_acc(w_head, on, &tape.logits[size_t(t) * V], size_t(E), size_t(V));
    }
}

void backward_tape(const ModelState& model, Tape& tape, const std::vector<double>& dlogits,
                   const std::vector<double>* dhid_extra, GradSet* grads, double grad_scale) {
    const ModelConfig& cfg = tape.cfg;
    const int n = tape.n, E = cfg.embed, F = cfg.ffn, H = cfg.heads, L = cfg.layers, V = cfg.vocab;
    const int Dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(Dh));
    const auto& K = kern::active();
    if (n == 0) throw ContractError("backward on empty tape");
    if (int(dlogits.size()) != n * V) throw ContractError("dlogits shape mismatch");
    if (dhid_extra && int(dhid_extra->size()) != n * E)
        throw ContractError("dhid_extra shape mismatch");
    if (grads && grads->g.size() != model.params.size())
        throw ContractError("grad set shape mismatch");

    const float* g_out = model.params[size_t(model.idx_out_norm())].data();
    const float* w_head = model.params[size_t(model.idx_out_head())].data();

    std::vector<double> dx(size_t(n) * E, 0.0);
    std::vector<double> don(size_t(E), 0.0), wtmp(size_t(E), 0.0), dres(size_t(E), 0.0);
    std::vector<double> dgp(size_t(F), 0.0), dup(size_t(F), 0.0), dfn(size_t(E), 0.0);
    std::vector<double> dq(size_t(n) * E), dk(size_t(n) * E), dv(size_t(n) * E),
        dcs(size_t(n) * E), dan(size_t(E), 0.0), dp(size_t(n), 0.0), scaled(size_t(V), 0.0);

    auto* gh = grads ? &grads->g : nullptr;

    // output head and final norm
    for (int t = 0; t < n; ++t) {
        const double* dlr = dlogits.data() + size_t(t) * V;
        bool row_nonzero = false;
        for (int vv = 0; vv < V; ++vv)
            if (dlr[vv] != 0.0) { row_nonzero = true; break; }
        if (!row_nonzero && !dhid_extra) continue;

        std::fill(don.begin(), don.end(), 0.0);
        if (row_nonzero) {
            for (int vv = 0; vv < V; ++vv) scaled[size_t(vv)] = dlr[vv] * grad_scale;
            K.matvec_t_acc(w_head, scaled.data(), don.data(), size_t(E), size_t(V));
            if (gh)
                K.outer_acc(&tape.on_[size_t(t) * E], scaled.data(),
                            (*gh)[size_t(model.idx_out_head())].data(), size_t(E), size_t(V));
        }
        const double* ht = &tape.hid[size_t(t) * E];
        rms_backward(ht, tape.inv_o[size_t(t)], g_out, don.data(), E, dres.data(),
                     gh ? (*gh)[size_t(model.idx_out_norm())].data() : nullptr, wtmp.data());
        double* dxt = dx.data() + size_t(t) * E;
        for (int d = 0; d < E; ++d) dxt[d] += dres[d];
        if (dhid_extra) {
            const double* he = dhid_extra->data() + size_t(t) * E;
            for (int d = 0; d < E; ++d) dxt[d] += grad_scale * he[d];
        }
    }

    for (int l = L - 1; l >= 0; --l) {
        const float* g_att = model.at(l, Part::attn_norm).data();
        const float* wq = model.at(l, Part::wq).data();
        const float* wk = model.at(l, Part::wk).data();
        const float* wv = model.at(l, Part::wv).data();
        const float* wo = model.at(l, Part::wo).data();
        const float* g_ffn = model.at(l, Part::ffn_norm).data();
        const float* wg = model.at(l, Part::ffn_gate).data();
        const float* wu = model.at(l, Part::ffn_up).data();
        const float* wd = model.at(l, Part::ffn_down).data();

        // ffn backward; act_grad rows double as the dh working buffer
        for (int t = 0; t < n; ++t) {
            double* dxt = dx.data() + size_t(t) * E;
            double* dh = &tape.act_grad[tape.f(l, t, 0)];
            std::fill(dh, dh + F, 0.0);
            K.matvec_t_acc(wd, dxt, dh, size_t(F), size_t(E));
            if (gh)
                K.outer_acc(&tape.act[tape.f(l, t, 0)], dxt,
                            (*gh)[size_t(ModelState::idx(l, Part::ffn_down))].data(), size_t(F),
                            size_t(E));
            const double presc = (l == tape.opts.scale_layer &&
                                  (tape.opts.scale_pos < 0 || t == tape.opts.scale_pos))
                                     ? tape.opts.alpha
                                     : 1.0;
            const double* gp = &tape.gp[tape.f(l, t, 0)];
            const double* up = &tape.up[tape.f(l, t, 0)];
            for (int i = 0; i < F; ++i) {
                double dhp = dh[i] * presc;
                double sg = stable_sigmoid(gp[i]);
                double sil = gp[i] * sg;
                dgp[size_t(i)] = dhp * up[i] * sg * (1.0 + gp[i] * (1.0 - sg));
                dup[size_t(i)] = dhp * sil;
            }
            std::fill(dfn.begin(), dfn.end(), 0.0);
            K.matvec_t_acc(wg, dgp.data(), dfn.data(), size_t(E), size_t(F));
            K.matvec_t_acc(wu, dup.data(), dfn.data(), size_t(E), size_t(F));
            const double* fnr = &tape.fn[tape.e(l, t, 0)];
            if (gh) {
                K.outer_acc(fnr, dgp.data(),
                            (*gh)[size_t(ModelState::idx(l, Part::ffn_gate))].data(), size_t(E),
                            size_t(F));
                K.outer_acc(fnr, dup.data(),
                            (*gh)[size_t(ModelState::idx(l, Part::ffn_up))].data(), size_t(E),
                            size_t(F));
            }
            const double* rf = &tape.res_f[tape.e(l, t, 0)];
            rms_backward(rf, tape.inv_f[size_t(l) * n + t], g_ffn, dfn.data(), E, dres.data(),
                         gh ? (*gh)[size_t(ModelState::idx(l, Part::ffn_norm))].data() : nullptr,
                         wtmp.data());
            for (int d = 0; d < E; ++d) dxt[d] += dres[d];
        }

        // attention backward
        for (int t = 0; t < n; ++t) {
            double* dc = dcs.data() + size_t(t) * E;
            std::fill(dc, dc + E, 0.0);
            const double* dao = dx.data() + size_t(t) * E;
            K.matvec_t_acc(wo, dao, dc, size_t(E), size_t(E));
            if (gh)
                K.outer_acc(&tape.ctx[tape.e(l, t, 0)], dao,
                            (*gh)[size_t(ModelState::idx(l, Part::wo))].data(), size_t(E),
                            size_t(E));
        }
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (int h = 0; h < H; ++h) {
            const int off = h * Dh;
            for (int t = 0; t < n; ++t) {
                const double* dch = dcs.data() + size_t(t) * E + off;
                const double* prow = &tape.att_p[tape.p(l, h, t, 0)];
                double sumpd = 0.0;
                for (int u = 0; u <= t; ++u) {
                    double d = K.dot_dd(dch, &tape.v[tape.e(l, u, off)], size_t(Dh));
                    dp[size_t(u)] = d;
                    sumpd += prow[u] * d;
                }
                const double* qh = &tape.q[tape.e(l, t, off)];
                for (int u = 0; u <= t; ++u) {
                    double ds = prow[u] * (dp[size_t(u)] - sumpd) * inv_sqrt_dh;
                    K.axpy_dd(ds, &tape.k[tape.e(l, u, off)], &dq[size_t(t) * E + off],
                              size_t(Dh));
                    K.axpy_dd(ds, qh, &dk[size_t(u) * E + off], size_t(Dh));
                    K.axpy_dd(prow[u], dch, &dv[size_t(u) * E + off], size_t(Dh));
                }
            }
        }
        for (int t = 0; t < n; ++t) {
            std::fill(dan.begin(), dan.end(), 0.0);
            K.matvec_t_acc(wq, &dq[size_t(t) * E], dan.data(), size_t(E), size_t(E));
            K.matvec_t_acc(wk, &dk[size_t(t) * E], dan.data(), size_t(E), size_t(E));
            K.matvec_t_acc(wv, &dv[size_t(t) * E], dan.data(), size_t(E), size_t(E));
            const double* anr = &tape.an[tape.e(l, t, 0)];
            if (gh) {
                K.outer_acc(anr, &dq[size_t(t) * E],
                            (*gh)[size_t(ModelState::idx(l, Part::wq))].data(), size_t(E),
                            size_t(E));
                K.outer_acc(anr, &dk[size_t(t) * E],
                            (*gh)[size_t(ModelState::idx(l, Part::wk))].data(), size_t(E),
                            size_t(E));
                K.outer_acc(anr, &dv[size_t(t) * E],
                            (*gh)[size_t(ModelState::idx(l, Part::wv))].data(), size_t(E),
                            size_t(E));
            }
            const double* ra = &tape.res_a[tape.e(l, t, 0)];
            rms_backward(ra, tape.inv_a[size_t(l) * n + t], g_att, dan.data(), E, dres.data(),
                         gh ? (*gh)[size_t(ModelState::idx(l, Part::attn_norm))].data() : nullptr,
                         wtmp.data());
            double* dxt = dx.data() + size_t(t) * E;
            for (int d = 0; d < E; ++d) dxt[d] += dres[d];
        }
    }

    if (gh) {
        double* g_tok = (*gh)[0].data();
        double* g_pos = (*gh)[1].data();
        for (int t = 0; t < n; ++t) {
            const double* dxt = dx.data() + size_t(t) * E;
            K.axpy_dd(1.0, dxt, g_tok + size_t(tape.tokens[size_t(t)]) * E, size_t(E));
            K.axpy_dd(1.0, dxt, g_pos + size_t(t) * E, size_t(E));
        }
    }
}

std::vector<double> forward_logits(const ModelState& model, std::span<const Token> tokens) {
    Tape tape;
    forward_tape(model, tokens, tape);
    return tape.logits;
}

namespace {

// log(sum(exp(row))) with max subtraction
double logsumexp(const double* row, int v) {
    double mx = row[0];
    for (int i = 1; i < v; ++i) mx = std::max(mx, row[i]);
    double s = 0.0;
    for (int i = 0; i < v; ++i) s += std::exp(row[i] - mx);
    return mx + std::log(s);
}

void check_pair(const ModelConfig& cfg, std::span<const Token> prompt,
                std::span<const Token> target) {
    if (prompt.empty()) throw InputError("empty prompt");
    if (target.empty()) throw InputError("empty target");
    if (int(prompt.size() + target.size()) > cfg.max_seq)
        throw InputError("prompt+target exceeds max_seq");
}

double nll_from_tape(const Tape& tape, size_t n_prompt, std::span<const Token> target,
                     std::vector<double>* dlogits_out) {
    const int V = tape.cfg.vocab;
    const double invm = 1.0 / double(target.size());
    double loss = 0.0;
    if (dlogits_out) dlogits_out->assign(size_t(tape.n) * V, 0.0);
    for (size_t j = 0; j < target.size(); ++j) {
        size_t pos = n_prompt - 1 + j;
        const double* row = tape.logits.data() + pos * size_t(V);
        double lse = logsumexp(row, V);
        Token tgt = target[j];
        loss += (lse - row[tgt]) * invm;
        if (dlogits_out) {
            double* drow = dlogits_out->data() + pos * size_t(V);
            for (int i = 0; i < V; ++i) drow[i] = std::exp(row[i] - lse) * invm;
            drow[tgt] -= invm;
        }
    }
    if (!std::isfinite(loss)) throw NumericError("non-finite nll");
    return loss;
}

std::vector<Token> concat_seq(std::span<const Token> a, std::span<const Token> b) {
    std::vector<Token> s;
    s.reserve(a.size() + b.size());
    s.insert(s.end(), a.begin(), a.end());
    s.insert(s.end(), b.begin(), b.end());
    return s;
}

} // namespace

double nll_loss(const ModelState& model, std::span<const Token> prompt,
                std::span<const Token> target) {
    check_pair(model.config, prompt, target);
    Tape tape;
    forward_tape(model, concat_seq(prompt, target), tape);
    return nll_from_tape(tape, prompt.size(), target, nullptr);
}

double nll_loss_grads(const ModelState& model, std::span<const Token> prompt,
                      std::span<const Token> target, GradSet& grads, double scale) {
    check_pair(model.config, prompt, target);
    Tape tape;
    forward_tape(model, concat_seq(prompt, target), tape);
    std::vector<double> dlogits;
    double loss = nll_from_tape(tape, prompt.size(), target, &dlogits);
    backward_tape(model, tape, dlogits, nullptr, &grads, scale);
    return loss;
}

Attribution attribute(const ModelState& model, std::span<const Token> tokens, Token sink,
                      int scale_layer, double alpha) {
    const ModelConfig& cfg = model.config;
    if (sink < 0 || sink >= cfg.vocab) throw InputError("sink token outside vocab");
    Tape tape;
    ForwardOpts opts;
    opts.scale_layer = scale_layer;
    opts.scale_pos = int(tokens.size()) - 1;
    opts.alpha = alpha;
    forward_tape(model, tokens, tape, opts);

    std::vector<double> dlogits(size_t(tape.n) * cfg.vocab, 0.0);
    dlogits[size_t(tape.n - 1) * cfg.vocab + sink] = 1.0;
    backward_tape(model, tape, dlogits, nullptr, nullptr);

    Attribution out;
    out.layers.resize(size_t(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
        LayerTrace& tr = out.layers[size_t(l)];
        tr.n = tape.n;
        tr.ffn = cfg.ffn;
        size_t base = tape.f(l, 0, 0);
        size_t len = size_t(tape.n) * cfg.ffn;
        tr.activations.assign(tape.act.begin() + base, tape.act.begin() + base + len);
        tr.activation_grads.assign(tape.act_grad.begin() + base, tape.act_grad.begin() + base + len);
        for (double g : tr.activation_grads)
            if (!std::isfinite(g))
                throw NumericError("non-finite activation gradient in layer " + std::to_string(l));
        const Tensor& wd = model.at(l, Part::ffn_down);
        tr.weight_norms.assign(size_t(cfg.ffn), 0.0);
        for (int i = 0; i < cfg.ffn; ++i) {
            const float* row = wd.data() + size_t(i) * cfg.embed;
            double s = 0.0;
            for (int d = 0; d < cfg.embed; ++d) s += std::fabs(double(row[d]));
            tr.weight_norms[size_t(i)] = s;
        }
    }
    out.hidden.h.assign(tape.hid.end() - cfg.embed, tape.hid.end());
    return out;
}

HiddenSnapshot hidden_state(const ModelState& model, std::span<const Token> tokens) {
    Tape tape;
    forward_tape(model, tokens, tape);
    HiddenSnapshot s;
    s.h.assign(tape.hid.end() - model.config.embed, tape.hid.end());
    return s;
}

void masked_update(ModelState& model, const SparseMask& mask, const GradSet& rect,
                   const GradSet& util, double eta, double lambda) {
    const ModelConfig& cfg = model.config;
    if (int(mask.bits.size()) != cfg.layers) throw ContractError("mask layer count mismatch");
    for (const auto& row : mask.bits)
        if (int(row.size()) != cfg.ffn) throw ContractError("mask row width mismatch");
    if (rect.g.size() != model.params.size() || util.g.size() != model.params.size())
        throw ContractError("grad set shape mismatch");

    const int E = cfg.embed, F = cfg.ffn;
    for (size_t pi = 0; pi < model.params.size(); ++pi) {
        Tensor& t = model.params[pi];
        const std::vector<double>& gu = util.g[pi];
        // which layer/part this tensor belongs to, if any
        int layer = -1;
        Part part{};
        if (pi >= 2 && int(pi) < 2 + cfg.layers * kPartsPerLayer) {
            layer = (int(pi) - 2) / kPartsPerLayer;
            part = Part((int(pi) - 2) % kPartsPerLayer);
        }
        const bool is_gate_up = layer >= 0 && (part == Part::ffn_gate || part == Part::ffn_up);
        const bool is_down = layer >= 0 && part == Part::ffn_down;
        const std::vector<uint8_t>* bits = layer >= 0 ? &mask.bits[size_t(layer)] : nullptr;
        const std::vector<double>& gr = rect.g[pi];

        if (is_gate_up) {
            for (int d = 0; d < E; ++d) {
                float* row = t.data() + size_t(d) * F;
                const double* gur = gu.data() + size_t(d) * F;
                const double* grr = gr.data() + size_t(d) * F;
                for (int i = 0; i < F; ++i) {
                    double upd = lambda * gur[i] + ((*bits)[size_t(i)] ? grr[i] : 0.0);
                    if (upd != 0.0) row[i] = float(double(row[i]) - eta * upd);
                }
            }
        } else if (is_down) {
            for (int i = 0; i < F; ++i) {
                float* row = t.data() + size_t(i) * E;
                const double* gur = gu.data() + size_t(i) * E;
                const double* grr = gr.data() + size_t(i) * E;
                const bool on = (*bits)[size_t(i)] != 0;
                for (int d = 0; d < E; ++d) {
                    double upd = lambda * gur[d] + (on ? grr[d] : 0.0);
                    if (upd != 0.0) row[d] = float(double(row[d]) - eta * upd);
                }
            }
        } else if (lambda != 0.0) {
            float* p = t.data();
            for (size_t i = 0; i < gu.size(); ++i) {
                double upd = lambda * gu[i];
                if (upd != 0.0) p[i] = float(double(p[i]) - eta * upd);
            }
        }
    }
    model.step += 1;
}

void sgd_step(ModelState& model, const GradSet& grads, double eta) {
    if (grads.g.size() != model.params.size()) throw ContractError("grad set shape mismatch");
    for (size_t pi = 0; pi < model.params.size(); ++pi) {
        float* p = model.params[pi].data();
        const double* g = grads.g[pi].data();
        const size_t cnt = model.params[pi].count();
        for (size_t i = 0; i < cnt; ++i)
            if (g[i] != 0.0) p[i] = float(double(p[i]) - eta * g[i]);
    }
    model.step += 1;
}

TokenSeq greedy_decode(const ModelState& model, std::span<const Token> prompt, int max_new,
                       Token eos) {
    if (max_new < 0) throw ContractError("max_new must be >= 0");
    TokenSeq seq(prompt.begin(), prompt.end());
    check_tokens(model.config, seq);
    TokenSeq out;
    Tape tape;
    const int V = model.config.vocab;
    while (int(out.size()) < max_new && int(seq.size()) < model.config.max_seq) {
        forward_tape(model, seq, tape);
        const double* row = tape.logits.data() + size_t(tape.n - 1) * V;
        Token best = 0;
        for (int i = 1; i < V; ++i)
            if (row[i] > row[best]) best = i;
        out.push_back(best);
        seq.push_back(best);
        if (eos >= 0 && best == eos) break;
    }
    return out;
}

namespace {

template <typename T>
void wr(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T rd(std::ifstream& f) {
    T v;
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw InputError("truncated checkpoint");
    return v;
}

} // namespace

void save_checkpoint(const ModelState& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open " + path + " for writing");
    f.write("JPU1", 4);
    wr<uint8_t>(f, 1);
    wr<uint32_t>(f, uint32_t(model.params.size()));
    wr<uint64_t>(f, model.step);
    wr<uint32_t>(f, uint32_t(model.config.vocab));
    wr<uint32_t>(f, uint32_t(model.config.embed));
    wr<uint32_t>(f, uint32_t(model.config.layers));
    wr<uint32_t>(f, uint32_t(model.config.ffn));
    wr<uint32_t>(f, uint32_t(model.config.heads));
    wr<uint32_t>(f, uint32_t(model.config.max_seq));
    for (const auto& t : model.params) {
        wr<uint16_t>(f, uint16_t(t.name.size()));
        f.write(t.name.data(), std::streamsize(t.name.size()));
        wr<uint32_t>(f, uint32_t(t.rows));
        wr<uint32_t>(f, uint32_t(t.cols));
    }
    for (const auto& t : model.params)
        f.write(reinterpret_cast<const char*>(t.v.data()), std::streamsize(t.count() * 4));
    if (!f) throw InputError("write failed for " + path);
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "JPU1", 4) != 0) throw InputError("bad checkpoint magic");
    uint8_t ver = rd<uint8_t>(f);
    if (ver != 1) throw InputError("unsupported checkpoint version " + std::to_string(ver));
    uint32_t n_tensors = rd<uint32_t>(f);
    uint64_t step = rd<uint64_t>(f);
    ModelConfig cfg;
    cfg.vocab = int(rd<uint32_t>(f));
    cfg.embed = int(rd<uint32_t>(f));
    cfg.layers = int(rd<uint32_t>(f));
    cfg.ffn = int(rd<uint32_t>(f));
    cfg.heads = int(rd<uint32_t>(f));
    cfg.max_seq = int(rd<uint32_t>(f));
    cfg.validate();

    ModelState fresh = init_model(cfg, 0); // layout reference
    if (n_tensors != fresh.params.size()) throw InputError("checkpoint tensor count mismatch");

    ModelState m;
    m.config = cfg;
    m.step = step;
    m.params.resize(n_tensors);
    for (uint32_t i = 0; i < n_tensors; ++i) {
        uint16_t len = rd<uint16_t>(f);
        std::string name(len, '\0');
        f.read(name.data(), len);
        uint32_t rows = rd<uint32_t>(f);
        uint32_t cols = rd<uint32_t>(f);
        if (!f) throw InputError("truncated checkpoint manifest");
        const Tensor& ref = fresh.params[i];
        if (name != ref.name || rows != ref.rows || cols != ref.cols)
            throw InputError("checkpoint manifest mismatch at tensor " + std::to_string(i) + " (" +
                             name + ")");
        m.params[i] = Tensor{name, rows, cols, std::vector<float>(size_t(rows) * cols)};
    }
    for (auto& t : m.params) {
        f.read(reinterpret_cast<char*>(t.v.data()), std::streamsize(t.count() * 4));
        if (!f) throw InputError("truncated checkpoint payload");
    }
    return m;
}

} // namespace jpu::lm
