#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "jpu/errors.hpp"
#include "jpu/mask.hpp"
#include "jpu/rng.hpp"

namespace jpu::lm {

using Token = int;
using TokenSeq = std::vector<Token>;

struct ModelConfig {
    int vocab = 64;
    int embed = 64;
    int layers = 6;
    int ffn = 128;
    int heads = 2;
    int max_seq = 64;

    void validate() const;
    int head_dim() const { return embed / heads; }
    bool operator==(const ModelConfig&) const = default;
};

// Named f32 tensor, row-major [rows][cols]. 1-D tensors use cols = 1.
struct Tensor {
    std::string name;
    size_t rows = 0;
    size_t cols = 0;
    std::vector<float> v;

    size_t count() const { return rows * cols; }
    float* data() { return v.data(); }
    const float* data() const { return v.data(); }
};

// Per-layer parameter slots, in on-disk and in-memory order.
enum class Part { attn_norm, wq, wk, wv, wo, ffn_norm, ffn_gate, ffn_up, ffn_down };
inline constexpr int kPartsPerLayer = 9;

struct ModelState {
    ModelConfig config;
    std::vector<Tensor> params;
    uint64_t step = 0;

    static int idx_tok() { return 0; }
    static int idx_pos() { return 1; }
    static int idx(int layer, Part p) { return 2 + layer * kPartsPerLayer + int(p); }
    int idx_out_norm() const { return 2 + config.layers * kPartsPerLayer; }
    int idx_out_head() const { return idx_out_norm() + 1; }

    Tensor& at(int layer, Part p) { return params[size_t(idx(layer, p))]; }
    const Tensor& at(int layer, Part p) const { return params[size_t(idx(layer, p))]; }
};

// Gradient accumulator parallel to ModelState::params, in f64.
struct GradSet {
    std::vector<std::vector<double>> g;

    void zero() {
        for (auto& t : g) std::fill(t.begin(), t.end(), 0.0);
    }
};

ModelState init_model(const ModelConfig& config, uint64_t seed);
GradSet make_grads(const ModelState& model);
size_t count_params(const ModelState& model);

// Test hook for finite differences on activations: adds delta to FFN hidden
// unit (layer, pos, neuron) after the scale hook, i.e. to the same quantity
// whose gradient the trace reports.
struct ActNudge {
    int layer = 0;
    int pos = 0;
    int neuron = 0;
    double delta = 0.0;
};

struct ForwardOpts {
    int scale_layer = -1; // layer whose FFN hidden is multiplied by alpha; -1 for none
    int scale_pos = -1;   // position the scale hook applies at; -1 for every position
    double alpha = 1.0;
    const ActNudge* nudge = nullptr;
};

// Everything the backward pass needs, captured by forward_tape. Buffers are
// reused across calls when the same Tape object is passed again.
struct Tape {
    int n = 0;
    ModelConfig cfg;
    ForwardOpts opts;
    std::vector<Token> tokens;
    // flattened stacks; index helpers below
    std::vector<double> res_a, an, q, k, v, ctx, att_p, res_f, fn;
    std::vector<double> gp, up, act, act_grad;
    std::vector<double> inv_a, inv_f;
    std::vector<double> hid, on_, logits;
    std::vector<double> inv_o;

    size_t e(int l, int t, int d) const { return (size_t(l) * n + t) * cfg.embed + d; }
    size_t f(int l, int t, int i) const { return (size_t(l) * n + t) * cfg.ffn + i; }
    size_t p(int l, int h, int t, int u) const {
        return ((size_t(l) * cfg.heads + h) * n + t) * n + u;
    }
};

// Runs the model over tokens and fills the tape. logits live in tape.logits
// (n x vocab). Throws InputError on out-of-range tokens or length overflow.
void forward_tape(const ModelState& model, std::span<const Token> tokens, Tape& tape,
                  const ForwardOpts& opts = {});

// Reverse pass over a filled tape. dlogits is n x vocab; dhid_extra, when
// non-null, is n x embed and is added to the residual-stream gradient after
// the output norm (used for losses on hidden states). Parameter gradients are
// accumulated into *grads when grads is non-null. Both the parameter grads
// and tape.act_grad are scaled by grad_scale.
void backward_tape(const ModelState& model, Tape& tape, const std::vector<double>& dlogits,
                   const std::vector<double>* dhid_extra, GradSet* grads,
                   double grad_scale = 1.0);

// Convenience forward, logits only.
std::vector<double> forward_logits(const ModelState& model, std::span<const Token> tokens);

// Mean negative log-likelihood of target given prompt, in nats per target
// token. The model scores positions |prompt|-1 .. |prompt|+|target|-2.
double nll_loss(const ModelState& model, std::span<const Token> prompt,
                std::span<const Token> target);

// Same loss; also accumulates scale * d(loss)/d(theta) into grads.
double nll_loss_grads(const ModelState& model, std::span<const Token> prompt,
                      std::span<const Token> target, GradSet& grads, double scale = 1.0);

// Attribution traces for one sequence: per layer, the FFN hidden activations,
// their gradients w.r.t. the sink token's logit at the final position, and the
// L1 norms of each neuron's outgoing ffn_down row.
struct LayerTrace {
    std::vector<double> activations;      // [pos][ffn]
    std::vector<double> activation_grads; // [pos][ffn]
    std::vector<double> weight_norms;     // [ffn]
    int n = 0;
    int ffn = 0;
};

struct HiddenSnapshot {
    std::vector<double> h; // final-layer residual stream, pre output norm, last position
};

struct Attribution {
    std::vector<LayerTrace> layers;
    HiddenSnapshot hidden;
};

// scale_layer >= 0 multiplies that layer's FFN hidden at the final position by
// alpha before the down-projection (the integration path for attributing the
// sink logit to final-position activations); traces then report the scaled
// activations and the gradient at the scaled point.
Attribution attribute(const ModelState& model, std::span<const Token> tokens, Token sink,
                      int scale_layer = -1, double alpha = 1.0);

// Final-layer hidden state at the last position (anchor-space embedding).
HiddenSnapshot hidden_state(const ModelState& model, std::span<const Token> tokens);

// theta <- theta - eta * ((rect ⊙ mask) + lambda * util). The mask admits
// rect gradients only into ffn_gate/ffn_up columns and ffn_down rows of
// selected neurons; util flows everywhere. Bits outside the model's layer
// range are a contract violation.
void masked_update(ModelState& model, const SparseMask& mask, const GradSet& rect,
                   const GradSet& util, double eta, double lambda);

// Plain full-gradient step: theta <- theta - eta * grads.
void sgd_step(ModelState& model, const GradSet& grads, double eta);

// Greedy continuation; stops at max_new tokens, an EOS-valued token supplied
// by the caller via eos (pass -1 to disable), or the context limit.
TokenSeq greedy_decode(const ModelState& model, std::span<const Token> prompt, int max_new,
                       Token eos = -1);

void save_checkpoint(const ModelState& model, const std::string& path);
ModelState load_checkpoint(const std::string& path);

} // namespace jpu::lm
