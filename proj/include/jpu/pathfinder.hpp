#pragma once

#include <string>
#include <vector>

#include "jpu/corpus.hpp"
#include "jpu/mask.hpp"
#include "jpu/model.hpp"

namespace jpu::path {

using lm::Token;
using lm::TokenSeq;

enum class FlowSource { jailbreak, utility, differential, snip };
const char* flow_source_str(FlowSource s);

struct Window {
    int lo = 0, hi = 0; // layer range [lo, hi)

    int width() const { return hi - lo; }
    bool operator==(const Window&) const = default;
};

// Per-neuron scores for every layer; the window only marks where a mask may
// place bits, scores outside it are still computed and reportable.
struct FlowRecord {
    FlowSource source = FlowSource::jailbreak;
    Window window;
    std::vector<std::vector<double>> scores; // [layers][ffn]

    bool operator==(const FlowRecord&) const = default;
};

// First-order flow score per FFN neuron: mean over prompts of
// |W_i|_1 * |A_i * dlogit_sink/dA_i| with activation and gradient read at the
// final position, where the sink token's logit anchors the attribution.
FlowRecord jailbreak_flow(const lm::ModelState& model, const std::vector<TokenSeq>& prompts,
                          Token sink, Window w);

// Same score where the sink is each pair's first response token.
FlowRecord utility_flow(const lm::ModelState& model,
                        const std::vector<const corpus::LabeledPair*>& pairs, Window w);

// Scaled-path integral oracle: right-endpoint Riemann sum over alpha = k/steps
// of the same activation-gradient product, one scaled forward/backward per
// (layer, step). steps = 1 reproduces jailbreak_flow bitwise.
FlowRecord integral_flow(const lm::ModelState& model, const std::vector<TokenSeq>& prompts,
                         Token sink, Window w, int steps);

// L1-normalizes each layer of both records and subtracts utility from
// jailbreak share. Layers with zero total mass normalize to zeros.
FlowRecord differential_flow(const FlowRecord& jailbreak, const FlowRecord& utility);

// Magnitude-times-gradient saliency per neuron: mean_j |W_down[i][j] * g[i][j]|
// with g the batch-mean NLL gradient over (prompt, target) pairs.
FlowRecord snip_flow(const lm::ModelState& model,
                     const std::vector<std::pair<TokenSeq, TokenSeq>>& pairs, Window w);

// Top round(p * neurons-in-window) scores inside the record's window, ties
// broken by ascending (layer, neuron). ContractError when the mask comes out
// empty, ConfigError for p outside (0, 1].
SparseMask build_mask(const FlowRecord& record, double p);

// Uniformly drawn mask with the same cardinality rule and errors as
// build_mask; the ablation control for score-ranked selection.
SparseMask random_mask(int layers, int ffn, Window w, double p, Rng& rng);

// Per-layer intersection-over-union of the selected neuron sets. Layers where
// both masks are empty count as 1.
std::vector<double> layerwise_iou(const SparseMask& a, const SparseMask& b);

// Spearman rank correlation with average ranks on ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

void save_flow_csv(const FlowRecord& record, const std::string& path);

} // namespace jpu::path
