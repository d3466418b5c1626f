#pragma once

// Constrained refusal rectification: a three-term objective (refusal behavior
// on mined jailbreaks, hidden-state alignment to a safety anchor, utility
// preservation on retained data), the static unlearning baseline it is
// compared against, and the outer loop that alternates buffer mining, flow
// attribution, and masked updates until the buffer stops finding attacks.

#include <cstdint>
#include <string>
#include <vector>

#include "jpu/buffer.hpp"
#include "jpu/corpus.hpp"
#include "jpu/pathfinder.hpp"

namespace jpu::rect {

using lm::Token;
using lm::TokenSeq;

// Mean final-layer last-position hidden state over prompts the model refuses.
struct SafetyAnchor {
    std::vector<double> centroid;
    int sample_count = 0;         // prompts that went into the mean
    int frozen_at_iteration = 0;  // iteration the anchor was computed for
    bool fallback = false;        // set when fewer than 8 refusals were found
};

struct LossBundle {
    double refusal = 0.0; // mean refusal-target NLL over batch prompts
    double anchor = 0.0;  // mean cosine distance to the safety anchor
    double utility = 0.0; // mean NLL over the utility reference batch
    double beta = 0.0;
    double lambda = 0.0;
    double total = 0.0;   // refusal + beta * anchor + lambda * utility
};

// How the update mask is chosen each iteration. differential is the real
// method; random (equal cardinality) and snip (weight-times-gradient ranking
// of the refusal objective) are its ablation controls.
enum class MaskRule { differential, random, snip };

// evolve runs the buffer's mutate-and-filter step; frozen scores a static
// sample each iteration and never touches the buffer (the no-mining control).
enum class BufferRule { evolve, frozen };

struct TrainConfig {
    double eta = 0.05;
    double beta = 4.0;
    double lambda = 1.0;
    double p = 0.05;               // mask sparsity within the window
    path::Window window{3, 6};
    int max_iterations = 300;
    double convergence_target = 0.95; // sampled-buffer refusal rate
    int patience = 3;                 // consecutive iterations at target
    int utility_batch = 32;           // retained pairs drawn per iteration
    int anchor_sample = 16;           // bare harmful prompts drawn per iteration
    uint64_t seed = 1;
    MaskRule mask_rule = MaskRule::differential;
    BufferRule buffer_rule = BufferRule::evolve;

    bool operator==(const TrainConfig&) const = default;
};

// One line of the training stream. wall_ms is informational and stays out of
// the serialized form so identical configs produce identical streams.
struct IterationRecord {
    int iteration = 0;
    int parents = 0;
    int offspring = 0;
    double refusal_loss = 0.0;
    double anchor_loss = 0.0;
    double utility_loss = 0.0;
    double total = 0.0;
    long mask_size = 0;
    double buffer_refusal_rate = 0.0;
    bool skipped = false; // empty batch: utility-only step
    double wall_ms = 0.0;

    std::string to_line() const;
    static IterationRecord from_line(const std::string& line);
    bool operator==(const IterationRecord&) const = default;
};

struct TrainResult {
    std::vector<IterationRecord> records;
    bool converged = false;
    bool diverged = false;
    int iterations = 0; // iterations that ran (and were recorded)
};

// 1 - cosine similarity; zero norm on either side is a numeric error.
double cos_dist(const std::vector<double>& a, const std::vector<double>& b);

// d cos_dist(a, b) / d a with b held constant.
std::vector<double> cos_dist_grad(const std::vector<double>& a, const std::vector<double>& b);

// Centroid over the refused subset of `sample` (greedy next token == refuse);
// falls back to every prompt in the sample, with the flag set, when fewer
// than 8 refuse. Empty sample is a contract violation.
SafetyAnchor compute_safety_anchor(const lm::ModelState& model,
                                   const std::vector<const corpus::LabeledPair*>& sample,
                                   Token refuse, int iteration);

// Mean refusal-target NLL over the batch entries (parents then offspring).
double refusal_behavior_loss(const lm::ModelState& model, const buffer::OnPolicyBatch& batch,
                             const TokenSeq& y_ref);

// Mean cosine distance between each batch prompt's hidden state and the
// anchor centroid.
double anchor_alignment_loss(const lm::ModelState& model, const buffer::OnPolicyBatch& batch,
                             const SafetyAnchor& anchor);

// Batch prompts in loss order: parents then offspring.
std::vector<TokenSeq> batch_prompts(const buffer::OnPolicyBatch& batch);

struct TotalLoss {
    LossBundle bundle;
    lm::GradSet rect; // d(refusal + beta * anchor) / d theta
    lm::GradSet util; // d(utility) / d theta, unweighted
};

// The full objective and its two independently scoped gradient sets. With
// beta = 0 the anchor term is skipped entirely; with lambda = 0 the utility
// gradients are still produced (the update weights them).
TotalLoss total_loss(const lm::ModelState& model, const buffer::OnPolicyBatch& batch,
                     const SafetyAnchor& anchor,
                     const std::vector<const corpus::LabeledPair*>& utility_pairs,
                     double beta, double lambda, const TokenSeq& y_ref);

// Static unlearning objective: refusal-target NLL on bare harmful prompts
// plus lambda times retained-pair NLL, trained with full gradients.
double baseline_unlearn_loss(const lm::ModelState& model,
                             const std::vector<const corpus::LabeledPair*>& harmful,
                             const std::vector<const corpus::LabeledPair*>& utility,
                             double lambda, const TokenSeq& y_ref);

// Mines the buffer, attributes the surviving attacks, and applies masked
// updates until the sampled refusal rate holds at the target for `patience`
// consecutive iterations or max_iterations is hit. Non-finite losses abort
// the run and restore the last state whose losses were finite.
TrainResult train(lm::ModelState& model, const corpus::World& world, buffer::AttackBuffer& buf,
                  const TrainConfig& cfg);

// Comparator loop: plain SGD on the static objective for `iterations` steps
// (drawing 16 bare harmful prompts and a utility batch per step).
TrainResult train_baseline(lm::ModelState& model, const corpus::World& world,
                           const TrainConfig& cfg, int iterations);

} // namespace jpu::rect
