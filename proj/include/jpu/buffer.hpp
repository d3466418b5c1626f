#pragma once

#include <string>
#include <vector>

#include "jpu/corpus.hpp"
#include "jpu/model.hpp"
#include "jpu/rng.hpp"

namespace jpu::buffer {

using corpus::AttackType;
using lm::Token;
using lm::TokenSeq;

// One applied edit, kept so every live prompt can be traced back to the
// template + query it started from.
struct MutationRecord {
    enum class Kind { substitute, insert, erase };
    Kind kind = Kind::substitute;
    int pos = 0; // global position in the assembled prompt at mutation time
    Token token = 0;
    int iteration = 0;

    bool operator==(const MutationRecord&) const = default;
};

char mutation_kind_char(MutationRecord::Kind k);
MutationRecord::Kind mutation_kind_from_char(char c);

// A candidate jailbreak prompt. Stored as prefix/query/suffix segments so the
// per-type mutation regions stay well defined as edits accumulate; the model
// only ever sees the assembled prompt.
struct BufferEntry {
    int id = -1;
    int parent_id = -1; // -1 for the seeded population
    int template_id = -1;
    AttackType attack_type = AttackType::A;
    TokenSeq prefix;
    TokenSeq query;
    TokenSeq suffix;
    std::vector<MutationRecord> history;
    double last_loss = -1.0;   // refusal loss at most recent scoring; < 0 = unscored
    double parent_loss = -1.0; // >= 0 while provisional (offspring awaiting promotion)
    int cooldown = 0;
    bool unmutated = false; // mutation retry cap hit; kept as a flagged clone

    bool provisional() const { return parent_loss >= 0.0; }
    TokenSeq prompt() const;

    bool operator==(const BufferEntry&) const = default;
};

struct BufferConfig {
    int sample_size = 32;         // entries scored per step
    double tau = 0.5;             // parent threshold on refusal loss, strict >
    int offspring_per_parent = 2;
    int cooldown_steps = 5;       // sampling weight 0.5 while cooling down
    int retry_cap = 8;            // mutation attempts before keeping a flagged clone
    int max_prompt_len = 62;      // leaves room for the refusal target

    bool operator==(const BufferConfig&) const = default;
};

struct AttackBuffer {
    uint64_t seed = 0;
    int next_id = 0;
    int iteration = 0; // completed steps
    corpus::Vocab vocab;
    BufferConfig cfg;
    std::vector<BufferEntry> entries;

    bool operator==(const AttackBuffer&) const = default;
};

// What one buffer step hands the unlearning update: refused-threshold parents
// and their freshly appended provisional offspring, copied at scoring time.
struct OnPolicyBatch {
    int iteration = 0;
    int scored = 0;
    double refusal_rate = 1.0; // fraction of the scored sample with loss <= tau
    std::vector<BufferEntry> parents;
    std::vector<BufferEntry> offspring;

    bool empty() const { return parents.empty() && offspring.empty(); }
};

// Seeds one entry per buffer-pool template, wrapping held-out harmful queries
// round robin. Query-mutation templates shuffle their query at instantiation.
AttackBuffer init_buffer(const corpus::World& world, const BufferConfig& cfg, uint64_t seed);

// NLL of the refusal target given the prompt, under the current model.
double refusal_loss(const lm::ModelState& model, const TokenSeq& prompt,
                    const corpus::Vocab& vocab);

struct ScoredEntry {
    int entry_id = -1;
    double loss = 0.0;
};

// Strictly-greater threshold filter; ties at tau are refusals.
std::vector<int> filter_parents(const std::vector<ScoredEntry>& scored, double tau);

// One edit in the entry's type-specific region and alphabet. Keeps at least
// one harmful token in the prompt; after retry_cap failed attempts returns a
// clone flagged unmutated. The offspring id is left unassigned.
BufferEntry mutate(const BufferEntry& parent, const corpus::Vocab& vocab, const BufferConfig& cfg,
                   Rng& rng, int iteration);

// One evolutionary step against the current model: decrement cooldowns,
// weighted-sample without replacement, score, resolve provisionals (promote
// over the recorded parent loss or drop; promotion evicts the weakest scored
// permanent entry of the same attack type when one exists), pick parents,
// cool down refused entries, append offspring.
OnPolicyBatch step_buffer(AttackBuffer& buffer, const lm::ModelState& model);

void save_buffer(const AttackBuffer& b, const std::string& path);
AttackBuffer load_buffer(const std::string& path);

} // namespace jpu::buffer
