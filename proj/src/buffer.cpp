#include "jpu/buffer.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "tsv_util.hpp"

namespace jpu::buffer {

char mutation_kind_char(MutationRecord::Kind k) {
    switch (k) {
        case MutationRecord::Kind::substitute: return 's';
        case MutationRecord::Kind::insert: return 'i';
        case MutationRecord::Kind::erase: return 'd';
    }
    return '?';
}

MutationRecord::Kind mutation_kind_from_char(char c) {
    switch (c) {
        case 's': return MutationRecord::Kind::substitute;
        case 'i': return MutationRecord::Kind::insert;
        case 'd': return MutationRecord::Kind::erase;
        default: throw InputError(std::string("unknown mutation kind '") + c + "'");
    }
}

TokenSeq BufferEntry::prompt() const {
    TokenSeq out;
    out.reserve(prefix.size() + query.size() + suffix.size());
    out.insert(out.end(), prefix.begin(), prefix.end());
    out.insert(out.end(), query.begin(), query.end());
    out.insert(out.end(), suffix.begin(), suffix.end());
    return out;
}

AttackBuffer init_buffer(const corpus::World& world, const BufferConfig& cfg, uint64_t seed) {
    if (cfg.sample_size < 1 || cfg.offspring_per_parent < 1 || cfg.max_prompt_len < 4)
        throw ConfigError("bad buffer config");
    auto held = world.pairs(corpus::PairSet::harmful, corpus::Split::held);
    if (held.empty()) throw ConfigError("world has no held-out harmful queries");

    AttackBuffer b;
    b.seed = seed;
    b.vocab = world.vocab;
    b.cfg = cfg;
    Rng rng = Rng::derive(seed, "buffer-init");
    for (size_t i = 0; i < world.buffer_pool.size(); ++i) {
        const corpus::Template& t = world.buffer_pool[i];
        BufferEntry e;
        e.id = b.next_id++;
        e.template_id = t.id;
        e.attack_type = t.attack_type;
        e.prefix = t.prefix;
        e.suffix = t.suffix;
        e.query = held[i % held.size()]->prompt;
        if (e.attack_type == AttackType::B) rng.shuffle(e.query);
        if (int(e.prompt().size()) > cfg.max_prompt_len)
            throw ConfigError("seed prompt exceeds max_prompt_len");
        b.entries.push_back(std::move(e));
    }
    return b;
}

double refusal_loss(const lm::ModelState& model, const TokenSeq& prompt,
                    const corpus::Vocab& vocab) {
    return lm::nll_loss(model, prompt, vocab.refusal_target());
}

std::vector<int> filter_parents(const std::vector<ScoredEntry>& scored, double tau) {
    std::vector<int> out;
    for (const auto& s : scored)
        if (s.loss > tau) out.push_back(s.entry_id);
    return out;
}

namespace {

struct Range {
    int lo, hi;
};

std::vector<Range> mutation_alphabet(const corpus::Vocab& v, AttackType t) {
    switch (t) {
        case AttackType::A: return {{v.benign_lo, v.benign_hi}, {v.context_lo, v.context_hi}};
        case AttackType::B: return {{v.context_lo, v.context_hi}, {v.harm_lo, v.harm_hi}};
        case AttackType::C: return {{v.wrapper_lo[2], v.wrapper_hi[2]}};
    }
    return {};
}

Token draw_from(Rng& rng, const std::vector<Range>& ranges) {
    int total = 0;
    for (auto r : ranges) total += r.hi - r.lo;
    int k = int(rng.uniform_int(0, total - 1));
    for (auto r : ranges) {
        if (k < r.hi - r.lo) return Token(r.lo + k);
        k -= r.hi - r.lo;
    }
    return Token(ranges.back().hi - 1); // unreachable
}

struct Segment {
    TokenSeq* seq;
    int offset; // global position of the segment start in the assembled prompt
};

std::vector<Segment> mutation_region(BufferEntry& e, AttackType t) {
    int plen = int(e.prefix.size());
    int qlen = int(e.query.size());
    switch (t) {
        case AttackType::A: return {{&e.prefix, 0}, {&e.suffix, plen + qlen}};
        case AttackType::B: return {{&e.query, plen}};
        case AttackType::C: return {{&e.suffix, plen + qlen}};
    }
    return {};
}

bool has_harm(const corpus::Vocab& v, const BufferEntry& e) {
    for (Token t : e.query)
        if (v.is_harm(t)) return true;
    for (Token t : e.prefix)
        if (v.is_harm(t)) return true;
    for (Token t : e.suffix)
        if (v.is_harm(t)) return true;
    return false;
}

} // namespace

BufferEntry mutate(const BufferEntry& parent, const corpus::Vocab& vocab, const BufferConfig& cfg,
                   Rng& rng, int iteration) {
    auto alphabet = mutation_alphabet(vocab, parent.attack_type);
    const bool can_erase = parent.attack_type == AttackType::B;

    for (int attempt = 0; attempt < cfg.retry_cap; ++attempt) {
        BufferEntry off = parent;
        off.id = -1;
        off.parent_id = parent.id;
        off.parent_loss = parent.last_loss;
        off.last_loss = -1.0;
        off.cooldown = 0;
        off.unmutated = false;

        auto region = mutation_region(off, off.attack_type);
        int region_len = 0;
        for (const auto& s : region) region_len += int(s.seq->size());

        int n_ops = can_erase ? 3 : 2;
        auto kind = MutationRecord::Kind(rng.uniform_int(0, n_ops - 1));
        MutationRecord rec;
        rec.kind = kind;
        rec.iteration = iteration;

        if (kind == MutationRecord::Kind::substitute) {
            if (region_len == 0) continue;
            int flat = int(rng.uniform_int(0, region_len - 1));
            Segment seg = region[0];
            for (const auto& s : region) {
                if (flat < int(s.seq->size())) {
                    seg = s;
                    break;
                }
                flat -= int(s.seq->size());
            }
            Token old = (*seg.seq)[size_t(flat)];
            Token nt = draw_from(rng, alphabet);
            if (nt == old) continue; // no-op draw, retry
            (*seg.seq)[size_t(flat)] = nt;
            rec.pos = seg.offset + flat;
            rec.token = nt;
        } else if (kind == MutationRecord::Kind::insert) {
            if (int(off.prompt().size()) >= cfg.max_prompt_len) continue;
            const Segment& seg = region[size_t(rng.uniform_int(0, int64_t(region.size()) - 1))];
            int slot = int(rng.uniform_int(0, int64_t(seg.seq->size())));
            Token nt = draw_from(rng, alphabet);
            seg.seq->insert(seg.seq->begin() + slot, nt);
            rec.pos = seg.offset + slot;
            rec.token = nt;
        } else { // erase, query region only
            if (off.query.size() <= 1) continue;
            int slot = int(rng.uniform_int(0, int64_t(off.query.size()) - 1));
            rec.pos = int(off.prefix.size()) + slot;
            rec.token = off.query[size_t(slot)]; // records what was removed
            off.query.erase(off.query.begin() + slot);
        }

        if (!has_harm(vocab, off)) continue; // attack must stay on target
        off.history.push_back(rec);
        return off;
    }

    BufferEntry clone = parent;
    clone.id = -1;
    clone.parent_id = parent.id;
    clone.parent_loss = parent.last_loss;
    clone.last_loss = -1.0;
    clone.cooldown = 0;
    clone.unmutated = true;
    return clone;
}

OnPolicyBatch step_buffer(AttackBuffer& buffer, const lm::ModelState& model) {
    if (buffer.entries.empty()) throw ContractError("stepping an empty buffer");
    Rng rng = Rng::derive(buffer.seed, "buffer-step", uint64_t(buffer.iteration));

    for (auto& e : buffer.entries)
        if (e.cooldown > 0) --e.cooldown;

    // weighted sample without replacement; cooling entries weigh half
    size_t k = std::min(size_t(buffer.cfg.sample_size), buffer.entries.size());
    std::vector<char> taken(buffer.entries.size(), 0);
    std::vector<size_t> sampled;
    for (size_t draw = 0; draw < k; ++draw) {
        double total = 0.0;
        for (size_t i = 0; i < buffer.entries.size(); ++i)
            if (!taken[i]) total += buffer.entries[i].cooldown > 0 ? 0.5 : 1.0;
        double u = rng.next_double() * total;
        double acc = 0.0;
        size_t pick = buffer.entries.size();
        for (size_t i = 0; i < buffer.entries.size(); ++i) {
            if (taken[i]) continue;
            acc += buffer.entries[i].cooldown > 0 ? 0.5 : 1.0;
            if (u < acc) {
                pick = i;
                break;
            }
        }
        if (pick == buffer.entries.size()) { // float edge, take the last free slot
            for (size_t i = buffer.entries.size(); i-- > 0;)
                if (!taken[i]) {
                    pick = i;
                    break;
                }
        }
        taken[pick] = 1;
        sampled.push_back(pick);
    }

    OnPolicyBatch batch;
    batch.iteration = buffer.iteration;
    batch.scored = int(k);

    std::vector<int> sampled_ids;
    int refused = 0;
    for (size_t idx : sampled) {
        BufferEntry& e = buffer.entries[idx];
        e.last_loss = refusal_loss(model, e.prompt(), buffer.vocab);
        refused += e.last_loss <= buffer.cfg.tau;
        sampled_ids.push_back(e.id);
    }
    batch.refusal_rate = k ? double(refused) / double(k) : 1.0;

    auto find = [&](int id) -> BufferEntry* {
        for (auto& e : buffer.entries)
            if (e.id == id) return &e;
        return nullptr;
    };

    // resolve sampled provisionals: promote past the recorded parent loss
    // (evicting the weakest scored permanent of the same type) or drop
    std::set<int> removed;
    for (int id : sampled_ids) {
        BufferEntry* e = find(id);
        if (!e->provisional()) continue;
        if (e->last_loss > e->parent_loss) {
            e->parent_loss = -1.0;
            const BufferEntry* weakest = nullptr;
            for (const auto& c : buffer.entries) {
                if (c.id == id || c.provisional() || c.last_loss < 0.0 || removed.count(c.id))
                    continue;
                if (c.attack_type != e->attack_type) continue;
                if (!weakest || c.last_loss < weakest->last_loss) weakest = &c;
            }
            if (weakest) removed.insert(weakest->id);
        } else {
            removed.insert(id);
        }
    }
    if (!removed.empty())
        std::erase_if(buffer.entries, [&](const BufferEntry& e) { return removed.count(e.id) > 0; });

    for (int id : sampled_ids) {
        BufferEntry* e = find(id);
        if (!e) continue;
        if (e->last_loss > buffer.cfg.tau)
            batch.parents.push_back(*e);
        else
            e->cooldown = buffer.cfg.cooldown_steps;
    }

    for (const BufferEntry& parent : batch.parents) {
        for (int j = 0; j < buffer.cfg.offspring_per_parent; ++j) {
            BufferEntry off = mutate(parent, buffer.vocab, buffer.cfg, rng, buffer.iteration);
            off.id = buffer.next_id++;
            buffer.entries.push_back(off);
            batch.offspring.push_back(std::move(off));
        }
    }

    ++buffer.iteration;
    return batch;
}

void save_buffer(const AttackBuffer& b, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InputError("cannot open " + path + " for writing");
    f << "buffer\tseed=" << b.seed << "\tvocab=" << b.vocab.size << "\tnext_id=" << b.next_id
      << "\titeration=" << b.iteration << "\tsample=" << b.cfg.sample_size
      << "\ttau=" << tsv::fmt_g17(b.cfg.tau) << "\toffspring=" << b.cfg.offspring_per_parent
      << "\tcooldown=" << b.cfg.cooldown_steps << "\tretries=" << b.cfg.retry_cap
      << "\tmax_len=" << b.cfg.max_prompt_len << "\n";
    for (const auto& e : b.entries) {
        f << "entry\t" << e.id << "\t" << e.parent_id << "\t" << e.template_id << "\t"
          << corpus::attack_type_char(e.attack_type) << "\t" << e.cooldown << "\t"
          << int(e.unmutated) << "\t"
          << (e.last_loss < 0.0 ? "-" : tsv::fmt_g17(e.last_loss)) << "\t"
          << (e.parent_loss < 0.0 ? "-" : tsv::fmt_g17(e.parent_loss)) << "\t"
          << tsv::seq_str(e.prefix) << "\t" << tsv::seq_str(e.query) << "\t"
          << tsv::seq_str(e.suffix) << "\t";
        if (e.history.empty()) {
            f << "-";
        } else {
            for (size_t i = 0; i < e.history.size(); ++i) {
                const auto& m = e.history[i];
                if (i) f << ';';
                f << mutation_kind_char(m.kind) << ':' << m.pos << ':' << m.token << ':'
                  << m.iteration;
            }
        }
        f << "\n";
    }
    if (!f) throw InputError("write failed for " + path);
}

AttackBuffer load_buffer(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw InputError("empty buffer file");
    auto head = tsv::split_tabs(line);
    if (head.size() != 11 || head[0] != "buffer") throw InputError("bad buffer header");
    AttackBuffer b;
    b.seed = std::stoull(tsv::header_field(head[1], "seed"));
    b.vocab = corpus::Vocab::derive(std::stoi(tsv::header_field(head[2], "vocab")));
    b.next_id = std::stoi(tsv::header_field(head[3], "next_id"));
    b.iteration = std::stoi(tsv::header_field(head[4], "iteration"));
    b.cfg.sample_size = std::stoi(tsv::header_field(head[5], "sample"));
    b.cfg.tau = tsv::parse_double(tsv::header_field(head[6], "tau"));
    b.cfg.offspring_per_parent = std::stoi(tsv::header_field(head[7], "offspring"));
    b.cfg.cooldown_steps = std::stoi(tsv::header_field(head[8], "cooldown"));
    b.cfg.retry_cap = std::stoi(tsv::header_field(head[9], "retries"));
    b.cfg.max_prompt_len = std::stoi(tsv::header_field(head[10], "max_len"));

    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto fields = tsv::split_tabs(line);
        if (fields.size() != 13 || fields[0] != "entry")
            throw InputError("bad buffer entry line: " + line);
        BufferEntry e;
        e.id = std::stoi(fields[1]);
        e.parent_id = std::stoi(fields[2]);
        e.template_id = std::stoi(fields[3]);
        e.attack_type = corpus::attack_type_from_char(fields[4].empty() ? '?' : fields[4][0]);
        e.cooldown = std::stoi(fields[5]);
        e.unmutated = fields[6] == "1";
        e.last_loss = fields[7] == "-" ? -1.0 : tsv::parse_double(fields[7]);
        e.parent_loss = fields[8] == "-" ? -1.0 : tsv::parse_double(fields[8]);
        e.prefix = tsv::parse_seq(fields[9]);
        e.query = tsv::parse_seq(fields[10]);
        e.suffix = tsv::parse_seq(fields[11]);
        if (fields[12] != "-") {
            std::istringstream hs(fields[12]);
            std::string item;
            while (std::getline(hs, item, ';')) {
                MutationRecord m;
                char kind = 0;
                int pos = 0, tok = 0, iter = 0;
                if (std::sscanf(item.c_str(), "%c:%d:%d:%d", &kind, &pos, &tok, &iter) != 4)
                    throw InputError("bad history record '" + item + "'");
                m.kind = mutation_kind_from_char(kind);
                m.pos = pos;
                m.token = Token(tok);
                m.iteration = iter;
                e.history.push_back(m);
            }
        }
        b.entries.push_back(std::move(e));
    }
    return b;
}

} // namespace jpu::buffer
