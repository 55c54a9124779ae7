#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "hdlg/encoder.hpp"

namespace hdlg {

enum class MaskLevel { TOKEN, UTTERANCE };

struct MaskPlan {
    MaskLevel level = MaskLevel::TOKEN;
    std::vector<int> positions;  // sorted, distinct
    uint64_t rng_snapshot = 0;

    bool empty() const { return positions.empty(); }
};

struct PermutationPlan {
    MaskLevel level = MaskLevel::TOKEN;
    std::vector<int> order;  // permutation of 0..n-1

    int size() const { return static_cast<int>(order.size()); }
};

inline uint64_t rng_fingerprint(const Rng& rng) {
    Rng probe = rng;
    return probe.next_u64();
}

// sample k distinct entries of pool, ascending
inline std::vector<int> sample_without_replacement(std::vector<int> pool, int k, Rng& rng) {
    for (int i = 0; i < k; ++i) {
        int j = i + rng.uniform_int(static_cast<int>(pool.size()) - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    return pool;
}

inline PermutationPlan sample_permutation(int n, MaskLevel level, Rng& rng) {
    PermutationPlan plan;
    plan.level = level;
    plan.order.resize(n);
    for (int i = 0; i < n; ++i) plan.order[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(plan.order[i], plan.order[rng.uniform_int(i + 1)]);
    return plan;
}

// ---- corruption samplers -----------------------------------------------------

// k = max(1, round(p_omega * body_len)) body positions, sampled without
// replacement and replaced by MASK; CLS/SEP/PAD are never candidates
inline std::pair<TokenSeq, MaskPlan> corrupt_tokens(const TokenSeq& tokens, double p_omega,
                                                    Rng& rng) {
    if (p_omega <= 0.0 || p_omega > 1.0)
        throw std::invalid_argument("corrupt_tokens: p_omega must be in (0,1]");
    MaskPlan plan;
    plan.level = MaskLevel::TOKEN;
    plan.rng_snapshot = rng_fingerprint(rng);
    int body = tokens.body_len();
    if (body == 0) return {tokens, plan};  // nothing maskable
    std::vector<int> pool(body);
    for (int i = 0; i < body; ++i) pool[i] = i + 1;  // sequence positions of the body
    int k = std::max(1, static_cast<int>(std::lround(p_omega * body)));
    k = std::min(k, body);
    plan.positions = sample_without_replacement(std::move(pool), k, rng);
    TokenSeq corrupted = tokens;
    for (int p : plan.positions) corrupted.ids[p] = kMaskId;
    return {std::move(corrupted), std::move(plan)};
}

inline TokenSeq apply_token_mask(const TokenSeq& tokens, const std::vector<int>& positions) {
    TokenSeq corrupted = tokens;
    for (int p : positions) corrupted.ids[p] = kMaskId;
    return corrupted;
}

// `count` whole utterances replaced by the single-MASK utterance
inline std::pair<std::vector<TokenSeq>, MaskPlan> corrupt_utterances(
    const std::vector<TokenSeq>& context, int count, Rng& rng) {
    int T = static_cast<int>(context.size());
    if (count < 1 || count > T)
        throw std::invalid_argument("corrupt_utterances: count " + std::to_string(count) +
                                    " outside [1," + std::to_string(T) + "]");
    MaskPlan plan;
    plan.level = MaskLevel::UTTERANCE;
    plan.rng_snapshot = rng_fingerprint(rng);
    std::vector<int> pool(T);
    for (int i = 0; i < T; ++i) pool[i] = i;
    plan.positions = sample_without_replacement(std::move(pool), count, rng);
    std::vector<TokenSeq> corrupted = context;
    int max_len = context.empty() ? 4 : context[0].max_len();
    for (int p : plan.positions) corrupted[p] = mask_utterance_seq(max_len);
    return {std::move(corrupted), std::move(plan)};
}

inline int utterance_mask_count(double p_context, int T) {
    int c = static_cast<int>(std::lround(p_context * T));
    return std::max(1, std::min(c, T));
}

// ---- utterance-level MLM -----------------------------------------------------

// building block: encoder input is taken verbatim; targets are explicit. The
// canonical loss corrupts internally, this seam lets tests vary input and
// label sides independently.
template <typename S>
Var mlm_positions_nll(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                      const TokenSeq& encoder_input, const std::vector<int>& positions,
                      const std::vector<int>& target_ids, const ForwardOpts& o = {}) {
    if (positions.empty()) return t.scalar(S(0));
    UttEncoding<S> enc = encode_utterance(t, P, c, encoder_input, o);
    Var rows = t.embedding_lookup(enc.hiddens, positions);
    Var logits = tied_logits(t, P, rows);
    return t.sum(t.cross_entropy(logits, target_ids));
}

// sum of masked-position NLL for one utterance (Eq. mlm at token level)
template <typename S>
Var loss_mlm_utterance(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                       const TokenSeq& tokens, const MaskPlan& plan, const ForwardOpts& o = {}) {
    if (plan.level != MaskLevel::TOKEN)
        throw std::invalid_argument("loss_mlm_utterance: plan is not token-level");
    if (plan.empty()) return t.scalar(S(0));
    std::vector<int> targets;
    targets.reserve(plan.positions.size());
    for (int p : plan.positions) targets.push_back(tokens.ids[p]);
    return mlm_positions_nll(t, P, c, apply_token_mask(tokens, plan.positions), plan.positions,
                             targets, o);
}

// ---- dialog-level MLM ----------------------------------------------------------

// seam: encode `input_context` (already corrupted), generate the masked slots
// of `target_context`
template <typename S>
Var mlm_dialog_nll(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                   const std::vector<TokenSeq>& input_context,
                   const std::vector<TokenSeq>& target_context, const std::vector<int>& slots,
                   const ForwardOpts& o = {}) {
    if (slots.empty()) return t.scalar(S(0));
    std::vector<Var> embs;
    embs.reserve(input_context.size());
    for (const TokenSeq& seq : input_context) embs.push_back(encode_utterance(t, P, c, seq, o).pooled);
    DialogEncoding<S> dlg = encode_dialog(t, P, c, embs, nullptr, o);
    Var total = t.scalar(S(0));
    for (int slot : slots) {
        Generation<S> gen = decode_generate(t, P, c, dlg.states, target_context[slot], slot, o);
        if (gen.empty()) continue;
        total = t.add(total, t.sum(t.cross_entropy(gen.logits, gen.targets)));
    }
    return total;
}

template <typename S>
Var loss_mlm_dialog(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                    const std::vector<TokenSeq>& context, const MaskPlan& plan,
                    const ForwardOpts& o = {}) {
    if (plan.level != MaskLevel::UTTERANCE)
        throw std::invalid_argument("loss_mlm_dialog: plan is not utterance-level");
    if (plan.empty()) return t.scalar(S(0));
    std::vector<TokenSeq> corrupted = context;
    int max_len = context.empty() ? 4 : context[0].max_len();
    for (int p : plan.positions) corrupted[p] = mask_utterance_seq(max_len);
    return mlm_dialog_nll(t, P, c, corrupted, context, plan.positions, o);
}

// ---- utterance-level GAP -------------------------------------------------------

template <typename S>
struct GapUtteranceTerms {
    Var token_acts;           // content-stream inputs, probe point
    std::vector<Var> terms;   // NLL of rank-1..n predictions, each shape [1]
};

template <typename S>
GapUtteranceTerms<S> gap_utterance_terms(Tape<S>& t, const ParameterStore<S>& P,
                                         const EncoderConfig& c, const TokenSeq& tokens,
                                         const std::vector<int>& order,
                                         const ForwardOpts& o = {}) {
    GapUtteranceTerms<S> out;
    if (order.empty()) return out;
    TwoStreamEncoding<S> ts = encode_utterance_two_stream(t, P, c, tokens, order, o);
    out.token_acts = ts.token_acts;
    out.terms.reserve(order.size());
    for (size_t k = 0; k < order.size(); ++k) {
        int pos = ts.body_positions[k];
        Var row = t.embedding_lookup(ts.query_out, {pos});
        Var logits = tied_logits(t, P, row);
        out.terms.push_back(t.cross_entropy(logits, {tokens.ids[pos]}));
    }
    return out;
}

// sum over all positions of the permuted chain-rule NLL, one sampled
// factorization order per call
template <typename S>
Var loss_gap_utterance(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                       const TokenSeq& tokens, const PermutationPlan& plan,
                       const ForwardOpts& o = {}) {
    if (plan.level != MaskLevel::TOKEN)
        throw std::invalid_argument("loss_gap_utterance: plan is not token-level");
    if (plan.size() != tokens.body_len())
        throw std::invalid_argument("loss_gap_utterance: order length " +
                                    std::to_string(plan.size()) + " vs body " +
                                    std::to_string(tokens.body_len()));
    if (plan.size() == 0) return t.scalar(S(0));
    GapUtteranceTerms<S> g = gap_utterance_terms(t, P, c, tokens, plan.order, o);
    Var total = t.scalar(S(0));
    for (Var term : g.terms) total = t.add(total, t.sum(term));
    return total;
}

// ---- dialog-level GAP -----------------------------------------------------------

template <typename S>
struct GapDialogTerms {
    std::vector<Var> token_acts;  // per original slot, probe point
    std::vector<Var> terms;       // term t: NLL of generating utterance z_t
};

template <typename S>
GapDialogTerms<S> gap_dialog_terms(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                                   const std::vector<TokenSeq>& context,
                                   const std::vector<int>& order, const ForwardOpts& o = {}) {
    int T = c.context_size;
    if (static_cast<int>(order.size()) != T)
        throw std::invalid_argument("gap_dialog: order length " + std::to_string(order.size()) +
                                    " vs context size " + std::to_string(T));
    GapDialogTerms<S> out;
    // every real utterance and the shared placeholder go through f_u once
    std::vector<Var> real_embs(T);
    out.token_acts.resize(T);
    for (int s = 0; s < T; ++s) {
        UttEncoding<S> e = encode_utterance(t, P, c, context[s], o);
        real_embs[s] = e.pooled;
        out.token_acts[s] = e.token_acts;
    }
    int max_len = context.empty() ? 4 : context[0].max_len();
    Var placeholder = encode_utterance(t, P, c, mask_utterance_seq(max_len), o).pooled;

    std::vector<uint8_t> visible(T, 0);
    for (int step = 0; step < T; ++step) {
        int target_slot = order[step];
        std::vector<Var> embs(T);
        std::vector<uint8_t> blocked(T, 0);
        for (int s = 0; s < T; ++s) {
            embs[s] = visible[s] ? real_embs[s] : placeholder;
            blocked[s] = visible[s] ? 0 : 1;
        }
        DialogEncoding<S> dlg = encode_dialog(t, P, c, embs, &blocked, o);
        Generation<S> gen = decode_generate(t, P, c, dlg.states, context[target_slot], target_slot, o);
        out.terms.push_back(gen.empty() ? t.scalar(S(0))
                                        : t.sum(t.cross_entropy(gen.logits, gen.targets)));
        visible[target_slot] = 1;
    }
    return out;
}

template <typename S>
Var loss_gap_dialog(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                    const std::vector<TokenSeq>& context, const PermutationPlan& plan,
                    const ForwardOpts& o = {}) {
    if (plan.level != MaskLevel::UTTERANCE)
        throw std::invalid_argument("loss_gap_dialog: plan is not utterance-level");
    GapDialogTerms<S> g = gap_dialog_terms(t, P, c, context, plan.order, o);
    Var total = t.scalar(S(0));
    for (Var term : g.terms) total = t.add(total, term);
    return total;
}

// ---- batch losses and the multi-level combination ---------------------------------

using ContextBatch = std::vector<std::vector<TokenSeq>>;

struct ObjectiveOpts {
    LossKind kind = LossKind::MLM;
    double p_omega = 0.15;
    int utt_mask_count = 1;
    bool train = false;
};

// mean per utterance of the token-level loss over every utterance in the batch
template <typename S>
Var batch_loss_utterance(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                         const ContextBatch& batch, const ObjectiveOpts& oo, Rng& rng) {
    Var total = t.scalar(S(0));
    long long n_utts = 0;
    for (const auto& context : batch)
        for (const TokenSeq& tokens : context) {
            ++n_utts;
            ForwardOpts fo{oo.train, &rng, nullptr};
            if (oo.kind == LossKind::MLM) {
                auto [corrupted, plan] = corrupt_tokens(tokens, oo.p_omega, rng);
                (void)corrupted;
                total = t.add(total, loss_mlm_utterance(t, P, c, tokens, plan, fo));
            } else {
                PermutationPlan plan = sample_permutation(tokens.body_len(), MaskLevel::TOKEN, rng);
                total = t.add(total, loss_gap_utterance(t, P, c, tokens, plan, fo));
            }
        }
    if (n_utts == 0) return total;
    return t.scale(total, static_cast<S>(1.0 / n_utts));
}

// mean per context of the dialog-level loss
template <typename S>
Var batch_loss_dialog(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                      const ContextBatch& batch, const ObjectiveOpts& oo, Rng& rng) {
    Var total = t.scalar(S(0));
    for (const auto& context : batch) {
        ForwardOpts fo{oo.train, &rng, nullptr};
        if (oo.kind == LossKind::MLM) {
            auto [corrupted, plan] = corrupt_utterances(context, oo.utt_mask_count, rng);
            (void)corrupted;
            total = t.add(total, loss_mlm_dialog(t, P, c, context, plan, fo));
        } else {
            PermutationPlan plan =
                sample_permutation(static_cast<int>(context.size()), MaskLevel::UTTERANCE, rng);
            total = t.add(total, loss_gap_dialog(t, P, c, context, plan, fo));
        }
    }
    if (batch.empty()) return total;
    return t.scale(total, static_cast<S>(1.0 / batch.size()));
}

inline Rng level_rng(uint64_t step_seed, MaskLevel level) {
    return Rng(splitmix64(step_seed ^ (level == MaskLevel::TOKEN ? 0x755f6c6576656cULL
                                                                 : 0x645f6c6576656cULL)));
}

// lambda_u * L_u + lambda_d * L_d on the same batch, with independent
// corruption streams per level derived from step_seed
template <typename S>
Var loss_hierarchical(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                      const ContextBatch& batch, const LossWeights& w, const ObjectiveOpts& oo,
                      uint64_t step_seed) {
    w.validate();
    Var lu, ld;
    if (w.lambda_u != 0) {
        Rng rng = level_rng(step_seed, MaskLevel::TOKEN);
        lu = t.scale(batch_loss_utterance(t, P, c, batch, oo, rng), static_cast<S>(w.lambda_u));
    }
    if (w.lambda_d != 0) {
        Rng rng = level_rng(step_seed, MaskLevel::UTTERANCE);
        ld = t.scale(batch_loss_dialog(t, P, c, batch, oo, rng), static_cast<S>(w.lambda_d));
    }
    if (lu.valid() && ld.valid()) return t.add(lu, ld);
    return lu.valid() ? lu : ld;
}

}  // namespace hdlg
