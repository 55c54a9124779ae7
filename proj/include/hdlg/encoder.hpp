#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "hdlg/config.hpp"
#include "hdlg/params.hpp"
#include "hdlg/tape.hpp"
#include "hdlg/tokenizer.hpp"

namespace hdlg {

// knobs threaded through every forward path
struct ForwardOpts {
    bool train = false;           // enables dropout
    Rng* rng = nullptr;           // required when train && dropout > 0
    std::vector<Var>* attn_probs = nullptr;  // optional probe: post-softmax attention rows
};

namespace enc {

inline std::vector<int> iota_ids(int n, int offset = 0) {
    std::vector<int> v(n);
    for (int i = 0; i < n; ++i) v[i] = offset + i;
    return v;
}

// mask convention: 1 = blocked (query row i may not attend to key j)
inline std::vector<uint8_t> causal_mask(int n) {
    std::vector<uint8_t> m(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m[static_cast<size_t>(i) * n + j] = 1;
    return m;
}

inline std::vector<uint8_t> blocked_key_mask(int n_q, const std::vector<uint8_t>& blocked_keys) {
    int n_k = static_cast<int>(blocked_keys.size());
    std::vector<uint8_t> m(static_cast<size_t>(n_q) * n_k, 0);
    for (int i = 0; i < n_q; ++i)
        for (int j = 0; j < n_k; ++j) m[static_cast<size_t>(i) * n_k + j] = blocked_keys[j];
    return m;
}

template <typename S>
Var dropout_maybe(Tape<S>& t, Var x, const EncoderConfig& c, const ForwardOpts& o) {
    if (!o.train || c.dropout <= 0.0) return x;
    if (!o.rng) throw std::runtime_error("train-mode forward requires an rng for dropout");
    return t.dropout(x, c.dropout, *o.rng, true);
}

template <typename S>
Var layer_norm_affine(Tape<S>& t, const ParameterStore<S>& P, const std::string& prefix, Var x) {
    Var n = t.layer_norm(x);
    return t.add(t.mul(n, t.param(P, prefix + ".g")), t.param(P, prefix + ".b"));
}

// multi-head scaled dot-product attention; queries_in and keys_in are already
// normalized by the caller
template <typename S>
Var attention(Tape<S>& t, const ParameterStore<S>& P, const std::string& prefix, Var queries_in,
              Var keys_in, const std::vector<uint8_t>* mask, int heads, int d_k, int d_v,
              const EncoderConfig& c, const ForwardOpts& o) {
    Var q = t.add(t.matmul(queries_in, t.param(P, prefix + ".wq")), t.param(P, prefix + ".bq"));
    Var k = t.add(t.matmul(keys_in, t.param(P, prefix + ".wk")), t.param(P, prefix + ".bk"));
    Var v = t.add(t.matmul(keys_in, t.param(P, prefix + ".wv")), t.param(P, prefix + ".bv"));
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d_k)));
    std::vector<Var> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Var qh = t.slice_cols(q, h * d_k, d_k);
        Var kh = t.slice_cols(k, h * d_k, d_k);
        Var vh = t.slice_cols(v, h * d_v, d_v);
        Var scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt);
        if (mask) scores = t.masked_fill(scores, *mask, -std::numeric_limits<S>::infinity());
        Var probs = t.softmax(scores);
        if (o.attn_probs) o.attn_probs->push_back(probs);
        probs = dropout_maybe(t, probs, c, o);
        head_outs.push_back(t.matmul(probs, vh));
    }
    Var merged = heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
    return t.add(t.matmul(merged, t.param(P, prefix + ".wo")), t.param(P, prefix + ".bo"));
}

template <typename S>
Var ffn(Tape<S>& t, const ParameterStore<S>& P, const std::string& prefix, Var x) {
    Var h = t.gelu(t.add(t.matmul(x, t.param(P, prefix + ".w1")), t.param(P, prefix + ".b1")));
    return t.add(t.matmul(h, t.param(P, prefix + ".w2")), t.param(P, prefix + ".b2"));
}

// pre-norm transformer block: x + att(ln1(x)), then x + ffn(ln2(x))
template <typename S>
Var encoder_layer(Tape<S>& t, const ParameterStore<S>& P, const std::string& prefix, Var x,
                  const std::vector<uint8_t>* mask, int heads, const EncoderConfig& c,
                  const ForwardOpts& o) {
    Var a = layer_norm_affine(t, P, prefix + ".ln1", x);
    Var att = attention(t, P, prefix + ".att", a, a, mask, heads, c.d_k, c.d_v, c, o);
    x = t.add(x, dropout_maybe(t, att, c, o));
    Var f = ffn(t, P, prefix + ".ffn", layer_norm_affine(t, P, prefix + ".ln2", x));
    return t.add(x, dropout_maybe(t, f, c, o));
}

template <typename S>
Var encoder_stack(Tape<S>& t, const ParameterStore<S>& P, const std::string& group, int n_layers,
                  Var x, const std::vector<uint8_t>* mask, int heads, const EncoderConfig& c,
                  const ForwardOpts& o) {
    for (int i = 0; i < n_layers; ++i)
        x = encoder_layer(t, P, group + ".l" + std::to_string(i), x, mask, heads, c, o);
    return layer_norm_affine(t, P, group + ".lnf", x);
}

}  // namespace enc

// ---- utterance encoder f_u --------------------------------------------------

template <typename S>
struct UttEncoding {
    Var token_acts;  // embedded input rows [len, d]; probe point for locality tests
    Var hiddens;     // [len, d]
    Var pooled;      // [1, d], CLS position
    int len = 0;
};

template <typename S>
UttEncoding<S> encode_utterance(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                                const TokenSeq& tokens, const ForwardOpts& o = {}) {
    int len = tokens.seq_len();
    std::vector<int> ids(tokens.ids.begin(), tokens.ids.begin() + len);
    Var tok = t.embedding_lookup(t.param(P, "emb.tok"), ids);
    Var pos = t.embedding_lookup(t.param(P, "emb.pos"), enc::iota_ids(len));
    Var x = t.add(tok, pos);
    UttEncoding<S> out;
    out.token_acts = x;
    out.len = len;
    x = enc::dropout_maybe(t, x, c, o);
    out.hiddens = enc::encoder_stack(t, P, "wu", c.n_utt_layers, x, nullptr, c.n_heads, c, o);
    out.pooled = t.slice_rows(out.hiddens, 0, 1);
    return out;
}

// ---- dialog encoder f_d -----------------------------------------------------

template <typename S>
struct DialogEncoding {
    Var states;  // [T, d]
    Var pooled;  // [1, d], last position
};

// utt_embs: exactly T pooled utterance embeddings. blocked: optional length-T
// key-visibility vector (1 = this slot may not be attended to).
template <typename S>
DialogEncoding<S> encode_dialog(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                                const std::vector<Var>& utt_embs,
                                const std::vector<uint8_t>* blocked = nullptr,
                                const ForwardOpts& o = {}) {
    int T = c.context_size;
    if (static_cast<int>(utt_embs.size()) != T)
        throw std::invalid_argument("encode_dialog: expected " + std::to_string(T) +
                                    " utterance embeddings, got " + std::to_string(utt_embs.size()));
    Var x = t.concat_rows(utt_embs);
    x = t.add(x, t.embedding_lookup(t.param(P, "emb.utt_pos"), enc::iota_ids(T)));
    x = enc::dropout_maybe(t, x, c, o);
    std::vector<uint8_t> mask;
    if (blocked) mask = enc::blocked_key_mask(T, *blocked);
    DialogEncoding<S> out;
    out.states = enc::encoder_stack(t, P, "sq", c.n_dlg_layers, x,
                                    blocked ? &mask : nullptr, c.n_heads, c, o);
    out.pooled = t.slice_rows(out.states, T - 1, 1);
    return out;
}

// ---- tied output head -------------------------------------------------------

template <typename S>
Var tied_logits(Tape<S>& t, const ParameterStore<S>& P, Var hiddens) {
    return t.add(t.matmul(hiddens, t.transpose(t.param(P, "emb.tok"))), t.param(P, "emb.out_bias"));
}

// ---- generation decoder T_dec ----------------------------------------------

template <typename S>
struct Generation {
    Var logits;                // [n, vocab]
    Var input_acts;            // embedded decoder inputs, probe point
    std::vector<int> targets;  // the n body tokens to predict
    bool empty() const { return targets.empty(); }
};

// Teacher-forced generation of `target` conditioned on dialog states. Inputs
// are [CLS, w1..w_{n-1}]; position i predicts w_{i+1}. The target slot's
// utterance-position embedding is added to every input row so the decoder
// knows which slot it is reconstructing.
template <typename S>
Generation<S> decode_generate(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                              Var states, const TokenSeq& target, int slot,
                              const ForwardOpts& o = {}) {
    Generation<S> gen;
    int n = target.body_len();
    if (n == 0) return gen;
    gen.targets.assign(target.ids.begin() + 1, target.ids.begin() + 1 + n);

    std::vector<int> inputs(n);
    inputs[0] = kClsId;
    for (int i = 1; i < n; ++i) inputs[i] = target.ids[i];  // w1..w_{n-1}

    Var x = t.add(t.embedding_lookup(t.param(P, "emb.tok"), inputs),
                  t.embedding_lookup(t.param(P, "emb.pos"), enc::iota_ids(n)));
    Var slot_emb = t.reshape(t.embedding_lookup(t.param(P, "emb.utt_pos"), {slot}),
                             Shape{c.d_model});
    x = t.add(x, slot_emb);
    gen.input_acts = x;
    x = enc::dropout_maybe(t, x, c, o);

    std::vector<uint8_t> causal = enc::causal_mask(n);
    for (int i = 0; i < c.n_dec_layers; ++i) {
        std::string prefix = "dec.l" + std::to_string(i);
        Var a = enc::layer_norm_affine(t, P, prefix + ".ln1", x);
        Var self = enc::attention(t, P, prefix + ".self", a, a, &causal, c.dec_heads, c.d_k, c.d_v,
                                  c, o);
        x = t.add(x, enc::dropout_maybe(t, self, c, o));
        Var b = enc::layer_norm_affine(t, P, prefix + ".ln2", x);
        Var cross = enc::attention(t, P, prefix + ".cross", b, states, nullptr, c.dec_heads, c.d_k,
                                   c.d_v, c, o);
        x = t.add(x, enc::dropout_maybe(t, cross, c, o));
        Var f = enc::ffn(t, P, prefix + ".ffn", enc::layer_norm_affine(t, P, prefix + ".ln3", x));
        x = t.add(x, enc::dropout_maybe(t, f, c, o));
    }
    x = enc::layer_norm_affine(t, P, "dec.lnf", x);
    gen.logits = tied_logits(t, P, x);
    return gen;
}

// ---- two-stream permutation encoding (utterance-level GAP) ------------------

template <typename S>
struct TwoStreamEncoding {
    Var token_acts;            // content-stream input rows, probe point
    Var query_out;             // [len, d] after final norm
    std::vector<int> body_positions;  // sequence index of rank 1..n
};

// rank 0 = specials (always visible context), rank k = k-th element of the
// factorization order. Content stream sees ranks <= own; query stream sees
// ranks strictly below own plus the specials.
template <typename S>
TwoStreamEncoding<S> encode_utterance_two_stream(Tape<S>& t, const ParameterStore<S>& P,
                                                 const EncoderConfig& c, const TokenSeq& tokens,
                                                 const std::vector<int>& order,
                                                 const ForwardOpts& o = {}) {
    int len = tokens.seq_len();
    int n = tokens.body_len();
    if (static_cast<int>(order.size()) != n)
        throw std::invalid_argument("two_stream: order length " + std::to_string(order.size()) +
                                    " vs body length " + std::to_string(n));
    std::vector<int> rank(len, 0);
    TwoStreamEncoding<S> ts;
    ts.body_positions.resize(n);
    for (int k = 0; k < n; ++k) {
        int seq_pos = 1 + order[k];  // body position -> sequence position
        rank[seq_pos] = k + 1;
        ts.body_positions[k] = seq_pos;
    }
    std::vector<uint8_t> m_content(static_cast<size_t>(len) * len, 0);
    std::vector<uint8_t> m_query(static_cast<size_t>(len) * len, 0);
    for (int i = 0; i < len; ++i)
        for (int j = 0; j < len; ++j) {
            m_content[static_cast<size_t>(i) * len + j] = rank[j] > rank[i] ? 1 : 0;
            m_query[static_cast<size_t>(i) * len + j] = rank[j] >= rank[i] && rank[j] > 0 ? 1 : 0;
        }

    std::vector<int> ids(tokens.ids.begin(), tokens.ids.begin() + len);
    Var pos = t.embedding_lookup(t.param(P, "emb.pos"), enc::iota_ids(len));
    Var h = t.add(t.embedding_lookup(t.param(P, "emb.tok"), ids), pos);
    ts.token_acts = h;
    h = enc::dropout_maybe(t, h, c, o);
    // query stream starts from the learned query vector plus position
    Var g = t.add(pos, t.param(P, "emb.gap_query"));
    g = enc::dropout_maybe(t, g, c, o);

    for (int i = 0; i < c.n_utt_layers; ++i) {
        std::string prefix = "wu.l" + std::to_string(i);
        Var hn = enc::layer_norm_affine(t, P, prefix + ".ln1", h);
        Var gn = enc::layer_norm_affine(t, P, prefix + ".ln1", g);
        Var h_att = enc::attention(t, P, prefix + ".att", hn, hn, &m_content, c.n_heads, c.d_k,
                                   c.d_v, c, o);
        Var g_att = enc::attention(t, P, prefix + ".att", gn, hn, &m_query, c.n_heads, c.d_k, c.d_v,
                                   c, o);
        h = t.add(h, enc::dropout_maybe(t, h_att, c, o));
        g = t.add(g, enc::dropout_maybe(t, g_att, c, o));
        Var hf = enc::ffn(t, P, prefix + ".ffn", enc::layer_norm_affine(t, P, prefix + ".ln2", h));
        Var gf = enc::ffn(t, P, prefix + ".ffn", enc::layer_norm_affine(t, P, prefix + ".ln2", g));
        h = t.add(h, enc::dropout_maybe(t, hf, c, o));
        g = t.add(g, enc::dropout_maybe(t, gf, c, o));
    }
    ts.query_out = enc::layer_norm_affine(t, P, "wu.lnf", g);
    return ts;
}

// ---- flat-concatenation baseline --------------------------------------------

template <typename S>
struct FlatEncoding {
    Var hiddens;      // [len, d]
    Var pooled;       // [1, d], CLS position
    Var utt_states;   // [T, d], hidden at each utterance's terminating SEP
};

template <typename S>
FlatEncoding<S> encode_flat_baseline(Tape<S>& t, const ParameterStore<S>& P,
                                     const EncoderConfig& c, const std::vector<TokenSeq>& context,
                                     const ForwardOpts& o = {}) {
    int T = c.context_size;
    if (static_cast<int>(context.size()) != T)
        throw std::invalid_argument("encode_flat_baseline: expected " + std::to_string(T) +
                                    " utterances, got " + std::to_string(context.size()));
    // bodies with per-utterance budgets; oldest utterances truncated first on overflow
    std::vector<std::vector<int>> bodies(T);
    long long total = 1;  // CLS
    for (int u = 0; u < T; ++u) {
        const TokenSeq& s = context[u];
        bodies[u].assign(s.ids.begin() + 1, s.ids.begin() + 1 + s.body_len());
        total += static_cast<long long>(bodies[u].size()) + 1;  // body + SEP
    }
    long long budget = static_cast<long long>(T) * c.max_utt_len;
    if (total > budget) {
        std::cerr << "encode_flat_baseline: context of " << total << " tokens exceeds budget "
                  << budget << ", truncating oldest utterances\n";
        for (int u = 0; u < T && total > budget; ++u)
            while (!bodies[u].empty() && total > budget) {
                bodies[u].pop_back();
                --total;
            }
    }
    std::vector<int> ids;
    std::vector<int> sep_positions(T);
    ids.push_back(kClsId);
    for (int u = 0; u < T; ++u) {
        ids.insert(ids.end(), bodies[u].begin(), bodies[u].end());
        sep_positions[u] = static_cast<int>(ids.size());
        ids.push_back(kSepId);
    }
    int len = static_cast<int>(ids.size());
    Var x = t.add(t.embedding_lookup(t.param(P, "emb.tok"), ids),
                  t.embedding_lookup(t.param(P, "flat.pos"), enc::iota_ids(len)));
    x = enc::dropout_maybe(t, x, c, o);
    FlatEncoding<S> out;
    out.hiddens = enc::encoder_stack(t, P, "flat", c.resolved_flat_layers(), x, nullptr, c.n_heads,
                                     c, o);
    out.pooled = t.slice_rows(out.hiddens, 0, 1);
    std::vector<Var> states;
    states.reserve(T);
    for (int u = 0; u < T; ++u) states.push_back(t.slice_rows(out.hiddens, sep_positions[u], 1));
    out.utt_states = t.concat_rows(states);
    return out;
}

// ---- hierarchical recurrent baseline -----------------------------------------

template <typename S>
Var gru_cell(Tape<S>& t, const ParameterStore<S>& P, const std::string& prefix, Var x, Var h,
             Var ones_row) {
    Var z = t.sigmoid(t.add(t.add(t.matmul(x, t.param(P, prefix + ".wz")),
                                  t.matmul(h, t.param(P, prefix + ".uz"))),
                            t.param(P, prefix + ".bz")));
    Var r = t.sigmoid(t.add(t.add(t.matmul(x, t.param(P, prefix + ".wr")),
                                  t.matmul(h, t.param(P, prefix + ".ur"))),
                            t.param(P, prefix + ".br")));
    Var n = t.tanh_(t.add(t.add(t.matmul(x, t.param(P, prefix + ".wn")),
                                t.mul(r, t.matmul(h, t.param(P, prefix + ".un")))),
                          t.param(P, prefix + ".bn")));
    // h' = z*h + (1-z)*n
    return t.add(t.mul(z, h), t.mul(t.sub(ones_row, z), n));
}

template <typename S>
DialogEncoding<S> encode_recurrent_baseline(Tape<S>& t, const ParameterStore<S>& P,
                                            const EncoderConfig& c,
                                            const std::vector<TokenSeq>& context,
                                            const ForwardOpts& o = {}) {
    int T = c.context_size;
    if (static_cast<int>(context.size()) != T)
        throw std::invalid_argument("encode_recurrent_baseline: expected " + std::to_string(T) +
                                    " utterances, got " + std::to_string(context.size()));
    Var ones_row = t.constant(Tensor<S>(Shape{1, c.d_model}, S(1)));
    Var zero_row = t.constant(Tensor<S>(Shape{1, c.d_model}, S(0)));
    std::vector<Var> utt_embs;
    utt_embs.reserve(T);
    for (const TokenSeq& seq : context) {
        int len = seq.seq_len();
        std::vector<int> ids(seq.ids.begin(), seq.ids.begin() + len);
        Var emb = t.embedding_lookup(t.param(P, "emb.tok"), ids);
        emb = enc::dropout_maybe(t, emb, c, o);
        Var hf = zero_row, hb = zero_row;
        for (int i = 0; i < len; ++i)
            hf = gru_cell(t, P, "hr.wf", t.slice_rows(emb, i, 1), hf, ones_row);
        for (int i = len - 1; i >= 0; --i)
            hb = gru_cell(t, P, "hr.wb", t.slice_rows(emb, i, 1), hb, ones_row);
        Var both = t.concat_cols({hf, hb});
        utt_embs.push_back(
            t.add(t.matmul(both, t.param(P, "hr.proj.w")), t.param(P, "hr.proj.b")));
    }
    Var h = zero_row;
    std::vector<Var> states;
    states.reserve(T);
    for (int u = 0; u < T; ++u) {
        h = gru_cell(t, P, "hr.ut", utt_embs[u], h, ones_row);
        states.push_back(h);
    }
    DialogEncoding<S> out;
    out.states = t.concat_rows(states);
    out.pooled = t.slice_rows(out.states, T - 1, 1);
    return out;
}

// ---- full-context convenience (used by fine-tuning / evaluation) ------------

template <typename S>
DialogEncoding<S> encode_context(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c,
                                 const std::vector<TokenSeq>& context, const ForwardOpts& o = {}) {
    switch (c.encoder_kind) {
        case EncoderKind::HIER: {
            std::vector<Var> embs;
            embs.reserve(context.size());
            for (const TokenSeq& seq : context)
                embs.push_back(encode_utterance(t, P, c, seq, o).pooled);
            return encode_dialog(t, P, c, embs, nullptr, o);
        }
        case EncoderKind::FLAT: {
            FlatEncoding<S> f = encode_flat_baseline(t, P, c, context, o);
            return DialogEncoding<S>{f.utt_states, f.pooled};
        }
        case EncoderKind::RECURRENT:
            return encode_recurrent_baseline(t, P, c, context, o);
    }
    throw std::logic_error("encode_context: unknown encoder kind");
}

}  // namespace hdlg
