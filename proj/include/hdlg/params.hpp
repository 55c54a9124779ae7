#pragma once

#include <string>

#include "hdlg/config.hpp"
#include "hdlg/rng.hpp"
#include "hdlg/tape.hpp"

namespace hdlg {

// Parameter name prefixes:
//   emb.*   token/position/utterance-position embeddings, tied output bias
//   wu.*    word-level (utterance) transformer f_u
//   sq.*    sequence-level (dialog) transformer f_d
//   dec.*   generation decoder
//   flat.*  flat-concatenation baseline layers + its positions
//   hr.*    hierarchical recurrent baseline
//   head.*  fine-tuning decoder head
struct ParamBreakdown {
    long long embeddings = 0;
    long long word_level = 0;
    long long sequence_level = 0;
    long long total = 0;  // embeddings + word + sequence (encoder accounting)
    long long full = 0;   // every tensor in the store
};

namespace detail {

template <typename S>
void init_weight(Tensor<S>& t, Rng& rng) {
    for (auto& v : t.data) v = static_cast<S>(rng.truncated_normal(0.02));
}

template <typename S>
void add_weight(ParameterStore<S>& p, const std::string& name, Shape shape, Rng& rng) {
    init_weight(p.add(name, std::move(shape)), rng);
}

template <typename S>
void add_zeros(ParameterStore<S>& p, const std::string& name, Shape shape) {
    p.add(name, std::move(shape));
}

template <typename S>
void add_ones(ParameterStore<S>& p, const std::string& name, Shape shape) {
    auto& t = p.add(name, std::move(shape));
    std::fill(t.data.begin(), t.data.end(), S(1));
}

template <typename S>
void add_attention(ParameterStore<S>& p, const std::string& prefix, int d_model, int heads, int d_k,
                   int d_v, Rng& rng) {
    add_weight(p, prefix + ".wq", {d_model, heads * d_k}, rng);
    add_zeros<S>(p, prefix + ".bq", {heads * d_k});
    add_weight(p, prefix + ".wk", {d_model, heads * d_k}, rng);
    add_zeros<S>(p, prefix + ".bk", {heads * d_k});
    add_weight(p, prefix + ".wv", {d_model, heads * d_v}, rng);
    add_zeros<S>(p, prefix + ".bv", {heads * d_v});
    add_weight(p, prefix + ".wo", {heads * d_v, d_model}, rng);
    add_zeros<S>(p, prefix + ".bo", {d_model});
}

template <typename S>
void add_layer_norm(ParameterStore<S>& p, const std::string& prefix, int d_model) {
    add_ones<S>(p, prefix + ".g", {d_model});
    add_zeros<S>(p, prefix + ".b", {d_model});
}

template <typename S>
void add_ffn(ParameterStore<S>& p, const std::string& prefix, int d_model, int d_inner, Rng& rng) {
    add_weight(p, prefix + ".w1", {d_model, d_inner}, rng);
    add_zeros<S>(p, prefix + ".b1", {d_inner});
    add_weight(p, prefix + ".w2", {d_inner, d_model}, rng);
    add_zeros<S>(p, prefix + ".b2", {d_model});
}

template <typename S>
void add_encoder_layer(ParameterStore<S>& p, const std::string& prefix, const EncoderConfig& c,
                       int heads, Rng& rng) {
    add_layer_norm<S>(p, prefix + ".ln1", c.d_model);
    add_attention(p, prefix + ".att", c.d_model, heads, c.d_k, c.d_v, rng);
    add_layer_norm<S>(p, prefix + ".ln2", c.d_model);
    add_ffn(p, prefix + ".ffn", c.d_model, c.d_inner, rng);
}

template <typename S>
void add_gru(ParameterStore<S>& p, const std::string& prefix, int d_in, int d_hidden, Rng& rng) {
    for (const char* gate : {"z", "r", "n"}) {
        add_weight(p, prefix + ".w" + gate, {d_in, d_hidden}, rng);
        add_weight(p, prefix + ".u" + gate, {d_hidden, d_hidden}, rng);
        add_zeros<S>(p, prefix + ".b" + gate, {d_hidden});
    }
}

}  // namespace detail

// Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains;
// deterministic given seed.
template <typename S>
ParameterStore<S> build_model(const EncoderConfig& c, uint64_t seed) {
    c.validate();
    Rng rng(seed);
    ParameterStore<S> p;
    using namespace detail;

    add_weight(p, "emb.tok", {c.vocab_size, c.d_model}, rng);
    if (c.encoder_kind == EncoderKind::HIER) {
        add_weight(p, "emb.pos", {c.max_utt_len, c.d_model}, rng);
        add_weight(p, "emb.utt_pos", {c.context_size, c.d_model}, rng);
        add_zeros<S>(p, "emb.out_bias", {c.vocab_size});
        add_weight(p, "emb.gap_query", {c.d_model}, rng);
        for (int i = 0; i < c.n_utt_layers; ++i)
            add_encoder_layer(p, "wu.l" + std::to_string(i), c, c.n_heads, rng);
        add_layer_norm<S>(p, "wu.lnf", c.d_model);
        for (int i = 0; i < c.n_dlg_layers; ++i)
            add_encoder_layer(p, "sq.l" + std::to_string(i), c, c.n_heads, rng);
        add_layer_norm<S>(p, "sq.lnf", c.d_model);
        for (int i = 0; i < c.n_dec_layers; ++i) {
            std::string prefix = "dec.l" + std::to_string(i);
            add_layer_norm<S>(p, prefix + ".ln1", c.d_model);
            add_attention(p, prefix + ".self", c.d_model, c.dec_heads, c.d_k, c.d_v, rng);
            add_layer_norm<S>(p, prefix + ".ln2", c.d_model);
            add_attention(p, prefix + ".cross", c.d_model, c.dec_heads, c.d_k, c.d_v, rng);
            add_layer_norm<S>(p, prefix + ".ln3", c.d_model);
            add_ffn(p, prefix + ".ffn", c.d_model, c.d_inner, rng);
        }
        add_layer_norm<S>(p, "dec.lnf", c.d_model);
    } else if (c.encoder_kind == EncoderKind::FLAT) {
        add_weight(p, "flat.pos", {c.context_size * c.max_utt_len, c.d_model}, rng);
        for (int i = 0; i < c.resolved_flat_layers(); ++i)
            add_encoder_layer(p, "flat.l" + std::to_string(i), c, c.n_heads, rng);
        add_layer_norm<S>(p, "flat.lnf", c.d_model);
    } else {
        add_gru(p, "hr.wf", c.d_model, c.d_model, rng);  // word level, forward
        add_gru(p, "hr.wb", c.d_model, c.d_model, rng);  // word level, backward
        add_weight(p, "hr.proj.w", {2 * c.d_model, c.d_model}, rng);
        add_zeros<S>(p, "hr.proj.b", {c.d_model});
        add_gru(p, "hr.ut", c.d_model, c.d_model, rng);  // utterance level
    }
    return p;
}

// Fresh decoder-head parameters for fine-tuning.
template <typename S>
void attach_head(ParameterStore<S>& p, const EncoderConfig& c, DecoderKind kind, int num_labels,
                 uint64_t seed) {
    if (num_labels < 1) throw std::invalid_argument("attach_head: num_labels must be >= 1");
    Rng rng(splitmix64(seed ^ 0x68656164ULL));
    using namespace detail;
    switch (kind) {
        case DecoderKind::MLP: {
            const auto& w = c.mlp_widths;
            add_weight(p, "head.mlp.w1", {c.d_model, w[0]}, rng);
            add_zeros<S>(p, "head.mlp.b1", {w[0]});
            add_weight(p, "head.mlp.w2", {w[0], w[1]}, rng);
            add_zeros<S>(p, "head.mlp.b2", {w[1]});
            add_weight(p, "head.mlp.w3", {w[1], w[2]}, rng);
            add_zeros<S>(p, "head.mlp.b3", {w[2]});
            add_weight(p, "head.mlp.out.w", {w[2], num_labels}, rng);
            add_zeros<S>(p, "head.mlp.out.b", {num_labels});
            break;
        }
        case DecoderKind::GRU: {
            add_weight(p, "head.gru.lab", {num_labels + 1, c.d_model}, rng);  // last row: BOS
            add_gru(p, "head.gru", 2 * c.d_model, c.d_model, rng);
            add_weight(p, "head.gru.out.w", {c.d_model, num_labels}, rng);
            add_zeros<S>(p, "head.gru.out.b", {num_labels});
            break;
        }
        case DecoderKind::CRF: {
            add_weight(p, "head.crf.w", {c.d_model, num_labels}, rng);
            add_zeros<S>(p, "head.crf.b", {num_labels});
            add_zeros<S>(p, "head.crf.trans", {num_labels, num_labels});
            add_zeros<S>(p, "head.crf.start", {num_labels});
            add_zeros<S>(p, "head.crf.end", {num_labels});
            break;
        }
    }
}

template <typename S>
ParamBreakdown parameter_count(const ParameterStore<S>& p) {
    ParamBreakdown b;
    auto starts_with = [](const std::string& s, const char* pre) { return s.rfind(pre, 0) == 0; };
    for (auto& [name, t] : p.tensors) {
        long long n = t.size();
        b.full += n;
        if (starts_with(name, "emb.") || name == "flat.pos")
            b.embeddings += n;
        else if (starts_with(name, "wu.") || starts_with(name, "flat.") ||
                 starts_with(name, "hr.w") || starts_with(name, "hr.proj"))
            b.word_level += n;
        else if (starts_with(name, "sq.") || starts_with(name, "hr.ut"))
            b.sequence_level += n;
    }
    b.total = b.embeddings + b.word_level + b.sequence_level;
    return b;
}

}  // namespace hdlg
