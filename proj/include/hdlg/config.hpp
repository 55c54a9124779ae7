#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace hdlg {

enum class SizeTag { TINY, SMALL, MINI };
enum class EncoderKind { HIER, FLAT, RECURRENT };
enum class LossKind { MLM, GAP };
enum class DecoderKind { MLP, GRU, CRF };

inline std::string to_string(SizeTag t) {
    switch (t) {
        case SizeTag::TINY: return "tiny";
        case SizeTag::SMALL: return "small";
        case SizeTag::MINI: return "mini";
    }
    return "?";
}
inline std::string to_string(EncoderKind k) {
    switch (k) {
        case EncoderKind::HIER: return "hier";
        case EncoderKind::FLAT: return "flat";
        case EncoderKind::RECURRENT: return "recurrent";
    }
    return "?";
}
inline std::string to_string(LossKind k) { return k == LossKind::MLM ? "mlm" : "gap"; }
inline std::string to_string(DecoderKind k) {
    switch (k) {
        case DecoderKind::MLP: return "mlp";
        case DecoderKind::GRU: return "gru";
        case DecoderKind::CRF: return "crf";
    }
    return "?";
}

struct EncoderConfig {
    int n_heads = 1;
    int n_utt_layers = 2;   // word-level transformer depth
    int n_dlg_layers = 2;   // dialog-level transformer depth
    int n_dec_layers = 2;   // generation decoder depth
    int d_model = 768;
    int d_inner = 768;
    int d_k = 64;
    int d_v = 64;
    int context_size = 5;   // utterances per context window
    int max_utt_len = 50;   // token budget per utterance, CLS/SEP included
    int vocab_size = 32000;
    int dec_heads = 6;
    int flat_layers = 0;    // 0 resolves to n_utt_layers + n_dlg_layers
    double dropout = 0.1;
    std::array<int, 3> mlp_widths = {768, 348, 192};
    SizeTag size_tag = SizeTag::TINY;
    EncoderKind encoder_kind = EncoderKind::HIER;

    int resolved_flat_layers() const {
        return flat_layers > 0 ? flat_layers : n_utt_layers + n_dlg_layers;
    }

    void validate() const {
        if (n_heads < 1 || d_model < 1 || d_k < 1 || d_v < 1 || d_inner < 1)
            throw std::invalid_argument("encoder config: dimensions must be positive");
        if (context_size < 1 || max_utt_len < 4)
            throw std::invalid_argument("encoder config: context_size >= 1, max_utt_len >= 4");
        if (vocab_size < 6) throw std::invalid_argument("encoder config: vocab too small");
    }

    static EncoderConfig tiny() {
        EncoderConfig c;
        c.size_tag = SizeTag::TINY;
        return c;
    }
    static EncoderConfig small() {
        EncoderConfig c;
        c.n_heads = 6;
        c.n_utt_layers = 4;
        c.n_dlg_layers = 4;
        c.n_dec_layers = 4;
        c.size_tag = SizeTag::SMALL;
        return c;
    }
    // desk-scale configuration exercised by the test suite
    static EncoderConfig mini() {
        EncoderConfig c;
        c.n_heads = 2;
        c.n_utt_layers = 2;
        c.n_dlg_layers = 2;
        c.n_dec_layers = 2;
        c.d_model = 32;
        c.d_inner = 64;
        c.d_k = 8;
        c.d_v = 8;
        c.max_utt_len = 16;
        c.vocab_size = 512;
        c.dec_heads = 2;
        c.mlp_widths = {64, 48, 32};
        c.size_tag = SizeTag::MINI;
        return c;
    }
    static EncoderConfig by_tag(SizeTag t) {
        switch (t) {
            case SizeTag::TINY: return tiny();
            case SizeTag::SMALL: return small();
            case SizeTag::MINI: return mini();
        }
        throw std::invalid_argument("unknown size tag");
    }
};

struct LossWeights {
    double lambda_u = 1.0;
    double lambda_d = 1.0;

    void validate() const {
        if (lambda_u < 0 || lambda_d < 0)
            throw std::invalid_argument("loss weights must be non-negative");
        if (lambda_u == 0 && lambda_d == 0)
            throw std::invalid_argument("loss weights must not both be zero");
    }
};

struct RunConfig {
    int batch_size = 64;
    double base_lr = 1e-4;
    int steps = 1000;
    int eval_every = 50;
    uint64_t seed = 0;
    LossKind loss = LossKind::MLM;
    LossWeights weights;
    double p_omega = 0.15;    // token mask proportion
    double p_context = 0.2;   // utterance mask proportion
    int mask_count = 0;       // explicit utterance mask count; 0 -> round(p_context * T)
    DecoderKind decoder = DecoderKind::MLP;
    int warmup_steps = 100;
    int total_steps = 0;      // 0 resolves to steps
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    double train_fraction = 1.0;

    int resolved_total_steps() const { return total_steps > 0 ? total_steps : steps; }

    void validate() const {
        if (batch_size < 1 || steps < 1 || eval_every < 1)
            throw std::invalid_argument("run config: counts must be positive");
        if (train_fraction <= 0 || train_fraction > 1)
            throw std::invalid_argument("run config: train_fraction must be in (0,1]");
        if (p_omega <= 0 || p_omega > 1)
            throw std::invalid_argument("run config: p_omega must be in (0,1]");
        weights.validate();
    }
};

}  // namespace hdlg
