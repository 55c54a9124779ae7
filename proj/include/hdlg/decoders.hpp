#pragma once

#include <limits>
#include <vector>

#include "hdlg/encoder.hpp"

namespace hdlg {

// ---- MLP head (single-label prediction from the pooled context) -------------

template <typename S>
Var mlp_predict(Tape<S>& t, const ParameterStore<S>& P, Var pooled, const ForwardOpts& o = {},
                const EncoderConfig* c = nullptr) {
    auto affine = [&](Var x, const char* w, const char* b) {
        return t.add(t.matmul(x, t.param(P, w)), t.param(P, b));
    };
    Var h = t.relu(affine(pooled, "head.mlp.w1", "head.mlp.b1"));
    if (c) h = enc::dropout_maybe(t, h, *c, o);
    h = t.relu(affine(h, "head.mlp.w2", "head.mlp.b2"));
    if (c) h = enc::dropout_maybe(t, h, *c, o);
    h = t.relu(affine(h, "head.mlp.w3", "head.mlp.b3"));
    return affine(h, "head.mlp.out.w", "head.mlp.out.b");
}

// ---- GRU head (left-to-right label decoding over per-utterance states) ------

// teacher != nullptr: gold previous labels are fed back (training);
// teacher == nullptr: the greedy argmax of the previous step is fed back.
template <typename S>
Var gru_decode(Tape<S>& t, const ParameterStore<S>& P, const EncoderConfig& c, Var states,
               const std::vector<int>* teacher, const ForwardOpts& o = {}) {
    int T = t.val(states).shape[0];
    int num_labels = t.val(t.param(P, "head.gru.out.w")).shape[1];
    if (teacher && static_cast<int>(teacher->size()) != T)
        throw std::invalid_argument("gru_decode: teacher sequence length " +
                                    std::to_string(teacher->size()) + " vs T=" + std::to_string(T));
    Var ones_row = t.constant(Tensor<S>(Shape{1, c.d_model}, S(1)));
    Var h = t.constant(Tensor<S>(Shape{1, c.d_model}, S(0)));
    int prev_label = num_labels;  // BOS row of the label embedding
    std::vector<Var> rows;
    rows.reserve(T);
    for (int step = 0; step < T; ++step) {
        Var lab = t.embedding_lookup(t.param(P, "head.gru.lab"), {prev_label});
        Var x = t.concat_cols({t.slice_rows(states, step, 1), lab});
        x = enc::dropout_maybe(t, x, c, o);
        h = gru_cell(t, P, "head.gru", x, h, ones_row);
        Var logits = t.add(t.matmul(h, t.param(P, "head.gru.out.w")), t.param(P, "head.gru.out.b"));
        rows.push_back(logits);
        if (teacher) {
            prev_label = (*teacher)[step];
        } else {
            const Tensor<S>& v = t.val(logits);
            int best = 0;
            for (int j = 1; j < num_labels; ++j)
                if (v.data[j] > v.data[best]) best = j;
            prev_label = best;
        }
    }
    return t.concat_rows(rows);
}

// ---- CRF head -----------------------------------------------------------------

template <typename S>
Var crf_emissions(Tape<S>& t, const ParameterStore<S>& P, Var states) {
    return t.add(t.matmul(states, t.param(P, "head.crf.w")), t.param(P, "head.crf.b"));
}

template <typename S>
Var crf_loss(Tape<S>& t, const ParameterStore<S>& P, Var emissions, const std::vector<int>& gold) {
    return t.crf_nll(emissions, t.param(P, "head.crf.trans"), t.param(P, "head.crf.start"),
                     t.param(P, "head.crf.end"), gold);
}

struct ViterbiResult {
    std::vector<int> path;
    double score = 0;
};

// max-product companion of crf_nll; ties break toward the lower label index
template <typename S>
ViterbiResult crf_viterbi(const Tensor<S>& emissions, const Tensor<S>& trans,
                          const Tensor<S>& start, const Tensor<S>& end) {
    int T = emissions.shape[0], L = emissions.shape[1];
    std::vector<double> score(L), next(L);
    std::vector<std::vector<int>> back(T, std::vector<int>(L, 0));
    for (int j = 0; j < L; ++j)
        score[j] = static_cast<double>(start.data[j]) + static_cast<double>(emissions.at(0, j));
    for (int step = 1; step < T; ++step) {
        for (int j = 0; j < L; ++j) {
            double best = -std::numeric_limits<double>::infinity();
            int arg = 0;
            for (int i = 0; i < L; ++i) {
                double cand = score[i] + static_cast<double>(trans.at(i, j));
                if (cand > best) {
                    best = cand;
                    arg = i;
                }
            }
            next[j] = best + static_cast<double>(emissions.at(step, j));
            back[step][j] = arg;
        }
        score = next;
    }
    ViterbiResult r;
    double best = -std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int j = 0; j < L; ++j) {
        double cand = score[j] + static_cast<double>(end.data[j]);
        if (cand > best) {
            best = cand;
            arg = j;
        }
    }
    r.score = best;
    r.path.assign(T, 0);
    r.path[T - 1] = arg;
    for (int step = T - 1; step > 0; --step) r.path[step - 1] = back[step][r.path[step]];
    return r;
}

template <typename S>
ViterbiResult crf_viterbi(const Tensor<S>& emissions, const ParameterStore<S>& P) {
    return crf_viterbi(emissions, P.get("head.crf.trans"), P.get("head.crf.start"),
                       P.get("head.crf.end"));
}

}  // namespace hdlg
