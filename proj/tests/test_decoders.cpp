#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "hdlg/decoders.hpp"
#include "hdlg/training.hpp"

using namespace hdlg;
using test::random_tensor;

namespace {

// exhaustive path enumeration oracles, independent of the forward algorithm
double enumerate_log_z(const Tensor<double>& em, const Tensor<double>& trans,
                       const Tensor<double>& start, const Tensor<double>& end) {
    int T = em.shape[0], L = em.shape[1];
    std::vector<int> path(T, 0);
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> scores;
    for (;;) {
        double s = start.data[path[0]] + em.at(0, path[0]);
        for (int t = 1; t < T; ++t) s += trans.at(path[t - 1], path[t]) + em.at(t, path[t]);
        s += end.data[path[T - 1]];
        scores.push_back(s);
        mx = std::max(mx, s);
        int t = T - 1;
        while (t >= 0 && ++path[t] == L) path[t--] = 0;
        if (t < 0) break;
    }
    double z = 0;
    for (double s : scores) z += std::exp(s - mx);
    return mx + std::log(z);
}

std::pair<std::vector<int>, double> enumerate_best(const Tensor<double>& em,
                                                   const Tensor<double>& trans,
                                                   const Tensor<double>& start,
                                                   const Tensor<double>& end) {
    int T = em.shape[0], L = em.shape[1];
    std::vector<int> path(T, 0), best;
    double best_score = -std::numeric_limits<double>::infinity();
    for (;;) {
        double s = start.data[path[0]] + em.at(0, path[0]);
        for (int t = 1; t < T; ++t) s += trans.at(path[t - 1], path[t]) + em.at(t, path[t]);
        s += end.data[path[T - 1]];
        if (s > best_score) {
            best_score = s;
            best = path;
        }
        int t = T - 1;
        while (t >= 0 && ++path[t] == L) path[t--] = 0;
        if (t < 0) break;
    }
    return {best, best_score};
}

double gold_score(const Tensor<double>& em, const Tensor<double>& trans,
                  const Tensor<double>& start, const Tensor<double>& end,
                  const std::vector<int>& gold) {
    int T = em.shape[0];
    double s = start.data[gold[0]] + em.at(0, gold[0]);
    for (int t = 1; t < T; ++t) s += trans.at(gold[t - 1], gold[t]) + em.at(t, gold[t]);
    return s + end.data[gold[T - 1]];
}

double crf_nll_value(const Tensor<double>& em, const Tensor<double>& trans,
                     const Tensor<double>& start, const Tensor<double>& end,
                     const std::vector<int>& gold) {
    Tape<double> t;
    return t
        .val(t.crf_nll(t.constant(em), t.constant(trans), t.constant(start), t.constant(end),
                       gold))
        .item();
}

}  // namespace

TEST_CASE("crf loss matches exhaustive enumeration over (T,L) in 1..4 x 2..4") {
    Rng rng(41);
    for (int T = 1; T <= 4; ++T)
        for (int L = 2; L <= 4; ++L)
            for (int rep = 0; rep < 10; ++rep) {
                Tensor<double> em = random_tensor({T, L}, rng);
                Tensor<double> trans = random_tensor({L, L}, rng);
                Tensor<double> start = random_tensor({L}, rng);
                Tensor<double> end = random_tensor({L}, rng);
                std::vector<int> gold(T);
                for (int& g : gold) g = rng.uniform_int(L);
                double want = enumerate_log_z(em, trans, start, end) -
                              gold_score(em, trans, start, end, gold);
                double got = crf_nll_value(em, trans, start, end, gold);
                CHECK(std::abs(got - want) < 1e-8);
            }
}

TEST_CASE("crf distribution sums to one over all gold paths") {
    Rng rng(42);
    for (int rep = 0; rep < 5; ++rep) {
        int T = 3, L = 3;
        Tensor<double> em = random_tensor({T, L}, rng);
        Tensor<double> trans = random_tensor({L, L}, rng);
        Tensor<double> start = random_tensor({L}, rng);
        Tensor<double> end = random_tensor({L}, rng);
        double total = 0;
        std::vector<int> path(T, 0);
        for (;;) {
            total += std::exp(-crf_nll_value(em, trans, start, end, path));
            int t = T - 1;
            while (t >= 0 && ++path[t] == L) path[t--] = 0;
            if (t < 0) break;
        }
        CHECK(std::abs(total - 1.0) < 1e-8);
    }
}

TEST_CASE("crf with zero structure params reduces to per-step cross-entropy") {
    Rng rng(43);
    int T = 4, L = 3;
    Tensor<double> em = random_tensor({T, L}, rng);
    Tensor<double> zLL(Shape{L, L}), zL(Shape{L});
    std::vector<int> gold{2, 0, 1, 2};
    double want = 0;
    for (int t = 0; t < T; ++t) {
        double mx = em.at(t, 0);
        for (int j = 1; j < L; ++j) mx = std::max(mx, em.at(t, j));
        double z = 0;
        for (int j = 0; j < L; ++j) z += std::exp(em.at(t, j) - mx);
        want += std::log(z) + mx - em.at(t, gold[t]);
    }
    CHECK(crf_nll_value(em, zLL, zL, zL, gold) == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("crf with T=1 is softmax NLL over emissions plus start and end") {
    Rng rng(44);
    int L = 4;
    Tensor<double> em = random_tensor({1, L}, rng);
    Tensor<double> trans = random_tensor({L, L}, rng);
    Tensor<double> start = random_tensor({L}, rng);
    Tensor<double> end = random_tensor({L}, rng);
    std::vector<double> scores(L);
    for (int j = 0; j < L; ++j) scores[j] = em.at(0, j) + start.data[j] + end.data[j];
    double mx = *std::max_element(scores.begin(), scores.end());
    double z = 0;
    for (double s : scores) z += std::exp(s - mx);
    double want = std::log(z) + mx - scores[1];
    CHECK(crf_nll_value(em, trans, start, end, {1}) == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("viterbi equals brute-force argmax and its score bounds every path") {
    Rng rng(45);
    for (int T = 1; T <= 4; ++T)
        for (int L = 2; L <= 4; ++L)
            for (int rep = 0; rep < 10; ++rep) {
                Tensor<double> em = random_tensor({T, L}, rng);
                Tensor<double> trans = random_tensor({L, L}, rng);
                Tensor<double> start = random_tensor({L}, rng);
                Tensor<double> end = random_tensor({L}, rng);
                auto [best_path, best_score] = enumerate_best(em, trans, start, end);
                ViterbiResult v = crf_viterbi(em, trans, start, end);
                CHECK(v.path == best_path);
                CHECK(v.score == doctest::Approx(best_score).epsilon(1e-10));
            }
}

TEST_CASE("viterbi with zero transitions is per-step argmax; T=1 closed form") {
    Rng rng(46);
    int T = 5, L = 4;
    Tensor<double> em = random_tensor({T, L}, rng);
    Tensor<double> zLL(Shape{L, L}), zL(Shape{L});
    ViterbiResult v = crf_viterbi(em, zLL, zL, zL);
    for (int t = 0; t < T; ++t) {
        int arg = 0;
        for (int j = 1; j < L; ++j)
            if (em.at(t, j) > em.at(t, arg)) arg = j;
        CHECK(v.path[t] == arg);
    }
    Tensor<double> em1 = random_tensor({1, L}, rng);
    Tensor<double> start = random_tensor({L}, rng);
    Tensor<double> end = random_tensor({L}, rng);
    ViterbiResult v1 = crf_viterbi(em1, zLL, start, end);
    int arg = 0;
    for (int j = 1; j < L; ++j)
        if (em1.at(0, j) + start.data[j] + end.data[j] >
            em1.at(0, arg) + start.data[arg] + end.data[arg])
            arg = j;
    CHECK(v1.path[0] == arg);
}

TEST_CASE("viterbi breaks ties toward the lower label index") {
    Tensor<double> em(Shape{2, 2});  // all paths tie at score 0
    Tensor<double> zLL(Shape{2, 2}), zL(Shape{2});
    ViterbiResult v = crf_viterbi(em, zLL, zL, zL);
    CHECK(v.path == std::vector<int>{0, 0});
}

TEST_CASE("mlp head: fixed widths per config, zero weights mean uniform probabilities") {
    EncoderConfig c = EncoderConfig::mini();
    ParameterStore<double> P;
    attach_head(P, c, DecoderKind::MLP, 5, 1);
    CHECK(P.get("head.mlp.w1").shape == Shape{c.d_model, 64});
    // full-scale configs keep the (768, 348, 192) stack
    EncoderConfig tiny = EncoderConfig::tiny();
    ParameterStore<double> Pt;
    attach_head(Pt, tiny, DecoderKind::MLP, 5, 1);
    CHECK(Pt.get("head.mlp.w1").shape == Shape{768, 768});
    CHECK(Pt.get("head.mlp.w2").shape == Shape{768, 348});
    CHECK(Pt.get("head.mlp.w3").shape == Shape{348, 192});
    CHECK(Pt.get("head.mlp.out.w").shape == Shape{192, 5});

    for (auto& [name, tns] : P.tensors) std::fill(tns.data.begin(), tns.data.end(), 0.0);
    Rng rng(47);
    Tape<double> t;
    Var pooled = t.constant(random_tensor({1, c.d_model}, rng));
    Var probs = t.softmax(mlp_predict(t, P, pooled));
    for (double v : t.val(probs).data) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("mlp head is deterministic in eval mode") {
    EncoderConfig c = EncoderConfig::mini();
    ParameterStore<double> P;
    attach_head(P, c, DecoderKind::MLP, 5, 2);
    Rng rng(48);
    Tensor<double> pooled = random_tensor({1, c.d_model}, rng);
    auto run = [&]() {
        Tape<double> t;
        return t.val(mlp_predict(t, P, t.constant(pooled))).data;
    };
    CHECK(run() == run());
}

TEST_CASE("mlp probabilities are invariant to a constant shift of the output bias") {
    EncoderConfig c = EncoderConfig::mini();
    ParameterStore<double> P;
    attach_head(P, c, DecoderKind::MLP, 4, 3);
    Rng rng(49);
    Tensor<double> pooled = random_tensor({1, c.d_model}, rng);
    Tape<double> t;
    Tensor<double> before = t.val(t.softmax(mlp_predict(t, P, t.constant(pooled))));
    for (auto& v : P.get("head.mlp.out.b").data) v += 3.7;
    Tape<double> t2;
    Tensor<double> after = t2.val(t2.softmax(mlp_predict(t2, P, t2.constant(pooled))));
    for (size_t i = 0; i < before.data.size(); ++i)
        CHECK(before.data[i] == doctest::Approx(after.data[i]).epsilon(1e-9));
}

TEST_CASE("gru head: zero weights give identical logits at every step") {
    EncoderConfig c = EncoderConfig::mini();
    ParameterStore<double> P;
    attach_head(P, c, DecoderKind::GRU, 4, 5);
    for (auto& [name, tns] : P.tensors) std::fill(tns.data.begin(), tns.data.end(), 0.0);
    Rng rng(50);
    Tape<double> t;
    Var states = t.constant(random_tensor({c.context_size, c.d_model}, rng));
    Var logits = gru_decode(t, P, c, states, nullptr);
    const Tensor<double>& v = t.val(logits);
    CHECK(v.shape == Shape{c.context_size, 4});
    for (int i = 1; i < c.context_size; ++i)
        for (int j = 0; j < 4; ++j) CHECK(v.at(i, j) == v.at(0, j));
}

TEST_CASE("gru head rejects a teacher sequence of the wrong length") {
    EncoderConfig c = EncoderConfig::mini();
    ParameterStore<double> P;
    attach_head(P, c, DecoderKind::GRU, 4, 6);
    Rng rng(51);
    Tape<double> t;
    Var states = t.constant(random_tensor({c.context_size, c.d_model}, rng));
    std::vector<int> wrong{0, 1};
    CHECK_THROWS_AS(gru_decode(t, P, c, states, &wrong), std::invalid_argument);
}

TEST_CASE("gru teacher and greedy paths agree after overfitting one sequence") {
    EncoderConfig c = EncoderConfig::mini();
    c.d_model = 16;
    ParameterStore<float> P;
    attach_head(P, c, DecoderKind::GRU, 3, 7);
    Rng rng(52);
    Tensor<float> states = random_tensor({c.context_size, c.d_model}, rng).cast<float>();
    std::vector<int> gold{0, 2, 1, 1, 0};

    OptimState st;
    st.base_lr = 0.05;
    st.warmup_steps = 5;
    st.total_steps = 400;
    st.weight_decay = 0.0;
    for (int step = 1; step <= 400; ++step) {
        Tape<float> t;
        Var logits = gru_decode(t, P, c, t.constant(states), &gold);
        Var loss = t.sum(t.cross_entropy(logits, gold));
        auto [lv, grads] = t.forward_backward(loss, P);
        adamw_step(P, grads, st, lr_schedule(std::min<long long>(step, 400), st));
    }
    Tape<float> t;
    Var teacher = gru_decode(t, P, c, t.constant(states), &gold);
    Var greedy = gru_decode(t, P, c, t.constant(states), nullptr);
    const Tensor<float>&a = t.val(teacher), &b = t.val(greedy);
    for (int i = 0; i < c.context_size; ++i) {
        int pa = 0, pb = 0;
        for (int j = 1; j < 3; ++j) {
            if (a.at(i, j) > a.at(i, pa)) pa = j;
            if (b.at(i, j) > b.at(i, pb)) pb = j;
        }
        CHECK(pa == gold[i]);
        CHECK(pb == gold[i]);
    }
}

TEST_CASE("crf loss gradient flows through emissions and transitions") {
    EncoderConfig c = EncoderConfig::mini();
    ParameterStore<double> P;
    attach_head(P, c, DecoderKind::CRF, 3, 8);
    Rng rng(53);
    Tensor<double> states = random_tensor({c.context_size, c.d_model}, rng);
    std::vector<int> gold{0, 1, 2, 1, 0};
    Tape<double> t;
    Var em = crf_emissions(t, P, t.constant(states));
    Var loss = crf_loss(t, P, em, gold);
    auto [lv, grads] = t.forward_backward(loss, P);
    double wsum = 0, tsum = 0;
    for (double v : grads.at("head.crf.w").data) wsum += std::abs(v);
    for (double v : grads.at("head.crf.trans").data) tsum += std::abs(v);
    CHECK(wsum > 0);
    CHECK(tsum > 0);
}
