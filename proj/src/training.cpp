#include "hdlg/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "hdlg/decoders.hpp"

namespace hdlg {

// ---- optimizer ----------------------------------------------------------------

double lr_schedule(long long step, const OptimState& st) {
    if (step < 0 || step > st.total_steps)
        throw std::invalid_argument("lr_schedule: step " + std::to_string(step) +
                                    " outside [0," + std::to_string(st.total_steps) + "]");
    if (step < st.warmup_steps)
        return st.base_lr * static_cast<double>(step) / st.warmup_steps;
    if (st.total_steps <= st.warmup_steps) return st.base_lr;
    return st.base_lr * static_cast<double>(st.total_steps - step) /
           (st.total_steps - st.warmup_steps);
}

void adamw_step(ParameterStore<float>& params, const GradMap<float>& grads, OptimState& st,
                double lr) {
    ++st.step;
    double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (auto& [name, p] : params.tensors) {
        auto git = grads.find(name);
        if (git == grads.end()) throw std::runtime_error("adamw_step: no gradient for " + name);
        const Tensor<float>& g = git->second;
        if (g.has_nan()) throw std::runtime_error("adamw_step: NaN gradient in parameter " + name);
        auto& m = st.m.try_emplace(name, Tensor<float>::zeros(p.shape)).first->second;
        auto& v = st.v.try_emplace(name, Tensor<float>::zeros(p.shape)).first->second;
        bool decay = p.rank() >= 2;  // biases and layer-norm vectors excluded
        for (size_t i = 0; i < p.data.size(); ++i) {
            double gi = g.data[i];
            m.data[i] = static_cast<float>(st.beta1 * m.data[i] + (1.0 - st.beta1) * gi);
            v.data[i] = static_cast<float>(st.beta2 * v.data[i] + (1.0 - st.beta2) * gi * gi);
            double mhat = m.data[i] / bc1;
            double vhat = v.data[i] / bc2;
            double upd = lr * mhat / (std::sqrt(vhat) + st.eps);
            if (decay) upd += lr * st.weight_decay * p.data[i];
            p.data[i] = static_cast<float>(p.data[i] - upd);
        }
    }
}

double clip_global_norm(GradMap<float>& grads, double max_norm) {
    double sq = 0;
    for (auto& [name, g] : grads)
        for (float x : g.data) sq += static_cast<double>(x) * x;
    double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        float s = static_cast<float>(max_norm / norm);
        for (auto& [name, g] : grads)
            for (float& x : g.data) x *= s;
    }
    return norm;
}

// ---- data plumbing ----------------------------------------------------------------

CorpusSplits split_corpus(const std::vector<Conversation>& convs, double val_fraction,
                          double test_fraction, uint64_t seed) {
    if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1.0)
        throw std::invalid_argument("split_corpus: fractions must be >= 0 and sum below 1");
    std::vector<int> idx(convs.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    Rng rng(splitmix64(seed ^ 0x73706c6974ULL));
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
        std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
    int n = static_cast<int>(convs.size());
    int n_test = static_cast<int>(std::lround(test_fraction * n));
    int n_val = static_cast<int>(std::lround(val_fraction * n));
    if (test_fraction > 0 && n_test == 0 && n > 2) n_test = 1;
    if (val_fraction > 0 && n_val == 0 && n > 2) n_val = 1;
    CorpusSplits s;
    for (int i = 0; i < n; ++i) {
        const Conversation& c = convs[idx[i]];
        if (i < n_test)
            s.test.push_back(c);
        else if (i < n_test + n_val)
            s.val.push_back(c);
        else
            s.train.push_back(c);
    }
    return s;
}

uint64_t split_hash(const std::vector<Conversation>& convs) {
    uint64_t h = 1469598103934665603ULL;  // FNV-1a
    auto mix = [&](const void* data, size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& c : convs) {
        mix(c.source_id.data(), c.source_id.size());
        int n = c.size();
        mix(&n, sizeof(n));
        for (const auto& u : c.utterances) mix(u.text.data(), u.text.size());
    }
    return h;
}

std::vector<TokenSeq> encode_context_window(const Context& ctx, const Vocab& vocab, int max_len) {
    std::vector<TokenSeq> out;
    out.reserve(ctx.utterances.size());
    for (const Utterance& u : ctx.utterances) out.push_back(encode(u.text, vocab, max_len));
    return out;
}

ContextBatch pretrain_windows(const std::vector<Conversation>& convs, const Vocab& vocab,
                              const EncoderConfig& cfg) {
    ContextBatch out;
    for (const auto& conv : convs)
        for (const Context& ctx : window_contexts(conv, cfg.context_size, WindowMode::PRETRAIN))
            out.push_back(encode_context_window(ctx, vocab, cfg.max_utt_len));
    return out;
}

std::vector<LabelledWindow> finetune_windows(const std::vector<Conversation>& convs,
                                             const Vocab& vocab, const EncoderConfig& cfg) {
    std::vector<LabelledWindow> out;
    for (const auto& conv : convs)
        for (const Context& ctx : window_contexts(conv, cfg.context_size, WindowMode::FINETUNE)) {
            LabelledWindow w;
            w.tokens = encode_context_window(ctx, vocab, cfg.max_utt_len);
            w.full = true;
            for (const Utterance& u : ctx.utterances) {
                if (u.is_padding()) {
                    w.labels.push_back(-1);
                    w.full = false;
                    continue;
                }
                if (!u.label)
                    throw std::runtime_error("finetune: utterance without label in conversation " +
                                             conv.source_id);
                w.labels.push_back(*u.label);
            }
            w.target_label = w.labels.back();
            out.push_back(std::move(w));
        }
    return out;
}

// ---- shared loop machinery -----------------------------------------------------------

namespace {

Checkpoint make_checkpoint(const EncoderConfig& cfg, const ParameterStore<float>& params,
                           long long step) {
    Checkpoint c;
    c.config = cfg;
    c.params = params;
    c.step = step;
    return c;
}

// mean hierarchical loss over a fixed context set, dropout off, fixed seed
double eval_pretrain_loss(const ParameterStore<float>& params, const EncoderConfig& cfg,
                          const ContextBatch& contexts, const RunConfig& run, uint64_t eval_seed) {
    double total = 0;
    ObjectiveOpts oo{run.loss, run.p_omega,
                     run.mask_count > 0 ? run.mask_count
                                        : utterance_mask_count(run.p_context, cfg.context_size),
                     false};
    for (size_t i = 0; i < contexts.size(); ++i) {
        Tape<float> t;
        ContextBatch one{contexts[i]};
        Var loss = loss_hierarchical(t, params, cfg, one, run.weights, oo,
                                     splitmix64(eval_seed ^ (i + 1)));
        total += t.val(loss).item();
    }
    return contexts.empty() ? 0.0 : total / static_cast<double>(contexts.size());
}

// fine-tuning loss of one window batch by decoder kind
Var finetune_batch_loss(Tape<float>& t, const ParameterStore<float>& params,
                        const EncoderConfig& cfg, const std::vector<const LabelledWindow*>& batch,
                        DecoderKind decoder, Rng& rng, bool train) {
    ForwardOpts fo{train, &rng, nullptr};
    Var total = t.scalar(0.f);
    for (const LabelledWindow* w : batch) {
        DialogEncoding<float> enc = encode_context(t, params, cfg, w->tokens, fo);
        switch (decoder) {
            case DecoderKind::MLP: {
                Var logits = mlp_predict(t, params, enc.pooled, fo, &cfg);
                total = t.add(total, t.sum(t.cross_entropy(logits, {w->target_label})));
                break;
            }
            case DecoderKind::GRU: {
                Var logits = gru_decode(t, params, cfg, enc.states, &w->labels, fo);
                Var nll = t.cross_entropy(logits, w->labels);
                total = t.add(total, t.scale(t.sum(nll), 1.0f / w->labels.size()));
                break;
            }
            case DecoderKind::CRF: {
                Var nll = crf_loss(t, params, crf_emissions(t, params, enc.states), w->labels);
                total = t.add(total, nll);
                break;
            }
        }
    }
    return t.scale(total, static_cast<float>(1.0 / batch.size()));
}

int predict_window(const ParameterStore<float>& params, const EncoderConfig& cfg,
                   DecoderKind decoder, const std::vector<TokenSeq>& tokens) {
    Tape<float> t;
    DialogEncoding<float> enc = encode_context(t, params, cfg, tokens);
    int T = cfg.context_size;
    switch (decoder) {
        case DecoderKind::MLP: {
            Var logits = mlp_predict(t, params, enc.pooled);
            const Tensor<float>& v = t.val(logits);
            return static_cast<int>(std::max_element(v.data.begin(), v.data.end()) -
                                    v.data.begin());
        }
        case DecoderKind::GRU: {
            Var logits = gru_decode(t, params, cfg, enc.states, nullptr);
            const Tensor<float>& v = t.val(logits);
            int L = v.shape[1];
            const float* row = &v.data[static_cast<size_t>(T - 1) * L];
            return static_cast<int>(std::max_element(row, row + L) - row);
        }
        case DecoderKind::CRF: {
            Var em = crf_emissions(t, params, enc.states);
            return crf_viterbi(t.val(em), params).path[T - 1];
        }
    }
    throw std::logic_error("predict_window: unknown decoder");
}

}  // namespace

// ---- pretraining loop -------------------------------------------------------------------

PretrainResult pretrain(const std::vector<Conversation>& train_convs,
                        const std::vector<Conversation>& val_convs, const Vocab& vocab,
                        const EncoderConfig& cfg, const RunConfig& run, MetricsLog* log,
                        const Checkpoint* resume) {
    run.validate();
    if (cfg.encoder_kind != EncoderKind::HIER)
        throw std::runtime_error(
            "pretrain: the pre-training objectives are defined on the hierarchical encoder");
    if (run.loss == LossKind::GAP && run.weights.lambda_u != 0 && run.weights.lambda_d != 0)
        std::cerr << "pretrain: combined-level gap supervision is experimental; the two "
                     "objectives are known to plateau against each other\n";
    ContextBatch train_ctx = pretrain_windows(train_convs, vocab, cfg);
    ContextBatch val_ctx = pretrain_windows(val_convs, vocab, cfg);
    if (train_ctx.empty()) throw std::runtime_error("pretrain: no training contexts (empty corpus)");

    ParameterStore<float> params;
    OptimState st;
    Rng rng(run.seed);
    long long start_step = 0;
    if (resume) {
        params = resume->params;
        if (resume->has_optim) st = resume->optim;
        rng.load_state(resume->rng_state);
        start_step = resume->step;
    } else {
        params = build_model<float>(cfg, run.seed);
    }
    st.weight_decay = run.weight_decay;
    st.base_lr = run.base_lr;
    st.warmup_steps = run.warmup_steps;
    st.total_steps = run.resolved_total_steps();

    ObjectiveOpts oo{run.loss, run.p_omega,
                     run.mask_count > 0 ? run.mask_count
                                        : utterance_mask_count(run.p_context, cfg.context_size),
                     true};
    uint64_t val_seed = splitmix64(run.seed ^ 0x76616cULL);

    PretrainResult res;
    double best_val = std::numeric_limits<double>::infinity();
    int n = static_cast<int>(train_ctx.size());

    for (long long step = start_step + 1; step <= run.steps; ++step) {
        uint64_t step_seed = rng.next_u64();
        ContextBatch batch;
        batch.reserve(run.batch_size);
        for (int b = 0; b < run.batch_size; ++b) batch.push_back(train_ctx[rng.uniform_int(n)]);

        Tape<float> t;
        Var loss = loss_hierarchical(t, params, cfg, batch, run.weights, oo, step_seed);
        auto [loss_val, grads] = t.forward_backward(loss, params);
        clip_global_norm(grads, run.clip_norm);
        double lr = lr_schedule(std::min<long long>(step, st.total_steps), st);
        adamw_step(params, grads, st, lr);

        res.train_losses.push_back(loss_val);
        if (log) log->row(step, "train", loss_val, -1, lr);

        if (step % run.eval_every == 0 || step == run.steps) {
            double vl = val_ctx.empty()
                            ? loss_val
                            : eval_pretrain_loss(params, cfg, val_ctx, run, val_seed);
            res.val_losses.emplace_back(step, vl);
            if (log) log->row(step, "val", vl, -1, lr);
            if (vl < best_val) {
                best_val = vl;
                res.best = make_checkpoint(cfg, params, step);
                res.best.metrics["val_loss"] = vl;
            }
        }
    }
    if (!res.best.params.tensors.size()) {
        res.best = make_checkpoint(cfg, params, run.steps);
        res.best.metrics["val_loss"] = best_val;
    }
    res.last = make_checkpoint(cfg, params, run.steps);
    res.last.has_optim = true;
    res.last.optim = st;
    res.last.rng_state = rng.save_state();
    return res;
}

// ---- fine-tuning loop ---------------------------------------------------------------------

FinetuneResult finetune(const Checkpoint* init, const CorpusSplits& splits, const LabelSet& labels,
                        const Vocab& vocab, const EncoderConfig& cfg, const RunConfig& run,
                        MetricsLog* log) {
    run.validate();
    if (init && init->labels && init->labels->names != labels.names)
        throw std::runtime_error("finetune: label set mismatch between checkpoint and corpus");

    ParameterStore<float> params = init ? init->params : build_model<float>(cfg, run.seed);
    const char* head_probe = run.decoder == DecoderKind::MLP   ? "head.mlp.w1"
                             : run.decoder == DecoderKind::GRU ? "head.gru.out.w"
                                                               : "head.crf.w";
    if (!params.has(head_probe)) attach_head(params, cfg, run.decoder, labels.size(), run.seed);

    auto train_all = finetune_windows(splits.train, vocab, cfg);
    auto val_all = finetune_windows(splits.val, vocab, cfg);
    if (train_all.empty()) throw std::runtime_error("finetune: no training windows");

    // sequential decoders train (and compute validation loss) on complete
    // windows only; evaluation still scores every utterance at its window's
    // final position
    std::vector<const LabelledWindow*> train_pool, val_pool;
    for (const auto& w : train_all)
        if (run.decoder == DecoderKind::MLP || w.full) train_pool.push_back(&w);
    for (const auto& w : val_all)
        if (run.decoder == DecoderKind::MLP || w.full) val_pool.push_back(&w);
    if (train_pool.empty())
        throw std::runtime_error("finetune: no full windows for a sequential decoder");

    OptimState st;
    st.weight_decay = run.weight_decay;
    st.base_lr = run.base_lr;
    st.warmup_steps = run.warmup_steps;
    st.total_steps = run.resolved_total_steps();
    Rng rng(splitmix64(run.seed ^ 0x66696e65ULL));

    FinetuneResult res;
    double best_val = std::numeric_limits<double>::infinity();
    int n = static_cast<int>(train_pool.size());

    for (long long step = 1; step <= run.steps; ++step) {
        std::vector<const LabelledWindow*> batch;
        batch.reserve(run.batch_size);
        for (int b = 0; b < run.batch_size; ++b) batch.push_back(train_pool[rng.uniform_int(n)]);

        Tape<float> t;
        Var loss = finetune_batch_loss(t, params, cfg, batch, run.decoder, rng, true);
        auto [loss_val, grads] = t.forward_backward(loss, params);
        clip_global_norm(grads, run.clip_norm);
        double lr = lr_schedule(std::min<long long>(step, st.total_steps), st);
        adamw_step(params, grads, st, lr);

        res.train_losses.push_back(loss_val);
        if (log) log->row(step, "train", loss_val, -1, lr);

        if (step % run.eval_every == 0 || step == run.steps) {
            double vl = loss_val;
            if (!val_pool.empty()) {
                Rng eval_rng(0);
                double total = 0;
                for (const LabelledWindow* w : val_pool) {
                    Tape<float> te;
                    Var l = finetune_batch_loss(te, params, cfg, {w}, run.decoder, eval_rng,
                                                false);
                    total += te.val(l).item();
                }
                vl = total / static_cast<double>(val_pool.size());
            }
            res.val_losses.emplace_back(step, vl);
            if (log) log->row(step, "val", vl, -1, lr);
            if (vl < best_val) {
                best_val = vl;
                res.best = make_checkpoint(cfg, params, step);
                res.best.labels = labels;
                res.best.decoder = run.decoder;
                res.best.metrics["val_loss"] = vl;
            }
        }
    }
    if (!res.best.params.tensors.size()) {
        res.best = make_checkpoint(cfg, params, run.steps);
        res.best.labels = labels;
        res.best.decoder = run.decoder;
    }
    if (!splits.test.empty()) {
        res.test_accuracy = evaluate(res.best.params, cfg, run.decoder, splits.test, vocab);
        res.best.metrics["test_accuracy"] = res.test_accuracy;
        if (log) log->row(res.best.step, "test", -1, res.test_accuracy, 0);
    }
    return res;
}

// ---- evaluation -----------------------------------------------------------------------------

double evaluate(const ParameterStore<float>& params, const EncoderConfig& cfg, DecoderKind decoder,
                const std::vector<Conversation>& split, const Vocab& vocab) {
    if (split.empty()) throw std::runtime_error("evaluate: empty split");
    long long correct = 0, total = 0;
    for (const auto& w : finetune_windows(split, vocab, cfg)) {
        int pred = predict_window(params, cfg, decoder, w.tokens);
        correct += pred == w.target_label ? 1 : 0;
        ++total;
    }
    if (total == 0)
        throw std::runtime_error("evaluate: no scoreable utterances (all conversations shorter "
                                 "than the context size)");
    return static_cast<double>(correct) / static_cast<double>(total);
}

double evaluate(const Checkpoint& ckpt, const std::vector<Conversation>& split,
                const Vocab& vocab) {
    return evaluate(ckpt.params, ckpt.config, ckpt.decoder, split, vocab);
}

// ---- training-fraction experiment --------------------------------------------------------------

std::pair<double, double> FractionTable::cell_stats(const std::string& init_name,
                                                    double fraction) const {
    double sum = 0, sq = 0;
    int n = 0;
    for (const auto& r : rows)
        if (r.init_name == init_name && r.fraction == fraction) {
            sum += r.accuracy;
            sq += r.accuracy * r.accuracy;
            ++n;
        }
    if (n == 0) return {0, 0};
    double mean = sum / n;
    return {mean, std::sqrt(std::max(0.0, sq / n - mean * mean))};
}

FractionTable fraction_experiment(
    const std::vector<std::pair<std::string, const Checkpoint*>>& inits,
    const CorpusSplits& splits, const LabelSet& labels, const Vocab& vocab,
    const EncoderConfig& cfg, const RunConfig& run, const std::vector<double>& fractions,
    int n_seeds, MetricsLog* log) {
    FractionTable table;
    table.val_hash = split_hash(splits.val);
    table.test_hash = split_hash(splits.test);
    int n_train = static_cast<int>(splits.train.size());
    for (const auto& [init_name, init] : inits)
        for (double fraction : fractions) {
            if (fraction <= 0 || fraction > 1)
                throw std::invalid_argument("fraction_experiment: fractions must be in (0,1]");
            int count = static_cast<int>(std::lround(fraction * n_train));
            if (count < 1) {
                std::cerr << "fraction_experiment: fraction " << fraction
                          << " yields no conversations, skipping\n";
                continue;
            }
            for (int s = 0; s < n_seeds; ++s) {
                uint64_t cell_seed = splitmix64(run.seed ^ (static_cast<uint64_t>(s + 1) * 977) ^
                                                static_cast<uint64_t>(fraction * 1e6));
                // subsample training conversations, splits.val/test stay fixed
                std::vector<int> idx(n_train);
                for (int i = 0; i < n_train; ++i) idx[i] = i;
                Rng sub(cell_seed);
                for (int i = n_train - 1; i > 0; --i) std::swap(idx[i], idx[sub.uniform_int(i + 1)]);
                CorpusSplits cell;
                for (int i = 0; i < count; ++i) cell.train.push_back(splits.train[idx[i]]);
                cell.val = splits.val;
                cell.test = splits.test;

                RunConfig cell_run = run;
                cell_run.seed = cell_seed;
                FinetuneResult r = finetune(init, cell, labels, vocab, cfg, cell_run, nullptr);
                table.rows.push_back({init_name, fraction, cell_seed, r.test_accuracy});
                if (log)
                    log->row(static_cast<long long>(table.rows.size()), init_name, -1,
                             r.test_accuracy, fraction);
            }
        }
    return table;
}

}  // namespace hdlg
