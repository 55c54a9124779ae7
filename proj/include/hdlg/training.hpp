#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hdlg/config.hpp"
#include "hdlg/corpus.hpp"
#include "hdlg/objectives.hpp"
#include "hdlg/params.hpp"
#include "hdlg/tokenizer.hpp"

namespace hdlg {

// ---- optimizer ----------------------------------------------------------------

struct OptimState {
    std::map<std::string, Tensor<float>> m, v;  // first/second moments
    long long step = 0;                         // completed updates
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double base_lr = 1e-4;
    int warmup_steps = 100;
    int total_steps = 1000;
};

// linear 0 -> base_lr over warmup, then linear base_lr -> 0 over the rest
double lr_schedule(long long step, const OptimState& st);

// bias-corrected Adam update plus decoupled weight decay; decay applies to
// rank-2+ tensors only (biases and layer-norm vectors are excluded). Applied
// in parameter-name order.
void adamw_step(ParameterStore<float>& params, const GradMap<float>& grads, OptimState& st,
                double lr);

// scales gradients in place so the global norm is at most max_norm; returns
// the pre-clip norm
double clip_global_norm(GradMap<float>& grads, double max_norm);

// ---- checkpoint -----------------------------------------------------------------

struct Checkpoint {
    int version = 1;
    EncoderConfig config;
    std::optional<LabelSet> labels;
    DecoderKind decoder = DecoderKind::MLP;
    ParameterStore<float> params;
    bool has_optim = false;
    OptimState optim;
    std::string rng_state;
    long long step = 0;
    std::map<std::string, double> metrics;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

// ---- metrics log ------------------------------------------------------------------

class MetricsLog {
public:
    MetricsLog() = default;
    explicit MetricsLog(const std::string& csv_path);
    void row(long long step, const std::string& split, double loss, double accuracy, double lr);
    void set(const std::string& key, const std::string& value);
    void set(const std::string& key, double value);
    // structured summary record appended after the csv
    void write_summary(const std::string& path) const;

private:
    std::string csv_path_;
    std::vector<std::pair<std::string, std::string>> summary_;
};

// ---- data plumbing ----------------------------------------------------------------

struct CorpusSplits {
    std::vector<Conversation> train, val, test;
};

// deterministic shuffle at conversation granularity
CorpusSplits split_corpus(const std::vector<Conversation>& convs, double val_fraction,
                          double test_fraction, uint64_t seed);

uint64_t split_hash(const std::vector<Conversation>& convs);

// tokenize one context window
std::vector<TokenSeq> encode_context_window(const Context& ctx, const Vocab& vocab, int max_len);

// all pretrain-mode windows of a conversation list, tokenized
ContextBatch pretrain_windows(const std::vector<Conversation>& convs, const Vocab& vocab,
                              const EncoderConfig& cfg);

struct LabelledWindow {
    std::vector<TokenSeq> tokens;
    std::vector<int> labels;  // per slot; -1 on padding slots
    int target_label = -1;
    bool full = true;  // no padding slots
};

std::vector<LabelledWindow> finetune_windows(const std::vector<Conversation>& convs,
                                             const Vocab& vocab, const EncoderConfig& cfg);

// ---- training loops ----------------------------------------------------------------

struct PretrainResult {
    Checkpoint best;  // lowest validation loss
    Checkpoint last;  // final state including optimizer, for exact resume
    std::vector<double> train_losses;
    std::vector<std::pair<long long, double>> val_losses;
};

PretrainResult pretrain(const std::vector<Conversation>& train_convs,
                        const std::vector<Conversation>& val_convs, const Vocab& vocab,
                        const EncoderConfig& cfg, const RunConfig& run,
                        MetricsLog* log = nullptr, const Checkpoint* resume = nullptr);

struct FinetuneResult {
    Checkpoint best;
    double test_accuracy = 0;
    std::vector<double> train_losses;
    std::vector<std::pair<long long, double>> val_losses;
};

FinetuneResult finetune(const Checkpoint* init, const CorpusSplits& splits,
                        const LabelSet& labels, const Vocab& vocab, const EncoderConfig& cfg,
                        const RunConfig& run, MetricsLog* log = nullptr);

// micro accuracy over every utterance, each scored once at the final position
// of its stride-1 window
double evaluate(const ParameterStore<float>& params, const EncoderConfig& cfg,
                DecoderKind decoder, const std::vector<Conversation>& split, const Vocab& vocab);

double evaluate(const Checkpoint& ckpt, const std::vector<Conversation>& split,
                const Vocab& vocab);

// ---- training-fraction experiment ---------------------------------------------------

struct FractionCell {
    std::string init_name;
    double fraction = 1.0;
    uint64_t seed = 0;
    double accuracy = 0;
};

struct FractionTable {
    std::vector<FractionCell> rows;
    uint64_t val_hash = 0, test_hash = 0;

    // mean/stddev for one (init, fraction) cell
    std::pair<double, double> cell_stats(const std::string& init_name, double fraction) const;
};

FractionTable fraction_experiment(
    const std::vector<std::pair<std::string, const Checkpoint*>>& inits,
    const CorpusSplits& splits, const LabelSet& labels, const Vocab& vocab,
    const EncoderConfig& cfg, const RunConfig& run, const std::vector<double>& fractions,
    int n_seeds, MetricsLog* log = nullptr);

}  // namespace hdlg
