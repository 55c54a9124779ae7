#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hdlg/tensor.hpp"

namespace hdlg {

struct Utterance {
    std::string text;
    long long start_ms = 0;
    long long end_ms = 0;
    std::optional<std::string> speaker;
    std::optional<int> label;

    bool is_padding() const { return text.empty(); }
};

struct Conversation {
    std::vector<Utterance> utterances;
    std::string source_id;

    int size() const { return static_cast<int>(utterances.size()); }
};

struct Context {
    std::vector<Utterance> utterances;  // exactly T entries
    int target_index = 0;               // position whose label is predicted
    std::string origin_conversation;
    int origin_offset = 0;
};

struct LabelSet {
    enum class Kind { DA, E, S };
    std::vector<std::string> names;
    Kind kind = Kind::DA;

    int size() const { return static_cast<int>(names.size()); }
    int index_of(const std::string& name) const;
    void save(const std::string& path) const;
    static LabelSet load(const std::string& path);
};

struct SynthSpec {
    int num_conversations = 64;
    int utterances_per_conversation = 20;
    int vocab_words = 200;
    int labels = 4;
    double label_signal_strength = 0.7;  // 0 = labels carry no lexical signal
    double transition_stickiness = 0.5;  // 0 = uniform label transitions
    uint64_t seed = 0;

    void validate() const;
};

// emission/transition tables the generator sampled from, exposed so tests can
// build an exact Bayes oracle
struct SynthModel {
    Tensor<double> transition;  // labels x labels
    Tensor<double> emission;    // labels x vocab_words
    std::vector<double> stationary;
    std::vector<std::string> words;
};

enum class WindowMode { PRETRAIN, FINETUNE };

inline constexpr long long kDefaultGapMs = 6000;

// Consecutive utterances share a conversation iff the silence between them
// (next start minus previous end) is shorter than gap_ms. Conversations with
// fewer than min_len utterances are dropped.
std::vector<Conversation> segment_conversations(const std::vector<Utterance>& stream,
                                                long long gap_ms, int min_len);

// PRETRAIN: non-overlapping chunks of T, remainder dropped.
// FINETUNE: stride-1 windows with target at the last position; utterances
// before position T-1 get a window left-padded with the reserved empty
// utterance so every utterance is the target of exactly one window.
std::vector<Context> window_contexts(const Conversation& conv, int T, WindowMode mode);

std::pair<std::vector<Conversation>, LabelSet> generate_synthetic_corpus(const SynthSpec& spec);
SynthModel synth_model(const SynthSpec& spec);

std::vector<Conversation> read_corpus(const std::string& path);
void write_corpus(const std::vector<Conversation>& convs, const std::string& path);

// numbered subtitle blocks: "index / HH:MM:SS,mmm --> HH:MM:SS,mmm / text"
std::vector<Utterance> ingest_timed_text(const std::string& path);

}  // namespace hdlg
