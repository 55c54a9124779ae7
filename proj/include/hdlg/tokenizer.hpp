#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace hdlg {

// fixed special token ids
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumSpecials = 5;

struct Vocab {
    std::vector<std::string> tokens;               // id -> token, specials first
    std::unordered_map<std::string, int> ids;      // token -> id
    bool lowercase = true;

    int size() const { return static_cast<int>(tokens.size()); }
    int lookup(const std::string& tok) const {
        auto it = ids.find(tok);
        return it == ids.end() ? -1 : it->second;
    }
    const std::string& token(int id) const;

    void save(const std::string& path) const;
    static Vocab load(const std::string& path, bool lowercase = true);
};

// fixed-length encoded utterance: [CLS] body... [SEP] [PAD]...
struct TokenSeq {
    std::vector<int> ids;               // length == max_len
    std::vector<uint8_t> attention;     // true exactly on non-PAD positions

    int max_len() const { return static_cast<int>(ids.size()); }
    // index of SEP + 1, i.e. number of non-pad positions
    int seq_len() const {
        int n = 0;
        for (uint8_t a : attention) n += a ? 1 : 0;
        return n;
    }
    // tokens strictly between CLS and SEP
    int body_len() const { return seq_len() - 2; }

    bool operator==(const TokenSeq& o) const = default;
};

std::string normalize_text(const std::string& text, bool lowercase);

// BPE-style pair merging over whitespace-split words; merged units become
// vocabulary tokens, plain when word-initial and "##"-prefixed when internal.
Vocab train_vocab(const std::vector<std::string>& corpus_texts, int target_size,
                  bool lowercase = true);

// greedy longest-match segmentation, whole word -> UNK on failure
TokenSeq encode(const std::string& text, const Vocab& vocab, int max_len);

std::string decode(const std::vector<int>& ids, const Vocab& vocab);
std::string decode(const TokenSeq& seq, const Vocab& vocab);

// the single-MASK utterance used to blank out whole utterances
TokenSeq mask_utterance_seq(int max_len);

}  // namespace hdlg
