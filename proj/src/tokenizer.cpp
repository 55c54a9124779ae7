#include "hdlg/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace hdlg {

namespace {

const char* kSpecialNames[kNumSpecials] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream is(text);
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

void add_token(Vocab& v, const std::string& tok) {
    if (v.ids.count(tok)) return;
    v.ids.emplace(tok, v.size());
    v.tokens.push_back(tok);
}

}  // namespace

const std::string& Vocab::token(int id) const {
    if (id < 0 || id >= size())
        throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range (size " +
                                std::to_string(size()) + ")");
    return tokens[static_cast<size_t>(id)];
}

void Vocab::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write vocab file: " + path);
    for (const auto& t : tokens) f << t << "\n";
}

Vocab Vocab::load(const std::string& path, bool lowercase) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read vocab file: " + path);
    Vocab v;
    v.lowercase = lowercase;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        add_token(v, line);
    }
    for (int i = 0; i < kNumSpecials; ++i)
        if (v.size() <= i || v.tokens[i] != kSpecialNames[i])
            throw std::runtime_error("vocab file " + path + ": specials missing or out of order");
    return v;
}

std::string normalize_text(const std::string& text, bool lowercase) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(lowercase ? static_cast<char>(std::tolower(static_cast<unsigned char>(c)))
                                : c);
    }
    return out;
}

Vocab train_vocab(const std::vector<std::string>& corpus_texts, int target_size, bool lowercase) {
    // word frequency table over normalized text
    std::map<std::string, long long> word_freq;
    for (const auto& text : corpus_texts)
        for (const auto& w : split_words(normalize_text(text, lowercase))) ++word_freq[w];
    if (word_freq.empty()) throw std::runtime_error("train_vocab: empty corpus");

    std::set<char> alphabet;
    for (auto& [w, f] : word_freq)
        for (char c : w) alphabet.insert(c);
    if (target_size < static_cast<int>(alphabet.size()) + kNumSpecials)
        throw std::invalid_argument("train_vocab: target_size " + std::to_string(target_size) +
                                    " below alphabet size " + std::to_string(alphabet.size()) +
                                    " + " + std::to_string(kNumSpecials) + " specials");

    Vocab v;
    v.lowercase = lowercase;
    for (const char* s : kSpecialNames) add_token(v, s);
    // both word-initial and continuation variants so any seen word segments
    for (char c : alphabet) add_token(v, std::string(1, c));
    for (char c : alphabet) add_token(v, "##" + std::string(1, c));

    // each word as a sequence of raw units; pair statistics ignore the
    // word-initial/continuation distinction
    std::vector<std::pair<std::vector<std::string>, long long>> words;
    words.reserve(word_freq.size());
    for (auto& [w, f] : word_freq) {
        std::vector<std::string> units;
        for (char c : w) units.emplace_back(1, c);
        words.emplace_back(std::move(units), f);
    }

    while (v.size() < target_size) {
        std::map<std::pair<std::string, std::string>, long long> pair_freq;
        for (auto& [units, f] : words)
            for (size_t i = 0; i + 1 < units.size(); ++i)
                pair_freq[{units[i], units[i + 1]}] += f;
        // most frequent pair occurring at least twice; ties break toward the
        // lexicographically smallest pair (map iteration order)
        std::pair<std::string, std::string> best;
        long long best_freq = 1;
        for (auto& [p, f] : pair_freq)
            if (f > best_freq) {
                best = p;
                best_freq = f;
            }
        if (best_freq < 2) break;

        std::string merged = best.first + best.second;
        bool initial = false, internal = false;
        for (auto& [units, f] : words) {
            std::vector<std::string> next;
            next.reserve(units.size());
            for (size_t i = 0; i < units.size();) {
                if (i + 1 < units.size() && units[i] == best.first && units[i + 1] == best.second) {
                    (next.empty() ? initial : internal) = true;
                    next.push_back(merged);
                    i += 2;
                } else {
                    next.push_back(units[i]);
                    ++i;
                }
            }
            units = std::move(next);
        }
        if (initial) add_token(v, merged);
        if (internal) add_token(v, "##" + merged);
    }
    return v;
}

namespace {

// greedy longest-match over one word; empty result means UNK
std::vector<int> segment_word(const std::string& word, const Vocab& v) {
    std::vector<int> out;
    size_t pos = 0;
    while (pos < word.size()) {
        size_t len = word.size() - pos;
        int id = -1;
        while (len > 0) {
            std::string cand = word.substr(pos, len);
            if (pos > 0) cand = "##" + cand;
            id = v.lookup(cand);
            if (id >= 0) break;
            --len;
        }
        if (id < 0) return {};
        out.push_back(id);
        pos += len;
    }
    return out;
}

}  // namespace

TokenSeq encode(const std::string& text, const Vocab& vocab, int max_len) {
    if (max_len < 2) throw std::invalid_argument("encode: max_len must be >= 2");
    std::vector<int> body;
    for (const auto& w : split_words(normalize_text(text, vocab.lowercase))) {
        auto pieces = segment_word(w, vocab);
        if (pieces.empty())
            body.push_back(kUnkId);
        else
            body.insert(body.end(), pieces.begin(), pieces.end());
    }
    if (static_cast<int>(body.size()) > max_len - 2) body.resize(max_len - 2);

    TokenSeq seq;
    seq.ids.assign(max_len, kPadId);
    seq.attention.assign(max_len, 0);
    seq.ids[0] = kClsId;
    for (size_t i = 0; i < body.size(); ++i) seq.ids[i + 1] = body[i];
    seq.ids[body.size() + 1] = kSepId;
    for (size_t i = 0; i <= body.size() + 1; ++i) seq.attention[i] = 1;
    return seq;
}

std::string decode(const std::vector<int>& ids, const Vocab& vocab) {
    std::string out;
    for (int id : ids) {
        if (id == kPadId || id == kClsId || id == kSepId) continue;
        const std::string& tok = vocab.token(id);  // throws on unknown id
        if (tok.size() > 2 && tok[0] == '#' && tok[1] == '#') {
            out += tok.substr(2);
        } else {
            if (!out.empty()) out += ' ';
            out += tok;
        }
    }
    return out;
}

std::string decode(const TokenSeq& seq, const Vocab& vocab) { return decode(seq.ids, vocab); }

TokenSeq mask_utterance_seq(int max_len) {
    TokenSeq seq;
    seq.ids.assign(max_len, kPadId);
    seq.attention.assign(max_len, 0);
    seq.ids[0] = kClsId;
    seq.ids[1] = kMaskId;
    seq.ids[2] = kSepId;
    seq.attention[0] = seq.attention[1] = seq.attention[2] = 1;
    return seq;
}

}  // namespace hdlg
