#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "hdlg/tokenizer.hpp"

using namespace hdlg;

TEST_CASE("specials occupy ids 0..4 in any trained vocab") {
    Vocab v = train_vocab({"hello world", "hello there"}, 64);
    CHECK(v.tokens[kPadId] == "[PAD]");
    CHECK(v.tokens[kUnkId] == "[UNK]");
    CHECK(v.tokens[kClsId] == "[CLS]");
    CHECK(v.tokens[kSepId] == "[SEP]");
    CHECK(v.tokens[kMaskId] == "[MASK]");
    // dense ids
    for (int i = 0; i < v.size(); ++i) CHECK(v.lookup(v.tokens[i]) == i);
}

TEST_CASE("most frequent pair merges first") {
    // "aaab": char pairs (a,a) x2 and (a,b) x1 per word
    Vocab base = train_vocab({"aaab aaab"}, 5 + 4);  // specials + {a,##a,b,##b}, no merges
    int base_size = base.size();
    Vocab v = train_vocab({"aaab aaab"}, base_size + 1);  // budget for one merge
    CHECK(v.lookup("aa") >= 0);
    CHECK(v.lookup("ab") == -1);
}

TEST_CASE("empty corpus is rejected") {
    CHECK_THROWS(train_vocab({}, 100));
    CHECK_THROWS(train_vocab({"   "}, 100));
}

TEST_CASE("target size below alphabet plus specials is rejected") {
    CHECK_THROWS_AS(train_vocab({"abcdefgh"}, 10), std::invalid_argument);
}

TEST_CASE("encode wraps with CLS/SEP and pads to max_len") {
    Vocab v = train_vocab({"hello world hello"}, 64);
    TokenSeq s = encode("hello", v, 10);
    CHECK(s.ids[0] == kClsId);
    CHECK(s.ids.size() == 10);
    int sep_pos = -1;
    int sep_count = 0;
    for (int i = 0; i < 10; ++i)
        if (s.ids[i] == kSepId) {
            sep_pos = i;
            ++sep_count;
        }
    CHECK(sep_count == 1);
    CHECK(sep_pos == s.seq_len() - 1);
    for (int i = 0; i < 10; ++i) CHECK((s.attention[i] != 0) == (s.ids[i] != kPadId));
}

TEST_CASE("encode of empty text is [CLS][SEP] + padding") {
    Vocab v = train_vocab({"x"}, 16);
    TokenSeq s = encode("", v, 6);
    CHECK(s.ids[0] == kClsId);
    CHECK(s.ids[1] == kSepId);
    CHECK(s.body_len() == 0);
    for (int i = 2; i < 6; ++i) CHECK(s.ids[i] == kPadId);
}

TEST_CASE("greedy longest-match picks the longest prefix token") {
    Vocab v;
    for (const char* tok : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "hel", "##lo", "h",
                            "##e", "##l", "##o"}) {
        v.ids.emplace(tok, v.size());
        v.tokens.push_back(tok);
    }
    TokenSeq s = encode("hello", v, 8);
    CHECK(s.ids[1] == v.lookup("hel"));
    CHECK(s.ids[2] == v.lookup("##lo"));
    CHECK(s.ids[3] == kSepId);
}

TEST_CASE("long input truncates so SEP lands at max_len-1") {
    Vocab v = train_vocab({"a b c d e"}, 32);
    std::string text;
    for (int i = 0; i < 100; ++i) text += "a ";
    TokenSeq s = encode(text, v, 50);
    CHECK(s.ids.size() == 50);
    CHECK(s.ids[49] == kSepId);
    CHECK(s.body_len() == 48);
}

TEST_CASE("unmatched word becomes UNK and decodes to its marker") {
    Vocab v = train_vocab({"abc abc"}, 32);
    TokenSeq s = encode("xyz", v, 8);
    CHECK(s.ids[1] == kUnkId);
    CHECK(decode(s, v) == "[UNK]");
}

TEST_CASE("decode round-trips covered text and strips specials") {
    Vocab v = train_vocab({"hello world hello world waterfront"}, 128);
    CHECK(decode(encode("hello world", v, 20), v) == "hello world");
    CHECK(decode(encode("", v, 20), v) == "");
    CHECK_THROWS(decode(std::vector<int>{9999}, v));
}

TEST_CASE("round-trip property on random corpora") {
    Rng rng(17);
    std::vector<std::string> words = {"alpha", "beta", "gamma", "delta", "epsilon",
                                      "zeta",  "eta",  "theta", "iota",  "kappa"};
    std::vector<std::string> texts;
    for (int i = 0; i < 50; ++i) {
        std::string t;
        int n = 1 + rng.uniform_int(6);
        for (int j = 0; j < n; ++j) {
            if (j) t += ' ';
            t += words[rng.uniform_int(static_cast<int>(words.size()))];
        }
        texts.push_back(t);
    }
    Vocab v = train_vocab(texts, 256);
    for (const auto& t : texts) {
        TokenSeq s = encode(t, v, 32);
        CHECK(s.ids[0] == kClsId);
        CHECK(decode(s, v) == normalize_text(t, true));
        // determinism
        CHECK(encode(t, v, 32) == s);
        // structural invariants: one SEP at the last non-pad slot, attention
        // marks exactly the non-pad region
        int seps = 0;
        for (int id : s.ids) seps += id == kSepId ? 1 : 0;
        CHECK(seps == 1);
        CHECK(s.ids[s.seq_len() - 1] == kSepId);
        for (int i = 0; i < s.max_len(); ++i)
            CHECK((s.attention[i] != 0) == (s.ids[i] != kPadId));
    }
}

TEST_CASE("vocab save/load preserves ids and specials ordering") {
    Vocab v = train_vocab({"some words to keep"}, 64);
    std::string path =
        (std::filesystem::temp_directory_path() / "hdlg_vocab_test.txt").string();
    v.save(path);
    Vocab w = Vocab::load(path);
    CHECK(w.tokens == v.tokens);
    std::filesystem::remove(path);
}

TEST_CASE("lowercasing is on by default and can be disabled") {
    Vocab lower = train_vocab({"Hello HELLO"}, 64, true);
    CHECK(decode(encode("HeLLo", lower, 16), lower) == "hello");
    Vocab keep = train_vocab({"Hello HELLO"}, 64, false);
    CHECK(keep.lookup("H") >= 0);
}

TEST_CASE("vocab files without the specials header are rejected") {
    std::string path =
        (std::filesystem::temp_directory_path() / "hdlg_vocab_bad.txt").string();
    {
        std::ofstream f(path);
        f << "[PAD]\n[UNK]\nnot_cls\n[SEP]\n[MASK]\na\n";
    }
    CHECK_THROWS_AS(Vocab::load(path), std::runtime_error);
    std::filesystem::remove(path);
}

TEST_CASE("encode rejects a max_len that cannot hold CLS and SEP") {
    Vocab v = train_vocab({"ab"}, 16);
    CHECK_THROWS_AS(encode("ab", v, 1), std::invalid_argument);
}
