#include "hdlg/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "hdlg/rng.hpp"
#include "json.hpp"

namespace hdlg {

using nlohmann::json;

int LabelSet::index_of(const std::string& name) const {
    for (int i = 0; i < size(); ++i)
        if (names[i] == name) return i;
    throw std::out_of_range("label set: unknown label '" + name + "'");
}

void LabelSet::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write label set: " + path);
    for (const auto& n : names) f << n << "\n";
}

LabelSet LabelSet::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read label set: " + path);
    LabelSet ls;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) ls.names.push_back(line);
    }
    return ls;
}

void SynthSpec::validate() const {
    if (num_conversations < 1 || utterances_per_conversation < 1 || vocab_words < 1 || labels < 1)
        throw std::invalid_argument("synth spec: counts must be >= 1");
    if (label_signal_strength < 0 || label_signal_strength > 1)
        throw std::invalid_argument("synth spec: label_signal_strength must be in [0,1]");
    if (transition_stickiness < 0 || transition_stickiness > 1)
        throw std::invalid_argument("synth spec: transition_stickiness must be in [0,1]");
}

std::vector<Conversation> segment_conversations(const std::vector<Utterance>& stream,
                                                long long gap_ms, int min_len) {
    if (gap_ms < 0) throw std::invalid_argument("segment_conversations: gap_ms must be >= 0");
    for (size_t i = 1; i < stream.size(); ++i)
        if (stream[i].start_ms < stream[i - 1].start_ms)
            throw std::invalid_argument(
                "segment_conversations: stream not sorted by start_ms, first inversion at index " +
                std::to_string(i) + " (" + std::to_string(stream[i].start_ms) + " < " +
                std::to_string(stream[i - 1].start_ms) + ")");

    std::vector<Conversation> out;
    Conversation cur;
    int next_id = 0;
    auto flush = [&]() {
        if (!cur.utterances.empty()) {
            cur.source_id = "seg-" + std::to_string(next_id++);
            out.push_back(std::move(cur));
            cur = Conversation{};
        }
    };
    for (size_t i = 0; i < stream.size(); ++i) {
        if (!cur.utterances.empty() &&
            stream[i].start_ms - cur.utterances.back().end_ms >= gap_ms)
            flush();
        cur.utterances.push_back(stream[i]);
    }
    flush();

    if (min_len > 1)
        out.erase(std::remove_if(out.begin(), out.end(),
                                 [min_len](const Conversation& c) { return c.size() < min_len; }),
                  out.end());
    return out;
}

std::vector<Context> window_contexts(const Conversation& conv, int T, WindowMode mode) {
    if (T < 1) throw std::invalid_argument("window_contexts: T must be >= 1");
    std::vector<Context> out;
    int n = conv.size();
    if (n < T) return out;  // callers rely on segmentation's min_len
    if (mode == WindowMode::PRETRAIN) {
        for (int off = 0; off + T <= n; off += T) {
            Context ctx;
            ctx.utterances.assign(conv.utterances.begin() + off, conv.utterances.begin() + off + T);
            ctx.target_index = T - 1;
            ctx.origin_conversation = conv.source_id;
            ctx.origin_offset = off;
            out.push_back(std::move(ctx));
        }
        return out;
    }
    // FINETUNE: one window per target utterance
    Utterance pad;  // reserved empty utterance
    for (int target = 0; target < n; ++target) {
        Context ctx;
        ctx.target_index = T - 1;
        ctx.origin_conversation = conv.source_id;
        ctx.origin_offset = target;
        for (int k = target - T + 1; k <= target; ++k)
            ctx.utterances.push_back(k < 0 ? pad : conv.utterances[k]);
        out.push_back(std::move(ctx));
    }
    return out;
}

// ---- synthetic corpus ----------------------------------------------------

SynthModel synth_model(const SynthSpec& spec) {
    spec.validate();
    int L = spec.labels, V = spec.vocab_words;
    SynthModel m;
    m.transition = Tensor<double>(Shape{L, L});
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j)
            m.transition.at(i, j) =
                spec.transition_stickiness * (i == j ? 1.0 : 0.0) +
                (1.0 - spec.transition_stickiness) / L;
    m.stationary.assign(L, 1.0 / L);  // symmetric chain, uniform stationary law

    // each label owns a contiguous slice of the vocabulary; signal strength
    // interpolates between the global uniform law and the slice-local law
    m.emission = Tensor<double>(Shape{L, V});
    double s = spec.label_signal_strength;
    for (int l = 0; l < L; ++l) {
        int lo = static_cast<int>(static_cast<long long>(l) * V / L);
        int hi = static_cast<int>(static_cast<long long>(l + 1) * V / L);
        for (int w = 0; w < V; ++w) {
            double local = (w >= lo && w < hi) ? 1.0 / (hi - lo) : 0.0;
            m.emission.at(l, w) = (1.0 - s) / V + s * local;
        }
    }
    m.words.reserve(V);
    char buf[16];
    for (int w = 0; w < V; ++w) {
        std::snprintf(buf, sizeof(buf), "w%03d", w);
        m.words.emplace_back(buf);
    }
    return m;
}

std::pair<std::vector<Conversation>, LabelSet> generate_synthetic_corpus(const SynthSpec& spec) {
    SynthModel model = synth_model(spec);
    int L = spec.labels, V = spec.vocab_words;
    Rng rng(spec.seed);

    auto sample_from = [&](const double* probs, int n) {
        double u = rng.uniform();
        double acc = 0;
        for (int i = 0; i < n; ++i) {
            acc += probs[i];
            if (u < acc) return i;
        }
        return n - 1;
    };

    LabelSet labels;
    labels.kind = LabelSet::Kind::DA;
    for (int l = 0; l < L; ++l) labels.names.push_back("act" + std::to_string(l));

    std::vector<Conversation> convs;
    convs.reserve(spec.num_conversations);
    for (int c = 0; c < spec.num_conversations; ++c) {
        Conversation conv;
        conv.source_id = "synth-" + std::to_string(c);
        long long clock_ms = 0;
        int label = rng.uniform_int(L);
        for (int u = 0; u < spec.utterances_per_conversation; ++u) {
            if (u > 0) label = sample_from(&model.transition.at(label, 0), L);
            int n_words = 3 + rng.uniform_int(5);
            std::string text;
            for (int w = 0; w < n_words; ++w) {
                int word = sample_from(&model.emission.at(label, 0), V);
                if (w) text += ' ';
                text += model.words[word];
            }
            Utterance utt;
            utt.text = std::move(text);
            utt.start_ms = clock_ms;
            utt.end_ms = clock_ms + 1000 + rng.uniform_int(2000);
            utt.speaker = "spk" + std::to_string(u % 2);
            utt.label = label;
            // silence below the segmentation gap so the conversation survives intact
            clock_ms = utt.end_ms + 500 + rng.uniform_int(2000);
            conv.utterances.push_back(std::move(utt));
        }
        convs.push_back(std::move(conv));
    }
    return {std::move(convs), std::move(labels)};
}

// ---- corpus file I/O -------------------------------------------------------

static json utterance_to_json(const Utterance& u) {
    json j;
    j["text"] = u.text;
    j["start_ms"] = u.start_ms;
    j["end_ms"] = u.end_ms;
    if (u.speaker) j["speaker"] = *u.speaker;
    if (u.label) j["label"] = *u.label;
    return j;
}

static Utterance utterance_from_json(const json& j, int line_no) {
    auto need = [&](const char* field) -> const json& {
        if (!j.contains(field))
            throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                     ": utterance missing field '" + field + "'");
        return j.at(field);
    };
    Utterance u;
    u.text = need("text").get<std::string>();
    u.start_ms = need("start_ms").get<long long>();
    u.end_ms = need("end_ms").get<long long>();
    if (j.contains("speaker")) u.speaker = j.at("speaker").get<std::string>();
    if (j.contains("label")) u.label = j.at("label").get<int>();
    if (u.end_ms < u.start_ms)
        throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                 ": end_ms precedes start_ms");
    if (u.text.find_first_not_of(" \t\r\n") == std::string::npos)
        throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                 ": utterance text is empty");
    return u;
}

std::vector<Conversation> read_corpus(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read corpus file: " + path);
    std::vector<Conversation> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                     ": malformed record: " + e.what());
        }
        Conversation conv;
        if (!j.contains("source_id") || !j.contains("utterances"))
            throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                     ": record missing source_id or utterances");
        conv.source_id = j.at("source_id").get<std::string>();
        for (const auto& uj : j.at("utterances"))
            conv.utterances.push_back(utterance_from_json(uj, line_no));
        if (conv.utterances.empty())
            throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                     ": conversation has no utterances");
        for (size_t i = 1; i < conv.utterances.size(); ++i)
            if (conv.utterances[i].start_ms < conv.utterances[i - 1].start_ms)
                throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                         ": utterances not time-ordered");
        out.push_back(std::move(conv));
    }
    return out;
}

void write_corpus(const std::vector<Conversation>& convs, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write corpus file: " + path);
    for (const auto& conv : convs) {
        json j;
        j["source_id"] = conv.source_id;
        json utts = json::array();
        for (const auto& u : conv.utterances) utts.push_back(utterance_to_json(u));
        j["utterances"] = std::move(utts);
        f << j.dump() << "\n";
    }
}

// ---- timed-text ingest -----------------------------------------------------

namespace {

bool parse_timestamp(const std::string& s, long long& out_ms) {
    // HH:MM:SS,mmm
    int h, m, sec, ms;
    if (std::sscanf(s.c_str(), "%d:%d:%d,%d", &h, &m, &sec, &ms) != 4) return false;
    if (h < 0 || m < 0 || m > 59 || sec < 0 || sec > 59 || ms < 0 || ms > 999) return false;
    out_ms = ((static_cast<long long>(h) * 60 + m) * 60 + sec) * 1000 + ms;
    return true;
}

std::string strip_tags(const std::string& s) {
    std::string out;
    bool in_tag = false;
    for (char c : s) {
        if (c == '<') in_tag = true;
        else if (c == '>') in_tag = false;
        else if (!in_tag) out.push_back(c);
    }
    return out;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

std::vector<Utterance> ingest_timed_text(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read timed-text file: " + path);
    std::vector<Utterance> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;  // collapse blank lines between blocks

        // block index line (ignored beyond format validation)
        std::string idx = trim(line);
        if (idx.find_first_not_of("0123456789") != std::string::npos)
            throw std::runtime_error("timed-text line " + std::to_string(line_no) +
                                     ": expected block index, got '" + idx + "'");

        if (!std::getline(f, line))
            throw std::runtime_error("timed-text line " + std::to_string(line_no) +
                                     ": block truncated before timestamp");
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        size_t arrow = line.find("-->");
        long long start_ms = 0, end_ms = 0;
        if (arrow == std::string::npos || !parse_timestamp(trim(line.substr(0, arrow)), start_ms) ||
            !parse_timestamp(trim(line.substr(arrow + 3)), end_ms))
            throw std::runtime_error("timed-text line " + std::to_string(line_no) +
                                     ": malformed timestamp '" + line + "'");

        std::string text;
        while (std::getline(f, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            std::string t = trim(strip_tags(line));
            if (trim(line).empty()) break;
            if (t.empty()) continue;
            if (!text.empty()) text += ' ';
            text += t;
        }
        if (text.empty()) continue;  // blocks with only tags carry no utterance
        Utterance u;
        u.text = std::move(text);
        u.start_ms = start_ms;
        u.end_ms = end_ms;
        out.push_back(std::move(u));
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const Utterance& a, const Utterance& b) { return a.start_ms < b.start_ms; });
    return out;
}

}  // namespace hdlg
