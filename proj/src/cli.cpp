#include "hdlg/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "hdlg/decoders.hpp"
#include "hdlg/training.hpp"

namespace hdlg {

namespace {

std::string trim_ws(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

int to_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        int x = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "': expected number, got '" + v + "'");
    }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        unsigned long long x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw std::runtime_error("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

SizeTag parse_size(const std::string& key, const std::string& v) {
    if (v == "tiny") return SizeTag::TINY;
    if (v == "small") return SizeTag::SMALL;
    if (v == "mini") return SizeTag::MINI;
    throw std::runtime_error("config key '" + key + "': expected tiny|small|mini, got '" + v + "'");
}

LossKind parse_loss(const std::string& key, const std::string& v) {
    if (v == "mlm") return LossKind::MLM;
    if (v == "gap") return LossKind::GAP;
    throw std::runtime_error("config key '" + key + "': expected mlm|gap, got '" + v + "'");
}

DecoderKind parse_decoder(const std::string& key, const std::string& v) {
    if (v == "mlp") return DecoderKind::MLP;
    if (v == "gru") return DecoderKind::GRU;
    if (v == "crf") return DecoderKind::CRF;
    throw std::runtime_error("config key '" + key + "': expected mlp|gru|crf, got '" + v + "'");
}

EncoderKind parse_encoder(const std::string& key, const std::string& v) {
    if (v == "hier") return EncoderKind::HIER;
    if (v == "flat") return EncoderKind::FLAT;
    if (v == "recurrent") return EncoderKind::RECURRENT;
    throw std::runtime_error("config key '" + key + "': expected hier|flat|recurrent, got '" + v +
                             "'");
}

void apply_key(RunConfig& run, EncoderConfig& enc, const std::string& key, const std::string& v) {
    if (key == "model.size") {
        enc = EncoderConfig::by_tag(parse_size(key, v));
    } else if (key == "model.n_heads") enc.n_heads = to_int(key, v);
    else if (key == "model.n_utt_layers") enc.n_utt_layers = to_int(key, v);
    else if (key == "model.n_dlg_layers") enc.n_dlg_layers = to_int(key, v);
    else if (key == "model.n_dec_layers") enc.n_dec_layers = to_int(key, v);
    else if (key == "model.d_model") enc.d_model = to_int(key, v);
    else if (key == "model.d_inner") enc.d_inner = to_int(key, v);
    else if (key == "model.d_k") enc.d_k = to_int(key, v);
    else if (key == "model.d_v") enc.d_v = to_int(key, v);
    else if (key == "model.context_size") enc.context_size = to_int(key, v);
    else if (key == "model.max_utt_len") enc.max_utt_len = to_int(key, v);
    else if (key == "model.vocab_size") enc.vocab_size = to_int(key, v);
    else if (key == "model.dec_heads") enc.dec_heads = to_int(key, v);
    else if (key == "model.flat_layers") enc.flat_layers = to_int(key, v);
    else if (key == "model.dropout") enc.dropout = to_double(key, v);
    else if (key == "model.encoder") enc.encoder_kind = parse_encoder(key, v);
    else if (key == "run.batch_size") run.batch_size = to_int(key, v);
    else if (key == "run.lr") run.base_lr = to_double(key, v);
    else if (key == "run.steps") run.steps = to_int(key, v);
    else if (key == "run.eval_every") run.eval_every = to_int(key, v);
    else if (key == "run.seed") run.seed = to_u64(key, v);
    else if (key == "run.loss") run.loss = parse_loss(key, v);
    else if (key == "run.lambda_u") run.weights.lambda_u = to_double(key, v);
    else if (key == "run.lambda_d") run.weights.lambda_d = to_double(key, v);
    else if (key == "run.p_omega") run.p_omega = to_double(key, v);
    else if (key == "run.p_context") run.p_context = to_double(key, v);
    else if (key == "run.mask_count") run.mask_count = to_int(key, v);
    else if (key == "run.decoder") run.decoder = parse_decoder(key, v);
    else if (key == "run.warmup_steps") run.warmup_steps = to_int(key, v);
    else if (key == "run.total_steps") run.total_steps = to_int(key, v);
    else if (key == "run.weight_decay") run.weight_decay = to_double(key, v);
    else if (key == "run.clip_norm") run.clip_norm = to_double(key, v);
    else if (key == "run.val_fraction") run.val_fraction = to_double(key, v);
    else if (key == "run.test_fraction") run.test_fraction = to_double(key, v);
    else if (key == "run.train_fraction") run.train_fraction = to_double(key, v);
    else throw std::runtime_error("unknown config key '" + key + "'");
}

}  // namespace

std::pair<RunConfig, EncoderConfig> load_config(
    const std::string& path, const std::map<std::string, std::string>& overrides) {
    RunConfig run;
    EncoderConfig enc = EncoderConfig::tiny();
    std::vector<std::pair<std::string, std::string>> file_kv;
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot read config file: " + path);
        std::string line;
        int line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            std::string t = trim_ws(line);
            if (t.empty() || t[0] == '#') continue;
            size_t eq = t.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config file " + path + " line " +
                                         std::to_string(line_no) + ": expected key = value");
            file_kv.emplace_back(trim_ws(t.substr(0, eq)), trim_ws(t.substr(eq + 1)));
        }
    }
    // model.size first so explicit dimension keys override the preset
    std::stable_sort(file_kv.begin(), file_kv.end(), [](const auto& a, const auto& b) {
        return (a.first == "model.size") > (b.first == "model.size");
    });
    for (const auto& [k, v] : file_kv) apply_key(run, enc, k, v);
    if (overrides.count("model.size")) apply_key(run, enc, "model.size", overrides.at("model.size"));
    for (const auto& [k, v] : overrides)
        if (k != "model.size") apply_key(run, enc, k, v);
    return {run, enc};
}

std::string config_dump(const RunConfig& run, const EncoderConfig& enc) {
    std::ostringstream os;
    os << "model.size = " << to_string(enc.size_tag) << "\n"
       << "model.encoder = " << to_string(enc.encoder_kind) << "\n"
       << "model.n_heads = " << enc.n_heads << "\n"
       << "model.n_utt_layers = " << enc.n_utt_layers << "\n"
       << "model.n_dlg_layers = " << enc.n_dlg_layers << "\n"
       << "model.n_dec_layers = " << enc.n_dec_layers << "\n"
       << "model.d_model = " << enc.d_model << "\n"
       << "model.d_inner = " << enc.d_inner << "\n"
       << "model.d_k = " << enc.d_k << "\n"
       << "model.d_v = " << enc.d_v << "\n"
       << "model.context_size = " << enc.context_size << "\n"
       << "model.max_utt_len = " << enc.max_utt_len << "\n"
       << "model.vocab_size = " << enc.vocab_size << "\n"
       << "model.dec_heads = " << enc.dec_heads << "\n"
       << "model.dropout = " << enc.dropout << "\n"
       << "run.batch_size = " << run.batch_size << "\n"
       << "run.lr = " << run.base_lr << "\n"
       << "run.steps = " << run.steps << "\n"
       << "run.eval_every = " << run.eval_every << "\n"
       << "run.seed = " << run.seed << "\n"
       << "run.loss = " << to_string(run.loss) << "\n"
       << "run.lambda_u = " << run.weights.lambda_u << "\n"
       << "run.lambda_d = " << run.weights.lambda_d << "\n"
       << "run.p_omega = " << run.p_omega << "\n"
       << "run.p_context = " << run.p_context << "\n"
       << "run.decoder = " << to_string(run.decoder) << "\n"
       << "run.warmup_steps = " << run.warmup_steps << "\n"
       << "run.weight_decay = " << run.weight_decay << "\n"
       << "run.clip_norm = " << run.clip_norm << "\n";
    return os.str();
}

namespace {

// flags shared by the training subcommands; collected into the override map
// so file values < flag values
struct CommonFlags {
    std::string config_path;
    std::map<std::string, std::string> overrides;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "config file with flat dotted keys");
        auto track = [this](const std::string& key) {
            return [this, key](const std::string& v) { overrides[key] = v; };
        };
        cmd->add_option_function<std::string>("--seed", track("run.seed"), "rng seed");
        cmd->add_option_function<std::string>("--size", track("model.size"),
                                              "model size: tiny|small|mini");
        cmd->add_option_function<std::string>("--loss", track("run.loss"), "loss kind: mlm|gap");
        cmd->add_option_function<std::string>("--lambda-u", track("run.lambda_u"),
                                              "utterance-level loss weight");
        cmd->add_option_function<std::string>("--lambda-d", track("run.lambda_d"),
                                              "dialog-level loss weight");
        cmd->add_option_function<std::string>("--p-omega", track("run.p_omega"),
                                              "token mask proportion");
        cmd->add_option_function<std::string>("--p-c", track("run.p_context"),
                                              "utterance mask proportion");
        cmd->add_option_function<std::string>("--decoder", track("run.decoder"),
                                              "decoder head: mlp|gru|crf");
        cmd->add_option_function<std::string>("--encoder", track("model.encoder"),
                                              "encoder: hier|flat|recurrent");
        cmd->add_option_function<std::string>("--steps", track("run.steps"), "training steps");
        cmd->add_option_function<std::string>("--batch-size", track("run.batch_size"),
                                              "batch size");
        cmd->add_option_function<std::string>("--lr", track("run.lr"), "base learning rate");
        cmd->add_option_function<std::string>("--vocab-size", track("model.vocab_size"),
                                              "vocabulary size");
    }

    std::pair<RunConfig, EncoderConfig> resolve() const {
        return load_config(config_path, overrides);
    }
};

void log_resolved(MetricsLog& log, const RunConfig& run, const EncoderConfig& enc) {
    log.set("config", config_dump(run, enc));
    log.set("seed", static_cast<double>(run.seed));
}

Vocab load_or_train_vocab(const std::string& vocab_path, const std::vector<Conversation>& convs,
                          int vocab_size) {
    std::ifstream probe(vocab_path);
    if (probe.good()) return Vocab::load(vocab_path);
    std::vector<std::string> texts;
    for (const auto& c : convs)
        for (const auto& u : c.utterances) texts.push_back(u.text);
    Vocab v = train_vocab(texts, vocab_size);
    if (!vocab_path.empty()) v.save(vocab_path);
    return v;
}

LabelSet labels_from_corpus(const std::vector<Conversation>& convs) {
    int max_label = -1;
    for (const auto& c : convs)
        for (const auto& u : c.utterances)
            if (u.label) max_label = std::max(max_label, *u.label);
    if (max_label < 0) throw std::runtime_error("corpus carries no labels");
    LabelSet ls;
    for (int i = 0; i <= max_label; ++i) ls.names.push_back("label" + std::to_string(i));
    return ls;
}

int run_dispatch(const std::vector<std::string>& args) {
    CLI::App app{"hierarchical dialog encoder toolkit"};
    app.require_subcommand(1);

    // segment
    auto* seg = app.add_subcommand("segment", "split a timed-text stream into conversations");
    std::string seg_in, seg_out;
    long long gap_ms = kDefaultGapMs;
    int min_len = 5;
    seg->add_option("--in", seg_in, "timed-text input file")->required();
    seg->add_option("--out", seg_out, "corpus output file")->required();
    seg->add_option("--gap-ms", gap_ms, "max silence inside a conversation (ms)");
    seg->add_option("--min-len", min_len, "drop conversations shorter than this");

    // build-vocab
    auto* bv = app.add_subcommand("build-vocab", "train a subword vocabulary from a corpus");
    std::string bv_in, bv_out;
    int bv_size = 512;
    bool bv_no_lower = false;
    bv->add_option("--in", bv_in, "corpus file")->required();
    bv->add_option("--out", bv_out, "vocab output file")->required();
    bv->add_option("--vocab-size", bv_size, "target vocabulary size");
    bv->add_flag("--no-lowercase", bv_no_lower, "keep original casing");

    // gen-synth
    auto* gs = app.add_subcommand("gen-synth", "generate a synthetic labelled corpus");
    std::string gs_out, gs_labels_out;
    SynthSpec spec;
    gs->add_option("--out", gs_out, "corpus output file")->required();
    gs->add_option("--labels-out", gs_labels_out, "label set output file");
    gs->add_option("--num-conversations", spec.num_conversations);
    gs->add_option("--utterances-per-conversation", spec.utterances_per_conversation);
    gs->add_option("--vocab-words", spec.vocab_words);
    gs->add_option("--labels", spec.labels);
    gs->add_option("--signal", spec.label_signal_strength);
    gs->add_option("--stickiness", spec.transition_stickiness);
    gs->add_option("--seed", spec.seed);

    // pretrain
    auto* pt = app.add_subcommand("pretrain", "run hierarchical pre-training");
    std::string pt_in, pt_out, pt_vocab, pt_metrics, pt_resume;
    CommonFlags pt_flags;
    pt->add_option("--in", pt_in, "corpus file")->required();
    pt->add_option("--out", pt_out, "checkpoint output")->required();
    pt->add_option("--vocab", pt_vocab, "vocab file (trained here if missing)")->required();
    pt->add_option("--metrics", pt_metrics, "metrics csv path");
    pt->add_option("--resume", pt_resume, "resume from checkpoint");
    pt_flags.attach(pt);

    // finetune
    auto* ft = app.add_subcommand("finetune", "fine-tune with a decoder head");
    std::string ft_in, ft_out, ft_vocab, ft_init, ft_metrics, ft_decoder_all;
    CommonFlags ft_flags;
    bool ft_all_decoders = false;
    ft->add_option("--in", ft_in, "labelled corpus file")->required();
    ft->add_option("--out", ft_out, "checkpoint output");
    ft->add_option("--vocab", ft_vocab, "vocab file (trained here if missing)")->required();
    ft->add_option("--init", ft_init, "pretrained checkpoint to start from");
    ft->add_option("--metrics", ft_metrics, "metrics csv path");
    ft->add_flag("--all-decoders", ft_all_decoders,
                 "train mlp, gru and crf heads and print a comparison table");
    ft_flags.attach(ft);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "measure accuracy of a fine-tuned checkpoint");
    std::string ev_in, ev_vocab, ev_ckpt;
    ev->add_option("--in", ev_in, "labelled corpus file")->required();
    ev->add_option("--vocab", ev_vocab, "vocab file")->required();
    ev->add_option("--ckpt", ev_ckpt, "fine-tuned checkpoint")->required();

    // fractions
    auto* fr = app.add_subcommand("fractions", "training-fraction experiment");
    std::string fr_in, fr_vocab, fr_inits, fr_metrics;
    std::string fr_fractions = "0.2,0.5,1.0";
    int fr_seeds = 3;
    CommonFlags fr_flags;
    fr->add_option("--in", fr_in, "labelled corpus file")->required();
    fr->add_option("--vocab", fr_vocab, "vocab file (trained here if missing)")->required();
    fr->add_option("--inits", fr_inits, "comma-separated checkpoints; 'random' for fresh init");
    fr->add_option("--fractions", fr_fractions, "comma-separated training fractions");
    fr->add_option("--n-seeds", fr_seeds, "seeds per cell");
    fr->add_option("--metrics", fr_metrics, "metrics csv path");
    fr_flags.attach(fr);

    // inspect-checkpoint
    auto* ic = app.add_subcommand("inspect-checkpoint", "print checkpoint metadata");
    std::string ic_ckpt;
    ic->add_option("--ckpt", ic_ckpt, "checkpoint file")->required();

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // help text, exit 0
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << "\n";
        return 1;
    }

    if (seg->parsed()) {
        auto stream = ingest_timed_text(seg_in);
        auto convs = segment_conversations(stream, gap_ms, min_len);
        write_corpus(convs, seg_out);
        std::cout << "wrote " << convs.size() << " conversations to " << seg_out << "\n";
        return 0;
    }
    if (bv->parsed()) {
        auto convs = read_corpus(bv_in);
        std::vector<std::string> texts;
        for (const auto& c : convs)
            for (const auto& u : c.utterances) texts.push_back(u.text);
        Vocab v = train_vocab(texts, bv_size, !bv_no_lower);
        v.save(bv_out);
        std::cout << "wrote vocab of " << v.size() << " tokens to " << bv_out << "\n";
        return 0;
    }
    if (gs->parsed()) {
        auto [convs, labels] = generate_synthetic_corpus(spec);
        write_corpus(convs, gs_out);
        if (!gs_labels_out.empty()) labels.save(gs_labels_out);
        std::cout << "wrote " << convs.size() << " synthetic conversations to " << gs_out << "\n";
        return 0;
    }
    if (pt->parsed()) {
        auto [run, enc] = pt_flags.resolve();
        auto convs = read_corpus(pt_in);
        Vocab vocab = load_or_train_vocab(pt_vocab, convs, enc.vocab_size);
        enc.vocab_size = vocab.size();
        MetricsLog log(pt_metrics);
        log_resolved(log, run, enc);
        CorpusSplits splits = split_corpus(convs, run.val_fraction, 0.0, run.seed);
        Checkpoint resume;
        const Checkpoint* resume_p = nullptr;
        if (!pt_resume.empty()) {
            resume = Checkpoint::load(pt_resume);
            resume_p = &resume;
        }
        PretrainResult res = pretrain(splits.train, splits.val, vocab, enc, run,
                                      pt_metrics.empty() ? nullptr : &log, resume_p);
        res.last.save(pt_out + ".last");
        res.best.save(pt_out);
        std::cout << "best val loss " << res.best.metrics["val_loss"] << " at step "
                  << res.best.step << "; checkpoints: " << pt_out << ", " << pt_out << ".last\n";
        if (!pt_metrics.empty()) {
            log.set("best_val_loss", res.best.metrics["val_loss"]);
            log.write_summary(pt_metrics + ".summary.json");
        }
        return 0;
    }
    if (ft->parsed()) {
        auto [run, enc] = ft_flags.resolve();
        auto convs = read_corpus(ft_in);
        Vocab vocab = load_or_train_vocab(ft_vocab, convs, enc.vocab_size);
        enc.vocab_size = vocab.size();
        LabelSet labels = labels_from_corpus(convs);
        MetricsLog log(ft_metrics);
        log_resolved(log, run, enc);
        CorpusSplits splits = split_corpus(convs, run.val_fraction, run.test_fraction, run.seed);
        Checkpoint init;
        const Checkpoint* init_p = nullptr;
        if (!ft_init.empty()) {
            init = Checkpoint::load(ft_init);
            enc = init.config;
            init_p = &init;
        }
        std::vector<DecoderKind> kinds =
            ft_all_decoders ? std::vector<DecoderKind>{DecoderKind::MLP, DecoderKind::GRU,
                                                       DecoderKind::CRF}
                            : std::vector<DecoderKind>{run.decoder};
        std::cout << "decoder  test_accuracy\n";
        for (DecoderKind kind : kinds) {
            RunConfig r = run;
            r.decoder = kind;
            FinetuneResult res = finetune(init_p, splits, labels, vocab, enc, r,
                                          ft_metrics.empty() ? nullptr : &log);
            std::cout << to_string(kind) << "      " << res.test_accuracy << "\n";
            if (!ft_out.empty())
                res.best.save(kinds.size() == 1 ? ft_out : ft_out + "." + to_string(kind));
        }
        if (!ft_metrics.empty()) log.write_summary(ft_metrics + ".summary.json");
        return 0;
    }
    if (ev->parsed()) {
        Checkpoint ckpt = Checkpoint::load(ev_ckpt);
        if (!ckpt.labels) throw std::runtime_error("checkpoint has no decoder head to evaluate");
        auto convs = read_corpus(ev_in);
        Vocab vocab = Vocab::load(ev_vocab);
        double acc = evaluate(ckpt, convs, vocab);
        std::cout << "accuracy " << acc << " over " << convs.size() << " conversations\n";
        return 0;
    }
    if (fr->parsed()) {
        auto [run, enc] = fr_flags.resolve();
        auto convs = read_corpus(fr_in);
        Vocab vocab = load_or_train_vocab(fr_vocab, convs, enc.vocab_size);
        enc.vocab_size = vocab.size();
        LabelSet labels = labels_from_corpus(convs);
        MetricsLog log(fr_metrics);
        log_resolved(log, run, enc);
        CorpusSplits splits = split_corpus(convs, run.val_fraction, run.test_fraction, run.seed);

        std::vector<Checkpoint> loaded;
        std::vector<std::pair<std::string, const Checkpoint*>> inits;
        std::stringstream init_ss(fr_inits.empty() ? "random" : fr_inits);
        std::string item;
        while (std::getline(init_ss, item, ',')) {
            if (item == "random") {
                inits.emplace_back("random", nullptr);
            } else {
                loaded.push_back(Checkpoint::load(item));
                inits.emplace_back(item, nullptr);
            }
        }
        // pointers resolved after `loaded` stops reallocating
        size_t li = 0;
        for (auto& [name, p] : inits)
            if (name != "random") p = &loaded[li++];

        std::vector<double> fracs;
        std::stringstream frac_ss(fr_fractions);
        while (std::getline(frac_ss, item, ',')) fracs.push_back(std::stod(item));

        FractionTable table = fraction_experiment(inits, splits, labels, vocab, enc, run, fracs,
                                                  fr_seeds, fr_metrics.empty() ? nullptr : &log);
        std::cout << "val_hash " << table.val_hash << " test_hash " << table.test_hash << "\n";
        std::cout << "init  fraction  mean  stddev\n";
        for (const auto& [name, p] : inits)
            for (double f : fracs) {
                auto [mean, sd] = table.cell_stats(name, f);
                std::cout << name << "  " << f << "  " << mean << "  " << sd << "\n";
            }
        if (!fr_metrics.empty()) log.write_summary(fr_metrics + ".summary.json");
        return 0;
    }
    if (ic->parsed()) {
        Checkpoint ckpt = Checkpoint::load(ic_ckpt);
        ParamBreakdown b = parameter_count(ckpt.params);
        std::cout << "format version " << ckpt.version << "\n"
                  << "step " << ckpt.step << "\n"
                  << config_dump(RunConfig{}, ckpt.config) << "params.embeddings " << b.embeddings
                  << "\nparams.word_level " << b.word_level << "\nparams.sequence_level "
                  << b.sequence_level << "\nparams.total " << b.total << "\nparams.full " << b.full
                  << "\n";
        for (const auto& [k, v] : ckpt.metrics) std::cout << "metric." << k << " " << v << "\n";
        return 0;
    }
    return 1;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    try {
        return run_dispatch(args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace hdlg
