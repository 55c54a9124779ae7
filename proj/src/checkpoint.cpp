#include <cstring>
#include <fstream>

#include "hdlg/training.hpp"
#include "json.hpp"

namespace hdlg {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'H', 'D', 'L', 'G'};

json config_to_json(const EncoderConfig& c) {
    return json{{"n_heads", c.n_heads},
                {"n_utt_layers", c.n_utt_layers},
                {"n_dlg_layers", c.n_dlg_layers},
                {"n_dec_layers", c.n_dec_layers},
                {"d_model", c.d_model},
                {"d_inner", c.d_inner},
                {"d_k", c.d_k},
                {"d_v", c.d_v},
                {"context_size", c.context_size},
                {"max_utt_len", c.max_utt_len},
                {"vocab_size", c.vocab_size},
                {"dec_heads", c.dec_heads},
                {"flat_layers", c.flat_layers},
                {"dropout", c.dropout},
                {"mlp_widths", c.mlp_widths},
                {"size_tag", to_string(c.size_tag)},
                {"encoder_kind", to_string(c.encoder_kind)}};
}

EncoderConfig config_from_json(const json& j) {
    EncoderConfig c;
    c.n_heads = j.at("n_heads");
    c.n_utt_layers = j.at("n_utt_layers");
    c.n_dlg_layers = j.at("n_dlg_layers");
    c.n_dec_layers = j.at("n_dec_layers");
    c.d_model = j.at("d_model");
    c.d_inner = j.at("d_inner");
    c.d_k = j.at("d_k");
    c.d_v = j.at("d_v");
    c.context_size = j.at("context_size");
    c.max_utt_len = j.at("max_utt_len");
    c.vocab_size = j.at("vocab_size");
    c.dec_heads = j.at("dec_heads");
    c.flat_layers = j.at("flat_layers");
    c.dropout = j.at("dropout");
    auto w = j.at("mlp_widths");
    c.mlp_widths = {w.at(0), w.at(1), w.at(2)};
    std::string tag = j.at("size_tag");
    c.size_tag = tag == "tiny" ? SizeTag::TINY : tag == "small" ? SizeTag::SMALL : SizeTag::MINI;
    std::string kind = j.at("encoder_kind");
    c.encoder_kind = kind == "hier"   ? EncoderKind::HIER
                     : kind == "flat" ? EncoderKind::FLAT
                                      : EncoderKind::RECURRENT;
    return c;
}

struct PayloadEntry {
    std::string name;
    Shape shape;
    uint64_t offset;  // in floats, relative to payload start
};

json entries_json(const std::map<std::string, Tensor<float>>& tensors, uint64_t& cursor) {
    json arr = json::array();
    for (const auto& [name, t] : tensors) {
        arr.push_back({{"name", name}, {"shape", t.shape}, {"offset", cursor}});
        cursor += static_cast<uint64_t>(t.size());
    }
    return arr;
}

void write_payload(std::ofstream& f, const std::map<std::string, Tensor<float>>& tensors) {
    for (const auto& [name, t] : tensors)
        f.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

std::map<std::string, Tensor<float>> read_group(const json& arr, const std::vector<float>& payload) {
    std::map<std::string, Tensor<float>> out;
    for (const auto& e : arr) {
        Shape shape = e.at("shape").get<Shape>();
        uint64_t off = e.at("offset");
        Tensor<float> t(shape);
        if (off + t.data.size() > payload.size())
            throw std::runtime_error("checkpoint: payload entry out of bounds");
        std::memcpy(t.data.data(), payload.data() + off, t.data.size() * sizeof(float));
        out.emplace(e.at("name").get<std::string>(), std::move(t));
    }
    return out;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
    json header;
    header["config"] = config_to_json(config);
    if (labels) {
        header["labels"] = labels->names;
        header["decoder"] = to_string(decoder);
    }
    header["step"] = step;
    header["rng_state"] = rng_state;
    header["metrics"] = metrics;

    uint64_t cursor = 0;
    header["params"] = entries_json(params.tensors, cursor);
    if (has_optim) {
        json opt;
        opt["step"] = optim.step;
        opt["beta1"] = optim.beta1;
        opt["beta2"] = optim.beta2;
        opt["eps"] = optim.eps;
        opt["weight_decay"] = optim.weight_decay;
        opt["base_lr"] = optim.base_lr;
        opt["warmup_steps"] = optim.warmup_steps;
        opt["total_steps"] = optim.total_steps;
        opt["m"] = entries_json(optim.m, cursor);
        opt["v"] = entries_json(optim.v, cursor);
        header["optim"] = std::move(opt);
    }

    std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write(kMagic, 4);
    uint32_t ver = static_cast<uint32_t>(version);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    write_payload(f, params.tensors);
    if (has_optim) {
        write_payload(f, optim.m);
        write_payload(f, optim.v);
    }
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint " + path + ": bad magic bytes");
    uint32_t ver = 0;
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!f || ver != 1)
        throw std::runtime_error("checkpoint " + path + ": unsupported format version " +
                                 std::to_string(ver));
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw std::runtime_error("checkpoint " + path + ": truncated header");
    json header = json::parse(hs);

    std::vector<float> payload;
    {
        std::vector<char> rest((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
        payload.resize(rest.size() / sizeof(float));
        std::memcpy(payload.data(), rest.data(), payload.size() * sizeof(float));
    }

    Checkpoint c;
    c.version = static_cast<int>(ver);
    c.config = config_from_json(header.at("config"));
    if (header.contains("labels")) {
        LabelSet ls;
        ls.names = header.at("labels").get<std::vector<std::string>>();
        c.labels = std::move(ls);
        std::string d = header.at("decoder");
        c.decoder = d == "mlp" ? DecoderKind::MLP : d == "gru" ? DecoderKind::GRU : DecoderKind::CRF;
    }
    c.step = header.at("step");
    c.rng_state = header.at("rng_state");
    if (header.contains("metrics"))
        c.metrics = header.at("metrics").get<std::map<std::string, double>>();
    c.params.tensors = read_group(header.at("params"), payload);
    if (header.contains("optim")) {
        const json& opt = header.at("optim");
        c.has_optim = true;
        c.optim.step = opt.at("step");
        c.optim.beta1 = opt.at("beta1");
        c.optim.beta2 = opt.at("beta2");
        c.optim.eps = opt.at("eps");
        c.optim.weight_decay = opt.at("weight_decay");
        c.optim.base_lr = opt.at("base_lr");
        c.optim.warmup_steps = opt.at("warmup_steps");
        c.optim.total_steps = opt.at("total_steps");
        c.optim.m = read_group(opt.at("m"), payload);
        c.optim.v = read_group(opt.at("v"), payload);
    }
    return c;
}

}  // namespace hdlg
