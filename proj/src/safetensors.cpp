#include "residscope/safetensors.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include <json.hpp>

namespace residscope {

using nlohmann::json;

namespace {

struct TensorInfo {
    std::string dtype;
    std::vector<int64_t> shape;
    uint64_t begin = 0;
    uint64_t end = 0;
};

float f16_to_f32(uint16_t h) {
    const uint32_t sign = (h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1f;
    uint32_t mant = h & 0x3ff;
    uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: normalize
            int shift = 0;
            while ((mant & 0x400) == 0) {
                mant <<= 1;
                ++shift;
            }
            mant &= 0x3ff;
            bits = sign | ((127 - 15 - shift + 1) << 23) | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float out;
    std::memcpy(&out, &bits, 4);
    return out;
}

float bf16_to_f32(uint16_t h) {
    const uint32_t bits = static_cast<uint32_t>(h) << 16;
    float out;
    std::memcpy(&out, &bits, 4);
    return out;
}

class TensorFile {
  public:
    explicit TensorFile(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("weights: cannot open " + path);
        in_.seekg(0, std::ios::end);
        file_size_ = static_cast<uint64_t>(in_.tellg());
        in_.seekg(0);
        if (file_size_ < 8) throw IoError("weights: " + path + " is truncated (no header length)");
        uint8_t lenb[8];
        in_.read(reinterpret_cast<char*>(lenb), 8);
        uint64_t header_len = 0;
        for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | lenb[i];
        if (8 + header_len > file_size_) {
            throw IoError("weights: " + path + " is truncated (header length exceeds file)");
        }
        std::string header(header_len, '\0');
        in_.read(header.data(), static_cast<std::streamsize>(header_len));
        data_begin_ = 8 + header_len;

        json j;
        try {
            j = json::parse(header);
        } catch (const json::exception& e) {
            throw IoError("weights: " + path + " has a malformed JSON header: " + e.what());
        }
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "__metadata__") continue;
            TensorInfo info;
            try {
                info.dtype = it.value().at("dtype").get<std::string>();
                info.shape = it.value().at("shape").get<std::vector<int64_t>>();
                const auto off = it.value().at("data_offsets").get<std::vector<uint64_t>>();
                if (off.size() != 2) throw IoError("weights: bad data_offsets for " + it.key());
                info.begin = off[0];
                info.end = off[1];
            } catch (const json::exception& e) {
                throw IoError("weights: bad header entry for tensor " + it.key() + ": " +
                              e.what());
            }
            tensors_[it.key()] = info;
        }
    }

    bool has(const std::string& name) const { return tensors_.count(name) != 0; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [n, _] : tensors_) out.push_back(n);
        return out;
    }

    // Reads a tensor as fp32, checking dtype and exact shape.
    std::vector<float> read(const std::string& name, const std::vector<int64_t>& want_shape) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw IoError("weights: missing tensor " + name);
        const TensorInfo& info = it->second;
        if (info.shape != want_shape) {
            std::string got = "[", want = "[";
            for (auto s : info.shape) got += std::to_string(s) + ",";
            for (auto s : want_shape) want += std::to_string(s) + ",";
            throw IoError("weights: tensor " + name + " has shape " + got + "], expected " +
                          want + "]");
        }
        size_t count = 1;
        for (auto s : info.shape) count *= static_cast<size_t>(s);

        size_t elem_size;
        if (info.dtype == "F32") {
            elem_size = 4;
        } else if (info.dtype == "F16" || info.dtype == "BF16") {
            elem_size = 2;
        } else {
            throw IoError("weights: tensor " + name + " has unsupported dtype " + info.dtype);
        }
        if (info.end - info.begin != count * elem_size ||
            data_begin_ + info.end > file_size_) {
            throw IoError("weights: tensor " + name + " is truncated or mis-sized");
        }

        in_.seekg(static_cast<std::streamoff>(data_begin_ + info.begin));
        std::vector<float> out(count);
        if (info.dtype == "F32") {
            in_.read(reinterpret_cast<char*>(out.data()),
                     static_cast<std::streamsize>(count * 4));
        } else {
            std::vector<uint16_t> raw(count);
            in_.read(reinterpret_cast<char*>(raw.data()),
                     static_cast<std::streamsize>(count * 2));
            if (info.dtype == "F16") {
                for (size_t i = 0; i < count; ++i) out[i] = f16_to_f32(raw[i]);
            } else {
                for (size_t i = 0; i < count; ++i) out[i] = bf16_to_f32(raw[i]);
            }
        }
        if (!in_) throw IoError("weights: read failed for tensor " + name);
        used_.insert(name);
        return out;
    }

    Mat read_mat(const std::string& name, int rows, int cols) {
        Mat m(rows, cols);
        m.data = read(name, {rows, cols});
        return m;
    }

    // After loading everything the schema names, any remainder is an error.
    void check_no_extras() const {
        std::string extras;
        for (const auto& [n, _] : tensors_) {
            if (!used_.count(n)) extras += (extras.empty() ? "" : ", ") + n;
        }
        if (!extras.empty()) {
            throw IoError("weights: " + path_ + " contains tensors not in the schema: " + extras);
        }
    }

  private:
    std::string path_;
    std::ifstream in_;
    uint64_t file_size_ = 0;
    uint64_t data_begin_ = 0;
    std::map<std::string, TensorInfo> tensors_;
    std::set<std::string> used_;
};

std::string layer_name(int l, const char* suffix) {
    return "model.layers." + std::to_string(l) + "." + suffix;
}

}  // namespace

Weights load_weights(const std::string& path, const ModelConfig& cfg) {
    cfg.validate();
    TensorFile f(path);
    const int d = cfg.hidden_dim;
    const int hd = cfg.head_dim();

    Weights w;
    w.embedding = f.read_mat("model.embed_tokens.weight", cfg.vocab_size, d);
    w.layers.resize(cfg.num_layers);
    for (int l = 0; l < cfg.num_layers; ++l) {
        LayerWeights& lw = w.layers[l];
        lw.wq = f.read_mat(layer_name(l, "self_attn.q_proj.weight"), cfg.num_heads * hd, d);
        lw.wk = f.read_mat(layer_name(l, "self_attn.k_proj.weight"), cfg.num_kv_heads * hd, d);
        lw.wv = f.read_mat(layer_name(l, "self_attn.v_proj.weight"), cfg.num_kv_heads * hd, d);
        lw.wo = f.read_mat(layer_name(l, "self_attn.o_proj.weight"), d, cfg.num_heads * hd);
        lw.gate = f.read_mat(layer_name(l, "mlp.gate_proj.weight"), cfg.ff_dim, d);
        lw.up = f.read_mat(layer_name(l, "mlp.up_proj.weight"), cfg.ff_dim, d);
        lw.down = f.read_mat(layer_name(l, "mlp.down_proj.weight"), d, cfg.ff_dim);
        lw.attn_norm = f.read(layer_name(l, "input_layernorm.weight"), {d});
        lw.mlp_norm = f.read(layer_name(l, "post_attention_layernorm.weight"), {d});
    }
    w.final_norm = f.read("model.norm.weight", {d});
    if (f.has("lm_head.weight")) {
        w.unembedding = f.read_mat("lm_head.weight", cfg.vocab_size, d);
    } else {
        w.unembedding = w.embedding;  // tied
    }
    f.check_no_extras();
    w.validate(cfg);
    return w;
}

namespace {

struct PendingTensor {
    std::string name;
    std::vector<int64_t> shape;
    const float* data;
    size_t count;
};

}  // namespace

void save_weights(const Weights& w, const ModelConfig& cfg, const std::string& path,
                  bool tie_unembedding) {
    w.validate(cfg);
    std::vector<PendingTensor> tensors;
    auto add = [&](const std::string& name, const Mat& m) {
        tensors.push_back({name, {m.rows, m.cols}, m.data.data(), m.data.size()});
    };
    auto add_vec = [&](const std::string& name, const std::vector<float>& v) {
        tensors.push_back({name, {static_cast<int64_t>(v.size())}, v.data(), v.size()});
    };
    add("model.embed_tokens.weight", w.embedding);
    for (int l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        add(layer_name(l, "self_attn.q_proj.weight"), lw.wq);
        add(layer_name(l, "self_attn.k_proj.weight"), lw.wk);
        add(layer_name(l, "self_attn.v_proj.weight"), lw.wv);
        add(layer_name(l, "self_attn.o_proj.weight"), lw.wo);
        add(layer_name(l, "mlp.gate_proj.weight"), lw.gate);
        add(layer_name(l, "mlp.up_proj.weight"), lw.up);
        add(layer_name(l, "mlp.down_proj.weight"), lw.down);
        add_vec(layer_name(l, "input_layernorm.weight"), lw.attn_norm);
        add_vec(layer_name(l, "post_attention_layernorm.weight"), lw.mlp_norm);
    }
    add_vec("model.norm.weight", w.final_norm);
    if (!tie_unembedding) add("lm_head.weight", w.unembedding);

    json header;
    uint64_t offset = 0;
    for (const auto& t : tensors) {
        json entry;
        entry["dtype"] = "F32";
        entry["shape"] = t.shape;
        entry["data_offsets"] = {offset, offset + t.count * 4};
        header[t.name] = entry;
        offset += t.count * 4;
    }
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("weights: cannot write " + path);
    uint64_t len = header_text.size();
    uint8_t lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = static_cast<uint8_t>((len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(lenb), 8);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& t : tensors) {
        out.write(reinterpret_cast<const char*>(t.data),
                  static_cast<std::streamsize>(t.count * 4));
    }
    if (!out) throw IoError("weights: write failed for " + path);
}

}  // namespace residscope
