#include "residscope/weights.hpp"

#include <cmath>
#include <string>

#include "residscope/rng.hpp"

namespace residscope {

namespace {

void check_shape(const Mat& m, int rows, int cols, const std::string& name) {
    if (m.rows != rows || m.cols != cols) {
        throw ValidationError("weights: tensor " + name + " has shape [" +
                              std::to_string(m.rows) + ", " + std::to_string(m.cols) +
                              "], expected [" + std::to_string(rows) + ", " +
                              std::to_string(cols) + "]");
    }
}

void check_vec(const std::vector<float>& v, int n, const std::string& name) {
    if (static_cast<int>(v.size()) != n) {
        throw ValidationError("weights: tensor " + name + " has length " +
                              std::to_string(v.size()) + ", expected " + std::to_string(n));
    }
}

}  // namespace

void Weights::validate(const ModelConfig& cfg) const {
    cfg.validate();
    const int d = cfg.hidden_dim;
    const int hd = cfg.head_dim();
    check_shape(embedding, cfg.vocab_size, d, "embedding");
    if (static_cast<int>(layers.size()) != cfg.num_layers) {
        throw ValidationError("weights: expected " + std::to_string(cfg.num_layers) +
                              " layers, found " + std::to_string(layers.size()));
    }
    for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& lw = layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        check_shape(lw.wq, cfg.num_heads * hd, d, p + "wq");
        check_shape(lw.wk, cfg.num_kv_heads * hd, d, p + "wk");
        check_shape(lw.wv, cfg.num_kv_heads * hd, d, p + "wv");
        check_shape(lw.wo, d, cfg.num_heads * hd, p + "wo");
        check_shape(lw.gate, cfg.ff_dim, d, p + "gate");
        check_shape(lw.up, cfg.ff_dim, d, p + "up");
        check_shape(lw.down, d, cfg.ff_dim, p + "down");
        check_vec(lw.attn_norm, d, p + "attn_norm");
        check_vec(lw.mlp_norm, d, p + "mlp_norm");
    }
    check_vec(final_norm, d, "final_norm");
    check_shape(unembedding, cfg.vocab_size, d, "unembedding");
}

namespace {

Mat random_mat(Rng& rng, int rows, int cols, float scale) {
    Mat m(rows, cols);
    for (auto& v : m.data) v = static_cast<float>(rng.next_normal()) * scale;
    return m;
}

}  // namespace

Weights random_weights(const ModelConfig& cfg, uint64_t seed, float scale) {
    cfg.validate();
    if (scale <= 0.0f) scale = 1.0f / std::sqrt(static_cast<float>(cfg.hidden_dim));
    Rng rng(seed);
    Weights w;
    const int d = cfg.hidden_dim;
    const int hd = cfg.head_dim();
    w.embedding = random_mat(rng, cfg.vocab_size, d, 1.0f);
    w.layers.resize(cfg.num_layers);
    for (auto& lw : w.layers) {
        lw.wq = random_mat(rng, cfg.num_heads * hd, d, scale);
        lw.wk = random_mat(rng, cfg.num_kv_heads * hd, d, scale);
        lw.wv = random_mat(rng, cfg.num_kv_heads * hd, d, scale);
        lw.wo = random_mat(rng, d, cfg.num_heads * hd, scale);
        lw.gate = random_mat(rng, cfg.ff_dim, d, scale);
        lw.up = random_mat(rng, cfg.ff_dim, d, scale);
        lw.down = random_mat(rng, d, cfg.ff_dim, scale);
        lw.attn_norm.assign(d, 1.0f);
        lw.mlp_norm.assign(d, 1.0f);
    }
    w.final_norm.assign(d, 1.0f);
    w.unembedding = random_mat(rng, cfg.vocab_size, d, 1.0f);
    return w;
}

}  // namespace residscope
