#include "residscope/model.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <tuple>

namespace residscope {

void validate_tokens(std::span<const int> tokens, const ModelConfig& cfg) {
    if (tokens.empty()) throw ValidationError("token sequence is empty");
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len) {
        throw ValidationError("token sequence length " + std::to_string(tokens.size()) +
                              " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size) {
            throw ValidationError("token id " + std::to_string(tokens[i]) + " at position " +
                                  std::to_string(i) + " out of range [0, " +
                                  std::to_string(cfg.vocab_size) + ")");
        }
    }
}

Mat embed(std::span<const int> tokens, const Weights& w, const ModelConfig& cfg) {
    validate_tokens(tokens, cfg);
    const int T = static_cast<int>(tokens.size());
    Mat x(T, cfg.hidden_dim);
    for (int i = 0; i < T; ++i) {
        std::memcpy(x.row(i), w.embedding.row(tokens[i]), sizeof(float) * cfg.hidden_dim);
    }
    return x;
}

void rms_norm(const float* x, const float* scale, int n, float eps, float* out) {
    float ss = 0.0f;
    for (int i = 0; i < n; ++i) ss += x[i] * x[i];
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(n) + eps);
    for (int i = 0; i < n; ++i) out[i] = x[i] * inv * scale[i];
}

void apply_rope(float* v, int n, int position, float rope_theta) {
    // Half-split pairing: (v[k], v[k + n/2]) is one complex plane. Matches the
    // published checkpoint's projection layout.
    const int half = n / 2;
    for (int k = 0; k < half; ++k) {
        const float freq =
            std::pow(rope_theta, -2.0f * static_cast<float>(k) / static_cast<float>(n));
        const float angle = static_cast<float>(position) * freq;
        const float c = std::cos(angle);
        const float s = std::sin(angle);
        const float a = v[k];
        const float b = v[k + half];
        v[k] = a * c - b * s;
        v[k + half] = a * s + b * c;
    }
}

// ---------------------------------------------------------------------------
// EdgeMaskTable

EdgeMaskTable::EdgeMaskTable(int num_layers, int num_heads, int seq_len)
    : num_heads_(num_heads),
      seq_len_(seq_len),
      per_layer_(num_layers),
      layer_used_(num_layers, 0) {}

void EdgeMaskTable::block(int layer, int head, int query, int key) {
    if (layer < 0 || layer >= static_cast<int>(per_layer_.size())) {
        throw InterventionError("edge mask layer out of range: " + std::to_string(layer));
    }
    if (query < 0 || query >= seq_len_ || key < 0 || key > query) {
        throw InterventionError("edge mask (" + std::to_string(query) + " -> " +
                                std::to_string(key) + ") is out of range or non-causal");
    }
    auto& grid = per_layer_[layer];
    if (grid.empty()) grid.assign(static_cast<size_t>(num_heads_) * seq_len_ * seq_len_, 0);
    layer_used_[layer] = 1;
    const auto idx = [&](int h) {
        return (static_cast<size_t>(h) * seq_len_ + query) * seq_len_ + key;
    };
    if (head < 0) {
        for (int h = 0; h < num_heads_; ++h) grid[idx(h)] = 1;
    } else {
        if (head >= num_heads_) {
            throw InterventionError("edge mask head out of range: " + std::to_string(head));
        }
        grid[idx(head)] = 1;
    }
}

bool EdgeMaskTable::blocked(int layer, int head, int query, int key) const {
    const auto& grid = per_layer_[layer];
    if (grid.empty()) return false;
    return grid[(static_cast<size_t>(head) * seq_len_ + query) * seq_len_ + key] != 0;
}

EdgeMaskTable EdgeMaskTable::from_spec(const InterventionSpec& spec, const ModelConfig& cfg,
                                       int seq_len) {
    EdgeMaskTable table(cfg.num_layers, cfg.num_heads, seq_len);
    for (const auto& e : spec.edge_masks) {
        if (e.heads.empty()) {
            table.block(e.layer, -1, e.query_position, e.key_position);
        } else {
            for (int h : e.heads) table.block(e.layer, h, e.query_position, e.key_position);
        }
    }
    return table;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

// Replacement hooks indexed for O(log n) lookup during the pass.
struct HookIndex {
    // key: (kind, layer, head, position) -> replacement vector (nullptr = zero)
    std::map<std::tuple<HookKind, int, int, int>, const std::vector<float>*> table;

    void add(const HookPoint& h, const std::vector<float>* value) {
        table[{h.kind, h.layer, h.head, h.position}] = value;
    }

    // Returns true if a replacement applies; writes it into dst.
    bool apply(HookKind kind, int layer, int head, int pos, float* dst, int n) const {
        auto it = table.find({kind, layer, head, pos});
        if (it == table.end()) return false;
        if (it->second == nullptr) {
            std::memset(dst, 0, sizeof(float) * n);
        } else {
            std::memcpy(dst, it->second->data(), sizeof(float) * n);
        }
        return true;
    }
};

HookIndex build_hook_index(const InterventionSpec& spec) {
    HookIndex idx;
    for (const auto& k : spec.knockouts) {
        idx.add(k.at, k.mode == KnockoutMode::zero ? nullptr : &k.mean);
    }
    for (const auto& p : spec.patches) idx.add(p.at, &p.value);
    return idx;
}

const InterventionSpec& empty_spec() {
    static const InterventionSpec spec;
    return spec;
}

ForwardResult run_forward(const Model& model, std::span<const int> tokens,
                          const InterventionSpec& spec, const EdgeMaskTable& masks,
                          bool want_full_logits) {
    const ModelConfig& cfg = model.config;
    const Weights& w = model.weights;
    const int T = static_cast<int>(tokens.size());
    const int d = cfg.hidden_dim;
    const int H = cfg.num_heads;
    const int Hkv = cfg.num_kv_heads;
    const int hd = cfg.head_dim();
    const int group = cfg.kv_group();
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));

    spec.validate(cfg, T);
    const HookIndex hooks = build_hook_index(spec);

    ForwardResult result;
    ActivationRecord& rec = result.record;
    rec.seq_len = T;
    rec.num_layers = cfg.num_layers;
    rec.num_heads = H;
    rec.num_kv_heads = Hkv;
    rec.head_dim = hd;
    rec.hidden_dim = d;
    rec.embeddings = embed(tokens, w, cfg);
    rec.attn_out.assign(cfg.num_layers, Mat(T, d));
    rec.mlp_out.assign(cfg.num_layers, Mat(T, d));
    rec.resid_out.assign(cfg.num_layers, Mat(T, d));
    rec.attn.assign(cfg.num_layers, std::vector<Mat>(H, Mat(T, T)));
    rec.head_pre.assign(cfg.num_layers, Mat(T, H * hd));
    rec.head_contrib.assign(cfg.num_layers, std::vector<Mat>(H, Mat(T, d)));
    rec.values.assign(cfg.num_layers, Mat(T, Hkv * hd));

    Mat x = rec.embeddings;  // residual stream, [T, d]
    Mat normed(T, d);
    Mat q(T, H * hd);
    Mat k(T, Hkv * hd);
    std::vector<float> scores(T);
    std::vector<float> ff_gate(cfg.ff_dim);
    std::vector<float> ff_up(cfg.ff_dim);

    for (int l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = w.layers[l];

        // --- attention sublayer ---
        for (int i = 0; i < T; ++i) {
            rms_norm(x.row(i), lw.attn_norm.data(), d, cfg.norm_eps, normed.row(i));
            matvec(lw.wq, normed.row(i), q.row(i), 0, H * hd);
            matvec(lw.wk, normed.row(i), k.row(i), 0, Hkv * hd);
            matvec(lw.wv, normed.row(i), rec.values[l].row(i), 0, Hkv * hd);
            for (int j = 0; j < H; ++j) apply_rope(q.row(i) + j * hd, hd, i, cfg.rope_theta);
            for (int j = 0; j < Hkv; ++j) apply_rope(k.row(i) + j * hd, hd, i, cfg.rope_theta);
        }

        Mat& a = rec.attn_out[l];
        const bool layer_masked = masks.layer_has_masks(l);
        for (int j = 0; j < H; ++j) {
            const int kv = j / group;
            Mat& A = rec.attn[l][j];
            Mat& contrib = rec.head_contrib[l][j];
            for (int i = 0; i < T; ++i) {
                // causal scores, scaled; masked edges floored before softmax
                float max_s = -std::numeric_limits<float>::infinity();
                for (int t = 0; t <= i; ++t) {
                    float s = dot(q.row(i) + j * hd, k.row(t) + kv * hd, hd) * inv_sqrt_hd;
                    if (layer_masked && masks.blocked(l, j, i, t)) s = kMaskedScore;
                    scores[t] = s;
                    if (s > max_s) max_s = s;
                }
                float denom = 0.0f;
                for (int t = 0; t <= i; ++t) {
                    scores[t] = std::exp(scores[t] - max_s);
                    denom += scores[t];
                }
                const float inv_denom = 1.0f / denom;
                float* arow = A.row(i);
                for (int t = 0; t <= i; ++t) arow[t] = scores[t] * inv_denom;

                // value aggregation for this head
                float* pre = rec.head_pre[l].row(i) + j * hd;
                for (int e = 0; e < hd; ++e) pre[e] = 0.0f;
                for (int t = 0; t <= i; ++t) {
                    const float* vt = rec.values[l].row(t) + kv * hd;
                    const float at = arow[t];
                    for (int e = 0; e < hd; ++e) pre[e] += at * vt[e];
                }

                // contribution after W_O: columns [j*hd, (j+1)*hd) of wo
                float* crow = contrib.row(i);
                for (int o = 0; o < d; ++o) {
                    const float* wrow = lw.wo.row(o) + j * hd;
                    crow[o] = dot(wrow, pre, hd);
                }
                hooks.apply(HookKind::head_output, l, j, i, crow, d);
            }
        }

        for (int i = 0; i < T; ++i) {
            float* arow = a.row(i);
            for (int o = 0; o < d; ++o) arow[o] = 0.0f;
            for (int j = 0; j < H; ++j) {
                const float* crow = rec.head_contrib[l][j].row(i);
                for (int o = 0; o < d; ++o) arow[o] += crow[o];
            }
            hooks.apply(HookKind::attn_output, l, -1, i, arow, d);
        }

        // --- MLP sublayer ---
        Mat& m = rec.mlp_out[l];
        Mat& xo = rec.resid_out[l];
        for (int i = 0; i < T; ++i) {
            float* mid = normed.row(i);  // reuse as x + a scratch
            const float* xrow = x.row(i);
            const float* arow = a.row(i);
            for (int o = 0; o < d; ++o) mid[o] = xrow[o] + arow[o];

            std::vector<float>& h_in = ff_gate;
            rms_norm(mid, lw.mlp_norm.data(), d, cfg.norm_eps, xo.row(i));  // scratch
            const float* nrow = xo.row(i);
            matvec(lw.gate, nrow, h_in.data(), 0, cfg.ff_dim);
            matvec(lw.up, nrow, ff_up.data(), 0, cfg.ff_dim);
            for (int f = 0; f < cfg.ff_dim; ++f) {
                const float g = h_in[f];
                const float silu = g / (1.0f + std::exp(-g));
                h_in[f] = silu * ff_up[f];
            }
            float* mrow = m.row(i);
            matvec(lw.down, h_in.data(), mrow, 0, d);
            hooks.apply(HookKind::mlp_output, l, -1, i, mrow, d);

            // residual update; residual hooks replace the post-layer state
            float* orow = xo.row(i);
            for (int o = 0; o < d; ++o) orow[o] = mid[o] + mrow[o];
            hooks.apply(HookKind::residual, l, -1, i, orow, d);
        }
        x = xo;
    }

    // final norm + unembedding
    std::vector<float> fn(d);
    result.logits.resize(cfg.vocab_size);
    rms_norm(x.row(T - 1), w.final_norm.data(), d, cfg.norm_eps, fn.data());
    matvec(w.unembedding, fn.data(), result.logits.data(), 0, cfg.vocab_size);
    rec.logits = result.logits;
    if (want_full_logits) {
        rec.full_logits = Mat(T, cfg.vocab_size);
        for (int i = 0; i < T; ++i) {
            rms_norm(x.row(i), w.final_norm.data(), d, cfg.norm_eps, fn.data());
            matvec(w.unembedding, fn.data(), rec.full_logits.row(i), 0, cfg.vocab_size);
        }
    }
    return result;
}

}  // namespace

ForwardResult forward(const Model& model, std::span<const int> tokens,
                      const InterventionSpec* interventions, bool want_full_logits) {
    const InterventionSpec& spec = interventions ? *interventions : empty_spec();
    EdgeMaskTable table =
        EdgeMaskTable::from_spec(spec, model.config, static_cast<int>(tokens.size()));
    return run_forward(model, tokens, spec, table, want_full_logits);
}

ForwardResult forward_with_mask_table(const Model& model, std::span<const int> tokens,
                                      const EdgeMaskTable& table,
                                      const InterventionSpec* interventions,
                                      bool want_full_logits) {
    const InterventionSpec& spec = interventions ? *interventions : empty_spec();
    if (!spec.edge_masks.empty()) {
        throw InterventionError("forward_with_mask_table: spec edge masks would be ignored");
    }
    return run_forward(model, tokens, spec, table, want_full_logits);
}

}  // namespace residscope
