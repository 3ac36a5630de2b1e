#pragma once

#include <span>
#include <vector>

#include "residscope/config.hpp"
#include "residscope/intervention.hpp"
#include "residscope/record.hpp"
#include "residscope/weights.hpp"

namespace residscope {

struct Model {
    ModelConfig config;
    Weights weights;
};

struct ForwardResult {
    std::vector<float> logits;  // final position, [|V|]
    ActivationRecord record;
};

// Token ids validated against a vocab size.
void validate_tokens(std::span<const int> tokens, const ModelConfig& cfg);

// Embedding lookup; rows of the result are emb[t_i]. Rotary encoding is not
// applied here: it rotates Q/K inside each attention sublayer.
Mat embed(std::span<const int> tokens, const Weights& w, const ModelConfig& cfg);

// out = x / sqrt(mean(x^2) + eps) * scale, elementwise.
void rms_norm(const float* x, const float* scale, int n, float eps, float* out);

// In-place rotary encoding of one head-sized vector at a position.
// Pairs (v[k], v[k + n/2]) rotate by position * theta^(-2k/n).
void apply_rope(float* v, int n, int position, float rope_theta);

// Dense per-layer edge-mask lookup built from an InterventionSpec (or by
// hand in tests, which is the reference route for mask equivalence checks).
class EdgeMaskTable {
  public:
    EdgeMaskTable(int num_layers, int num_heads, int seq_len);
    void block(int layer, int head, int query, int key);  // head = -1 blocks all heads
    bool blocked(int layer, int head, int query, int key) const;
    bool layer_has_masks(int layer) const { return layer_used_[layer]; }

    static EdgeMaskTable from_spec(const InterventionSpec& spec, const ModelConfig& cfg,
                                   int seq_len);

  private:
    int num_heads_;
    int seq_len_;
    std::vector<std::vector<uint8_t>> per_layer_;  // [layer][(head*T + q)*T + k]
    std::vector<uint8_t> layer_used_;
};

// Full-sequence forward pass. Interventions are consulted at each hook point;
// the record is complete even under intervention. Deterministic.
ForwardResult forward(const Model& model, std::span<const int> tokens,
                      const InterventionSpec* interventions = nullptr,
                      bool want_full_logits = false);

// Same pass with a prebuilt mask table instead of spec-derived masks.
// Bit-identical to forward() when the table matches the spec's edge masks.
ForwardResult forward_with_mask_table(const Model& model, std::span<const int> tokens,
                                      const EdgeMaskTable& table,
                                      const InterventionSpec* interventions = nullptr,
                                      bool want_full_logits = false);

}  // namespace residscope
