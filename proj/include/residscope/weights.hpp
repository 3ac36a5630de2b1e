#pragma once

#include <vector>

#include "residscope/config.hpp"
#include "residscope/tensor.hpp"

namespace residscope {

// One decoder layer. Projection matrices are stored [out_dim x in_dim]
// (checkpoint orientation), so y = W . x is a row-dot per output element.
struct LayerWeights {
    Mat wq;         // [H*head_dim, d]
    Mat wk;         // [H_kv*head_dim, d]
    Mat wv;         // [H_kv*head_dim, d]
    Mat wo;         // [d, H*head_dim]; columns [j*head_dim, (j+1)*head_dim) form W_O for head j
    Mat gate;       // [d_ff, d]
    Mat up;         // [d_ff, d]
    Mat down;       // [d, d_ff]
    std::vector<float> attn_norm;  // [d] pre-attention RMSNorm scale
    std::vector<float> mlp_norm;   // [d] pre-MLP RMSNorm scale
};

struct Weights {
    Mat embedding;  // [|V|, d]
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;  // [d]
    Mat unembedding;                // [|V|, d]; may be tied to (copied from) embedding

    // Shape consistency against a config; throws ValidationError naming the
    // first offending tensor.
    void validate(const ModelConfig& cfg) const;
};

// Random Gaussian weights for a config; scale keeps activations O(1) on tiny
// models. Used for synthetic test models both from C++ and the bindings.
Weights random_weights(const ModelConfig& cfg, uint64_t seed, float scale = 0.0f);

}  // namespace residscope
