#pragma once

#include <vector>

#include "residscope/config.hpp"
#include "residscope/tensor.hpp"

namespace residscope {

// Complete capture of one forward pass. Values are what actually flowed
// through the residual stream, i.e. post-intervention when hooks fired.
struct ActivationRecord {
    int seq_len = 0;
    int num_layers = 0;
    int num_heads = 0;
    int num_kv_heads = 0;
    int head_dim = 0;
    int hidden_dim = 0;

    Mat embeddings;                     // [T, d] layer-0 residual input
    std::vector<Mat> attn_out;          // per layer: [T, d] a^l
    std::vector<Mat> mlp_out;           // per layer: [T, d] m^l
    std::vector<Mat> resid_out;         // per layer: [T, d] x^l
    std::vector<std::vector<Mat>> attn; // [layer][head]: [T, T] row-stochastic, causal
    std::vector<Mat> head_pre;          // per layer: [T, H*head_dim] per-head output before W_O
    std::vector<std::vector<Mat>> head_contrib;  // [layer][head]: [T, d] contribution after W_O
    std::vector<Mat> values;            // per layer: [T, H_kv*head_dim] value projections

    std::vector<float> logits;          // [|V|] at final position
    Mat full_logits;                    // [T, |V|], only when requested

    // x_i^{l-1}: the residual state entering layer l.
    const Mat& residual_in(int layer) const {
        return layer == 0 ? embeddings : resid_out[layer - 1];
    }

    const float* value_vector(int layer, int kv_head, int pos) const {
        return values[layer].row(pos) + kv_head * head_dim;
    }
};

}  // namespace residscope
