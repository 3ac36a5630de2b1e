#pragma once

#include <string>

#include "residscope/config.hpp"
#include "residscope/weights.hpp"

namespace residscope {

// Single-file tensor serialization: 8-byte little-endian header length, JSON
// header mapping tensor names to {dtype, shape, data_offsets}, then the raw
// buffer. F32/F16/BF16 accepted; everything is up-converted to fp32.
//
// Tensor names follow the published checkpoint schema
// (model.embed_tokens.weight, model.layers.N.self_attn.q_proj.weight, ...).
// lm_head.weight may be absent, in which case the unembedding is tied to the
// embedding. Tiny test checkpoints use the same names at small shapes.
Weights load_weights(const std::string& path, const ModelConfig& cfg);

// Writes fp32 tensors under the same naming. tie_unembedding skips
// lm_head.weight.
void save_weights(const Weights& w, const ModelConfig& cfg, const std::string& path,
                  bool tie_unembedding = false);

}  // namespace residscope
