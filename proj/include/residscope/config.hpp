#pragma once

#include <string>

#include "residscope/errors.hpp"

namespace residscope {

// Architecture hyperparameters of a Llama-style decoder.
struct ModelConfig {
    int num_layers = 0;    // L
    int hidden_dim = 0;    // d
    int num_heads = 0;     // H
    int num_kv_heads = 0;  // H_kv, divides H (grouped-query attention)
    int ff_dim = 0;        // d_ff
    int vocab_size = 0;    // |V|
    float rope_theta = 10000.0f;
    float norm_eps = 1e-5f;
    int max_seq_len = 2048;

    int head_dim() const { return hidden_dim / num_heads; }
    int kv_group() const { return num_heads / num_kv_heads; }

    void validate() const {
        if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || num_kv_heads < 1 ||
            ff_dim < 1 || vocab_size < 1 || max_seq_len < 1) {
            throw ValidationError("model config: all dimensions must be >= 1");
        }
        if (hidden_dim % num_heads != 0) {
            throw ValidationError("model config: hidden_dim must be divisible by num_heads");
        }
        if (num_heads % num_kv_heads != 0) {
            throw ValidationError("model config: num_heads must be divisible by num_kv_heads");
        }
        if (head_dim() % 2 != 0) {
            throw ValidationError("model config: head dimension must be even for rotary encoding");
        }
        if (!(norm_eps > 0.0f)) throw ValidationError("model config: norm_eps must be > 0");
        if (!(rope_theta > 0.0f)) throw ValidationError("model config: rope_theta must be > 0");
    }
};

// JSON file <-> ModelConfig. Field names match the struct members.
ModelConfig load_model_config(const std::string& path);
void save_model_config(const ModelConfig& cfg, const std::string& path);
ModelConfig model_config_from_json_text(const std::string& text);
std::string model_config_to_json_text(const ModelConfig& cfg);

}  // namespace residscope
