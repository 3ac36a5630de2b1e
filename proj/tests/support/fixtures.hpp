#pragma once

#include <vector>

#include "residscope/model.hpp"
#include "residscope/rng.hpp"

namespace fixtures {

inline residscope::ModelConfig tiny_config(int layers = 2, int dim = 8, int heads = 2,
                                           int kv_heads = 1, int ff = 16, int vocab = 32) {
    residscope::ModelConfig cfg;
    cfg.num_layers = layers;
    cfg.hidden_dim = dim;
    cfg.num_heads = heads;
    cfg.num_kv_heads = kv_heads;
    cfg.ff_dim = ff;
    cfg.vocab_size = vocab;
    cfg.max_seq_len = 64;
    return cfg;
}

inline residscope::Model tiny_model(uint64_t seed, const residscope::ModelConfig& cfg) {
    return {cfg, residscope::random_weights(cfg, seed)};
}

inline residscope::Model tiny_model(uint64_t seed = 1) {
    return tiny_model(seed, tiny_config());
}

inline std::vector<int> random_tokens(residscope::Rng& rng, int count, int vocab) {
    std::vector<int> out(count);
    for (auto& t : out) t = static_cast<int>(rng.next_below(static_cast<uint64_t>(vocab)));
    return out;
}

}  // namespace fixtures
