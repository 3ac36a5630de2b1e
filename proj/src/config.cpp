#include "residscope/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace residscope {

using nlohmann::json;

ModelConfig model_config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("model config: bad JSON: ") + e.what());
    }
    ModelConfig cfg;
    try {
        cfg.num_layers = j.at("num_layers").get<int>();
        cfg.hidden_dim = j.at("hidden_dim").get<int>();
        cfg.num_heads = j.at("num_heads").get<int>();
        cfg.num_kv_heads = j.at("num_kv_heads").get<int>();
        cfg.ff_dim = j.at("ff_dim").get<int>();
        cfg.vocab_size = j.at("vocab_size").get<int>();
        cfg.rope_theta = j.at("rope_theta").get<float>();
        cfg.norm_eps = j.at("norm_eps").get<float>();
        cfg.max_seq_len = j.at("max_seq_len").get<int>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("model config: missing or mistyped field: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::string model_config_to_json_text(const ModelConfig& cfg) {
    json j;
    j["num_layers"] = cfg.num_layers;
    j["hidden_dim"] = cfg.hidden_dim;
    j["num_heads"] = cfg.num_heads;
    j["num_kv_heads"] = cfg.num_kv_heads;
    j["ff_dim"] = cfg.ff_dim;
    j["vocab_size"] = cfg.vocab_size;
    j["rope_theta"] = cfg.rope_theta;
    j["norm_eps"] = cfg.norm_eps;
    j["max_seq_len"] = cfg.max_seq_len;
    return j.dump(2) + "\n";
}

ModelConfig load_model_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("model config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return model_config_from_json_text(ss.str());
}

void save_model_config(const ModelConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("model config: cannot write " + path);
    out << model_config_to_json_text(cfg);
}

}  // namespace residscope
