#include "residscope/intervention.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

namespace residscope {

using nlohmann::json;

const char* hook_kind_name(HookKind k) {
    switch (k) {
        case HookKind::residual: return "residual";
        case HookKind::attn_output: return "attn_output";
        case HookKind::mlp_output: return "mlp_output";
        case HookKind::head_output: return "head_output";
    }
    return "?";
}

HookKind hook_kind_from_name(const std::string& name) {
    if (name == "residual") return HookKind::residual;
    if (name == "attn_output") return HookKind::attn_output;
    if (name == "mlp_output") return HookKind::mlp_output;
    if (name == "head_output") return HookKind::head_output;
    throw ValidationError("unknown hook kind: " + name);
}

namespace {

std::string hook_str(const HookPoint& h) {
    std::string s = std::string(hook_kind_name(h.kind)) + "(layer=" + std::to_string(h.layer) +
                    ", pos=" + std::to_string(h.position);
    if (h.kind == HookKind::head_output) s += ", head=" + std::to_string(h.head);
    return s + ")";
}

void check_hook(const HookPoint& h, const ModelConfig& cfg, int seq_len) {
    if (h.layer < 0 || h.layer >= cfg.num_layers) {
        throw InterventionError("intervention layer out of range: " + hook_str(h));
    }
    if (h.position < 0 || h.position >= seq_len) {
        throw InterventionError("intervention position out of range: " + hook_str(h));
    }
    if (h.kind == HookKind::head_output) {
        if (h.head < 0 || h.head >= cfg.num_heads) {
            throw InterventionError("intervention head out of range: " + hook_str(h));
        }
    } else if (h.head != -1) {
        throw InterventionError("head index only valid for head_output hooks: " + hook_str(h));
    }
}

int hook_width(const HookPoint&, const ModelConfig& cfg) {
    // Every replaceable activation is a d-vector: residual states, sublayer
    // outputs, and per-head contributions after W_O.
    return cfg.hidden_dim;
}

}  // namespace

void InterventionSpec::validate(const ModelConfig& cfg, int seq_len) const {
    std::set<HookPoint> seen;
    auto claim = [&](const HookPoint& h) {
        if (!seen.insert(h).second) {
            throw InterventionError("conflicting interventions target " + hook_str(h));
        }
    };
    for (const auto& k : knockouts) {
        check_hook(k.at, cfg, seq_len);
        claim(k.at);
        if (k.mode == KnockoutMode::mean &&
            static_cast<int>(k.mean.size()) != hook_width(k.at, cfg)) {
            throw InterventionError("mean knockout at " + hook_str(k.at) +
                                    " has replacement width " + std::to_string(k.mean.size()) +
                                    ", expected " + std::to_string(hook_width(k.at, cfg)));
        }
    }
    for (const auto& p : patches) {
        check_hook(p.at, cfg, seq_len);
        claim(p.at);
        if (static_cast<int>(p.value.size()) != hook_width(p.at, cfg)) {
            throw InterventionError("patch at " + hook_str(p.at) + " has width " +
                                    std::to_string(p.value.size()) + ", expected " +
                                    std::to_string(hook_width(p.at, cfg)));
        }
    }
    for (const auto& e : edge_masks) {
        if (e.layer < 0 || e.layer >= cfg.num_layers) {
            throw InterventionError("edge mask layer out of range: " + std::to_string(e.layer));
        }
        if (e.query_position < 0 || e.query_position >= seq_len || e.key_position < 0) {
            throw InterventionError("edge mask position out of range");
        }
        if (e.key_position > e.query_position) {
            throw InterventionError("edge mask (" + std::to_string(e.query_position) + " -> " +
                                    std::to_string(e.key_position) +
                                    ") is non-causal: key must be <= query");
        }
        for (int h : e.heads) {
            if (h < 0 || h >= cfg.num_heads) {
                throw InterventionError("edge mask head out of range: " + std::to_string(h));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// MeanCache

void MeanCache::accumulate(const Key& key, const float* v, int n) {
    auto& e = sums_[key];
    if (e.finalized) throw Error("mean cache: accumulate after finalize");
    if (e.sum.empty()) e.sum.assign(n, 0.0f);
    if (static_cast<int>(e.sum.size()) != n) {
        throw ValidationError("mean cache: inconsistent activation width");
    }
    for (int i = 0; i < n; ++i) e.sum[i] += v[i];
    e.count += 1;
}

void MeanCache::finalize() {
    for (auto& [key, e] : sums_) {
        if (e.finalized) continue;
        const float inv = 1.0f / static_cast<float>(e.count);
        for (auto& x : e.sum) x *= inv;
        e.finalized = true;
    }
}

const std::vector<float>* MeanCache::find(const Key& key) const {
    auto it = sums_.find(key);
    if (it == sums_.end() || !it->second.finalized) return nullptr;
    return &it->second.sum;
}

// ---------------------------------------------------------------------------
// Fragment builders

InterventionSpec knockout_zero(const std::vector<HookPoint>& points) {
    InterventionSpec spec;
    spec.knockouts.reserve(points.size());
    for (const auto& p : points) spec.knockouts.push_back({p, KnockoutMode::zero, {}});
    return spec;
}

InterventionSpec knockout_mean(const std::vector<std::pair<HookPoint, PositionRole>>& points,
                               const MeanCache& cache) {
    InterventionSpec spec;
    spec.knockouts.reserve(points.size());
    for (const auto& [p, role] : points) {
        MeanCache::Key key{p.kind, p.layer, p.kind == HookKind::head_output ? p.head : -1, role};
        const auto* mu = cache.find(key);
        if (mu == nullptr) {
            throw InterventionError("mean knockout: cache has no entry for " + hook_str(p));
        }
        spec.knockouts.push_back({p, KnockoutMode::mean, *mu});
    }
    return spec;
}

InterventionSpec patch_from(const HookPoint& target, const ActivationRecord& source,
                            int source_position) {
    if (target.layer < 0 || target.layer >= source.num_layers) {
        throw InterventionError("patch source record has no layer " +
                                std::to_string(target.layer));
    }
    if (source_position < 0 || source_position >= source.seq_len) {
        throw InterventionError("patch source position out of range: " +
                                std::to_string(source_position));
    }
    const float* v = nullptr;
    switch (target.kind) {
        case HookKind::residual: v = source.resid_out[target.layer].row(source_position); break;
        case HookKind::attn_output: v = source.attn_out[target.layer].row(source_position); break;
        case HookKind::mlp_output: v = source.mlp_out[target.layer].row(source_position); break;
        case HookKind::head_output:
            if (target.head < 0 || target.head >= source.num_heads) {
                throw InterventionError("patch source record has no head " +
                                        std::to_string(target.head));
            }
            v = source.head_contrib[target.layer][target.head].row(source_position);
            break;
    }
    InterventionSpec spec;
    spec.patches.push_back({target, std::vector<float>(v, v + source.hidden_dim)});
    return spec;
}

InterventionSpec mask_edges(const std::vector<EdgeMask>& masks) {
    InterventionSpec spec;
    for (const auto& e : masks) {
        if (e.key_position > e.query_position) {
            throw InterventionError("edge mask (" + std::to_string(e.query_position) + " -> " +
                                    std::to_string(e.key_position) + ") is non-causal");
        }
        spec.edge_masks.push_back(e);
    }
    return spec;
}

InterventionSpec merge(std::initializer_list<InterventionSpec> fragments) {
    InterventionSpec out;
    for (const auto& f : fragments) {
        out.knockouts.insert(out.knockouts.end(), f.knockouts.begin(), f.knockouts.end());
        out.patches.insert(out.patches.end(), f.patches.begin(), f.patches.end());
        out.edge_masks.insert(out.edge_masks.end(), f.edge_masks.begin(), f.edge_masks.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON round trip (experiment configurations are reproducible artifacts)

namespace {

json hook_to_json(const HookPoint& h) {
    json j;
    j["kind"] = hook_kind_name(h.kind);
    j["layer"] = h.layer;
    j["position"] = h.position;
    if (h.kind == HookKind::head_output) j["head"] = h.head;
    return j;
}

HookPoint hook_from_json(const json& j) {
    HookPoint h;
    h.kind = hook_kind_from_name(j.at("kind").get<std::string>());
    h.layer = j.at("layer").get<int>();
    h.position = j.at("position").get<int>();
    h.head = j.contains("head") ? j.at("head").get<int>() : -1;
    return h;
}

}  // namespace

std::string InterventionSpec::to_json_text() const {
    json j;
    j["knockouts"] = json::array();
    for (const auto& k : knockouts) {
        json jk;
        jk["at"] = hook_to_json(k.at);
        jk["mode"] = k.mode == KnockoutMode::zero ? "zero" : "mean";
        if (k.mode == KnockoutMode::mean) jk["mean"] = k.mean;
        j["knockouts"].push_back(jk);
    }
    j["patches"] = json::array();
    for (const auto& p : patches) {
        json jp;
        jp["at"] = hook_to_json(p.at);
        jp["value"] = p.value;
        j["patches"].push_back(jp);
    }
    j["edge_masks"] = json::array();
    for (const auto& e : edge_masks) {
        json je;
        je["layer"] = e.layer;
        je["query_position"] = e.query_position;
        je["key_position"] = e.key_position;
        je["heads"] = e.heads;
        j["edge_masks"].push_back(je);
    }
    return j.dump(2) + "\n";
}

InterventionSpec InterventionSpec::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("intervention spec: bad JSON: ") + e.what());
    }
    InterventionSpec spec;
    try {
        for (const auto& jk : j.at("knockouts")) {
            Knockout k;
            k.at = hook_from_json(jk.at("at"));
            const auto mode = jk.at("mode").get<std::string>();
            if (mode == "zero") {
                k.mode = KnockoutMode::zero;
            } else if (mode == "mean") {
                k.mode = KnockoutMode::mean;
                k.mean = jk.at("mean").get<std::vector<float>>();
            } else {
                throw ValidationError("intervention spec: unknown knockout mode " + mode);
            }
            spec.knockouts.push_back(std::move(k));
        }
        for (const auto& jp : j.at("patches")) {
            Patch p;
            p.at = hook_from_json(jp.at("at"));
            p.value = jp.at("value").get<std::vector<float>>();
            spec.patches.push_back(std::move(p));
        }
        for (const auto& je : j.at("edge_masks")) {
            EdgeMask e;
            e.layer = je.at("layer").get<int>();
            e.query_position = je.at("query_position").get<int>();
            e.key_position = je.at("key_position").get<int>();
            e.heads = je.at("heads").get<std::vector<int>>();
            spec.edge_masks.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("intervention spec: missing field: ") + e.what());
    }
    return spec;
}

}  // namespace residscope
