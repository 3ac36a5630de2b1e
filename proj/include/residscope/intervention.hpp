#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "residscope/config.hpp"
#include "residscope/record.hpp"

namespace residscope {

// Where an intervention attaches inside the forward pass.
enum class HookKind {
    residual,     // x_i^l after both sublayer additions
    attn_output,  // a_i^l before it enters the residual sum
    mlp_output,   // m_i^l before it enters the residual sum
    head_output,  // head j's contribution after W_O, before the head sum
};

const char* hook_kind_name(HookKind k);
HookKind hook_kind_from_name(const std::string& name);

struct HookPoint {
    HookKind kind = HookKind::residual;
    int layer = 0;
    int position = 0;
    int head = -1;  // required iff kind == head_output

    bool operator==(const HookPoint&) const = default;
    auto operator<=>(const HookPoint&) const = default;
};

enum class KnockoutMode { zero, mean };

struct Knockout {
    HookPoint at;
    KnockoutMode mode = KnockoutMode::zero;
    // Resolved replacement for mean mode, captured when the spec is built.
    std::vector<float> mean;
};

struct Patch {
    HookPoint at;
    // Deep copy of the source activation; mutating the source record after
    // building the spec cannot alias into the patched run.
    std::vector<float> value;
};

// Blocks query_position from attending to key_position at one layer's
// attention score matrix, for all heads or a subset.
struct EdgeMask {
    int layer = 0;
    int query_position = 0;
    int key_position = 0;
    std::vector<int> heads;  // empty = all heads

    bool operator==(const EdgeMask&) const = default;
};

// Masked scores are floored to this value before softmax; exp() of the
// shifted score underflows to exactly 0, so surviving entries renormalize.
inline constexpr float kMaskedScore = -1e30f;

// Position roles used to align activations across instances of different
// lengths when averaging. Idiom spans are aligned by offset from the span
// END, since the template fixes everything after the span.
struct PositionRole {
    enum Tag { span_from_end, subsequent, last } tag = subsequent;
    int offset = 0;  // only for span_from_end: 0 = last span token

    bool operator==(const PositionRole&) const = default;
    auto operator<=>(const PositionRole&) const = default;
};

// Mean activations mu per (kind, layer, head, role), averaged over runs.
class MeanCache {
  public:
    struct Key {
        HookKind kind;
        int layer;
        int head;  // -1 unless kind == head_output
        PositionRole role;
        auto operator<=>(const Key&) const = default;
    };

    void accumulate(const Key& key, const float* v, int n);
    void finalize();  // divide sums by counts; idempotent
    const std::vector<float>* find(const Key& key) const;
    bool empty() const { return sums_.empty(); }

  private:
    struct Entry {
        std::vector<float> sum;
        int count = 0;
        bool finalized = false;
    };
    std::map<Key, Entry> sums_;
};

struct InterventionSpec {
    std::vector<Knockout> knockouts;
    std::vector<Patch> patches;
    std::vector<EdgeMask> edge_masks;

    bool empty() const { return knockouts.empty() && patches.empty() && edge_masks.empty(); }

    // Coordinate ranges, causal edges, duplicate/conflicting targets.
    void validate(const ModelConfig& cfg, int seq_len) const;

    std::string to_json_text() const;
    static InterventionSpec from_json_text(const std::string& text);
};

// Spec-fragment builders. Each validates its own preconditions; full-spec
// validation happens again inside forward().

// Zero knockout of each hook point.
InterventionSpec knockout_zero(const std::vector<HookPoint>& points);

// Mean knockout; every targeted hook must be covered by the cache under the
// given role mapping (position -> role), else InterventionError.
InterventionSpec knockout_mean(const std::vector<std::pair<HookPoint, PositionRole>>& points,
                               const MeanCache& cache);

// Capture source activation at (target.kind, target.layer, target.head,
// source_position) from the record.
InterventionSpec patch_from(const HookPoint& target, const ActivationRecord& source,
                            int source_position);

InterventionSpec mask_edges(const std::vector<EdgeMask>& masks);

// Concatenate fragments; conflict checks run at validate() time.
InterventionSpec merge(std::initializer_list<InterventionSpec> fragments);

}  // namespace residscope
