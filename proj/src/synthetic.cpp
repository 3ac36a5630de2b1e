#include "residscope/synthetic.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "residscope/dataset_builder.hpp"
#include "residscope/rng.hpp"

namespace residscope {

namespace {

const char* kPronouns[] = {"he", "she", "it", "they"};
const char* kConnectors[] = {"so", "too", "a", "the"};
const char* kVerbs[] = {"chased", "painted", "carried", "folded", "stacked"};
const char* kNouns[] = {"the ladder", "the kettle", "the anchor", "the ribbon"};
const char* kFigurative[] = {"succeeded", "panicked", "celebrated", "hesitated"};

SentenceVariant make_variant(const std::string& phrase, const TemplateSpec& spec, int span_len,
                             Rng& rng, int vocab) {
    SentenceVariant v;
    v.text = instantiate(phrase, spec);
    const int prefix = spec.use_would ? 2 : 1;  // pronoun (+ would)
    const int suffix = 4;                       // because X was/were CONNECTOR
    const int t = prefix + span_len + suffix;
    v.ids.resize(t);
    for (auto& id : v.ids) id = static_cast<int>(rng.next_below(vocab));
    v.span_begin = prefix;
    v.span_end = prefix + span_len;
    v.subsequent = v.span_end;
    v.last = t - 1;
    return v;
}

}  // namespace

std::vector<IdiomInstance> synthetic_instances(const ModelConfig& cfg, int count,
                                               std::uint64_t seed) {
    const int vocab = cfg.vocab_size;
    if (vocab < 2 * kCandidateCount) {
        throw ValidationError("synthetic instances: vocabulary of " + std::to_string(vocab) +
                              " cannot hold two disjoint candidate sets of " +
                              std::to_string(kCandidateCount));
    }
    Rng rng(seed);
    std::vector<IdiomInstance> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        TemplateSpec spec;
        spec.pronoun = kPronouns[i % 4];
        spec.connector = kConnectors[(i / 4) % 4];
        spec.use_would = (i % 2) == 0;

        IdiomInstance inst;
        char id_buf[16];
        std::snprintf(id_buf, sizeof id_buf, "inst-%03d", i);
        inst.id = id_buf;
        inst.idiom = std::string(kVerbs[i % 5]) + " " + kNouns[i % 4];
        inst.pronoun = spec.pronoun;
        inst.connector = spec.connector;

        inst.s_a = make_variant(inst.idiom, spec, 2 + i % 3, rng, vocab);
        inst.s_f = make_variant(kFigurative[i % 4], spec, 1 + i % 2, rng, vocab);
        inst.s_l = make_variant(std::string(kVerbs[(i + 2) % 5]) + " " + kNouns[(i + 1) % 4],
                                spec, 2, rng, vocab);

        // distinct candidate ids via a partial shuffle of the vocabulary
        std::vector<int> ids(vocab);
        std::iota(ids.begin(), ids.end(), 0);
        for (int k = 0; k < 2 * kCandidateCount; ++k) {
            const int j = k + static_cast<int>(rng.next_below(vocab - k));
            std::swap(ids[k], ids[j]);
        }
        inst.c_f.assign(ids.begin(), ids.begin() + kCandidateCount);
        inst.c_l.assign(ids.begin() + kCandidateCount, ids.begin() + 2 * kCandidateCount);
        std::sort(inst.c_f.begin(), inst.c_f.end());
        std::sort(inst.c_l.begin(), inst.c_l.end());

        inst.validate();
        out.push_back(std::move(inst));
    }
    return out;
}

}  // namespace residscope
