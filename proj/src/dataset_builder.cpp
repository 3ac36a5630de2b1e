#include "residscope/dataset_builder.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "residscope/dataset.hpp"
#include "residscope/metrics.hpp"

namespace residscope {

void TemplateSpec::validate() const {
    if (pronoun != "he" && pronoun != "she" && pronoun != "it" && pronoun != "they") {
        throw ValidationError("template: pronoun '" + pronoun + "' is not one of he/she/it/they");
    }
    if (connector != "so" && connector != "too" && connector != "a" && connector != "the") {
        throw ValidationError("template: connector '" + connector +
                              "' is not one of so/too/a/the");
    }
}

std::string TemplateSpec::copula() const { return copula_for(pronoun); }

std::string instantiate(const std::string& phrase, const TemplateSpec& spec) {
    spec.validate();
    if (phrase.empty()) throw ValidationError("template: empty phrase");
    std::string first = spec.pronoun;
    first[0] = static_cast<char>(first[0] - 'a' + 'A');
    std::string out = first + " ";
    if (spec.use_would) out += "would ";
    out += phrase;
    out += " because " + spec.pronoun + " " + spec.copula() + " " + spec.connector;
    return out;
}

std::pair<std::vector<int>, std::vector<int>> candidate_tokens(const std::vector<float>& z_f,
                                                               const std::vector<float>& z_l,
                                                               int k) {
    if (z_f.size() != z_l.size()) {
        throw ValidationError("candidate tokens: logit lengths differ, " +
                              std::to_string(z_f.size()) + " vs " + std::to_string(z_l.size()));
    }
    const int v = static_cast<int>(z_f.size());
    if (k < 1 || 2 * k > v) {
        throw ValidationError("candidate tokens: need 1 <= k <= |V|/2, got k=" +
                              std::to_string(k) + " |V|=" + std::to_string(v));
    }
    std::vector<double> dz(v);
    for (int i = 0; i < v; ++i) dz[i] = static_cast<double>(z_f[i]) - z_l[i];

    std::vector<int> ids(v);
    std::iota(ids.begin(), ids.end(), 0);

    std::vector<int> by_top = ids;
    std::partial_sort(by_top.begin(), by_top.begin() + k, by_top.end(), [&](int a, int b) {
        if (dz[a] != dz[b]) return dz[a] > dz[b];
        return a < b;
    });
    std::vector<int> c_f(by_top.begin(), by_top.begin() + k);

    std::set<int> claimed(c_f.begin(), c_f.end());
    std::vector<int> by_bottom = ids;
    std::sort(by_bottom.begin(), by_bottom.end(), [&](int a, int b) {
        if (dz[a] != dz[b]) return dz[a] < dz[b];
        return a < b;
    });
    std::vector<int> c_l;
    for (int id : by_bottom) {
        if (static_cast<int>(c_l.size()) == k) break;
        if (!claimed.count(id)) c_l.push_back(id);
    }
    return {std::move(c_f), std::move(c_l)};
}

InstanceValidation validate_instance(const std::vector<float>& logits_a,
                                     const std::vector<float>& logits_f,
                                     const std::vector<float>& logits_l,
                                     const std::vector<int>& c_f, const std::vector<int>& c_l) {
    const auto sa = interpretation_scores(logits_a, c_f, c_l);
    const auto sf = interpretation_scores(logits_f, c_f, c_l);
    const auto sl = interpretation_scores(logits_l, c_f, c_l);
    InstanceValidation out;
    out.figurative_on_idiom = sa.f > sa.l;
    out.figurative_on_f_para = sf.f > sf.l;
    out.literal_on_l_para = sl.l > sl.f;
    return out;
}

}  // namespace residscope
