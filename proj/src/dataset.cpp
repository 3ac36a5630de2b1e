#include "residscope/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace residscope {

using nlohmann::json;

std::string copula_for(const std::string& pronoun) {
    return (pronoun == "they" || pronoun == "we" || pronoun == "you") ? "were" : "was";
}

namespace {

std::string capitalized(std::string w) {
    if (!w.empty() && w[0] >= 'a' && w[0] <= 'z') w[0] = static_cast<char>(w[0] - 'a' + 'A');
    return w;
}

void check_variant(const char* name, const SentenceVariant& v) {
    const int t = v.length();
    if (t == 0) throw ValidationError(std::string(name) + ": empty token sequence");
    if (v.span_begin < 0 || v.span_end > t || v.span_begin >= v.span_end) {
        throw ValidationError(std::string(name) + ": bad span [" +
                              std::to_string(v.span_begin) + ", " + std::to_string(v.span_end) +
                              ") for length " + std::to_string(t));
    }
    if (v.subsequent != v.span_end) {
        throw ValidationError(std::string(name) + ": subsequent index " +
                              std::to_string(v.subsequent) + " is not the span end " +
                              std::to_string(v.span_end));
    }
    if (v.last != t - 1) {
        throw ValidationError(std::string(name) + ": last index " + std::to_string(v.last) +
                              " is not the final position " + std::to_string(t - 1));
    }
    if (v.subsequent > v.last) {
        throw ValidationError(std::string(name) + ": span runs past the last token");
    }
}

void check_candidates(const char* name, const std::vector<int>& c) {
    if (static_cast<int>(c.size()) != kCandidateCount) {
        throw ValidationError(std::string(name) + ": expected " +
                              std::to_string(kCandidateCount) + " candidate ids, got " +
                              std::to_string(c.size()));
    }
    std::set<int> seen;
    for (int id : c) {
        if (id < 0) throw ValidationError(std::string(name) + ": negative token id");
        if (!seen.insert(id).second) {
            throw ValidationError(std::string(name) + ": duplicate token id " +
                                  std::to_string(id));
        }
    }
}

}  // namespace

void IdiomInstance::validate() const {
    if (id.empty()) throw ValidationError("instance: empty id");
    if (connector != "so" && connector != "too" && connector != "a" && connector != "the") {
        throw ValidationError("instance " + id + ": connector '" + connector +
                              "' is not one of so/too/a/the");
    }
    if (pronoun.empty()) throw ValidationError("instance " + id + ": empty pronoun");

    check_variant("s_a", s_a);
    check_variant("s_f", s_f);
    check_variant("s_l", s_l);

    // The idiom sentence must realize the template
    //   "X (would) PHRASE because X was/were CONNECTOR".
    const std::string prefix = capitalized(pronoun) + " ";
    const std::string suffix =
        " because " + pronoun + " " + copula_for(pronoun) + " " + connector;
    if (!s_a.text.starts_with(prefix) || !s_a.text.ends_with(suffix) ||
        s_a.text.size() <= prefix.size() + suffix.size()) {
        throw ValidationError("instance " + id + ": s_a text does not match the template: '" +
                              s_a.text + "'");
    }

    check_candidates("C_f", c_f);
    check_candidates("C_l", c_l);
    std::set<int> f(c_f.begin(), c_f.end());
    for (int id_l : c_l) {
        if (f.count(id_l)) {
            throw ValidationError("instance " + id + ": candidate overlap, token " +
                                  std::to_string(id_l) + " is in both C_f and C_l");
        }
    }
}

namespace {

SentenceVariant variant_from_json(const json& j, const char* name) {
    SentenceVariant v;
    v.text = j.at("text").get<std::string>();
    v.ids = j.at("ids").get<std::vector<int>>();
    const auto& span = j.at("span");
    if (!span.is_array() || span.size() != 2) {
        throw ValidationError(std::string(name) + ": span must be [begin, end)");
    }
    v.span_begin = span[0].get<int>();
    v.span_end = span[1].get<int>();
    v.subsequent = j.at("subsequent").get<int>();
    v.last = j.at("last").get<int>();
    return v;
}

json variant_to_json(const SentenceVariant& v) {
    return json{{"text", v.text},
                {"ids", v.ids},
                {"span", {v.span_begin, v.span_end}},
                {"subsequent", v.subsequent},
                {"last", v.last}};
}

}  // namespace

IdiomInstance instance_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad JSON: ") + e.what());
    }
    IdiomInstance inst;
    try {
        inst.id = j.at("id").get<std::string>();
        inst.idiom = j.at("idiom").get<std::string>();
        inst.pronoun = j.at("pronoun").get<std::string>();
        inst.connector = j.at("connector").get<std::string>();
        inst.s_a = variant_from_json(j.at("s_a"), "s_a");
        inst.s_f = variant_from_json(j.at("s_f"), "s_f");
        inst.s_l = variant_from_json(j.at("s_l"), "s_l");
        inst.c_f = j.at("C_f").get<std::vector<int>>();
        inst.c_l = j.at("C_l").get<std::vector<int>>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("missing or mistyped field: ") + e.what());
    }
    inst.validate();
    return inst;
}

std::string instance_to_json_text(const IdiomInstance& inst) {
    json j{{"id", inst.id},
           {"idiom", inst.idiom},
           {"pronoun", inst.pronoun},
           {"connector", inst.connector},
           {"s_a", variant_to_json(inst.s_a)},
           {"s_f", variant_to_json(inst.s_f)},
           {"s_l", variant_to_json(inst.s_l)},
           {"C_f", inst.c_f},
           {"C_l", inst.c_l}};
    return j.dump();
}

std::vector<IdiomInstance> load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("dataset: cannot open " + path);
    std::vector<IdiomInstance> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        try {
            out.push_back(instance_from_json_text(line));
        } catch (const ValidationError& e) {
            throw ValidationError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

void save_dataset(const std::vector<IdiomInstance>& instances, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("dataset: cannot write " + path);
    for (const auto& inst : instances) out << instance_to_json_text(inst) << "\n";
    if (!out) throw IoError("dataset: write failed for " + path);
}

namespace {
std::string table_key(const std::string& id, const std::string& variant) {
    return id + "\x1f" + variant;
}
}  // namespace

void EmbeddingTable::insert(const std::string& id, const std::string& variant,
                            std::vector<float> v) {
    if (variant != kFigurative && variant != kLiteral) {
        throw ValidationError("embeddings: unknown variant '" + variant + "' for " + id);
    }
    if (v.empty()) throw ValidationError("embeddings: empty vector for " + id);
    for (float x : v) {
        if (!std::isfinite(x)) {
            throw ValidationError("embeddings: non-finite entry for " + id + "/" + variant);
        }
    }
    if (width_ < 0) width_ = static_cast<int>(v.size());
    if (static_cast<int>(v.size()) != width_) {
        throw ValidationError("embeddings: width " + std::to_string(v.size()) + " for " + id +
                              "/" + variant + " differs from " + std::to_string(width_));
    }
    if (!rows_.emplace(table_key(id, variant), std::move(v)).second) {
        throw ValidationError("embeddings: duplicate entry for " + id + "/" + variant);
    }
}

const std::vector<float>& EmbeddingTable::at(const std::string& id,
                                             const std::string& variant) const {
    auto it = rows_.find(table_key(id, variant));
    if (it == rows_.end()) {
        throw ValidationError("embeddings: missing entry for " + id + "/" + variant);
    }
    return it->second;
}

bool EmbeddingTable::contains(const std::string& id, const std::string& variant) const {
    return rows_.count(table_key(id, variant)) > 0;
}

EmbeddingTable EmbeddingTable::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("embeddings: cannot open " + path);
    EmbeddingTable table;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            table.insert(j.at("id").get<std::string>(), j.at("variant").get<std::string>(),
                         j.at("vector").get<std::vector<float>>());
        } catch (const json::exception& e) {
            throw ValidationError(path + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return table;
}

void EmbeddingTable::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("embeddings: cannot write " + path);
    // sort keys for reproducible files
    std::vector<std::string> keys;
    keys.reserve(rows_.size());
    for (const auto& [k, _] : rows_) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    for (const auto& k : keys) {
        const auto sep = k.find('\x1f');
        json j{{"id", k.substr(0, sep)},
               {"variant", k.substr(sep + 1)},
               {"vector", rows_.at(k)}};
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("embeddings: write failed for " + path);
}

}  // namespace residscope
