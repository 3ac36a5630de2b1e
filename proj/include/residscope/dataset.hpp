#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "residscope/errors.hpp"

namespace residscope {

inline constexpr int kCandidateCount = 20;

// One tokenized rendering of the shared sentence template
// "X (would) PHRASE because X was/were so|too|a|the". The phrase differs per
// variant (idiom, figurative paraphrase, literal paraphrase); everything after
// it is fixed, so positions in different variants align by offset from the
// span end.
struct SentenceVariant {
    std::string text;
    std::vector<int> ids;
    int span_begin = 0;  // phrase token range [span_begin, span_end)
    int span_end = 0;
    int subsequent = 0;  // first token after the phrase (the "because")
    int last = 0;        // final token position

    int length() const { return static_cast<int>(ids.size()); }
};

// One dataset row: an idiom sentence plus its figurative and literal
// paraphrases, with the two 20-token candidate sets that score the
// figurative vs literal reading of the next token.
struct IdiomInstance {
    std::string id;
    std::string idiom;
    std::string pronoun;
    std::string connector;  // so | too | a | the
    SentenceVariant s_a;    // idiom sentence
    SentenceVariant s_f;    // figurative paraphrase
    SentenceVariant s_l;    // literal paraphrase
    std::vector<int> c_f;   // kCandidateCount ids each, mutually exclusive
    std::vector<int> c_l;

    void validate() const;  // throws ValidationError on any broken invariant
};

// "was" for singular pronouns, "were" for they/we/you.
std::string copula_for(const std::string& pronoun);

IdiomInstance instance_from_json_text(const std::string& text);
std::string instance_to_json_text(const IdiomInstance& inst);

// JSONL, one instance per line. Errors carry the 1-based line number.
std::vector<IdiomInstance> load_dataset(const std::string& path);
void save_dataset(const std::vector<IdiomInstance>& instances, const std::string& path);

// Precomputed sentence-embedding vectors for the paraphrases, keyed by
// instance id and meaning variant. Produced elsewhere; this only ingests.
class EmbeddingTable {
  public:
    static constexpr const char* kFigurative = "figurative_meaning";
    static constexpr const char* kLiteral = "literal_meaning";

    static EmbeddingTable load(const std::string& path);

    void insert(const std::string& id, const std::string& variant, std::vector<float> v);
    const std::vector<float>& at(const std::string& id, const std::string& variant) const;
    bool contains(const std::string& id, const std::string& variant) const;
    int width() const { return width_; }
    int size() const { return static_cast<int>(rows_.size()); }
    void save(const std::string& path) const;

  private:
    std::unordered_map<std::string, std::vector<float>> rows_;
    int width_ = -1;
};

}  // namespace residscope
