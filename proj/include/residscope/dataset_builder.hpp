#pragma once

#include <string>
#include <utility>
#include <vector>

#include "residscope/errors.hpp"

namespace residscope {

// Slots of the sentence template "X (would) PHRASE because X was/were
// so|too|a|the". The copula is determined by the pronoun.
struct TemplateSpec {
    std::string pronoun;    // he | she | it | they
    bool use_would = false;
    std::string connector;  // so | too | a | the

    void validate() const;
    std::string copula() const;  // were for they, was otherwise
};

// Fills the template with single spaces, a capitalized first word, and no
// trailing period.
std::string instantiate(const std::string& phrase, const TemplateSpec& spec);

// Splits a vocabulary by the logit difference Δz = z_f − z_l: the k ids with
// the largest Δz form C_f, the k smallest form C_l. Ties go to the lower id,
// and C_l skips anything already claimed by C_f, so the sets are disjoint.
std::pair<std::vector<int>, std::vector<int>> candidate_tokens(const std::vector<float>& z_f,
                                                               const std::vector<float>& z_l,
                                                               int k);

struct InstanceValidation {
    bool figurative_on_idiom = false;    // F(s_a) > L(s_a)
    bool figurative_on_f_para = false;   // F(s_f) > L(s_f)
    bool literal_on_l_para = false;      // L(s_l) > F(s_l)
    bool pass() const {
        return figurative_on_idiom && figurative_on_f_para && literal_on_l_para;
    }
};

// Strict inequalities; exact ties fail.
InstanceValidation validate_instance(const std::vector<float>& logits_a,
                                     const std::vector<float>& logits_f,
                                     const std::vector<float>& logits_l,
                                     const std::vector<int>& c_f, const std::vector<int>& c_l);

}  // namespace residscope
