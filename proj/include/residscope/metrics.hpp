#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "residscope/errors.hpp"
#include "residscope/record.hpp"
#include "residscope/tensor.hpp"

namespace residscope {

// Cumulative next-token probabilities over the figurative / literal candidate
// sets. Disjoint sets under one softmax, so f + l <= 1 always.
struct InterpretationScore {
    double f = 0.0;
    double l = 0.0;
};

struct DeltaI {
    double f = 0.0;
    double l = 0.0;
};

InterpretationScore interpretation_scores(const std::vector<float>& logits,
                                          const std::vector<int>& c_f,
                                          const std::vector<int>& c_l);

// intervened minus original; negative means the intervention disrupted that
// reading.
DeltaI delta_i(const InterpretationScore& intervened, const InterpretationScore& original);

// Mutual k-nearest-neighbor overlap under cosine similarity: for each row i,
// the k nearest other rows are found in each space; the score is the mean of
// |kNN_hidden(i) ∩ kNN_external(i)| / k. Symmetric in its arguments and
// invariant to per-row positive rescaling. Requires rows > k.
double kernel_alignment(const Mat& hidden, const Mat& external, int k);

// Attention-weighted mean of one head's value vectors over a token span,
// weights taken from the given query row, then the cosine between the two
// contexts' means. Spans must have equal length; zero-norm means are an error.
double head_value_cosine(const ActivationRecord& rec_a, int span_begin_a, int span_end_a,
                         int query_a, const ActivationRecord& rec_b, int span_begin_b,
                         int span_end_b, int query_b, int layer, int head);

struct BootstrapCi {
    double mean = 0.0;
    double lo = 0.0;
    double hi = 0.0;
};

// Percentile bootstrap over resample means. Deterministic under a fixed seed.
BootstrapCi bootstrap_ci(const std::vector<double>& values, int b, double level,
                         std::uint64_t seed);

struct TTest {
    double t = 0.0;
    double p = 1.0;
    int df = 0;
};

// Two-sided paired t-test on n-1 degrees of freedom. Zero difference variance
// is an error unless the mean difference is also zero, which reports t = 0,
// p = 1 (no evidence either way).
TTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

// Regularized incomplete beta I_x(a, b); the t CDF reduces to it.
double regularized_incomplete_beta(double a, double b, double x);

struct HeadEffect {
    int layer = 0;
    int head = 0;
    double delta_f = 0.0;
    double delta_l = 0.0;
};

struct HeadSets {
    std::vector<std::pair<int, int>> idiomatic;  // most negative ΔF, most positive ΔL
    std::vector<std::pair<int, int>> semantic;   // the sign-flipped ranking
    std::vector<std::pair<int, int>> random;     // seeded draw from the complement
};

// Combined-rank selection: each head is ranked on the ΔF order and on the ΔL
// order; the k smallest rank sums win. Semantic flips both signs and excludes
// idiomatic picks; random draws k from whatever remains. All three sets are
// disjoint, so 3k heads must exist.
HeadSets rank_heads(const std::vector<HeadEffect>& effects, int k, std::uint64_t seed);

}  // namespace residscope
