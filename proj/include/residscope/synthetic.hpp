#pragma once

#include <cstdint>
#include <vector>

#include "residscope/config.hpp"
#include "residscope/dataset.hpp"

namespace residscope {

// Deterministic template-valid dataset rows with arbitrary token ids inside
// the vocabulary, for tests and determinism runs. Needs |V| >= 40 so the two
// candidate sets fit disjointly.
std::vector<IdiomInstance> synthetic_instances(const ModelConfig& cfg, int count,
                                               std::uint64_t seed);

}  // namespace residscope
