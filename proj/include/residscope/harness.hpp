#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "residscope/dataset.hpp"
#include "residscope/metrics.hpp"
#include "residscope/model.hpp"
#include "residscope/sweep.hpp"
#include "residscope/tokenizer.hpp"

namespace residscope {

// Everything an experiment run needs beyond the loaded artifacts. Selector
// validity is checked per experiment before any forward pass runs.
struct ExperimentConfig {
    std::string experiment;
    std::string model_path;
    std::string config_path;
    std::string dataset_path;
    std::string tokenizer_path;   // build-dataset
    std::string embeddings_path;  // kernel-align
    std::string heads_path;       // component-patch
    std::string csv_path;         // build-dataset input rows
    std::string out_path;
    std::string format = "csv";   // csv | json | svg

    std::uint64_t seed = 0;
    std::string mode = "mean";             // zero | mean (knockouts)
    std::string variant = "sa";            // sa | sf | sl; patch/knockout target
    std::string knockout_target = "mhsa";  // mhsa | mlp
    std::string patch_source = "sl";       // sa | sf | sl | sa-star
    std::string edge_to = "subsequent";    // subsequent | last
    int layer_begin = -1;                  // inclusive; -1 = experiment default
    int layer_end = -1;
    int k_neighbors = 10;
    int k_heads = 20;
    int bootstrap_b = 1000;
    double ci_level = 0.95;
};

// Flat ordered (name, value) report for the non-sweep experiments.
struct Summary {
    std::vector<std::pair<std::string, double>> values;
    void add(const std::string& name, double v) { values.emplace_back(name, v); }
    double at(const std::string& name) const;
};
std::string summary_to_csv(const Summary& s);
std::string summary_to_json(const Summary& s);

struct ValidationRow {
    std::string id;
    bool figurative_on_idiom = false;
    bool figurative_on_f_para = false;
    bool literal_on_l_para = false;
    bool pass = false;
};
struct ValidationReport {
    std::vector<ValidationRow> rows;
    int passed() const;
};
std::string validation_to_csv(const ValidationReport& r);
std::string validation_to_json(const ValidationReport& r);

// Worker count: RESID_SCOPE_THREADS when set, hardware concurrency otherwise.
int thread_cap();
// Runs fn(0..n-1) across workers; results must go to per-index slots, so the
// outcome is identical to a sequential loop. First exception is rethrown.
void parallel_for(int n, const std::function<void(int)>& fn);

const SentenceVariant& select_variant(const IdiomInstance& inst, const std::string& selector);

// Mean activations over un-intervened runs of every instance's chosen
// variant, per (kind, layer, head, position role).
MeanCache compute_mean_cache(const Model& model, const std::vector<IdiomInstance>& instances,
                             const std::string& variant);

SweepResult run_sublayer_knockout(const Model& model,
                                  const std::vector<IdiomInstance>& instances,
                                  const ExperimentConfig& cfg);

struct HeadScanOutput {
    SweepResult sweep;  // axis layer_head
    HeadSets heads;
};
HeadScanOutput run_head_scan(const Model& model, const std::vector<IdiomInstance>& instances,
                             const ExperimentConfig& cfg);

Summary run_component_patch(const Model& model, const std::vector<IdiomInstance>& instances,
                            const HeadSets& heads, const ExperimentConfig& cfg);

SweepResult run_kernel_align(const Model& model, const std::vector<IdiomInstance>& instances,
                             const EmbeddingTable& embeddings, const ExperimentConfig& cfg);

SweepResult run_because_patch(const Model& model, const std::vector<IdiomInstance>& instances,
                              const ExperimentConfig& cfg);

SweepResult run_edge_knockout(const Model& model, const std::vector<IdiomInstance>& instances,
                              const ExperimentConfig& cfg);

ValidationReport run_validate(const Model& model, const std::vector<IdiomInstance>& instances);

// build-dataset input: one template row per idiom.
struct BuildRow {
    std::string id;
    std::string idiom;
    std::string figurative;
    std::string literal;
    std::string pronoun;
    bool use_would = false;
    std::string connector;
};
std::vector<BuildRow> load_build_rows(const std::string& csv_path);

struct BuildOutcome {
    std::vector<IdiomInstance> kept;  // rows passing the three inequalities
    int total = 0;
};
BuildOutcome build_dataset(const Model& model, const Tokenizer& tokenizer,
                           const std::vector<BuildRow>& rows);

// Tokenize a template sentence chunk-by-chunk so the phrase's token span is
// known exactly; checks that re-encoding the joined text gives the same ids.
SentenceVariant tokenize_template(const Tokenizer& tokenizer, const std::string& phrase,
                                  const std::string& pronoun, bool use_would,
                                  const std::string& connector);

std::string head_sets_to_json(const HeadSets& sets);
HeadSets head_sets_from_json(const std::string& text);
HeadSets load_head_sets(const std::string& path);

// Cyclic permutation with no fixed points (Sattolo); n >= 2.
std::vector<int> seeded_derangement(int n, std::uint64_t seed);

// Full command-line entry: parse, load, run, write outputs and the
// <out>.manifest.json reproduction record. Returns the process exit code
// (0 ok, 2 validation error, 3 I/O error).
int run_cli(int argc, const char* const* argv);

}  // namespace residscope
