#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#include "residscope/config.hpp"
#include "residscope/dataset.hpp"
#include "residscope/dataset_builder.hpp"
#include "residscope/errors.hpp"
#include "residscope/harness.hpp"
#include "residscope/intervention.hpp"
#include "residscope/metrics.hpp"
#include "residscope/model.hpp"
#include "residscope/safetensors.hpp"
#include "residscope/sweep.hpp"
#include "residscope/synthetic.hpp"
#include "residscope/tokenizer.hpp"
#include "residscope/weights.hpp"

namespace py = pybind11;
using namespace residscope;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> vec_to_numpy(const std::vector<float>& v) {
    py::array_t<float> out(static_cast<py::ssize_t>(v.size()));
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

py::array_t<float> mat_to_numpy(const Mat& m) {
    py::array_t<float> out({static_cast<py::ssize_t>(m.rows), static_cast<py::ssize_t>(m.cols)});
    std::copy(m.data.begin(), m.data.end(), out.mutable_data());
    return out;
}

Mat numpy_to_mat(const FloatArray& a) {
    if (a.ndim() != 2) throw ValidationError("expected a 2-D float array");
    Mat m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), m.data.data());
    return m;
}

const Mat& checked(const std::vector<Mat>& v, int i, const char* what) {
    if (i < 0 || i >= static_cast<int>(v.size())) {
        throw ValidationError(std::string(what) + " index out of range");
    }
    return v[static_cast<size_t>(i)];
}

const Mat& checked(const std::vector<std::vector<Mat>>& v, int l, int h, const char* what) {
    if (l < 0 || l >= static_cast<int>(v.size())) {
        throw ValidationError(std::string(what) + " layer out of range");
    }
    const auto& row = v[static_cast<size_t>(l)];
    if (h < 0 || h >= static_cast<int>(row.size())) {
        throw ValidationError(std::string(what) + " head out of range");
    }
    return row[static_cast<size_t>(h)];
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "residual-stream intervention engine and idiom experiment harness";
    m.attr("__version__") = "0.1.0";
    m.attr("CANDIDATE_COUNT") = kCandidateCount;

    py::register_exception<Error>(m, "EngineError", PyExc_RuntimeError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);

    // ---- model ----

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("num_layers", &ModelConfig::num_layers)
        .def_readwrite("hidden_dim", &ModelConfig::hidden_dim)
        .def_readwrite("num_heads", &ModelConfig::num_heads)
        .def_readwrite("num_kv_heads", &ModelConfig::num_kv_heads)
        .def_readwrite("ff_dim", &ModelConfig::ff_dim)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
        .def_readwrite("rope_theta", &ModelConfig::rope_theta)
        .def_readwrite("norm_eps", &ModelConfig::norm_eps)
        .def("validate", &ModelConfig::validate);
    m.def("load_model_config", &load_model_config, py::arg("path"));
    m.def("save_model_config", &save_model_config, py::arg("config"), py::arg("path"));

    py::class_<Weights>(m, "Weights");
    m.def("random_weights", &random_weights, py::arg("config"), py::arg("seed"),
          py::arg("scale") = 0.0f);
    m.def("load_weights", &load_weights, py::arg("path"), py::arg("config"));
    m.def("save_weights", &save_weights, py::arg("weights"), py::arg("config"), py::arg("path"),
          py::arg("tie_unembedding") = false);

    py::class_<Model>(m, "Model")
        .def(py::init([](ModelConfig cfg, Weights w) {
                 return Model{std::move(cfg), std::move(w)};
             }),
             py::arg("config"), py::arg("weights"))
        .def_readonly("config", &Model::config);
    m.def(
        "load_model",
        [](const std::string& config_path, const std::string& weights_path) {
            auto cfg = load_model_config(config_path);
            auto w = load_weights(weights_path, cfg);
            return Model{std::move(cfg), std::move(w)};
        },
        py::arg("config_path"), py::arg("weights_path"));

    // ---- tokenizer ----

    py::class_<Tokenizer>(m, "Tokenizer")
        .def_static("load", &Tokenizer::load, py::arg("path"))
        .def_static("from_json_text", &Tokenizer::from_json_text, py::arg("text"))
        .def("encode", &Tokenizer::encode, py::arg("text"))
        .def("decode", &Tokenizer::decode, py::arg("ids"))
        .def_property_readonly("vocab_size", &Tokenizer::vocab_size)
        .def_property_readonly("bos_id", &Tokenizer::bos_id);

    // ---- dataset ----

    py::class_<SentenceVariant>(m, "SentenceVariant")
        .def(py::init<>())
        .def_readwrite("text", &SentenceVariant::text)
        .def_readwrite("ids", &SentenceVariant::ids)
        .def_readwrite("span_begin", &SentenceVariant::span_begin)
        .def_readwrite("span_end", &SentenceVariant::span_end)
        .def_readwrite("subsequent", &SentenceVariant::subsequent)
        .def_readwrite("last", &SentenceVariant::last)
        .def("__len__", &SentenceVariant::length);

    py::class_<IdiomInstance>(m, "IdiomInstance")
        .def(py::init<>())
        .def_readwrite("id", &IdiomInstance::id)
        .def_readwrite("idiom", &IdiomInstance::idiom)
        .def_readwrite("pronoun", &IdiomInstance::pronoun)
        .def_readwrite("connector", &IdiomInstance::connector)
        .def_readwrite("s_a", &IdiomInstance::s_a)
        .def_readwrite("s_f", &IdiomInstance::s_f)
        .def_readwrite("s_l", &IdiomInstance::s_l)
        .def_readwrite("c_f", &IdiomInstance::c_f)
        .def_readwrite("c_l", &IdiomInstance::c_l)
        .def("validate", &IdiomInstance::validate);
    m.def("copula_for", &copula_for, py::arg("pronoun"));
    m.def("load_dataset", &load_dataset, py::arg("path"));
    m.def("save_dataset", &save_dataset, py::arg("instances"), py::arg("path"));
    m.def("synthetic_instances", &synthetic_instances, py::arg("config"), py::arg("count"),
          py::arg("seed"));

    py::class_<EmbeddingTable> emb(m, "EmbeddingTable");
    emb.def(py::init<>())
        .def_static("load", &EmbeddingTable::load, py::arg("path"))
        .def("save", &EmbeddingTable::save, py::arg("path"))
        .def("insert", &EmbeddingTable::insert, py::arg("id"), py::arg("variant"),
             py::arg("vector"))
        .def("at", &EmbeddingTable::at, py::arg("id"), py::arg("variant"));
    emb.attr("FIGURATIVE") = EmbeddingTable::kFigurative;
    emb.attr("LITERAL") = EmbeddingTable::kLiteral;

    // ---- interventions ----

    py::enum_<HookKind>(m, "HookKind")
        .value("residual", HookKind::residual)
        .value("attn_output", HookKind::attn_output)
        .value("mlp_output", HookKind::mlp_output)
        .value("head_output", HookKind::head_output);

    py::class_<HookPoint>(m, "HookPoint")
        .def(py::init([](HookKind kind, int layer, int position, int head) {
                 return HookPoint{kind, layer, position, head};
             }),
             py::arg("kind"), py::arg("layer"), py::arg("position"), py::arg("head") = -1)
        .def_readwrite("kind", &HookPoint::kind)
        .def_readwrite("layer", &HookPoint::layer)
        .def_readwrite("position", &HookPoint::position)
        .def_readwrite("head", &HookPoint::head);

    py::enum_<PositionRole::Tag>(m, "RoleTag")
        .value("span_from_end", PositionRole::span_from_end)
        .value("subsequent", PositionRole::subsequent)
        .value("last", PositionRole::last);

    py::class_<PositionRole>(m, "PositionRole")
        .def(py::init([](PositionRole::Tag tag, int offset) {
                 return PositionRole{tag, offset};
             }),
             py::arg("tag"), py::arg("offset") = 0)
        .def_readwrite("tag", &PositionRole::tag)
        .def_readwrite("offset", &PositionRole::offset);

    py::class_<EdgeMask>(m, "EdgeMask")
        .def(py::init([](int layer, int query_position, int key_position,
                         std::vector<int> heads) {
                 return EdgeMask{layer, query_position, key_position, std::move(heads)};
             }),
             py::arg("layer"), py::arg("query_position"), py::arg("key_position"),
             py::arg("heads") = std::vector<int>{})
        .def_readwrite("layer", &EdgeMask::layer)
        .def_readwrite("query_position", &EdgeMask::query_position)
        .def_readwrite("key_position", &EdgeMask::key_position)
        .def_readwrite("heads", &EdgeMask::heads);

    py::class_<InterventionSpec>(m, "InterventionSpec");
    py::class_<MeanCache>(m, "MeanCache");

    m.def("knockout_zero", &knockout_zero, py::arg("points"));
    m.def("knockout_mean", &knockout_mean, py::arg("points"), py::arg("cache"));
    m.def("mask_edges", &mask_edges, py::arg("masks"));
    m.def(
        "merge",
        [](const std::vector<InterventionSpec>& fragments) {
            if (fragments.empty()) throw ValidationError("merge wants at least one fragment");
            InterventionSpec out = fragments[0];
            for (size_t i = 1; i < fragments.size(); ++i) out = merge({out, fragments[i]});
            return out;
        },
        py::arg("fragments"));
    m.def("compute_mean_cache", &compute_mean_cache, py::arg("model"), py::arg("instances"),
          py::arg("variant"));

    // ---- forward pass ----

    py::class_<ForwardResult>(m, "ForwardResult")
        .def_property_readonly(
            "logits", [](const ForwardResult& r) { return vec_to_numpy(r.logits); })
        .def("embeddings",
             [](const ForwardResult& r) { return mat_to_numpy(r.record.embeddings); })
        .def(
            "residual_in",
            [](const ForwardResult& r, int layer) {
                checked(r.record.resid_out, layer, "residual_in");
                return mat_to_numpy(r.record.residual_in(layer));
            },
            py::arg("layer"))
        .def(
            "resid_out",
            [](const ForwardResult& r, int layer) {
                return mat_to_numpy(checked(r.record.resid_out, layer, "resid_out"));
            },
            py::arg("layer"))
        .def(
            "attn_out",
            [](const ForwardResult& r, int layer) {
                return mat_to_numpy(checked(r.record.attn_out, layer, "attn_out"));
            },
            py::arg("layer"))
        .def(
            "mlp_out",
            [](const ForwardResult& r, int layer) {
                return mat_to_numpy(checked(r.record.mlp_out, layer, "mlp_out"));
            },
            py::arg("layer"))
        .def(
            "attn",
            [](const ForwardResult& r, int layer, int head) {
                return mat_to_numpy(checked(r.record.attn, layer, head, "attn"));
            },
            py::arg("layer"), py::arg("head"))
        .def(
            "head_contrib",
            [](const ForwardResult& r, int layer, int head) {
                return mat_to_numpy(checked(r.record.head_contrib, layer, head, "head_contrib"));
            },
            py::arg("layer"), py::arg("head"));

    m.def(
        "forward",
        [](const Model& model, const std::vector<int>& tokens, const InterventionSpec* spec,
           bool want_full_logits) { return forward(model, tokens, spec, want_full_logits); },
        py::arg("model"), py::arg("tokens"),
        py::arg("interventions").none(true) = static_cast<const InterventionSpec*>(nullptr),
        py::arg("want_full_logits") = false);
    m.def(
        "patch_from",
        [](const HookPoint& target, const ForwardResult& source, int source_position) {
            return patch_from(target, source.record, source_position);
        },
        py::arg("target"), py::arg("source"), py::arg("source_position"));

    // ---- metrics and statistics ----

    py::class_<InterpretationScore>(m, "InterpretationScore")
        .def_readonly("f", &InterpretationScore::f)
        .def_readonly("l", &InterpretationScore::l);
    py::class_<DeltaI>(m, "DeltaI")
        .def_readonly("f", &DeltaI::f)
        .def_readonly("l", &DeltaI::l);
    m.def("interpretation_scores", &interpretation_scores, py::arg("logits"), py::arg("c_f"),
          py::arg("c_l"));
    m.def("delta_i", &delta_i, py::arg("intervened"), py::arg("original"));
    m.def(
        "kernel_alignment",
        [](const FloatArray& hidden, const FloatArray& external, int k) {
            return kernel_alignment(numpy_to_mat(hidden), numpy_to_mat(external), k);
        },
        py::arg("hidden"), py::arg("external"), py::arg("k"));
    m.def(
        "head_value_cosine",
        [](const ForwardResult& run_a, int span_begin_a, int span_end_a, int query_a,
           const ForwardResult& run_b, int span_begin_b, int span_end_b, int query_b, int layer,
           int head) {
            return head_value_cosine(run_a.record, span_begin_a, span_end_a, query_a,
                                     run_b.record, span_begin_b, span_end_b, query_b, layer,
                                     head);
        },
        py::arg("run_a"), py::arg("span_begin_a"), py::arg("span_end_a"), py::arg("query_a"),
        py::arg("run_b"), py::arg("span_begin_b"), py::arg("span_end_b"), py::arg("query_b"),
        py::arg("layer"), py::arg("head"));

    py::class_<BootstrapCi>(m, "BootstrapCi")
        .def_readonly("mean", &BootstrapCi::mean)
        .def_readonly("lo", &BootstrapCi::lo)
        .def_readonly("hi", &BootstrapCi::hi);
    m.def("bootstrap_ci", &bootstrap_ci, py::arg("values"), py::arg("b") = 1000,
          py::arg("level") = 0.95, py::arg("seed") = 0);

    py::class_<TTest>(m, "TTest")
        .def_readonly("t", &TTest::t)
        .def_readonly("p", &TTest::p)
        .def_readonly("df", &TTest::df);
    m.def("paired_t_test", &paired_t_test, py::arg("a"), py::arg("b"));

    py::class_<TemplateSpec>(m, "TemplateSpec")
        .def(py::init([](std::string pronoun, bool use_would, std::string connector) {
                 return TemplateSpec{std::move(pronoun), use_would, std::move(connector)};
             }),
             py::arg("pronoun"), py::arg("use_would"), py::arg("connector"))
        .def_readwrite("pronoun", &TemplateSpec::pronoun)
        .def_readwrite("use_would", &TemplateSpec::use_would)
        .def_readwrite("connector", &TemplateSpec::connector)
        .def("copula", &TemplateSpec::copula)
        .def("validate", &TemplateSpec::validate);
    m.def("instantiate", &instantiate, py::arg("phrase"), py::arg("spec"));
    m.def("candidate_tokens", &candidate_tokens, py::arg("z_f"), py::arg("z_l"), py::arg("k"));

    py::class_<InstanceValidation>(m, "InstanceValidation")
        .def_readonly("figurative_on_idiom", &InstanceValidation::figurative_on_idiom)
        .def_readonly("figurative_on_f_para", &InstanceValidation::figurative_on_f_para)
        .def_readonly("literal_on_l_para", &InstanceValidation::literal_on_l_para)
        .def("pass_", &InstanceValidation::pass);
    m.def("validate_instance", &validate_instance, py::arg("logits_a"), py::arg("logits_f"),
          py::arg("logits_l"), py::arg("c_f"), py::arg("c_l"));

    // ---- sweeps, summaries, experiments ----

    py::enum_<SweepAxis>(m, "SweepAxis")
        .value("layer", SweepAxis::layer)
        .value("head", SweepAxis::head)
        .value("layer_head", SweepAxis::layer_head);

    py::class_<MetricStat>(m, "MetricStat")
        .def_readonly("name", &MetricStat::name)
        .def_readonly("mean", &MetricStat::mean)
        .def_readonly("lo", &MetricStat::lo)
        .def_readonly("hi", &MetricStat::hi);
    py::class_<SweepCell>(m, "SweepCell")
        .def_readonly("layer", &SweepCell::layer)
        .def_readonly("head", &SweepCell::head)
        .def_readonly("n", &SweepCell::n)
        .def_readonly("significant", &SweepCell::significant)
        .def_readonly("metrics", &SweepCell::metrics);
    py::class_<SweepResult>(m, "SweepResult")
        .def_readonly("axis", &SweepResult::axis)
        .def_readonly("cells", &SweepResult::cells)
        .def("validate", &SweepResult::validate);
    m.def("sweep_to_csv", &sweep_to_csv);
    m.def("sweep_to_json", &sweep_to_json);
    m.def("sweep_to_svg", &sweep_to_svg);
    m.def("sweep_from_csv", &sweep_from_csv, py::arg("text"));
    m.def("sweep_from_json", &sweep_from_json, py::arg("text"));

    py::class_<Summary>(m, "Summary")
        .def_readonly("values", &Summary::values)
        .def("at", &Summary::at, py::arg("name"));
    m.def("summary_to_csv", &summary_to_csv);
    m.def("summary_to_json", &summary_to_json);

    py::class_<ValidationRow>(m, "ValidationRow")
        .def_readonly("id", &ValidationRow::id)
        .def_readonly("figurative_on_idiom", &ValidationRow::figurative_on_idiom)
        .def_readonly("figurative_on_f_para", &ValidationRow::figurative_on_f_para)
        .def_readonly("literal_on_l_para", &ValidationRow::literal_on_l_para)
        .def_readonly("pass_", &ValidationRow::pass);
    py::class_<ValidationReport>(m, "ValidationReport")
        .def_readonly("rows", &ValidationReport::rows)
        .def("passed", &ValidationReport::passed);
    m.def("validation_to_csv", &validation_to_csv);
    m.def("validation_to_json", &validation_to_json);

    py::class_<HeadEffect>(m, "HeadEffect")
        .def_readonly("layer", &HeadEffect::layer)
        .def_readonly("head", &HeadEffect::head)
        .def_readonly("delta_f", &HeadEffect::delta_f)
        .def_readonly("delta_l", &HeadEffect::delta_l);
    py::class_<HeadSets>(m, "HeadSets")
        .def(py::init<>())
        .def_readwrite("idiomatic", &HeadSets::idiomatic)
        .def_readwrite("semantic", &HeadSets::semantic)
        .def_readwrite("random", &HeadSets::random);
    m.def("rank_heads", &rank_heads, py::arg("effects"), py::arg("k"), py::arg("seed"));
    m.def("head_sets_to_json", &head_sets_to_json);
    m.def("head_sets_from_json", &head_sets_from_json, py::arg("text"));
    m.def("load_head_sets", &load_head_sets, py::arg("path"));

    py::class_<ExperimentConfig>(m, "ExperimentConfig")
        .def(py::init<>())
        .def_readwrite("experiment", &ExperimentConfig::experiment)
        .def_readwrite("seed", &ExperimentConfig::seed)
        .def_readwrite("mode", &ExperimentConfig::mode)
        .def_readwrite("variant", &ExperimentConfig::variant)
        .def_readwrite("knockout_target", &ExperimentConfig::knockout_target)
        .def_readwrite("patch_source", &ExperimentConfig::patch_source)
        .def_readwrite("edge_to", &ExperimentConfig::edge_to)
        .def_readwrite("layer_begin", &ExperimentConfig::layer_begin)
        .def_readwrite("layer_end", &ExperimentConfig::layer_end)
        .def_readwrite("k_neighbors", &ExperimentConfig::k_neighbors)
        .def_readwrite("k_heads", &ExperimentConfig::k_heads)
        .def_readwrite("bootstrap_b", &ExperimentConfig::bootstrap_b)
        .def_readwrite("ci_level", &ExperimentConfig::ci_level);

    py::class_<HeadScanOutput>(m, "HeadScanOutput")
        .def_readonly("sweep", &HeadScanOutput::sweep)
        .def_readonly("heads", &HeadScanOutput::heads);

    m.def("run_sublayer_knockout", &run_sublayer_knockout, py::arg("model"),
          py::arg("instances"), py::arg("config"));
    m.def("run_head_scan", &run_head_scan, py::arg("model"), py::arg("instances"),
          py::arg("config"));
    m.def("run_component_patch", &run_component_patch, py::arg("model"), py::arg("instances"),
          py::arg("heads"), py::arg("config"));
    m.def("run_kernel_align", &run_kernel_align, py::arg("model"), py::arg("instances"),
          py::arg("embeddings"), py::arg("config"));
    m.def("run_because_patch", &run_because_patch, py::arg("model"), py::arg("instances"),
          py::arg("config"));
    m.def("run_edge_knockout", &run_edge_knockout, py::arg("model"), py::arg("instances"),
          py::arg("config"));
    m.def("run_validate", &run_validate, py::arg("model"), py::arg("instances"));
    m.def("seeded_derangement", &seeded_derangement, py::arg("n"), py::arg("seed"));

    // ---- dataset construction ----

    py::class_<BuildRow>(m, "BuildRow")
        .def(py::init<>())
        .def_readwrite("id", &BuildRow::id)
        .def_readwrite("idiom", &BuildRow::idiom)
        .def_readwrite("figurative", &BuildRow::figurative)
        .def_readwrite("literal", &BuildRow::literal)
        .def_readwrite("pronoun", &BuildRow::pronoun)
        .def_readwrite("use_would", &BuildRow::use_would)
        .def_readwrite("connector", &BuildRow::connector);
    m.def("load_build_rows", &load_build_rows, py::arg("csv_path"));
    py::class_<BuildOutcome>(m, "BuildOutcome")
        .def_readonly("kept", &BuildOutcome::kept)
        .def_readonly("total", &BuildOutcome::total);
    m.def("build_dataset", &build_dataset, py::arg("model"), py::arg("tokenizer"),
          py::arg("rows"));
    m.def("tokenize_template", &tokenize_template, py::arg("tokenizer"), py::arg("phrase"),
          py::arg("pronoun"), py::arg("use_would"), py::arg("connector"));

    // ---- command-line entry ----

    m.def(
        "cli",
        [](const std::vector<std::string>& args) {
            std::vector<std::string> hold{"resid-scope"};
            hold.insert(hold.end(), args.begin(), args.end());
            std::vector<const char*> argv;
            argv.reserve(hold.size());
            for (const auto& s : hold) argv.push_back(s.c_str());
            return run_cli(static_cast<int>(argv.size()), argv.data());
        },
        py::arg("args"), "run one experiment exactly as the resid-scope binary would");
}
