#include "residscope/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "residscope/dataset_builder.hpp"
#include "residscope/rng.hpp"
#include "residscope/safetensors.hpp"

namespace residscope {

using nlohmann::json;

double Summary::at(const std::string& name) const {
    for (const auto& [k, v] : values) {
        if (k == name) return v;
    }
    throw ValidationError("summary: no value named " + name);
}

std::string summary_to_csv(const Summary& s) {
    std::string out = "name,value\n";
    for (const auto& [k, v] : s.values) out += k + "," + format_double(v) + "\n";
    return out;
}

std::string summary_to_json(const Summary& s) {
    json j = json::object();
    for (const auto& [k, v] : s.values) j[k] = v;
    return j.dump(2) + "\n";
}

int ValidationReport::passed() const {
    int n = 0;
    for (const auto& r : rows) n += r.pass ? 1 : 0;
    return n;
}

std::string validation_to_csv(const ValidationReport& r) {
    std::string out = "id,figurative_on_idiom,figurative_on_f_para,literal_on_l_para,pass\n";
    auto b = [](bool v) { return v ? "true" : "false"; };
    for (const auto& row : r.rows) {
        out += row.id;
        out += std::string(",") + b(row.figurative_on_idiom) + "," + b(row.figurative_on_f_para) +
               "," + b(row.literal_on_l_para) + "," + b(row.pass) + "\n";
    }
    return out;
}

std::string validation_to_json(const ValidationReport& r) {
    json rows = json::array();
    for (const auto& row : r.rows) {
        rows.push_back({{"id", row.id},
                        {"figurative_on_idiom", row.figurative_on_idiom},
                        {"figurative_on_f_para", row.figurative_on_f_para},
                        {"literal_on_l_para", row.literal_on_l_para},
                        {"pass", row.pass}});
    }
    json j{{"total", r.rows.size()}, {"passed", r.passed()}, {"instances", rows}};
    return j.dump(2) + "\n";
}

int thread_cap() {
    if (const char* env = std::getenv("RESID_SCOPE_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || v < 1) {
            throw ValidationError("RESID_SCOPE_THREADS must be a positive integer, got '" +
                                  std::string(env) + "'");
        }
        return static_cast<int>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
    const int workers = std::min(thread_cap(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

const SentenceVariant& select_variant(const IdiomInstance& inst, const std::string& selector) {
    if (selector == "sa") return inst.s_a;
    if (selector == "sf") return inst.s_f;
    if (selector == "sl") return inst.s_l;
    throw ValidationError("unknown variant '" + selector + "', want sa|sf|sl");
}

namespace {

void accumulate_record(MeanCache& cache, const ActivationRecord& rec, const SentenceVariant& v) {
    std::vector<std::pair<int, PositionRole>> spots;
    for (int pos = v.span_begin; pos < v.span_end; ++pos) {
        spots.push_back({pos, {PositionRole::span_from_end, v.span_end - 1 - pos}});
    }
    spots.push_back({v.subsequent, {PositionRole::subsequent, 0}});
    spots.push_back({v.last, {PositionRole::last, 0}});

    const int d = rec.hidden_dim;
    for (int l = 0; l < rec.num_layers; ++l) {
        for (const auto& [pos, role] : spots) {
            cache.accumulate({HookKind::attn_output, l, -1, role}, rec.attn_out[l].row(pos), d);
            cache.accumulate({HookKind::mlp_output, l, -1, role}, rec.mlp_out[l].row(pos), d);
            cache.accumulate({HookKind::residual, l, -1, role}, rec.resid_out[l].row(pos), d);
            for (int j = 0; j < rec.num_heads; ++j) {
                cache.accumulate({HookKind::head_output, l, j, role},
                                 rec.head_contrib[l][j].row(pos), d);
            }
        }
    }
}

}  // namespace

MeanCache compute_mean_cache(const Model& model, const std::vector<IdiomInstance>& instances,
                             const std::string& variant) {
    if (instances.empty()) throw ValidationError("mean cache: no instances");
    MeanCache cache;
    const int n = static_cast<int>(instances.size());
    const int batch = std::max(1, thread_cap());
    std::vector<ActivationRecord> records(std::min(batch, n));
    // runs fan out per batch; accumulation stays in instance order so the
    // cache is identical no matter the thread count
    for (int start = 0; start < n; start += batch) {
        const int count = std::min(batch, n - start);
        parallel_for(count, [&](int i) {
            const auto& v = select_variant(instances[start + i], variant);
            records[i] = forward(model, v.ids).record;
        });
        for (int i = 0; i < count; ++i) {
            accumulate_record(cache, records[i], select_variant(instances[start + i], variant));
        }
    }
    cache.finalize();
    return cache;
}

namespace {

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    const std::uint64_t vals[4] = {base, a, b, c};
    return fnv1a64(vals, sizeof vals);
}

// inclusive range; an explicitly inverted range means "no layers"
std::pair<int, int> layer_range(const ExperimentConfig& cfg, int num_layers, int def_begin,
                                int def_end) {
    const int b = cfg.layer_begin >= 0 ? cfg.layer_begin : def_begin;
    const int e = cfg.layer_end >= 0 ? cfg.layer_end : def_end;
    if (b > e) return {0, -1};
    if (e >= num_layers) {
        throw ValidationError("layer range " + std::to_string(b) + ".." + std::to_string(e) +
                              " exceeds the model's " + std::to_string(num_layers) + " layers");
    }
    return {b, e};
}

double vec_mean(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / v.size();
}

double vec_sd(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = vec_mean(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / (v.size() - 1));
}

// p-value guard for aggregation: too few pairs means no evidence (p = 1); a
// perfectly constant nonzero shift is treated as maximal evidence (p = 0)
double paired_p(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2) return 1.0;
    try {
        return paired_t_test(a, b).p;
    } catch (const ValidationError&) {
        return 0.0;
    }
}

TTest safe_paired_t(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2) return {};
    try {
        return paired_t_test(a, b);
    } catch (const ValidationError&) {
        TTest t;
        t.p = 0.0;
        t.df = static_cast<int>(a.size()) - 1;
        return t;
    }
}

MetricStat metric_from_values(const std::string& name, const std::vector<double>& values,
                              const ExperimentConfig& cfg, std::uint64_t seed_tag) {
    MetricStat m;
    m.name = name;
    if (values.size() < 2) {
        m.mean = m.lo = m.hi = vec_mean(values);
        return m;
    }
    const auto ci = bootstrap_ci(values, cfg.bootstrap_b, cfg.ci_level,
                                 mix_seed(cfg.seed, seed_tag, values.size(), 0x5eed));
    m.mean = ci.mean;
    m.lo = std::min(ci.lo, ci.mean);
    m.hi = std::max(ci.hi, ci.mean);
    return m;
}

struct CellDeltas {
    int layer = -1;
    int head = -1;
    std::vector<double> df, dl;
    // extra named series (e.g. source-idiom-scored deltas)
    std::vector<std::pair<std::string, std::vector<double>>> extra;
};

// means + bootstrap CIs per metric, then the two-part significance flag:
// paired ΔF-vs-ΔL p < 0.05 and a |ΔF - ΔL| gap above the sweep's average gap
SweepResult assemble_sweep(SweepAxis axis, const std::vector<CellDeltas>& data,
                           const ExperimentConfig& cfg) {
    SweepResult r;
    r.axis = axis;
    std::vector<double> gaps(data.size());
    for (size_t c = 0; c < data.size(); ++c) {
        gaps[c] = std::fabs(vec_mean(data[c].df) - vec_mean(data[c].dl));
    }
    const double avg_gap = vec_mean(gaps);

    for (size_t c = 0; c < data.size(); ++c) {
        const auto& cell = data[c];
        SweepCell out;
        out.layer = cell.layer;
        out.head = cell.head;
        out.n = static_cast<int>(cell.df.size());
        const std::uint64_t tag = (static_cast<std::uint64_t>(cell.layer + 1) << 20) ^
                                  static_cast<std::uint64_t>(cell.head + 1);
        out.metrics.push_back(metric_from_values("delta_f", cell.df, cfg, tag * 2));
        out.metrics.push_back(metric_from_values("delta_l", cell.dl, cfg, tag * 2 + 1));
        for (size_t x = 0; x < cell.extra.size(); ++x) {
            out.metrics.push_back(metric_from_values(cell.extra[x].first, cell.extra[x].second,
                                                     cfg, tag * 16 + 2 + x));
        }
        out.significant = paired_p(cell.df, cell.dl) < 0.05 && gaps[c] > avg_gap;
        r.cells.push_back(std::move(out));
    }
    r.validate();
    return r;
}

InterventionSpec span_knockout(HookKind kind, int layer, int head, const SentenceVariant& v,
                               const std::string& mode, const MeanCache& cache) {
    if (mode == "zero") {
        std::vector<HookPoint> points;
        for (int pos = v.span_begin; pos < v.span_end; ++pos) {
            points.push_back({kind, layer, pos, head});
        }
        return knockout_zero(points);
    }
    if (mode == "mean") {
        std::vector<std::pair<HookPoint, PositionRole>> points;
        for (int pos = v.span_begin; pos < v.span_end; ++pos) {
            points.push_back({HookPoint{kind, layer, pos, head},
                              PositionRole{PositionRole::span_from_end, v.span_end - 1 - pos}});
        }
        return knockout_mean(points, cache);
    }
    throw ValidationError("unknown knockout mode '" + mode + "', want zero|mean");
}

std::vector<InterpretationScore> baseline_scores(const Model& model,
                                                 const std::vector<IdiomInstance>& instances,
                                                 const std::string& variant) {
    std::vector<InterpretationScore> base(instances.size());
    parallel_for(static_cast<int>(instances.size()), [&](int i) {
        const auto& v = select_variant(instances[i], variant);
        const auto res = forward(model, v.ids);
        base[i] = interpretation_scores(res.logits, instances[i].c_f, instances[i].c_l);
    });
    return base;
}

}  // namespace

SweepResult run_sublayer_knockout(const Model& model,
                                  const std::vector<IdiomInstance>& instances,
                                  const ExperimentConfig& cfg) {
    if (instances.empty()) throw ValidationError("sublayer knockout: no instances");
    HookKind kind;
    if (cfg.knockout_target == "mhsa") {
        kind = HookKind::attn_output;
    } else if (cfg.knockout_target == "mlp") {
        kind = HookKind::mlp_output;
    } else {
        throw ValidationError("unknown knockout target '" + cfg.knockout_target +
                              "', want mhsa|mlp");
    }
    const auto [lb, le] = layer_range(cfg, model.config.num_layers, 0,
                                      model.config.num_layers - 1);
    MeanCache cache;
    if (cfg.mode == "mean") {
        cache = compute_mean_cache(model, instances, cfg.variant);
    } else if (cfg.mode != "zero") {
        throw ValidationError("unknown knockout mode '" + cfg.mode + "', want zero|mean");
    }
    const auto base = baseline_scores(model, instances, cfg.variant);
    const int n = static_cast<int>(instances.size());

    std::vector<CellDeltas> cells;
    for (int layer = lb; layer <= le; ++layer) {
        CellDeltas cell;
        cell.layer = layer;
        cell.df.resize(n);
        cell.dl.resize(n);
        parallel_for(n, [&, layer](int i) {
            const auto& inst = instances[i];
            const auto& v = select_variant(inst, cfg.variant);
            const auto spec = span_knockout(kind, layer, -1, v, cfg.mode, cache);
            const auto res = forward(model, v.ids, &spec);
            const auto d =
                delta_i(interpretation_scores(res.logits, inst.c_f, inst.c_l), base[i]);
            cell.df[i] = d.f;
            cell.dl[i] = d.l;
        });
        cells.push_back(std::move(cell));
    }
    return assemble_sweep(SweepAxis::layer, cells, cfg);
}

HeadScanOutput run_head_scan(const Model& model, const std::vector<IdiomInstance>& instances,
                             const ExperimentConfig& cfg) {
    if (instances.empty()) throw ValidationError("head scan: no instances");
    const auto [lb, le] = layer_range(cfg, model.config.num_layers, 0,
                                      model.config.num_layers - 1);
    MeanCache cache;
    if (cfg.mode == "mean") {
        cache = compute_mean_cache(model, instances, cfg.variant);
    } else if (cfg.mode != "zero") {
        throw ValidationError("unknown knockout mode '" + cfg.mode + "', want zero|mean");
    }
    const auto base = baseline_scores(model, instances, cfg.variant);
    const int n = static_cast<int>(instances.size());

    std::vector<CellDeltas> cells;
    std::vector<HeadEffect> effects;
    for (int layer = lb; layer <= le; ++layer) {
        for (int head = 0; head < model.config.num_heads; ++head) {
            CellDeltas cell;
            cell.layer = layer;
            cell.head = head;
            cell.df.resize(n);
            cell.dl.resize(n);
            parallel_for(n, [&, layer, head](int i) {
                const auto& inst = instances[i];
                const auto& v = select_variant(inst, cfg.variant);
                const auto spec =
                    span_knockout(HookKind::head_output, layer, head, v, cfg.mode, cache);
                const auto res = forward(model, v.ids, &spec);
                const auto d =
                    delta_i(interpretation_scores(res.logits, inst.c_f, inst.c_l), base[i]);
                cell.df[i] = d.f;
                cell.dl[i] = d.l;
            });
            effects.push_back({layer, head, vec_mean(cell.df), vec_mean(cell.dl)});
            cells.push_back(std::move(cell));
        }
    }
    HeadScanOutput out;
    out.sweep = assemble_sweep(SweepAxis::layer_head, cells, cfg);
    out.heads = rank_heads(effects, cfg.k_heads, cfg.seed);
    return out;
}

namespace {

InterventionSpec component_patches(const ActivationRecord& source, const SentenceVariant& va,
                                   const SentenceVariant& vl,
                                   const std::vector<int>& mlp_layers,
                                   const std::vector<std::pair<int, int>>& heads) {
    InterventionSpec spec;
    const int m = std::min(va.span_end - va.span_begin, vl.span_end - vl.span_begin);
    for (int r = 0; r < m; ++r) {
        const int tpos = vl.span_end - 1 - r;
        const int spos = va.span_end - 1 - r;
        for (int layer : mlp_layers) {
            auto frag =
                patch_from({HookKind::mlp_output, layer, tpos, -1}, source, spos);
            spec.patches.push_back(std::move(frag.patches[0]));
        }
        for (const auto& [layer, head] : heads) {
            auto frag =
                patch_from({HookKind::head_output, layer, tpos, head}, source, spos);
            spec.patches.push_back(std::move(frag.patches[0]));
        }
    }
    return spec;
}

}  // namespace

Summary run_component_patch(const Model& model, const std::vector<IdiomInstance>& instances,
                            const HeadSets& heads, const ExperimentConfig& cfg) {
    if (instances.empty()) throw ValidationError("component patch: no instances");
    const int num_layers = model.config.num_layers;
    const auto [lb, le] = layer_range(cfg, num_layers, 0, std::min(2, num_layers - 1));
    std::vector<int> exp_layers;
    for (int l = lb; l <= le; ++l) exp_layers.push_back(l);

    // control: same number of seeded random sublayers and heads
    Rng rng(mix_seed(cfg.seed, 0xc0, 0x117, 0x401));
    std::vector<int> ctrl_layers;
    {
        std::vector<int> all(num_layers);
        std::iota(all.begin(), all.end(), 0);
        for (size_t k = 0; k < exp_layers.size(); ++k) {
            const size_t j = k + rng.next_below(all.size() - k);
            std::swap(all[k], all[j]);
            ctrl_layers.push_back(all[k]);
        }
    }
    std::vector<std::pair<int, int>> ctrl_heads;
    {
        std::set<std::pair<int, int>> exclude(heads.idiomatic.begin(), heads.idiomatic.end());
        std::vector<std::pair<int, int>> pool;
        for (int l = 0; l < num_layers; ++l) {
            for (int j = 0; j < model.config.num_heads; ++j) {
                if (!exclude.count({l, j})) pool.emplace_back(l, j);
            }
        }
        if (pool.size() < heads.idiomatic.size()) {
            throw ValidationError("component patch: not enough heads outside the idiomatic set "
                                  "for a matching control");
        }
        for (size_t k = 0; k < heads.idiomatic.size(); ++k) {
            const size_t j = k + rng.next_below(pool.size() - k);
            std::swap(pool[k], pool[j]);
            ctrl_heads.push_back(pool[k]);
        }
    }

    const int n = static_cast<int>(instances.size());
    std::vector<double> exp_df(n), exp_dl(n), ctrl_df(n), ctrl_dl(n);
    parallel_for(n, [&](int i) {
        const auto& inst = instances[i];
        const auto source = forward(model, inst.s_a.ids);
        const auto base = forward(model, inst.s_l.ids);
        const auto base_score = interpretation_scores(base.logits, inst.c_f, inst.c_l);

        const auto spec_exp =
            component_patches(source.record, inst.s_a, inst.s_l, exp_layers, heads.idiomatic);
        const auto spec_ctrl =
            component_patches(source.record, inst.s_a, inst.s_l, ctrl_layers, ctrl_heads);

        const auto run = [&](const InterventionSpec& spec) {
            if (spec.empty()) return base_score;
            const auto res = forward(model, inst.s_l.ids, &spec);
            return interpretation_scores(res.logits, inst.c_f, inst.c_l);
        };
        const auto de = delta_i(run(spec_exp), base_score);
        const auto dc = delta_i(run(spec_ctrl), base_score);
        exp_df[i] = de.f;
        exp_dl[i] = de.l;
        ctrl_df[i] = dc.f;
        ctrl_dl[i] = dc.l;
    });

    Summary s;
    s.add("n", n);
    s.add("experiment_delta_f_mean", vec_mean(exp_df));
    s.add("experiment_delta_f_sd", vec_sd(exp_df));
    s.add("experiment_delta_l_mean", vec_mean(exp_dl));
    s.add("experiment_delta_l_sd", vec_sd(exp_dl));
    s.add("control_delta_f_mean", vec_mean(ctrl_df));
    s.add("control_delta_f_sd", vec_sd(ctrl_df));
    s.add("control_delta_l_mean", vec_mean(ctrl_dl));
    s.add("control_delta_l_sd", vec_sd(ctrl_dl));
    const auto tf = safe_paired_t(exp_df, ctrl_df);
    const auto tl = safe_paired_t(exp_dl, ctrl_dl);
    s.add("compare_delta_f_t", tf.t);
    s.add("compare_delta_f_p", tf.p);
    s.add("compare_delta_l_t", tl.t);
    s.add("compare_delta_l_p", tl.p);
    return s;
}

SweepResult run_kernel_align(const Model& model, const std::vector<IdiomInstance>& instances,
                             const EmbeddingTable& embeddings, const ExperimentConfig& cfg) {
    const int n = static_cast<int>(instances.size());
    const int k = cfg.k_neighbors;
    if (k < 1 || n <= k) {
        throw ValidationError("kernel align: need more instances than neighbors, have " +
                              std::to_string(n) + " instances for k=" + std::to_string(k));
    }
    const auto [lb, le] = layer_range(cfg, model.config.num_layers, 0,
                                      model.config.num_layers - 1);
    static const char* kPosNames[4] = {"span_last", "subsequent", "after_subsequent", "last"};

    const int d = model.config.hidden_dim;
    std::vector<std::vector<Mat>> hidden(4);  // [position][layer] n x d
    for (auto& per_pos : hidden) per_pos.assign(model.config.num_layers, Mat(n, d));
    parallel_for(n, [&](int i) {
        const auto& v = select_variant(instances[i], cfg.variant);
        if (v.subsequent + 1 > v.last) {
            throw ValidationError("kernel align: instance " + instances[i].id +
                                  " has no token between the span and the last position");
        }
        const int positions[4] = {v.span_end - 1, v.subsequent, v.subsequent + 1, v.last};
        const auto res = forward(model, v.ids);
        for (int p = 0; p < 4; ++p) {
            for (int l = 0; l < model.config.num_layers; ++l) {
                const float* src = res.record.resid_out[l].row(positions[p]);
                std::copy(src, src + d, hidden[p][l].row(i));
            }
        }
    });

    const int e = embeddings.width();
    Mat fig(n, e), lit(n, e);
    for (int i = 0; i < n; ++i) {
        const auto& vf = embeddings.at(instances[i].id, EmbeddingTable::kFigurative);
        const auto& vl = embeddings.at(instances[i].id, EmbeddingTable::kLiteral);
        std::copy(vf.begin(), vf.end(), fig.row(i));
        std::copy(vl.begin(), vl.end(), lit.row(i));
    }

    SweepResult r;
    r.axis = SweepAxis::layer;
    for (int l = lb; l <= le; ++l) {
        SweepCell cell;
        cell.layer = l;
        cell.n = n;
        for (int p = 0; p < 4; ++p) {
            for (const auto& [tag, ext] : {std::pair<const char*, const Mat*>{"fig", &fig},
                                           std::pair<const char*, const Mat*>{"lit", &lit}}) {
                MetricStat m;
                m.name = std::string(tag) + "_" + kPosNames[p];
                m.mean = m.lo = m.hi = kernel_alignment(hidden[p][l], *ext, k);
                cell.metrics.push_back(std::move(m));
            }
        }
        r.cells.push_back(std::move(cell));
    }
    r.validate();
    return r;
}

std::vector<int> seeded_derangement(int n, std::uint64_t seed) {
    if (n < 2) {
        throw ValidationError("derangement: impossible for " + std::to_string(n) +
                              " instance(s)");
    }
    std::vector<int> p(n);
    std::iota(p.begin(), p.end(), 0);
    Rng rng(mix_seed(seed, 0xde, 0x8a17e, n));
    // Sattolo's cycle: one n-cycle, so no element maps to itself
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.next_below(i));
        std::swap(p[i], p[j]);
    }
    return p;
}

SweepResult run_because_patch(const Model& model, const std::vector<IdiomInstance>& instances,
                              const ExperimentConfig& cfg) {
    if (instances.empty()) throw ValidationError("because patch: no instances");
    const bool star = cfg.patch_source == "sa-star";
    if (!star && cfg.patch_source != "sa" && cfg.patch_source != "sf" &&
        cfg.patch_source != "sl") {
        throw ValidationError("unknown patch source '" + cfg.patch_source +
                              "', want sa|sf|sl|sa-star");
    }
    if (star && cfg.variant != "sa") {
        throw ValidationError("patch source sa-star pairs different idioms; the target must be "
                              "the idiom sentence (variant sa)");
    }
    // patch_source == variant is allowed: each instance patches from its own
    // run at the same position, a null control whose deltas are exactly zero.
    const auto [lb, le] = layer_range(cfg, model.config.num_layers, 0,
                                      model.config.num_layers - 1);
    const int n = static_cast<int>(instances.size());
    const int d = model.config.hidden_dim;

    std::vector<int> source_of(n);
    if (star) {
        source_of = seeded_derangement(n, cfg.seed);
    } else {
        std::iota(source_of.begin(), source_of.end(), 0);
    }

    // per instance: the target's baseline logits and, from the source run,
    // the residual state at its subsequent position for every layer
    std::vector<std::vector<float>> base_logits(n);
    std::vector<InterpretationScore> base(n);
    std::vector<Mat> source_resid(n);  // [L, d]
    parallel_for(n, [&](int i) {
        const auto& inst = instances[i];
        const auto& vt = select_variant(inst, cfg.variant);
        auto res = forward(model, vt.ids);
        base[i] = interpretation_scores(res.logits, inst.c_f, inst.c_l);
        base_logits[i] = std::move(res.logits);

        const auto& src_inst = instances[source_of[i]];
        const auto& vs = star ? src_inst.s_a : select_variant(src_inst, cfg.patch_source);
        const auto src = forward(model, vs.ids);
        Mat rows(model.config.num_layers, d);
        for (int l = 0; l < rows.rows; ++l) {
            const float* r = src.record.resid_out[l].row(vs.subsequent);
            std::copy(r, r + d, rows.row(l));
        }
        source_resid[i] = std::move(rows);
    });

    std::vector<CellDeltas> cells;
    for (int layer = lb; layer <= le; ++layer) {
        CellDeltas cell;
        cell.layer = layer;
        cell.df.resize(n);
        cell.dl.resize(n);
        std::vector<double> dfb(star ? n : 0), dlb(star ? n : 0);
        parallel_for(n, [&, layer](int i) {
            const auto& inst = instances[i];
            const auto& vt = select_variant(inst, cfg.variant);
            InterventionSpec spec;
            Patch patch;
            patch.at = {HookKind::residual, layer, vt.subsequent, -1};
            const float* row = source_resid[i].row(layer);
            patch.value.assign(row, row + d);
            spec.patches.push_back(std::move(patch));

            const auto res = forward(model, vt.ids, &spec);
            const auto d_own =
                delta_i(interpretation_scores(res.logits, inst.c_f, inst.c_l), base[i]);
            cell.df[i] = d_own.f;
            cell.dl[i] = d_own.l;
            if (star) {
                const auto& src_inst = instances[source_of[i]];
                const auto after =
                    interpretation_scores(res.logits, src_inst.c_f, src_inst.c_l);
                const auto before =
                    interpretation_scores(base_logits[i], src_inst.c_f, src_inst.c_l);
                const auto d_src = delta_i(after, before);
                dfb[i] = d_src.f;
                dlb[i] = d_src.l;
            }
        });
        if (star) {
            cell.extra.emplace_back("delta_f_source_idiom", std::move(dfb));
            cell.extra.emplace_back("delta_l_source_idiom", std::move(dlb));
        }
        cells.push_back(std::move(cell));
    }
    return assemble_sweep(SweepAxis::layer, cells, cfg);
}

SweepResult run_edge_knockout(const Model& model, const std::vector<IdiomInstance>& instances,
                              const ExperimentConfig& cfg) {
    if (instances.empty()) throw ValidationError("edge knockout: no instances");
    if (cfg.edge_to != "subsequent" && cfg.edge_to != "last") {
        throw ValidationError("unknown edge target '" + cfg.edge_to + "', want subsequent|last");
    }
    const auto [lb, le] = layer_range(cfg, model.config.num_layers, 0,
                                      model.config.num_layers - 1);
    const auto base = baseline_scores(model, instances, cfg.variant);
    const int n = static_cast<int>(instances.size());

    std::vector<CellDeltas> cells;
    for (int layer = lb; layer <= le; ++layer) {
        CellDeltas cell;
        cell.layer = layer;
        cell.df.resize(n);
        cell.dl.resize(n);
        parallel_for(n, [&, layer](int i) {
            const auto& inst = instances[i];
            const auto& v = select_variant(inst, cfg.variant);
            const int query = cfg.edge_to == "subsequent" ? v.subsequent : v.last;
            std::vector<EdgeMask> masks;
            for (int key = v.span_begin; key < v.span_end; ++key) {
                masks.push_back({layer, query, key, {}});
            }
            const auto spec = mask_edges(masks);
            const auto res = forward(model, v.ids, &spec);
            const auto d =
                delta_i(interpretation_scores(res.logits, inst.c_f, inst.c_l), base[i]);
            cell.df[i] = d.f;
            cell.dl[i] = d.l;
        });
        cells.push_back(std::move(cell));
    }
    return assemble_sweep(SweepAxis::layer, cells, cfg);
}

ValidationReport run_validate(const Model& model, const std::vector<IdiomInstance>& instances) {
    ValidationReport report;
    report.rows.resize(instances.size());
    parallel_for(static_cast<int>(instances.size()), [&](int i) {
        const auto& inst = instances[i];
        const auto za = forward(model, inst.s_a.ids).logits;
        const auto zf = forward(model, inst.s_f.ids).logits;
        const auto zl = forward(model, inst.s_l.ids).logits;
        const auto v = validate_instance(za, zf, zl, inst.c_f, inst.c_l);
        report.rows[i] = {inst.id, v.figurative_on_idiom, v.figurative_on_f_para,
                          v.literal_on_l_para, v.pass()};
    });
    return report;
}

namespace {

// minimal CSV field splitting with double-quote escaping
std::vector<std::string> split_csv_fields(const std::string& line, int line_no) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
        } else if (c == '"' && field.empty()) {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else {
            field += c;
        }
    }
    if (quoted) {
        throw ValidationError("csv line " + std::to_string(line_no) + ": unterminated quote");
    }
    out.push_back(std::move(field));
    return out;
}

}  // namespace

std::vector<BuildRow> load_build_rows(const std::string& csv_path) {
    std::ifstream in(csv_path, std::ios::binary);
    if (!in) throw IoError("build rows: cannot open " + csv_path);
    std::string line;
    int line_no = 0;
    if (!std::getline(in, line)) throw ValidationError("build rows: empty file " + csv_path);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string expected = "id,idiom,figurative,literal,pronoun,use_would,connector";
    if (line != expected) {
        throw ValidationError("build rows: header must be exactly '" + expected + "', got '" +
                              line + "'");
    }
    std::vector<BuildRow> rows;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_csv_fields(line, line_no);
        if (f.size() != 7) {
            throw ValidationError("build rows line " + std::to_string(line_no) + ": expected 7 " +
                                  "fields, got " + std::to_string(f.size()));
        }
        BuildRow r;
        r.id = f[0];
        r.idiom = f[1];
        r.figurative = f[2];
        r.literal = f[3];
        r.pronoun = f[4];
        if (f[5] == "true" || f[5] == "1") {
            r.use_would = true;
        } else if (f[5] == "false" || f[5] == "0") {
            r.use_would = false;
        } else {
            throw ValidationError("build rows line " + std::to_string(line_no) +
                                  ": use_would must be true/false, got '" + f[5] + "'");
        }
        r.connector = f[6];
        if (r.id.empty()) {
            throw ValidationError("build rows line " + std::to_string(line_no) + ": empty id");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

SentenceVariant tokenize_template(const Tokenizer& tokenizer, const std::string& phrase,
                                  const std::string& pronoun, bool use_would,
                                  const std::string& connector) {
    TemplateSpec spec;
    spec.pronoun = pronoun;
    spec.use_would = use_would;
    spec.connector = connector;
    // instantiate() also validates the slots and the phrase
    const std::string text = instantiate(phrase, spec);

    std::string prefix = pronoun;
    prefix[0] = static_cast<char>(prefix[0] - 'a' + 'A');
    if (use_would) prefix += " would";
    const std::string middle = " " + phrase;
    const std::string suffix =
        " because " + pronoun + " " + spec.copula() + " " + connector;

    SentenceVariant v;
    v.text = text;
    const auto ids_p = tokenizer.encode(prefix);
    const auto ids_m = tokenizer.encode(middle);
    const auto ids_s = tokenizer.encode(suffix);
    if (ids_m.empty()) throw ValidationError("tokenization: phrase '" + phrase + "' vanished");
    v.ids = ids_p;
    v.ids.insert(v.ids.end(), ids_m.begin(), ids_m.end());
    v.ids.insert(v.ids.end(), ids_s.begin(), ids_s.end());
    v.span_begin = static_cast<int>(ids_p.size());
    v.span_end = static_cast<int>(ids_p.size() + ids_m.size());
    v.subsequent = v.span_end;
    v.last = static_cast<int>(v.ids.size()) - 1;

    if (tokenizer.encode(text) != v.ids) {
        throw ValidationError("tokenization: template parts of '" + text +
                              "' do not re-tokenize to the same ids; span would be wrong");
    }
    return v;
}

BuildOutcome build_dataset(const Model& model, const Tokenizer& tokenizer,
                           const std::vector<BuildRow>& rows) {
    const int n = static_cast<int>(rows.size());
    BuildOutcome out;
    out.total = n;
    std::vector<IdiomInstance> built(n);
    std::vector<char> keep(n, 0);
    parallel_for(n, [&](int i) {
        const auto& row = rows[i];
        IdiomInstance inst;
        inst.id = row.id;
        inst.idiom = row.idiom;
        inst.pronoun = row.pronoun;
        inst.connector = row.connector;
        inst.s_a = tokenize_template(tokenizer, row.idiom, row.pronoun, row.use_would,
                                     row.connector);
        inst.s_f = tokenize_template(tokenizer, row.figurative, row.pronoun, row.use_would,
                                     row.connector);
        inst.s_l = tokenize_template(tokenizer, row.literal, row.pronoun, row.use_would,
                                     row.connector);
        for (const auto* v : {&inst.s_a, &inst.s_f, &inst.s_l}) {
            validate_tokens(v->ids, model.config);
        }
        const auto zf = forward(model, inst.s_f.ids).logits;
        const auto zl = forward(model, inst.s_l.ids).logits;
        auto [c_f, c_l] = candidate_tokens(zf, zl, kCandidateCount);
        std::sort(c_f.begin(), c_f.end());
        std::sort(c_l.begin(), c_l.end());
        inst.c_f = std::move(c_f);
        inst.c_l = std::move(c_l);

        const auto za = forward(model, inst.s_a.ids).logits;
        const auto v = validate_instance(za, zf, zl, inst.c_f, inst.c_l);
        if (v.pass()) {
            inst.validate();
            built[i] = std::move(inst);
            keep[i] = 1;
        }
    });
    for (int i = 0; i < n; ++i) {
        if (keep[i]) out.kept.push_back(std::move(built[i]));
    }
    return out;
}

namespace {

json pairs_to_json(const std::vector<std::pair<int, int>>& pairs) {
    json arr = json::array();
    for (const auto& [l, h] : pairs) arr.push_back({l, h});
    return arr;
}

std::vector<std::pair<int, int>> pairs_from_json(const json& arr, const char* name) {
    std::vector<std::pair<int, int>> out;
    for (const auto& p : arr) {
        if (!p.is_array() || p.size() != 2) {
            throw ValidationError(std::string("head sets: ") + name +
                                  " entries must be [layer, head] pairs");
        }
        out.emplace_back(p[0].get<int>(), p[1].get<int>());
    }
    return out;
}

}  // namespace

std::string head_sets_to_json(const HeadSets& sets) {
    json j{{"idiomatic", pairs_to_json(sets.idiomatic)},
           {"semantic", pairs_to_json(sets.semantic)},
           {"random", pairs_to_json(sets.random)}};
    return j.dump(2) + "\n";
}

HeadSets head_sets_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("head sets: bad JSON: ") + e.what());
    }
    HeadSets sets;
    try {
        sets.idiomatic = pairs_from_json(j.at("idiomatic"), "idiomatic");
        sets.semantic = pairs_from_json(j.at("semantic"), "semantic");
        sets.random = pairs_from_json(j.at("random"), "random");
    } catch (const json::exception& e) {
        throw ValidationError(std::string("head sets: ") + e.what());
    }
    return sets;
}

HeadSets load_head_sets(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("head sets: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return head_sets_from_json(ss.str());
}

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    if (!out) throw IoError("write failed for " + path);
}

std::string file_hash_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("manifest: cannot hash missing file " + path);
    char buf[1 << 16];
    std::uint64_t h = 0xcbf29ce484222325ULL;
    while (in) {
        in.read(buf, sizeof buf);
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

void write_manifest(const ExperimentConfig& cfg,
                    const std::vector<std::pair<std::string, std::string>>& outputs) {
    json inputs = json::object();
    const std::pair<const char*, const std::string*> files[] = {
        {"model", &cfg.model_path},         {"config", &cfg.config_path},
        {"dataset", &cfg.dataset_path},     {"tokenizer", &cfg.tokenizer_path},
        {"embeddings", &cfg.embeddings_path}, {"heads", &cfg.heads_path},
        {"csv", &cfg.csv_path},
    };
    for (const auto& [name, path] : files) {
        if (!path->empty()) {
            inputs[name] = {{"path", *path}, {"fnv1a64", file_hash_hex(*path)}};
        }
    }
    json outs = json::object();
    for (const auto& [name, path] : outputs) outs[name] = path;
    json j{{"experiment", cfg.experiment},
           {"format", cfg.format},
           {"seed", cfg.seed},
           {"settings",
            {{"mode", cfg.mode},
             {"variant", cfg.variant},
             {"knockout_target", cfg.knockout_target},
             {"patch_source", cfg.patch_source},
             {"edge_to", cfg.edge_to},
             {"layer_begin", cfg.layer_begin},
             {"layer_end", cfg.layer_end},
             {"k_neighbors", cfg.k_neighbors},
             {"k_heads", cfg.k_heads},
             {"bootstrap_b", cfg.bootstrap_b},
             {"ci_level", cfg.ci_level}}},
           {"inputs", inputs},
           {"outputs", outs}};
    write_text(cfg.out_path + ".manifest.json", j.dump(2) + "\n");
}

void require_inputs(const ExperimentConfig& cfg,
                    const std::vector<std::pair<const char*, const std::string*>>& needed) {
    for (const auto& [flag, value] : needed) {
        if (value->empty()) {
            throw ValidationError(cfg.experiment + ": missing required " + flag);
        }
    }
}

void write_tabular(const ExperimentConfig& cfg, const std::string& csv,
                   const std::string& json_text) {
    if (cfg.format == "csv") {
        write_text(cfg.out_path, csv);
    } else if (cfg.format == "json") {
        write_text(cfg.out_path, json_text);
    } else {
        throw ValidationError(cfg.experiment + ": format '" + cfg.format +
                              "' not supported here, want csv|json");
    }
}

int dispatch(const ExperimentConfig& cfg) {
    const std::set<std::string> sweep_like = {"sublayer-knockout", "head-scan", "kernel-align",
                                              "because-patch", "edge-knockout"};
    std::vector<std::pair<std::string, std::string>> outputs = {{"primary", cfg.out_path}};

    if (cfg.experiment == "build-dataset") {
        require_inputs(cfg, {{"--model", &cfg.model_path},
                             {"--config", &cfg.config_path},
                             {"--tokenizer", &cfg.tokenizer_path},
                             {"--csv", &cfg.csv_path}});
        const auto mc = load_model_config(cfg.config_path);
        const Model model{mc, load_weights(cfg.model_path, mc)};
        const auto tokenizer = Tokenizer::load(cfg.tokenizer_path);
        const auto rows = load_build_rows(cfg.csv_path);
        const auto outcome = build_dataset(model, tokenizer, rows);
        save_dataset(outcome.kept, cfg.out_path);
        write_manifest(cfg, outputs);
        std::cout << "kept " << outcome.kept.size() << " of " << outcome.total
                  << " instances\n";
        return 0;
    }

    require_inputs(cfg, {{"--model", &cfg.model_path},
                         {"--config", &cfg.config_path},
                         {"--dataset", &cfg.dataset_path}});
    const auto mc = load_model_config(cfg.config_path);
    const Model model{mc, load_weights(cfg.model_path, mc)};
    const auto instances = load_dataset(cfg.dataset_path);

    if (cfg.experiment == "validate") {
        const auto report = run_validate(model, instances);
        write_tabular(cfg, validation_to_csv(report), validation_to_json(report));
        write_manifest(cfg, outputs);
        std::cout << report.passed() << " of " << report.rows.size() << " instances pass\n";
        return 0;
    }
    if (cfg.experiment == "component-patch") {
        require_inputs(cfg, {{"--heads-file", &cfg.heads_path}});
        const auto heads = load_head_sets(cfg.heads_path);
        const auto summary = run_component_patch(model, instances, heads, cfg);
        write_tabular(cfg, summary_to_csv(summary), summary_to_json(summary));
        write_manifest(cfg, outputs);
        return 0;
    }
    if (sweep_like.count(cfg.experiment)) {
        SweepResult sweep;
        if (cfg.experiment == "sublayer-knockout") {
            sweep = run_sublayer_knockout(model, instances, cfg);
        } else if (cfg.experiment == "head-scan") {
            auto scan = run_head_scan(model, instances, cfg);
            const std::string heads_path = cfg.out_path + ".heads.json";
            write_text(heads_path, head_sets_to_json(scan.heads));
            outputs.emplace_back("heads", heads_path);
            sweep = std::move(scan.sweep);
        } else if (cfg.experiment == "kernel-align") {
            require_inputs(cfg, {{"--embeddings", &cfg.embeddings_path}});
            const auto embeddings = EmbeddingTable::load(cfg.embeddings_path);
            sweep = run_kernel_align(model, instances, embeddings, cfg);
        } else if (cfg.experiment == "because-patch") {
            sweep = run_because_patch(model, instances, cfg);
        } else {
            sweep = run_edge_knockout(model, instances, cfg);
        }
        write_sweep(sweep, cfg.out_path, cfg.format);
        write_manifest(cfg, outputs);
        return 0;
    }
    throw ValidationError("unknown experiment '" + cfg.experiment +
                          "'; want sublayer-knockout|head-scan|component-patch|kernel-align|"
                          "because-patch|edge-knockout|build-dataset|validate");
}

void parse_layers(const std::string& text, ExperimentConfig& cfg) {
    const auto dots = text.find("..");
    try {
        if (dots == std::string::npos) {
            cfg.layer_begin = cfg.layer_end = std::stoi(text);
        } else {
            cfg.layer_begin = std::stoi(text.substr(0, dots));
            cfg.layer_end = std::stoi(text.substr(dots + 2));
        }
    } catch (const std::exception&) {
        throw ValidationError("--layers wants 'a..b' or a single layer, got '" + text + "'");
    }
    if (cfg.layer_begin < 0 || cfg.layer_end < 0) {
        throw ValidationError("--layers must be non-negative, got '" + text + "'");
    }
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    ExperimentConfig cfg;
    std::string layers_text;

    CLI::App app{"causal-intervention harness for decoder transformer models"};
    app.add_option("experiment", cfg.experiment,
                   "sublayer-knockout|head-scan|component-patch|kernel-align|because-patch|"
                   "edge-knockout|build-dataset|validate")
        ->required();
    app.add_option("--model", cfg.model_path, "weights file (safetensors layout)");
    app.add_option("--config", cfg.config_path, "model architecture JSON");
    app.add_option("--dataset", cfg.dataset_path, "instances JSONL");
    app.add_option("--tokenizer", cfg.tokenizer_path, "tokenizer vocab/merges JSON");
    app.add_option("--embeddings", cfg.embeddings_path, "sentence-embedding sidecar JSONL");
    app.add_option("--heads-file", cfg.heads_path, "head-sets JSON from a head scan");
    app.add_option("--csv", cfg.csv_path, "build-dataset input rows");
    app.add_option("--out", cfg.out_path, "output path")->required();
    app.add_option("--format", cfg.format, "csv|json|svg")
        ->check(CLI::IsMember({"csv", "json", "svg"}));
    app.add_option("--seed", cfg.seed, "random seed");
    app.add_option("--mode", cfg.mode, "knockout replacement: zero|mean")
        ->check(CLI::IsMember({"zero", "mean"}));
    app.add_option("--variant", cfg.variant, "sentence variant: sa|sf|sl")
        ->check(CLI::IsMember({"sa", "sf", "sl"}));
    app.add_option("--knockout-target", cfg.knockout_target, "mhsa|mlp")
        ->check(CLI::IsMember({"mhsa", "mlp"}));
    app.add_option("--patch-source", cfg.patch_source, "sa|sf|sl|sa-star")
        ->check(CLI::IsMember({"sa", "sf", "sl", "sa-star"}));
    app.add_option("--edge-to", cfg.edge_to, "blocked edges point at: subsequent|last")
        ->check(CLI::IsMember({"subsequent", "last"}));
    app.add_option("--layers", layers_text, "inclusive layer range a..b");
    app.add_option("--k-neighbors", cfg.k_neighbors, "kernel alignment neighborhood size")
        ->check(CLI::PositiveNumber);
    app.add_option("--k-heads", cfg.k_heads, "heads per ranked set")
        ->check(CLI::PositiveNumber);
    app.add_option("--bootstrap", cfg.bootstrap_b, "bootstrap resamples")
        ->check(CLI::PositiveNumber);
    app.add_option("--ci-level", cfg.ci_level, "confidence level in (0,1)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (!layers_text.empty()) parse_layers(layers_text, cfg);
        return dispatch(cfg);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace residscope
