// Acceptance gate. Each criterion prints one pass/fail line; the process
// exits nonzero if any gated criterion fails. Tolerances are pinned here and
// nowhere else.
#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "residscope/dataset_builder.hpp"
#include "residscope/harness.hpp"
#include "residscope/intervention.hpp"
#include "residscope/metrics.hpp"
#include "residscope/model.hpp"
#include "residscope/rng.hpp"
#include "residscope/safetensors.hpp"
#include "residscope/synthetic.hpp"
#include "support/fixtures.hpp"
#include "support/reference_model.hpp"

#include <json.hpp>

using namespace residscope;
namespace fs = std::filesystem;

namespace {

constexpr double kForwardTol = 1e-4;
constexpr double kAdditivityTol = 1e-5;
constexpr double kHeadSumTol = 1e-4;
constexpr double kRowSumTol = 1e-5;
constexpr double kClosedFormTol = 1e-5;
constexpr double kNoOpTol = 1e-6;
constexpr double kShiftTol = 1e-9;
constexpr double kPValueTol = 1e-4;
constexpr double kForwardBudgetSeconds = 10.0;

int g_failures = 0;

void report(int number, const char* name, bool ok, const std::string& detail = "") {
    std::printf("criterion %d (%s): %s%s%s\n", number, name, ok ? "PASS" : "FAIL",
                detail.empty() ? "" : " ", detail.c_str());
    if (!ok) ++g_failures;
}

std::string fmt(const char* f, double a, double b = 0.0) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a, b);
    return buf;
}

// random architecture from the gated pool: L in 1..3, d in {4,8}, H in {1,2},
// H_kv in {1,H}
ModelConfig pool_config(Rng& rng) {
    ModelConfig cfg;
    cfg.num_layers = 1 + static_cast<int>(rng.next_below(3));
    cfg.hidden_dim = rng.next_below(2) ? 8 : 4;
    cfg.num_heads = rng.next_below(2) ? 2 : 1;
    cfg.num_kv_heads =
        (cfg.num_heads == 1 || rng.next_below(2) == 0) ? 1 : cfg.num_heads;
    cfg.ff_dim = cfg.hidden_dim * 2;
    cfg.vocab_size = 16 + 8 * static_cast<int>(rng.next_below(5));
    cfg.max_seq_len = 64;
    cfg.validate();
    return cfg;
}

double max_abs_diff(const std::vector<float>& got, const refmodel::Vec& want) {
    double worst = 0.0;
    for (size_t i = 0; i < got.size(); ++i) {
        worst = std::max(worst, std::fabs(static_cast<double>(got[i]) - want[i]));
    }
    return worst;
}

// ---- criterion 1: engine forward equals the scalar reference ----

bool forward_matches_reference() {
    Rng rng(101);
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto cfg = pool_config(rng);
        Model model{cfg, random_weights(cfg, 1000 + trial)};
        const int t = 1 + static_cast<int>(rng.next_below(5));
        const auto tokens = fixtures::random_tokens(rng, t, cfg.vocab_size);
        const auto got = forward(model, tokens);
        const auto want = refmodel::ref_forward(cfg, model.weights, tokens);
        worst = std::max(worst, max_abs_diff(got.logits, want.logits[t - 1]));
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool ok = worst <= kForwardTol && secs < kForwardBudgetSeconds;
    report(1, "forward pass matches the scalar reference", ok,
           fmt("(max |diff| %.2e, %.2f s)", worst, secs));
    return ok;
}

// ---- criterion 2: activation record invariants ----

bool record_invariants_hold() {
    Rng rng(202);
    double worst_add = 0.0, worst_head = 0.0, worst_row = 0.0;
    bool causal = true;
    for (int run = 0; run < 100; ++run) {
        const auto cfg = pool_config(rng);
        Model model{cfg, random_weights(cfg, 2000 + run)};
        const int t = 1 + static_cast<int>(rng.next_below(6));
        const auto tokens = fixtures::random_tokens(rng, t, cfg.vocab_size);
        const auto rec = forward(model, tokens).record;
        for (int l = 0; l < cfg.num_layers; ++l) {
            const auto& in = rec.residual_in(l);
            for (int i = 0; i < t; ++i) {
                for (int c = 0; c < cfg.hidden_dim; ++c) {
                    const double sum = static_cast<double>(in.row(i)[c]) +
                                       rec.attn_out[l].row(i)[c] + rec.mlp_out[l].row(i)[c];
                    worst_add = std::max(
                        worst_add, std::fabs(sum - rec.resid_out[l].row(i)[c]));
                    double heads = 0.0;
                    for (int j = 0; j < cfg.num_heads; ++j) {
                        heads += rec.head_contrib[l][j].row(i)[c];
                    }
                    worst_head = std::max(
                        worst_head, std::fabs(heads - rec.attn_out[l].row(i)[c]));
                }
                for (int j = 0; j < cfg.num_heads; ++j) {
                    const float* row = rec.attn[l][j].row(i);
                    double mass = 0.0;
                    for (int k = 0; k <= i; ++k) mass += row[k];
                    worst_row = std::max(worst_row, std::fabs(mass - 1.0));
                    for (int k = i + 1; k < t; ++k) causal = causal && row[k] == 0.0f;
                }
            }
        }
    }
    const bool ok = worst_add <= kAdditivityTol && worst_head <= kHeadSumTol &&
                    worst_row <= kRowSumTol && causal;
    report(2, "activation record invariants", ok,
           fmt("(additivity %.1e, head sum %.1e", worst_add, worst_head) +
               fmt(", row mass %.1e)", worst_row));
    return ok;
}

// ---- criterion 3: all-sublayer zero knockout has a closed form ----

bool knockout_closed_form() {
    Rng rng(303);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const auto cfg = pool_config(rng);
        Model model{cfg, random_weights(cfg, 3000 + trial)};
        const int t = 2 + static_cast<int>(rng.next_below(4));
        const auto tokens = fixtures::random_tokens(rng, t, cfg.vocab_size);

        std::vector<HookPoint> points;
        for (int l = 0; l < cfg.num_layers; ++l) {
            for (int pos = 0; pos < t; ++pos) {
                points.push_back({HookKind::attn_output, l, pos, -1});
                points.push_back({HookKind::mlp_output, l, pos, -1});
            }
        }
        const auto spec = knockout_zero(points);
        const auto got = forward(model, tokens, &spec).logits;

        // with every sublayer output erased the residual stream is just the
        // embedding, so the last position reduces to one norm and one matmul
        refmodel::Vec x(cfg.hidden_dim);
        for (int c = 0; c < cfg.hidden_dim; ++c) {
            x[c] = model.weights.embedding.at(tokens[t - 1], c);
        }
        const auto normed =
            refmodel::ref_rms_norm(x, model.weights.final_norm.data(), cfg.norm_eps);
        const auto want = refmodel::ref_matvec(model.weights.unembedding.data.data(),
                                               cfg.vocab_size, cfg.hidden_dim, normed);
        worst = std::max(worst, max_abs_diff(got, want));
    }
    const bool ok = worst <= kClosedFormTol;
    report(3, "zero knockout closed form", ok, fmt("(max |diff| %.2e)", worst));
    return ok;
}

// ---- criterion 4: identity patches and mean-of-self are no-ops ----

bool self_interventions_are_noops() {
    double worst_patch = 0.0;
    {
        Rng rng(404);
        for (int trial = 0; trial < 10; ++trial) {
            const auto cfg = pool_config(rng);
            Model model{cfg, random_weights(cfg, 4000 + trial)};
            const int t = 2 + static_cast<int>(rng.next_below(4));
            const auto tokens = fixtures::random_tokens(rng, t, cfg.vocab_size);
            const auto clean = forward(model, tokens);

            const int l = cfg.num_layers - 1;
            const auto spec = merge({
                patch_from({HookKind::residual, 0, 0, -1}, clean.record, 0),
                patch_from({HookKind::attn_output, l, t - 1, -1}, clean.record, t - 1),
                patch_from({HookKind::mlp_output, 0, t - 1, -1}, clean.record, t - 1),
                patch_from({HookKind::head_output, l, t - 1, cfg.num_heads - 1},
                           clean.record, t - 1),
            });
            const auto patched = forward(model, tokens, &spec).logits;
            for (size_t v = 0; v < patched.size(); ++v) {
                worst_patch = std::max(
                    worst_patch,
                    std::fabs(static_cast<double>(patched[v]) - clean.logits[v]));
            }
        }
    }

    double worst_mean = 0.0;
    {
        const auto cfg = fixtures::tiny_config(2, 8, 2, 1, 16, 48);
        for (int trial = 0; trial < 10; ++trial) {
            const Model model = fixtures::tiny_model(4100 + trial, cfg);
            const auto inst = synthetic_instances(cfg, 1, 4200 + trial)[0];
            const auto& v = inst.s_a;
            const auto clean = forward(model, v.ids);
            // a one-instance cache stores that instance's own activations, so
            // mean replacement must change nothing
            const auto cache = compute_mean_cache(model, {inst}, "sa");
            std::vector<std::pair<HookPoint, PositionRole>> points;
            for (int l = 0; l < cfg.num_layers; ++l) {
                for (int pos = v.span_begin; pos < v.span_end; ++pos) {
                    const PositionRole role{PositionRole::span_from_end,
                                            v.span_end - 1 - pos};
                    points.push_back({{HookKind::attn_output, l, pos, -1}, role});
                    points.push_back({{HookKind::mlp_output, l, pos, -1}, role});
                    points.push_back({{HookKind::head_output, l, pos, 0}, role});
                }
                points.push_back(
                    {{HookKind::residual, l, v.subsequent, -1}, {PositionRole::subsequent, 0}});
                points.push_back({{HookKind::attn_output, l, v.last, -1},
                                  {PositionRole::last, 0}});
            }
            const auto spec = knockout_mean(points, cache);
            const auto got = forward(model, v.ids, &spec).logits;
            for (size_t i = 0; i < got.size(); ++i) {
                worst_mean = std::max(
                    worst_mean, std::fabs(static_cast<double>(got[i]) - clean.logits[i]));
            }
        }
    }
    const bool ok = worst_patch <= kNoOpTol && worst_mean <= kNoOpTol;
    report(4, "identity patch and mean-of-self are no-ops", ok,
           fmt("(patch %.2e, mean %.2e)", worst_patch, worst_mean));
    return ok;
}

// ---- criterion 5: edge masking equals floored-score recomputation ----

bool edge_masks_match_reference() {
    Rng rng(505);
    double worst_ref = 0.0;
    bool bit_equal = true;
    for (int trial = 0; trial < 10; ++trial) {
        const auto cfg = pool_config(rng);
        Model model{cfg, random_weights(cfg, 5000 + trial)};
        const int t = 6;
        const auto tokens = fixtures::random_tokens(rng, t, cfg.vocab_size);

        std::set<std::tuple<int, int, int, int>> chosen;
        std::vector<EdgeMask> masks;
        while (masks.size() < 4) {
            const int layer = static_cast<int>(rng.next_below(cfg.num_layers));
            const int q = 1 + static_cast<int>(rng.next_below(t - 1));
            const int k = static_cast<int>(rng.next_below(q));
            const int head = rng.next_below(2)
                                 ? -1
                                 : static_cast<int>(rng.next_below(cfg.num_heads));
            if (!chosen.insert({layer, q, k, head}).second) continue;
            EdgeMask m{layer, q, k, {}};
            if (head >= 0) m.heads = {head};
            masks.push_back(std::move(m));
        }
        const auto spec = mask_edges(masks);

        EdgeMaskTable table(cfg.num_layers, cfg.num_heads, t);
        for (const auto& m : masks) {
            if (m.heads.empty()) {
                table.block(m.layer, -1, m.query_position, m.key_position);
            } else {
                for (int h : m.heads) table.block(m.layer, h, m.query_position, m.key_position);
            }
        }

        const auto via_spec = forward(model, tokens, &spec).logits;
        const auto via_table = forward_with_mask_table(model, tokens, table).logits;
        bit_equal = bit_equal && via_spec == via_table;

        const auto ref = refmodel::ref_forward_masked(
            cfg, model.weights, tokens,
            [&](int layer, int head, int q, int k) { return table.blocked(layer, head, q, k); });
        worst_ref = std::max(worst_ref, max_abs_diff(via_spec, ref.logits[t - 1]));
    }
    const bool ok = bit_equal && worst_ref <= kForwardTol;
    report(5, "edge masks equal floored-score reference", ok,
           fmt("(vs reference %.2e, ", worst_ref) +
               (bit_equal ? "table route bit-identical)" : "table route DIVERGED)"));
    return ok;
}

// ---- criterion 6: interpretation metrics ----

std::pair<std::vector<int>, std::vector<int>> oracle_candidates(const std::vector<float>& z_f,
                                                                const std::vector<float>& z_l,
                                                                int k) {
    const int n = static_cast<int>(z_f.size());
    std::vector<double> dz(n);
    for (int v = 0; v < n; ++v) dz[v] = static_cast<double>(z_f[v]) - z_l[v];
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    auto top = ids;
    std::sort(top.begin(), top.end(), [&](int a, int b) {
        return dz[a] != dz[b] ? dz[a] > dz[b] : a < b;
    });
    std::vector<int> c_f(top.begin(), top.begin() + k);
    std::set<int> taken(c_f.begin(), c_f.end());
    std::vector<int> c_l;
    auto bottom = ids;
    std::sort(bottom.begin(), bottom.end(), [&](int a, int b) {
        return dz[a] != dz[b] ? dz[a] < dz[b] : a < b;
    });
    for (int v : bottom) {
        if (taken.count(v)) continue;
        c_l.push_back(v);
        if (static_cast<int>(c_l.size()) == k) break;
    }
    return {c_f, c_l};
}

bool interpretation_metrics_behave() {
    Rng rng(606);
    const int vocab = 64;
    std::vector<int> c_f(20), c_l(20);
    std::iota(c_f.begin(), c_f.end(), 0);
    std::iota(c_l.begin(), c_l.end(), 25);

    // shift invariance on logits quantized to multiples of 2^-10, so adding
    // 11.5f is exact and only the softmax shift property is under test
    double worst_shift = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> z(vocab), shifted(vocab);
        for (int v = 0; v < vocab; ++v) {
            z[v] = static_cast<float>(std::round(rng.next_normal() * 4.0 * 1024.0) / 1024.0);
            shifted[v] = z[v] + 11.5f;
        }
        const auto a = interpretation_scores(z, c_f, c_l);
        const auto b = interpretation_scores(shifted, c_f, c_l);
        worst_shift = std::max(worst_shift, std::fabs(a.f - b.f));
        worst_shift = std::max(worst_shift, std::fabs(a.l - b.l));
    }

    bool mass_ok = true;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<float> z(vocab);
        for (auto& v : z) v = static_cast<float>(rng.next_normal() * 5.0);
        const auto s = interpretation_scores(z, c_f, c_l);
        mass_ok = mass_ok && s.f >= 0.0 && s.l >= 0.0 && s.f + s.l <= 1.0;
        const auto d = delta_i(s, s);
        mass_ok = mass_ok && d.f == 0.0 && d.l == 0.0;
    }

    bool cand_ok = true;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<float> zf(100), zl(100);
        for (auto& z : zf) z = static_cast<float>(rng.next_normal());
        for (auto& z : zl) z = static_cast<float>(rng.next_normal());
        const int k = 1 + static_cast<int>(rng.next_below(50));
        cand_ok = cand_ok && candidate_tokens(zf, zl, k) == oracle_candidates(zf, zl, k);
    }

    // truth table: favoring C_f or C_l in each of the three runs must set
    // exactly the matching flags
    bool table_ok = true;
    std::vector<float> fig(8, 0.0f), lit(8, 0.0f);
    fig[0] = 4.0f;
    lit[7] = 4.0f;
    const std::vector<int> tf{0, 1}, tl{6, 7};
    for (int combo = 0; combo < 8; ++combo) {
        const bool a_fig = combo & 1, f_fig = combo & 2, l_fig = combo & 4;
        const auto v = validate_instance(a_fig ? fig : lit, f_fig ? fig : lit,
                                         l_fig ? fig : lit, tf, tl);
        table_ok = table_ok && v.figurative_on_idiom == a_fig &&
                   v.figurative_on_f_para == f_fig && v.literal_on_l_para == !l_fig &&
                   v.pass() == (a_fig && f_fig && !l_fig);
    }

    const bool ok = worst_shift <= kShiftTol && mass_ok && cand_ok && table_ok;
    report(6, "interpretation metrics", ok,
           fmt("(shift %.2e", worst_shift) + (mass_ok ? "" : ", mass BROKEN") +
               (cand_ok ? "" : ", candidates BROKEN") +
               (table_ok ? ")" : ", truth table BROKEN)"));
    return ok;
}

// ---- criterion 7: statistics ----

double t_pdf(double x, double df) {
    const double c = std::lgamma((df + 1) / 2.0) - std::lgamma(df / 2.0) -
                     0.5 * std::log(df * 3.14159265358979323846);
    return std::exp(c - (df + 1) / 2.0 * std::log1p(x * x / df));
}

double simpson(double a, double b, double fa, double fm, double fb, double whole, double df,
               int depth) {
    const double m = (a + b) / 2.0;
    const double lm = (a + m) / 2.0, rm = (m + b) / 2.0;
    const double flm = t_pdf(lm, df), frm = t_pdf(rm, df);
    const double left = (m - a) / 6.0 * (fa + 4 * flm + fm);
    const double right = (b - m) / 6.0 * (fm + 4 * frm + fb);
    if (depth <= 0 || std::fabs(left + right - whole) < 1e-12) {
        return left + right + (left + right - whole) / 15.0;
    }
    return simpson(a, m, fa, flm, fm, left, df, depth - 1) +
           simpson(m, b, fm, frm, fb, right, df, depth - 1);
}

// two-sided p by direct integration of the t density over [-|t|, |t|]
double oracle_two_sided_p(double t, double df) {
    const double a = -std::fabs(t), b = std::fabs(t);
    const double fa = t_pdf(a, df), fb = t_pdf(b, df), fm = t_pdf(0.0, df);
    const double whole = (b - a) / 6.0 * (fa + 4 * fm + fb);
    return 1.0 - simpson(a, b, fa, fm, fb, whole, df, 40);
}

bool statistics_behave() {
    bool boot_ok = true;
    {
        const std::vector<double> constant(12, 3.25);
        const auto ci = bootstrap_ci(constant, 500, 0.95, 7);
        boot_ok = ci.mean == 3.25 && ci.lo == 3.25 && ci.hi == 3.25;

        Rng rng(707);
        std::vector<double> values(15);
        for (auto& v : values) v = rng.next_normal();
        const auto c1 = bootstrap_ci(values, 400, 0.9, 99);
        const auto c2 = bootstrap_ci(values, 400, 0.9, 99);
        boot_ok = boot_ok && c1.mean == c2.mean && c1.lo == c2.lo && c1.hi == c2.hi;
    }

    double worst_p = 0.0;
    {
        Rng rng(708);
        std::vector<std::pair<std::vector<double>, std::vector<double>>> fixtures;
        fixtures.push_back({{1, 3, 4, 6, 8}, {2, 5, 4, 9, 8}});
        for (int f = 0; f < 4; ++f) {
            const int n = 6 + f * 7;
            std::vector<double> a(n), b(n);
            for (int i = 0; i < n; ++i) {
                a[i] = rng.next_normal();
                b[i] = a[i] * 0.5 + rng.next_normal() + 0.2 * f;
            }
            fixtures.push_back({a, b});
        }
        for (const auto& [a, b] : fixtures) {
            const auto r = paired_t_test(a, b);
            worst_p = std::max(worst_p, std::fabs(r.p - oracle_two_sided_p(r.t, r.df)));
        }
    }

    bool kernel_ok = true;
    double null_gap = 0.0, null_bound = 0.0;
    {
        Rng rng(709);
        const int n = 30, d = 6;
        Mat base(n, d), same(n, d), rotated(n, d);
        for (int i = 0; i < n; ++i) {
            for (int c = 0; c < d; ++c) base.row(i)[c] = static_cast<float>(rng.next_normal());
            std::copy(base.row(i), base.row(i) + d, same.row(i));
            std::copy(base.row(i), base.row(i) + d, rotated.row(i));
            // orthogonal map: plane rotations leave all cosines unchanged
            const std::pair<int, int> planes[] = {{0, 1}, {2, 3}, {1, 4}};
            const double angles[] = {0.7, -1.1, 2.3};
            for (int r = 0; r < 3; ++r) {
                float* v = rotated.row(i);
                const auto [p, q] = planes[r];
                const double ca = std::cos(angles[r]), sa = std::sin(angles[r]);
                const double vp = v[p], vq = v[q];
                v[p] = static_cast<float>(ca * vp - sa * vq);
                v[q] = static_cast<float>(sa * vp + ca * vq);
            }
        }
        kernel_ok = kernel_alignment(base, same, 5) == 1.0 &&
                    kernel_alignment(base, rotated, 5) == 1.0;

        const int trials = 1000, nn = 100, k = 10, dd = 6;
        std::vector<double> scores(trials);
        for (int s = 0; s < trials; ++s) {
            Mat a(nn, dd), b(nn, dd);
            for (int i = 0; i < nn; ++i) {
                for (int c = 0; c < dd; ++c) {
                    a.row(i)[c] = static_cast<float>(rng.next_normal());
                    b.row(i)[c] = static_cast<float>(rng.next_normal());
                }
            }
            scores[s] = kernel_alignment(a, b, k);
        }
        const double mean =
            std::accumulate(scores.begin(), scores.end(), 0.0) / trials;
        double var = 0.0;
        for (double s : scores) var += (s - mean) * (s - mean);
        const double se = std::sqrt(var / (trials - 1)) / std::sqrt(trials);
        null_gap = std::fabs(mean - static_cast<double>(k) / (nn - 1));
        null_bound = 3.0 * se;
        kernel_ok = kernel_ok && null_gap <= null_bound;
    }

    const bool ok = boot_ok && worst_p <= kPValueTol && kernel_ok;
    report(7, "statistics", ok,
           fmt("(p vs integral %.2e, null gap %.1e", worst_p, null_gap) +
               fmt(" <= %.1e", null_bound) + (boot_ok ? ")" : ", bootstrap BROKEN)"));
    return ok;
}

// ---- criterion 8: pipeline determinism ----

int run_quiet(const std::vector<std::string>& args) {
    std::vector<std::string> hold{"resid-scope"};
    hold.insert(hold.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(hold.size());
    for (const auto& s : hold) argv.push_back(s.c_str());

    std::fflush(stdout);
    const int saved = ::dup(1);
    const int devnull = ::open("/dev/null", O_WRONLY);
    ::dup2(devnull, 1);
    const int rc = run_cli(static_cast<int>(argv.size()), argv.data());
    std::fflush(stdout);
    ::dup2(saved, 1);
    ::close(saved);
    ::close(devnull);
    return rc;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void put_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

std::string cp_to_utf8(int cp) {
    std::string s;
    if (cp < 0x80) {
        s += static_cast<char>(cp);
    } else if (cp < 0x800) {
        s += static_cast<char>(0xc0 | (cp >> 6));
        s += static_cast<char>(0x80 | (cp & 0x3f));
    } else {
        s += static_cast<char>(0xe0 | (cp >> 12));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
        s += static_cast<char>(0x80 | (cp & 0x3f));
    }
    return s;
}

std::string byte_tokenizer_json() {
    nlohmann::json vocab = nlohmann::json::object();
    int next = 0;
    for (int b = 0; b < 256; ++b) {
        const bool keep = (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174);
        vocab[cp_to_utf8(keep ? b : 256 + next++)] = b;
    }
    return nlohmann::json{{"vocab", vocab}, {"merges", nlohmann::json::array()}}.dump();
}

bool pipeline_is_deterministic() {
    const fs::path dir =
        fs::temp_directory_path() / ("residscope-acceptance-" + std::to_string(::getpid()));
    fs::create_directories(dir);
    const auto at = [&](const std::string& name) { return (dir / name).string(); };

    const auto mc = fixtures::tiny_config(2, 8, 2, 1, 16, 64);
    save_model_config(mc, at("config.json"));
    save_weights(random_weights(mc, 88), mc, at("model.safetensors"));
    save_dataset(synthetic_instances(mc, 5, 89), at("data.jsonl"));

    EmbeddingTable table;
    Rng erng(90);
    for (const auto& inst : synthetic_instances(mc, 5, 89)) {
        for (const char* variant : {EmbeddingTable::kFigurative, EmbeddingTable::kLiteral}) {
            std::vector<float> v(6);
            for (auto& x : v) x = static_cast<float>(erng.next_normal());
            table.insert(inst.id, variant, v);
        }
    }
    table.save(at("emb.jsonl"));

    HeadSets sets;
    sets.idiomatic = {{0, 0}};
    sets.semantic = {{1, 0}};
    sets.random = {{1, 1}};
    put_file(at("heads.json"), head_sets_to_json(sets));

    const auto mc256 = fixtures::tiny_config(2, 8, 2, 1, 16, 256);
    save_model_config(mc256, at("config256.json"));
    save_weights(random_weights(mc256, 91), mc256, at("model256.safetensors"));
    put_file(at("tokenizer.json"), byte_tokenizer_json());
    put_file(at("rows.csv"),
             "id,idiom,figurative,literal,pronoun,use_would,connector\n"
             "bucket,kicked the bucket,died suddenly,kicked the pail,he,false,so\n"
             "beans,spill the beans,reveal it,drop the beans,they,true,too\n");

    const std::vector<std::string> common = {"--model", at("model.safetensors"),
                                             "--config", at("config.json"),
                                             "--dataset", at("data.jsonl")};
    struct Job {
        std::string name;
        std::vector<std::string> args;
        std::vector<std::string> extra_outputs;  // suffixes appended to the out path
    };
    std::vector<Job> jobs = {
        {"sublayer-knockout",
         {"sublayer-knockout", "--mode", "mean", "--seed", "5", "--bootstrap", "100"},
         {}},
        {"head-scan",
         {"head-scan", "--k-heads", "1", "--seed", "5", "--bootstrap", "100"},
         {".heads.json"}},
        {"component-patch",
         {"component-patch", "--heads-file", at("heads.json"), "--layers", "0..0", "--format",
          "json", "--seed", "5"},
         {}},
        {"kernel-align", {"kernel-align", "--embeddings", at("emb.jsonl"), "--k-neighbors", "2"},
         {}},
        {"because-patch",
         {"because-patch", "--variant", "sa", "--patch-source", "sa-star", "--seed", "5",
          "--bootstrap", "100"},
         {}},
        {"edge-knockout", {"edge-knockout", "--edge-to", "last", "--bootstrap", "100"}, {}},
        {"build-dataset",
         {"build-dataset", "--model", at("model256.safetensors"), "--config",
          at("config256.json"), "--tokenizer", at("tokenizer.json"), "--csv", at("rows.csv")},
         {}},
        {"validate", {"validate", "--format", "json"}, {}},
    };

    bool all_ok = true;
    std::string failed;
    for (const auto& job : jobs) {
        const bool standalone = job.name == "build-dataset";
        for (int rep = 0; rep < 2; ++rep) {
            ::setenv("RESID_SCOPE_THREADS", rep == 0 ? "2" : "1", 1);
            auto args = job.args;
            if (!standalone) args.insert(args.end(), common.begin(), common.end());
            const std::string out = at(job.name + (rep == 0 ? ".a" : ".b"));
            args.push_back("--out");
            args.push_back(out);
            if (run_quiet(args) != 0) {
                all_ok = false;
                failed += " " + job.name + "(exit)";
                break;
            }
        }
        ::unsetenv("RESID_SCOPE_THREADS");
        bool same = slurp(at(job.name + ".a")) == slurp(at(job.name + ".b")) &&
                    !slurp(at(job.name + ".a")).empty();
        for (const auto& suffix : job.extra_outputs) {
            same = same && slurp(at(job.name + ".a" + suffix)) ==
                               slurp(at(job.name + ".b" + suffix));
        }
        if (!same) {
            all_ok = false;
            failed += " " + job.name;
        }
    }

    std::error_code ec;
    fs::remove_all(dir, ec);
    report(8, "pipeline determinism across reruns and worker counts", all_ok,
           all_ok ? "(8 experiments byte-identical)" : "(diverged:" + failed + ")");
    return all_ok;
}

// ---- criterion 9 (optional): sign-level reproduction on a real checkpoint ----

void full_scale_reproduction() {
    const char* dir = std::getenv("RESID_SCOPE_CHECKPOINT_DIR");
    if (!dir) {
        std::printf(
            "criterion 9 (full-scale sign reproduction): SKIP (set "
            "RESID_SCOPE_CHECKPOINT_DIR to a directory with config.json, model.safetensors, "
            "dataset.jsonl and optionally heads.json; not gated)\n");
        return;
    }
    try {
        const fs::path root(dir);
        const auto mc = load_model_config((root / "config.json").string());
        const Model model{mc, load_weights((root / "model.safetensors").string(), mc)};
        const auto instances = load_dataset((root / "dataset.jsonl").string());

        ExperimentConfig cfg;
        cfg.experiment = "sublayer-knockout";
        cfg.mode = "mean";
        cfg.variant = "sa";
        cfg.knockout_target = "mhsa";
        cfg.layer_begin = cfg.layer_end = 1;
        const auto sweep = run_sublayer_knockout(model, instances, cfg);
        const double df = sweep.cells[0].metrics[0].mean;
        const double dl = sweep.cells[0].metrics[1].mean;
        const bool a_ok = df < 0.0 && dl > 0.0 && std::fabs(df - (-0.36)) <= 0.15;

        HeadSets heads;
        if (fs::exists(root / "heads.json")) {
            heads = load_head_sets((root / "heads.json").string());
        } else {
            ExperimentConfig scan_cfg = cfg;
            scan_cfg.experiment = "head-scan";
            scan_cfg.layer_begin = scan_cfg.layer_end = -1;
            scan_cfg.k_heads = 20;
            heads = run_head_scan(model, instances, scan_cfg).heads;
        }
        ExperimentConfig patch_cfg;
        patch_cfg.experiment = "component-patch";
        const auto summary = run_component_patch(model, instances, heads, patch_cfg);
        const double patch_df = summary.at("experiment_delta_f_mean");
        const bool b_ok = std::fabs(patch_df - 0.51) <= 0.2;

        double idio_cos = 0.0, rand_cos = 0.0;
        int idio_n = 0, rand_n = 0;
        for (const auto& inst : instances) {
            const auto rec_a = forward(model, inst.s_a.ids).record;
            const auto rec_f = forward(model, inst.s_f.ids).record;
            const int m = std::min(inst.s_a.span_end - inst.s_a.span_begin,
                                   inst.s_f.span_end - inst.s_f.span_begin);
            const auto tally = [&](const std::vector<std::pair<int, int>>& set, double& acc,
                                   int& n) {
                for (const auto& [layer, head] : set) {
                    acc += head_value_cosine(rec_a, inst.s_a.span_end - m, inst.s_a.span_end,
                                             inst.s_a.subsequent, rec_f,
                                             inst.s_f.span_end - m, inst.s_f.span_end,
                                             inst.s_f.subsequent, layer, head);
                    ++n;
                }
            };
            tally(heads.idiomatic, idio_cos, idio_n);
            tally(heads.random, rand_cos, rand_n);
        }
        const bool c_ok = idio_cos / idio_n < rand_cos / rand_n;

        std::printf(
            "criterion 9 (full-scale sign reproduction): %s (not gated; knockout dF=%.3f "
            "dL=%.3f [%s], patch dF=%.3f [%s], cosine idiomatic %.3f vs random %.3f [%s])\n",
            a_ok && b_ok && c_ok ? "PASS" : "FAIL", df, dl, a_ok ? "ok" : "off", patch_df,
            b_ok ? "ok" : "off", idio_cos / std::max(idio_n, 1),
            rand_cos / std::max(rand_n, 1), c_ok ? "ok" : "off");
    } catch (const std::exception& e) {
        std::printf("criterion 9 (full-scale sign reproduction): FAIL (not gated; %s)\n",
                    e.what());
    }
}

}  // namespace

int main() {
    forward_matches_reference();
    record_invariants_hold();
    knockout_closed_form();
    self_interventions_are_noops();
    edge_masks_match_reference();
    interpretation_metrics_behave();
    statistics_behave();
    pipeline_is_deterministic();
    full_scale_reproduction();

    if (g_failures == 0) {
        std::printf("acceptance: all gated criteria pass\n");
        return 0;
    }
    std::printf("acceptance: %d gated criterion(s) failed\n", g_failures);
    return 1;
}
