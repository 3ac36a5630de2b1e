#include "residscope/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <set>

#include "residscope/rng.hpp"

namespace residscope {

InterpretationScore interpretation_scores(const std::vector<float>& logits,
                                          const std::vector<int>& c_f,
                                          const std::vector<int>& c_l) {
    if (c_f.empty() || c_l.empty()) {
        throw ValidationError("interpretation scores: empty candidate set");
    }
    std::set<int> f_set(c_f.begin(), c_f.end());
    for (int id : c_l) {
        if (f_set.count(id)) {
            throw ValidationError("interpretation scores: candidate sets overlap at token " +
                                  std::to_string(id));
        }
    }
    const int v = static_cast<int>(logits.size());
    auto check_ids = [v](const std::vector<int>& c) {
        for (int id : c) {
            if (id < 0 || id >= v) {
                throw ValidationError("interpretation scores: token id " + std::to_string(id) +
                                      " outside vocabulary of " + std::to_string(v));
            }
        }
    };
    check_ids(c_f);
    check_ids(c_l);

    double max_z = -std::numeric_limits<double>::infinity();
    for (float z : logits) max_z = std::max(max_z, static_cast<double>(z));
    double denom = 0.0;
    for (float z : logits) denom += std::exp(static_cast<double>(z) - max_z);

    InterpretationScore s;
    for (int id : c_f) s.f += std::exp(static_cast<double>(logits[id]) - max_z) / denom;
    for (int id : c_l) s.l += std::exp(static_cast<double>(logits[id]) - max_z) / denom;
    return s;
}

DeltaI delta_i(const InterpretationScore& intervened, const InterpretationScore& original) {
    return {intervened.f - original.f, intervened.l - original.l};
}

namespace {

// k nearest other rows by cosine similarity, ties to the lower index
std::vector<std::vector<int>> knn_sets(const Mat& m, int k) {
    const int n = m.rows;
    std::vector<double> norms(n);
    for (int i = 0; i < n; ++i) {
        double s = 0;
        const float* r = m.row(i);
        for (int c = 0; c < m.cols; ++c) s += static_cast<double>(r[c]) * r[c];
        if (s <= 0.0) throw ValidationError("kernel alignment: zero-norm row " + std::to_string(i));
        norms[i] = std::sqrt(s);
    }
    std::vector<std::vector<int>> nn(n);
    std::vector<std::pair<double, int>> sims;
    for (int i = 0; i < n; ++i) {
        sims.clear();
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            double dot = 0;
            const float* a = m.row(i);
            const float* b = m.row(j);
            for (int c = 0; c < m.cols; ++c) dot += static_cast<double>(a[c]) * b[c];
            sims.emplace_back(dot / (norms[i] * norms[j]), j);
        }
        std::partial_sort(sims.begin(), sims.begin() + k, sims.end(),
                          [](const auto& x, const auto& y) {
                              if (x.first != y.first) return x.first > y.first;
                              return x.second < y.second;
                          });
        nn[i].reserve(k);
        for (int t = 0; t < k; ++t) nn[i].push_back(sims[t].second);
        std::sort(nn[i].begin(), nn[i].end());
    }
    return nn;
}

}  // namespace

double kernel_alignment(const Mat& hidden, const Mat& external, int k) {
    if (hidden.rows != external.rows) {
        throw ValidationError("kernel alignment: row counts differ, " +
                              std::to_string(hidden.rows) + " vs " +
                              std::to_string(external.rows));
    }
    const int n = hidden.rows;
    if (k < 1 || n <= k) {
        throw ValidationError("kernel alignment: need rows > k >= 1, got rows=" +
                              std::to_string(n) + " k=" + std::to_string(k));
    }
    const auto nn_h = knn_sets(hidden, k);
    const auto nn_e = knn_sets(external, k);
    double total = 0;
    std::vector<int> common;
    for (int i = 0; i < n; ++i) {
        common.clear();
        std::set_intersection(nn_h[i].begin(), nn_h[i].end(), nn_e[i].begin(), nn_e[i].end(),
                              std::back_inserter(common));
        total += static_cast<double>(common.size()) / k;
    }
    return total / n;
}

namespace {

std::vector<double> weighted_value_mean(const ActivationRecord& rec, int layer, int head,
                                        int span_begin, int span_end, int query) {
    if (layer < 0 || layer >= rec.num_layers || head < 0 || head >= rec.num_heads) {
        throw ValidationError("head value cosine: head (" + std::to_string(layer) + ", " +
                              std::to_string(head) + ") out of range");
    }
    if (span_begin < 0 || span_end > rec.seq_len || span_begin >= span_end || query < 0 ||
        query >= rec.seq_len) {
        throw ValidationError("head value cosine: span/query outside the sequence");
    }
    const int kv_head = head / (rec.num_heads / rec.num_kv_heads);
    const Mat& attn = rec.attn[layer][head];
    std::vector<double> v(rec.head_dim, 0.0);
    for (int i = span_begin; i < span_end; ++i) {
        const double alpha = attn.at(query, i);
        const float* val = rec.value_vector(layer, kv_head, i);
        for (int c = 0; c < rec.head_dim; ++c) v[c] += alpha * val[c];
    }
    const double inv = 1.0 / (span_end - span_begin);
    for (auto& x : v) x *= inv;
    return v;
}

}  // namespace

double head_value_cosine(const ActivationRecord& rec_a, int span_begin_a, int span_end_a,
                         int query_a, const ActivationRecord& rec_b, int span_begin_b,
                         int span_end_b, int query_b, int layer, int head) {
    if (span_end_a - span_begin_a != span_end_b - span_begin_b) {
        throw ValidationError("head value cosine: span lengths differ, " +
                              std::to_string(span_end_a - span_begin_a) + " vs " +
                              std::to_string(span_end_b - span_begin_b));
    }
    const auto va = weighted_value_mean(rec_a, layer, head, span_begin_a, span_end_a, query_a);
    const auto vb = weighted_value_mean(rec_b, layer, head, span_begin_b, span_end_b, query_b);
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < va.size(); ++i) {
        dot += va[i] * vb[i];
        na += va[i] * va[i];
        nb += vb[i] * vb[i];
    }
    if (na <= 0.0 || nb <= 0.0) {
        throw ValidationError("head value cosine: zero-norm weighted mean, cosine undefined");
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

double quantile_sorted(const std::vector<double>& sorted, double q) {
    const double pos = q * (sorted.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = pos - lo;
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace

BootstrapCi bootstrap_ci(const std::vector<double>& values, int b, double level,
                         std::uint64_t seed) {
    const int n = static_cast<int>(values.size());
    if (n < 2) throw ValidationError("bootstrap: need at least 2 values");
    if (b < 1) throw ValidationError("bootstrap: need at least 1 resample");
    if (!(level > 0.0 && level < 1.0)) {
        throw ValidationError("bootstrap: level must be in (0, 1)");
    }
    BootstrapCi out;
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;

    Rng rng(seed);
    std::vector<double> means(b);
    for (int r = 0; r < b; ++r) {
        double s = 0;
        for (int i = 0; i < n; ++i) s += values[rng.next_below(n)];
        means[r] = s / n;
    }
    std::sort(means.begin(), means.end());
    const double alpha = 1.0 - level;
    out.lo = quantile_sorted(means, alpha / 2.0);
    out.hi = quantile_sorted(means, 1.0 - alpha / 2.0);
    return out;
}

namespace {

double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-14;
    constexpr double kTiny = 1e-300;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

TTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ValidationError("paired t: length mismatch");
    const int n = static_cast<int>(a.size());
    if (n < 2) throw ValidationError("paired t: need at least 2 pairs");

    double mean = 0;
    for (int i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= n;
    double var = 0;
    for (int i = 0; i < n; ++i) {
        const double d = (a[i] - b[i]) - mean;
        var += d * d;
    }
    var /= (n - 1);

    TTest out;
    out.df = n - 1;
    if (var == 0.0) {
        if (mean == 0.0) return out;  // identical pairs: t = 0, p = 1
        throw ValidationError("paired t: zero difference variance, test degenerate");
    }
    out.t = mean / std::sqrt(var / n);
    const double df = out.df;
    out.p = regularized_incomplete_beta(df / 2.0, 0.5, df / (df + out.t * out.t));
    return out;
}

namespace {

// rank positions under a strict deterministic order; best value gets rank 0
std::vector<int> rank_positions(const std::vector<HeadEffect>& effects,
                                const std::function<double(const HeadEffect&)>& value) {
    const int n = static_cast<int>(effects.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) {
        const double vx = value(effects[x]);
        const double vy = value(effects[y]);
        if (vx != vy) return vx > vy;
        if (effects[x].layer != effects[y].layer) return effects[x].layer < effects[y].layer;
        return effects[x].head < effects[y].head;
    });
    std::vector<int> rank(n);
    for (int pos = 0; pos < n; ++pos) rank[order[pos]] = pos;
    return rank;
}

std::vector<int> combined_rank_order(const std::vector<HeadEffect>& effects, double sign) {
    const auto rank_f =
        rank_positions(effects, [sign](const HeadEffect& e) { return sign * -e.delta_f; });
    const auto rank_l =
        rank_positions(effects, [sign](const HeadEffect& e) { return sign * e.delta_l; });
    const int n = static_cast<int>(effects.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) {
        const int sx = rank_f[x] + rank_l[x];
        const int sy = rank_f[y] + rank_l[y];
        if (sx != sy) return sx < sy;
        const double fx = sign * -effects[x].delta_f;
        const double fy = sign * -effects[y].delta_f;
        if (fx != fy) return fx > fy;
        if (effects[x].layer != effects[y].layer) return effects[x].layer < effects[y].layer;
        return effects[x].head < effects[y].head;
    });
    return order;
}

}  // namespace

HeadSets rank_heads(const std::vector<HeadEffect>& effects, int k, std::uint64_t seed) {
    const int n = static_cast<int>(effects.size());
    if (k < 1) throw ValidationError("rank heads: k must be positive");
    if (3 * k > n) {
        throw ValidationError("rank heads: k=" + std::to_string(k) +
                              " needs 3k disjoint heads but only " + std::to_string(n) +
                              " exist");
    }
    std::set<std::pair<int, int>> seen;
    for (const auto& e : effects) {
        if (!seen.insert({e.layer, e.head}).second) {
            throw ValidationError("rank heads: duplicate head (" + std::to_string(e.layer) +
                                  ", " + std::to_string(e.head) + ")");
        }
    }

    HeadSets sets;
    std::vector<char> taken(n, 0);

    const auto idio_order = combined_rank_order(effects, +1.0);
    for (int i = 0; i < k; ++i) {
        const int idx = idio_order[i];
        taken[idx] = 1;
        sets.idiomatic.emplace_back(effects[idx].layer, effects[idx].head);
    }

    const auto sem_order = combined_rank_order(effects, -1.0);
    for (int i = 0; static_cast<int>(sets.semantic.size()) < k; ++i) {
        const int idx = sem_order[i];
        if (taken[idx]) continue;
        taken[idx] = 1;
        sets.semantic.emplace_back(effects[idx].layer, effects[idx].head);
    }

    std::vector<int> rest;
    for (int i = 0; i < n; ++i) {
        if (!taken[i]) rest.push_back(i);
    }
    Rng rng(seed);
    for (int i = static_cast<int>(rest.size()) - 1; i > 0; --i) {
        std::swap(rest[i], rest[static_cast<int>(rng.next_below(i + 1))]);
    }
    for (int i = 0; i < k; ++i) {
        sets.random.emplace_back(effects[rest[i]].layer, effects[rest[i]].head);
    }
    return sets;
}

}  // namespace residscope
