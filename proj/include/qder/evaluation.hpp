#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "qder/data_io.hpp"
#include "qder/error.hpp"

namespace qder {

inline constexpr std::size_t kDefaultMetricDepth = 20;

using Judgments = std::map<std::string, int>;  // doc_id -> grade

struct QueryMetrics {
    double ap = 0.0;
    double ndcg = 0.0;
    double p = 0.0;
    double rr = 0.0;
    bool operator==(const QueryMetrics&) const = default;
};

enum class Metric { ap, ndcg, p, rr };

inline double metric_value(const QueryMetrics& m, Metric which) {
    switch (which) {
        case Metric::ap: return m.ap;
        case Metric::ndcg: return m.ndcg;
        case Metric::p: return m.p;
        case Metric::rr: return m.rr;
    }
    return 0.0;
}

inline Metric parse_metric(const std::string& name) {
    if (name == "map" || name == "ap") return Metric::ap;
    if (name == "ndcg") return Metric::ndcg;
    if (name == "p" || name == "precision") return Metric::p;
    if (name == "mrr" || name == "rr") return Metric::rr;
    throw DataError("unknown metric '" + name + "'");
}

struct MetricReport {
    std::map<std::string, QueryMetrics> per_query;
    QueryMetrics macro;
    std::size_t k = kDefaultMetricDepth;
};

namespace detail {

inline int grade_of(const Judgments& judged, const std::string& doc) {
    auto it = judged.find(doc);
    return it == judged.end() ? 0 : it->second;
}

inline std::size_t relevant_count(const Judgments& judged) {
    return static_cast<std::size_t>(
        std::count_if(judged.begin(), judged.end(), [](const auto& kv) { return kv.second > 0; }));
}

}  // namespace detail

// Rankings below are doc ids in rank order. A document counts as relevant
// when its grade is at least 1.

inline double average_precision(std::span<const std::string> ranking, const Judgments& judged) {
    const std::size_t total = detail::relevant_count(judged);
    if (total == 0) return 0.0;
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        if (detail::grade_of(judged, ranking[i]) > 0) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(i + 1);
        }
    }
    return sum / static_cast<double>(total);
}

/// Linear gain, 1/log2(rank+1) discount.
inline double ndcg_at_k(std::span<const std::string> ranking, const Judgments& judged, std::size_t k) {
    double dcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) {
        const int g = detail::grade_of(judged, ranking[i]);
        if (g > 0) dcg += g / std::log2(static_cast<double>(i) + 2.0);
    }
    std::vector<int> grades;
    for (const auto& [doc, g] : judged) {
        if (g > 0) grades.push_back(g);
    }
    std::sort(grades.begin(), grades.end(), std::greater<>());
    double ideal = 0.0;
    for (std::size_t i = 0; i < std::min(k, grades.size()); ++i) {
        ideal += grades[i] / std::log2(static_cast<double>(i) + 2.0);
    }
    return ideal > 0.0 ? dcg / ideal : 0.0;
}

/// Divides by k even when fewer than k documents were retrieved.
inline double precision_at_k(std::span<const std::string> ranking, const Judgments& judged, std::size_t k) {
    if (k == 0) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) hits += detail::grade_of(judged, ranking[i]) > 0;
    return static_cast<double>(hits) / static_cast<double>(k);
}

inline double reciprocal_rank(std::span<const std::string> ranking, const Judgments& judged) {
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        if (detail::grade_of(judged, ranking[i]) > 0) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
}

inline QueryMetrics query_metrics(std::span<const std::string> ranking, const Judgments& judged, std::size_t k) {
    return {average_precision(ranking, judged), ndcg_at_k(ranking, judged, k), precision_at_k(ranking, judged, k),
            reciprocal_rank(ranking, judged)};
}

inline std::vector<std::string> ranked_ids(const std::vector<Candidate>& cands) {
    std::vector<std::string> ids;
    ids.reserve(cands.size());
    for (const auto& c : cands) ids.push_back(c.doc_id);
    return ids;
}

/// Evaluates every query that has at least one relevant judgment. Such
/// queries missing from the run score zero on all metrics; queries without
/// relevant judgments are left out of the report.
inline MetricReport evaluate(const Run& run, const QrelsIndex& qrels, std::size_t k = kDefaultMetricDepth) {
    MetricReport report;
    report.k = k;
    for (const auto& [qid, judged] : qrels) {
        if (detail::relevant_count(judged) == 0) continue;
        auto it = run.find(qid);
        if (it == run.end()) {
            report.per_query[qid] = QueryMetrics{};
            continue;
        }
        report.per_query[qid] = query_metrics(ranked_ids(it->second), judged, k);
    }
    if (!report.per_query.empty()) {
        for (const auto& [qid, m] : report.per_query) {
            report.macro.ap += m.ap;
            report.macro.ndcg += m.ndcg;
            report.macro.p += m.p;
            report.macro.rr += m.rr;
        }
        const double n = static_cast<double>(report.per_query.size());
        report.macro.ap /= n;
        report.macro.ndcg /= n;
        report.macro.p /= n;
        report.macro.rr /= n;
    }
    return report;
}

inline MetricReport evaluate(const Run& run, const Qrels& qrels, std::size_t k = kDefaultMetricDepth) {
    return evaluate(run, index_qrels(qrels), k);
}

/// MAP restricted to `queries` (all judged queries when empty).
inline double mean_average_precision(const Run& run, const QrelsIndex& qrels,
                                     const std::vector<std::string>& queries = {}) {
    double total = 0.0;
    std::size_t n = 0;
    auto add = [&](const std::string& qid) {
        auto jt = qrels.find(qid);
        if (jt == qrels.end() || detail::relevant_count(jt->second) == 0) return;
        ++n;
        auto it = run.find(qid);
        if (it != run.end()) total += average_precision(ranked_ids(it->second), jt->second);
    };
    if (queries.empty()) {
        for (const auto& [qid, judged] : qrels) add(qid);
    } else {
        for (const auto& qid : queries) add(qid);
    }
    return n == 0 ? 0.0 : total / static_cast<double>(n);
}

inline double rankings_map(const Rankings& rankings, const QrelsIndex& qrels,
                           const std::vector<std::string>& queries = {}) {
    return mean_average_precision(rankings_to_run(rankings), qrels, queries);
}

// ---------------------------------------------------------------------------
// Significance

struct TTestResult {
    double t = 0.0;
    double p_two_sided = 1.0;
    std::size_t n = 0;
    bool degenerate = false;  // differences have zero variance
};

inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DataError("paired t-test needs equal-length samples");
    if (a.size() < 2) throw DataError("paired t-test needs at least two pairs");
    const std::size_t n = a.size();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dev = (a[i] - b[i]) - mean;
        ss += dev * dev;
    }
    const double var = ss / static_cast<double>(n - 1);
    TTestResult out;
    out.n = n;
    if (var == 0.0) {
        out.degenerate = true;
        return out;
    }
    out.t = mean / std::sqrt(var / static_cast<double>(n));
    boost::math::students_t dist(static_cast<double>(n - 1));
    out.p_two_sided = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t)));
    return out;
}

/// Paired test on one metric over the queries both reports evaluated.
inline TTestResult paired_t_test(const MetricReport& system, const MetricReport& baseline, Metric metric) {
    std::vector<double> a, b;
    for (const auto& [qid, m] : system.per_query) {
        auto it = baseline.per_query.find(qid);
        if (it == baseline.per_query.end()) continue;
        a.push_back(metric_value(m, metric));
        b.push_back(metric_value(it->second, metric));
    }
    return paired_t_test(a, b);
}

// ---------------------------------------------------------------------------
// Difficulty stratification

inline const std::vector<double> kDefaultDifficultyEdges = {5, 25, 50, 75, 95, 100};

struct DifficultyBin {
    double lower_pct = 0.0;
    double upper_pct = 0.0;
    std::vector<std::string> queries;
    std::map<std::string, std::optional<double>> macro;  // system -> mean, empty bin -> nullopt
};

struct DifficultyBins {
    std::vector<double> edges;
    Metric metric = Metric::ndcg;
    std::vector<DifficultyBin> bins;
};

/// Sorts queries by the baseline's metric (ascending, ties by query id) and
/// cuts the order at the given percentile edges. Bin i holds sorted positions
/// [floor(e_{i-1} n / 100), floor(e_i n / 100)).
inline DifficultyBins difficulty_bins(const MetricReport& baseline, const std::map<std::string, MetricReport>& systems,
                                      const std::vector<double>& edges = kDefaultDifficultyEdges,
                                      Metric metric = Metric::ndcg) {
    if (edges.empty() || edges.back() != 100.0) throw DataError("difficulty edges must end at 100");
    for (std::size_t i = 0; i < edges.size(); ++i) {
        if (edges[i] <= (i ? edges[i - 1] : 0.0)) throw DataError("difficulty edges must be increasing and positive");
    }
    std::vector<std::pair<double, std::string>> order;
    for (const auto& [qid, m] : baseline.per_query) order.emplace_back(metric_value(m, metric), qid);
    std::sort(order.begin(), order.end());

    DifficultyBins out{edges, metric, {}};
    const double n = static_cast<double>(order.size());
    std::size_t begin = 0;
    double lower = 0.0;
    for (double edge : edges) {
        const auto end = static_cast<std::size_t>(std::floor(edge * n / 100.0 + 1e-9));
        DifficultyBin bin;
        bin.lower_pct = lower;
        bin.upper_pct = edge;
        for (std::size_t i = begin; i < std::min(end, order.size()); ++i) bin.queries.push_back(order[i].second);
        for (const auto& [name, report] : systems) {
            if (bin.queries.empty()) {
                bin.macro[name] = std::nullopt;
                continue;
            }
            double total = 0.0;
            for (const auto& qid : bin.queries) {
                auto it = report.per_query.find(qid);
                if (it == report.per_query.end()) throw DataError("system '" + name + "' lacks query '" + qid + "'");
                total += metric_value(it->second, metric);
            }
            bin.macro[name] = total / static_cast<double>(bin.queries.size());
        }
        out.bins.push_back(std::move(bin));
        begin = std::max(begin, end);
        lower = edge;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rank-shift analysis

struct RankShift {
    std::size_t documents = 0;
    double mean_rank_before = 0.0;
    double mean_rank_after = 0.0;
    std::size_t top10_before = 0, top10_after = 0;
    std::size_t top50_before = 0, top50_after = 0;
    std::size_t beyond100_before = 0, beyond100_after = 0;
};

/// Position statistics of judged-relevant documents, grouped by grade. A
/// document missing from a run gets rank (candidates for that query) + 1.
inline std::map<int, RankShift> rank_shift_report(const Run& before, const Run& after, const QrelsIndex& qrels) {
    auto rank_in = [](const Run& run, const std::string& qid, const std::string& doc) -> std::size_t {
        auto it = run.find(qid);
        if (it == run.end()) return 1;
        const auto& cands = it->second;
        for (std::size_t i = 0; i < cands.size(); ++i) {
            if (cands[i].doc_id == doc) return i + 1;
        }
        return cands.size() + 1;
    };
    std::map<int, RankShift> out;
    for (const auto& [qid, judged] : qrels) {
        if (!before.contains(qid) && !after.contains(qid)) continue;
        for (const auto& [doc, grade] : judged) {
            if (grade <= 0) continue;
            auto& s = out[grade];
            const std::size_t rb = rank_in(before, qid, doc);
            const std::size_t ra = rank_in(after, qid, doc);
            ++s.documents;
            s.mean_rank_before += static_cast<double>(rb);
            s.mean_rank_after += static_cast<double>(ra);
            s.top10_before += rb <= 10;
            s.top10_after += ra <= 10;
            s.top50_before += rb <= 50;
            s.top50_after += ra <= 50;
            s.beyond100_before += rb > 100;
            s.beyond100_after += ra > 100;
        }
    }
    for (auto& [grade, s] : out) {
        s.mean_rank_before /= static_cast<double>(s.documents);
        s.mean_rank_after /= static_cast<double>(s.documents);
    }
    return out;
}

}  // namespace qder
