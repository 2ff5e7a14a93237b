#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "qder/data_io.hpp"
#include "qder/error.hpp"
#include "qder/evaluation.hpp"
#include "qder/parallel.hpp"
#include "qder/trainer.hpp"

namespace qder {

enum class Normalization { minmax };

struct HybridConfig {
    double lambda = 0.5;
    double grid_step = 0.01;
    Normalization normalization = Normalization::minmax;

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw DataError("lambda must lie in [0, 1]");
        if (!(grid_step > 0.0 && grid_step <= 0.5)) throw DataError("grid_step must lie in (0, 0.5]");
    }
};

/// Maps each query's scores onto [0, 1] by min-max. A query whose scores
/// are all equal maps to 0.5 throughout.
inline Rankings normalize_per_query(const Rankings& run) {
    Rankings out;
    for (const auto& [qid, docs] : run) {
        auto& norm = out[qid];
        if (docs.empty()) continue;
        double lo = docs.front().score;
        double hi = lo;
        for (const auto& d : docs) {
            if (!std::isfinite(d.score)) throw DataError("non-finite score for '" + d.doc_id + "' in query '" + qid + "'");
            lo = std::min(lo, d.score);
            hi = std::max(hi, d.score);
        }
        norm.reserve(docs.size());
        for (const auto& d : docs) norm.push_back({d.doc_id, hi == lo ? 0.5 : (d.score - lo) / (hi - lo)});
    }
    return out;
}

/// lambda * a + (1 - lambda) * b per document, re-sorted. A document missing
/// from one run takes score 0 there; a query missing from one run is fused
/// against an empty list.
inline Rankings interpolate(const Rankings& a, const Rankings& b, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw DataError("lambda must lie in [0, 1]");
    bool shared = false;
    for (const auto& [qid, docs] : a) shared = shared || b.contains(qid);
    if (!shared && !a.empty() && !b.empty()) throw DataError("runs share no queries");

    std::set<std::string> queries;
    for (const auto& [qid, docs] : a) queries.insert(qid);
    for (const auto& [qid, docs] : b) queries.insert(qid);
    static const std::vector<ScoredDoc> none;
    Rankings out;
    for (const auto& qid : queries) {
        auto ia = a.find(qid);
        auto ib = b.find(qid);
        const auto& da = ia == a.end() ? none : ia->second;
        const auto& db = ib == b.end() ? none : ib->second;
        std::map<std::string, std::pair<double, double>> scores;
        for (const auto& d : da) scores[d.doc_id].first = d.score;
        for (const auto& d : db) scores[d.doc_id].second = d.score;
        auto& fused = out[qid];
        fused.reserve(scores.size());
        for (const auto& [doc, s] : scores) fused.push_back({doc, lambda * s.first + (1.0 - lambda) * s.second});
        sort_ranking(fused);
    }
    return out;
}

/// {0, step, 2 step, ...} up to and always including 1.
inline std::vector<double> lambda_grid(double step) {
    if (!(step > 0.0 && step <= 1.0)) throw DataError("lambda grid step must lie in (0, 1]");
    std::vector<double> grid;
    const double n = std::round(1.0 / step);
    if (std::abs(n * step - 1.0) < 1e-9) {
        for (double i = 0; i <= n; ++i) grid.push_back(i / n);
        return grid;
    }
    for (double i = 0; i * step < 1.0; ++i) grid.push_back(i * step);
    grid.push_back(1.0);
    return grid;
}

struct LambdaFit {
    double lambda = 0.0;
    double map = 0.0;
    std::vector<std::pair<double, double>> curve;  // (lambda, MAP)
};

/// Grid search for the lambda maximizing MAP over `queries` (all judged
/// queries when empty). Inputs are raw scores; both runs are normalized per
/// query first. Ties go to the smallest lambda.
inline LambdaFit fit_lambda(const Rankings& run_a, const Rankings& run_b, const QrelsIndex& qrels,
                            const HybridConfig& cfg, const std::vector<std::string>& queries = {},
                            std::size_t threads = 1) {
    cfg.validate();
    const auto grid = lambda_grid(cfg.grid_step);
    if (grid.empty()) throw DataError("empty lambda grid");
    const auto a = normalize_per_query(run_a);
    const auto b = normalize_per_query(run_b);
    std::vector<double> maps(grid.size());
    parallel_for(grid.size(), threads, [&](std::size_t i) { maps[i] = rankings_map(interpolate(a, b, grid[i]), qrels, queries); });
    LambdaFit fit;
    fit.lambda = grid[0];
    fit.map = maps[0];
    for (std::size_t i = 0; i < grid.size(); ++i) {
        fit.curve.emplace_back(grid[i], maps[i]);
        if (maps[i] > fit.map) {
            fit.map = maps[i];
            fit.lambda = grid[i];
        }
    }
    return fit;
}

inline Rankings fuse(const Rankings& run_a, const Rankings& run_b, double lambda) {
    return interpolate(normalize_per_query(run_a), normalize_per_query(run_b), lambda);
}

inline std::string lambda_curve_csv(const LambdaFit& fit) {
    std::string out = "lambda,map\n";
    for (const auto& [lambda, map] : fit.curve) out += format_score(lambda) + "," + format_score(map) + "\n";
    return out;
}

struct CrossValidatedFusion {
    Rankings run;
    std::vector<LambdaFit> folds;  // one fit per fold, on its non-test queries
};

/// Fits lambda on each fold's train and validation queries and fuses that
/// fold's test queries with it.
inline CrossValidatedFusion fuse_cross_validated(const Rankings& run_a, const Rankings& run_b,
                                                 const QrelsIndex& qrels, const std::vector<FoldSplit>& folds,
                                                 const HybridConfig& cfg, std::size_t threads = 1) {
    CrossValidatedFusion out;
    for (const auto& f : folds) {
        std::vector<std::string> fit_queries = f.train_queries;
        fit_queries.insert(fit_queries.end(), f.validation_queries.begin(), f.validation_queries.end());
        auto fit = fit_lambda(run_a, run_b, qrels, cfg, fit_queries, threads);
        Rankings a_test;
        Rankings b_test;
        for (const auto& q : f.test_queries) {
            if (auto it = run_a.find(q); it != run_a.end()) a_test[q] = it->second;
            if (auto it = run_b.find(q); it != run_b.end()) b_test[q] = it->second;
        }
        if (!a_test.empty() || !b_test.empty()) {
            for (auto& [qid, docs] : interpolate(normalize_per_query(a_test), normalize_per_query(b_test), fit.lambda)) {
                out.run[qid] = std::move(docs);
            }
        }
        out.folds.push_back(std::move(fit));
    }
    return out;
}

}  // namespace qder
