#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "qder/data_io.hpp"
#include "qder/error.hpp"
#include "qder/evaluation.hpp"
#include "qder/interaction.hpp"
#include "qder/parallel.hpp"
#include "qder/random.hpp"

namespace qder {

struct TrainConfig {
    double learning_rate = 2e-5;
    std::size_t batch_size = 20;
    std::size_t epochs = 10;
    std::size_t warmup_steps = 1000;
    std::size_t folds = 5;
    std::uint64_t seed = 42;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    AblationConfig ablation;
    std::size_t threads = 1;

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw DataError("learning_rate must be > 0");
        if (folds < 2) throw DataError("folds must be >= 2");
        if (batch_size < 1) throw DataError("batch_size must be >= 1");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
            throw DataError("adam betas must lie in [0, 1)");
        }
        if (!(adam_eps > 0.0)) throw DataError("adam_eps must be > 0");
        ablation.validate();
    }
};

struct Example {
    std::string query_id;
    std::string doc_id;
    int label = 0;
    double s = 1.0;
    bool operator==(const Example&) const = default;
};

using ExampleSet = std::map<std::string, std::vector<Example>>;

struct FoldSplit {
    std::size_t fold_id = 0;
    std::vector<std::string> train_queries;
    std::vector<std::string> validation_queries;
    std::vector<std::string> test_queries;
    bool operator==(const FoldSplit&) const = default;
};

/// Everything a training run reads. Records are shared read-only by all folds.
struct Dataset {
    RecordMap queries;
    RecordMap corpus;
    Run run;
    QrelsIndex qrels;
};

inline const TextRecord& find_record(const RecordMap& records, const std::string& id, const char* what) {
    auto it = records.find(id);
    if (it == records.end()) throw DataError(std::string("unknown ") + what + " id '" + id + "'");
    return it->second;
}

/// Token and entity dimensions across all records. Entity dimension is the
/// widest seen, since records without entities may carry zero columns.
inline std::pair<std::size_t, std::size_t> dataset_dims(const Dataset& data) {
    std::size_t d_t = 0;
    std::size_t d_e = 0;
    for (const auto* records : {&data.queries, &data.corpus}) {
        for (const auto& [id, rec] : *records) {
            if (d_t == 0) d_t = rec.tokens.dim();
            d_e = std::max(d_e, rec.entities.dim());
        }
    }
    if (d_t == 0) throw DataError("dataset has no token embeddings");
    return {d_t, d_e};
}

// ---------------------------------------------------------------------------
// Examples and folds

/// Balanced examples per query: every candidate with grade >= 1 and an equal
/// number of negatives drawn without replacement.
inline ExampleSet build_examples(const QrelsIndex& qrels, const Run& run, std::uint64_t seed,
                                 std::vector<std::string>* warnings = nullptr) {
    static const std::map<std::string, int> no_judgments;
    ExampleSet out;
    for (const auto& [qid, cands] : run) {
        auto jt = qrels.find(qid);
        const auto& judged = jt == qrels.end() ? no_judgments : jt->second;
        std::vector<Example> pos;
        std::vector<Example> neg;
        for (const auto& c : cands) {
            auto g = judged.find(c.doc_id);
            const int label = g != judged.end() && g->second >= 1 ? 1 : 0;
            (label ? pos : neg).push_back({qid, c.doc_id, label, c.score});
        }
        if (pos.empty()) {
            if (warnings) warnings->push_back("query '" + qid + "' has no relevant candidates; excluded from training");
            continue;
        }
        if (neg.size() < pos.size() && warnings) {
            warnings->push_back("query '" + qid + "' has " + std::to_string(pos.size()) + " positives but only " +
                                std::to_string(neg.size()) + " negatives");
        }
        Rng rng(mix_seed(seed, fnv1a(qid)));
        const std::size_t take = std::min(pos.size(), neg.size());
        for (std::size_t i = 0; i < take; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(neg.size() - i));
            std::swap(neg[i], neg[j]);
        }
        neg.resize(take);
        auto& list = out[qid];
        list = std::move(pos);
        list.insert(list.end(), neg.begin(), neg.end());
    }
    return out;
}

/// Splits queries into k test parts (the first |Q| mod k parts get one
/// extra). Part (i+1) mod k validates fold i and the rest train it. With
/// k = 2 there is no spare part, so the non-test half is split in two.
inline std::vector<FoldSplit> make_folds(std::vector<std::string> query_ids, std::size_t k, std::uint64_t seed) {
    std::sort(query_ids.begin(), query_ids.end());
    query_ids.erase(std::unique(query_ids.begin(), query_ids.end()), query_ids.end());
    if (k < 2) throw DataError("need at least 2 folds");
    if (k > query_ids.size()) {
        throw DataError("cannot make " + std::to_string(k) + " folds from " + std::to_string(query_ids.size()) +
                        " queries");
    }
    Rng rng(mix_seed(seed, fnv1a("folds")));
    rng.shuffle(query_ids);

    std::vector<std::vector<std::string>> parts(k);
    const std::size_t base = query_ids.size() / k;
    const std::size_t extra = query_ids.size() % k;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t n = base + (i < extra ? 1 : 0);
        parts[i].assign(query_ids.begin() + static_cast<std::ptrdiff_t>(pos),
                        query_ids.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
    }

    std::vector<FoldSplit> folds(k);
    for (std::size_t i = 0; i < k; ++i) {
        auto& f = folds[i];
        f.fold_id = i;
        f.test_queries = parts[i];
        if (k == 2) {
            const auto& rest = parts[1 - i];
            const std::size_t n_val = rest.size() / 2;
            f.validation_queries.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
            f.train_queries.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
        } else {
            const std::size_t v = (i + 1) % k;
            f.validation_queries = parts[v];
            for (std::size_t j = 0; j < k; ++j) {
                if (j != i && j != v) f.train_queries.insert(f.train_queries.end(), parts[j].begin(), parts[j].end());
            }
        }
    }
    return folds;
}

// ---------------------------------------------------------------------------
// Loss and optimizer

inline void check_loss_inputs(std::size_t n, std::span<const int> labels) {
    if (n != labels.size()) throw DataError("loss inputs differ in length");
    if (n == 0) throw DataError("loss needs at least one example");
    for (int y : labels) {
        if (y != 0 && y != 1) throw DataError("labels must be 0 or 1");
    }
}

/// Mean binary cross-entropy of raw scores, computed through softplus.
inline double bce_loss_from_logits(std::span<const double> raws, std::span<const int> labels) {
    check_loss_inputs(raws.size(), labels);
    double total = 0.0;
    for (std::size_t i = 0; i < raws.size(); ++i) total += bce_with_logit(raws[i], labels[i]);
    return total / static_cast<double>(raws.size());
}

inline double bce_loss(std::span<const double> probs, std::span<const int> labels) {
    check_loss_inputs(probs.size(), labels);
    std::vector<double> logits(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = probs[i];
        if (!(p >= 0.0 && p <= 1.0)) throw DataError("probabilities must lie in [0, 1]");
        logits[i] = std::log(p) - std::log1p(-p);
    }
    return bce_loss_from_logits(logits, labels);
}

inline double effective_learning_rate(const TrainConfig& cfg, std::size_t step_index) {
    if (cfg.warmup_steps == 0) return cfg.learning_rate;
    const double frac = static_cast<double>(step_index) / static_cast<double>(cfg.warmup_steps);
    return cfg.learning_rate * std::min(1.0, frac);
}

struct AdamState {
    Vector m;
    Vector v;
};

inline void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state,
                      std::size_t step_index, const TrainConfig& cfg) {
    if (step_index < 1) throw DataError("adam step index starts at 1");
    if (grad.size() != params.size()) throw DataError("gradient and parameter sizes differ");
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!std::isfinite(grad[i])) {
            throw NumericError("non-finite gradient at parameter " + std::to_string(i) + " on step " +
                               std::to_string(step_index));
        }
    }
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    const double rate = effective_learning_rate(cfg, step_index);
    const double t = static_cast<double>(step_index);
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = cfg.adam_beta1 * state.m[i] + (1.0 - cfg.adam_beta1) * grad[i];
        state.v[i] = cfg.adam_beta2 * state.v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
}

inline void adam_step(BilinearModel& model, std::span<const double> grad, AdamState& state, std::size_t step_index,
                      const TrainConfig& cfg) {
    adam_step(model.parameters(), grad, state, step_index, cfg);
}

// ---------------------------------------------------------------------------
// Scoring

/// Rescores every candidate of the given queries by raw model score.
inline Rankings rerank(const Dataset& data, const BilinearModel& model, const std::vector<std::string>& query_ids,
                       std::size_t threads = 1) {
    struct Job {
        const TextRecord* query;
        const Candidate* cand;
    };
    std::vector<Job> jobs;
    for (const auto& qid : query_ids) {
        auto it = data.run.find(qid);
        if (it == data.run.end()) continue;
        const auto& q = find_record(data.queries, qid, "query");
        for (const auto& c : it->second) jobs.push_back({&q, &c});
    }
    std::vector<double> raw(jobs.size());
    parallel_for(jobs.size(), threads, [&](std::size_t i) {
        const auto& d = find_record(data.corpus, jobs[i].cand->doc_id, "document");
        raw[i] = forward(*jobs[i].query, d, jobs[i].cand->score, model).raw;
    });
    Rankings out;
    for (const auto& qid : query_ids) {
        if (data.run.contains(qid)) out[qid];
    }
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        out[jobs[i].cand->query_id].push_back({jobs[i].cand->doc_id, raw[i]});
    }
    for (auto& [qid, docs] : out) sort_ranking(docs);
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
    std::size_t fold = 0;
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_map = 0.0;
    bool kept = false;
    bool operator==(const EpochLog&) const = default;
};

inline std::string to_ndjson(const EpochLog& e) {
    nlohmann::ordered_json j;
    j["fold"] = e.fold;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["val_map"] = e.val_map;
    j["kept"] = e.kept;
    return j.dump();
}

struct FoldResult {
    FoldSplit split;
    BilinearModel model;  // best by validation MAP
    std::size_t best_epoch = 0;
    double best_val_map = 0.0;
    std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

namespace detail {

inline double mean_loss(const Dataset& data, const BilinearModel& model, const std::vector<const Example*>& examples,
                        std::size_t threads) {
    std::vector<double> losses(examples.size());
    parallel_for(examples.size(), threads, [&](std::size_t i) {
        const auto& ex = *examples[i];
        const auto& q = find_record(data.queries, ex.query_id, "query");
        const auto& d = find_record(data.corpus, ex.doc_id, "document");
        losses[i] = bce_with_logit(forward(q, d, ex.s, model).raw, ex.label);
    });
    double total = 0.0;
    for (double l : losses) total += l;
    return total / static_cast<double>(losses.size());
}

}  // namespace detail

/// Trains one fold. Epoch 0 is the initialized model; the kept checkpoint is
/// the earliest epoch with the highest validation MAP.
inline FoldResult train_fold(const FoldSplit& fold, const ExampleSet& examples, const Dataset& data,
                             const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    std::vector<const Example*> train;
    for (const auto& qid : fold.train_queries) {
        auto it = examples.find(qid);
        if (it == examples.end()) continue;
        for (const auto& ex : it->second) train.push_back(&ex);
    }
    if (train.empty()) throw DataError("fold " + std::to_string(fold.fold_id) + " has an empty training set");

    const auto [d_t, d_e] = dataset_dims(data);
    auto model = BilinearModel::initialized(d_t, d_e, cfg.ablation, mix_seed(cfg.seed, 0x1000 + fold.fold_id));

    FoldResult result{fold, model, 0, 0.0, {}};
    auto record_epoch = [&](std::size_t epoch, double loss) {
        const double val = rankings_map(rerank(data, model, fold.validation_queries, cfg.threads), data.qrels,
                                        fold.validation_queries);
        EpochLog entry{fold.fold_id, epoch, loss, val, epoch == 0 || val > result.best_val_map};
        if (entry.kept) {
            result.model = model;
            result.best_epoch = epoch;
            result.best_val_map = val;
        }
        result.log.push_back(entry);
        if (on_epoch) on_epoch(entry);
    };
    record_epoch(0, detail::mean_loss(data, model, train, cfg.threads));

    AdamState adam;
    std::size_t step = 0;
    const std::size_t n_params = model.parameters().size();
    std::vector<ExampleGradient> batch_grads;
    Vector grad(n_params);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng(mix_seed(mix_seed(cfg.seed, 0x2000 + fold.fold_id), epoch));
        rng.shuffle(train);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(train.size(), start + cfg.batch_size);
            batch_grads.assign(end - start, ExampleGradient{});
            parallel_for(end - start, cfg.threads, [&](std::size_t i) {
                const auto& ex = *train[start + i];
                const auto& q = find_record(data.queries, ex.query_id, "query");
                const auto& d = find_record(data.corpus, ex.doc_id, "document");
                batch_grads[i] = example_gradient(q, d, ex.s, ex.label, model);
            });
            std::fill(grad.begin(), grad.end(), 0.0);
            const double weight = 1.0 / static_cast<double>(end - start);
            for (const auto& eg : batch_grads) {
                accumulate_gradient(eg, model, weight, grad);
                loss_sum += eg.loss;
            }
            adam_step(model, grad, adam, ++step, cfg);
        }
        record_epoch(epoch, loss_sum / static_cast<double>(train.size()));
    }
    return result;
}

struct CrossValidationResult {
    Rankings run;  // out-of-fold
    std::vector<FoldResult> folds;
    std::vector<std::string> warnings;
};

/// k-fold cross-validation over the run's queries. Each query is reranked
/// once, by the model of the fold that held it out.
inline CrossValidationResult cross_validate(const Dataset& data, const TrainConfig& cfg,
                                            const EpochCallback& on_epoch = {}) {
    cfg.validate();
    CrossValidationResult out;
    const auto examples = build_examples(data.qrels, data.run, cfg.seed, &out.warnings);
    std::vector<std::string> qids;
    for (const auto& [qid, cands] : data.run) qids.push_back(qid);
    const auto splits = make_folds(qids, cfg.folds, cfg.seed);
    std::set<std::string> scored;
    for (const auto& split : splits) {
        auto fold = train_fold(split, examples, data, cfg, on_epoch);
        auto ranked = rerank(data, fold.model, split.test_queries, cfg.threads);
        for (auto& [qid, docs] : ranked) {
            if (!scored.insert(qid).second) throw DataError("query '" + qid + "' was tested twice");
            out.run[qid] = std::move(docs);
        }
        out.folds.push_back(std::move(fold));
    }
    return out;
}

}  // namespace qder
