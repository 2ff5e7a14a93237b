#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "qder/data_io.hpp"
#include "qder/random.hpp"
#include "qder/trainer.hpp"

namespace qder {

/// Shape of a planted-signal dataset.
///
/// Each query holds its own random directions in sign-paired items
/// (u, -u, v, -v for tokens; w, -w for entities). A relevant document plants
/// noisy copies of one or both pairs among Gaussian noise items; grade 2
/// documents carry both token pairs. Every document also gets a random
/// offset added to all of its items. The offset moves softmax logits by a
/// per-row constant and cancels in the multiply features because query items
/// sum to zero, but it swamps the pooled means that the add and
/// no-interaction layouts see. So relevance is only recoverable through
/// multiplicative interaction.
struct SyntheticSpec {
    std::size_t queries = 40;
    std::size_t candidates = 100;
    std::size_t d_t = 16;
    std::size_t d_e = 8;
    std::size_t relevant_min = 3;
    std::size_t relevant_max = 7;
    std::size_t doc_tokens = 20;
    std::size_t doc_entities = 6;
    double signal = 2.5;      // norm of a planted direction
    double noise = 0.3;       // per-coordinate sd of noise items
    double jitter = 0.1;      // per-coordinate sd added to planted copies
    double offset = 0.5;      // per-coordinate sd of the per-document offset
    double score_boost = 0.25;  // first-stage score bump for relevant documents
    std::uint64_t seed = 7;
};

struct SyntheticData {
    RecordMap queries;
    RecordMap corpus;
    Run run;
    Qrels qrels;

    [[nodiscard]] Dataset dataset() const { return {queries, corpus, run, index_qrels(qrels)}; }
};

namespace detail {

inline Vector random_direction(Rng& rng, std::size_t dim, double norm) {
    Vector v(dim);
    double sq = 0.0;
    do {
        for (double& x : v) x = rng.normal();
        sq = squared_norm(v);
    } while (sq == 0.0);
    const double scale = norm / std::sqrt(sq);
    for (double& x : v) x *= scale;
    return v;
}

inline void fill_noise(Rng& rng, Matrix& m, std::size_t row, double sd) {
    for (std::size_t c = 0; c < m.cols(); ++c) m(row, c) = rng.normal(0.0, sd);
}

inline void plant(Rng& rng, Matrix& m, std::size_t row, const Vector& dir, double sign, double jitter) {
    for (std::size_t c = 0; c < m.cols(); ++c) m(row, c) = sign * dir[c] + rng.normal(0.0, jitter);
}

inline void round_to_float(Matrix& m) {
    for (double& v : m.values()) v = static_cast<float>(v);
}

}  // namespace detail

inline SyntheticData make_planted_dataset(const SyntheticSpec& spec) {
    if (spec.queries == 0 || spec.candidates == 0) throw DataError("synthetic dataset needs queries and candidates");
    if (spec.relevant_min < 1 || spec.relevant_min > spec.relevant_max || spec.relevant_max > spec.candidates) {
        throw DataError("synthetic relevant range must satisfy 1 <= min <= max <= candidates");
    }
    if (spec.doc_tokens < 4 || spec.d_t == 0) throw DataError("synthetic documents need at least 4 tokens");
    const bool entities = spec.d_e > 0 && spec.doc_entities >= 2;

    SyntheticData out;
    Rng rng(mix_seed(spec.seed, fnv1a("synthetic")));
    const std::size_t width = std::to_string(spec.queries - 1).size();
    const std::size_t doc_width = std::to_string(spec.candidates - 1).size();
    auto pad = [](std::size_t i, std::size_t w) {
        auto s = std::to_string(i);
        return std::string(w - std::min(w, s.size()), '0') + s;
    };

    for (std::size_t qi = 0; qi < spec.queries; ++qi) {
        const std::string qid = "Q" + pad(qi, width);
        const auto u = detail::random_direction(rng, spec.d_t, spec.signal);
        const auto v = detail::random_direction(rng, spec.d_t, spec.signal);
        const auto w = entities ? detail::random_direction(rng, spec.d_e, spec.signal) : Vector{};

        TextRecord q;
        q.id = qid;
        q.tokens.values = Matrix(4, spec.d_t);
        for (std::size_t c = 0; c < spec.d_t; ++c) {
            q.tokens.values(0, c) = u[c];
            q.tokens.values(1, c) = -u[c];
            q.tokens.values(2, c) = v[c];
            q.tokens.values(3, c) = -v[c];
        }
        q.entities.values = Matrix(entities ? 2 : 0, spec.d_e);
        if (entities) {
            q.entities.ids = {qid + "_E0", qid + "_E1"};
            for (std::size_t c = 0; c < spec.d_e; ++c) {
                q.entities.values(0, c) = w[c];
                q.entities.values(1, c) = -w[c];
            }
        }
        detail::round_to_float(q.tokens.values);
        detail::round_to_float(q.entities.values);
        out.queries.emplace(qid, std::move(q));

        const std::size_t n_rel =
            spec.relevant_min + static_cast<std::size_t>(rng.below(spec.relevant_max - spec.relevant_min + 1));
        std::vector<std::size_t> order(spec.candidates);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        std::vector<int> grade(spec.candidates, 0);
        for (std::size_t i = 0; i < n_rel; ++i) grade[order[i]] = 1 + static_cast<int>(rng.below(2));

        std::vector<ScoredDoc> first_stage;
        for (std::size_t di = 0; di < spec.candidates; ++di) {
            const std::string did = qid + "_D" + pad(di, doc_width);
            TextRecord d;
            d.id = did;
            Matrix& tok = d.tokens.values;
            tok = Matrix(spec.doc_tokens, spec.d_t);
            for (std::size_t r = 0; r < spec.doc_tokens; ++r) detail::fill_noise(rng, tok, r, spec.noise);
            std::vector<std::size_t> slots(spec.doc_tokens);
            for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
            rng.shuffle(slots);
            if (grade[di] >= 1) {
                detail::plant(rng, tok, slots[0], u, 1.0, spec.jitter);
                detail::plant(rng, tok, slots[1], u, -1.0, spec.jitter);
            }
            if (grade[di] >= 2) {
                detail::plant(rng, tok, slots[2], v, 1.0, spec.jitter);
                detail::plant(rng, tok, slots[3], v, -1.0, spec.jitter);
            }
            Vector shift(spec.d_t);
            for (double& x : shift) x = rng.normal(0.0, spec.offset);
            for (std::size_t r = 0; r < tok.rows(); ++r) {
                for (std::size_t c = 0; c < spec.d_t; ++c) tok(r, c) += shift[c];
            }

            Matrix ent(entities ? spec.doc_entities : 0, spec.d_e);
            if (entities) {
                for (std::size_t r = 0; r < ent.rows(); ++r) {
                    detail::fill_noise(rng, ent, r, spec.noise);
                    d.entities.ids.push_back(did + "_E" + std::to_string(r));
                }
                if (grade[di] >= 1) {
                    const std::size_t a = static_cast<std::size_t>(rng.below(ent.rows()));
                    const std::size_t b = (a + 1 + static_cast<std::size_t>(rng.below(ent.rows() - 1))) % ent.rows();
                    detail::plant(rng, ent, a, w, 1.0, spec.jitter);
                    detail::plant(rng, ent, b, w, -1.0, spec.jitter);
                }
                Vector eshift(spec.d_e);
                for (double& x : eshift) x = rng.normal(0.0, spec.offset);
                for (std::size_t r = 0; r < ent.rows(); ++r) {
                    for (std::size_t c = 0; c < spec.d_e; ++c) ent(r, c) += eshift[c];
                }
            }
            d.entities.values = std::move(ent);
            detail::round_to_float(d.tokens.values);
            detail::round_to_float(d.entities.values);
            out.corpus.emplace(did, std::move(d));

            const double s = rng.uniform(0.5, 1.5) + (grade[di] > 0 ? spec.score_boost : 0.0);
            first_stage.push_back({did, static_cast<float>(s)});
            out.qrels.push_back({qid, did, grade[di]});
        }
        sort_ranking(first_stage);
        auto& cands = out.run[qid];
        for (std::size_t r = 0; r < first_stage.size(); ++r) {
            cands.push_back({qid, first_stage[r].doc_id, first_stage[r].score, static_cast<std::uint32_t>(r + 1)});
        }
    }
    return out;
}

}  // namespace qder
