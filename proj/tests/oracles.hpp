#pragma once

// Deliberately naive reference implementations used as test oracles. They
// share no code with the library beyond the plain data types, use nested
// std::vector storage, and favour obviousness over speed.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "qder/data_io.hpp"
#include "qder/random.hpp"

namespace oracle {

using Grid = std::vector<std::vector<double>>;

inline Grid to_grid(const qder::Matrix& m) {
    Grid g(m.rows(), std::vector<double>(m.cols()));
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) g[r][c] = m(r, c);
    return g;
}

/// softmax(Q D^T) row-wise and the attended matrix, entry by entry.
inline std::pair<Grid, Grid> attention(const Grid& q, const Grid& d) {
    Grid w(q.size(), std::vector<double>(d.size()));
    Grid att(q.size(), std::vector<double>(q[0].size(), 0.0));
    for (std::size_t i = 0; i < q.size(); ++i) {
        std::vector<long double> e(d.size());
        long double z = 0;
        for (std::size_t j = 0; j < d.size(); ++j) {
            long double logit = 0;
            for (std::size_t c = 0; c < q[i].size(); ++c) logit += (long double)q[i][c] * d[j][c];
            e[j] = std::exp(logit);
            z += e[j];
        }
        for (std::size_t j = 0; j < d.size(); ++j) w[i][j] = (double)(e[j] / z);
        for (std::size_t c = 0; c < q[i].size(); ++c) {
            long double acc = 0;
            for (std::size_t j = 0; j < d.size(); ++j) acc += (e[j] / z) * d[j][c];
            att[i][c] = (double)acc;
        }
    }
    return {w, att};
}

inline std::vector<double> pooled(const Grid& q, const Grid& att, char op) {
    std::vector<double> out(q[0].size(), 0.0);
    for (std::size_t c = 0; c < out.size(); ++c) {
        long double acc = 0;
        for (std::size_t i = 0; i < q.size(); ++i) {
            switch (op) {
                case '*': acc += (long double)q[i][c] * att[i][c]; break;
                case '+': acc += (long double)q[i][c] + att[i][c]; break;
                case '-': acc += (long double)q[i][c] - att[i][c]; break;
                case 'q': acc += q[i][c]; break;
                case 'a': acc += att[i][c]; break;
            }
        }
        out[c] = (double)(acc / q.size());
    }
    return out;
}

/// Full feature vector h for the default model layout (text *, text +,
/// entity *, entity +) scaled by s.
inline std::vector<double> features(const qder::TextRecord& query, const qder::TextRecord& doc, double s,
                                    const std::string& ops = "*+", bool text = true, bool entity = true,
                                    bool scale = true) {
    std::vector<double> h;
    auto channel = [&](const qder::Matrix& qm, const qder::Matrix& dm, std::size_t dim) {
        for (char op : ops) {
            std::vector<double> v(dim, 0.0);
            if (qm.rows() > 0 && dm.rows() > 0) {
                auto q = to_grid(qm);
                auto [w, att] = attention(q, to_grid(dm));
                v = pooled(q, att, op);
            }
            for (double x : v) h.push_back(scale ? s * x : x);
        }
    };
    if (text) channel(query.tokens.values, doc.tokens.values, query.tokens.dim());
    if (entity) channel(query.entities.values, doc.entities.values, query.entities.dim());
    return h;
}

inline double quadratic_form(const std::vector<double>& h, const qder::Matrix& m) {
    long double acc = 0;
    for (std::size_t i = 0; i < h.size(); ++i)
        for (std::size_t j = 0; j < h.size(); ++j) acc += (long double)h[i] * m(i, j) * h[j];
    return (double)acc;
}

// ---------------------------------------------------------------------------
// Ranking metrics by direct enumeration.

struct Metrics {
    double ap, ndcg, p, rr;
};

/// ranking: doc ids in rank order; judged: doc -> grade.
inline Metrics metrics(const std::vector<std::string>& ranking, const std::map<std::string, int>& judged,
                       std::size_t k) {
    std::size_t total_rel = 0;
    std::vector<int> all_grades;
    for (auto& [d, g] : judged) {
        if (g > 0) ++total_rel;
        all_grades.push_back(g);
    }
    auto grade_of = [&](const std::string& d) {
        auto it = judged.find(d);
        return it == judged.end() ? 0 : it->second;
    };
    Metrics m{0, 0, 0, 0};
    // AP: for each relevant doc found at rank r, count relevant docs in ranks 1..r.
    for (std::size_t r = 0; r < ranking.size(); ++r) {
        if (grade_of(ranking[r]) <= 0) continue;
        std::size_t rel_upto = 0;
        for (std::size_t t = 0; t <= r; ++t) rel_upto += grade_of(ranking[t]) > 0;
        m.ap += (double)rel_upto / (double)(r + 1);
    }
    m.ap /= (double)total_rel;
    double dcg = 0, idcg = 0;
    for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) dcg += grade_of(ranking[r]) / std::log2(r + 2.0);
    std::sort(all_grades.rbegin(), all_grades.rend());
    for (std::size_t r = 0; r < std::min(k, all_grades.size()); ++r) idcg += std::max(0, all_grades[r]) / std::log2(r + 2.0);
    m.ndcg = dcg / idcg;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) hits += grade_of(ranking[r]) > 0;
    m.p = (double)hits / (double)k;
    for (std::size_t r = 0; r < ranking.size(); ++r) {
        if (grade_of(ranking[r]) > 0) {
            m.rr = 1.0 / (double)(r + 1);
            break;
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Rank correlations by pair counting.

inline double kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
    long long concordant = 0, discordant = 0, tie_x = 0, tie_y = 0;
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = x[i] - x[j];
            const double dy = y[i] - y[j];
            if (dx == 0 && dy == 0) {
                ++tie_x;
                ++tie_y;
            } else if (dx == 0) {
                ++tie_x;
            } else if (dy == 0) {
                ++tie_y;
            } else if ((dx > 0) == (dy > 0)) {
                ++concordant;
            } else {
                ++discordant;
            }
        }
    const double pairs = (double)n * (double)(n - 1) / 2.0;
    return (double)(concordant - discordant) / std::sqrt((pairs - (double)tie_x) * (pairs - (double)tie_y));
}

/// Average rank of each value by counting smaller and equal entries.
inline std::vector<double> fractional_ranks(const std::vector<double>& x) {
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double less = 0, equal = 0;
        for (double v : x) {
            less += v < x[i];
            equal += v == x[i];
        }
        r[i] = less + (equal + 1.0) / 2.0;
    }
    return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    long double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= a.size();
    mb /= b.size();
    long double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return (double)(sab / std::sqrt(saa * sbb));
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    return pearson(fractional_ranks(x), fractional_ranks(y));
}

}  // namespace oracle

namespace fixture {

inline qder::Matrix random_matrix(qder::Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    qder::Matrix m(rows, cols);
    for (double& v : m.values()) v = rng.uniform(-scale, scale);
    return m;
}

inline qder::TextRecord record(std::string id, qder::Matrix tokens, qder::Matrix entities) {
    qder::TextRecord r;
    r.id = std::move(id);
    r.tokens.values = std::move(tokens);
    for (std::size_t i = 0; i < entities.rows(); ++i) r.entities.ids.push_back("E" + std::to_string(i));
    r.entities.values = std::move(entities);
    return r;
}

inline qder::TextRecord random_record(qder::Rng& rng, std::string id, std::size_t l, std::size_t d_t,
                                      std::size_t n, std::size_t d_e, double scale = 1.0) {
    return record(std::move(id), random_matrix(rng, l, d_t, scale), random_matrix(rng, n, d_e, scale));
}

}  // namespace fixture
