#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qder/data_io.hpp"
#include "qder/error.hpp"
#include "qder/evaluation.hpp"
#include "qder/interaction.hpp"
#include "qder/parallel.hpp"
#include "qder/random.hpp"
#include "qder/trainer.hpp"

namespace qder {

// ---------------------------------------------------------------------------
// Rank correlation

/// Average ranks (1-based); tied values share the mean of their positions.
inline std::vector<double> fractional_ranks(std::span<const double> x) {
    std::vector<std::size_t> idx(x.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double r = (static_cast<double>(i + j) / 2.0) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
        i = j + 1;
    }
    return ranks;
}

namespace detail {

inline void check_pair_input(std::span<const double> x, std::span<const double> y, const char* what) {
    if (x.size() != y.size()) throw DataError(std::string(what) + ": inputs differ in length");
    if (x.size() < 2) throw DataError(std::string(what) + ": need at least 2 observations");
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw DataError(std::string(what) + ": non-finite input");
    }
}

}  // namespace detail

inline double spearman(std::span<const double> x, std::span<const double> y) {
    detail::check_pair_input(x, y, "spearman");
    const auto rx = fractional_ranks(x);
    const auto ry = fractional_ranks(y);
    const double n = static_cast<double>(rx.size());
    const double mean = (n + 1.0) / 2.0;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mean) * (ry[i] - mean);
        sxx += (rx[i] - mean) * (rx[i] - mean);
        syy += (ry[i] - mean) * (ry[i] - mean);
    }
    if (sxx == 0.0 || syy == 0.0) throw DataError("spearman: zero rank variance");
    return sxy / std::sqrt(sxx * syy);
}

namespace detail {

inline std::uint64_t tied_pairs(std::uint64_t run) { return run * (run - 1) / 2; }

// Merge sort of v that returns the number of inversions.
inline std::uint64_t count_swaps(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::uint64_t swaps = count_swaps(v, buf, lo, mid) + count_swaps(v, buf, mid, hi);
    std::size_t i = lo;
    std::size_t j = mid;
    std::size_t k = lo;
    while (i < mid && j < hi) {
        if (v[j] < v[i]) {
            swaps += mid - i;
            buf[k++] = v[j++];
        } else {
            buf[k++] = v[i++];
        }
    }
    while (i < mid) buf[k++] = v[i++];
    while (j < hi) buf[k++] = v[j++];
    std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
              v.begin() + static_cast<std::ptrdiff_t>(lo));
    return swaps;
}

}  // namespace detail

/// Kendall tau-b in O(n log n) (Knight's algorithm).
inline double kendall_tau(std::span<const double> x, std::span<const double> y) {
    detail::check_pair_input(x, y, "kendall_tau");
    const std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
    });

    std::uint64_t tie_x = 0;
    std::uint64_t tie_xy = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && x[idx[j]] == x[idx[i]]) ++j;
        tie_x += detail::tied_pairs(j - i);
        for (std::size_t a = i; a < j;) {
            std::size_t b = a;
            while (b < j && y[idx[b]] == y[idx[a]]) ++b;
            tie_xy += detail::tied_pairs(b - a);
            a = b;
        }
        i = j;
    }

    std::vector<double> ys(n);
    for (std::size_t i = 0; i < n; ++i) ys[i] = y[idx[i]];
    std::vector<double> buf(n);
    const std::uint64_t swaps = detail::count_swaps(ys, buf, 0, n);
    std::uint64_t tie_y = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && ys[j] == ys[i]) ++j;
        tie_y += detail::tied_pairs(j - i);
        i = j;
    }

    const std::uint64_t total = detail::tied_pairs(n);
    const double nx = static_cast<double>(total - tie_x);
    const double ny = static_cast<double>(total - tie_y);
    if (nx == 0.0 || ny == 0.0) throw DataError("kendall_tau: all values tied");
    // concordant - discordant = total - tie_x - tie_y + tie_xy - 2 * swaps
    const double num = static_cast<double>(total) - static_cast<double>(tie_x) - static_cast<double>(tie_y) +
                       static_cast<double>(tie_xy) - 2.0 * static_cast<double>(swaps);
    return num / std::sqrt(nx * ny);
}

struct CorrelationMatrix {
    std::vector<std::string> names;
    std::vector<std::vector<double>> values;
    std::size_t pairs = 0;
};

/// Pairwise Spearman between score vectors over the (query, document) pairs
/// common to every input run.
inline CorrelationMatrix operation_correlation(const std::map<std::string, Rankings>& scores) {
    if (scores.size() < 2) throw DataError("operation_correlation needs at least two score sets");
    std::map<std::pair<std::string, std::string>, std::vector<double>> by_pair;
    for (const auto& [name, run] : scores) {
        for (const auto& [qid, docs] : run) {
            for (const auto& d : docs) by_pair[{qid, d.doc_id}].push_back(d.score);
        }
    }
    CorrelationMatrix out;
    std::vector<std::vector<double>> columns(scores.size());
    for (const auto& [key, vals] : by_pair) {
        if (vals.size() != scores.size()) continue;
        for (std::size_t i = 0; i < vals.size(); ++i) columns[i].push_back(vals[i]);
    }
    out.pairs = columns[0].size();
    for (const auto& [name, run] : scores) out.names.push_back(name);
    out.values.assign(scores.size(), std::vector<double>(scores.size(), 1.0));
    for (std::size_t i = 0; i < columns.size(); ++i) {
        for (std::size_t j = i + 1; j < columns.size(); ++j) {
            out.values[i][j] = out.values[j][i] = spearman(columns[i], columns[j]);
        }
    }
    return out;
}

inline std::string correlation_csv(const CorrelationMatrix& m) {
    std::string out = "op";
    for (const auto& n : m.names) out += "," + n;
    out += "\n";
    for (std::size_t i = 0; i < m.names.size(); ++i) {
        out += m.names[i];
        for (double v : m.values[i]) out += "," + format_score(v);
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Noise sensitivity

struct NoiseReport {
    double sigma = 0.0;
    double angular_deviation_deg = 0.0;
    double amplification_ratio = 0.0;
    double kendall_tau = 1.0;
    std::size_t trials = 0;
    std::size_t skipped = 0;
};

inline const std::vector<double> kDefaultNoiseSigmas{0.001, 0.005, 0.01, 0.05, 0.1};

/// Random instance used by the noise study: one query and a pool of
/// candidates, all entries standard normal.
struct NoiseInstanceSpec {
    std::size_t candidates = 100;
    std::size_t query_tokens = 4;
    std::size_t doc_tokens = 20;
    std::size_t query_entities = 2;
    std::size_t doc_entities = 6;
    std::size_t d_t = 16;
    std::size_t d_e = 8;
};

/// Angle between two vectors in degrees, exactly 0 for identical inputs.
inline double angle_degrees(std::span<const double> a, std::span<const double> b) {
    const double na = norm(a);
    const double nb = norm(b);
    double diff = 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i] / na;
        const double y = b[i] / nb;
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    return 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum)) * 180.0 / std::numbers::pi;
}

namespace detail {

inline Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.values()) v = rng.normal();
    return m;
}

inline TextRecord gaussian_record(Rng& rng, std::string id, std::size_t l, std::size_t d_t, std::size_t n,
                                  std::size_t d_e) {
    TextRecord r;
    r.id = std::move(id);
    r.tokens.values = gaussian(rng, l, d_t);
    r.entities.values = gaussian(rng, n, d_e);
    for (std::size_t i = 0; i < n; ++i) r.entities.ids.push_back("E" + std::to_string(i));
    return r;
}

// Adds sigma * z to every embedding value, where z is drawn once per record
// and trial so every sigma sees the same noise direction.
inline TextRecord perturbed(const TextRecord& r, const TextRecord& z, double sigma) {
    TextRecord out = r;
    auto tv = out.tokens.values.values();
    auto zt = z.tokens.values.values();
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] += sigma * zt[i];
    auto ev = out.entities.values.values();
    auto ze = z.entities.values.values();
    for (std::size_t i = 0; i < ev.size(); ++i) ev[i] += sigma * ze[i];
    return out;
}

inline double squared_values(const TextRecord& r) {
    return squared_norm(r.tokens.values.values()) + squared_norm(r.entities.values.values());
}

// Pooled feature of one op over both channels, unscaled.
inline Vector op_feature(const TextRecord& q, const TextRecord& d, Op op) {
    Vector out;
    for (auto [qm, dm] : {std::pair{&q.tokens.values, &d.tokens.values}, std::pair{&q.entities.values, &d.entities.values}}) {
        if (qm->rows() == 0 || dm->rows() == 0) continue;
        auto pooled = mean_pool(interact(*qm, attend(*qm, *dm).attended, op));
        out.insert(out.end(), pooled.begin(), pooled.end());
    }
    return out;
}

}  // namespace detail

inline AblationConfig single_op_config(Op op) {
    AblationConfig cfg;
    cfg.multiply = op == Op::multiply;
    cfg.add = op == Op::add;
    cfg.subtract = op == Op::subtract;
    return cfg;
}

/// Perturbs a random instance with Gaussian noise at each sigma and reports
/// mean angular deviation and amplification of the op's pooled feature, and
/// Kendall tau between clean and noisy candidate rankings under `model`
/// (a seeded random single-op model when null). Trials share instances and
/// noise directions across sigmas.
inline std::vector<NoiseReport> noise_sensitivity(Op op, const std::vector<double>& sigmas, std::size_t trials,
                                                  std::uint64_t seed, const NoiseInstanceSpec& spec = {},
                                                  const BilinearModel* model = nullptr, std::size_t threads = 1) {
    for (double s : sigmas) {
        if (!(s >= 0.0) || !std::isfinite(s)) throw DataError("noise sigma must be finite and >= 0");
    }
    if (trials == 0) throw DataError("noise study needs at least one trial");
    if (spec.candidates < 2) throw DataError("noise study needs at least two candidates");
    const auto fallback = BilinearModel::initialized(spec.d_t, spec.d_e, single_op_config(op), mix_seed(seed, 0x5eed));
    const BilinearModel& scorer = model ? *model : fallback;
    if (scorer.d_t() != spec.d_t || scorer.d_e() != spec.d_e) throw DataError("noise model dimensions differ from instance");

    struct Trial {
        std::vector<double> angle, amp, tau;  // per sigma
        std::vector<bool> skipped;
    };
    std::vector<Trial> results(trials);
    parallel_for(trials, threads, [&](std::size_t t) {
        Rng rng(mix_seed(seed, t));
        const auto q = detail::gaussian_record(rng, "q", spec.query_tokens, spec.d_t, spec.query_entities, spec.d_e);
        const auto zq = detail::gaussian_record(rng, "q", spec.query_tokens, spec.d_t, spec.query_entities, spec.d_e);
        std::vector<TextRecord> docs;
        std::vector<TextRecord> zdocs;
        std::vector<double> s(spec.candidates);
        for (std::size_t i = 0; i < spec.candidates; ++i) {
            const auto id = "d" + std::to_string(i);
            docs.push_back(detail::gaussian_record(rng, id, spec.doc_tokens, spec.d_t, spec.doc_entities, spec.d_e));
            zdocs.push_back(detail::gaussian_record(rng, id, spec.doc_tokens, spec.d_t, spec.doc_entities, spec.d_e));
            s[i] = rng.uniform(0.5, 1.5);
        }
        std::vector<double> clean_scores(spec.candidates);
        std::vector<Vector> clean_features(spec.candidates);
        for (std::size_t i = 0; i < spec.candidates; ++i) {
            clean_scores[i] = forward(q, docs[i], s[i], scorer).raw;
            clean_features[i] = detail::op_feature(q, docs[i], op);
        }
        auto& out = results[t];
        for (double sigma : sigmas) {
            const auto nq = detail::perturbed(q, zq, sigma);
            const double q_noise = sigma * sigma * detail::squared_values(zq);
            double angle = 0.0;
            double amp = 0.0;
            bool skip = false;
            std::vector<double> noisy_scores(spec.candidates);
            for (std::size_t i = 0; i < spec.candidates; ++i) {
                const auto nd = detail::perturbed(docs[i], zdocs[i], sigma);
                noisy_scores[i] = forward(nq, nd, s[i], scorer).raw;
                const auto noisy = detail::op_feature(nq, nd, op);
                const auto& clean = clean_features[i];
                if (norm(clean) == 0.0 || norm(noisy) == 0.0) {
                    skip = true;
                    continue;
                }
                angle += angle_degrees(clean, noisy);
                double delta = 0.0;
                for (std::size_t k = 0; k < clean.size(); ++k) delta += (noisy[k] - clean[k]) * (noisy[k] - clean[k]);
                const double injected = std::sqrt(q_noise + sigma * sigma * detail::squared_values(zdocs[i]));
                amp += injected > 0.0 ? std::sqrt(delta) / injected : 0.0;
            }
            const double n = static_cast<double>(spec.candidates);
            out.skipped.push_back(skip);
            out.angle.push_back(angle / n);
            out.amp.push_back(amp / n);
            out.tau.push_back(kendall_tau(clean_scores, noisy_scores));
        }
    });

    std::vector<NoiseReport> reports;
    for (std::size_t k = 0; k < sigmas.size(); ++k) {
        NoiseReport r;
        r.sigma = sigmas[k];
        double angle = 0.0;
        double amp = 0.0;
        double tau = 0.0;
        for (const auto& tr : results) {
            if (tr.skipped[k]) {
                ++r.skipped;
                continue;
            }
            ++r.trials;
            angle += tr.angle[k];
            amp += tr.amp[k];
            tau += tr.tau[k];
        }
        if (r.trials > 0) {
            const double n = static_cast<double>(r.trials);
            r.angular_deviation_deg = angle / n;
            r.amplification_ratio = amp / n;
            r.kendall_tau = tau / n;
        }
        reports.push_back(r);
    }
    return reports;
}

inline std::string noise_csv(const std::map<std::string, std::vector<NoiseReport>>& by_op) {
    std::string out = "op,sigma,angular_deviation_deg,amplification_ratio,kendall_tau,trials,skipped\n";
    for (const auto& [op, reports] : by_op) {
        for (const auto& r : reports) {
            out += op + "," + format_score(r.sigma) + "," + format_score(r.angular_deviation_deg) + "," +
                   format_score(r.amplification_ratio) + "," + format_score(r.kendall_tau) + "," +
                   std::to_string(r.trials) + "," + std::to_string(r.skipped) + "\n";
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Clustering quality

struct ClusterReport {
    double dbi = 0.0;
    double silhouette = 0.0;
    std::optional<double> calinski_harabasz;  // undefined when n == k or within-cluster dispersion is 0
    std::size_t points = 0;
    std::size_t clusters = 0;
};

inline ClusterReport clustering_metrics(const std::vector<Vector>& points, const std::vector<std::string>& labels) {
    if (points.size() != labels.size()) throw DataError("clustering: points and labels differ in length");
    if (points.size() < 2) throw DataError("clustering: need at least 2 points");
    const std::size_t dim = points[0].size();
    for (const auto& p : points) {
        if (p.size() != dim) throw DataError("clustering: points differ in dimension");
        if (!all_finite(p)) throw DataError("clustering: non-finite coordinate");
    }
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
    const std::size_t k = members.size();
    if (k < 2) throw DataError("clustering: need at least 2 clusters");

    auto dist = [&](const Vector& a, const Vector& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < dim; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(s);
    };

    std::vector<Vector> centroids;
    std::vector<double> scatter;
    std::vector<std::size_t> sizes;
    Vector grand(dim, 0.0);
    for (const auto& [label, idx] : members) {
        Vector c(dim, 0.0);
        for (std::size_t i : idx) {
            for (std::size_t j = 0; j < dim; ++j) c[j] += points[i][j];
        }
        for (double& v : c) v /= static_cast<double>(idx.size());
        double s = 0.0;
        for (std::size_t i : idx) s += dist(points[i], c);
        centroids.push_back(c);
        scatter.push_back(s / static_cast<double>(idx.size()));
        sizes.push_back(idx.size());
    }
    for (const auto& p : points) {
        for (std::size_t j = 0; j < dim; ++j) grand[j] += p[j];
    }
    for (double& v : grand) v /= static_cast<double>(points.size());

    ClusterReport out;
    out.points = points.size();
    out.clusters = k;

    double dbi = 0.0;
    for (std::size_t a = 0; a < k; ++a) {
        double worst = 0.0;
        for (std::size_t b = 0; b < k; ++b) {
            if (a == b) continue;
            const double sep = dist(centroids[a], centroids[b]);
            if (sep == 0.0) throw DataError("clustering: two clusters share a centroid");
            worst = std::max(worst, (scatter[a] + scatter[b]) / sep);
        }
        dbi += worst;
    }
    out.dbi = dbi / static_cast<double>(k);

    std::vector<std::size_t> cluster_of(points.size());
    {
        std::size_t c = 0;
        for (const auto& [label, idx] : members) {
            for (std::size_t i : idx) cluster_of[i] = c;
            ++c;
        }
    }
    double sil = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        std::vector<double> total(k, 0.0);
        for (std::size_t j = 0; j < points.size(); ++j) {
            if (j != i) total[cluster_of[j]] += dist(points[i], points[j]);
        }
        const std::size_t own = cluster_of[i];
        if (sizes[own] == 1) continue;
        const double a = total[own] / static_cast<double>(sizes[own] - 1);
        double b = INFINITY;
        for (std::size_t c = 0; c < k; ++c) {
            if (c != own) b = std::min(b, total[c] / static_cast<double>(sizes[c]));
        }
        const double m = std::max(a, b);
        if (m > 0.0) sil += (b - a) / m;
    }
    out.silhouette = sil / static_cast<double>(points.size());

    double between = 0.0;
    double within = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        const double d = dist(centroids[c], grand);
        between += static_cast<double>(sizes[c]) * d * d;
    }
    for (std::size_t i = 0; i < points.size(); ++i) {
        const double d = dist(points[i], centroids[cluster_of[i]]);
        within += d * d;
    }
    if (points.size() > k && within > 0.0) {
        out.calinski_harabasz = (between / static_cast<double>(k - 1)) / (within / static_cast<double>(points.size() - k));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding dumps

enum class DumpMode { query_specific, static_pool };

inline const char* to_string(DumpMode m) { return m == DumpMode::query_specific ? "query_specific" : "static_pool"; }

struct EmbeddingPoint {
    std::string id;  // "query/doc"
    std::string label;
    Vector vec;
};

/// One point per candidate of each query: the interaction features h the
/// model scores (query_specific) or the document's mean token embedding
/// (static_pool). Labels are binary relevance.
inline std::vector<EmbeddingPoint> embedding_dump(const Dataset& data, const BilinearModel& model, DumpMode mode,
                                                  const std::vector<std::string>& queries = {},
                                                  std::size_t threads = 1) {
    std::vector<const Candidate*> jobs;
    auto add_query = [&](const std::string& qid) {
        auto it = data.run.find(qid);
        if (it == data.run.end()) throw DataError("query '" + qid + "' is not in the run");
        for (const auto& c : it->second) jobs.push_back(&c);
    };
    if (queries.empty()) {
        for (const auto& [qid, cands] : data.run) add_query(qid);
    } else {
        for (const auto& qid : queries) add_query(qid);
    }
    std::vector<EmbeddingPoint> out(jobs.size());
    parallel_for(jobs.size(), threads, [&](std::size_t i) {
        const auto& c = *jobs[i];
        const auto& d = find_record(data.corpus, c.doc_id, "document");
        auto& p = out[i];
        p.id = c.query_id + "/" + c.doc_id;
        int grade = 0;
        if (auto jt = data.qrels.find(c.query_id); jt != data.qrels.end()) {
            if (auto g = jt->second.find(c.doc_id); g != jt->second.end()) grade = g->second;
        }
        p.label = grade > 0 ? "1" : "0";
        if (mode == DumpMode::query_specific) {
            const auto& q = find_record(data.queries, c.query_id, "query");
            p.vec = build_features(q, d, c.score, model).concatenated();
        } else {
            p.vec = mean_pool(d.tokens.values);
        }
    });
    return out;
}

inline std::string embedding_ndjson(const std::vector<EmbeddingPoint>& points) {
    std::string out;
    for (const auto& p : points) {
        nlohmann::ordered_json j;
        j["id"] = p.id;
        j["label"] = p.label;
        j["vec"] = p.vec;
        out += j.dump() + "\n";
    }
    return out;
}

inline ClusterReport clustering_metrics(const std::vector<EmbeddingPoint>& points) {
    std::vector<Vector> vecs;
    std::vector<std::string> labels;
    for (const auto& p : points) {
        vecs.push_back(p.vec);
        labels.push_back(p.label);
    }
    return clustering_metrics(vecs, labels);
}

// ---------------------------------------------------------------------------
// Ablation suite

struct AblationVariant {
    std::string name;
    AblationConfig config;
};

/// Interaction-layout variants followed by the architecture variants. The
/// default model appears as "No-Subtract".
inline std::vector<AblationVariant> ablation_variants(const AblationConfig& base = {}) {
    auto with_ops = [&](bool mul, bool add, bool sub) {
        AblationConfig c = base;
        c.multiply = mul;
        c.add = add;
        c.subtract = sub;
        return c;
    };
    std::vector<AblationVariant> out{
        {"No-Subtract", with_ops(true, true, false)},   {"No-Add", with_ops(true, false, true)},
        {"No-Multiply", with_ops(false, true, true)},   {"Only-Add", with_ops(false, true, false)},
        {"Only-Subtract", with_ops(false, false, true)}, {"Only-Multiply", with_ops(true, false, false)},
        {"No-Interactions", with_ops(false, false, false)}, {"All-Interactions", with_ops(true, true, true)},
    };
    AblationConfig linear = with_ops(true, true, false);
    linear.head = ScoringHead::linear;
    out.push_back({"Linear-Head", linear});
    AblationConfig text_only = with_ops(true, true, false);
    text_only.use_entity = false;
    out.push_back({"No-Entities", text_only});
    AblationConfig unscaled = with_ops(true, true, false);
    unscaled.use_score_scaling = false;
    out.push_back({"No-Score-Scaling", unscaled});
    return out;
}

struct AblationResult {
    std::string name;
    AblationConfig config;
    MetricReport report;
    Rankings run;
};

/// Full cross-validation per variant with otherwise identical settings.
inline std::vector<AblationResult> ablation_suite(const Dataset& data, const TrainConfig& base,
                                                  const std::vector<AblationVariant>& variants,
                                                  std::size_t metric_depth = kDefaultMetricDepth) {
    std::vector<AblationResult> out;
    for (const auto& v : variants) {
        TrainConfig cfg = base;
        cfg.ablation = v.config;
        auto cv = cross_validate(data, cfg);
        auto report = evaluate(rankings_to_run(cv.run), data.qrels, metric_depth);
        out.push_back({v.name, v.config, std::move(report), std::move(cv.run)});
    }
    return out;
}

inline std::vector<AblationResult> ablation_suite(const Dataset& data, const TrainConfig& base) {
    return ablation_suite(data, base, ablation_variants(base.ablation));
}

}  // namespace qder
