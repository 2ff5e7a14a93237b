#define QDER_COUNT_CHANNEL_READS
#include "qder/diagnostics.hpp"

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "qder/synthetic.hpp"

using namespace qder;

namespace {

std::vector<double> random_values(Rng& rng, std::size_t n, bool ties) {
    std::vector<double> v(n);
    for (double& x : v) x = ties ? static_cast<double>(rng.below(5)) : rng.normal();
    return v;
}

const SyntheticData& tiny_synthetic() {
    static const SyntheticData data = [] {
        SyntheticSpec spec;
        spec.queries = 6;
        spec.candidates = 15;
        spec.seed = 21;
        return make_planted_dataset(spec);
    }();
    return data;
}

}  // namespace

TEST(Spearman, KnownValues) {
    std::vector<double> x{1, 2, 3, 4};
    std::vector<double> rev{4, 3, 2, 1};
    std::vector<double> y{1, 3, 2, 4};
    EXPECT_DOUBLE_EQ(spearman(x, x), 1.0);
    EXPECT_DOUBLE_EQ(spearman(x, rev), -1.0);
    EXPECT_NEAR(spearman(x, y), 0.8, 1e-15);
    std::vector<double> flat{2, 2, 2, 2};
    EXPECT_THROW(spearman(x, flat), DataError);
    std::vector<double> one{1};
    EXPECT_THROW(spearman(one, one), DataError);
}

TEST(Spearman, MatchesOracle) {
    Rng rng(1);
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t n = 2 + rng.below(29);
        auto x = random_values(rng, n, inst % 2 == 0);
        auto y = random_values(rng, n, inst % 3 == 0);
        if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; }) ||
            std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; })) {
            continue;
        }
        EXPECT_NEAR(spearman(x, y), oracle::spearman(x, y), 1e-9);
    }
}

TEST(FractionalRanks, TiesShareAverage) {
    std::vector<double> x{10, 20, 20, 5};
    EXPECT_EQ(fractional_ranks(x), (std::vector<double>{2, 3.5, 3.5, 1}));
}

TEST(KendallTau, KnownValues) {
    std::vector<double> x{1, 2, 3};
    std::vector<double> y{1, 3, 2};
    EXPECT_DOUBLE_EQ(kendall_tau(x, x), 1.0);
    EXPECT_NEAR(kendall_tau(x, y), 1.0 / 3.0, 1e-15);
    std::vector<double> flat{1, 1, 1};
    EXPECT_THROW(kendall_tau(flat, x), DataError);
}

TEST(KendallTau, MatchesPairCountingOracle) {
    Rng rng(2);
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t n = 2 + rng.below(29);
        auto x = random_values(rng, n, inst % 2 == 0);
        auto y = random_values(rng, n, inst % 4 == 0);
        if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; }) ||
            std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; })) {
            continue;
        }
        EXPECT_NEAR(kendall_tau(x, y), oracle::kendall_tau_b(x, y), 1e-9) << inst;
    }
}

TEST(KendallTau, LargeInputMatchesOracle) {
    Rng rng(3);
    auto x = random_values(rng, 400, true);
    auto y = random_values(rng, 400, false);
    EXPECT_NEAR(kendall_tau(x, y), oracle::kendall_tau_b(x, y), 1e-12);
}

TEST(OperationCorrelation, StructureAndRecomputation) {
    const auto data = tiny_synthetic().dataset();
    std::vector<std::string> qids;
    for (const auto& [q, c] : data.run) qids.push_back(q);
    std::map<std::string, Rankings> scores;
    for (auto op : {Op::add, Op::multiply, Op::subtract}) {
        auto model = BilinearModel::initialized(16, 8, single_op_config(op), 99);
        scores[to_string(op)] = rerank(data, model, qids);
    }
    auto m = operation_correlation(scores);
    ASSERT_EQ(m.names.size(), 3u);
    EXPECT_EQ(m.pairs, 6u * 15u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(m.values[i][i], 1.0);
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m.values[i][j], m.values[j][i]);
    }
    // Recompute add vs multiply from the dumped score vectors.
    std::vector<double> a;
    std::vector<double> b;
    for (const auto& q : qids) {
        std::map<std::string, double> mul;
        for (const auto& d : scores["multiply"][q]) mul[d.doc_id] = d.score;
        for (const auto& d : scores["add"][q]) {
            a.push_back(d.score);
            b.push_back(mul.at(d.doc_id));
        }
    }
    EXPECT_NEAR(m.values[0][1], oracle::spearman(a, b), 1e-12);
    auto self = operation_correlation({{"x", scores["add"]}, {"y", scores["add"]}});
    EXPECT_DOUBLE_EQ(self.values[0][1], 1.0);
}

TEST(Noise, ZeroSigmaIsExact) {
    NoiseInstanceSpec spec;
    spec.candidates = 20;
    for (auto op : {Op::add, Op::multiply, Op::subtract}) {
        auto reports = noise_sensitivity(op, {0.0}, 5, 3, spec);
        ASSERT_EQ(reports.size(), 1u);
        EXPECT_EQ(reports[0].angular_deviation_deg, 0.0);
        EXPECT_EQ(reports[0].amplification_ratio, 0.0);
        EXPECT_EQ(reports[0].kendall_tau, 1.0);
        EXPECT_EQ(reports[0].trials, 5u);
    }
}

TEST(Noise, DeviationGrowsWithSigma) {
    NoiseInstanceSpec spec;
    spec.candidates = 30;
    for (auto op : {Op::add, Op::multiply, Op::subtract}) {
        auto reports = noise_sensitivity(op, kDefaultNoiseSigmas, 20, 4, spec);
        ASSERT_EQ(reports.size(), 5u);
        for (std::size_t i = 1; i < reports.size(); ++i) {
            EXPECT_GE(reports[i].angular_deviation_deg, reports[i - 1].angular_deviation_deg);
            EXPECT_LE(reports[i].kendall_tau, 1.0);
            EXPECT_GE(reports[i].kendall_tau, -1.0);
        }
        EXPECT_GT(reports[0].angular_deviation_deg, 0.0);
        EXPECT_GT(reports[0].amplification_ratio, 0.0);
    }
}

TEST(Noise, DefaultGridAndDeterminism) {
    EXPECT_EQ(kDefaultNoiseSigmas, (std::vector<double>{0.001, 0.005, 0.01, 0.05, 0.1}));
    NoiseInstanceSpec spec;
    spec.candidates = 10;
    auto a = noise_sensitivity(Op::add, {0.05}, 6, 8, spec, nullptr, 1);
    auto b = noise_sensitivity(Op::add, {0.05}, 6, 8, spec, nullptr, 3);
    EXPECT_EQ(a[0].angular_deviation_deg, b[0].angular_deviation_deg);
    EXPECT_EQ(a[0].kendall_tau, b[0].kendall_tau);
    EXPECT_THROW(noise_sensitivity(Op::add, {-0.1}, 1, 1, spec), DataError);
}

TEST(AngleDegrees, Basics) {
    Vector x{1, 0};
    Vector y{0, 2};
    Vector z{-3, 0};
    EXPECT_EQ(angle_degrees(x, x), 0.0);
    EXPECT_NEAR(angle_degrees(x, y), 90.0, 1e-12);
    EXPECT_NEAR(angle_degrees(x, z), 180.0, 1e-12);
}

TEST(Clustering, SingletonClusters) {
    auto r = clustering_metrics({{0.0, 0.0}, {1.0, 1.0}}, {"a", "b"});
    EXPECT_EQ(r.dbi, 0.0);
    EXPECT_EQ(r.silhouette, 0.0);
    EXPECT_FALSE(r.calinski_harabasz.has_value());
}

TEST(Clustering, TightFarClusters) {
    std::vector<Vector> pts{{0, 0}, {0, 0.1}, {10, 0}, {10, 0.1}};
    auto r = clustering_metrics(pts, {"a", "a", "b", "b"});
    // scatter 0.05 per cluster, centroid gap 10
    EXPECT_NEAR(r.dbi, 0.01, 1e-6);
    const double b = (10.0 + std::sqrt(100.0 + 0.01)) / 2.0;
    EXPECT_NEAR(r.silhouette, (b - 0.1) / b, 1e-6);
    EXPECT_GT(r.silhouette, 0.99);
    ASSERT_TRUE(r.calinski_harabasz.has_value());
    // between = 4 * 25, within = 4 * 0.05^2
    EXPECT_NEAR(*r.calinski_harabasz, 20000.0, 1e-6);
}

TEST(Clustering, SixPointFixtureMatchesPairwiseFormulas) {
    std::vector<Vector> pts{{0, 0}, {1, 0}, {0, 2}, {5, 5}, {6, 5}, {5, 7.5}};
    std::vector<std::string> labels{"x", "x", "x", "y", "y", "y"};
    auto r = clustering_metrics(pts, labels);
    auto sq = [](const Vector& a, const Vector& b) { return (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]); };
    // Dispersions from pairwise distances: W_c = sum_{i<j in c} d^2 / n_c.
    double total = 0.0;
    double within = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = i + 1; j < 6; ++j) {
            total += sq(pts[i], pts[j]);
            if (labels[i] == labels[j]) within += sq(pts[i], pts[j]) / 3.0;
        }
    }
    total /= 6.0;
    const double between = total - within;
    ASSERT_TRUE(r.calinski_harabasz.has_value());
    EXPECT_NEAR(*r.calinski_harabasz, (between / 1.0) / (within / 4.0), 1e-9);
    EXPECT_GT(r.silhouette, 0.0);
    EXPECT_LT(r.silhouette, 1.0);
    EXPECT_THROW(clustering_metrics(pts, std::vector<std::string>(6, "x")), DataError);
}

TEST(EmbeddingDump, StaticPoolOfOneTokenDoc) {
    Dataset data;
    data.queries["q"] = fixture::record("q", Matrix{{1.0, 0.0}}, Matrix(0, 1));
    data.corpus["d"] = fixture::record("d", Matrix{{0.25, -4.0}}, Matrix(0, 1));
    data.run["q"] = {{"q", "d", 2.0, 1}};
    data.qrels["q"]["d"] = 2;
    auto model = BilinearModel::initialized(2, 1, AblationConfig{}, 1);
    auto pts = embedding_dump(data, model, DumpMode::static_pool);
    ASSERT_EQ(pts.size(), 1u);
    EXPECT_EQ(pts[0].vec, (Vector{0.25, -4.0}));
    EXPECT_EQ(pts[0].label, "1");
    EXPECT_EQ(pts[0].id, "q/d");
    EXPECT_EQ(embedding_ndjson(pts), R"({"id":"q/d","label":"1","vec":[0.25,-4.0]})" "\n");
}

TEST(EmbeddingDump, QuerySpecificMatchesForward) {
    const auto data = tiny_synthetic().dataset();
    auto model = BilinearModel::initialized(16, 8, AblationConfig{}, 5);
    auto pts = embedding_dump(data, model, DumpMode::query_specific, {"Q0"});
    ASSERT_EQ(pts.size(), 15u);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const auto& c = data.run.at("Q0")[i];
        EXPECT_EQ(pts[i].vec.size(), model.d());
        auto fw = forward(data.queries.at("Q0"), data.corpus.at(c.doc_id), c.score, model);
        auto h = fw.features.concatenated();
        for (std::size_t k = 0; k < h.size(); ++k) EXPECT_NEAR(pts[i].vec[k], h[k], 1e-12);
        EXPECT_NEAR(model.score(pts[i].vec), fw.raw, 1e-12 * std::max(1.0, std::abs(fw.raw)));
    }
}

TEST(Ablation, VariantTable) {
    auto variants = ablation_variants();
    std::vector<std::string> names;
    for (const auto& v : variants) names.push_back(v.name);
    EXPECT_EQ(names, (std::vector<std::string>{"No-Subtract", "No-Add", "No-Multiply", "Only-Add", "Only-Subtract",
                                               "Only-Multiply", "No-Interactions", "All-Interactions", "Linear-Head",
                                               "No-Entities", "No-Score-Scaling"}));
    EXPECT_EQ(variants[0].config, AblationConfig{});
    EXPECT_EQ(variants[6].config.feature_dim(16, 8), 2u * (16 + 8));
    EXPECT_EQ(variants[7].config.op_count(), 3u);
}

TEST(Ablation, TextOnlyNeverReadsEntities) {
    const auto data = tiny_synthetic().dataset();
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.warmup_steps = 0;
    cfg.epochs = 1;
    cfg.folds = 3;
    auto variants = ablation_variants();
    detail::channel_reads[0] = 0;
    detail::channel_reads[1] = 0;
    ablation_suite(data, cfg, {variants[9]});
    EXPECT_GT(detail::channel_reads[0].load(), 0u);
    EXPECT_EQ(detail::channel_reads[1].load(), 0u);
}

TEST(Ablation, EveryVariantProducesAReport) {
    const auto data = tiny_synthetic().dataset();
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.warmup_steps = 0;
    cfg.epochs = 2;
    cfg.folds = 3;
    auto results = ablation_suite(data, cfg);
    ASSERT_EQ(results.size(), 11u);
    for (const auto& r : results) {
        EXPECT_EQ(r.report.per_query.size(), 6u) << r.name;
        EXPECT_GE(r.report.macro.ap, 0.0);
        EXPECT_LE(r.report.macro.ap, 1.0);
        EXPECT_EQ(r.run.size(), 6u);
    }
}
