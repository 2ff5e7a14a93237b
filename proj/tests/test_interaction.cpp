#define QDER_COUNT_CHANNEL_READS
#include "qder/interaction.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "oracles.hpp"

using namespace qder;

namespace {

void expect_matrix_near(const Matrix& got, const oracle::Grid& want, double tol) {
    ASSERT_EQ(got.rows(), want.size());
    for (std::size_t r = 0; r < got.rows(); ++r) {
        ASSERT_EQ(got.cols(), want[r].size());
        for (std::size_t c = 0; c < got.cols(); ++c) EXPECT_NEAR(got(r, c), want[r][c], tol) << r << "," << c;
    }
}

// l_q=3, l_d=5, d_t=4, n_q=2, n_d=3, d_e=2
struct Toy {
    TextRecord query;
    TextRecord doc;
    double s;
};

Toy toy_instance(std::uint64_t seed) {
    Rng rng(seed);
    Toy t;
    t.query = fixture::random_record(rng, "Q", 3, 4, 2, 2);
    t.doc = fixture::random_record(rng, "D", 5, 4, 3, 2);
    t.s = rng.uniform(0.5, 2.0);
    return t;
}

/// Central differences of the BCE loss over every parameter. The loss is
/// recomputed through forward() with the perturbed model.
Vector numeric_gradient(const TextRecord& q, const TextRecord& d, double s, int label, BilinearModel model,
                        double eps = 1e-5) {
    Vector out(model.parameters().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double orig = model.parameters()[i];
        model.parameters()[i] = orig + eps;
        const double up = bce_with_logit(forward(q, d, s, model).raw, label);
        model.parameters()[i] = orig - eps;
        const double down = bce_with_logit(forward(q, d, s, model).raw, label);
        model.parameters()[i] = orig;
        out[i] = (up - down) / (2 * eps);
    }
    return out;
}

double max_relative_error(const Vector& a, const Vector& b, double floor) {
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

}  // namespace

TEST(Attend, SingleDocumentRowGetsAllWeight) {
    Matrix q{{1, 2}, {-3, 0.5}};
    Matrix d{{4, -1}};
    auto res = attend(q, d);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(res.weights(i, 0), 1.0);
        EXPECT_EQ(res.attended(i, 0), 4.0);
        EXPECT_EQ(res.attended(i, 1), -1.0);
    }
}

TEST(Attend, ZeroQueryRowIsUniform) {
    Matrix q{{0, 0}};
    Matrix d{{1, 2}, {3, 4}, {5, 9}};
    auto res = attend(q, d);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(res.weights(0, j), 1.0 / 3.0);
    EXPECT_NEAR(res.attended(0, 0), 3.0, 1e-15);
    EXPECT_NEAR(res.attended(0, 1), 5.0, 1e-15);
}

TEST(Attend, WorkedExampleMatchesOracle) {
    Matrix q{{1, 0}, {0, 1}};
    Matrix d{{2, 0}, {0, 2}, {1, 1}};
    auto res = attend(q, d);
    auto [w, att] = oracle::attention(oracle::to_grid(q), oracle::to_grid(d));
    expect_matrix_near(res.weights, w, 1e-9);
    expect_matrix_near(res.attended, att, 1e-9);
    // Frozen from a 30-digit evaluation of the same expressions.
    EXPECT_NEAR(res.weights(0, 0), 0.66524095577482189, 1e-9);
    EXPECT_NEAR(res.weights(0, 1), 0.090030573170380458, 1e-9);
    EXPECT_NEAR(res.weights(0, 2), 0.24472847105479765, 1e-9);
    EXPECT_NEAR(res.attended(0, 0), 1.5752103826044414, 1e-9);
    EXPECT_NEAR(res.attended(0, 1), 0.42478961739555857, 1e-9);
    EXPECT_NEAR(res.attended(1, 0), 0.42478961739555857, 1e-9);
    EXPECT_NEAR(res.attended(1, 1), 1.5752103826044414, 1e-9);
}

TEST(Attend, EmptyInputsAreErrors) {
    EXPECT_THROW(attend(Matrix(0, 2), Matrix(1, 2)), DataError);
    EXPECT_THROW(attend(Matrix(1, 2), Matrix(0, 2)), DataError);
    EXPECT_THROW(attend(Matrix(1, 2), Matrix(1, 3)), DataError);
}

TEST(Attend, RowsStochasticUnderLargeLogits) {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const double scale = trial % 2 ? 40.0 : 1.0;  // logits up to ~1e3 at scale 40
        auto q = fixture::random_matrix(rng, 1 + rng.below(4), 3, scale);
        auto d = fixture::random_matrix(rng, 1 + rng.below(6), 3, scale);
        auto res = attend(q, d);
        for (std::size_t i = 0; i < res.weights.rows(); ++i) {
            auto row = res.weights.row(i);
            EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-6);
            for (double w : row) {
                EXPECT_GE(w, 0.0);
                EXPECT_LE(w, 1.0);
            }
        }
    }
}

TEST(Interact, Examples) {
    Matrix q{{1, 2}};
    EXPECT_EQ(interact(q, Matrix{{3, 4}}, Op::multiply), (Matrix{{3, 8}}));
    EXPECT_EQ(interact(q, Matrix{{0, 0}}, Op::add), (Matrix{{1, 2}}));
    EXPECT_EQ(interact(q, Matrix{{3, 4}}, Op::subtract), (Matrix{{-2, -2}}));
    EXPECT_THROW(interact(q, Matrix{{1, 2, 3}}, Op::add), DataError);
}

TEST(MeanPool, Examples) {
    EXPECT_EQ(mean_pool(Matrix{{1, 3}, {3, 5}}), (Vector{2, 4}));
    EXPECT_EQ(mean_pool(Matrix{{7, 7}}), (Vector{7, 7}));
    EXPECT_THROW(mean_pool(Matrix(0, 2)), DataError);

    Rng rng(3);
    auto m = fixture::random_matrix(rng, 3, 2);
    auto got = mean_pool(m);
    for (std::size_t c = 0; c < 2; ++c) {
        const double naive = (m(0, c) + m(1, c) + m(2, c)) / 3.0;
        EXPECT_NEAR(got[c], naive, 1e-12);
    }
}

TEST(IntegrateRelevance, Examples) {
    Vector h{1, -1};
    EXPECT_EQ(integrate_relevance(h, 0.0), (Vector{0, -0.0}));
    EXPECT_EQ(integrate_relevance(h, 1.0), h);
    EXPECT_EQ(integrate_relevance(h, 2.0), (Vector{2, -2}));
}

TEST(BuildFeatures, EmptyEntitySetYieldsZeroBlocks) {
    Rng rng(11);
    auto q = fixture::random_record(rng, "Q", 2, 3, 2, 2);
    auto d = fixture::random_record(rng, "D", 4, 3, 0, 2);
    auto f = build_features(q, d, 1.5, AblationConfig{});
    ASSERT_EQ(f.blocks.size(), 4u);
    EXPECT_EQ(f.find(Channel::entity, Component::multiply)->values, (Vector{0, 0}));
    EXPECT_EQ(f.find(Channel::entity, Component::add)->values, (Vector{0, 0}));

    AblationConfig text_only;
    text_only.use_entity = false;
    auto t = build_features(q, d, 1.5, text_only);
    EXPECT_EQ(t.find(Channel::text, Component::multiply)->values, f.find(Channel::text, Component::multiply)->values);
    EXPECT_EQ(t.find(Channel::text, Component::add)->values, f.find(Channel::text, Component::add)->values);
}

TEST(BuildFeatures, ScalingMultipliesEveryComponent) {
    Rng rng(12);
    auto q = fixture::random_record(rng, "Q", 2, 3, 2, 2);
    auto d = fixture::random_record(rng, "D", 4, 3, 3, 2);
    AblationConfig unscaled;
    unscaled.use_score_scaling = false;
    auto a = build_features(q, d, 3.0, unscaled).concatenated();
    auto b = build_features(q, d, 3.0, AblationConfig{}).concatenated();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(b[i], 3.0 * a[i]);
}

TEST(BuildFeatures, ToyPairMatchesComposedOracle) {
    Rng rng(13);
    auto q = fixture::random_record(rng, "Q", 2, 3, 1, 2);
    auto d = fixture::random_record(rng, "D", 2, 3, 1, 2);
    auto got = build_features(q, d, 0.7, AblationConfig{}).concatenated();
    auto want = oracle::features(q, d, 0.7);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(BuildFeatures, ConcatenationOrderAndDims) {
    Rng rng(14);
    auto q = fixture::random_record(rng, "Q", 2, 3, 2, 2);
    auto d = fixture::random_record(rng, "D", 3, 3, 2, 2);
    AblationConfig all;
    all.subtract = true;
    auto f = build_features(q, d, 1.0, all);
    ASSERT_EQ(f.blocks.size(), 6u);
    const Component order[] = {Component::multiply, Component::add, Component::subtract};
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(f.blocks[i].channel, i < 3 ? Channel::text : Channel::entity);
        EXPECT_EQ(f.blocks[i].component, order[i % 3]);
    }
    auto want = oracle::features(q, d, 1.0, "*+-");
    auto got = f.concatenated();
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);

    AblationConfig none;
    none.multiply = none.add = none.subtract = false;
    EXPECT_EQ(none.feature_dim(3, 2), 2u * (3 + 2));
    auto raw = build_features(q, d, 1.0, none).concatenated();
    auto want_raw = oracle::features(q, d, 1.0, "qa");
    ASSERT_EQ(raw.size(), 10u);
    for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(raw[i], want_raw[i], 1e-12);
}

TEST(BuildFeatures, DimensionMismatchIsError) {
    Rng rng(15);
    auto q = fixture::random_record(rng, "Q", 2, 3, 1, 2);
    auto d = fixture::random_record(rng, "D", 2, 4, 1, 2);
    BilinearModel model(3, 2);
    EXPECT_THROW(forward(q, d, 1.0, model), DataError);
}

TEST(BuildFeatures, DeactivatedChannelIsNeverRead) {
    Rng rng(16);
    auto q = fixture::random_record(rng, "Q", 2, 3, 1, 2);
    auto d = fixture::random_record(rng, "D", 2, 3, 1, 2);
    detail::channel_reads[0] = 0;
    detail::channel_reads[1] = 0;
    AblationConfig text_only;
    text_only.use_entity = false;
    (void)build_features(q, d, 1.0, text_only);
    EXPECT_EQ(detail::channel_reads[0].load(), 1u);
    EXPECT_EQ(detail::channel_reads[1].load(), 0u);
    AblationConfig entity_only;
    entity_only.use_text = false;
    (void)build_features(q, d, 1.0, entity_only);
    EXPECT_EQ(detail::channel_reads[0].load(), 1u);
    EXPECT_EQ(detail::channel_reads[1].load(), 1u);
}

TEST(AblationConfig, RejectsNoChannels) {
    AblationConfig c;
    c.use_text = c.use_entity = false;
    EXPECT_THROW(c.validate(), DataError);
    EXPECT_THROW(BilinearModel(3, 2, c), DataError);
}

TEST(BilinearScore, Examples) {
    EXPECT_EQ(bilinear_score(Vector{1, 2}, Matrix::identity(2)), 5.0);
    EXPECT_EQ(bilinear_score(Vector{3, -7}, Matrix(2, 2)), 0.0);
    EXPECT_EQ(bilinear_score(Vector{1, 1}, Matrix{{0, 1}, {0, 0}}), 1.0);
    EXPECT_THROW(bilinear_score(Vector{1, 1, 1}, Matrix::identity(2)), DataError);
}

TEST(Forward, ZeroMatrixGivesHalf) {
    auto t = toy_instance(1);
    BilinearModel model(4, 2);
    auto out = forward(t.query, t.doc, t.s, model);
    EXPECT_EQ(out.raw, 0.0);
    EXPECT_EQ(out.prob, 0.5);
}

TEST(Forward, ToyInstanceMatchesBruteForce) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto t = toy_instance(seed);
        auto model = BilinearModel::initialized(4, 2, {}, seed + 100);
        auto out = forward(t.query, t.doc, t.s, model);
        const double want = oracle::quadratic_form(oracle::features(t.query, t.doc, t.s), model.matrix());
        EXPECT_NEAR(out.raw, want, 1e-9);
        EXPECT_NEAR(out.prob, 1.0 / (1.0 + std::exp(-want)), 1e-12);
    }
}

TEST(Forward, LogisticIsStableAndMonotone) {
    EXPECT_EQ(logistic(1e4), 1.0);
    EXPECT_EQ(logistic(-1e4), 0.0);
    EXPECT_FALSE(std::isnan(logistic(-1e4)));
    double prev = -1;
    for (double x = -30; x <= 30; x += 0.25) {
        const double p = logistic(x);
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
        EXPECT_GE(p, prev);
        prev = p;
    }
    EXPECT_NEAR(bce_with_logit(1e4, 0), 1e4, 1e-9);
    EXPECT_NEAR(bce_with_logit(-1e4, 0), 0.0, 1e-12);
}

TEST(Forward, PermutationInvariance) {
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        auto t = toy_instance(500 + trial);
        auto model = BilinearModel::initialized(4, 2, {}, trial);
        const double base = forward(t.query, t.doc, t.s, model).raw;

        auto doc = t.doc;
        std::vector<std::size_t> perm(doc.tokens.rows());
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        Matrix shuffled(doc.tokens.rows(), doc.tokens.dim());
        for (std::size_t i = 0; i < perm.size(); ++i) {
            std::copy_n(t.doc.tokens.values.row(perm[i]).begin(), doc.tokens.dim(), shuffled.row(i).begin());
        }
        doc.tokens.values = shuffled;
        std::reverse(doc.entities.ids.begin(), doc.entities.ids.end());
        Matrix ent(doc.entities.rows(), doc.entities.dim());
        for (std::size_t i = 0; i < ent.rows(); ++i) {
            std::copy_n(t.doc.entities.values.row(ent.rows() - 1 - i).begin(), ent.cols(), ent.row(i).begin());
        }
        doc.entities.values = ent;
        EXPECT_NEAR(forward(t.query, doc, t.s, model).raw, base, 1e-9);

        auto query = t.query;
        Matrix qrev(query.tokens.rows(), query.tokens.dim());
        for (std::size_t i = 0; i < qrev.rows(); ++i) {
            std::copy_n(t.query.tokens.values.row(qrev.rows() - 1 - i).begin(), qrev.cols(), qrev.row(i).begin());
        }
        query.tokens.values = qrev;
        EXPECT_NEAR(forward(query, t.doc, t.s, model).raw, base, 1e-9);
    }
}

TEST(Forward, ScoreScalingLaw) {
    for (int trial = 0; trial < 30; ++trial) {
        auto t = toy_instance(900 + trial);
        auto model = BilinearModel::initialized(4, 2, {}, trial);
        const double base = forward(t.query, t.doc, t.s, model).raw;
        for (double c : {0.5, 2.0, 10.0}) {
            const double scaled = forward(t.query, t.doc, c * t.s, model).raw;
            EXPECT_NEAR(scaled, c * c * base, 1e-9 * std::abs(c * c * base));
        }
    }
}

TEST(Backward, ZeroWhenResidualIsZero) {
    auto t = toy_instance(2);
    auto model = BilinearModel::initialized(4, 2, {}, 2);
    // Saturated logit: prob rounds to exactly the label.
    auto m = model.matrix();
    for (double& v : m.values()) v = 1e6;
    model.set_matrix(m);
    const auto fwd = forward(t.query, t.doc, t.s, model);
    ASSERT_EQ(fwd.prob, 1.0);
    auto grad = backward(t.query, t.doc, t.s, 1, model);
    for (double g : grad) EXPECT_EQ(g, 0.0);
}

TEST(Backward, ZeroFeaturesGiveZeroGradient) {
    // Zero text embeddings and no entities: h = 0.
    auto q = fixture::record("Q", Matrix(2, 3), Matrix(0, 2));
    auto d = fixture::record("D", Matrix(3, 3), Matrix(0, 2));
    auto model = BilinearModel::initialized(3, 2, {}, 4);
    auto grad = backward(q, d, 1.0, 1, model);
    for (double g : grad) EXPECT_EQ(g, 0.0);
}

TEST(Backward, IsResidualTimesOuterProduct) {
    auto t = toy_instance(3);
    auto model = BilinearModel::initialized(4, 2, {}, 3);
    auto fwd = forward(t.query, t.doc, t.s, model);
    auto h = fwd.features.concatenated();
    auto grad = gradient_matrix(backward(t.query, t.doc, t.s, 0, model), model);
    for (std::size_t i = 0; i < h.size(); ++i)
        for (std::size_t j = 0; j < h.size(); ++j) EXPECT_DOUBLE_EQ(grad(i, j), fwd.prob * h[i] * h[j]);
}

TEST(Backward, MatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto t = toy_instance(seed + 40);
        auto model = BilinearModel::initialized(4, 2, {}, seed);
        for (int label : {0, 1}) {
            auto analytic = backward(t.query, t.doc, t.s, label, model);
            auto numeric = numeric_gradient(t.query, t.doc, t.s, label, model);
            EXPECT_LT(max_relative_error(analytic, numeric, 1e-6), 1e-4) << "seed " << seed;
        }
    }
}

TEST(Backward, LinearHeadMatchesFiniteDifferences) {
    AblationConfig cfg;
    cfg.head = ScoringHead::linear;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto t = toy_instance(seed + 60);
        auto model = BilinearModel::initialized(4, 2, cfg, seed);
        EXPECT_EQ(model.parameters().size(), model.d() + 1);
        auto analytic = backward(t.query, t.doc, t.s, 1, model);
        auto numeric = numeric_gradient(t.query, t.doc, t.s, 1, model);
        EXPECT_LT(max_relative_error(analytic, numeric, 1e-6), 1e-4);
    }
}

TEST(Backward, AdapterMatchesFiniteDifferences) {
    for (bool all_ops : {false, true}) {
        AblationConfig cfg;
        cfg.adapter = true;
        cfg.subtract = all_ops;
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            auto t = toy_instance(seed + 80);
            auto model = BilinearModel::initialized(4, 2, cfg, seed);
            // Move the adapter away from the identity.
            Rng rng(seed);
            for (std::size_t i = model.head_size(); i < model.parameters().size(); ++i) {
                model.parameters()[i] += rng.uniform(-0.3, 0.3);
            }
            for (int label : {0, 1}) {
                auto analytic = backward(t.query, t.doc, t.s, label, model);
                auto numeric = numeric_gradient(t.query, t.doc, t.s, label, model);
                EXPECT_LT(max_relative_error(analytic, numeric, 1e-6), 1e-4) << "seed " << seed;
            }
        }
    }
    AblationConfig raw;
    raw.adapter = true;
    raw.multiply = raw.add = false;
    auto t = toy_instance(7);
    auto model = BilinearModel::initialized(4, 2, raw, 7);
    auto analytic = backward(t.query, t.doc, t.s, 1, model);
    auto numeric = numeric_gradient(t.query, t.doc, t.s, 1, model);
    EXPECT_LT(max_relative_error(analytic, numeric, 1e-6), 1e-4);
}

TEST(Backward, AdapterStartsAsIdentity) {
    auto t = toy_instance(8);
    AblationConfig cfg;
    cfg.adapter = true;
    auto with = BilinearModel::initialized(4, 2, cfg, 1);
    auto without = BilinearModel::initialized(4, 2, {}, 1);
    EXPECT_EQ(forward(t.query, t.doc, t.s, with).raw, forward(t.query, t.doc, t.s, without).raw);
}

TEST(Checkpoint, RoundTripIsExact) {
    for (auto cfg : {AblationConfig{}, AblationConfig{.subtract = true, .use_entity = false},
                     AblationConfig{.head = ScoringHead::linear}, AblationConfig{.adapter = true}}) {
        auto model = BilinearModel::initialized(4, 2, cfg, 42);
        auto bytes = serialize_checkpoint(model);
        auto back = deserialize_checkpoint(bytes);
        EXPECT_EQ(back, model);
    }
    auto model = BilinearModel::initialized(4, 2, {}, 1);
    auto bytes = serialize_checkpoint(model);
    EXPECT_EQ(bytes.size(), 5 + 5 * 4 + model.d() * model.d() * 8);
    EXPECT_EQ(bytes.substr(0, 5), "QDERM");
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint(bad), DataError);
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 1)), DataError);
}

TEST(Model, InitializationRange) {
    auto model = BilinearModel::initialized(16, 8, {}, 5);
    EXPECT_EQ(model.d(), 48u);
    const double bound = 1.0 / std::sqrt(48.0);
    for (double v : model.parameters()) {
        EXPECT_LE(std::abs(v), bound);
    }
    EXPECT_EQ(BilinearModel::initialized(16, 8, {}, 5), model);
    EXPECT_NE(BilinearModel::initialized(16, 8, {}, 6), model);
}
