#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qder/data_io.hpp"
#include "qder/error.hpp"
#include "qder/matrix.hpp"
#include "qder/random.hpp"

namespace qder {

enum class Op : std::uint8_t { multiply, add, subtract };

enum class Channel : std::uint8_t { text, entity };

/// What a pooled feature block was computed from. The three element-wise
/// operations are the interaction components; the two *_mean kinds are used
/// when every interaction is ablated away (pooled query and pooled attended
/// matrices side by side).
enum class Component : std::uint8_t { multiply, add, subtract, query_mean, attended_mean };

enum class ScoringHead : std::uint8_t { bilinear, linear };

inline const char* to_string(Op op) {
    switch (op) {
        case Op::multiply: return "multiply";
        case Op::add: return "add";
        case Op::subtract: return "subtract";
    }
    return "?";
}

inline const char* to_string(Channel c) { return c == Channel::text ? "text" : "entity"; }

inline const char* to_string(Component c) {
    switch (c) {
        case Component::multiply: return "multiply";
        case Component::add: return "add";
        case Component::subtract: return "subtract";
        case Component::query_mean: return "query_mean";
        case Component::attended_mean: return "attended_mean";
    }
    return "?";
}

/// Feature and architecture switches. The default is the full model: text and
/// entity channels, multiply and add interactions, score scaling, bilinear head.
struct AblationConfig {
    bool multiply = true;
    bool add = true;
    bool subtract = false;
    bool use_text = true;
    bool use_entity = true;
    bool use_score_scaling = true;
    ScoringHead head = ScoringHead::bilinear;
    // Extension, off by default: a trainable affine map per channel applied to
    // query and document embeddings before attention.
    bool adapter = false;

    [[nodiscard]] std::size_t op_count() const noexcept {
        return static_cast<std::size_t>(multiply) + add + subtract;
    }
    [[nodiscard]] bool has_interactions() const noexcept { return op_count() > 0; }

    /// Components per active channel, in concatenation order.
    [[nodiscard]] std::vector<Component> components() const {
        std::vector<Component> out;
        if (has_interactions()) {
            if (multiply) out.push_back(Component::multiply);
            if (add) out.push_back(Component::add);
            if (subtract) out.push_back(Component::subtract);
        } else {
            out = {Component::query_mean, Component::attended_mean};
        }
        return out;
    }

    [[nodiscard]] std::size_t feature_dim(std::size_t d_t, std::size_t d_e) const noexcept {
        const std::size_t per_channel = has_interactions() ? op_count() : 2;
        return per_channel * ((use_text ? d_t : 0) + (use_entity ? d_e : 0));
    }

    void validate() const {
        if (!use_text && !use_entity) throw DataError("ablation config disables both channels");
    }

    [[nodiscard]] std::uint32_t flags() const noexcept {
        std::uint32_t f = 0;
        f |= multiply ? 1u << 0 : 0u;
        f |= add ? 1u << 1 : 0u;
        f |= subtract ? 1u << 2 : 0u;
        f |= use_text ? 1u << 3 : 0u;
        f |= use_entity ? 1u << 4 : 0u;
        f |= use_score_scaling ? 1u << 5 : 0u;
        f |= head == ScoringHead::linear ? 1u << 6 : 0u;
        f |= adapter ? 1u << 7 : 0u;
        return f;
    }

    static AblationConfig from_flags(std::uint32_t f) {
        if (f >> 8) throw DataError("unknown model config flags " + std::to_string(f));
        AblationConfig c;
        c.multiply = f & (1u << 0);
        c.add = f & (1u << 1);
        c.subtract = f & (1u << 2);
        c.use_text = f & (1u << 3);
        c.use_entity = f & (1u << 4);
        c.use_score_scaling = f & (1u << 5);
        c.head = (f & (1u << 6)) ? ScoringHead::linear : ScoringHead::bilinear;
        c.adapter = f & (1u << 7);
        c.validate();
        return c;
    }

    bool operator==(const AblationConfig&) const = default;
};

struct AttentionResult {
    Matrix weights;   // query items x document items, rows sum to one
    Matrix attended;  // query items x dim
};

/// One pooled (and possibly score-scaled) feature block.
struct FeatureBlock {
    Channel channel;
    Component component;
    Vector values;
};

struct InteractionFeatures {
    std::vector<FeatureBlock> blocks;  // concatenation order
    double s = 1.0;
    bool scaled = false;

    [[nodiscard]] const FeatureBlock* find(Channel ch, Component comp) const noexcept {
        for (const auto& b : blocks) {
            if (b.channel == ch && b.component == comp) return &b;
        }
        return nullptr;
    }

    /// The feature vector h.
    [[nodiscard]] Vector concatenated() const {
        Vector h;
        for (const auto& b : blocks) h.insert(h.end(), b.values.begin(), b.values.end());
        return h;
    }
};

struct ScoreBreakdown {
    double raw = 0.0;
    double prob = 0.5;
    InteractionFeatures features;
};

#ifdef QDER_COUNT_CHANNEL_READS
namespace detail {
// Number of build_features calls that read each channel's embeddings.
inline std::array<std::atomic<std::size_t>, 2> channel_reads{};
}  // namespace detail
#endif

// ---------------------------------------------------------------------------
// Elementary operations

/// Row-wise softmax attention of query items over document items.
inline AttentionResult attend(const Matrix& q, const Matrix& d) {
    if (q.rows() == 0 || d.rows() == 0) throw DataError("attention over an empty matrix");
    if (q.cols() != d.cols()) {
        throw DataError("attention dimension mismatch: " + shape_string(q) + " vs " + shape_string(d));
    }
    AttentionResult out{Matrix(q.rows(), d.rows()), Matrix(q.rows(), q.cols())};
    for (std::size_t i = 0; i < q.rows(); ++i) {
        auto w = out.weights.row(i);
        double max_logit = -INFINITY;
        for (std::size_t j = 0; j < d.rows(); ++j) {
            w[j] = dot(q.row(i), d.row(j));
            max_logit = std::max(max_logit, w[j]);
        }
        double total = 0.0;
        for (double& x : w) {
            x = std::exp(x - max_logit);
            total += x;
        }
        auto att = out.attended.row(i);
        for (std::size_t j = 0; j < d.rows(); ++j) {
            w[j] /= total;
            auto drow = d.row(j);
            for (std::size_t c = 0; c < d.cols(); ++c) att[c] += w[j] * drow[c];
        }
    }
    return out;
}

inline Matrix interact(const Matrix& q, const Matrix& attended, Op op) {
    if (q.rows() != attended.rows() || q.cols() != attended.cols()) {
        throw DataError("interaction shape mismatch: " + shape_string(q) + " vs " + shape_string(attended));
    }
    Matrix out(q.rows(), q.cols());
    auto a = q.values();
    auto b = attended.values();
    auto o = out.values();
    switch (op) {
        case Op::multiply:
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
            break;
        case Op::add:
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
            break;
        case Op::subtract:
            for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
            break;
    }
    return out;
}

inline Vector mean_pool(const Matrix& m) { return column_means(m); }

inline Vector integrate_relevance(std::span<const double> h, double s) {
    Vector out(h.begin(), h.end());
    for (double& v : out) v *= s;
    return out;
}

inline double logistic(double raw) noexcept {
    if (raw >= 0.0) return 1.0 / (1.0 + std::exp(-raw));
    const double e = std::exp(raw);
    return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) noexcept { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Binary cross-entropy of a single logit.
inline double bce_with_logit(double raw, int label) noexcept {
    return label != 0 ? softplus(-raw) : softplus(raw);
}

inline double bilinear_score(std::span<const double> h, const Matrix& m) {
    if (m.rows() != h.size() || m.cols() != h.size()) {
        throw DataError("bilinear dimension mismatch: h has " + std::to_string(h.size()) + " entries, matrix is " +
                        shape_string(m));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (h[i] == 0.0) continue;
        total += h[i] * dot(m.row(i), h);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Model

/// Trainable scorer. All parameters live in one flat vector so that the
/// optimiser, checkpoints and gradient checks treat them uniformly:
///   bilinear head: d*d row-major interaction matrix
///   linear head:   d weights followed by a bias
///   adapter:       per active channel, a k*k matrix then a k-vector offset
class BilinearModel {
public:
    BilinearModel() = default;

    BilinearModel(std::size_t d_t, std::size_t d_e, AblationConfig cfg = {})
        : d_t_(d_t), d_e_(d_e), cfg_(cfg) {
        cfg_.validate();
        if ((cfg_.use_text && d_t_ == 0) || (cfg_.use_entity && d_e_ == 0)) {
            throw DataError("active channel with zero embedding dimension");
        }
        d_ = cfg_.feature_dim(d_t_, d_e_);
        std::size_t size = head_size();
        if (cfg_.adapter) {
            if (cfg_.use_text) {
                text_adapter_offset_ = size;
                size += d_t_ * d_t_ + d_t_;
            }
            if (cfg_.use_entity) {
                entity_adapter_offset_ = size;
                size += d_e_ * d_e_ + d_e_;
            }
        }
        params_.assign(size, 0.0);
        for (Channel ch : {Channel::text, Channel::entity}) {
            if (auto off = adapter_offset(ch)) {
                const std::size_t k = channel_dim(ch);
                for (std::size_t i = 0; i < k; ++i) params_[*off + i * k + i] = 1.0;
            }
        }
    }

    /// Head entries uniform in [-1/sqrt(d), 1/sqrt(d)]; adapters start at the
    /// identity; linear bias starts at zero.
    static BilinearModel initialized(std::size_t d_t, std::size_t d_e, AblationConfig cfg, std::uint64_t seed) {
        BilinearModel model(d_t, d_e, cfg);
        Rng rng(seed);
        const double bound = 1.0 / std::sqrt(static_cast<double>(model.d_));
        const std::size_t n = model.cfg_.head == ScoringHead::bilinear ? model.d_ * model.d_ : model.d_;
        for (std::size_t i = 0; i < n; ++i) model.params_[i] = rng.uniform(-bound, bound);
        return model;
    }

    [[nodiscard]] std::size_t d() const noexcept { return d_; }
    [[nodiscard]] std::size_t d_t() const noexcept { return d_t_; }
    [[nodiscard]] std::size_t d_e() const noexcept { return d_e_; }
    [[nodiscard]] const AblationConfig& config() const noexcept { return cfg_; }

    [[nodiscard]] std::size_t channel_dim(Channel ch) const noexcept { return ch == Channel::text ? d_t_ : d_e_; }

    [[nodiscard]] std::size_t head_size() const noexcept {
        return cfg_.head == ScoringHead::bilinear ? d_ * d_ : d_ + 1;
    }

    [[nodiscard]] std::optional<std::size_t> adapter_offset(Channel ch) const noexcept {
        return ch == Channel::text ? text_adapter_offset_ : entity_adapter_offset_;
    }

    [[nodiscard]] std::span<double> parameters() noexcept { return params_; }
    [[nodiscard]] std::span<const double> parameters() const noexcept { return params_; }

    /// Copy of the interaction matrix (bilinear head only).
    [[nodiscard]] Matrix matrix() const {
        require_bilinear();
        Matrix m(d_, d_);
        std::copy_n(params_.begin(), d_ * d_, m.values().begin());
        return m;
    }

    void set_matrix(const Matrix& m) {
        require_bilinear();
        if (m.rows() != d_ || m.cols() != d_) throw DataError("matrix must be " + std::to_string(d_) + " square");
        std::copy(m.values().begin(), m.values().end(), params_.begin());
    }

    [[nodiscard]] double matrix_entry(std::size_t i, std::size_t j) const noexcept { return params_[i * d_ + j]; }

    /// Score of a feature vector under the head.
    [[nodiscard]] double score(std::span<const double> h) const {
        if (h.size() != d_) {
            throw DataError("feature dimension " + std::to_string(h.size()) + " != model dimension " +
                            std::to_string(d_));
        }
        if (cfg_.head == ScoringHead::linear) return dot(std::span(params_).first(d_), h) + params_[d_];
        double total = 0.0;
        for (std::size_t i = 0; i < d_; ++i) {
            if (h[i] == 0.0) continue;
            total += h[i] * dot(std::span(params_).subspan(i * d_, d_), h);
        }
        return total;
    }

    /// d(score)/dh.
    [[nodiscard]] Vector score_gradient(std::span<const double> h) const {
        Vector g(d_, 0.0);
        if (cfg_.head == ScoringHead::linear) {
            std::copy_n(params_.begin(), d_, g.begin());
            return g;
        }
        for (std::size_t i = 0; i < d_; ++i) {
            const double* row = params_.data() + i * d_;
            g[i] += dot(std::span(row, d_), h);
            if (h[i] == 0.0) continue;
            for (std::size_t j = 0; j < d_; ++j) g[j] += h[i] * row[j];
        }
        return g;
    }

    bool operator==(const BilinearModel&) const = default;

private:
    void require_bilinear() const {
        if (cfg_.head != ScoringHead::bilinear) throw DataError("model does not have a bilinear head");
    }

    std::size_t d_t_ = 0;
    std::size_t d_e_ = 0;
    std::size_t d_ = 0;
    AblationConfig cfg_;
    std::optional<std::size_t> text_adapter_offset_;
    std::optional<std::size_t> entity_adapter_offset_;
    std::vector<double> params_;
};

inline double bilinear_score(std::span<const double> h, const BilinearModel& model) { return model.score(h); }

// ---------------------------------------------------------------------------
// Feature construction

namespace detail {

/// Forward intermediates of one channel, kept for the backward pass.
struct ChannelPass {
    Channel channel;
    bool empty = true;  // either side had no items: all blocks are zero
    Matrix query;       // after the adapter, if any
    Matrix doc;
    AttentionResult attention;
};

inline Matrix apply_adapter(const Matrix& x, std::span<const double> params, std::size_t k) {
    Matrix out(x.rows(), k);
    const auto bias = params.subspan(k * k, k);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto in = x.row(r);
        auto o = out.row(r);
        for (std::size_t a = 0; a < k; ++a) o[a] = dot(params.subspan(a * k, k), in) + bias[a];
    }
    return out;
}

inline const Matrix& channel_values(const TextRecord& rec, Channel ch) {
    return ch == Channel::text ? rec.tokens.values : rec.entities.values;
}

inline Vector pooled_component(const ChannelPass& pass, Component comp) {
    const Matrix& q = pass.query;
    const Matrix& att = pass.attention.attended;
    switch (comp) {
        case Component::multiply: return mean_pool(interact(q, att, Op::multiply));
        case Component::add: return mean_pool(interact(q, att, Op::add));
        case Component::subtract: return mean_pool(interact(q, att, Op::subtract));
        case Component::query_mean: return mean_pool(q);
        case Component::attended_mean: return mean_pool(att);
    }
    return {};
}

struct FeaturePass {
    InteractionFeatures features;
    std::vector<ChannelPass> channels;
};

inline FeaturePass run_features(const QueryRecord& query, const DocumentRecord& doc, double s,
                                const AblationConfig& cfg, std::size_t d_t, std::size_t d_e,
                                const BilinearModel* adapter_source) {
    cfg.validate();
    if (!std::isfinite(s)) throw DataError("external score is not finite");
    FeaturePass out;
    out.features.s = s;
    out.features.scaled = cfg.use_score_scaling;
    const auto components = cfg.components();

    for (Channel ch : {Channel::text, Channel::entity}) {
        const bool active = ch == Channel::text ? cfg.use_text : cfg.use_entity;
        if (!active) continue;
#ifdef QDER_COUNT_CHANNEL_READS
        channel_reads[static_cast<std::size_t>(ch)].fetch_add(1, std::memory_order_relaxed);
#endif
        const std::size_t k = ch == Channel::text ? d_t : d_e;
        const Matrix& q = channel_values(query, ch);
        const Matrix& d = channel_values(doc, ch);
        ChannelPass pass;
        pass.channel = ch;
        pass.empty = q.rows() == 0 || d.rows() == 0;
        if (!pass.empty) {
            if (q.cols() != k || d.cols() != k) {
                throw DataError(std::string(to_string(ch)) + " dimension mismatch for query '" + query.id +
                                "' / document '" + doc.id + "': expected " + std::to_string(k));
            }
            if (adapter_source && adapter_source->adapter_offset(ch)) {
                auto params = adapter_source->parameters().subspan(*adapter_source->adapter_offset(ch), k * k + k);
                pass.query = apply_adapter(q, params, k);
                pass.doc = apply_adapter(d, params, k);
            } else {
                pass.query = q;
                pass.doc = d;
            }
            pass.attention = attend(pass.query, pass.doc);
        }
        for (Component comp : components) {
            Vector v = pass.empty ? Vector(k, 0.0) : pooled_component(pass, comp);
            if (cfg.use_score_scaling) v = integrate_relevance(v, s);
            out.features.blocks.push_back({ch, comp, std::move(v)});
        }
        out.channels.push_back(std::move(pass));
    }
    return out;
}

}  // namespace detail

/// Pooled interaction features of one query-document pair, without adapter.
inline InteractionFeatures build_features(const QueryRecord& query, const DocumentRecord& doc, double s,
                                          const AblationConfig& cfg) {
    const std::size_t d_t = query.tokens.dim();
    std::size_t d_e = query.entities.dim();
    if (d_e == 0) d_e = doc.entities.dim();
    return detail::run_features(query, doc, s, cfg, d_t, d_e, nullptr).features;
}

/// Pooled features as seen by `model` (applies the adapter when enabled).
inline InteractionFeatures build_features(const QueryRecord& query, const DocumentRecord& doc, double s,
                                          const BilinearModel& model) {
    return detail::run_features(query, doc, s, model.config(), model.d_t(), model.d_e(), &model).features;
}

inline ScoreBreakdown forward(const QueryRecord& query, const DocumentRecord& doc, double s,
                              const BilinearModel& model) {
    ScoreBreakdown out;
    out.features = build_features(query, doc, s, model);
    out.raw = model.score(out.features.concatenated());
    out.prob = logistic(out.raw);
    return out;
}

/// Attention of one channel as used by the model (adapter applied). Returns
/// nothing for an empty channel.
inline std::optional<AttentionResult> channel_attention(const QueryRecord& query, const DocumentRecord& doc,
                                                        const BilinearModel& model, Channel ch) {
    auto cfg = model.config();
    cfg.use_text = ch == Channel::text;
    cfg.use_entity = ch == Channel::entity;
    auto pass = detail::run_features(query, doc, 1.0, cfg, model.d_t(), model.d_e(), &model);
    if (pass.channels.empty() || pass.channels.front().empty) return std::nullopt;
    return std::move(pass.channels.front().attention);
}

// ---------------------------------------------------------------------------
// Gradient

/// Per-example quantities from which the full parameter gradient follows:
/// for the head, dL/dparams = residual * (h h^T) or residual * [h; 1].
struct ExampleGradient {
    double raw = 0.0;
    double loss = 0.0;
    double residual = 0.0;  // prob - label
    Vector features;
    Vector adapter;  // gradient of adapter parameters (empty without adapter)
};

namespace detail {

/// Accumulates the adapter gradient of one channel given dL/d(block) for
/// each of its feature blocks.
inline void channel_backward(const ChannelPass& pass, const std::vector<const Vector*>& block_grads,
                             const std::vector<Component>& components, double scale, const Matrix& raw_query,
                             const Matrix& raw_doc, std::span<double> out) {
    const Matrix& q = pass.query;
    const Matrix& d = pass.doc;
    const Matrix& a = pass.attention.weights;
    const Matrix& att = pass.attention.attended;
    const std::size_t r = q.rows();
    const std::size_t c = d.rows();
    const std::size_t k = q.cols();
    Matrix dq(r, k);
    Matrix datt(r, k);
    const double inv_r = scale / static_cast<double>(r);

    for (std::size_t b = 0; b < components.size(); ++b) {
        const Vector& g = *block_grads[b];
        for (std::size_t i = 0; i < r; ++i) {
            auto dqi = dq.row(i);
            auto dai = datt.row(i);
            auto qi = q.row(i);
            auto ai = att.row(i);
            for (std::size_t j = 0; j < k; ++j) {
                const double gj = g[j] * inv_r;
                switch (components[b]) {
                    case Component::multiply:
                        dqi[j] += gj * ai[j];
                        dai[j] += gj * qi[j];
                        break;
                    case Component::add:
                        dqi[j] += gj;
                        dai[j] += gj;
                        break;
                    case Component::subtract:
                        dqi[j] += gj;
                        dai[j] -= gj;
                        break;
                    case Component::query_mean: dqi[j] += gj; break;
                    case Component::attended_mean: dai[j] += gj; break;
                }
            }
        }
    }

    // attended = A D
    Matrix dd(c, k);
    Matrix ds(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        auto wi = a.row(i);
        auto dai = datt.row(i);
        auto dsi = ds.row(i);
        double weighted = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double da_ij = dot(dai, d.row(j));
            dsi[j] = da_ij;
            weighted += wi[j] * da_ij;
            auto ddj = dd.row(j);
            for (std::size_t t = 0; t < k; ++t) ddj[t] += wi[j] * dai[t];
        }
        // softmax Jacobian
        for (std::size_t j = 0; j < c; ++j) dsi[j] = wi[j] * (dsi[j] - weighted);
    }
    // logits = Q D^T
    for (std::size_t i = 0; i < r; ++i) {
        auto dsi = ds.row(i);
        auto dqi = dq.row(i);
        for (std::size_t j = 0; j < c; ++j) {
            auto dj = d.row(j);
            auto qi = q.row(i);
            auto ddj = dd.row(j);
            for (std::size_t t = 0; t < k; ++t) {
                dqi[t] += dsi[j] * dj[t];
                ddj[t] += dsi[j] * qi[t];
            }
        }
    }
    // adapted = X W^T + b, for both sides
    auto dw = out.first(k * k);
    auto db = out.subspan(k * k, k);
    auto accumulate = [&](const Matrix& grad, const Matrix& input) {
        for (std::size_t i = 0; i < grad.rows(); ++i) {
            auto gi = grad.row(i);
            auto xi = input.row(i);
            for (std::size_t u = 0; u < k; ++u) {
                db[u] += gi[u];
                for (std::size_t v = 0; v < k; ++v) dw[u * k + v] += gi[u] * xi[v];
            }
        }
    };
    accumulate(dq, raw_query);
    accumulate(dd, raw_doc);
}

}  // namespace detail

inline ExampleGradient example_gradient(const QueryRecord& query, const DocumentRecord& doc, double s, int label,
                                        const BilinearModel& model) {
    if (label != 0 && label != 1) throw DataError("label must be 0 or 1");
    const auto& cfg = model.config();
    auto pass = detail::run_features(query, doc, s, cfg, model.d_t(), model.d_e(), &model);
    ExampleGradient out;
    out.features = pass.features.concatenated();
    out.raw = model.score(out.features);
    out.loss = bce_with_logit(out.raw, label);
    out.residual = logistic(out.raw) - static_cast<double>(label);
    if (!cfg.adapter) return out;

    out.adapter.assign(model.parameters().size() - model.head_size(), 0.0);
    if (out.residual == 0.0) return out;
    Vector dh = model.score_gradient(out.features);
    for (double& v : dh) v *= out.residual;

    const auto components = cfg.components();
    std::size_t block_index = 0;
    std::size_t offset = 0;
    std::vector<Vector> grads;
    for (const auto& pass_ch : pass.channels) {
        const std::size_t k = model.channel_dim(pass_ch.channel);
        grads.clear();
        std::vector<const Vector*> refs;
        for (std::size_t b = 0; b < components.size(); ++b, ++block_index) {
            grads.emplace_back(dh.begin() + static_cast<std::ptrdiff_t>(offset),
                               dh.begin() + static_cast<std::ptrdiff_t>(offset + k));
            offset += k;
        }
        for (const auto& g : grads) refs.push_back(&g);
        if (pass_ch.empty) continue;
        const std::size_t adapter_off = *model.adapter_offset(pass_ch.channel);
        auto dst = std::span(out.adapter).subspan(adapter_off - model.head_size(), k * k + k);
        detail::channel_backward(pass_ch, refs, components, cfg.use_score_scaling ? s : 1.0,
                                 detail::channel_values(query, pass_ch.channel),
                                 detail::channel_values(doc, pass_ch.channel), dst);
    }
    return out;
}

/// Adds weight * dL/dparams of one example into `grad` (same layout as the
/// model parameters).
inline void accumulate_gradient(const ExampleGradient& eg, const BilinearModel& model, double weight,
                                std::span<double> grad) {
    const std::size_t d = model.d();
    const double r = eg.residual * weight;
    if (model.config().head == ScoringHead::bilinear) {
        for (std::size_t i = 0; i < d; ++i) {
            const double ri = r * eg.features[i];
            if (ri == 0.0) continue;
            double* row = grad.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += ri * eg.features[j];
        }
    } else {
        for (std::size_t i = 0; i < d; ++i) grad[i] += r * eg.features[i];
        grad[d] += r;
    }
    for (std::size_t i = 0; i < eg.adapter.size(); ++i) grad[model.head_size() + i] += weight * eg.adapter[i];
}

/// dBCE/dparams for one labelled pair. For the default model this is the d x d
/// matrix (prob - label) h h^T, flattened row-major.
inline Vector backward(const QueryRecord& query, const DocumentRecord& doc, double s, int label,
                       const BilinearModel& model) {
    Vector grad(model.parameters().size(), 0.0);
    accumulate_gradient(example_gradient(query, doc, s, label, model), model, 1.0, grad);
    return grad;
}

inline Matrix gradient_matrix(std::span<const double> grad, const BilinearModel& model) {
    const std::size_t d = model.d();
    Matrix m(d, d);
    std::copy_n(grad.begin(), d * d, m.values().begin());
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[5] = {'Q', 'D', 'E', 'R', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Header (magic, version, d, d_t, d_e, config flags) followed by every
/// parameter as little-endian float64. For the default model the payload is
/// exactly the d x d matrix, row-major.
inline std::string serialize_checkpoint(const BilinearModel& model) {
    std::string bytes(kCheckpointMagic, 5);
    detail::put_u32(bytes, kCheckpointVersion);
    detail::put_u32(bytes, static_cast<std::uint32_t>(model.d()));
    detail::put_u32(bytes, static_cast<std::uint32_t>(model.d_t()));
    detail::put_u32(bytes, static_cast<std::uint32_t>(model.d_e()));
    detail::put_u32(bytes, model.config().flags());
    for (double v : model.parameters()) detail::put_f64(bytes, v);
    return bytes;
}

inline BilinearModel deserialize_checkpoint(std::string bytes, const std::string& source = "checkpoint") {
    detail::ByteReader reader(std::move(bytes), source);
    if (reader.take(5) != std::string_view(kCheckpointMagic, 5)) throw DataError(source + ": bad checkpoint magic");
    const auto version = reader.u32();
    if (version != kCheckpointVersion) {
        throw DataError(source + ": unsupported checkpoint version " + std::to_string(version));
    }
    const auto d = reader.u32();
    const auto d_t = reader.u32();
    const auto d_e = reader.u32();
    const auto cfg = AblationConfig::from_flags(reader.u32());
    BilinearModel model(d_t, d_e, cfg);
    if (model.d() != d) throw DataError(source + ": header dimension does not match config");
    for (double& v : model.parameters()) v = reader.f64();
    if (!reader.at_end()) throw DataError(source + ": trailing bytes after parameters");
    if (!all_finite(model.parameters())) throw DataError(source + ": non-finite parameter");
    return model;
}

inline void save_checkpoint(const BilinearModel& model, const std::filesystem::path& path) {
    detail::write_all(path, serialize_checkpoint(model), true);
}

inline BilinearModel load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(detail::read_all(path), path.string());
}

}  // namespace qder
