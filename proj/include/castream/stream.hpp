#pragma once

// Cross-attention stream: a stack of CLS-query attention blocks that runs
// alongside a frozen backbone. Each stage pools its feature map with the
// incoming query, projects the pooled vector to the next stage's width, and
// hands it on; the final query replaces global average pooling in front of
// the classifier head. The stream only reads feature maps, so the backbone's
// outputs are untouched by construction.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "backbone.hpp"
#include "ops.hpp"

namespace castream {

enum class CAVariant { vanilla, projected, mlp, projected_mlp };
enum class ClassMode { agnostic, class_specific };

inline const char* to_string(CAVariant v) {
    switch (v) {
        case CAVariant::vanilla: return "vanilla";
        case CAVariant::projected: return "projected";
        case CAVariant::mlp: return "mlp";
        case CAVariant::projected_mlp: return "projected_mlp";
    }
    return "?";
}

inline const char* to_string(ClassMode m) {
    return m == ClassMode::agnostic ? "agnostic" : "class_specific";
}

inline CAVariant parse_variant(const std::string& s) {
    if (s == "vanilla") return CAVariant::vanilla;
    if (s == "projected") return CAVariant::projected;
    if (s == "mlp") return CAVariant::mlp;
    if (s == "projected_mlp") return CAVariant::projected_mlp;
    throw DomainError("unknown block variant '" + s + "'");
}

inline ClassMode parse_class_mode(const std::string& s) {
    if (s == "agnostic") return ClassMode::agnostic;
    if (s == "class_specific" || s == "class-specific")
        return ClassMode::class_specific;
    throw DomainError("unknown class mode '" + s + "'");
}

inline bool has_projection(CAVariant v) {
    return v == CAVariant::projected || v == CAVariant::projected_mlp;
}

inline bool has_mlp(CAVariant v) {
    return v == CAVariant::mlp || v == CAVariant::projected_mlp;
}

template <typename T>
struct CABlockOut {
    Tensor<T> pooled;     // d
    Tensor<T> attention;  // p, sums to 1
};

// a = softmax(F q / sqrt(d)); pooled = F^T a. F is (p, d) with p spatial
// positions as rows. The temperature is the query width of this block.
template <typename T>
CABlockOut<T> ca_block(const Tensor<T>& q, const Tensor<T>& f) {
    if (f.rank() != 2 || q.rank() != 1)
        throw ShapeError("ca_block: expects F (p,d) and q (d)");
    std::int64_t d = f.dim(1);
    if (q.dim(0) != d)
        throw ShapeError("ca_block: query width " + std::to_string(q.dim(0)) +
                         " != feature width " + std::to_string(d));
    Tensor<T> a = softmax(matvec(f, q), std::sqrt(static_cast<T>(d)));
    Tensor<T> pooled = matvec(transpose(f), a);
    return {pooled, a};
}

// a = softmax(F W^K q / sqrt(d)); pooled = (F W^V)^T a. Projections are
// square (d, d); the temperature stays the block's input width.
template <typename T>
CABlockOut<T> ca_block_projected(const Tensor<T>& q, const Tensor<T>& f,
                                 const Tensor<T>& wk, const Tensor<T>& wv) {
    if (f.rank() != 2 || q.rank() != 1)
        throw ShapeError("ca_block_projected: expects F (p,d) and q (d)");
    std::int64_t d = f.dim(1);
    if (wk.rank() != 2 || wk.dim(0) != d || wk.dim(1) != d ||
        wv.rank() != 2 || wv.dim(0) != d || wv.dim(1) != d)
        throw ShapeError("ca_block_projected: projections must be (d,d)");
    if (q.dim(0) != d)
        throw ShapeError("ca_block_projected: query width mismatch");
    Tensor<T> key = matmul(f, wk);
    Tensor<T> a = softmax(matvec(key, q), std::sqrt(static_cast<T>(d)));
    Tensor<T> val = matmul(f, wv);
    Tensor<T> pooled = matvec(transpose(val), a);
    return {pooled, a};
}

// Two-layer MLP with GELU and a 2x hidden expansion; no residual around it.
template <typename T>
Tensor<T> ca_mlp(const Tensor<T>& q, const Tensor<T>& w1, const Tensor<T>& b1,
                 const Tensor<T>& w2, const Tensor<T>& b2) {
    std::int64_t d = q.dim(0);
    if (w1.rank() != 2 || w1.dim(0) != 2 * d || w1.dim(1) != d)
        throw ShapeError("ca_mlp: W1 must be (2d,d)");
    if (w2.rank() != 2 || w2.dim(0) != d || w2.dim(1) != 2 * d)
        throw ShapeError("ca_mlp: W2 must be (d,2d)");
    return add(matvec(w2, gelu(add(matvec(w1, q), b1))), b2);
}

template <typename T>
struct AttentionRecord {
    int stage = 0;
    std::int64_t rows = 0, cols = 0;  // feature-map spatial dims
    Tensor<T> attention;              // length rows*cols, row-major
};

struct StreamConfig {
    CAVariant variant = CAVariant::vanilla;
    int start_stage = 0;
    ClassMode mode = ClassMode::agnostic;
    std::uint64_t seed = 77;
};

template <typename T>
class CAStream {
  public:
    CAStream(const std::vector<StageSpec>& stages, std::int64_t class_count,
             const StreamConfig& cfg)
        : cfg_(cfg), class_count_(class_count) {
        int L = static_cast<int>(stages.size()) - 1;
        if (L < 0) throw DomainError("stream: backbone has no stages");
        if (cfg.start_stage < 0 || cfg.start_stage > L)
            throw DomainError("stream: start_stage out of range");
        for (const auto& s : stages) dims_.push_back(s.channels_out);

        Rng rng(cfg.seed);
        std::int64_t d0 = dims_[static_cast<std::size_t>(cfg.start_stage)];
        // Query init N(1,1): the learned-query recipe this stream trains from.
        std::int64_t nq =
            cfg.mode == ClassMode::class_specific ? class_count : 1;
        for (std::int64_t i = 0; i < nq; ++i) {
            Tensor<T> q = Tensor<T>::zeros({d0});
            for (std::int64_t j = 0; j < d0; ++j)
                q.data()[j] = static_cast<T>(rng.normal(1.0, 1.0));
            q.set_requires_grad(true);
            queries_.push_back(q);
        }

        for (int l = cfg.start_stage; l <= L; ++l) {
            std::int64_t d = dims_[static_cast<std::size_t>(l)];
            std::int64_t dn =
                (l == L) ? d : dims_[static_cast<std::size_t>(l) + 1];
            StageBlock blk;
            if (has_projection(cfg.variant)) {
                blk.wk = init_mat(rng, d, d);
                blk.wv = init_mat(rng, d, d);
            }
            if (has_mlp(cfg.variant)) {
                blk.mlp_w1 = init_mat(rng, 2 * d, d);
                blk.mlp_b1 = init_vec(rng, 2 * d, d);
                blk.mlp_w2 = init_mat(rng, d, 2 * d);
                blk.mlp_b2 = init_vec(rng, d, 2 * d);
            }
            blk.w = init_mat(rng, dn, d);
            blocks_.push_back(std::move(blk));
        }
    }

    const StreamConfig& config() const { return cfg_; }
    std::int64_t class_count() const { return class_count_; }
    int last_stage() const { return static_cast<int>(dims_.size()) - 1; }

    struct Forward {
        Tensor<T> cls;  // final query, width d_L
        std::vector<AttentionRecord<T>> records;
    };

    // `features` is the full per-stage list from forward_stages (rank-3,
    // single sample); stages before start_stage are ignored. Class-specific
    // mode needs the query class; at inference callers pass the baseline
    // GAP prediction.
    Forward forward(const std::vector<Tensor<T>>& features,
                    std::optional<std::int64_t> query_class = {}) const {
        if (features.size() != dims_.size())
            throw ShapeError("stream: expected one feature map per stage");
        std::int64_t qc = 0;
        if (cfg_.mode == ClassMode::class_specific) {
            if (!query_class)
                throw DomainError(
                    "stream: class-specific mode needs a query class");
            qc = *query_class;
            if (qc < 0 || qc >= class_count_)
                throw DomainError("stream: query class out of range");
        }
        Tensor<T> q = queries_[static_cast<std::size_t>(qc)];
        Forward fw;
        int L = last_stage();
        for (int l = cfg_.start_stage; l <= L; ++l) {
            const Tensor<T>& f3 = features[static_cast<std::size_t>(l)];
            if (f3.rank() != 3)
                throw ShapeError("stream: features must be rank-3 per sample");
            std::int64_t c = f3.dim(0), h = f3.dim(1), w = f3.dim(2);
            if (c != dims_[static_cast<std::size_t>(l)])
                throw ShapeError("stream: stage " + std::to_string(l) +
                                 " width mismatch");
            Tensor<T> patches = transpose(reshape(f3, {c, h * w}));
            const StageBlock& blk =
                blocks_[static_cast<std::size_t>(l - cfg_.start_stage)];
            CABlockOut<T> out =
                has_projection(cfg_.variant)
                    ? ca_block_projected(q, patches, blk.wk, blk.wv)
                    : ca_block(q, patches);
            fw.records.push_back(AttentionRecord<T>{l, h, w, out.attention});
            Tensor<T> mid = out.pooled;
            if (has_mlp(cfg_.variant))
                mid = ca_mlp(mid, blk.mlp_w1, blk.mlp_b1, blk.mlp_w2,
                             blk.mlp_b2);
            q = matvec(blk.w, mid);
        }
        fw.cls = q;
        return fw;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        if (cfg_.mode == ClassMode::class_specific) {
            for (std::size_t c = 0; c < queries_.size(); ++c)
                out.emplace_back("stream.q0." + std::to_string(c),
                                 queries_[c]);
        } else {
            out.emplace_back("stream.q0", queries_[0]);
        }
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            std::string p =
                "stream.s" + std::to_string(cfg_.start_stage +
                                            static_cast<int>(i));
            const StageBlock& blk = blocks_[i];
            if (blk.wk.valid()) {
                out.emplace_back(p + ".wk", blk.wk);
                out.emplace_back(p + ".wv", blk.wv);
            }
            if (blk.mlp_w1.valid()) {
                out.emplace_back(p + ".mlp.w1", blk.mlp_w1);
                out.emplace_back(p + ".mlp.b1", blk.mlp_b1);
                out.emplace_back(p + ".mlp.w2", blk.mlp_w2);
                out.emplace_back(p + ".mlp.b2", blk.mlp_b2);
            }
            out.emplace_back(p + ".w", blk.w);
        }
        return out;
    }

    std::string param_digest() const {
        return digest_params(records_of(named_params()));
    }

    // Direct handles for tests and surgical setups (identity projections,
    // zero queries). Index is relative to start_stage.
    Tensor<T> query(std::int64_t cls = 0) {
        return queries_[static_cast<std::size_t>(cls)];
    }
    Tensor<T> projection(int rel_stage) {
        return blocks_[static_cast<std::size_t>(rel_stage)].w;
    }

  private:
    struct StageBlock {
        Tensor<T> wk, wv;
        Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
        Tensor<T> w;
    };

    static Tensor<T> init_mat(Rng& rng, std::int64_t rows, std::int64_t cols) {
        Tensor<T> t = Tensor<T>::zeros({rows, cols});
        T bound = T(1) / std::sqrt(static_cast<T>(cols));
        for (std::int64_t i = 0; i < t.numel(); ++i)
            t.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
        t.set_requires_grad(true);
        return t;
    }

    static Tensor<T> init_vec(Rng& rng, std::int64_t n, std::int64_t fan_in) {
        Tensor<T> t = Tensor<T>::zeros({n});
        T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
        for (std::int64_t i = 0; i < t.numel(); ++i)
            t.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
        t.set_requires_grad(true);
        return t;
    }

    StreamConfig cfg_;
    std::int64_t class_count_;
    std::vector<std::int64_t> dims_;
    std::vector<Tensor<T>> queries_;
    std::vector<StageBlock> blocks_;
};

// ---------------------------------------------------------------------------
// Model bundle: a backbone plus an optional stream, with both pooling paths.

enum class Pooling { gap, ca };

inline const char* to_string(Pooling p) {
    return p == Pooling::gap ? "gap" : "ca";
}

inline Pooling parse_pooling(const std::string& s) {
    if (s == "gap") return Pooling::gap;
    if (s == "ca") return Pooling::ca;
    throw DomainError("unknown pooling '" + s + "'");
}

template <typename T>
struct Model {
    StagedBackbone<T> backbone;
    std::optional<CAStream<T>> stream;
};

// Classifier logits along a pooling path, given precomputed per-stage
// features. For the class-specific stream at inference the query class
// defaults to the baseline GAP argmax.
template <typename T>
Tensor<T> path_logits_from_features(const Model<T>& m, Pooling pooling,
                                    const std::vector<Tensor<T>>& features,
                                    std::optional<std::int64_t> cls = {}) {
    if (pooling == Pooling::gap)
        return m.backbone.classify_gap(features.back());
    if (!m.stream) throw DomainError("model has no stream for the CA path");
    std::optional<std::int64_t> qc = cls;
    if (m.stream->config().mode == ClassMode::class_specific && !qc) {
        NoGrad<T> ng;
        Tensor<T> base = m.backbone.classify_gap(features.back());
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < base.numel(); ++j)
            if (base.data()[j] > base.data()[best]) best = j;
        qc = best;
    }
    auto fw = m.stream->forward(features, qc);
    return matvec(m.backbone.head_weight(), fw.cls);
}

template <typename T>
Tensor<T> path_logits(const Model<T>& m, Pooling pooling, const Tensor<T>& x,
                      std::optional<std::int64_t> cls = {}) {
    auto fw = m.backbone.forward_stages(x);
    if (pooling == Pooling::gap) return fw.logits;
    return path_logits_from_features(m, pooling, fw.features, cls);
}

template <typename T>
std::int64_t path_argmax(const Model<T>& m, Pooling pooling,
                         const Tensor<T>& x) {
    NoGrad<T> ng;
    Tensor<T> lg = path_logits(m, pooling, x);
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < lg.numel(); ++j)
        if (lg.data()[j] > lg.data()[best]) best = j;
    return best;
}

}  // namespace castream
