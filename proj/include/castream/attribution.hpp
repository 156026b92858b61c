#pragma once

// Post-hoc saliency methods over a staged classifier. All methods produce a
// map at feature-map resolution; callers upsample and normalize as needed.
// Gradient methods differentiate the class score with respect to one stage's
// feature map by replaying the network from a detached copy of that map, so
// they work unchanged whether the score flows through global average pooling
// or through the attention stream.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "common.hpp"
#include "ops.hpp"
#include "stream.hpp"
#include "tensor.hpp"

namespace castream {

enum class Method { cam, gradcam, gradcampp, scorecam, rawattention };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::cam: return "cam";
        case Method::gradcam: return "gradcam";
        case Method::gradcampp: return "gradcampp";
        case Method::scorecam: return "scorecam";
        default: return "rawattention";
    }
}

inline Method parse_method(const std::string& s) {
    if (s == "cam") return Method::cam;
    if (s == "gradcam" || s == "grad-cam") return Method::gradcam;
    if (s == "gradcampp" || s == "grad-cam++") return Method::gradcampp;
    if (s == "scorecam" || s == "score-cam") return Method::scorecam;
    if (s == "rawattention" || s == "raw-attention")
        return Method::rawattention;
    throw DomainError("unknown saliency method '" + s + "'");
}

template <typename T>
struct SaliencyMap {
    int stage = 0;
    std::int64_t class_id = -1;  // -1 marks a class-agnostic map
    std::int64_t rows = 0, cols = 0;
    std::vector<T> values;  // rows*cols, method-native scale
};

// Bilinear upsampling with half-pixel centers (align_corners=false); the
// identity when the sizes already match. Downsampling is not a saliency
// operation here and is rejected.
template <typename T>
inline std::vector<T> upsample_bilinear(const std::vector<T>& src,
                                        std::int64_t sh, std::int64_t sw,
                                        std::int64_t dh, std::int64_t dw) {
    if (sh < 1 || sw < 1 || dh < 1 || dw < 1)
        throw ShapeError("upsample: degenerate size");
    if (static_cast<std::int64_t>(src.size()) != sh * sw)
        throw ShapeError("upsample: source size mismatch");
    if (dh < sh || dw < sw)
        throw DomainError("upsample: target must not shrink the map");
    std::vector<T> out(static_cast<std::size_t>(dh * dw));
    for (std::int64_t i = 0; i < dh; ++i) {
        double sy = (static_cast<double>(i) + 0.5) * sh / dh - 0.5;
        if (sy < 0.0) sy = 0.0;
        if (sy > static_cast<double>(sh - 1)) sy = static_cast<double>(sh - 1);
        std::int64_t y0 = static_cast<std::int64_t>(sy);
        std::int64_t y1 = y0 + 1 < sh ? y0 + 1 : sh - 1;
        double fy = sy - static_cast<double>(y0);
        for (std::int64_t j = 0; j < dw; ++j) {
            double sx = (static_cast<double>(j) + 0.5) * sw / dw - 0.5;
            if (sx < 0.0) sx = 0.0;
            if (sx > static_cast<double>(sw - 1))
                sx = static_cast<double>(sw - 1);
            std::int64_t x0 = static_cast<std::int64_t>(sx);
            std::int64_t x1 = x0 + 1 < sw ? x0 + 1 : sw - 1;
            double fx = sx - static_cast<double>(x0);
            double v00 = static_cast<double>(
                src[static_cast<std::size_t>(y0 * sw + x0)]);
            double v01 = static_cast<double>(
                src[static_cast<std::size_t>(y0 * sw + x1)]);
            double v10 = static_cast<double>(
                src[static_cast<std::size_t>(y1 * sw + x0)]);
            double v11 = static_cast<double>(
                src[static_cast<std::size_t>(y1 * sw + x1)]);
            double top = v00 + (v01 - v00) * fx;
            double bot = v10 + (v11 - v10) * fx;
            out[static_cast<std::size_t>(i * dw + j)] =
                static_cast<T>(top + (bot - top) * fy);
        }
    }
    return out;
}

// Upsampled-to-input, min-max normalized form used both for masking inputs
// and for rendering overlays.
template <typename T>
inline std::vector<T> saliency_mask(const SaliencyMap<T>& map, std::int64_t h,
                                    std::int64_t w) {
    return minmax01(upsample_bilinear(map.values, map.rows, map.cols, h, w));
}

namespace detail {

template <typename T>
inline void check_class(const StagedBackbone<T>& bb, std::int64_t class_id) {
    if (class_id < 0 || class_id >= bb.config().class_count)
        throw DomainError("saliency: class id out of range");
}

template <typename T>
inline void check_stage(const StagedBackbone<T>& bb, int stage) {
    if (stage < 0 || stage > bb.last_stage())
        throw DomainError("saliency: stage out of range");
}

// d(class score)/d(stage feature map): replays stages after `stage` from a
// detached leaf so the tape covers exactly the downstream computation. Under
// the attention path the stream's taps at `stage` and later route gradient
// as well; taps at earlier stages are upstream constants. The class-specific
// stream is queried with the class being explained.
template <typename T>
inline Tensor<T> feature_gradient(const Model<T>& m, Pooling pooling,
                                  const std::vector<Tensor<T>>& features,
                                  std::int64_t class_id, int stage) {
    Tensor<T> leaf = features[static_cast<std::size_t>(stage)]
                         .clone_detached();
    leaf.set_requires_grad(true);
    Graph<T> g;
    std::vector<Tensor<T>> feats(features.begin(), features.begin() + stage);
    feats.push_back(leaf);
    auto rest = m.backbone.forward_from(leaf, stage);
    feats.insert(feats.end(), rest.begin(), rest.end());
    std::optional<std::int64_t> qc;
    if (pooling == Pooling::ca && m.stream &&
        m.stream->config().mode == ClassMode::class_specific)
        qc = class_id;
    Tensor<T> y = pick(path_logits_from_features(m, pooling, feats, qc),
                       class_id);
    g.backward(y);
    if (!leaf.has_grad())
        throw InvariantError("saliency: class score ignored the feature map");
    Tensor<T> out = Tensor<T>::zeros(leaf.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out.data()[i] = leaf.grad()[static_cast<std::size_t>(i)];
    return out;
}

template <typename T>
inline SaliencyMap<T> weighted_feature_sum(const Tensor<T>& f,
                                           const std::vector<double>& alpha,
                                           int stage, std::int64_t class_id,
                                           bool rectify) {
    std::int64_t c = f.dim(0), h = f.dim(1), w = f.dim(2);
    SaliencyMap<T> map;
    map.stage = stage;
    map.class_id = class_id;
    map.rows = h;
    map.cols = w;
    map.values.assign(static_cast<std::size_t>(h * w), T(0));
    for (std::int64_t p = 0; p < h * w; ++p) {
        double acc = 0.0;
        for (std::int64_t k = 0; k < c; ++k)
            acc += alpha[static_cast<std::size_t>(k)] *
                   static_cast<double>(f.data()[k * h * w + p]);
        if (rectify && acc < 0.0) acc = 0.0;
        map.values[static_cast<std::size_t>(p)] = static_cast<T>(acc);
    }
    return map;
}

}  // namespace detail

// Classic class activation map: the classifier weight row contracted with
// the last-stage features. Defined only where the head actually reads the
// features, so any other stage is rejected. Values may be negative; no
// rectification is applied.
template <typename T>
inline SaliencyMap<T> cam(const Model<T>& m,
                          const std::vector<Tensor<T>>& features,
                          std::int64_t class_id, int stage) {
    detail::check_class(m.backbone, class_id);
    if (stage != m.backbone.last_stage())
        throw DomainError("cam: defined on the last stage only");
    NoGrad<T> ng;
    const Tensor<T>& f = features.back();
    Tensor<T> head = m.backbone.head_weight();
    std::int64_t c = f.dim(0);
    std::vector<double> alpha(static_cast<std::size_t>(c));
    for (std::int64_t k = 0; k < c; ++k)
        alpha[static_cast<std::size_t>(k)] =
            static_cast<double>(head.data()[class_id * c + k]);
    return detail::weighted_feature_sum(f, alpha, stage, class_id, false);
}

// Gradient-weighted map: channel weights are the spatial means of
// d(score)/d(feature), the weighted sum is rectified.
template <typename T>
inline SaliencyMap<T> grad_cam(const Model<T>& m, Pooling pooling,
                               const std::vector<Tensor<T>>& features,
                               std::int64_t class_id, int stage) {
    detail::check_class(m.backbone, class_id);
    detail::check_stage(m.backbone, stage);
    Tensor<T> g = detail::feature_gradient(m, pooling, features, class_id,
                                           stage);
    std::int64_t c = g.dim(0), hw = g.dim(1) * g.dim(2);
    std::vector<double> alpha(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t k = 0; k < c; ++k) {
        double s = 0.0;
        for (std::int64_t p = 0; p < hw; ++p)
            s += static_cast<double>(g.data()[k * hw + p]);
        alpha[static_cast<std::size_t>(k)] = s / static_cast<double>(hw);
    }
    NoGrad<T> ng;
    return detail::weighted_feature_sum(
        features[static_cast<std::size_t>(stage)], alpha, stage, class_id,
        true);
}

// Second-order refinement of the gradient weighting. With rectified
// features the per-position denominator is strictly positive wherever the
// rectified gradient contributes, so the epsilon only guards exact zeros.
template <typename T>
inline SaliencyMap<T> grad_cam_pp(const Model<T>& m, Pooling pooling,
                                  const std::vector<Tensor<T>>& features,
                                  std::int64_t class_id, int stage) {
    detail::check_class(m.backbone, class_id);
    detail::check_stage(m.backbone, stage);
    Tensor<T> g = detail::feature_gradient(m, pooling, features, class_id,
                                           stage);
    const Tensor<T>& f = features[static_cast<std::size_t>(stage)];
    std::int64_t c = g.dim(0), hw = g.dim(1) * g.dim(2);
    constexpr double eps = 1e-8;
    std::vector<double> alpha(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t k = 0; k < c; ++k) {
        double sum_f = 0.0;
        for (std::int64_t p = 0; p < hw; ++p)
            sum_f += static_cast<double>(f.data()[k * hw + p]);
        double a = 0.0;
        for (std::int64_t p = 0; p < hw; ++p) {
            double gv = static_cast<double>(g.data()[k * hw + p]);
            if (gv <= 0.0) continue;  // rectified gradient gates the term
            double g2 = gv * gv;
            double denom = 2.0 * g2 + sum_f * g2 * gv + eps;
            a += g2 / denom * gv;
        }
        alpha[static_cast<std::size_t>(k)] = a;
    }
    NoGrad<T> ng;
    return detail::weighted_feature_sum(f, alpha, stage, class_id, true);
}

struct ScoreCamOptions {
    std::int64_t batch_limit = 16;  // probe inputs per backbone pass
};

// Gradient-free weighting: each channel's upsampled, normalized map gates
// the input, and the weight is that probe's softmax score for the class
// relative to a fully blacked-out input. Probes run through the same
// pooling path that produced the prediction.
template <typename T>
inline SaliencyMap<T> score_cam(
    const Model<T>& m, Pooling pooling, const Tensor<T>& input,
    const std::vector<Tensor<T>>& features, std::int64_t class_id, int stage,
    const ScoreCamOptions& opt = {},
    std::vector<std::vector<T>>* probe_masks_out = nullptr) {
    detail::check_class(m.backbone, class_id);
    detail::check_stage(m.backbone, stage);
    if (opt.batch_limit < 1)
        throw DomainError("scorecam: batch_limit must be positive");
    if (input.rank() != 3)
        throw ShapeError("scorecam: expects a single (C,H,W) input");
    NoGrad<T> ng;

    const Tensor<T>& f = features[static_cast<std::size_t>(stage)];
    std::int64_t c = f.dim(0), fh = f.dim(1), fw = f.dim(2);
    std::int64_t ic = input.dim(0), ih = input.dim(1), iw = input.dim(2);
    std::optional<std::int64_t> qc;
    if (pooling == Pooling::ca && m.stream &&
        m.stream->config().mode == ClassMode::class_specific)
        qc = class_id;

    auto class_prob = [&](const std::vector<Tensor<T>>& feats) {
        Tensor<T> lg = path_logits_from_features(m, pooling, feats, qc);
        Tensor<T> p = softmax(lg, T(1));
        return static_cast<double>(p.data()[class_id]);
    };

    double p_black = class_prob(
        m.backbone.forward_stages(Tensor<T>::zeros(input.shape())).features);

    std::vector<std::vector<T>> masks(static_cast<std::size_t>(c));
    for (std::int64_t k = 0; k < c; ++k) {
        std::vector<T> chan(static_cast<std::size_t>(fh * fw));
        for (std::int64_t p = 0; p < fh * fw; ++p)
            chan[static_cast<std::size_t>(p)] = f.data()[k * fh * fw + p];
        masks[static_cast<std::size_t>(k)] =
            minmax01(upsample_bilinear(chan, fh, fw, ih, iw));
    }
    if (probe_masks_out) *probe_masks_out = masks;

    std::vector<double> score(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t k0 = 0; k0 < c; k0 += opt.batch_limit) {
        std::int64_t kb = std::min(opt.batch_limit, c - k0);
        Tensor<T> batch = Tensor<T>::zeros({kb, ic, ih, iw});
        for (std::int64_t b = 0; b < kb; ++b) {
            const std::vector<T>& mask = masks[static_cast<std::size_t>(
                k0 + b)];
            T* dst = batch.data() + b * ic * ih * iw;
            for (std::int64_t ch = 0; ch < ic; ++ch)
                for (std::int64_t p = 0; p < ih * iw; ++p)
                    dst[ch * ih * iw + p] =
                        input.data()[ch * ih * iw + p] *
                        mask[static_cast<std::size_t>(p)];
        }
        auto fwb = m.backbone.forward_stages(batch);
        for (std::int64_t b = 0; b < kb; ++b)
            score[static_cast<std::size_t>(k0 + b)] =
                class_prob(detail::slice_features(fwb.features, b)) - p_black;
    }

    Tensor<T> s = Tensor<T>::zeros({c});
    for (std::int64_t k = 0; k < c; ++k)
        s.data()[k] = static_cast<T>(score[static_cast<std::size_t>(k)]);
    Tensor<T> a = softmax(s, T(1));
    std::vector<double> alpha(static_cast<std::size_t>(c));
    for (std::int64_t k = 0; k < c; ++k)
        alpha[static_cast<std::size_t>(k)] = static_cast<double>(a.data()[k]);
    return detail::weighted_feature_sum(f, alpha, stage, class_id, true);
}

// The stream's own attention, min-max normalized. Class-agnostic: the map
// is whatever the pooling computed, independent of any requested class.
template <typename T>
inline SaliencyMap<T> raw_attention(
    const std::vector<AttentionRecord<T>>& records, int stage) {
    for (const auto& r : records) {
        if (r.stage != stage) continue;
        SaliencyMap<T> map;
        map.stage = stage;
        map.class_id = -1;
        map.rows = r.rows;
        map.cols = r.cols;
        std::vector<T> v(static_cast<std::size_t>(r.attention.numel()));
        for (std::int64_t i = 0; i < r.attention.numel(); ++i)
            v[static_cast<std::size_t>(i)] = r.attention.data()[i];
        map.values = minmax01(v);
        return map;
    }
    throw DomainError("rawattention: no attention recorded for stage " +
                      std::to_string(stage));
}

// Uniform entry point: resolves the class to the path's own prediction when
// none is given and hides the per-method plumbing.
template <typename T>
inline SaliencyMap<T> compute_saliency(
    Method method, const Model<T>& m, Pooling pooling, const Tensor<T>& input,
    std::optional<std::int64_t> class_id, int stage,
    const ScoreCamOptions& score_opt = {}) {
    detail::check_stage(m.backbone, stage);
    std::vector<Tensor<T>> features;
    {
        NoGrad<T> ng;
        features = m.backbone.forward_stages(input).features;
    }
    std::int64_t cls = -1;
    if (method != Method::rawattention) {
        if (class_id) {
            cls = *class_id;
        } else {
            NoGrad<T> ng;
            Tensor<T> lg = path_logits_from_features(m, pooling, features);
            cls = 0;
            for (std::int64_t j = 1; j < lg.numel(); ++j)
                if (lg.data()[j] > lg.data()[cls]) cls = j;
        }
        detail::check_class(m.backbone, cls);
    }
    switch (method) {
        case Method::cam:
            return cam(m, features, cls, stage);
        case Method::gradcam:
            return grad_cam(m, pooling, features, cls, stage);
        case Method::gradcampp:
            return grad_cam_pp(m, pooling, features, cls, stage);
        case Method::scorecam:
            return score_cam(m, pooling, input, features, cls, stage,
                             score_opt);
        default: {
            if (!m.stream)
                throw DomainError(
                    "rawattention: the model has no attention stream");
            NoGrad<T> ng;
            std::optional<std::int64_t> qc;
            if (m.stream->config().mode == ClassMode::class_specific) {
                NoGrad<T> ng2;
                Tensor<T> base = m.backbone.classify_gap(features.back());
                std::int64_t best = 0;
                for (std::int64_t j = 1; j < base.numel(); ++j)
                    if (base.data()[j] > base.data()[best]) best = j;
                qc = best;
            }
            auto fw = m.stream->forward(features, qc);
            return raw_attention(fw.records, stage);
        }
    }
}

}  // namespace castream
