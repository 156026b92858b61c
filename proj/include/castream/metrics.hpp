#pragma once

// Faithfulness metrics for saliency maps. Probability measurements always
// run the model exactly as it runs at inference; the saliency method only
// decides which pixels are considered evidence. All aggregation is a
// sequential reduce over per-index storage, so results are byte-identical
// for any worker-thread count.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "attribution.hpp"
#include "common.hpp"
#include "data_io.hpp"
#include "ops.hpp"
#include "stream.hpp"
#include "tensor.hpp"

namespace castream {

struct MaskProtocol {
    double step_fraction = 1.0 / 64;  // pixels revealed per curve step
    std::int64_t blur_kernel = 11;
    double blur_sigma = 5.0;
};

// ---------------------------------------------------------------------------
// Scalar aggregates over (p_full, p_masked) pairs, reported as percentages.

namespace detail {
inline void check_prob_pairs(const std::vector<std::pair<double, double>>& v) {
    if (v.empty()) throw DomainError("metrics: no probability pairs");
    for (const auto& [pf, pm] : v) {
        if (!(pf > 0.0) || pf > 1.0)
            throw DomainError("metrics: p_full must lie in (0, 1]");
        if (pm < 0.0 || pm > 1.0)
            throw DomainError("metrics: p_masked must lie in [0, 1]");
    }
}
}  // namespace detail

inline double average_drop(const std::vector<std::pair<double, double>>& v) {
    detail::check_prob_pairs(v);
    double s = 0.0;
    for (const auto& [pf, pm] : v) s += std::max(0.0, pf - pm) / pf;
    return 100.0 * s / static_cast<double>(v.size());
}

inline double average_gain(const std::vector<std::pair<double, double>>& v) {
    detail::check_prob_pairs(v);
    double s = 0.0;
    for (const auto& [pf, pm] : v)
        s += std::max(0.0, pm - pf) / std::max(1.0 - pf, 1e-12);
    return 100.0 * s / static_cast<double>(v.size());
}

inline double average_increase(
    const std::vector<std::pair<double, double>>& v) {
    detail::check_prob_pairs(v);
    double s = 0.0;
    for (const auto& [pf, pm] : v)
        if (pm > pf) s += 1.0;
    return 100.0 * s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Separable gaussian blur with replicated borders.

template <typename T>
inline Tensor<T> gaussian_blur(const Tensor<T>& x, std::int64_t kernel,
                               double sigma) {
    if (x.rank() != 3) throw ShapeError("blur: expects a (C,H,W) tensor");
    if (kernel < 1 || kernel % 2 == 0)
        throw DomainError("blur: kernel must be odd and positive");
    if (!(sigma > 0.0)) throw DomainError("blur: sigma must be positive");
    std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::int64_t half = kernel / 2;
    std::vector<double> wts(static_cast<std::size_t>(kernel));
    double norm = 0.0;
    for (std::int64_t i = 0; i < kernel; ++i) {
        double d = static_cast<double>(i - half);
        wts[static_cast<std::size_t>(i)] =
            std::exp(-d * d / (2.0 * sigma * sigma));
        norm += wts[static_cast<std::size_t>(i)];
    }
    for (auto& v : wts) v /= norm;

    Tensor<T> mid = Tensor<T>::zeros(x.shape());
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j) {
                double acc = 0.0;
                for (std::int64_t t = -half; t <= half; ++t) {
                    std::int64_t jj = std::clamp<std::int64_t>(j + t, 0,
                                                               w - 1);
                    acc += wts[static_cast<std::size_t>(t + half)] *
                           static_cast<double>(
                               x.data()[(ch * h + i) * w + jj]);
                }
                mid.data()[(ch * h + i) * w + j] = static_cast<T>(acc);
            }
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j) {
                double acc = 0.0;
                for (std::int64_t t = -half; t <= half; ++t) {
                    std::int64_t ii = std::clamp<std::int64_t>(i + t, 0,
                                                               h - 1);
                    acc += wts[static_cast<std::size_t>(t + half)] *
                           static_cast<double>(
                               mid.data()[(ch * h + ii) * w + j]);
                }
                out.data()[(ch * h + i) * w + j] = static_cast<T>(acc);
            }
    return out;
}

// ---------------------------------------------------------------------------
// Perturbation curves. Pixels move between a baseline image and the real
// one in descending saliency order; ties fall back to row-major position.

struct Curve {
    std::vector<double> probs;  // one per curve point, endpoints included
    double auc = 0.0;
};

namespace detail {

template <typename T>
inline double path_prob(const Model<T>& m, Pooling pooling,
                        const std::vector<Tensor<T>>& features,
                        std::int64_t cls) {
    Tensor<T> p = softmax(path_logits_from_features(m, pooling, features),
                          T(1));
    return static_cast<double>(p.data()[cls]);
}

// Probability of `cls` for a batch of inputs, run through the backbone in
// one pass and through the pooling path per sample.
template <typename T>
inline std::vector<double> batched_probs(const Model<T>& m, Pooling pooling,
                                         const Tensor<T>& batch,
                                         std::int64_t cls) {
    NoGrad<T> ng;
    auto fw = m.backbone.forward_stages(batch);
    std::vector<double> out(static_cast<std::size_t>(batch.dim(0)));
    for (std::int64_t b = 0; b < batch.dim(0); ++b)
        out[static_cast<std::size_t>(b)] =
            path_prob(m, pooling, slice_features(fw.features, b), cls);
    return out;
}

template <typename T>
inline Curve perturbation_curve(const Model<T>& m, Pooling pooling,
                                const Tensor<T>& from, const Tensor<T>& to,
                                const std::vector<T>& saliency,
                                std::int64_t cls, double step_fraction) {
    if (!(step_fraction > 0.0) || step_fraction > 1.0)
        throw DomainError("curve: step fraction must lie in (0, 1]");
    std::int64_t c = from.dim(0), h = from.dim(1), w = from.dim(2);
    std::int64_t px = h * w;
    if (static_cast<std::int64_t>(saliency.size()) != px)
        throw ShapeError("curve: saliency size does not match the image");

    std::vector<std::int64_t> order(static_cast<std::size_t>(px));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::int64_t a, std::int64_t b) {
                         return saliency[static_cast<std::size_t>(a)] >
                                saliency[static_cast<std::size_t>(b)];
                     });

    std::int64_t steps = static_cast<std::int64_t>(
        std::ceil(1.0 / step_fraction));
    Curve curve;
    curve.probs.resize(static_cast<std::size_t>(steps + 1));

    // Walk the points in order, mutating one working image, and batch the
    // backbone passes.
    Tensor<T> work = from.clone_detached();
    std::int64_t done = 0;
    constexpr std::int64_t kBatch = 16;
    for (std::int64_t t0 = 0; t0 <= steps; t0 += kBatch) {
        std::int64_t tb = std::min<std::int64_t>(kBatch, steps + 1 - t0);
        Tensor<T> batch = Tensor<T>::zeros({tb, c, h, w});
        for (std::int64_t bi = 0; bi < tb; ++bi) {
            std::int64_t t = t0 + bi;
            std::int64_t want = t == steps
                                    ? px
                                    : std::min<std::int64_t>(
                                          px, static_cast<std::int64_t>(
                                                  std::llround(
                                                      t * step_fraction *
                                                      static_cast<double>(
                                                          px))));
            for (; done < want; ++done) {
                std::int64_t p = order[static_cast<std::size_t>(done)];
                for (std::int64_t ch = 0; ch < c; ++ch)
                    work.data()[ch * px + p] = to.data()[ch * px + p];
            }
            T* dst = batch.data() + bi * c * px;
            for (std::int64_t i = 0; i < c * px; ++i)
                dst[i] = work.data()[i];
        }
        auto probs = batched_probs(m, pooling, batch, cls);
        for (std::int64_t bi = 0; bi < tb; ++bi)
            curve.probs[static_cast<std::size_t>(t0 + bi)] =
                probs[static_cast<std::size_t>(bi)];
    }

    double auc = 0.0;
    for (std::int64_t t = 0; t < steps; ++t)
        auc += 0.5 *
               (curve.probs[static_cast<std::size_t>(t)] +
                curve.probs[static_cast<std::size_t>(t + 1)]) /
               static_cast<double>(steps);
    curve.auc = auc;
    return curve;
}

}  // namespace detail

// Reveals the image out of a blurred copy, most salient pixels first.
template <typename T>
inline Curve insertion_curve(const Model<T>& m, Pooling pooling,
                             const Tensor<T>& x,
                             const std::vector<T>& saliency, std::int64_t cls,
                             const MaskProtocol& proto = {}) {
    NoGrad<T> ng;
    Tensor<T> blurred = gaussian_blur(x, proto.blur_kernel, proto.blur_sigma);
    return detail::perturbation_curve(m, pooling, blurred, x, saliency, cls,
                                      proto.step_fraction);
}

// Blackens the image, most salient pixels first.
template <typename T>
inline Curve deletion_curve(const Model<T>& m, Pooling pooling,
                            const Tensor<T>& x, const std::vector<T>& saliency,
                            std::int64_t cls, const MaskProtocol& proto = {}) {
    NoGrad<T> ng;
    Tensor<T> black = Tensor<T>::zeros(x.shape());
    return detail::perturbation_curve(m, pooling, x, black, saliency, cls,
                                      proto.step_fraction);
}

// ---------------------------------------------------------------------------
// Whole-suite evaluation

struct SampleMetrics {
    std::int64_t index = 0;
    std::int64_t class_id = 0;  // the path's own prediction
    double p_full = 0.0;
    double p_masked = 0.0;
    double insertion_auc = 0.0;
    double deletion_auc = 0.0;
};

struct CellReport {
    Method method = Method::gradcam;
    Pooling pooling = Pooling::gap;
    std::int64_t n = 0;
    double avg_drop = 0.0;
    double avg_gain = 0.0;
    double avg_increase = 0.0;
    double insertion = 0.0;
    double deletion = 0.0;
    std::vector<SampleMetrics> samples;
};

struct SuiteConfig {
    std::vector<Method> methods = {Method::gradcam};
    std::vector<Pooling> poolings = {Pooling::gap};
    MaskProtocol protocol;
    ScoreCamOptions score;
    int stage = -1;  // -1 means the last stage
    bool curves = true;
    int threads = 1;
};

inline int env_thread_count() {
    const char* s = std::getenv("CASTREAM_THREADS");
    if (!s || !*s) {
        unsigned hc = std::thread::hardware_concurrency();
        return hc > 0 ? static_cast<int>(hc) : 1;
    }
    char* end = nullptr;
    long v = std::strtol(s, &end, 10);
    if (!end || *end != '\0' || v < 1 || v > 1024)
        throw DomainError("CASTREAM_THREADS must be an integer in [1, 1024]");
    return static_cast<int>(v);
}

namespace detail {

// Index-parallel map: each index writes only its own slot, so the caller's
// later reduce is order-independent of the thread count.
template <typename Fn>
inline void parallel_for(std::int64_t n, int threads, Fn&& fn) {
    if (threads < 1) throw DomainError("parallel_for: thread count < 1");
    if (threads == 1 || n <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::int64_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    auto worker = [&]() {
        for (;;) {
            std::int64_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
                next.store(n);
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    int use = static_cast<int>(
        std::min<std::int64_t>(threads, n));
    for (int t = 0; t < use; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

template <typename T>
inline std::vector<CellReport> evaluate_suite(
    const Model<T>& m, const std::vector<SyntheticSample>& dataset,
    const SuiteConfig& cfg) {
    if (dataset.empty()) throw DomainError("evaluate: empty dataset");
    int stage = cfg.stage < 0 ? m.backbone.last_stage() : cfg.stage;
    detail::check_stage(m.backbone, stage);
    for (Method method : cfg.methods)
        for (Pooling pooling : cfg.poolings)
            if (method == Method::rawattention &&
                (pooling != Pooling::ca || !m.stream))
                throw DomainError(
                    "evaluate: rawattention needs the attention path");

    std::vector<CellReport> cells;
    const std::int64_t n = static_cast<std::int64_t>(dataset.size());
    for (Method method : cfg.methods) {
        for (Pooling pooling : cfg.poolings) {
            CellReport cell;
            cell.method = method;
            cell.pooling = pooling;
            cell.n = n;
            cell.samples.resize(static_cast<std::size_t>(n));
            detail::parallel_for(n, cfg.threads, [&](std::int64_t i) {
                const SyntheticSample& smp =
                    dataset[static_cast<std::size_t>(i)];
                Tensor<T> x = to_tensor<T>(smp);
                NoGrad<T> ng;
                auto features = m.backbone.forward_stages(x).features;
                Tensor<T> lg =
                    path_logits_from_features(m, pooling, features);
                std::int64_t cls = 0;
                for (std::int64_t j = 1; j < lg.numel(); ++j)
                    if (lg.data()[j] > lg.data()[cls]) cls = j;
                double pf = static_cast<double>(
                    softmax(lg, T(1)).data()[cls]);

                SaliencyMap<T> map = compute_saliency(
                    method, m, pooling, x, cls, stage, cfg.score);
                std::vector<T> mask = saliency_mask(map, x.dim(1), x.dim(2));

                Tensor<T> masked = Tensor<T>::zeros(x.shape());
                std::int64_t px = x.dim(1) * x.dim(2);
                for (std::int64_t ch = 0; ch < x.dim(0); ++ch)
                    for (std::int64_t p = 0; p < px; ++p)
                        masked.data()[ch * px + p] =
                            x.data()[ch * px + p] *
                            mask[static_cast<std::size_t>(p)];
                double pm = detail::path_prob(
                    m, pooling,
                    m.backbone.forward_stages(masked).features, cls);

                SampleMetrics sm;
                sm.index = i;
                sm.class_id = cls;
                sm.p_full = pf;
                sm.p_masked = pm;
                if (cfg.curves) {
                    sm.insertion_auc =
                        insertion_curve(m, pooling, x, mask, cls,
                                        cfg.protocol)
                            .auc;
                    sm.deletion_auc =
                        deletion_curve(m, pooling, x, mask, cls,
                                       cfg.protocol)
                            .auc;
                }
                cell.samples[static_cast<std::size_t>(i)] = sm;
            });

            std::vector<std::pair<double, double>> pairs;
            pairs.reserve(cell.samples.size());
            double ins = 0.0, del = 0.0;
            for (const auto& sm : cell.samples) {
                pairs.emplace_back(sm.p_full, sm.p_masked);
                ins += sm.insertion_auc;
                del += sm.deletion_auc;
            }
            cell.avg_drop = average_drop(pairs);
            cell.avg_gain = average_gain(pairs);
            cell.avg_increase = average_increase(pairs);
            cell.insertion = ins / static_cast<double>(n);
            cell.deletion = del / static_cast<double>(n);
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string format_fixed(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

inline std::string metrics_csv(const std::vector<CellReport>& cells) {
    std::string out = "method,pooling,N,AD,AG,AI,I,D\n";
    for (const auto& c : cells) {
        out += std::string(to_string(c.method)) + "," + to_string(c.pooling) +
               "," + std::to_string(c.n) + "," + format_fixed(c.avg_drop) +
               "," + format_fixed(c.avg_gain) + "," +
               format_fixed(c.avg_increase) + "," +
               format_fixed(c.insertion) + "," + format_fixed(c.deletion) +
               "\n";
    }
    return out;
}

inline std::string samples_csv(const std::vector<CellReport>& cells) {
    std::string out =
        "method,pooling,index,class,p_full,p_masked,insertion,deletion\n";
    for (const auto& c : cells)
        for (const auto& s : c.samples)
            out += std::string(to_string(c.method)) + "," +
                   to_string(c.pooling) + "," + std::to_string(s.index) +
                   "," + std::to_string(s.class_id) + "," +
                   format_fixed(s.p_full) + "," + format_fixed(s.p_masked) +
                   "," + format_fixed(s.insertion_auc) + "," +
                   format_fixed(s.deletion_auc) + "\n";
    return out;
}

}  // namespace castream
