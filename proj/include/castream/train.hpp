#pragma once

// Training loops. The backbone trains end to end with batched graphs; the
// attention stream trains against a frozen backbone, so per-sample feature
// maps are computed once and reused as constant leaves every epoch. All
// shuffling comes from the caller's seed and nothing reads wall-clock
// state, which makes every run bit-reproducible.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "backbone.hpp"
#include "common.hpp"
#include "data_io.hpp"
#include "ops.hpp"
#include "stream.hpp"
#include "tensor.hpp"

namespace castream {

struct OptimizerConfig {
    double lr0 = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::int64_t epochs = 30;
    std::int64_t batch_size = 64;
    std::uint64_t seed = 1;
};

namespace detail {
inline void check_optimizer(const OptimizerConfig& cfg) {
    if (!(cfg.lr0 > 0.0)) throw DomainError("train: lr0 must be positive");
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
        throw DomainError("train: momentum must lie in [0, 1)");
    if (cfg.weight_decay < 0.0)
        throw DomainError("train: weight decay must be non-negative");
    if (cfg.epochs < 1) throw DomainError("train: epochs must be >= 1");
    if (cfg.batch_size < 1)
        throw DomainError("train: batch size must be >= 1");
}
}  // namespace detail

// Step schedule: the rate drops by 10x after the first and second thirds of
// the run (floor division, epochs counted from zero).
inline double lr_at_epoch(const OptimizerConfig& cfg, std::int64_t epoch) {
    detail::check_optimizer(cfg);
    if (epoch < 0 || epoch >= cfg.epochs)
        throw DomainError("train: epoch outside the schedule");
    double lr = cfg.lr0;
    if (epoch >= cfg.epochs / 3) lr /= 10.0;
    if (epoch >= 2 * cfg.epochs / 3) lr /= 10.0;
    return lr;
}

// Momentum SGD: v = mu*v + (g + wd*w); w -= lr*v. A parameter that received
// no gradient this step contributes g = 0 but still feels weight decay and
// momentum, which matters for per-class queries that a batch never touched.
template <typename T>
class Sgd {
  public:
    Sgd(std::vector<std::pair<std::string, Tensor<T>>> params,
        const OptimizerConfig& cfg)
        : params_(std::move(params)), cfg_(cfg) {
        detail::check_optimizer(cfg_);
        if (params_.empty()) throw DomainError("sgd: no parameters");
        for (auto& [name, p] : params_) {
            if (!p.requires_grad())
                throw DomainError("sgd: parameter '" + name +
                                  "' is not trainable");
            vel_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
        }
    }

    void step(double lr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor<T>& p = params_[i].second;
            std::vector<T>& v = vel_[i];
            const bool has_g = p.has_grad();
            for (std::int64_t k = 0; k < p.numel(); ++k) {
                T g = has_g ? p.grad()[static_cast<std::size_t>(k)] : T(0);
                g += static_cast<T>(cfg_.weight_decay) * p.data()[k];
                v[static_cast<std::size_t>(k)] =
                    static_cast<T>(cfg_.momentum) *
                        v[static_cast<std::size_t>(k)] +
                    g;
                p.data()[k] -= static_cast<T>(lr) *
                               v[static_cast<std::size_t>(k)];
            }
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

  private:
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    OptimizerConfig cfg_;
    std::vector<std::vector<T>> vel_;
};

struct EpochStats {
    std::int64_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;      // sample-weighted mean over the epoch
    double accuracy = 0.0;  // percent, each batch scored before its update
};

inline std::string history_csv(const std::vector<EpochStats>& hist) {
    std::string out = "epoch,lr,loss,accuracy\n";
    char buf[96];
    for (const auto& e : hist) {
        std::snprintf(buf, sizeof buf, "%lld,%.6f,%.6f,%.4f\n",
                      static_cast<long long>(e.epoch), e.lr, e.loss,
                      e.accuracy);
        out += buf;
    }
    return out;
}

namespace detail {

template <typename T>
inline Tensor<T> stack_samples(const std::vector<SyntheticSample>& ds,
                               const std::vector<std::int64_t>& order,
                               std::int64_t b0, std::int64_t b1) {
    std::int64_t b = b1 - b0;
    Tensor<T> batch =
        Tensor<T>::zeros({b, data::kChannels, data::kHeight, data::kWidth});
    std::int64_t stride = data::kChannels * data::kHeight * data::kWidth;
    for (std::int64_t i = 0; i < b; ++i) {
        const auto& img =
            ds[static_cast<std::size_t>(order[static_cast<std::size_t>(
                   b0 + i)])]
                .image;
        T* dst = batch.data() + i * stride;
        for (std::int64_t k = 0; k < stride; ++k)
            dst[k] = static_cast<T>(img[static_cast<std::size_t>(k)]);
    }
    return batch;
}

template <typename T>
inline std::int64_t row_argmax(const Tensor<T>& logits, std::int64_t row) {
    std::int64_t c = logits.dim(logits.rank() - 1);
    const T* v = logits.data() + row * c;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j)
        if (v[j] > v[best]) best = j;
    return best;
}

}  // namespace detail

// End-to-end backbone training with the average-pool head.
template <typename T>
inline std::vector<EpochStats> train_backbone(
    StagedBackbone<T>& bb, const std::vector<SyntheticSample>& train,
    const OptimizerConfig& cfg) {
    detail::check_optimizer(cfg);
    if (train.empty()) throw DomainError("train: empty dataset");
    if (bb.frozen()) throw StateError("train: backbone is frozen");

    Sgd<T> opt(bb.named_params(), cfg);
    Rng rng(cfg.seed);
    const std::int64_t n = static_cast<std::int64_t>(train.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    std::vector<EpochStats> history;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = lr_at_epoch(cfg, epoch);
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::int64_t correct = 0;
        for (std::int64_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
            std::int64_t b1 = std::min(n, b0 + cfg.batch_size);
            Tensor<T> batch = detail::stack_samples<T>(train, order, b0, b1);
            std::vector<std::int64_t> labels;
            labels.reserve(static_cast<std::size_t>(b1 - b0));
            for (std::int64_t i = b0; i < b1; ++i)
                labels.push_back(
                    train[static_cast<std::size_t>(
                              order[static_cast<std::size_t>(i)])]
                        .label);

            Graph<T> g;
            auto fw = bb.forward_stages(batch);
            Tensor<T> loss = cross_entropy(fw.logits, labels);
            double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv))
                throw NumericError("train: loss diverged at epoch " +
                                   std::to_string(epoch));
            g.backward(loss);
            opt.step(lr);
            opt.zero_grad();

            loss_sum += lv * static_cast<double>(b1 - b0);
            for (std::int64_t i = 0; i < b1 - b0; ++i)
                if (detail::row_argmax(fw.logits, i) ==
                    labels[static_cast<std::size_t>(i)])
                    ++correct;
        }
        history.push_back({epoch, lr, loss_sum / static_cast<double>(n),
                           100.0 * static_cast<double>(correct) /
                               static_cast<double>(n)});
    }
    return history;
}

// Per-sample feature lists for a frozen backbone, computed in one batched
// sweep. The cache is what makes stream training and the ablation grid
// cheap: the expensive convolutions run exactly once per sample.
template <typename T>
inline std::vector<std::vector<Tensor<T>>> cache_features(
    const StagedBackbone<T>& bb, const std::vector<SyntheticSample>& data,
    std::int64_t batch_size = 32) {
    if (batch_size < 1) throw DomainError("cache: batch size must be >= 1");
    if (!bb.frozen())
        throw StateError("cache: features are only constant once the "
                         "backbone is frozen");
    NoGrad<T> ng;
    const std::int64_t n = static_cast<std::int64_t>(data.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::vector<Tensor<T>>> cache(static_cast<std::size_t>(n));
    for (std::int64_t b0 = 0; b0 < n; b0 += batch_size) {
        std::int64_t b1 = std::min(n, b0 + batch_size);
        Tensor<T> batch = detail::stack_samples<T>(data, order, b0, b1);
        auto fw = bb.forward_stages(batch);
        for (std::int64_t i = 0; i < b1 - b0; ++i)
            cache[static_cast<std::size_t>(b0 + i)] =
                detail::slice_features(fw.features, i);
    }
    return cache;
}

// Stream training against a frozen backbone. The class-specific variant is
// trained with each sample's true class selecting the query; inference
// falls back to the average-pool prediction as usual.
template <typename T>
inline std::vector<EpochStats> train_stream(
    Model<T>& model, const std::vector<SyntheticSample>& train,
    const OptimizerConfig& cfg,
    const std::vector<std::vector<Tensor<T>>>* cache = nullptr) {
    detail::check_optimizer(cfg);
    if (train.empty()) throw DomainError("train: empty dataset");
    if (!model.stream)
        throw DomainError("train: the model has no stream to train");
    if (!model.backbone.frozen())
        throw StateError("train: stream training requires a frozen backbone");

    const std::string digest_before = model.backbone.param_digest();
    std::vector<std::vector<Tensor<T>>> local_cache;
    if (!cache) {
        local_cache = cache_features(model.backbone, train);
        cache = &local_cache;
    }
    if (cache->size() != train.size())
        throw ShapeError("train: feature cache does not match the dataset");

    const bool class_specific =
        model.stream->config().mode == ClassMode::class_specific;
    Sgd<T> opt(model.stream->named_params(), cfg);
    Rng rng(cfg.seed);
    const std::int64_t n = static_cast<std::int64_t>(train.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    std::vector<EpochStats> history;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = lr_at_epoch(cfg, epoch);
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::int64_t correct = 0;
        for (std::int64_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
            std::int64_t b1 = std::min(n, b0 + cfg.batch_size);
            Graph<T> g;
            Tensor<T> total;
            for (std::int64_t i = b0; i < b1; ++i) {
                std::int64_t idx = order[static_cast<std::size_t>(i)];
                const auto& feats =
                    (*cache)[static_cast<std::size_t>(idx)];
                std::int64_t label =
                    train[static_cast<std::size_t>(idx)].label;
                std::optional<std::int64_t> qc;
                if (class_specific) qc = label;
                Tensor<T> logits =
                    path_logits_from_features(model, Pooling::ca, feats, qc);
                if (detail::row_argmax(logits, 0) == label) ++correct;
                Tensor<T> li = cross_entropy(logits, {label});
                total = i == b0 ? li : add(total, li);
            }
            Tensor<T> loss =
                scale(total, T(1) / static_cast<T>(b1 - b0));
            double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv))
                throw NumericError("train: stream loss diverged at epoch " +
                                   std::to_string(epoch));
            g.backward(loss);
            opt.step(lr);
            opt.zero_grad();
            loss_sum += lv * static_cast<double>(b1 - b0);
        }
        history.push_back({epoch, lr, loss_sum / static_cast<double>(n),
                           100.0 * static_cast<double>(correct) /
                               static_cast<double>(n)});
    }

    if (model.backbone.param_digest() != digest_before)
        throw InvariantError(
            "train: frozen backbone weights changed during stream training");
    return history;
}

// Percent of samples whose path prediction matches the label.
template <typename T>
inline double accuracy(const Model<T>& m, Pooling pooling,
                       const std::vector<SyntheticSample>& data,
                       std::int64_t batch_size = 64) {
    if (data.empty()) throw DomainError("accuracy: empty dataset");
    if (batch_size < 1)
        throw DomainError("accuracy: batch size must be >= 1");
    NoGrad<T> ng;
    const std::int64_t n = static_cast<std::int64_t>(data.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::int64_t correct = 0;
    for (std::int64_t b0 = 0; b0 < n; b0 += batch_size) {
        std::int64_t b1 = std::min(n, b0 + batch_size);
        Tensor<T> batch = detail::stack_samples<T>(data, order, b0, b1);
        auto fw = m.backbone.forward_stages(batch);
        for (std::int64_t i = 0; i < b1 - b0; ++i) {
            Tensor<T> lg = path_logits_from_features(
                m, pooling, detail::slice_features(fw.features, i));
            if (detail::row_argmax(lg, 0) ==
                data[static_cast<std::size_t>(b0 + i)].label)
                ++correct;
        }
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Ablation grid: every stream shape against one frozen backbone. A cell
// that diverges or breaks an invariant is recorded, not fatal, because the
// point of the grid is to show which cells survive.

struct AblationCell {
    CAVariant variant = CAVariant::vanilla;
    int start_stage = 0;
    ClassMode mode = ClassMode::agnostic;
    int status = 0;  // 0 trained, 4 numeric divergence, 5 broken invariant
    std::string note;
    double ca_accuracy = 0.0;
    double gap_accuracy = 0.0;
    double final_loss = 0.0;
};

template <typename T>
inline std::vector<AblationCell> ablate(
    const StagedBackbone<T>& backbone,
    const std::vector<SyntheticSample>& train,
    const std::vector<SyntheticSample>& val,
    const std::vector<CAVariant>& variants, const std::vector<int>& starts,
    const std::vector<ClassMode>& modes, const OptimizerConfig& cfg,
    std::uint64_t stream_seed) {
    if (!backbone.frozen())
        throw StateError("ablate: requires a frozen backbone");
    if (variants.empty() || starts.empty() || modes.empty())
        throw DomainError("ablate: empty grid axis");

    auto cache = cache_features(backbone, train);
    Model<T> gap_model{backbone, std::nullopt};
    const double gap_acc = accuracy(gap_model, Pooling::gap, val);

    std::vector<AblationCell> cells;
    for (CAVariant variant : variants) {
        for (int start : starts) {
            for (ClassMode mode : modes) {
                AblationCell cell;
                cell.variant = variant;
                cell.start_stage = start;
                cell.mode = mode;
                cell.gap_accuracy = gap_acc;
                StreamConfig sc;
                sc.variant = variant;
                sc.start_stage = start;
                sc.mode = mode;
                sc.seed = stream_seed;
                Model<T> model{
                    backbone,
                    CAStream<T>(backbone.stages(),
                                backbone.config().class_count, sc)};
                try {
                    auto hist = train_stream(model, train, cfg, &cache);
                    cell.final_loss = hist.back().loss;
                    cell.ca_accuracy = accuracy(model, Pooling::ca, val);
                } catch (const NumericError& e) {
                    cell.status = 4;
                    cell.note = e.what();
                } catch (const InvariantError& e) {
                    cell.status = 5;
                    cell.note = e.what();
                }
                cells.push_back(std::move(cell));
            }
        }
    }
    return cells;
}

inline std::string ablation_csv(const std::vector<AblationCell>& cells) {
    std::string out =
        "variant,start_stage,mode,status,ca_acc,gap_acc,final_loss\n";
    char buf[160];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof buf, "%s,%d,%s,%d,%.4f,%.4f,%.6f\n",
                      to_string(c.variant), c.start_stage, to_string(c.mode),
                      c.status, c.ca_accuracy, c.gap_accuracy, c.final_loss);
        out += buf;
    }
    return out;
}

}  // namespace castream
