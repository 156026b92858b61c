#pragma once

// Staged convolutional classifier. Each stage is a strided entry conv
// followed by residual conv blocks; no normalization layers anywhere, so
// the pooled-feature path stays a pure conv/relu composition. The classifier
// head is a bias-free linear map over globally averaged last-stage features.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "params.hpp"

namespace castream {

struct StageSpec {
    int index = 0;
    std::int64_t channels_in = 0;
    std::int64_t channels_out = 0;
    int spatial_downsample = 1;  // stride of the entry conv
    int blocks = 2;              // residual conv->relu units after entry
};

struct BackboneConfig {
    std::int64_t input_channels = 3;
    std::int64_t input_size = 32;  // square inputs
    std::int64_t class_count = 4;
    std::vector<std::int64_t> widths = {8, 16, 32, 64};
    int blocks_per_stage = 2;
    std::uint64_t seed = 0x5eed;
};

template <typename T>
class StagedBackbone {
  public:
    explicit StagedBackbone(const BackboneConfig& cfg) : cfg_(cfg) {
        if (cfg.widths.empty())
            throw DomainError("backbone: at least one stage required");
        if (cfg.class_count < 2)
            throw DomainError("backbone: need at least two classes");
        if (cfg.blocks_per_stage < 1)
            throw DomainError("backbone: blocks_per_stage must be positive");
        for (std::size_t i = 1; i < cfg.widths.size(); ++i)
            if (cfg.widths[i] < cfg.widths[i - 1])
                throw DomainError("backbone: stage widths must not decrease");
        std::int64_t spatial = cfg.input_size;
        for (std::size_t i = 1; i < cfg.widths.size(); ++i) spatial /= 2;
        if (spatial < 1)
            throw DomainError("backbone: input too small for stage count");

        Rng rng(cfg.seed);
        std::int64_t cin = cfg.input_channels;
        for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
            StageSpec spec;
            spec.index = static_cast<int>(i);
            spec.channels_in = cin;
            spec.channels_out = cfg.widths[i];
            spec.spatial_downsample = (i == 0) ? 1 : 2;
            spec.blocks = cfg.blocks_per_stage;
            specs_.push_back(spec);

            StageParams sp;
            // Entry convs carry the signal between resolutions and get the
            // ReLU-gain bound sqrt(6/fan); residual-branch convs stay at
            // sqrt(1/fan) so depth-wise variance growth through the skip
            // additions stays bounded. Biases start at zero.
            sp.entry_w = init_conv(rng, spec.channels_out, cin, 3, 3,
                                   T(std::sqrt(6.0)));
            sp.entry_b = init_bias(spec.channels_out);
            for (int b = 0; b < spec.blocks; ++b) {
                sp.block_w.push_back(init_conv(rng, spec.channels_out,
                                               spec.channels_out, 3, 3,
                                               T(1)));
                sp.block_b.push_back(init_bias(spec.channels_out));
            }
            params_.push_back(std::move(sp));
            cin = spec.channels_out;
        }
        // The head starts two orders smaller than its fan-in bound so the
        // initial logits sit at the class prior. Larger starting logits
        // make the first optimizer steps shrink activations everywhere to
        // flatten the prediction, which silences ReLU units faster than
        // the class signal can claim them.
        head_w_ = init_linear(rng, cfg.class_count, cfg.widths.back(),
                              T(0.01));
    }

    const BackboneConfig& config() const { return cfg_; }
    const std::vector<StageSpec>& stages() const { return specs_; }
    int last_stage() const { return static_cast<int>(specs_.size()) - 1; }
    std::int64_t class_count() const { return cfg_.class_count; }

    struct Forward {
        std::vector<Tensor<T>> features;  // one per stage, post-activation
        Tensor<T> logits;                 // GAP path output
    };

    // Runs every stage and the GAP classifier. Accepts a single (C,H,W)
    // sample or an (N,C,H,W) batch.
    Forward forward_stages(const Tensor<T>& x) const {
        bool batched = x.rank() == 4;
        std::int64_t c = x.dim(batched ? 1 : 0);
        if (c != cfg_.input_channels)
            throw ShapeError("backbone: input has " + std::to_string(c) +
                             " channels, expected " +
                             std::to_string(cfg_.input_channels));
        Forward fw;
        // Inputs are unit-interval images; the model owns their centering.
        // Shifting to the interval midpoint keeps pre-activations sign-mixed,
        // without which ReLU units can be disabled on every input at once by
        // a single weight half-space and training collapses to the prior.
        Tensor<T> h = shift(x, T(-0.5));
        for (std::size_t i = 0; i < specs_.size(); ++i) {
            h = stage_forward(static_cast<int>(i), h);
            fw.features.push_back(h);
        }
        fw.logits = classify_gap(fw.features.back());
        return fw;
    }

    // Recomputes stages l+1..L from a given stage-l feature map. Used by
    // gradient attributions that treat F_l as the differentiation target.
    std::vector<Tensor<T>> forward_from(const Tensor<T>& feature,
                                        int stage) const {
        if (stage < 0 || stage > last_stage())
            throw DomainError("backbone: stage out of range");
        std::vector<Tensor<T>> out;
        Tensor<T> h = feature;
        for (int i = stage + 1; i <= last_stage(); ++i) {
            h = stage_forward(i, h);
            out.push_back(h);
        }
        return out;
    }

    Tensor<T> classify_gap(const Tensor<T>& last_feature) const {
        Tensor<T> pooled = gap(last_feature);
        if (pooled.rank() == 1) return matvec(head_w_, pooled);
        return matmul(pooled, transpose(head_w_));
    }

    Tensor<T> head_weight() const { return head_w_; }

    void freeze() {
        for (auto& [name, t] : named_params()) {
            (void)name;
            t.set_requires_grad(false);
        }
        frozen_ = true;
        frozen_digest_ = param_digest();
    }

    bool frozen() const { return frozen_; }
    const std::string& frozen_digest() const { return frozen_digest_; }

    std::string param_digest() const {
        return digest_params(records_of(named_params()));
    }

    // Stable order: per stage entry then blocks, head last.
    std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            std::string p = "stage" + std::to_string(i);
            out.emplace_back(p + ".entry.w", params_[i].entry_w);
            out.emplace_back(p + ".entry.b", params_[i].entry_b);
            for (std::size_t b = 0; b < params_[i].block_w.size(); ++b) {
                std::string q = p + ".block" + std::to_string(b);
                out.emplace_back(q + ".w", params_[i].block_w[b]);
                out.emplace_back(q + ".b", params_[i].block_b[b]);
            }
        }
        out.emplace_back("head.w", head_w_);
        return out;
    }

  private:
    struct StageParams {
        Tensor<T> entry_w, entry_b;
        std::vector<Tensor<T>> block_w, block_b;
    };

    static Tensor<T> init_conv(Rng& rng, std::int64_t k, std::int64_t c,
                               std::int64_t kh, std::int64_t kw,
                               T bound_gain) {
        Tensor<T> t = Tensor<T>::zeros({k, c, kh, kw});
        T bound = bound_gain / std::sqrt(static_cast<T>(c * kh * kw));
        for (std::int64_t i = 0; i < t.numel(); ++i)
            t.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
        t.set_requires_grad(true);
        return t;
    }

    static Tensor<T> init_bias(std::int64_t k) {
        Tensor<T> t = Tensor<T>::zeros({k});
        t.set_requires_grad(true);
        return t;
    }

    static Tensor<T> init_linear(Rng& rng, std::int64_t rows,
                                 std::int64_t cols, T bound_gain = T(1)) {
        Tensor<T> t = Tensor<T>::zeros({rows, cols});
        T bound = bound_gain / std::sqrt(static_cast<T>(cols));
        for (std::int64_t i = 0; i < t.numel(); ++i)
            t.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
        t.set_requires_grad(true);
        return t;
    }

    Tensor<T> stage_forward(int stage, const Tensor<T>& in) const {
        const StageParams& sp = params_[static_cast<std::size_t>(stage)];
        const StageSpec& spec = specs_[static_cast<std::size_t>(stage)];
        Tensor<T> h = relu(bias_channels(
            conv2d(in, sp.entry_w, spec.spatial_downsample, 1), sp.entry_b));
        for (std::size_t b = 0; b < sp.block_w.size(); ++b) {
            Tensor<T> y = bias_channels(conv2d(h, sp.block_w[b], 1, 1),
                                        sp.block_b[b]);
            h = relu(add(h, y));
        }
        return h;
    }

    BackboneConfig cfg_;
    std::vector<StageSpec> specs_;
    std::vector<StageParams> params_;
    Tensor<T> head_w_;
    bool frozen_ = false;
    std::string frozen_digest_;
};

}  // namespace castream
