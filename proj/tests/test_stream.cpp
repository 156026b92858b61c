#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"

#include <castream/stream.hpp>

using namespace castream;
using oracle::check_gradients;
using oracle::random_tensor;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig cfg;
    cfg.input_channels = 2;
    cfg.input_size = 8;
    cfg.class_count = 3;
    cfg.widths = {4, 6};
    cfg.blocks_per_stage = 1;
    cfg.seed = 42;
    return cfg;
}

std::vector<Tensor<double>> random_features(Rng& rng,
                                            const std::vector<StageSpec>& sp,
                                            std::int64_t hw0) {
    std::vector<Tensor<double>> out;
    std::int64_t hw = hw0;
    for (std::size_t i = 0; i < sp.size(); ++i) {
        out.push_back(
            random_tensor(rng, {sp[i].channels_out, hw, hw}, -1.0, 1.0));
        if (i + 1 < sp.size()) hw /= 2;
    }
    return out;
}

}  // namespace

TEST_CASE("attention block frozen example", "[stream]") {
    auto f = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto q = Tensor<double>::from({2}, {10, 0});
    auto out = ca_block(q, f);
    // Closed form for this instance: a0 = 1 / (1 + exp(-10/sqrt(2))).
    double a0 = 1.0 / (1.0 + std::exp(-10.0 / std::sqrt(2.0)));
    CHECK(out.attention.data()[0] == Catch::Approx(a0).margin(1e-14));
    CHECK(out.attention.data()[0] == Catch::Approx(0.99916).margin(1e-5));
    CHECK(out.attention.data()[1] == Catch::Approx(0.00084).margin(1e-5));
    // Identity feature rows make pooled equal to the attention itself.
    CHECK(out.pooled.data()[0] ==
          Catch::Approx(out.attention.data()[0]).margin(1e-15));
    double s = out.attention.data()[0] + out.attention.data()[1];
    CHECK(std::fabs(s - 1.0) < 1e-9);
}

TEST_CASE("attention block validation", "[stream]") {
    auto f = Tensor<double>::from({3, 2}, {1, 0, 0, 1, 1, 1});
    auto q_bad = Tensor<double>::from({3}, {1, 2, 3});
    CHECK_THROWS_AS(ca_block(q_bad, f), ShapeError);
    auto q = Tensor<double>::from({2}, {1, 2});
    auto wk = Tensor<double>::from({2, 3}, {1, 0, 0, 0, 1, 0});
    auto wv = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    CHECK_THROWS_AS(ca_block_projected(q, f, wk, wv), ShapeError);
}

TEST_CASE("zero query reduces one block to global average pooling exactly",
          "[stream]") {
    Rng rng(400);
    for (auto dims : {Shape{4, 5, 5}, Shape{8, 4, 4}, Shape{16, 2, 2}}) {
        auto feature = random_tensor(rng, dims, -2.0, 2.0);
        std::int64_t c = dims[0], hw = dims[1] * dims[2];
        auto patches = transpose(reshape(feature, {c, hw}));
        auto q0 = Tensor<double>::zeros({c});
        auto out = ca_block(q0, patches);
        // Uniform weights 1/p applied position-ascending: this is
        // bit-for-bit the same arithmetic gap() performs.
        for (std::int64_t i = 0; i < hw; ++i)
            REQUIRE(out.attention.data()[i] == 1.0 / static_cast<double>(hw));
        auto pooled_gap = gap(feature);
        for (std::int64_t k = 0; k < c; ++k)
            REQUIRE(out.pooled.data()[k] == pooled_gap.data()[k]);
    }
}

TEST_CASE("single-stage stream with identity projection equals the GAP path",
          "[stream]") {
    StagedBackbone<double> bb{tiny_config()};
    StreamConfig scfg;
    scfg.start_stage = bb.last_stage();
    CAStream<double> stream(bb.stages(), bb.class_count(), scfg);

    auto q = stream.query();
    for (std::int64_t i = 0; i < q.numel(); ++i) q.data()[i] = 0.0;
    auto w = stream.projection(0);
    for (std::int64_t i = 0; i < w.dim(0); ++i)
        for (std::int64_t j = 0; j < w.dim(1); ++j)
            w.data()[i * w.dim(1) + j] = (i == j) ? 1.0 : 0.0;

    Rng rng(88);
    for (int it = 0; it < 10; ++it) {
        auto x = random_tensor(rng, {2, 8, 8}, 0.0, 1.0);
        auto fw = bb.forward_stages(x);
        auto sf = stream.forward(fw.features);
        auto logits = matvec(bb.head_weight(), sf.cls);
        for (std::int64_t c = 0; c < 3; ++c)
            REQUIRE(logits.data()[c] == fw.logits.data()[c]);
    }
}

TEST_CASE("projected block with identity projections equals vanilla",
          "[stream]") {
    Rng rng(91);
    auto f = random_tensor(rng, {9, 5}, -1.0, 1.0);
    auto q = random_tensor(rng, {5}, -1.0, 1.0);
    auto eye = Tensor<double>::zeros({5, 5});
    for (int i = 0; i < 5; ++i) eye.data()[i * 5 + i] = 1.0;
    auto plain = ca_block(q, f);
    auto proj = ca_block_projected(q, f, eye, eye);
    for (std::int64_t i = 0; i < 9; ++i)
        CHECK(proj.attention.data()[i] == plain.attention.data()[i]);
    for (std::int64_t i = 0; i < 5; ++i)
        CHECK(proj.pooled.data()[i] == plain.pooled.data()[i]);
}

TEST_CASE("mlp block with zero W1 ignores the query", "[stream]") {
    Rng rng(92);
    std::int64_t d = 4;
    auto w1 = Tensor<double>::zeros({2 * d, d});
    auto b1 = random_tensor(rng, {2 * d}, -1.0, 1.0);
    auto w2 = random_tensor(rng, {d, 2 * d}, -1.0, 1.0);
    auto b2 = random_tensor(rng, {d}, -1.0, 1.0);
    auto qa = random_tensor(rng, {d}, -3.0, 3.0);
    auto qb = random_tensor(rng, {d}, -3.0, 3.0);
    auto ya = ca_mlp(qa, w1, b1, w2, b2);
    auto yb = ca_mlp(qb, w1, b1, w2, b2);
    for (std::int64_t i = 0; i < d; ++i)
        CHECK(ya.data()[i] == yb.data()[i]);
}

TEST_CASE("attention equals the channelwise saliency composition",
          "[stream]") {
    // Two code paths for softmax(F alpha / sqrt(d)): the attention block
    // (position-major matvec) versus an explicit channel-major combination
    // of feature maps followed by a hand-rolled softmax.
    Rng rng(93);
    std::int64_t c = 6, h = 4, w = 5, p = h * w;
    auto feature = random_tensor(rng, {c, h, w}, -2.0, 2.0);
    auto alpha = random_tensor(rng, {c}, -1.5, 1.5);

    auto patches = transpose(reshape(feature, {c, p}));
    auto blk = ca_block(alpha, patches);

    std::vector<double> s(static_cast<std::size_t>(p), 0.0);
    for (std::int64_t k = 0; k < c; ++k)
        for (std::int64_t i = 0; i < p; ++i)
            s[static_cast<std::size_t>(i)] +=
                alpha.data()[k] * feature.data()[k * p + i];
    double temp = std::sqrt(static_cast<double>(c));
    double m = s[0];
    for (double v : s) m = std::max(m, v);
    double z = 0.0;
    std::vector<double> e(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        e[i] = std::exp((s[i] - m) / temp);
        z += e[i];
    }
    for (std::int64_t i = 0; i < p; ++i)
        CHECK(std::fabs(blk.attention.data()[i] -
                        e[static_cast<std::size_t>(i)] / z) < 1e-10);
}

TEST_CASE("query dims chain through the stream", "[stream]") {
    StagedBackbone<double> bb{BackboneConfig{}};
    StreamConfig scfg;  // start at stage 0
    CAStream<double> stream(bb.stages(), bb.class_count(), scfg);
    Rng rng(94);
    auto x = random_tensor(rng, {3, 32, 32}, 0.0, 1.0);
    auto fw = bb.forward_stages(x);
    auto sf = stream.forward(fw.features);
    CHECK(sf.cls.shape() == Shape{64});
    REQUIRE(sf.records.size() == 4);
    CHECK(sf.records[0].rows == 32);
    CHECK(sf.records[3].rows == 4);
    for (const auto& rec : sf.records) {
        double total = 0.0;
        for (std::int64_t i = 0; i < rec.attention.numel(); ++i)
            total += rec.attention.data()[i];
        CHECK(std::fabs(total - 1.0) < 1e-9);
    }
}

TEST_CASE("class-agnostic stream ignores the requested class", "[stream]") {
    StagedBackbone<double> bb{tiny_config()};
    CAStream<double> stream(bb.stages(), bb.class_count(), StreamConfig{});
    Rng rng(95);
    auto x = random_tensor(rng, {2, 8, 8}, 0.0, 1.0);
    auto fw = bb.forward_stages(x);
    auto a = stream.forward(fw.features, 0);
    auto b = stream.forward(fw.features, 1);
    for (std::size_t r = 0; r < a.records.size(); ++r)
        for (std::int64_t i = 0; i < a.records[r].attention.numel(); ++i)
            REQUIRE(a.records[r].attention.data()[i] ==
                    b.records[r].attention.data()[i]);
}

TEST_CASE("class-specific stream", "[stream]") {
    StagedBackbone<double> bb{tiny_config()};
    StreamConfig scfg;
    scfg.mode = ClassMode::class_specific;
    CAStream<double> stream(bb.stages(), bb.class_count(), scfg);
    Rng rng(96);
    auto x = random_tensor(rng, {2, 8, 8}, 0.0, 1.0);
    auto fw = bb.forward_stages(x);

    SECTION("query class is required") {
        CHECK_THROWS_AS(stream.forward(fw.features), DomainError);
        CHECK_THROWS_AS(stream.forward(fw.features, 5), DomainError);
    }
    SECTION("identically initialized queries collapse the bank") {
        auto q0 = stream.query(0);
        for (std::int64_t c = 1; c < 3; ++c) {
            auto qc = stream.query(c);
            for (std::int64_t i = 0; i < q0.numel(); ++i)
                qc.data()[i] = q0.data()[i];
        }
        auto a = stream.forward(fw.features, 0);
        auto b = stream.forward(fw.features, 2);
        for (std::int64_t i = 0; i < a.cls.numel(); ++i)
            REQUIRE(a.cls.data()[i] == b.cls.data()[i]);
    }
    SECTION("distinct queries give distinct outputs") {
        auto a = stream.forward(fw.features, 0);
        auto b = stream.forward(fw.features, 1);
        bool same = true;
        for (std::int64_t i = 0; i < a.cls.numel(); ++i)
            if (a.cls.data()[i] != b.cls.data()[i]) same = false;
        CHECK_FALSE(same);
    }
}

TEST_CASE("stream leaves features untouched", "[stream]") {
    StagedBackbone<double> bb{tiny_config()};
    bb.freeze();
    CAStream<double> stream(bb.stages(), bb.class_count(), StreamConfig{});
    Rng rng(97);
    auto x = random_tensor(rng, {2, 8, 8}, 0.0, 1.0);
    auto fw1 = bb.forward_stages(x);
    std::vector<std::vector<double>> snapshot;
    for (const auto& f : fw1.features) snapshot.push_back(f.vec());
    (void)stream.forward(fw1.features);
    auto fw2 = bb.forward_stages(x);
    for (std::size_t s = 0; s < snapshot.size(); ++s) {
        REQUIRE(fw1.features[s].vec() == snapshot[s]);
        REQUIRE(fw2.features[s].vec() == snapshot[s]);
    }
}

TEST_CASE("stream config validation and digests", "[stream]") {
    StagedBackbone<double> bb{tiny_config()};
    StreamConfig scfg;
    scfg.start_stage = 5;
    CHECK_THROWS_AS(CAStream<double>(bb.stages(), 3, scfg), DomainError);

    StreamConfig a;
    CAStream<double> s1(bb.stages(), 3, a);
    CAStream<double> s2(bb.stages(), 3, a);
    CHECK(s1.param_digest() == s2.param_digest());
    a.variant = CAVariant::projected_mlp;
    CAStream<double> s3(bb.stages(), 3, a);
    CHECK(s1.param_digest() != s3.param_digest());
    bool saw_wk = false, saw_mlp = false;
    for (auto& [name, t] : s3.named_params()) {
        (void)t;
        if (name.find(".wk") != std::string::npos) saw_wk = true;
        if (name.find(".mlp.w1") != std::string::npos) saw_mlp = true;
    }
    CHECK(saw_wk);
    CHECK(saw_mlp);
}

TEST_CASE("gradients flow through the full stream path", "[stream][grad]") {
    StagedBackbone<double> bb{tiny_config()};
    bb.freeze();
    for (CAVariant variant :
         {CAVariant::vanilla, CAVariant::projected, CAVariant::mlp,
          CAVariant::projected_mlp}) {
        StreamConfig scfg;
        scfg.variant = variant;
        scfg.seed = 1000 + static_cast<std::uint64_t>(variant);
        CAStream<double> stream(bb.stages(), bb.class_count(), scfg);

        Rng rng(98);
        std::vector<Tensor<double>> features =
            random_features(rng, bb.stages(), 8);
        std::vector<Tensor<double>> leaves;
        for (auto& f : features) {
            f.set_requires_grad(true);
            leaves.push_back(f);
        }
        for (auto& [name, t] : stream.named_params()) {
            (void)name;
            leaves.push_back(t);
        }
        auto fn = [&] {
            auto sf = stream.forward(features);
            auto logits = matvec(bb.head_weight(), sf.cls);
            return pick(logits, 1);
        };
        auto rep = check_gradients(fn, leaves);
        INFO(to_string(variant));
        CHECK(rep.checked > 50);
        CHECK(rep.max_rel_err < 1e-4);
    }
}
