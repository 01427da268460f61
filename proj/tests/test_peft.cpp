#include "mopeft/peft.hpp"

#include <gtest/gtest.h>

#include "mopeft/gradcheck.hpp"

using namespace mopeft;

TEST(Lora, FreshAttachmentHasZeroDelta) {
    std::mt19937_64 rng = substream(5, "lora", 0);
    LoraAttachment att = make_lora(6, 4, 2, 16.0, "t", rng);
    EXPECT_EQ(att.B.shape(), (Shape{6, 2}));
    EXPECT_EQ(att.A.shape(), (Shape{2, 4}));
    Tensor d = lora_delta(att, 2.0);
    for (double v : d.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Lora, DeltaHandValues) {
    LoraAttachment att;
    att.rank = 1;
    att.B = Tensor::from({2, 1}, {1, 0});
    att.A = Tensor::from({1, 2}, {1, 2});
    Tensor d = lora_delta(att, 1.0);
    EXPECT_DOUBLE_EQ(d(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(d(0, 1), 2.0);
    EXPECT_DOUBLE_EQ(d(1, 0), 0.0);
    EXPECT_DOUBLE_EQ(d(1, 1), 0.0);
}

TEST(Lora, RankBounds) {
    std::mt19937_64 rng = substream(5, "lora", 1);
    EXPECT_THROW(make_lora(4, 8, 5, 16.0, "t", rng), std::invalid_argument);
    EXPECT_THROW(make_lora(4, 8, 0, 16.0, "t", rng), std::invalid_argument);
}

TEST(Lora, ApplyZeroScaleEqualsBase) {
    std::mt19937_64 rng = substream(6, "lora", 0);
    Tensor w0 = Tensor::randn({5, 7}, rng, 1.0);
    LoraAttachment att = make_lora(5, 7, 3, 16.0, "t", rng);
    att.B = Tensor::randn({5, 3}, rng, 1.0);  // nonzero so the scale matters
    Tensor x = Tensor::randn({7, 2}, rng, 1.0);
    Tensor gated = lora_apply(w0, att, 0.0, x);
    Tensor base = matmul(w0, x);
    for (size_t i = 0; i < base.numel(); ++i)
        EXPECT_DOUBLE_EQ(gated.data()[i], base.data()[i]);
}

TEST(Lora, FactoredApplyMatchesMaterialized) {
    std::mt19937_64 rng = substream(6, "lora", 1);
    for (int trial = 0; trial < 10; ++trial) {
        int d = 3 + trial, k = 5 + trial, r = 2;
        Tensor w0 = Tensor::randn({d, k}, rng, 1.0);
        LoraAttachment att = make_lora(d, k, r, 16.0, "t", rng);
        att.B = Tensor::randn({d, r}, rng, 0.5);
        double s = 0.25 * (trial + 1);
        Tensor x = Tensor::randn({k, 3}, rng, 1.0);
        Tensor factored = lora_apply(w0, att, s, x);
        Tensor materialized = matmul(add(w0, lora_delta(att, s)), x);
        for (size_t i = 0; i < factored.numel(); ++i)
            EXPECT_NEAR(factored.data()[i], materialized.data()[i], 1e-12);
    }
}

TEST(Lora, ApplyGradsPassFiniteDifferences) {
    std::mt19937_64 rng = substream(6, "lora", 2);
    Tensor w0 = Tensor::randn({4, 5}, rng, 1.0);
    LoraAttachment att = make_lora(4, 5, 2, 16.0, "t", rng);
    att.B = Tensor::randn({4, 2}, rng, 0.5);
    att.A.set_requires_grad(true);
    att.B.set_requires_grad(true);
    Tensor x = Tensor::randn({5, 3}, rng, 1.0);
    auto f = [&]() { return mean_all(gelu(lora_apply(w0, att, 1.5, x))); };
    GradReport r = finite_diff_check(f, {{"A", att.A}, {"B", att.B}});
    EXPECT_TRUE(r.passed()) << format_grad_report(r);
}

TEST(Lora, MergeMatchesFactoredForward) {
    std::mt19937_64 rng = substream(6, "lora", 3);
    for (int trial = 0; trial < 10; ++trial) {
        int d = 4 + 2 * trial, k = 6 + trial, r = 1 + trial % 4;
        Tensor w0 = Tensor::randn({d, k}, rng, 1.0);
        LoraAttachment att = make_lora(d, k, r, 16.0, "t", rng);
        att.B = Tensor::randn({d, r}, rng, 0.7);
        double s = 16.0 / r;
        Tensor merged = lora_merge(w0, att, s);
        Tensor x = Tensor::randn({k, 4}, rng, 1.0);
        Tensor via_merge = matmul(merged, x);
        Tensor via_factor = lora_apply(w0, att, s, x);
        for (size_t i = 0; i < via_merge.numel(); ++i)
            EXPECT_NEAR(via_merge.data()[i], via_factor.data()[i], 1e-10);
        // subtracting the update recovers the base weight
        Tensor recovered = lora_merge(merged, att, -s);
        for (size_t i = 0; i < w0.numel(); ++i)
            EXPECT_NEAR(recovered.data()[i], w0.data()[i], 1e-12);
    }
}

TEST(Lora, MergeZeroScaleLeavesBase) {
    std::mt19937_64 rng = substream(6, "lora", 4);
    Tensor w0 = Tensor::randn({3, 3}, rng, 1.0);
    LoraAttachment att = make_lora(3, 3, 2, 16.0, "t", rng);
    att.B = Tensor::randn({3, 2}, rng, 1.0);
    Tensor merged = lora_merge(w0, att, 0.0);
    for (size_t i = 0; i < w0.numel(); ++i)
        EXPECT_DOUBLE_EQ(merged.data()[i], w0.data()[i]);
}

TEST(Adapter, ClosedGateBypassesExactly) {
    std::mt19937_64 rng = substream(7, "adapter", 0);
    AdapterAttachment att = make_adapter(8, 4, rng);
    att.W_up = Tensor::randn({8, 4}, rng, 1.0);  // nonzero so the gate matters
    att.b_up = Tensor::randn({8}, rng, 1.0);
    Tensor z = Tensor::randn({5, 8}, rng, 1.0);
    Tensor out = adapter_forward(att, z, 0.0);
    for (size_t i = 0; i < z.numel(); ++i) EXPECT_DOUBLE_EQ(out.data()[i], z.data()[i]);
}

TEST(Adapter, FreshAttachmentIsExactNoOp) {
    std::mt19937_64 rng = substream(7, "adapter", 1);
    AdapterAttachment att = make_adapter(8, 4, rng);
    Tensor z = Tensor::randn({5, 8}, rng, 1.0);
    for (double g : {0.3, 0.7, 1.0}) {
        Tensor out = adapter_forward(att, z, g);
        for (size_t i = 0; i < z.numel(); ++i) EXPECT_DOUBLE_EQ(out.data()[i], z.data()[i]);
    }
}

TEST(Adapter, MatchesHandComposedBottleneck) {
    std::mt19937_64 rng = substream(7, "adapter", 2);
    AdapterAttachment att = make_adapter(6, 3, rng);
    att.W_up = Tensor::randn({6, 3}, rng, 0.8);
    att.b_up = Tensor::randn({6}, rng, 0.3);
    Tensor z = Tensor::randn({4, 6}, rng, 1.0);
    double g = 0.6;
    Tensor out = adapter_forward(att, z, g);
    Tensor down = add_rowvec(matmul(z, transpose(att.W_down)), att.b_down);
    Tensor up = add_rowvec(matmul(gelu(down), transpose(att.W_up)), att.b_up);
    for (size_t i = 0; i < z.numel(); ++i)
        EXPECT_NEAR(out.data()[i], z.data()[i] + g * up.data()[i], 1e-15);
}

TEST(Adapter, GradsPassFiniteDifferences) {
    std::mt19937_64 rng = substream(7, "adapter", 3);
    AdapterAttachment att = make_adapter(6, 3, rng);
    att.W_up = Tensor::randn({6, 3}, rng, 0.5);
    for (Tensor t : {att.W_down, att.b_down, att.W_up, att.b_up}) t.set_requires_grad(true);
    Tensor z = Tensor::randn({4, 6}, rng, 1.0);
    Tensor g = sigmoid(Tensor::scalar(0.4, true));  // gate value on the graph
    auto f = [&]() { return mean_all(mul(adapter_forward(att, z, g), adapter_forward(att, z, g))); };
    GradReport r = finite_diff_check(
        f, {{"W_down", att.W_down}, {"b_down", att.b_down}, {"W_up", att.W_up}, {"b_up", att.b_up}});
    EXPECT_TRUE(r.passed()) << format_grad_report(r);
}

TEST(Adapter, RejectsOutOfRangeGateAndBottleneck) {
    std::mt19937_64 rng = substream(7, "adapter", 4);
    AdapterAttachment att = make_adapter(8, 4, rng);
    Tensor z = Tensor::zeros({2, 8});
    EXPECT_THROW(adapter_forward(att, z, -0.1), std::invalid_argument);
    EXPECT_THROW(adapter_forward(att, z, 1.5), std::invalid_argument);
    EXPECT_THROW(make_adapter(8, 9, rng), std::invalid_argument);
    EXPECT_THROW(make_adapter(8, 0, rng), std::invalid_argument);
}

TEST(Prefix, MaterializeShapesAndDeterminism) {
    std::mt19937_64 rng = substream(8, "prefix", 0);
    PrefixBank bank = make_prefix_bank(3, {0, 1, 2}, 5, 8, rng);
    PrefixKV kv = prefix_materialize(bank, 1);
    EXPECT_EQ(kv.P_K.shape(), (Shape{8, 5}));
    EXPECT_EQ(kv.P_V.shape(), (Shape{8, 5}));
    PrefixKV again = prefix_materialize(bank, 1);
    for (size_t i = 0; i < kv.P_K.numel(); ++i)
        EXPECT_DOUBLE_EQ(again.P_K.data()[i], kv.P_K.data()[i]);
}

TEST(Prefix, ColumnSplitIsKThenV) {
    std::mt19937_64 rng = substream(8, "prefix", 1);
    PrefixBank bank = make_prefix_bank(1, {0}, 3, 4, rng);
    // hand-compute the reparam output and compare against the split
    const Tensor& e = bank.sources[0];
    Tensor h = gelu(add_rowvec(matmul(e, transpose(bank.W1)), bank.b1));
    Tensor o = add_rowvec(matmul(h, transpose(bank.W2)), bank.b2);
    PrefixKV kv = prefix_materialize(bank, 0);
    for (int l = 0; l < 3; ++l)
        for (int d = 0; d < 4; ++d) {
            EXPECT_DOUBLE_EQ(kv.P_K(d, l), o(l, d));
            EXPECT_DOUBLE_EQ(kv.P_V(d, l), o(l, d + 4));
        }
}

TEST(Prefix, ZeroFinalReparamLayerGivesZeroPrefixes) {
    std::mt19937_64 rng = substream(8, "prefix", 2);
    PrefixBank bank = make_prefix_bank(2, {0, 1}, 4, 6, rng);
    bank.W2 = Tensor::zeros(bank.W2.shape());
    bank.b2 = Tensor::zeros(bank.b2.shape());
    PrefixKV kv = prefix_materialize(bank, 0);
    for (double v : kv.P_K.data()) EXPECT_DOUBLE_EQ(v, 0.0);
    for (double v : kv.P_V.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Prefix, ShallowBankOnlyLayerZero) {
    std::mt19937_64 rng = substream(8, "prefix", 3);
    PrefixBank bank = make_prefix_bank(4, {0}, 5, 8, rng);
    EXPECT_TRUE(bank.has_layer(0));
    for (int l = 1; l < 4; ++l) EXPECT_FALSE(bank.has_layer(l));
    EXPECT_THROW(prefix_materialize(bank, 2), std::invalid_argument);
    EXPECT_THROW(prefix_materialize(bank, 7), std::invalid_argument);
}

TEST(Prefix, RejectsBadArguments) {
    std::mt19937_64 rng = substream(8, "prefix", 4);
    EXPECT_THROW(make_prefix_bank(2, {0}, 0, 8, rng), std::invalid_argument);
    EXPECT_THROW(make_prefix_bank(2, {5}, 4, 8, rng), std::invalid_argument);
}

TEST(ParamCounts, ClosedForms) {
    EXPECT_EQ(lora_param_count(4, 32, 32), 4u * 64u);
    // 2 layers x 2 targets at r=4, d=k=32: 4*(32+32)*2*2 = 1024
    EXPECT_EQ(4u * lora_param_count(4, 32, 32), 1024u);
    // prefix: sources n*L*D + reparam (2D*D + 2D) + (2D*2D + 2D)
    EXPECT_EQ(prefix_param_count(1, 4, 6), 4u * 6u + (12u * 6u + 12u) + (12u * 12u + 12u));
    EXPECT_EQ(adapter_param_count(2, 16, 8), 2u * (2u * 16u * 8u + 8u + 16u));
    EXPECT_EQ(gate_param_count(16, 4), 4u * 16u + 4u + 4u + 1u);
}
