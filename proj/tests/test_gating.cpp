#include "mopeft/gating.hpp"

#include <gtest/gtest.h>

#include "mopeft/gradcheck.hpp"

using namespace mopeft;

namespace {

GateNet zero_gate(int d, int dg) {
    GateNet g;
    g.fc1_w = Tensor::zeros({dg, d});
    g.fc1_b = Tensor::zeros({dg});
    g.fc2_w = Tensor::zeros({1, dg});
    g.fc2_b = Tensor::zeros({1});
    return g;
}

}  // namespace

TEST(Gate, ZeroInitializedOutputsHalf) {
    GateNet g = zero_gate(6, 3);
    Tensor h = Tensor::from({2, 6}, std::vector<double>(12, 1.5));
    EXPECT_DOUBLE_EQ(gate_forward(g, h).item(), 0.5);
}

TEST(Gate, LargeBiasApproachesOneButStaysInside) {
    GateNet g = zero_gate(6, 3);
    g.fc2_b = Tensor::from({1}, {30.0});
    Tensor h = Tensor::zeros({2, 6});
    double v = gate_forward(g, h).item();
    EXPECT_GT(v, 0.999999);
    EXPECT_LT(v, 1.0);
    g.fc2_b = Tensor::from({1}, {-30.0});
    double w = gate_forward(g, h).item();
    EXPECT_LT(w, 1e-6);
    EXPECT_GT(w, 0.0);
}

TEST(Gate, StrictlyIncreasingInLogit) {
    std::mt19937_64 rng = substream(31, "gate", 0);
    GateNet g = make_gate(8, 4, 0, PeftMethod::kLora, rng);
    Tensor h = Tensor::randn({3, 8}, rng, 1.0);
    double prev = -1.0;
    for (double bias = -4.0; bias <= 4.0; bias += 0.5) {
        g.fc2_b = Tensor::from({1}, {bias});
        double v = gate_forward(g, h).item();
        EXPECT_GT(v, prev);
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        prev = v;
    }
}

TEST(Gate, GradientsPassFiniteDifferences) {
    std::mt19937_64 rng = substream(31, "gate", 1);
    GateNet g = make_gate(6, 4, 0, PeftMethod::kAdapter, rng);
    for (Tensor t : {g.fc1_w, g.fc1_b, g.fc2_w, g.fc2_b}) t.set_requires_grad(true);
    Tensor h = Tensor::randn({3, 6}, rng, 1.0);
    auto f = [&]() { return gate_forward(g, h); };
    GradReport r = finite_diff_check(
        f, {{"fc1_w", g.fc1_w}, {"fc1_b", g.fc1_b}, {"fc2_w", g.fc2_w}, {"fc2_b", g.fc2_b}});
    EXPECT_TRUE(r.passed()) << format_grad_report(r);
}

TEST(Gate, EffectiveScaleArithmetic) {
    GateNet g = zero_gate(6, 3);
    Tensor h = Tensor::zeros({2, 6});
    // gate 0.5, alpha 16, r 8 -> scale 1.0
    EXPECT_DOUBLE_EQ(lora_effective_scale(g, h, 16.0, 8).item(), 1.0);
    // monotone in the gate output, vanishing as the gate closes
    g.fc2_b = Tensor::from({1}, {-40.0});
    double lo = lora_effective_scale(g, h, 16.0, 8).item();
    g.fc2_b = Tensor::from({1}, {2.0});
    double hi = lora_effective_scale(g, h, 16.0, 8).item();
    EXPECT_LT(lo, 1e-10);
    EXPECT_GT(hi, lo);
    EXPECT_THROW(lora_effective_scale(g, h, 16.0, 0), std::invalid_argument);
}

TEST(Telemetry, RecordCountsAndOrdering) {
    GateTelemetry tel;
    for (int sample = 0; sample < 1; ++sample)
        for (int layer = 0; layer < 2; ++layer)
            for (PeftMethod m : {PeftMethod::kLora, PeftMethod::kPrefix, PeftMethod::kAdapter})
                record_activation(tel, sample, layer, m, 0.6);
    EXPECT_EQ(tel.records.size(), 6u);  // 2 layers x 3 methods
    // stable sample-major, layer-minor order
    EXPECT_EQ(tel.records[0].layer, 0);
    EXPECT_EQ(tel.records[3].layer, 1);
}

TEST(Telemetry, RejectsDuplicatesAndOutOfRange) {
    GateTelemetry tel;
    record_activation(tel, 0, 0, PeftMethod::kLora, 0.5);
    EXPECT_THROW(record_activation(tel, 0, 0, PeftMethod::kLora, 0.7), std::invalid_argument);
    EXPECT_THROW(record_activation(tel, 1, 0, PeftMethod::kLora, 0.0), std::invalid_argument);
    EXPECT_THROW(record_activation(tel, 1, 0, PeftMethod::kLora, 1.0), std::invalid_argument);
    EXPECT_THROW(record_activation(tel, 1, 0, PeftMethod::kLora, -0.1), std::invalid_argument);
    EXPECT_EQ(tel.records.size(), 1u);
}

TEST(Telemetry, EmptyPassHasNoRecords) {
    GateTelemetry tel;
    EXPECT_TRUE(tel.records.empty());
    SelectionCounts c = selection_counts(tel, 0.5);
    EXPECT_EQ(c.n_layers, 0);
    EXPECT_EQ(c.total_samples, 0u);
    for (size_t m = 0; m < 3; ++m) EXPECT_EQ(c.overall[m], 0u);
}

TEST(Selection, UniformGatesCountEverything) {
    GateTelemetry tel;
    const int n = 5, k = 3;
    for (int s = 0; s < n; ++s)
        for (int l = 0; l < k; ++l)
            for (PeftMethod m : {PeftMethod::kLora, PeftMethod::kPrefix, PeftMethod::kAdapter})
                record_activation(tel, s, l, m, 0.6);
    SelectionCounts c = selection_counts(tel, 0.5);
    EXPECT_EQ(c.n_layers, k);
    EXPECT_EQ(c.total_samples, static_cast<size_t>(n));
    for (size_t m = 0; m < 3; ++m) {
        EXPECT_EQ(c.overall[m], static_cast<size_t>(n * k));
        for (int l = 0; l < k; ++l) EXPECT_EQ(c.per_layer[static_cast<size_t>(l)][m], static_cast<size_t>(n));
    }
    // gate values are strictly below 1, so tau = 1 counts nothing
    SelectionCounts zero = selection_counts(tel, 1.0);
    for (size_t m = 0; m < 3; ++m) EXPECT_EQ(zero.overall[m], 0u);
    EXPECT_THROW(selection_counts(tel, 1.5), std::invalid_argument);
}

TEST(Selection, MatchesBruteForceOnMixedRecords) {
    std::mt19937_64 rng = substream(32, "selection", 0);
    std::uniform_real_distribution<double> unif(0.001, 0.999);
    GateTelemetry tel;
    const int n = 17, k = 4;
    for (int s = 0; s < n; ++s)
        for (int l = 0; l < k; ++l)
            for (PeftMethod m : {PeftMethod::kLora, PeftMethod::kPrefix, PeftMethod::kAdapter})
                record_activation(tel, s, l, m, unif(rng));
    // telemetry totals: 3 records per (sample, layer)
    EXPECT_EQ(tel.records.size(), static_cast<size_t>(3 * n * k));
    const double tau = 0.5;
    SelectionCounts c = selection_counts(tel, tau);
    size_t brute[3] = {0, 0, 0};
    std::vector<std::array<size_t, 3>> brute_layer(k, {0, 0, 0});
    for (const GateRecord& r : tel.records)
        if (r.g > tau) {
            brute[static_cast<size_t>(r.method)]++;
            brute_layer[static_cast<size_t>(r.layer)][static_cast<size_t>(r.method)]++;
        }
    for (size_t m = 0; m < 3; ++m) {
        EXPECT_EQ(c.overall[m], brute[m]);
        for (int l = 0; l < k; ++l)
            EXPECT_EQ(c.per_layer[static_cast<size_t>(l)][m], brute_layer[static_cast<size_t>(l)][m]);
    }
}
