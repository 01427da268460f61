#include "mopeft/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace mopeft;

namespace {

// Central-difference derivative of a scalar functional w.r.t. one coordinate
// of a leaf tensor, rebuilding the graph on each probe.
double numeric_grad(const std::function<double()>& f, Tensor leaf, size_t i,
                    double h = 1e-5) {
    double saved = leaf.data()[i];
    leaf.data()[i] = saved + h;
    double fp = f();
    leaf.data()[i] = saved - h;
    double fm = f();
    leaf.data()[i] = saved;
    return (fp - fm) / (2.0 * h);
}

}  // namespace

TEST(Tensor, ConstructionAndShape) {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.rank(), 2);
    EXPECT_EQ(t.extent(0), 2);
    EXPECT_EQ(t.extent(1), 3);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_DOUBLE_EQ(t(1, 2), 6.0);
    EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), std::invalid_argument);
    EXPECT_THROW(Tensor::zeros({0, 3}), std::invalid_argument);
}

TEST(Tensor, MatmulIdentity) {
    Tensor I = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(I, b);
    EXPECT_EQ(c.shape(), (Shape{2, 2}));
    EXPECT_DOUBLE_EQ(c(0, 0), 5.0);
    EXPECT_DOUBLE_EQ(c(0, 1), 6.0);
    EXPECT_DOUBLE_EQ(c(1, 0), 7.0);
    EXPECT_DOUBLE_EQ(c(1, 1), 8.0);
}

TEST(Tensor, MatmulHandValues) {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 1}, {1, 1});
    Tensor c = matmul(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_DOUBLE_EQ(c(0, 0), 3.0);
    EXPECT_DOUBLE_EQ(c(1, 0), 7.0);
}

TEST(Tensor, MatmulShapeMismatchNamesBothShapes) {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL() << "expected shape-mismatch error";
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2 x 3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4 x 5]"), std::string::npos) << msg;
    }
}

TEST(Tensor, SoftmaxSymmetry) {
    Tensor x = Tensor::from({1, 2}, {0.0, 0.0});
    Tensor y = softmax_lastdim(x);
    EXPECT_NEAR(y(0, 0), 0.5, 1e-15);
    EXPECT_NEAR(y(0, 1), 0.5, 1e-15);
}

TEST(Tensor, SoftmaxClosedForm) {
    Tensor x = Tensor::from({1, 2}, {std::log(2.0), 0.0});
    Tensor y = softmax_lastdim(x);
    EXPECT_NEAR(y(0, 0), 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(y(0, 1), 1.0 / 3.0, 1e-12);
}

TEST(Tensor, SoftmaxShiftInvarianceAndRowSums) {
    std::mt19937_64 rng = substream(7, "softmax-test", 0);
    Tensor x = Tensor::randn({5, 9}, rng, 3.0);
    Tensor y = softmax_lastdim(x);
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 9; ++j) s += y(i, j);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    // add a per-row constant; output must be unchanged
    for (double c : {-17.25, 0.5, 1234.0}) {
        Tensor shifted = Tensor::from(x.shape(), x.data());
        for (double& v : shifted.data()) v += c;
        Tensor y2 = softmax_lastdim(shifted);
        for (size_t i = 0; i < y.numel(); ++i)
            EXPECT_NEAR(y2.data()[i], y.data()[i], 1e-12);
    }
    // the frozen [c, c+ln3] case
    Tensor z = Tensor::from({1, 2}, {10.0, 10.0 + std::log(3.0)});
    Tensor yz = softmax_lastdim(z);
    EXPECT_NEAR(yz(0, 0), 0.25, 1e-12);
    EXPECT_NEAR(yz(0, 1), 0.75, 1e-12);
}

TEST(Tensor, SoftmaxRejectsNonFinite) {
    Tensor x = Tensor::from({1, 2}, {std::numeric_limits<double>::infinity(), 0.0});
    EXPECT_THROW(softmax_lastdim(x), std::domain_error);
}

TEST(Tensor, ElementwiseDefinitions) {
    EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
    EXPECT_DOUBLE_EQ(relu(Tensor::scalar(-3.0)).item(), 0.0);
    EXPECT_DOUBLE_EQ(relu(Tensor::scalar(2.5)).item(), 2.5);
    EXPECT_DOUBLE_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0);
    // gelu(x) -> x for large x, -> 0 for very negative x
    EXPECT_NEAR(gelu(Tensor::scalar(10.0)).item(), 10.0, 1e-9);
    EXPECT_NEAR(gelu(Tensor::scalar(-10.0)).item(), 0.0, 1e-9);
}

TEST(Tensor, BroadcastRules) {
    Tensor v = Tensor::from({1, 3}, {1, 2, 3});
    Tensor s = Tensor::scalar(10.0);
    Tensor sum = add(v, s);
    EXPECT_DOUBLE_EQ(sum(0, 0), 11.0);
    EXPECT_DOUBLE_EQ(sum(0, 2), 13.0);
    Tensor prod = mul(s, v);
    EXPECT_DOUBLE_EQ(prod(0, 1), 20.0);
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 2});
    try {
        add(a, b);
        FAIL() << "expected incompatible-shape error";
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2 x 3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[3 x 2]"), std::string::npos) << msg;
    }
}

TEST(Backward, SquareGradient) {
    Tensor x = Tensor::scalar(3.0, /*requires_grad=*/true);
    Tensor loss = mul(x, x);
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SigmoidAtZero) {
    Tensor x = Tensor::scalar(0.0, true);
    Tensor loss = sigmoid(x);
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Backward, NonScalarLossRejected) {
    Tensor x = Tensor::from({1, 2}, {1.0, 2.0}, true);
    Tensor y = add(x, x);
    EXPECT_THROW(backward(y), std::invalid_argument);
}

TEST(Backward, AccumulatesAcrossCalls) {
    Tensor x = Tensor::scalar(3.0, true);
    {
        Tensor loss = mul(x, x);
        backward(loss);
    }
    {
        Tensor loss = mul(x, x);
        backward(loss);
    }
    EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
    x.zero_grad();
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Backward, UnreachableLeafKeepsZeroGrad) {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor orphan = Tensor::scalar(5.0, true);
    Tensor loss = mul(x, x);
    backward(loss);
    EXPECT_DOUBLE_EQ(orphan.grad()[0], 0.0);
}

TEST(Backward, MatmulGradsMatchFiniteDifferences) {
    std::mt19937_64 rng = substream(11, "matmul-fd", 0);
    Tensor a = Tensor::randn({3, 3}, rng, 1.0, true);
    Tensor b = Tensor::randn({3, 3}, rng, 1.0, true);
    auto f = [&]() { return sum_all(matmul(a, b)).item(); };
    Tensor loss = sum_all(matmul(a, b));
    backward(loss);
    for (size_t i = 0; i < a.numel(); ++i) {
        double num = numeric_grad(f, a, i);
        double ana = a.grad()[i];
        double rel = std::fabs(ana - num) / std::max({1e-8, std::fabs(ana), std::fabs(num)});
        EXPECT_LT(rel, 1e-6) << "a[" << i << "]";
    }
    for (size_t i = 0; i < b.numel(); ++i) {
        double num = numeric_grad(f, b, i);
        double ana = b.grad()[i];
        double rel = std::fabs(ana - num) / std::max({1e-8, std::fabs(ana), std::fabs(num)});
        EXPECT_LT(rel, 1e-6) << "b[" << i << "]";
    }
}

TEST(Backward, DeepCompositeGradsMatchFiniteDifferences) {
    // exercise softmax, gelu, sigmoid, slicing, concat, row reductions in one graph
    std::mt19937_64 rng = substream(13, "composite-fd", 0);
    Tensor w = Tensor::randn({4, 6}, rng, 0.7, true);
    Tensor v = Tensor::randn({1, 6}, rng, 0.7, true);
    auto build = [&]() {
        Tensor h = add_rowvec(w, v);
        Tensor s = softmax_lastdim(h);
        Tensor g = gelu(slice_cols(s, 1, 3));
        Tensor cat = concat_cols({g, sigmoid(slice_cols(h, 0, 2))});
        Tensor m = mean_rows(cat);
        return sum_all(mul(m, m));
    };
    Tensor loss = build();
    backward(loss);
    auto f = [&]() { return build().item(); };
    std::vector<Tensor> leaves = {w, v};
    for (Tensor& leaf : leaves) {
        for (size_t i = 0; i < leaf.numel(); ++i) {
            double num = numeric_grad(f, leaf, i);
            double ana = leaf.grad()[i];
            double rel = std::fabs(ana - num) / std::max({1e-8, std::fabs(ana), std::fabs(num)});
            EXPECT_LT(rel, 1e-5) << leaf.op_name() << "[" << i << "]";
        }
    }
}

TEST(Backward, SharedSubgraphAccumulates) {
    // y = x + x must give dy/dx = 2 through two graph paths
    Tensor x = Tensor::scalar(4.0, true);
    Tensor loss = add(x, x);
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Ops, TransposeRoundTrip) {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = transpose(a);
    EXPECT_EQ(t.shape(), (Shape{3, 2}));
    EXPECT_DOUBLE_EQ(t(2, 1), 6.0);
    Tensor back = transpose(t);
    for (size_t i = 0; i < a.numel(); ++i) EXPECT_DOUBLE_EQ(back.data()[i], a.data()[i]);
}

TEST(Ops, RowColumnHelpers) {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor rs = row_sum(x);
    EXPECT_EQ(rs.shape(), (Shape{2, 1}));
    EXPECT_DOUBLE_EQ(rs(0, 0), 6.0);
    EXPECT_DOUBLE_EQ(rs(1, 0), 15.0);
    Tensor mr = mean_rows(x);
    EXPECT_EQ(mr.shape(), (Shape{1, 3}));
    EXPECT_DOUBLE_EQ(mr(0, 0), 2.5);
    EXPECT_DOUBLE_EQ(mr(0, 2), 4.5);
    Tensor centered = sub_col(x, rs);
    EXPECT_DOUBLE_EQ(centered(0, 0), -5.0);
    Tensor ratios = div_col(x, rs);
    EXPECT_NEAR(ratios(1, 2), 6.0 / 15.0, 1e-15);
    double total = 0.0;
    for (int j = 0; j < 3; ++j) total += ratios(0, j);
    EXPECT_NEAR(total, 1.0, 1e-15);
}

TEST(Ops, SliceAndConcat) {
    Tensor x = Tensor::from({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor left = slice_cols(x, 0, 2);
    Tensor right = slice_cols(x, 2, 2);
    EXPECT_DOUBLE_EQ(left(1, 1), 6.0);
    EXPECT_DOUBLE_EQ(right(0, 0), 3.0);
    Tensor glued = concat_cols({left, right});
    for (size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(glued.data()[i], x.data()[i]);

    Tensor top = slice_rows(x, 0, 1);
    Tensor bottom = slice_rows(x, 1, 1);
    Tensor stacked = concat_rows(top, bottom);
    for (size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(stacked.data()[i], x.data()[i]);

    EXPECT_THROW(slice_cols(x, 3, 2), std::invalid_argument);
    EXPECT_THROW(slice_rows(x, 0, 3), std::invalid_argument);
    EXPECT_THROW(concat_rows(Tensor::zeros({1, 2}), Tensor::zeros({1, 3})),
                 std::invalid_argument);
}

TEST(Ops, SliceConcatGradientsRoute) {
    Tensor x = Tensor::from({1, 4}, {1, 2, 3, 4}, true);
    // loss = sum(2*left || right) so grads are [2,2,1,1]
    Tensor left = scale(slice_cols(x, 0, 2), 2.0);
    Tensor right = slice_cols(x, 2, 2);
    Tensor loss = sum_all(concat_cols({left, right}));
    backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[3], 1.0);
}

TEST(Ops, DetachedRowMaxBlocksGradient) {
    Tensor x = Tensor::from({2, 2}, {1, 5, -2, 3}, true);
    Tensor mx = detached_row_max({x});
    EXPECT_DOUBLE_EQ(mx(0, 0), 5.0);
    EXPECT_DOUBLE_EQ(mx(1, 0), 3.0);
    EXPECT_FALSE(mx.requires_grad());
    Tensor loss = sum_all(sub_col(x, mx));
    backward(loss);
    for (size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 1.0);
}

TEST(Ops, MeanAll) {
    Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
    Tensor m = mean_all(x);
    EXPECT_DOUBLE_EQ(m.item(), 2.5);
    backward(m);
    for (size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 0.25);
}

TEST(Rng, SubstreamsAreDeterministicAndDistinct) {
    auto a1 = substream(42, "weights", 0);
    auto a2 = substream(42, "weights", 0);
    auto b = substream(42, "weights", 1);
    auto c = substream(42, "data", 0);
    EXPECT_EQ(a1(), a2());
    auto a1v = a1();
    EXPECT_NE(a1v, b());
    EXPECT_NE(a1v, c());
    auto d = substream(43, "weights", 0);
    EXPECT_NE(a1(), d());
}
