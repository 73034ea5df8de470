#include <gtest/gtest.h>

#include "sadinet/gradcheck.hpp"
#include "sadinet/ops.hpp"
#include "sadinet/tensor.hpp"
#include "test_util.hpp"

using namespace sadi;

TEST(Tensor, ShapeInvariants) {
    Tensor t(Shape{2, 3, 4});
    EXPECT_EQ(t.numel(), 24);
    EXPECT_THROW(Tensor(Shape{2, 0}), std::invalid_argument);
    EXPECT_THROW(Tensor::from({2, 2}, {1.0, 2.0}), std::invalid_argument);
}

TEST(Tensor, GradOfSumIsOnes) {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Graph g;
    Tensor loss = sum_all(x);
    g.backward(loss);
    for (double v : x.grad()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Tensor, GradOfHalfSquareIsX) {
    Rng rng(7);
    Tensor x = testutil::random_tensor({3, 4}, rng);
    x.set_requires_grad(true);
    Graph g;
    Tensor loss = mul_scalar(sum_all(mul(x, x)), 0.5);
    g.backward(loss);
    for (std::size_t i = 0; i < x.values().size(); ++i)
        EXPECT_NEAR(x.grad()[i], x.values()[i], 1e-12);
}

TEST(Tensor, BackwardRejectsNonScalar) {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Graph g;
    Tensor y = mul(x, x);
    EXPECT_THROW(g.backward(y), std::invalid_argument);
}

TEST(Tensor, BackwardRejectsUnrecordedLoss) {
    Graph g;
    Tensor loss = Tensor::scalar(1.0);
    EXPECT_THROW(g.backward(loss), std::invalid_argument);
}

TEST(Graph, TapeIsTopologicallyOrdered) {
    Rng rng(3);
    Tensor x = testutil::random_tensor({2, 2}, rng);
    x.set_requires_grad(true);
    Graph g;
    Tensor a = mul(x, x);
    Tensor b = add(a, x);
    Tensor loss = sum_all(mul(b, a));
    g.backward(loss);
    for (int id = 0; id < g.size(); ++id)
        for (int in : g.node(id).inputs)
            EXPECT_LT(in, id);
}

// A reused intermediate must contribute through every consumer exactly once:
// loss = sum(a*a + a) with a = 2x has d(loss)/dx = 2*(2*(2x) + 1).
TEST(Graph, SharedNodeAccumulatesOnce) {
    Tensor x = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
    Graph g;
    Tensor a = mul_scalar(x, 2.0);
    Tensor loss = sum_all(add(mul(a, a), a));
    g.backward(loss);
    for (std::size_t i = 0; i < 3; ++i)
        EXPECT_NEAR(x.grad()[i], 2.0 * (2.0 * (2.0 * x.values()[i]) + 1.0), 1e-12);
}

TEST(Graph, NoGradGuardSuppressesRecording) {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Graph g;
    {
        NoGradGuard lock;
        Tensor y = mul(x, x);
        EXPECT_EQ(y.node(), -1);
    }
    EXPECT_EQ(g.size(), 0);
}

TEST(Graph, NodeIdsResetWhenGraphDies) {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor y;
    {
        Graph g;
        y = mul(x, x);
        EXPECT_GE(y.node(), 0);
    }
    EXPECT_EQ(y.node(), -1);
}

TEST(Graph, ReportsNonFiniteNode) {
    Tensor x = Tensor::from({1}, {0.0}, true);
    Graph g;
    Tensor bad = div(Tensor::scalar(1.0), x);  // 1/0 -> inf
    Tensor loss = sum_all(mul(bad, x));
    const int id = g.first_nonfinite_node();
    ASSERT_GE(id, 0);
    EXPECT_STREQ(g.node(id).op, "div");
    (void)loss;
}

TEST(Determinism, SameSeedSameBits) {
    auto run = [] {
        Rng rng(42);
        Tensor x = testutil::random_tensor({2, 3, 4, 4}, rng);
        x.set_requires_grad(true);
        Tensor w = testutil::random_tensor({2, 3, 3, 3}, rng);
        w.set_requires_grad(true);
        Graph g;
        Tensor loss = sum_all(relu(conv2d(x, w, 1, 1, 1)));
        g.backward(loss);
        std::vector<double> out(loss.values().begin(), loss.values().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    const auto a = run();
    const auto b = run();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Finiteness, ExpClampKeepsValuesFinite) {
    Tensor x = Tensor::from({3}, {-1e9, 0.0, 1e9}, true);
    Graph g;
    Tensor y = sadi::exp(x);
    EXPECT_TRUE(y.all_finite());
    Tensor loss = sum_all(y);
    g.backward(loss);
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);  // clamped region
    EXPECT_DOUBLE_EQ(x.grad()[1], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
}

TEST(GradCheck, SumHasZeroError) {
    Rng rng(1);
    Tensor x = testutil::random_tensor({2, 3}, rng);
    auto report = grad_check([&] { return sum_all(x); }, {{"x", x}});
    EXPECT_LT(report.max_rel_err, 1e-10);
}

TEST(GradCheck, ConvReluSumChain) {
    Rng rng(5);
    Tensor x = testutil::random_tensor({1, 1, 4, 4}, rng);
    Tensor w = testutil::random_tensor({1, 1, 3, 3}, rng);
    auto report = grad_check([&] { return sum_all(relu(conv2d(x, w, 1, 1, 1))); },
                             {{"x", x}, {"w", w}});
    EXPECT_LT(report.max_rel_err, 1e-4);
}

TEST(GradCheck, SoftmaxLogSumChain) {
    Rng rng(6);
    Tensor x = testutil::random_tensor({2, 5}, rng);
    auto report =
        grad_check([&] { return sum_all(mul(sadi::log(softmax(x, 1)), x)); }, {{"x", x}});
    EXPECT_LT(report.max_rel_err, 1e-4);
}

// A deliberately corrupted backward rule must be caught by the checker.
TEST(GradCheck, DetectsCorruptedBackwardRule) {
    auto corrupted_scale = [](const Tensor& x) {
        Tensor y(x.shape());
        for (std::int64_t i = 0; i < x.numel(); ++i) y.values()[i] = 3.0 * x.values()[i];
        auto xd = x.rep();
        auto yd = y.rep();
        detail::record("corrupted_scale", {x}, y, [xd, yd] {
            auto& xg = detail::grad_of(xd);
            for (std::size_t i = 0; i < yd->g.size(); ++i) xg[i] += 2.0 * yd->g[i];  // wrong
        });
        return y;
    };
    Rng rng(8);
    Tensor x = testutil::random_tensor({4}, rng);
    auto report = grad_check([&] { return sum_all(corrupted_scale(x)); }, {{"x", x}});
    EXPECT_GT(report.max_rel_err, 0.1);
}
