#include <gtest/gtest.h>

#include "sadinet/backbone.hpp"
#include "sadinet/gradcheck.hpp"
#include "test_util.hpp"

using namespace sadi;

namespace {

HourglassConfig toy_config() {
    HourglassConfig cfg;
    cfg.stacks = 1;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.joints = 2;
    cfg.heatmap = 8;
    cfg.dilation = 2;
    cfg.se_reduction = 2;
    return cfg;
}

void randomize(ParamList& params, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : params)
        for (auto& v : p.tensor.values()) v = rng.uniform(-0.4, 0.4);
}

}  // namespace

TEST(Stem, ShapeContract256To64) {
    HourglassConfig cfg;
    cfg.base_channels = 4;
    cfg.se_reduction = 4;
    Stem stem = Stem::make(cfg);
    stem.init(3, "stem");
    Tensor img(Shape{1, 3, 256, 256}, 0.5);
    Tensor out = stem.forward(img);
    EXPECT_EQ(out.shape(), (Shape{1, 4, 64, 64}));
}

TEST(Stem, ZeroImageZeroBiasesGiveZeroFeatures) {
    HourglassConfig cfg = toy_config();
    Stem stem = Stem::make(cfg);
    stem.init(4, "stem");  // init leaves biases at zero
    Tensor img(Shape{1, 3, 32, 32});
    Tensor out = stem.forward(img);
    for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Stem, MatchesPrimitiveComposition) {
    HourglassConfig cfg = toy_config();
    Stem stem = Stem::make(cfg);
    ParamList params;
    stem.collect("stem", params);
    randomize(params, 5);
    Rng rng(6);
    Tensor img = testutil::random_tensor({1, 3, 32, 32}, rng, 0.0, 1.0);
    Tensor got = stem.forward(img);
    Tensor want = stem.unit2.forward(
        maxpool2d(stem.unit1.forward(add_channel_bias(conv2d(img, stem.conv7.w, 2, 3), stem.conv7.b))));
    EXPECT_LT(testutil::max_abs_diff(got, want), 1e-12);
}

TEST(Backbone, RejectsWrongInputSize) {
    Backbone b = Backbone::make(toy_config());
    Tensor img(Shape{1, 3, 64, 64});
    EXPECT_THROW(b.forward(img), std::invalid_argument);
}

TEST(Backbone, AllZeroParametersGiveZeroH1) {
    Backbone b = Backbone::make(toy_config());  // weights default-zero
    Tensor img(Shape{1, 3, 32, 32}, 0.3);
    auto out = b.forward(img);
    ASSERT_EQ(out.h1.size(), 1u);
    for (double v : out.h1[0].values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Backbone, TwoStacksEmitTwoH1StacksWithContractShapes) {
    HourglassConfig cfg = toy_config();
    cfg.stacks = 2;
    Backbone b = Backbone::make(cfg);
    b.init(7);
    Tensor img(Shape{2, 3, 32, 32}, 0.25);
    auto out = b.forward(img);
    ASSERT_EQ(out.h1.size(), 2u);
    for (const auto& h : out.h1) EXPECT_EQ(h.shape(), (Shape{2, 2, 8, 8}));
}

TEST(Backbone, PyramidScalesAndChannelPlan) {
    HourglassConfig cfg;
    cfg.stacks = 2;
    cfg.depth = 4;
    cfg.base_channels = 4;
    cfg.joints = 3;
    cfg.heatmap = 64;
    cfg.se_reduction = 4;
    Backbone b = Backbone::make(cfg);
    b.init(8);
    Tensor img(Shape{1, 3, 256, 256}, 0.2);
    auto out = b.forward(img);
    ASSERT_EQ(out.pyramid.size(), 4u);
    // scales 64/32/16/8 px with channels doubling from the base:
    // the full-scale plan (base 64) is exactly (64,128,256,512)
    const int want_ch[] = {4, 8, 16, 32};
    const int want_sz[] = {64, 32, 16, 8};
    for (int l = 0; l < 4; ++l) {
        EXPECT_EQ(out.pyramid[static_cast<std::size_t>(l)].dim(1), want_ch[l]);
        EXPECT_EQ(out.pyramid[static_cast<std::size_t>(l)].dim(2), want_sz[l]);
        EXPECT_EQ(out.pyramid[static_cast<std::size_t>(l)].dim(3), want_sz[l]);
    }
    for (const auto& h : out.h1) EXPECT_EQ(h.shape(), (Shape{1, 3, 64, 64}));
}

// Depth-1 hourglass is a single encoder unit feeding bottleneck and head:
// hand-compose the same units and compare.
TEST(Backbone, Depth1HourglassMatchesHandComposition) {
    HourglassConfig cfg = toy_config();
    cfg.depth = 1;
    cfg.heatmap = 4;
    HourglassStack s = HourglassStack::make(cfg, true);
    ParamList params;
    s.collect("s", params);
    randomize(params, 9);
    Rng rng(10);
    Tensor x = testutil::random_tensor({1, 2, 4, 4}, rng);
    auto out = s.forward(x);
    Tensor f = s.bottleneck.forward(s.enc[0].forward(x));
    Tensor want = s.head.forward(f);
    EXPECT_LT(testutil::max_abs_diff(out.h1, want), 1e-12);
}

// Depth-2 recursion against an explicit down/up/skip reference.
TEST(Backbone, Depth2HourglassMatchesHandComposition) {
    HourglassConfig cfg = toy_config();
    HourglassStack s = HourglassStack::make(cfg, true);
    ParamList params;
    s.collect("s", params);
    randomize(params, 11);
    Rng rng(12);
    Tensor x = testutil::random_tensor({1, 2, 8, 8}, rng);
    auto out = s.forward(x);

    Tensor e0 = s.enc[0].forward(x);
    Tensor e1 = s.enc[1].forward(maxpool2d(e0));
    Tensor bot = s.bottleneck.forward(e1);
    Tensor up = s.up[0].forward(nearest_upsample2d(bot, 2));
    Tensor merged = add(up, s.skip[0].forward(e0));
    Tensor want = s.head.forward(merged);
    EXPECT_LT(testutil::max_abs_diff(out.h1, want), 1e-12);
}

TEST(Backbone, GradCheckThroughDepth2Hourglass) {
    HourglassConfig cfg = toy_config();
    Backbone b = Backbone::make(cfg);
    ParamList params;
    b.collect(params);
    randomize(params, 13);
    Rng rng(14);
    Tensor img = testutil::random_tensor({1, 3, 32, 32}, rng, 0.0, 1.0);
    std::vector<std::pair<std::string, Tensor>> leaves;
    // a representative subset of parameters keeps the finite-difference pass fast
    for (auto& p : params)
        if (p.name.find("enc0") != std::string::npos || p.name.find("head") != std::string::npos ||
            p.name.find("se") != std::string::npos || p.name.find("conv7") != std::string::npos)
            leaves.push_back({p.name, p.tensor});
    ASSERT_FALSE(leaves.empty());
    auto report = grad_check(
        [&] {
            auto out = b.forward(img);
            return sum_all(mul(out.h1[0], out.h1[0]));
        },
        leaves);
    EXPECT_LT(report.max_rel_err, 1e-4);
}
