#include <gtest/gtest.h>

#include "sadinet/gradcheck.hpp"
#include "sadinet/losses.hpp"
#include "sadinet/metrics.hpp"
#include "test_util.hpp"

using namespace sadi;

namespace {

// Scalar double-loop MSE oracle over visible joints.
double mse_reference(const Tensor& a, const Tensor& b, const Tensor& vis) {
    const int N = a.dim(0), J = a.dim(1), H = a.dim(2), W = a.dim(3);
    double acc = 0.0, cells = 0.0;
    for (int n = 0; n < N; ++n)
        for (int j = 0; j < J; ++j) {
            if (vis.at({n, j}) == 0.0) continue;
            cells += H * W;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const double d = a.at({n, j, y, x}) - b.at({n, j, y, x});
                    acc += d * d;
                }
        }
    return cells > 0 ? acc / cells : 0.0;
}

}  // namespace

// ---- MSE losses ----

TEST(MseLoss, EqualMapsGiveZero) {
    Rng rng(1);
    Tensor a = testutil::random_tensor({2, 3, 8, 8}, rng);
    Tensor vis(Shape{2, 3}, 1.0);
    EXPECT_DOUBLE_EQ(mse_heatmap(a, a, vis).item(), 0.0);
}

TEST(MseLoss, ConstantOffsetGivesCSquared) {
    Rng rng(2);
    Tensor t = testutil::random_tensor({1, 2, 6, 6}, rng);
    const double c = 0.37;
    Tensor h = add_scalar(t, c);
    Tensor vis(Shape{1, 2}, 1.0);
    EXPECT_NEAR(mse_heatmap(h, t, vis).item(), c * c, 1e-12);
}

TEST(MseLoss, MatchesDoubleLoopOracle) {
    Rng rng(3);
    Tensor a = testutil::random_tensor({3, 4, 7, 5}, rng);
    Tensor b = testutil::random_tensor({3, 4, 7, 5}, rng);
    Tensor vis(Shape{3, 4}, 1.0);
    vis.at({0, 1}) = 0.0;
    vis.at({2, 3}) = 0.0;
    EXPECT_NEAR(mse_heatmap(a, b, vis).item(), mse_reference(a, b, vis), 1e-12);
}

TEST(MseLoss, SymmetricAndZeroIffEqualOverVisible) {
    Rng rng(4);
    Tensor a = testutil::random_tensor({1, 2, 4, 4}, rng);
    Tensor b = testutil::random_tensor({1, 2, 4, 4}, rng);
    Tensor vis(Shape{1, 2}, 1.0);
    EXPECT_DOUBLE_EQ(mse_heatmap(a, b, vis).item(), mse_heatmap(b, a, vis).item());
    EXPECT_GT(mse_heatmap(a, b, vis).item(), 0.0);
    // differing only on an invisible joint -> zero
    Tensor c = a.clone();
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) c.at({0, 1, y, x}) += 5.0;
    vis.at({0, 1}) = 0.0;
    EXPECT_DOUBLE_EQ(mse_heatmap(a, c, vis).item(), 0.0);
}

TEST(MseLoss, DoublingDifferenceQuadruples) {
    Rng rng(5);
    Tensor t = testutil::random_tensor({1, 1, 4, 4}, rng);
    Tensor d = testutil::random_tensor({1, 1, 4, 4}, rng);
    Tensor vis(Shape{1, 1}, 1.0);
    const double l1 = mse_heatmap(add(t, d), t, vis).item();
    const double l2 = mse_heatmap(add(t, mul_scalar(d, 2.0)), t, vis).item();
    EXPECT_NEAR(l2, 4.0 * l1, 1e-12);
}

TEST(MseLoss, ShapeAndVisibilityValidation) {
    Tensor a(Shape{1, 2, 4, 4});
    Tensor b(Shape{1, 2, 4, 5});
    Tensor vis(Shape{1, 2}, 1.0);
    EXPECT_THROW(mse_heatmap(a, b, vis), std::invalid_argument);
    Tensor bad_vis(Shape{2, 2}, 1.0);
    EXPECT_THROW(mse_heatmap(a, a, bad_vis), std::invalid_argument);
}

TEST(MseLoss, GradientFlowsIntoBothArguments) {
    Rng rng(6);
    Tensor a = testutil::random_tensor({1, 2, 4, 4}, rng);
    Tensor b = testutil::random_tensor({1, 2, 4, 4}, rng);
    Tensor vis(Shape{1, 2}, 1.0);
    auto report = grad_check([&] { return mse_heatmap(a, b, vis); }, {{"a", a}, {"b", b}});
    EXPECT_LT(report.max_rel_err, 1e-4);
}

// ---- combined loss ----

TEST(CombinedLoss, EndpointsAreExact) {
    Tensor l1 = Tensor::scalar(0.731);
    Tensor l2 = Tensor::scalar(1.209);
    EXPECT_EQ(combined_loss(l1, l2, 0.0).total.item(), l1.item());
    EXPECT_EQ(combined_loss(l1, l2, 1.0).total.item(), l2.item());
}

TEST(CombinedLoss, PlugInExample) {
    Tensor l1 = Tensor::scalar(2.0);
    Tensor l2 = Tensor::scalar(4.0);
    EXPECT_NEAR(combined_loss(l1, l2, 0.3).total.item(), 2.6, 1e-12);
}

TEST(CombinedLoss, AffineInBothTerms) {
    Rng rng(7);
    for (int i = 0; i < 20; ++i) {
        const double a = rng.uniform(0, 3), b = rng.uniform(0, 3), chi = rng.uniform();
        const double total = combined_loss(Tensor::scalar(a), Tensor::scalar(b), chi).total.item();
        EXPECT_NEAR(total, (1 - chi) * a + chi * b, 1e-12);
    }
}

TEST(CombinedLoss, SwappedVariant) {
    Tensor l1 = Tensor::scalar(2.0);
    Tensor l2 = Tensor::scalar(4.0);
    EXPECT_NEAR(combined_loss(l1, l2, 0.3, true).total.item(), 0.3 * 2.0 + 0.7 * 4.0, 1e-12);
}

TEST(CombinedLoss, RejectsChiOutsideUnitInterval) {
    Tensor l = Tensor::scalar(1.0);
    EXPECT_THROW(combined_loss(l, l, -0.1), std::invalid_argument);
    EXPECT_THROW(combined_loss(l, l, 1.1), std::invalid_argument);
}

TEST(CombinedLoss, ChiFromSigmaIsNormalizedMeanClamped) {
    Tensor sigma = Tensor::from({1, 2, 2}, {2.0, 2.0, 2.0, 2.0});
    EXPECT_NEAR(chi_from_sigma(sigma, 64), 2.0 / 64.0, 1e-15);
    Tensor huge = Tensor::from({1, 1, 2}, {100.0, 100.0});
    EXPECT_DOUBLE_EQ(chi_from_sigma(huge, 64), 1.0);
}

// ---- PCK ----

namespace {

// Brute-force reference, structured independently of the library path.
struct PckOracle {
    std::vector<double> per_joint;
    double mean;
};
PckOracle pck_reference(const std::vector<std::vector<std::array<double, 2>>>& preds,
                        const std::vector<KeypointAnnotation>& annos, double T, bool head_norm) {
    const int J = annos.empty() ? 0 : annos[0].joint_count();
    std::vector<int> ok(static_cast<std::size_t>(J), 0), tot(static_cast<std::size_t>(J), 0);
    for (std::size_t p = 0; p < annos.size(); ++p) {
        const auto norm = head_norm ? annos[p].norm_head : annos[p].norm_torso;
        if (!norm || *norm <= 0) continue;
        for (int j = 0; j < J; ++j) {
            if (!annos[p].visible[static_cast<std::size_t>(j)]) continue;
            const double dx = preds[p][static_cast<std::size_t>(j)][0] -
                              annos[p].joints[static_cast<std::size_t>(j)][0];
            const double dy = preds[p][static_cast<std::size_t>(j)][1] -
                              annos[p].joints[static_cast<std::size_t>(j)][1];
            ++tot[static_cast<std::size_t>(j)];
            if (std::sqrt(dx * dx + dy * dy) / *norm <= T) ++ok[static_cast<std::size_t>(j)];
        }
    }
    PckOracle r;
    double acc = 0;
    int seen = 0;
    for (int j = 0; j < J; ++j) {
        const double f = tot[static_cast<std::size_t>(j)]
                             ? double(ok[static_cast<std::size_t>(j)]) / tot[static_cast<std::size_t>(j)]
                             : 0.0;
        r.per_joint.push_back(f);
        if (tot[static_cast<std::size_t>(j)]) {
            acc += f;
            ++seen;
        }
    }
    r.mean = seen ? acc / seen : 0.0;
    return r;
}

std::vector<KeypointAnnotation> random_annos(int n, int J, Rng& rng) {
    std::vector<KeypointAnnotation> annos(static_cast<std::size_t>(n));
    for (auto& a : annos) {
        a.image_id = "r";
        for (int j = 0; j < J; ++j) {
            a.joints.push_back({rng.uniform(0, 256), rng.uniform(0, 256)});
            a.visible.push_back(rng.bernoulli(0.85) ? 1 : 0);
        }
        a.norm_head = rng.uniform(20, 60);
        a.norm_torso = rng.uniform(60, 120);
    }
    return annos;
}

}  // namespace

TEST(Pck, PerfectPredictionsScoreOneEverywhere) {
    Rng rng(8);
    auto annos = random_annos(30, 4, rng);
    std::vector<std::vector<std::array<double, 2>>> preds;
    for (const auto& a : annos) preds.push_back(a.joints);
    auto r = pck(preds, annos, 0.2, NormKind::torso, Skeleton::chain(4));
    for (double f : r.per_joint) EXPECT_DOUBLE_EQ(f, 1.0);
    EXPECT_DOUBLE_EQ(r.mean, 1.0);
}

TEST(Pck, ThresholdIsInclusive) {
    KeypointAnnotation a;
    a.image_id = "t";
    a.joints = {{100, 100}, {150, 100}, {100, 180}};
    a.visible = {1, 1, 1};
    a.norm_torso = 50.0;
    // prediction exactly at d / norm == T
    std::vector<std::vector<std::array<double, 2>>> preds{
        {{100 + 0.2 * 50.0, 100}, {150, 100}, {100, 180}}};
    auto r = pck(preds, {a}, 0.2, NormKind::torso, Skeleton::chain(3));
    EXPECT_DOUBLE_EQ(r.per_joint[0], 1.0);
}

TEST(Pck, MatchesBruteForceOracleExactly) {
    Rng rng(9);
    for (int rep = 0; rep < 100; ++rep) {
        const int n = rng.uniform_int(3, 20), J = rng.uniform_int(3, 7);
        auto annos = random_annos(n, J, rng);
        std::vector<std::vector<std::array<double, 2>>> preds;
        for (const auto& a : annos) {
            std::vector<std::array<double, 2>> p;
            for (const auto& gt : a.joints)
                p.push_back({gt[0] + rng.uniform(-40, 40), gt[1] + rng.uniform(-40, 40)});
            preds.push_back(p);
        }
        const bool head = rng.bernoulli(0.5);
        const double T = head ? 0.5 : 0.2;
        auto lib = pck(preds, annos, T, head ? NormKind::head : NormKind::torso,
                       Skeleton::chain(J));
        auto ref = pck_reference(preds, annos, T, head);
        ASSERT_EQ(lib.per_joint.size(), ref.per_joint.size());
        for (std::size_t j = 0; j < ref.per_joint.size(); ++j)
            EXPECT_EQ(lib.per_joint[j], ref.per_joint[j]);
        EXPECT_EQ(lib.mean, ref.mean);
    }
}

TEST(Pck, ScaleInvariance) {
    Rng rng(10);
    auto annos = random_annos(12, 4, rng);
    std::vector<std::vector<std::array<double, 2>>> preds;
    for (const auto& a : annos) {
        std::vector<std::array<double, 2>> p;
        for (const auto& gt : a.joints)
            p.push_back({gt[0] + rng.uniform(-30, 30), gt[1] + rng.uniform(-30, 30)});
        preds.push_back(p);
    }
    auto base = pck(preds, annos, 0.2, NormKind::torso, Skeleton::chain(4));
    const double c = 3.7;
    auto scaled_annos = annos;
    auto scaled_preds = preds;
    for (auto& a : scaled_annos) {
        for (auto& j : a.joints) {
            j[0] *= c;
            j[1] *= c;
        }
        a.norm_torso = *a.norm_torso * c;
    }
    for (auto& p : scaled_preds)
        for (auto& j : p) {
            j[0] *= c;
            j[1] *= c;
        }
    auto scaled = pck(scaled_preds, scaled_annos, 0.2, NormKind::torso, Skeleton::chain(4));
    for (std::size_t j = 0; j < base.per_joint.size(); ++j)
        EXPECT_NEAR(scaled.per_joint[j], base.per_joint[j], 1e-12);
}

TEST(Pck, MonotoneInThreshold) {
    Rng rng(11);
    auto annos = random_annos(20, 4, rng);
    std::vector<std::vector<std::array<double, 2>>> preds;
    for (const auto& a : annos) {
        std::vector<std::array<double, 2>> p;
        for (const auto& gt : a.joints)
            p.push_back({gt[0] + rng.uniform(-50, 50), gt[1] + rng.uniform(-50, 50)});
        preds.push_back(p);
    }
    double prev = -1.0;
    for (double T : {0.05, 0.1, 0.2, 0.4, 0.8}) {
        auto r = pck(preds, annos, T, NormKind::torso, Skeleton::chain(4));
        EXPECT_GE(r.mean, prev);
        prev = r.mean;
    }
}

TEST(Pck, ZeroNormSamplesExcludedWithWarningCount) {
    Rng rng(12);
    auto annos = random_annos(5, 3, rng);
    annos[2].norm_torso = 0.0;
    annos[4].norm_torso.reset();
    std::vector<std::vector<std::array<double, 2>>> preds;
    for (const auto& a : annos) preds.push_back(a.joints);
    auto r = pck(preds, annos, 0.2, NormKind::torso, Skeleton::chain(3));
    EXPECT_EQ(r.skipped_zero_norm, 2);
    for (double f : r.per_joint) EXPECT_DOUBLE_EQ(f, 1.0);  // remaining samples perfect
}

TEST(Pck, TablePrintsCanonicalOrder) {
    Skeleton sk = Skeleton::chain(4);  // head shoulder hip knee
    PckResult r;
    r.joint_names = sk.joint_names;
    r.per_joint = {0.9, 0.8, 0.7, 0.6};
    r.evaluated = {1, 1, 1, 1};
    r.mean = 0.75;
    const std::string table = pck_table(r, sk);
    const auto head_pos = table.find("Head");
    const auto shoulder_pos = table.find("Shoulder");
    const auto hip_pos = table.find("Hip");
    const auto knee_pos = table.find("Knee");
    const auto mean_pos = table.find("Mean");
    EXPECT_LT(head_pos, shoulder_pos);
    EXPECT_LT(shoulder_pos, hip_pos);
    EXPECT_LT(hip_pos, knee_pos);
    EXPECT_LT(knee_pos, mean_pos);
    EXPECT_NE(table.find("75.0"), std::string::npos);
}
