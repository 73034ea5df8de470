#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "sadinet/data.hpp"
#include "sadinet/metrics.hpp"
#include "sadinet/png_io.hpp"
#include "sadinet/serialize.hpp"
#include "test_util.hpp"

using namespace sadi;

namespace {
std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

// ---- SADT / SADC ----

TEST(Sadt, RoundTripPreservesBits) {
    Rng rng(11);
    Tensor t = testutil::random_tensor({2, 3, 5}, rng, -10, 10);
    const std::string path = temp_path("t.sadt");
    sadt_save(t, path);
    Tensor u = sadt_load(path);
    ASSERT_EQ(u.shape(), t.shape());
    for (std::size_t i = 0; i < t.values().size(); ++i) EXPECT_EQ(u.values()[i], t.values()[i]);
    std::remove(path.c_str());
}

TEST(Sadt, HeaderLayout) {
    Tensor t = Tensor::from({2, 1}, {1.0, -2.0});
    const std::string b = sadt_encode(t);
    ASSERT_GE(b.size(), 5u + 8u + 16u);
    EXPECT_EQ(b.substr(0, 4), "SADT");
    EXPECT_EQ(b[4], 2);  // rank
    EXPECT_EQ(static_cast<unsigned char>(b[5]), 2);  // extent 2, little-endian
    EXPECT_EQ(static_cast<unsigned char>(b[9]), 1);  // extent 1
    EXPECT_THROW(sadt_decode("BAD!"), std::invalid_argument);
}

TEST(Sadc, NamedRoundTrip) {
    Rng rng(12);
    std::vector<std::pair<std::string, Tensor>> entries{
        {"stem.conv7.w", testutil::random_tensor({4, 3, 7, 7}, rng)},
        {"stack0.enc0.conv1.b", testutil::random_tensor({4}, rng)},
    };
    const std::string path = temp_path("ck.sadc");
    sadc_save(entries, path);
    auto loaded = sadc_load(path);
    ASSERT_EQ(loaded.size(), 2u);
    EXPECT_EQ(loaded[0].first, "stem.conv7.w");
    EXPECT_EQ(loaded[1].first, "stack0.enc0.conv1.b");
    for (std::size_t e = 0; e < 2; ++e)
        EXPECT_LT(testutil::max_abs_diff(loaded[e].second, entries[e].second), 0.0 + 1e-300);
    std::remove(path.c_str());
}

// ---- PNG ----

TEST(Png, RoundTripRgbAndGray) {
    Rng rng(13);
    for (int channels : {1, 3}) {
        Image8 img;
        img.width = 37;
        img.height = 23;
        img.channels = channels;
        img.pixels.resize(static_cast<std::size_t>(37 * 23 * channels));
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
        Image8 back = png_decode(png_encode(img));
        ASSERT_EQ(back.width, img.width);
        ASSERT_EQ(back.height, img.height);
        ASSERT_EQ(back.channels, channels);
        EXPECT_EQ(back.pixels, img.pixels);
    }
}

TEST(Png, RejectsGarbage) {
    EXPECT_THROW(png_decode("not a png"), std::invalid_argument);
}

// ---- synthetic dataset ----

TEST(Synth, SameSeedIdenticalPixels) {
    auto a = synth_sample(99, 3, 4);
    auto b = synth_sample(99, 3, 4);
    EXPECT_EQ(a.image.pixels, b.image.pixels);
    EXPECT_EQ(a.anno.joints, b.anno.joints);
    auto c = synth_sample(99, 4, 4);
    EXPECT_NE(a.image.pixels, c.image.pixels);
}

TEST(Synth, DatasetContract) {
    auto ds = synth_dataset(20, 4, 7);
    ASSERT_EQ(ds.size(), 20u);
    for (const auto& s : ds) {
        EXPECT_EQ(s.anno.joint_count(), 4);
        EXPECT_TRUE(s.anno.norm_head.has_value());
        EXPECT_TRUE(s.anno.norm_torso.has_value());
        EXPECT_GT(*s.anno.norm_torso, 0.0);
        for (const auto& p : s.anno.joints) {
            EXPECT_GE(p[0], 0.0);
            EXPECT_LT(p[0], 256.0);
            EXPECT_GE(p[1], 0.0);
            EXPECT_LT(p[1], 256.0);
        }
    }
}

// Render-then-locate: the windowed matched-filter centroid of each joint's
// blob sits on the annotation (the centroid averages away 8-bit quantization,
// which an argmax near a half-pixel fraction cannot).
TEST(Synth, BlobCentroidMatchesAnnotation) {
    auto ds = synth_dataset(25, 4, 123);
    for (const auto& s : ds) {
        for (int j = 0; j < 4; ++j) {
            const auto& mu = s.anno.joints[static_cast<std::size_t>(j)];
            const auto color = sadi::detail::joint_color(j);
            const int cx = static_cast<int>(std::lround(mu[0]));
            const int cy = static_cast<int>(std::lround(mu[1]));
            double wsum = 0.0, sx = 0.0, sy = 0.0, floor_score = 1e300;
            auto score_at = [&](int y, int x) {
                double score = 0.0;
                for (int c = 0; c < 3; ++c)
                    score += s.image.at(y, x, c) * color[static_cast<std::size_t>(c)];
                return score;
            };
            for (int y = cy - 12; y <= cy + 12; ++y)
                for (int x = cx - 12; x <= cx + 12; ++x)
                    floor_score = std::min(floor_score, score_at(y, x));
            for (int y = cy - 12; y <= cy + 12; ++y)
                for (int x = cx - 12; x <= cx + 12; ++x) {
                    const double d = score_at(y, x) - floor_score;
                    const double w = d * d;  // peak-dominant: neighbor-blob tails wash out
                    wsum += w;
                    sx += w * x;
                    sy += w * y;
                }
            EXPECT_LE(std::abs(sx / wsum - mu[0]), 0.5) << "joint " << j;
            EXPECT_LE(std::abs(sy / wsum - mu[1]), 0.5) << "joint " << j;
        }
    }
}

// ---- Gaussian codec ----

TEST(Codec, PixelCenteredJointGivesUnitPeakAndExactRecovery) {
    std::vector<std::array<double, 2>> joints{{20.0, 31.0}};
    std::vector<std::uint8_t> vis{1};
    Tensor maps = encode_gaussian(joints, vis);
    EXPECT_DOUBLE_EQ(maps.at({0, 31, 20}), 1.0);
    auto dec = decode_heatmap(maps);
    EXPECT_DOUBLE_EQ(dec[0].x, 20.0);
    EXPECT_DOUBLE_EQ(dec[0].y, 31.0);
    EXPECT_FALSE(dec[0].degenerate);
}

TEST(Codec, ValueAtOneSigma) {
    GaussianEncodeConfig cfg;
    cfg.sigma_px = 2.0;
    std::vector<std::array<double, 2>> joints{{30.0, 30.0}};
    std::vector<std::uint8_t> vis{1};
    Tensor maps = encode_gaussian(joints, vis, cfg);
    EXPECT_NEAR(maps.at({0, 30, 32}), std::exp(-0.5), 1e-12);  // 2 px = one sigma away
}

TEST(Codec, InvisibleJointIsZeroMap) {
    std::vector<std::array<double, 2>> joints{{10, 10}, {20, 20}};
    std::vector<std::uint8_t> vis{0, 1};
    Tensor maps = encode_gaussian(joints, vis);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) EXPECT_EQ(maps.at({0, y, x}), 0.0);
    EXPECT_GT(maps.at({1, 20, 20}), 0.99);
}

TEST(Codec, OffGridJointClearsVisibility) {
    std::vector<std::array<double, 2>> joints{{-3.0, 10.0}};
    std::vector<std::uint8_t> vis{1};
    Tensor maps = encode_gaussian(joints, vis);
    EXPECT_EQ(vis[0], 0);
    for (double v : maps.values()) EXPECT_EQ(v, 0.0);
}

TEST(Codec, SubPixelDecodeWithinHalfPixel) {
    std::vector<std::array<double, 2>> joints{{30.5, 30.0}};
    std::vector<std::uint8_t> vis{1};
    Tensor maps = encode_gaussian(joints, vis);
    auto dec = decode_heatmap(maps);
    EXPECT_LE(std::hypot(dec[0].x - 30.5, dec[0].y - 30.0), 0.5);
}

TEST(Codec, UniformMapDecodesToCenterWithFlag) {
    Tensor maps(Shape{1, 64, 64}, 0.37);
    auto dec = decode_heatmap(maps);
    EXPECT_TRUE(dec[0].degenerate);
    EXPECT_DOUBLE_EQ(dec[0].x, 32.0);
    EXPECT_DOUBLE_EQ(dec[0].y, 32.0);
}

TEST(Codec, RandomSubPixelRoundTrip) {
    Rng rng(17);
    double worst = 0.0;
    for (int i = 0; i < 300; ++i) {
        std::vector<std::array<double, 2>> joints{{rng.uniform(4, 59), rng.uniform(4, 59)}};
        std::vector<std::uint8_t> vis{1};
        Tensor maps = encode_gaussian(joints, vis);
        auto dec = decode_heatmap(maps);
        worst = std::max(worst, std::hypot(dec[0].x - joints[0][0], dec[0].y - joints[0][1]));
    }
    EXPECT_LE(worst, 0.5);
}

// ---- augmentation ----

TEST(Augment, IdentityDrawLeavesSampleUnchanged) {
    auto s = synth_sample(5, 0, 4);
    const Skeleton sk = Skeleton::chain(4);
    auto r = augment_with(s.image, s.anno, sk, AugmentDraw{0.0, 1.0, false});
    EXPECT_EQ(r.image.pixels, s.image.pixels);
    for (std::size_t j = 0; j < s.anno.joints.size(); ++j) {
        EXPECT_NEAR(r.anno.joints[j][0], s.anno.joints[j][0], 1e-12);
        EXPECT_NEAR(r.anno.joints[j][1], s.anno.joints[j][1], 1e-12);
    }
}

TEST(Augment, PureFlipReflectsXAndSwapsPairs) {
    auto s = synth_sample(6, 0, 4);
    Skeleton sk = Skeleton::chain(4);
    sk.lr_pairs.push_back({0, 3});  // synthetic pair to exercise the swap
    auto r = augment_with(s.image, s.anno, sk, AugmentDraw{0.0, 1.0, true});
    for (std::size_t j : {1u, 2u}) {  // unswapped joints
        EXPECT_NEAR(r.anno.joints[j][0], 255.0 - s.anno.joints[j][0], 1e-9);
        EXPECT_NEAR(r.anno.joints[j][1], s.anno.joints[j][1], 1e-9);
    }
    // joints 0 and 3 reflect and then swap ids
    EXPECT_NEAR(r.anno.joints[0][0], 255.0 - s.anno.joints[3][0], 1e-9);
    EXPECT_NEAR(r.anno.joints[3][0], 255.0 - s.anno.joints[0][0], 1e-9);
}

// Transformed joints must equal the affine matrix applied to the originals.
TEST(Augment, JointsFollowTheAffine) {
    auto s = synth_sample(7, 0, 4);
    const Skeleton sk = Skeleton::chain(4);
    int cleared = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        Rng rng(seed);
        auto r = augment(s.image, s.anno, sk, rng);
        for (std::size_t j = 0; j < s.anno.joints.size(); ++j) {
            const auto& p = s.anno.joints[j];
            const double ex = r.fwd[0] * p[0] + r.fwd[1] * p[1] + r.fwd[2];
            const double ey = r.fwd[3] * p[0] + r.fwd[4] * p[1] + r.fwd[5];
            EXPECT_NEAR(r.anno.joints[j][0], ex, 1e-9);
            EXPECT_NEAR(r.anno.joints[j][1], ey, 1e-9);
            const bool inside = ex >= 0 && ex <= 255 && ey >= 0 && ey <= 255;
            EXPECT_EQ(static_cast<bool>(r.anno.visible[j]), inside);
            if (!inside) ++cleared;
        }
    }
    EXPECT_GT(cleared, 0);  // scale up to 1.5 pushes some joints out of frame
}

// ---- annotation JSON ----

TEST(Annotations, SaveLoadRoundTrip) {
    auto ds = synth_dataset(8, 4, 21);
    std::vector<KeypointAnnotation> annos;
    for (auto& s : ds) annos.push_back(s.anno);
    const std::string path = temp_path("annos.json");
    save_annotations(annos, path);
    auto report = load_annotations(path);
    EXPECT_EQ(report.skipped, 0);
    ASSERT_EQ(report.annotations.size(), annos.size());
    for (std::size_t i = 0; i < annos.size(); ++i) {
        EXPECT_EQ(report.annotations[i].image_id, annos[i].image_id);
        for (std::size_t j = 0; j < annos[i].joints.size(); ++j) {
            EXPECT_DOUBLE_EQ(report.annotations[i].joints[j][0], annos[i].joints[j][0]);
            EXPECT_DOUBLE_EQ(report.annotations[i].joints[j][1], annos[i].joints[j][1]);
        }
        EXPECT_DOUBLE_EQ(*report.annotations[i].norm_torso, *annos[i].norm_torso);
    }
    std::remove(path.c_str());
}

TEST(Annotations, EmptyFileGivesEmptyDataset) {
    const std::string path = temp_path("empty.json");
    {
        std::ofstream f(path);
        f << "[]";
    }
    auto report = load_annotations(path);
    EXPECT_TRUE(report.annotations.empty());
    EXPECT_EQ(report.skipped, 0);
    std::remove(path.c_str());
}

TEST(Annotations, RecordMissingNormsIsSkipped) {
    const std::string path = temp_path("bad.json");
    {
        std::ofstream f(path);
        f << R"([{"image_id":"a","joints":[[1,2],[3,4],[5,6]],"visible":[true,true,true]}])";
    }
    auto report = load_annotations(path);
    EXPECT_EQ(report.skipped, 1);
    EXPECT_EQ(report.errors.size(), 1u);
    EXPECT_TRUE(report.annotations.empty());
    std::remove(path.c_str());
}

TEST(Annotations, UnreadableFileIsFatal) {
    EXPECT_THROW(load_annotations("/nonexistent/nowhere.json"), std::runtime_error);
}
