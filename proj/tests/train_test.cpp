#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sadinet/train.hpp"
#include "test_util.hpp"

using namespace sadi;

namespace {

RunConfig tiny_config(const std::string& out) {
    RunConfig cfg;
    cfg.seed = 5;
    cfg.stacks = 1;
    cfg.channels = 2;
    cfg.se_reduction = 2;
    cfg.joints = 4;
    cfg.heatmap = 16;
    cfg.flow_width = 8;
    cfg.moment_samples = 1000;
    cfg.epochs = 2;
    cfg.batch = 4;
    cfg.synthetic = 12;
    cfg.val_fraction = 0.25;
    cfg.out_dir = out;
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    return p.string();
}

}  // namespace

TEST(LrSchedule, ExactPaperValues) {
    EXPECT_DOUBLE_EQ(lr_schedule(0), 1e-3);
    EXPECT_DOUBLE_EQ(lr_schedule(169), 1e-3);
    EXPECT_DOUBLE_EQ(lr_schedule(170), 1e-4);
    EXPECT_DOUBLE_EQ(lr_schedule(199), 1e-4);
    EXPECT_DOUBLE_EQ(lr_schedule(200), 1e-5);
    EXPECT_DOUBLE_EQ(lr_schedule(500), 1e-5);
}

TEST(Adam, DescendsAQuadratic) {
    ParamList params;
    params.push_back({"x", Tensor::from({2}, {5.0, -3.0}, true)});
    Adam adam(params);
    for (int i = 0; i < 400; ++i) {
        Graph g;
        Tensor loss = mul_scalar(sum_all(mul(params[0].tensor, params[0].tensor)), 0.5);
        g.backward(loss);
        adam.step(params, 1e-1);
    }
    EXPECT_NEAR(params[0].tensor.values()[0], 0.0, 1e-3);
    EXPECT_NEAR(params[0].tensor.values()[1], 0.0, 1e-3);
}

TEST(TrainStep, SameSeedSameTrajectories) {
    auto run = [](int steps) {
        RunConfig cfg = tiny_config("unused");
        SadiNet model = SadiNet::make(model_config_from(cfg));
        model.init(7);
        ParamList params = model.params();
        Adam adam(params);
        auto ds = synth_dataset(2, 4, 3, 64);
        Tensor images = images_to_tensor({&ds[0].image, &ds[1].image});
        Tensor targets(Shape{2, 4, 16, 16});
        Tensor vis(Shape{2, 4}, 1.0);
        GaussianEncodeConfig enc;
        enc.grid = 16;
        for (int b = 0; b < 2; ++b) {
            std::vector<std::array<double, 2>> grid_joints;
            std::vector<std::uint8_t> v = ds[b].anno.visible;
            for (auto& p : ds[b].anno.joints) grid_joints.push_back({p[0] / 4.0, p[1] / 4.0});
            Tensor maps = encode_gaussian(grid_joints, v, enc);
            std::copy(maps.values().begin(), maps.values().end(),
                      targets.values().begin() + b * maps.numel());
        }
        ChiMode mode = parse_chi_mode("sigma");
        for (int s = 0; s < steps; ++s) {
            auto r = train_step(model, params, adam, images, targets, vis, 0, mode, 99);
            EXPECT_TRUE(r.ok);
        }
        std::vector<double> flat;
        for (auto& p : params)
            flat.insert(flat.end(), p.tensor.values().begin(), p.tensor.values().end());
        return flat;
    };
    const auto a = run(3);
    const auto b = run(3);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(TrainStep, NonFiniteLossAbortsWithoutUpdate) {
    RunConfig cfg = tiny_config("unused");
    SadiNet model = SadiNet::make(model_config_from(cfg));
    model.init(9);
    ParamList params = model.params();
    params[0].tensor.values()[0] = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::vector<double>> before;
    for (auto& p : params)
        before.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    Adam adam(params);
    auto ds = synth_dataset(1, 4, 3, 64);
    Tensor images = images_to_tensor({&ds[0].image});
    Tensor targets(Shape{1, 4, 16, 16});
    Tensor vis(Shape{1, 4}, 1.0);
    auto r = train_step(model, params, adam, images, targets, vis, 0, parse_chi_mode("fixed:0.5"),
                        99);
    EXPECT_FALSE(r.ok);
    EXPECT_FALSE(r.diagnostic.empty());
    EXPECT_EQ(adam.steps_taken(), 0);
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t k = 0; k < before[i].size(); ++k) {
            if (std::isnan(before[i][k])) continue;
            EXPECT_EQ(params[i].tensor.values()[k], before[i][k]);
        }
}

// 200 steps on a single sample must cut the combined loss below 10% of its
// starting value.
TEST(TrainStep, SingleSampleOverfitSmoke) {
    RunConfig cfg = tiny_config("unused");
    SadiNet model = SadiNet::make(model_config_from(cfg));
    model.init(11);
    ParamList params = model.params();
    Adam adam(params);
    auto ds = synth_dataset(1, 4, 17, 64);
    Tensor images = images_to_tensor({&ds[0].image});
    Tensor targets(Shape{1, 4, 16, 16});
    Tensor vis(Shape{1, 4}, 1.0);
    GaussianEncodeConfig enc;
    enc.grid = 16;
    std::vector<std::array<double, 2>> grid_joints;
    std::vector<std::uint8_t> v = ds[0].anno.visible;
    for (auto& p : ds[0].anno.joints) grid_joints.push_back({p[0] / 4.0, p[1] / 4.0});
    Tensor maps = encode_gaussian(grid_joints, v, enc);
    std::copy(maps.values().begin(), maps.values().end(), targets.values().begin());
    ChiMode mode = parse_chi_mode("sigma");
    double first = 0.0, last = 0.0;
    for (int s = 0; s < 200; ++s) {
        auto r = train_step(model, params, adam, images, targets, vis, 0, mode, 99);
        ASSERT_TRUE(r.ok);
        if (s == 0) first = r.total;
        last = r.total;
    }
    EXPECT_LT(last, 0.1 * first);
}

TEST(Checkpoint, SaveLoadReproducesForward) {
    RunConfig cfg = tiny_config("unused");
    SadiNet model = SadiNet::make(model_config_from(cfg));
    model.init(13);
    const std::string path =
        (std::filesystem::temp_directory_path() / "model_roundtrip.sadc").string();
    model.save(path);
    SadiNet back = SadiNet::load(path);
    auto ds = synth_dataset(1, 4, 29, 64);
    Tensor images = images_to_tensor({&ds[0].image});
    NoGradGuard eval_only;
    auto a = model.forward(images, 5);
    auto b = back.forward(images, 5);
    EXPECT_EQ(a.bb.h1.back().values(), b.bb.h1.back().values());
    EXPECT_EQ(a.h2.values(), b.h2.values());
    std::filesystem::remove(path);
}

TEST(RunTraining, DeterministicByteIdenticalLogs) {
    RunConfig a = tiny_config(temp_dir("sadi_run_a"));
    RunConfig b = tiny_config(temp_dir("sadi_run_b"));
    auto ra = run_training(a);
    auto rb = run_training(b);
    ASSERT_TRUE(ra.ok);
    ASSERT_TRUE(rb.ok);
    EXPECT_EQ(slurp(ra.metrics_csv), slurp(rb.metrics_csv));
    EXPECT_EQ(slurp(ra.loss_log_csv), slurp(rb.loss_log_csv));
    EXPECT_EQ(slurp(ra.checkpoint), slurp(rb.checkpoint));
    // metrics carry one block of rows per epoch
    const std::string metrics = slurp(ra.metrics_csv);
    EXPECT_NE(metrics.find("0,val,mean,pck,0.2,"), std::string::npos);
    EXPECT_NE(metrics.find("1,val,mean,pck,0.2,"), std::string::npos);
    std::filesystem::remove_all(a.out_dir);
    std::filesystem::remove_all(b.out_dir);
}

TEST(RunTraining, ChiEndpointsMatchLoggedTerms) {
    for (const char* mode : {"fixed:0", "fixed:1"}) {
        RunConfig cfg = tiny_config(temp_dir(std::string("sadi_chi_") + (mode[6] == '0' ? "0" : "1")));
        cfg.epochs = 1;
        cfg.synthetic = 6;
        cfg.chi_mode = mode;
        auto r = run_training(cfg);
        ASSERT_TRUE(r.ok);
        std::ifstream f(r.loss_log_csv);
        std::string line;
        std::getline(f, line);  // header
        int rows = 0;
        while (std::getline(f, line)) {
            std::replace(line.begin(), line.end(), ',', ' ');
            std::istringstream ls(line);
            long step;
            double l1, l2, chi, total;
            ls >> step >> l1 >> l2 >> chi >> total;
            if (mode[6] == '0') {
                EXPECT_EQ(total, l1);
            } else {
                EXPECT_EQ(total, l2);
            }
            ++rows;
        }
        EXPECT_GT(rows, 0);
        std::filesystem::remove_all(cfg.out_dir);
    }
}

TEST(RunTraining, ScheduleDryRunLogsExactRates) {
    RunConfig cfg = tiny_config(temp_dir("sadi_dry"));
    cfg.epochs = 210;
    cfg.schedule_dry_run = true;
    auto r = run_training(cfg);
    std::ifstream f(r.train_log);
    std::string line;
    int epoch = 0;
    while (std::getline(f, line)) {
        double lr = -1.0;
        ASSERT_EQ(std::sscanf(line.c_str(), "epoch=%*d lr=%lf", &lr), 1) << line;
        const double want = epoch < 170 ? 1e-3 : epoch < 200 ? 1e-4 : 1e-5;
        EXPECT_EQ(lr, want) << "epoch " << epoch;
        ++epoch;
    }
    EXPECT_EQ(epoch, 210);
    std::filesystem::remove_all(cfg.out_dir);
}

TEST(RunConfig, ValidationAndEnvOverride) {
    RunConfig cfg;
    cfg.synthetic = 0;
    EXPECT_THROW(cfg.finalize(), std::invalid_argument);
    cfg.synthetic = 10;
    cfg.chi_mode = "bogus";
    EXPECT_THROW(cfg.finalize(), std::invalid_argument);
    cfg.chi_mode = "fixed:0.25";
    setenv("SADI_SEED", "777", 1);
    cfg.finalize();
    unsetenv("SADI_SEED");
    EXPECT_EQ(cfg.seed, 777u);
}
