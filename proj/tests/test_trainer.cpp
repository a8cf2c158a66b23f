#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include <gtest/gtest.h>

#include "dbifaunet/trainer.hpp"

using namespace dbifaunet;

namespace {

fs::path scratch(const std::string &name) {
    auto p = fs::temp_directory_path() / ("dbifaunet_test_trainer_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string read_bytes(const fs::path &p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// 24 phantoms of 32x32 in 6 patients; shared by the training tests.
const fs::path &tiny_store() {
    static const fs::path dir = [] {
        auto d = scratch("store");
        PhantomSetOptions o;
        o.count = 24;
        o.size = 32;
        o.seed = 3;
        write_phantom_store(d, o, {0.66, 0.17, 0.17});
        return d;
    }();
    return dir;
}

RunConfig tiny_config(const fs::path &out, int64_t epochs) {
    RunConfig c;
    c.network.depth = 3;
    c.network.base_channels = 8;
    c.train.precision = "float64";
    c.train.batch_size = 4;
    c.train.epochs = epochs;
    c.train.lr0 = 0.01;
    c.train.seed = 5;
    c.train.manifest = (tiny_store() / "manifest.json").string();
    c.train.out_dir = out.string();
    return c;
}

class Deterministic : public ::testing::Environment {
public:
    void SetUp() override { setenv("DBIF_DETERMINISTIC", "1", 1); }
};

const auto *const kEnv = ::testing::AddGlobalTestEnvironment(new Deterministic);

} // namespace

TEST(LrSchedule, Examples) {
    ScheduleParams p{0.001, 20, 0.5};
    EXPECT_DOUBLE_EQ(lr_schedule(0, p), 0.001);
    EXPECT_NEAR(lr_schedule(10, p), 0.0005, 1e-15);
    EXPECT_DOUBLE_EQ(lr_schedule(20, p), 0.0005);
    EXPECT_THROW(lr_schedule(-1, p), ValidationError);
}

TEST(LrSchedule, TwoHundredEpochClosedForm) {
    ScheduleParams p{0.001, 20, 0.5};
    int restarts = 0;
    for (int e = 0; e < 200; ++e) {
        const int k = e / 20, t = e % 20;
        const double want = 0.001 * std::pow(0.5, k) * (1 + std::cos(std::numbers::pi * t / 20.0)) / 2;
        EXPECT_NEAR(lr_schedule(e, p), want, 1e-12) << e;
        if (e > 0 && lr_schedule(e, p) > lr_schedule(e - 1, p)) ++restarts;
        if (t == 0) EXPECT_DOUBLE_EQ(lr_schedule(e, p), 0.001 * std::pow(0.5, k));
        EXPECT_GE(lr_schedule(e, p), 0.0);
    }
    EXPECT_EQ(restarts + 1, 10); // cycles
}

TEST(Sgd, MomentumByHand) {
    auto w = torch::tensor({1.0, -2.0}, torch::kFloat64).requires_grad_(true);
    Sgd opt({{"w", w}}, 0.9);
    // loss = sum(w^2) -> grad 2w
    auto step = [&] {
        opt.zero_grad();
        (w * w).sum().backward();
        opt.step(0.1);
    };
    step(); // buf = g = (2, -4); w = (0.8, -1.6)
    EXPECT_NEAR(w[0].item<double>(), 0.8, 1e-15);
    EXPECT_NEAR(w[1].item<double>(), -1.6, 1e-15);
    step(); // g = (1.6, -3.2); buf = 0.9*(2,-4) + g = (3.4, -6.8); w = (0.46, -0.92)
    EXPECT_NEAR(w[0].item<double>(), 0.46, 1e-15);
    EXPECT_NEAR(w[1].item<double>(), -0.92, 1e-15);
    EXPECT_NEAR(opt.state().at("w")[0].item<double>(), 3.4, 1e-15);
}

TEST(Checkpoint, RoundTripAndBadTag) {
    auto dir = scratch("ckpt");
    Checkpoint c;
    c.meta = {{"k", 1}};
    c.tensors = {{"a", torch::randn({3, 2}, torch::kFloat64)},
                 {"b", torch::randn({4}, torch::kFloat32)},
                 {"c", torch::arange(5, torch::kInt64)},
                 {"d", torch::ones({2}, torch::kUInt8)}};
    write_checkpoint(dir / "x.ckpt", c);
    write_checkpoint(dir / "y.ckpt", c);
    EXPECT_EQ(read_bytes(dir / "x.ckpt"), read_bytes(dir / "y.ckpt"));
    auto back = read_checkpoint(dir / "x.ckpt");
    EXPECT_EQ(back.meta, c.meta);
    ASSERT_EQ(back.tensors.size(), 4u);
    for (size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(back.tensors[i].first, c.tensors[i].first);
        EXPECT_TRUE(torch::equal(back.tensors[i].second, c.tensors[i].second));
    }
    std::ofstream(dir / "bad.ckpt") << "not-a-checkpoint\n";
    EXPECT_THROW(read_checkpoint(dir / "bad.ckpt"), CheckpointError);
    EXPECT_THROW(read_checkpoint(dir / "missing.ckpt"), CheckpointError);
}

TEST(Config, TextRoundTripAndErrors) {
    RunConfig c;
    c.train.lr0 = 0.0125;
    c.train.seed = 99;
    c.network.ablation = Ablation::NoNestedDs;
    c.network.fusion_mode = FusionMode::Mul;
    c.train.manifest = "x/manifest.json";
    auto back = parse_config(to_config_text(c));
    EXPECT_EQ(to_config_text(back), to_config_text(c));
    EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
    EXPECT_THROW(parse_config("learning_rate = 0.1"), ValidationError);
    EXPECT_THROW(parse_config("lr0 = fast"), ValidationError);
    EXPECT_THROW(parse_config("lr0"), ValidationError);
    EXPECT_EQ(parse_config("  depth = 3  # comment\n\n").network.depth, 3);
    RunConfig bad;
    bad.train.restart_gamma = 0;
    EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(EpochOrder, SeededPermutation) {
    auto a = epoch_order(50, 1, 0), b = epoch_order(50, 1, 0), c = epoch_order(50, 1, 1);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    std::sort(c.begin(), c.end());
    for (int64_t i = 0; i < 50; ++i) EXPECT_EQ(c[i], i);
}

TEST(Train, SmallRunWritesArtifacts) {
    auto out = scratch("small");
    auto rec = train(tiny_config(out, 3));
    ASSERT_EQ(rec.epochs.size(), 3u);
    for (const auto &e : rec.epochs) {
        ASSERT_TRUE(e.val.has_value());
        EXPECT_TRUE(std::isfinite(e.train_loss));
        EXPECT_DOUBLE_EQ(e.lr, lr_schedule(e.epoch, tiny_config(out, 3).train.schedule()));
    }
    ASSERT_TRUE(rec.test.has_value());
    for (auto f : {"best.ckpt", "last.ckpt", "run.json", "train_log.jsonl"}) EXPECT_TRUE(fs::exists(out / f)) << f;
    std::ifstream log(out / "train_log.jsonl");
    int lines = 0;
    for (std::string l; std::getline(log, l);) {
        auto j = nlohmann::json::parse(l);
        EXPECT_TRUE(j.contains("total") && j.contains("points"));
        ++lines;
    }
    EXPECT_GT(lines, 0);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
    auto full = scratch("resume_full"), part = scratch("resume_part");
    auto whole = train(tiny_config(full, 3));
    TrainOptions stop;
    stop.stop_after_epochs = 2;
    train(tiny_config(part, 3), stop);
    TrainOptions resume;
    resume.resume_from = (part / "last.ckpt").string();
    auto rest = train(tiny_config(part, 3), resume);
    ASSERT_EQ(rest.epochs.size(), 3u);
    EXPECT_NEAR(rest.epochs[2].train_loss, whole.epochs[2].train_loss, 1e-6);
    EXPECT_EQ(rest.best_epoch, whole.best_epoch);
}

TEST(Train, SameSeedGivesIdenticalCheckpoints) {
    auto out = scratch("det");
    train(tiny_config(out, 2));
    fs::copy_file(out / "last.ckpt", out / "first.ckpt");
    train(tiny_config(out, 2));
    EXPECT_EQ(read_bytes(out / "first.ckpt"), read_bytes(out / "last.ckpt"));
}

TEST(Evaluate, TwiceIdenticalAndConfigMismatch) {
    auto out = scratch("eval");
    train(tiny_config(out, 1));
    const auto manifest = tiny_store() / "manifest.json";
    auto a = evaluate_checkpoint(out / "best.ckpt", manifest, "test");
    auto b = evaluate_checkpoint(out / "best.ckpt", manifest, "test");
    EXPECT_EQ(to_json(a), to_json(b));
    NetworkConfig other = tiny_config(out, 1).network;
    other.depth = 4;
    try {
        evaluate_checkpoint(out / "best.ckpt", manifest, "test", &other);
        FAIL() << "expected a config mismatch";
    } catch (const CheckpointError &e) {
        EXPECT_NE(std::string(e.what()).find("depth"), std::string::npos) << e.what();
    }
}

TEST(Predict, OddSizedImageGivesSameSizedMask) {
    auto out = scratch("predict");
    train(tiny_config(out, 1));
    cv::Mat img(50, 50, CV_8UC1, cv::Scalar(60));
    cv::circle(img, {25, 25}, 10, cv::Scalar(200), -1);
    cv::imwrite((out / "scan.png").string(), img);
    auto p = predict_file(out / "best.ckpt", out / "scan.png", out);
    EXPECT_EQ(p.mask.sizes(), (std::vector<int64_t>{50, 50}));
    EXPECT_TRUE(torch::logical_or(p.mask == 0, p.mask == 1).all().item<bool>());
    auto overlay = cv::imread(p.overlay_path.string(), cv::IMREAD_UNCHANGED);
    EXPECT_EQ(overlay.rows, 50);
    EXPECT_EQ(overlay.channels(), 3);
    EXPECT_TRUE(torch::equal(read_mask_file(p.mask_path)[0], p.mask));
}

TEST(Train, DivergenceIsReported) {
    auto out = scratch("diverge");
    auto c = tiny_config(out, 2);
    c.train.lr0 = 1e30;
    try {
        train(c);
        FAIL() << "expected divergence";
    } catch (const DivergenceError &e) {
        EXPECT_GE(e.epoch(), 0);
        EXPECT_GE(e.step(), 0);
    }
}

TEST(Train, AblationsHaveFewerParameters) {
    NetworkConfig full;
    full.depth = 4;
    full.base_channels = 8;
    auto no_fusion = full, no_ds = full;
    no_fusion.ablation = Ablation::NoDdfdBiaf;
    no_ds.ablation = Ablation::NoNestedDs;
    const auto n_full = build_network(full, 0)->parameter_count();
    EXPECT_LT(build_network(no_fusion, 0)->parameter_count(), n_full);
    EXPECT_LT(build_network(no_ds, 0)->parameter_count(), n_full);
}
