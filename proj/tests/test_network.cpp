#include <cmath>

#include <gtest/gtest.h>

#include "dbifaunet/losses.hpp"
#include "dbifaunet/network.hpp"

using namespace dbifaunet;

namespace {

NetworkConfig small(int64_t depth = 4, Ablation a = Ablation::Full) {
    NetworkConfig c;
    c.depth = depth;
    c.base_channels = 8;
    c.ablation = a;
    return c;
}

torch::Tensor image(int64_t n, int64_t h, int64_t w, uint64_t seed = 5) {
    torch::manual_seed(seed);
    return torch::rand({n, 1, h, w});
}

void expect_probability_map(const torch::Tensor &t, int64_t h, int64_t w) {
    EXPECT_EQ(t.size(2), h);
    EXPECT_EQ(t.size(3), w);
    EXPECT_GE(t.min().item<double>(), 0.0);
    EXPECT_LE(t.max().item<double>(), 1.0);
}

} // namespace

TEST(NetworkConfig, RejectsInvalidFieldsByName) {
    auto c = small();
    c.depth = 2;
    try {
        c.validate();
        FAIL();
    } catch (const ValidationError &e) {
        EXPECT_NE(std::string(e.what()).find("depth"), std::string::npos);
    }
    c = small();
    c.base_channels = 4;
    try {
        build_network(c, 1);
        FAIL();
    } catch (const ValidationError &e) {
        EXPECT_NE(std::string(e.what()).find("base_channels"), std::string::npos);
    }
    EXPECT_THROW(ablation_from_string("half"), ValidationError);
}

TEST(NetworkConfig, JsonRoundTripAndMismatch) {
    auto c = small(5, Ablation::NoNestedDs);
    c.fusion_mode = FusionMode::Mul;
    nlohmann::json j = c;
    auto back = j.get<NetworkConfig>();
    EXPECT_TRUE(config_mismatches(c, back).empty());
    back.base_channels = 16;
    EXPECT_EQ(config_mismatches(c, back), std::vector<std::string>{"base_channels"});
}

TEST(Network, BuildIsPureGivenSeed) {
    NetworkConfig c; // depth 5, C0 = 32
    auto a = build_network(c, 42);
    auto b = build_network(c, 42);
    EXPECT_EQ(a->parameter_count(), b->parameter_count());
    EXPECT_GT(a->parameter_count(), 0);
    auto pa = a->named_parameters(), pb = b->named_parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].key(), pb[i].key());
        EXPECT_TRUE(torch::equal(pa[i].value(), pb[i].value())) << pa[i].key();
    }
}

TEST(Network, AblationWithoutFusionHasNoFusionParameters) {
    auto m = build_network(small(5, Ablation::NoDdfdBiaf), 1);
    for (const auto &p : m->named_parameters()) {
        EXPECT_EQ(p.key().find("ddfd"), std::string::npos) << p.key();
        EXPECT_EQ(p.key().find("biaf"), std::string::npos) << p.key();
    }
    EXPECT_EQ(m->b_heads().size(), 4u);
}

TEST(Network, ParameterCountMonotone) {
    for (int64_t depth : {3, 4, 5}) {
        auto full = build_network(small(depth), 1);
        auto plain = build_network(small(depth, Ablation::NoDdfdBiaf), 1);
        EXPECT_GT(full->parameter_count(), plain->parameter_count()) << depth;
    }
}

TEST(Network, EightMapsInUnitRange) {
    auto m = build_network(small(5), 3);
    torch::NoGradGuard g;
    auto out = m->forward(image(2, 64, 64));
    ASSERT_EQ(out.u_heads.size(), 4u);
    ASSERT_EQ(out.b_heads.size(), 4u);
    for (const auto &t : out.u_heads) expect_probability_map(t, 64, 64);
    for (const auto &t : out.b_heads) expect_probability_map(t, 64, 64);
    EXPECT_TRUE(torch::equal(out.final, out.u_heads.back()));
}

TEST(Network, FullResolutionDefaultConfig) {
    auto m = build_network(NetworkConfig{}, 3);
    m->eval();
    torch::NoGradGuard g;
    auto out = m->forward(image(1, 512, 512));
    ASSERT_EQ(out.u_heads.size() + out.b_heads.size(), 8u);
    for (const auto &t : out.u_heads) expect_probability_map(t, 512, 512);
    for (const auto &t : out.b_heads) expect_probability_map(t, 512, 512);
}

TEST(Network, DepthFourAt64) {
    auto m = build_network(small(4), 3);
    torch::NoGradGuard g;
    auto out = m->forward(image(1, 64, 64));
    EXPECT_EQ(out.u_heads.size(), 3u);
    expect_probability_map(out.final, 64, 64);
}

TEST(Network, IndivisibleResolutionNamesDivisor) {
    auto m = build_network(small(4), 3);
    try {
        m->forward(image(1, 36, 32));
        FAIL();
    } catch (const ValidationError &e) {
        EXPECT_NE(std::string(e.what()).find("divisible by 8"), std::string::npos) << e.what();
    }
    EXPECT_THROW(m->forward(torch::rand({1, 3, 32, 32})), ValidationError);
}

TEST(Network, ConstantNetworkOutputsSigmoidOfHeadBias) {
    auto m = build_network(small(4), 3);
    const double b = 0.3;
    {
        torch::NoGradGuard g;
        for (auto &p : m->parameters()) p.zero_();
        for (auto &h : m->u_heads()) h->classify->bias.fill_(b);
        for (auto &h : m->b_heads()) h->classify->bias.fill_(b);
    }
    torch::NoGradGuard g;
    auto out = m->forward(image(1, 32, 32));
    const double expected = 1.0 / (1.0 + std::exp(-b));
    for (const auto &t : out.u_heads) EXPECT_LT((t - expected).abs().max().item<double>(), 1e-6);
    for (const auto &t : out.b_heads) EXPECT_LT((t - expected).abs().max().item<double>(), 1e-6);
}

TEST(SupervisionHead, RangeAndConstants) {
    torch::manual_seed(2);
    SupervisionHead h(8);
    torch::NoGradGuard g;
    auto p = h->forward(torch::randn({2, 8, 8, 8}) * 5, 32, 32);
    EXPECT_GT(p.min().item<double>(), 0.0);
    EXPECT_LT(p.max().item<double>(), 1.0);
    EXPECT_EQ(p.sizes(), (std::vector<int64_t>{2, 1, 32, 32}));

    auto flat = h->forward(torch::full({1, 8, 8, 8}, 0.4), 32, 32);
    // interior pixels only: the 3x3 conv sees zero padding at the border
    auto interior = flat.index({0, 0, torch::indexing::Slice(8, 24), torch::indexing::Slice(8, 24)});
    EXPECT_LT((interior - interior.mean()).abs().max().item<double>(), 1e-6);

    for (auto &p : h->parameters()) p.zero_();
    auto half = h->forward(torch::randn({1, 8, 8, 8}), 16, 16);
    EXPECT_LT((half - 0.5).abs().max().item<double>(), 1e-7);
}

TEST(Network, ForwardIsDeterministic) {
    auto m = build_network(small(4), 7);
    auto x = image(2, 32, 32);
    auto a = m->forward(x), b = m->forward(x);
    for (size_t i = 0; i < a.u_heads.size(); ++i) {
        EXPECT_TRUE(torch::equal(a.u_heads[i], b.u_heads[i]));
        EXPECT_TRUE(torch::equal(a.b_heads[i], b.b_heads[i]));
    }
}

TEST(Network, DroppingAuxiliaryHeadsLeavesFinalUnchanged) {
    auto m = build_network(small(4), 8);
    auto x = image(1, 32, 32);
    torch::NoGradGuard g;
    auto all = m->forward(x);
    auto only = m->forward(x, false);
    EXPECT_TRUE(only.u_heads.empty());
    EXPECT_TRUE(torch::equal(all.final, only.final));
}

TEST(Network, GradientReachesEveryParameter) {
    auto m = build_network(small(4), 9);
    auto x = image(2, 32, 32, 10);
    auto y = (torch::rand({2, 1, 32, 32}) > 0.6).to(torch::kFloat32);
    auto loss = total_loss(m->forward(x), y);
    loss.total.backward();
    for (const auto &p : m->named_parameters()) {
        ASSERT_TRUE(p.value().grad().defined()) << p.key();
        EXPECT_GT(p.value().grad().norm().item<double>(), 0.0) << p.key();
        EXPECT_TRUE(torch::isfinite(p.value().grad()).all().item<bool>()) << p.key();
    }
}

TEST(Network, NoNestedDsBuildsNoFusionHeads) {
    auto m = build_network(small(4, Ablation::NoNestedDs), 1);
    torch::NoGradGuard g;
    auto out = m->forward(image(1, 32, 32));
    EXPECT_TRUE(out.b_heads.empty());
    EXPECT_EQ(out.u_heads.size(), 3u);
    auto full = build_network(small(4), 1);
    EXPECT_LT(m->parameter_count(), full->parameter_count());
}

TEST(Network, MultiplicativeFusionRuns) {
    auto c = small(3);
    c.fusion_mode = FusionMode::Mul;
    auto m = build_network(c, 1);
    torch::NoGradGuard g;
    expect_probability_map(m->forward(image(1, 16, 16)).final, 16, 16);
}
