#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "tsdm/rng.hpp"
#include "tsdm/unet.hpp"

using namespace tsdm;

namespace {

unet::Config tiny_config() {
    unet::Config cfg;
    cfg.length = 32;
    cfg.base_channels = 4;
    cfg.channel_multipliers = {1, 2};
    cfg.res_blocks_down = 2;
    cfg.res_blocks_up = 3;
    cfg.attn_middle = true;
    cfg.attn_up_stages = {0, 1};
    cfg.time_embed_dim = 16;
    cfg.precision = unet::Precision::Double;
    return cfg;
}

struct Shape {
    std::vector<int> dims;
    std::size_t elements() const {
        std::size_t n = 1;
        for (int d : dims) n *= static_cast<std::size_t>(d);
        return n;
    }
};

/// Hand-derived architecture table for tiny_config(), walking the block list
/// independently of the implementation: per down stage two ResBlocks then a
/// DownSample between stages, two ResBlocks with attention in the middle,
/// three ResBlocks per up stage each consuming one skip, attention after the
/// last up ResBlock, UpSample between stages, and the output head.
std::vector<std::pair<std::string, Shape>> tiny_shape_oracle() {
    std::vector<std::pair<std::string, Shape>> t;
    auto res = [&](const std::string& p, int cin, int cout) {
        t.push_back({p + ".norm1.g", {{cin}}});
        t.push_back({p + ".norm1.b", {{cin}}});
        t.push_back({p + ".conv1.w", {{cout, cin, 3}}});
        t.push_back({p + ".conv1.b", {{cout}}});
        t.push_back({p + ".temb.w", {{cout, 16}}});
        t.push_back({p + ".temb.b", {{cout}}});
        t.push_back({p + ".norm2.g", {{cout}}});
        t.push_back({p + ".norm2.b", {{cout}}});
        t.push_back({p + ".conv2.w", {{cout, cout, 3}}});
        t.push_back({p + ".conv2.b", {{cout}}});
        if (cin != cout) {
            t.push_back({p + ".skip.w", {{cout, cin, 1}}});
            t.push_back({p + ".skip.b", {{cout}}});
        }
    };
    auto attn = [&](const std::string& p, int c) {
        t.push_back({p + ".norm.g", {{c}}});
        t.push_back({p + ".norm.b", {{c}}});
        for (const char* q : {"q", "k", "v", "proj"}) {
            t.push_back({p + "." + std::string(q) + ".w", {{c, c, 1}}});
            t.push_back({p + "." + std::string(q) + ".b", {{c}}});
        }
    };

    t.push_back({"temb.lin1.w", {{16, 16}}});
    t.push_back({"temb.lin1.b", {{16}}});
    t.push_back({"temb.lin2.w", {{16, 16}}});
    t.push_back({"temb.lin2.b", {{16}}});
    t.push_back({"conv_in.w", {{4, 1, 3}}});
    t.push_back({"conv_in.b", {{4}}});
    res("down0.res0", 4, 4);
    res("down0.res1", 4, 4);
    t.push_back({"down0.down.w", {{4, 4, 4}}});
    t.push_back({"down0.down.b", {{4}}});
    res("down1.res0", 4, 8);
    res("down1.res1", 8, 8);
    res("mid.res0", 8, 8);
    attn("mid.attn0", 8);
    res("mid.res1", 8, 8);
    attn("mid.attn1", 8);
    // skips remaining: conv_in 4, d0r0 4, d0r1 4, ds0 4, d1r0 8, d1r1 8
    res("up1.res0", 8 + 8, 8);
    res("up1.res1", 8 + 8, 8);
    res("up1.res2", 8 + 4, 8);
    attn("up1.attn", 8);
    t.push_back({"up1.up.w", {{8, 8, 3}}});
    t.push_back({"up1.up.b", {{8}}});
    res("up0.res0", 8 + 4, 4);
    res("up0.res1", 4 + 4, 4);
    res("up0.res2", 4 + 4, 4);
    attn("up0.attn", 4);
    t.push_back({"out.norm.g", {{4}}});
    t.push_back({"out.norm.b", {{4}}});
    t.push_back({"out.conv.w", {{1, 4, 3}}});
    t.push_back({"out.conv.b", {{1}}});
    return t;
}

SignalBatch random_signal(int count, int length, std::uint64_t seed) {
    SignalBatch b(count, length);
    Rng rng(seed);
    rng.fill_normal(b.values.data(), b.values.size());
    return b;
}

}  // namespace

TEST_CASE("shape table matches the hand-derived architecture oracle", "[unet]") {
    const auto table = unet::param_shape_table(tiny_config());
    const auto expected = tiny_shape_oracle();
    REQUIRE(table.size() == expected.size());
    for (std::size_t i = 0; i < table.size(); ++i) {
        INFO("tensor " << i << ": " << table[i].name);
        CHECK(table[i].name == expected[i].first);
        REQUIRE(table[i].rank == static_cast<int>(expected[i].second.dims.size()));
        for (int d = 0; d < table[i].rank; ++d)
            CHECK(table[i].dims[static_cast<std::size_t>(d)] == expected[i].second.dims[static_cast<std::size_t>(d)]);
    }
}

TEST_CASE("parameter count is the oracle total", "[unet]") {
    std::size_t want = 0;
    for (const auto& [name, shape] : tiny_shape_oracle()) want += shape.elements();
    CHECK(unet::param_count(tiny_config()) == want);
    const auto params = unet::init_params<double>(tiny_config(), 1);
    CHECK(params.total_elements() == want);
}

TEST_CASE("init is deterministic per seed and zero in the output conv", "[unet]") {
    const auto cfg = tiny_config();
    const auto a = unet::init_params<float>(cfg, 7);
    const auto b = unet::init_params<float>(cfg, 7);
    REQUIRE(a.count() == b.count());
    for (std::size_t i = 0; i < a.count(); ++i) {
        CHECK(a.tensors[i].first == b.tensors[i].first);
        CHECK(a.tensors[i].second.v == b.tensors[i].second.v);
    }
    const auto c = unet::init_params<float>(cfg, 8);
    CHECK(c.at("conv_in.w").v != a.at("conv_in.w").v);

    for (float v : a.at("out.conv.w").v) CHECK(v == 0.0f);
    for (float v : a.at("out.conv.b").v) CHECK(v == 0.0f);
    for (float v : a.at("mid.res0.norm1.g").v) CHECK(v == 1.0f);
    for (float v : a.at("mid.res0.norm1.b").v) CHECK(v == 0.0f);
}

TEST_CASE("freshly initialized model predicts exactly zero noise", "[unet]") {
    const auto cfg = tiny_config();
    const auto params = unet::init_params<double>(cfg, 3);
    const SignalBatch x = random_signal(2, cfg.length, 5);
    const SignalBatch y = unet::forward<double>(params, cfg, x, {1, 9});
    REQUIRE(y.count == 2);
    REQUIRE(y.length == cfg.length);
    for (double v : y.values) CHECK(v == 0.0);
}

TEST_CASE("forward is pure and shape preserving", "[unet]") {
    const auto cfg = tiny_config();
    auto params = unet::init_params<double>(cfg, 3);
    // Give the output layer weight so outputs are nontrivial.
    Rng rng(4);
    for (auto& v : params.at("out.conv.w").v) v = rng.normal() * 0.1;
    const SignalBatch x = random_signal(3, cfg.length, 6);
    const std::vector<int> t{1, 50, 200};
    const SignalBatch y1 = unet::forward<double>(params, cfg, x, t);
    const SignalBatch y2 = unet::forward<double>(params, cfg, x, t);
    REQUIRE(y1.count == 3);
    REQUIRE(y1.length == cfg.length);
    CHECK(y1.values == y2.values);
    bool nonzero = false;
    for (double v : y1.values) {
        CHECK(std::isfinite(v));
        nonzero = nonzero || v != 0.0;
    }
    CHECK(nonzero);
}

TEST_CASE("forward validates input shape", "[unet]") {
    const auto cfg = tiny_config();
    const auto params = unet::init_params<double>(cfg, 3);
    CHECK_THROWS_AS(unet::forward<double>(params, cfg, random_signal(1, 16, 1), {1}),
                    std::invalid_argument);
    CHECK_THROWS_AS(unet::forward<double>(params, cfg, random_signal(2, 32, 1), {1}),
                    std::invalid_argument);
}

TEST_CASE("empty batch forward returns an empty batch", "[unet]") {
    const auto cfg = tiny_config();
    const auto params = unet::init_params<double>(cfg, 3);
    const SignalBatch y = unet::forward<double>(params, cfg, SignalBatch(0, cfg.length), {});
    CHECK(y.count == 0);
    CHECK(y.length == cfg.length);
}

TEST_CASE("time embedding raw components", "[unet]") {
    for (double v : unet::time_embedding(123, 32)) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    const auto e0 = unet::time_embedding(0, 8);
    for (std::size_t i = 0; i < e0.size(); i += 2) {
        CHECK(e0[i] == 0.0);
        CHECK(e0[i + 1] == 1.0);
    }
    const auto e1 = unet::time_embedding(1, 4);
    CHECK(e1[0] == Catch::Approx(std::sin(1.0)).epsilon(1e-12));
    CHECK(e1[1] == Catch::Approx(std::cos(1.0)).epsilon(1e-12));
    CHECK(e1[2] == Catch::Approx(std::sin(0.01)).epsilon(1e-12));
    CHECK(e1[3] == Catch::Approx(std::cos(0.01)).epsilon(1e-12));
    CHECK_THROWS_AS(unet::time_embedding(1, 5), std::invalid_argument);
}

TEST_CASE("config validation catches structural mistakes", "[unet]") {
    auto cfg = tiny_config();
    cfg.length = 30;  // not divisible by 2^stages
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.res_blocks_up = 2;  // skip stack would not balance
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.attn_up_stages = {2};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.time_embed_dim = 15;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.res_kernel_size = 4;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("loss at a perfect prediction has all-zero gradients", "[unet]") {
    // Zero-initialized output conv predicts zero noise; with eps = 0 the MSE
    // sits at its minimum, so every parameter gradient is exactly zero.
    const auto cfg = tiny_config();
    const auto params = unet::init_params<double>(cfg, 11);
    const NoiseSchedule s = linear_beta_schedule(100, 1e-3, 0.05);
    const SignalBatch x0 = random_signal(2, cfg.length, 12);
    const SignalBatch eps(2, cfg.length);
    const auto lg = unet::loss_and_gradients<double>(params, cfg, x0, {5, 60}, eps, s);
    CHECK(lg.loss == 0.0);
    for (const auto& [name, g] : lg.gradients.tensors)
        for (double v : g.v) {
            INFO(name);
            REQUIRE(v == 0.0);
        }
}

TEST_CASE("non-finite loss reports the first offending tensor", "[unet]") {
    const auto cfg = tiny_config();
    auto params = unet::init_params<double>(cfg, 11);
    params.at("down0.res0.conv1.w")(0, 0, 0) = std::numeric_limits<double>::quiet_NaN();
    const NoiseSchedule s = linear_beta_schedule(50, 1e-3, 0.05);
    const SignalBatch x0 = random_signal(2, cfg.length, 12);
    const SignalBatch eps = random_signal(2, cfg.length, 13);
    CHECK_THROWS_WITH(unet::loss_and_gradients<double>(params, cfg, x0, {5, 30}, eps, s),
                      Catch::Matchers::ContainsSubstring("offending tensor"));
    // Non-finite input is rejected before evaluation.
    SignalBatch bad = x0;
    bad.at(0, 0) = std::numeric_limits<double>::infinity();
    const auto clean = unet::init_params<double>(cfg, 11);
    CHECK_THROWS_WITH(unet::loss_and_gradients<double>(clean, cfg, bad, {5, 30}, eps, s),
                      Catch::Matchers::ContainsSubstring("non-finite input"));
}

TEST_CASE("gradients are unchanged under batch duplication", "[unet]") {
    const auto cfg = tiny_config();
    auto params = unet::init_params<double>(cfg, 13);
    Rng rng(14);
    for (auto& v : params.at("out.conv.w").v) v = rng.normal() * 0.05;
    const NoiseSchedule s = linear_beta_schedule(100, 1e-3, 0.05);
    const SignalBatch x0 = random_signal(2, cfg.length, 15);
    const SignalBatch eps = random_signal(2, cfg.length, 16);

    SignalBatch x0d(4, cfg.length), epsd(4, cfg.length);
    for (int n = 0; n < 4; ++n) {
        std::copy_n(x0.row(n % 2), cfg.length, x0d.row(n));
        std::copy_n(eps.row(n % 2), cfg.length, epsd.row(n));
    }

    const auto a = unet::loss_and_gradients<double>(params, cfg, x0, {7, 80}, eps, s);
    const auto b = unet::loss_and_gradients<double>(params, cfg, x0d, {7, 80, 7, 80}, epsd, s);
    CHECK(a.loss == Catch::Approx(b.loss).epsilon(1e-12));
    for (std::size_t i = 0; i < a.gradients.count(); ++i) {
        const auto& ga = a.gradients.tensors[i].second;
        const auto& gb = b.gradients.tensors[i].second;
        for (std::size_t j = 0; j < ga.size(); ++j)
            CHECK(ga.v[j] == Catch::Approx(gb.v[j]).margin(1e-12).epsilon(1e-9));
    }
}

TEST_CASE("reverse-mode gradients match finite differences", "[unet]") {
    // Smoke-test version of the full acceptance check: ~60 random coordinates
    // spread over every tensor role.
    const auto cfg = tiny_config();
    auto params = unet::init_params<double>(cfg, 17);
    Rng rng(18);
    for (auto& v : params.at("out.conv.w").v) v = rng.normal() * 0.1;

    const NoiseSchedule s = linear_beta_schedule(50, 1e-3, 0.05);
    const SignalBatch x0 = random_signal(2, cfg.length, 19);
    const SignalBatch eps = random_signal(2, cfg.length, 20);
    const std::vector<int> t{3, 42};

    const auto lg = unet::loss_and_gradients<double>(params, cfg, x0, t, eps, s);

    Rng pick(21);
    int checked = 0;
    const double h = 1e-5;
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t ti = pick.u64() % params.count();
        auto& tensor = params.tensors[ti].second;
        const std::size_t j = pick.u64() % tensor.size();
        const double keep = tensor.v[j];
        tensor.v[j] = keep + h;
        const double lp = unet::training_loss<double>(params, cfg, x0, t, eps, s);
        tensor.v[j] = keep - h;
        const double lm = unet::training_loss<double>(params, cfg, x0, t, eps, s);
        tensor.v[j] = keep;
        const double fd = (lp - lm) / (2.0 * h);
        const double g = lg.gradients.tensors[ti].second.v[j];
        INFO("tensor " << params.tensors[ti].first << " coord " << j << " fd " << fd << " g " << g);
        if (std::abs(g) < 1e-3)
            CHECK(std::abs(g - fd) < 1e-7);
        else
            CHECK(std::abs(g - fd) / std::abs(g) < 1e-4);
        ++checked;
    }
    CHECK(checked == 60);
}
