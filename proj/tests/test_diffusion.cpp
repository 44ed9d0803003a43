#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "tsdm/diffusion.hpp"
#include "tsdm/rng.hpp"

using namespace tsdm;

namespace {

SignalBatch random_batch(int count, int length, std::uint64_t seed) {
    SignalBatch b(count, length);
    Rng rng(seed);
    rng.fill_normal(b.values.data(), b.values.size());
    return b;
}

std::vector<int> steps_of(int count, int t) { return std::vector<int>(count, t); }

}  // namespace

TEST_CASE("q_sample reduces to x0 in the zero-noise limit", "[diffusion]") {
    // beta ~ 1e-15 makes abar_1 ~ 1 up to rounding.
    const NoiseSchedule s = linear_beta_schedule(2, 1e-15, 2e-15);
    const SignalBatch x0 = random_batch(3, 16, 7);
    const SignalBatch eps = random_batch(3, 16, 8);
    const SignalBatch xt = q_sample(x0, steps_of(3, 1), eps, s);
    for (std::size_t i = 0; i < xt.values.size(); ++i)
        CHECK(xt.values[i] == Catch::Approx(x0.values[i]).margin(1e-6));
}

TEST_CASE("q_sample with abar = 0.64 scales noise by 0.6", "[diffusion]") {
    // beta_1 = 0.36 gives abar_1 = 0.64 and sqrt(1 - 0.64) = 0.6.
    const NoiseSchedule s = linear_beta_schedule(2, 0.36, 0.37);
    SignalBatch x0(2, 8);  // zeros
    const SignalBatch eps = random_batch(2, 8, 9);
    const SignalBatch xt = q_sample(x0, steps_of(2, 1), eps, s);
    for (std::size_t i = 0; i < xt.values.size(); ++i)
        CHECK(xt.values[i] == Catch::Approx(0.6 * eps.values[i]).epsilon(1e-12));
}

TEST_CASE("q_sample hand-computed scalar case", "[diffusion]") {
    // abar_1 = 0.25: sqrt(0.25)*2 + sqrt(0.75)*(-1) = 1 - 0.8660254 = 0.1339746.
    const NoiseSchedule s = linear_beta_schedule(2, 0.75, 0.76);
    SignalBatch x0(1, 1), eps(1, 1);
    x0.at(0, 0) = 2.0;
    eps.at(0, 0) = -1.0;
    const SignalBatch xt = q_sample(x0, steps_of(1, 1), eps, s);
    CHECK(xt.at(0, 0) == Catch::Approx(0.1339746).margin(1e-7));
}

TEST_CASE("q_sample validates shapes and step range", "[diffusion]") {
    const NoiseSchedule s = linear_beta_schedule(4, 0.1, 0.4);
    const SignalBatch x0 = random_batch(2, 8, 1);
    CHECK_THROWS_AS(q_sample(x0, steps_of(2, 5), x0, s), std::out_of_range);
    CHECK_THROWS_AS(q_sample(x0, steps_of(2, 0), x0, s), std::out_of_range);
    CHECK_THROWS_AS(q_sample(x0, steps_of(2, 1), random_batch(2, 9, 2), s), std::invalid_argument);
    CHECK_THROWS_AS(q_sample(x0, steps_of(3, 1), x0, s), std::invalid_argument);
}

TEST_CASE("iterative forward with zero noise collapses to sqrt(abar_T) x0", "[diffusion]") {
    const NoiseSchedule s = linear_beta_schedule(10, 0.01, 0.2);
    const SignalBatch x0 = random_batch(2, 8, 3);
    const std::vector<SignalBatch> eps_seq(10, SignalBatch(2, 8));
    const SignalBatch xT = q_sample_iterative(x0, eps_seq, s);
    const double c = std::sqrt(alpha_bar_at(s, 10));
    for (std::size_t i = 0; i < xT.values.size(); ++i)
        CHECK(xT.values[i] == Catch::Approx(c * x0.values[i]).epsilon(1e-12));
}

TEST_CASE("iterative forward at T=1 equals q_sample for equal eps", "[diffusion]") {
    const NoiseSchedule s = linear_beta_schedule(2, 0.1, 0.2);
    // Single-step comparison on a T=2 schedule restricted to t=1.
    const SignalBatch x0 = random_batch(3, 8, 4);
    const SignalBatch eps = random_batch(3, 8, 5);
    const SignalBatch direct = q_sample(x0, steps_of(3, 1), eps, s);
    SignalBatch step = x0;
    const double ca = std::sqrt(s.alphas[0]);
    const double cn = std::sqrt(s.betas[0]);
    for (std::size_t i = 0; i < step.values.size(); ++i)
        step.values[i] = ca * x0.values[i] + cn * eps.values[i];
    for (std::size_t i = 0; i < step.values.size(); ++i)
        CHECK(step.values[i] == Catch::Approx(direct.values[i]).epsilon(1e-12));
}

TEST_CASE("iterative forward rejects wrong sequence length", "[diffusion]") {
    const NoiseSchedule s = linear_beta_schedule(5, 0.01, 0.1);
    const SignalBatch x0 = random_batch(1, 4, 6);
    CHECK_THROWS_AS(q_sample_iterative(x0, std::vector<SignalBatch>(4, x0), s),
                    std::invalid_argument);
}

TEST_CASE("closed-form and iterative forward agree in distribution", "[diffusion][slow]") {
    // T=50, L=8: mean within 3 standard errors of sqrt(abar_T) x0 and variance
    // within 5% of (1 - abar_T) over 1e4 runs.
    const int T = 50, L = 8, runs = 10000;
    const NoiseSchedule s = linear_beta_schedule(T, 1e-3, 0.05);
    SignalBatch x0(1, L);
    Rng xr(11);
    for (int i = 0; i < L; ++i) x0.at(0, i) = xr.uniform(-2.0, 2.0);

    Rng rng(12);
    std::vector<std::vector<double>> per_element(L);
    for (int r = 0; r < runs; ++r) {
        std::vector<SignalBatch> eps_seq;
        eps_seq.reserve(T);
        for (int t = 0; t < T; ++t) {
            SignalBatch e(1, L);
            rng.fill_normal(e.values.data(), e.values.size());
            eps_seq.push_back(std::move(e));
        }
        const SignalBatch xT = q_sample_iterative(x0, eps_seq, s);
        for (int i = 0; i < L; ++i) per_element[i].push_back(xT.at(0, i));
    }

    const double abar = alpha_bar_at(s, T);
    const double want_var = 1.0 - abar;
    for (int i = 0; i < L; ++i) {
        const auto st = oracle::stats(per_element[i]);
        const double se = std::sqrt(want_var / runs);
        CHECK(std::abs(st.mean - std::sqrt(abar) * x0.at(0, i)) < 3.0 * se);
        CHECK(std::abs(st.variance - want_var) / want_var < 0.05);
    }
}

TEST_CASE("posterior mean inverts the forward step exactly at t=1", "[diffusion]") {
    const NoiseSchedule s = linear_beta_schedule(30, 1e-3, 0.3);
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const SignalBatch x0 = random_batch(2, 8, rng.u64());
        const SignalBatch eps = random_batch(2, 8, rng.u64());
        const SignalBatch x1 = q_sample(x0, steps_of(2, 1), eps, s);
        const SignalBatch rec = posterior_mean(x1, steps_of(2, 1), eps, s);
        for (std::size_t i = 0; i < rec.values.size(); ++i)
            CHECK(std::abs(rec.values[i] - x0.values[i]) < 1e-6);
    }
}

TEST_CASE("posterior mean with zero eps_hat is x_t / sqrt(alpha_t)", "[diffusion]") {
    const NoiseSchedule s = linear_beta_schedule(10, 0.01, 0.1);
    const SignalBatch xt = random_batch(2, 8, 14);
    const SignalBatch zero(2, 8);
    const SignalBatch mu = posterior_mean(xt, steps_of(2, 4), zero, s);
    const double c = 1.0 / std::sqrt(s.alpha_at(4));
    for (std::size_t i = 0; i < mu.values.size(); ++i)
        CHECK(mu.values[i] == Catch::Approx(c * xt.values[i]).epsilon(1e-12));
}

TEST_CASE("p_sample_step rejects nonzero z at t=1", "[diffusion]") {
    const NoiseSchedule s = linear_beta_schedule(10, 0.01, 0.1);
    const SignalBatch xt = random_batch(1, 4, 15);
    SignalBatch z(1, 4);
    z.at(0, 2) = 0.5;
    CHECK_THROWS_AS(p_sample_step(xt, xt, 1, z, s), std::invalid_argument);
    CHECK_NOTHROW(p_sample_step(xt, xt, 2, z, s));
}

TEST_CASE("p_sample_step reproduces x0 with the true noise at t=1", "[diffusion]") {
    const NoiseSchedule s = linear_beta_schedule(20, 1e-3, 0.2);
    const SignalBatch x0 = random_batch(3, 8, 16);
    const SignalBatch eps = random_batch(3, 8, 17);
    const SignalBatch x1 = q_sample(x0, steps_of(3, 1), eps, s);
    const SignalBatch rec = p_sample_step(eps, x1, 1, SignalBatch(3, 8), s);
    for (std::size_t i = 0; i < rec.values.size(); ++i)
        CHECK(std::abs(rec.values[i] - x0.values[i]) < 1e-6);
}

TEST_CASE("p_sample_step noise spread matches sigma_t", "[diffusion][slow]") {
    const NoiseSchedule s = linear_beta_schedule(10, 0.05, 0.3);
    const int t = 7;
    const SignalBatch xt = random_batch(1, 1, 18);
    const SignalBatch eps_hat = random_batch(1, 1, 19);
    Rng rng(20);
    std::vector<double> outs;
    for (int r = 0; r < 10000; ++r) {
        SignalBatch z(1, 1);
        z.at(0, 0) = rng.normal();
        outs.push_back(p_sample_step(eps_hat, xt, t, z, s).at(0, 0));
    }
    const auto st = oracle::stats(outs);
    CHECK(std::abs(st.variance - s.beta_at(t)) / s.beta_at(t) < 0.05);
}

TEST_CASE("loss_simple matches its tiny examples", "[diffusion]") {
    SignalBatch a(1, 2), b(1, 2);
    CHECK(loss_simple(a, b) == 0.0);
    a.values = {1.0, 1.0};
    CHECK(loss_simple(a, b) == Catch::Approx(1.0));
    a.values = {1.0, -1.0};
    b.values = {0.0, 0.0};
    CHECK(loss_simple(a, b) == Catch::Approx(1.0));
    CHECK_THROWS_AS(loss_simple(a, SignalBatch(2, 2)), std::invalid_argument);
}

TEST_CASE("loss_simple is zero only for a perfect prediction", "[diffusion]") {
    Rng rng(21);
    const SignalBatch eps = random_batch(2, 16, rng.u64());
    SignalBatch eps_hat = eps;
    CHECK(loss_simple(eps, eps_hat) == 0.0);
    eps_hat.at(1, 3) += 1e-3;
    CHECK(loss_simple(eps, eps_hat) > 0.0);
}

TEST_CASE("sampling with count=0 returns an empty batch and trace", "[diffusion]") {
    const NoiseSchedule s = linear_beta_schedule(5, 0.01, 0.1);
    int calls = 0;
    const NoisePredictor model = [&](const SignalBatch& x, const std::vector<int>&) {
        ++calls;
        return SignalBatch(x.count, x.length);
    };
    const auto [out, trace] = sample(model, s, 0, 16, 1, 2);
    CHECK(out.count == 0);
    CHECK(out.length == 16);
    CHECK(trace.snapshots.empty());
    CHECK(calls == 0);
}

TEST_CASE("sampling is deterministic and partition invariant", "[diffusion]") {
    const NoiseSchedule s = linear_beta_schedule(8, 0.01, 0.2);
    const NoisePredictor model = [](const SignalBatch& x, const std::vector<int>& t) {
        SignalBatch out(x.count, x.length);
        for (int n = 0; n < x.count; ++n)
            for (int i = 0; i < x.length; ++i)
                out.at(n, i) = 0.1 * x.at(n, i) + 0.01 * t[n];
        return out;
    };
    const auto [a, ta] = sample(model, s, 5, 8, 99);
    const auto [b, tb] = sample(model, s, 5, 8, 99);
    REQUIRE(a.values == b.values);  // bit-identical

    const auto [c, tc] = sample(model, s, 3, 8, 99);
    for (int n = 0; n < 3; ++n)
        for (int i = 0; i < 8; ++i) CHECK(c.at(n, i) == a.at(n, i));

    const auto [d, td] = sample(model, s, 5, 8, 100);
    CHECK(d.values != a.values);
}

TEST_CASE("teacher-forcing reverse loop reconstructs x0", "[diffusion]") {
    // Oracle predictor: the exact noise of Eq. 5 for the current state,
    // eps = (x_t - sqrt(abar_t) x0) / sqrt(1 - abar_t).
    const int T = 50, L = 8, B = 2;
    const NoiseSchedule s = linear_beta_schedule(T, 1e-3, 0.06);
    const SignalBatch x0 = random_batch(B, L, 22);
    const SignalBatch eps = random_batch(B, L, 23);
    const SignalBatch xT = q_sample(x0, steps_of(B, T), eps, s);

    const NoisePredictor teacher = [&](const SignalBatch& x, const std::vector<int>& t) {
        SignalBatch out(x.count, x.length);
        for (int n = 0; n < x.count; ++n) {
            const double abar = alpha_bar_at(s, t[n]);
            for (int i = 0; i < x.length; ++i)
                out.at(n, i) = (x.at(n, i) - std::sqrt(abar) * x0.at(n, i)) / std::sqrt(1.0 - abar);
        }
        return out;
    };

    const auto [rec, trace] = denoise_from(teacher, s, xT, 0, /*deterministic=*/true);
    for (std::size_t i = 0; i < rec.values.size(); ++i)
        CHECK(std::abs(rec.values[i] - x0.values[i]) < 1e-4);
}

TEST_CASE("denoise trace records strictly decreasing steps", "[diffusion]") {
    const NoiseSchedule s = linear_beta_schedule(10, 0.01, 0.1);
    const NoisePredictor model = [](const SignalBatch& x, const std::vector<int>&) {
        return SignalBatch(x.count, x.length);
    };
    const auto [out, trace] = sample(model, s, 2, 8, 5, 3);
    REQUIRE(!trace.snapshots.empty());
    for (std::size_t i = 1; i < trace.snapshots.size(); ++i)
        CHECK(trace.snapshots[i].first < trace.snapshots[i - 1].first);
    CHECK(trace.snapshots.back().first == 1);
    const std::string csv = trace_to_csv(trace);
    CHECK(csv.rfind("t,series_index,sample_index,value\n", 0) == 0);
}
