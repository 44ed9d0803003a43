#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsdm/rng.hpp"
#include "tsdm/schedule.hpp"
#include "tsdm/signal.hpp"

namespace tsdm {

/// Noise predictor: given a noised batch and per-item step indices, returns
/// the predicted noise, same shape. The U-Net provides one; tests plug in
/// oracles.
using NoisePredictor =
    std::function<SignalBatch(const SignalBatch& x_t, const std::vector<int>& t)>;

/// Snapshots of the batch taken while denoising, tagged with the step index
/// that was just applied (strictly decreasing from T toward 1).
struct DenoiseTrace {
    std::vector<std::pair<int, SignalBatch>> snapshots;
};

namespace detail {
inline void check_steps(const std::vector<int>& t, int count, const NoiseSchedule& s,
                        const char* what) {
    if (static_cast<int>(t.size()) != count)
        throw std::invalid_argument(std::string(what) + ": need one step index per item");
    for (int ti : t) s.check_step(ti);
}
}  // namespace detail

/// Closed-form forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps,
/// per item.
inline SignalBatch q_sample(const SignalBatch& x0, const std::vector<int>& t,
                            const SignalBatch& eps, const NoiseSchedule& schedule) {
    require_same_shape(x0, eps, "q_sample");
    detail::check_steps(t, x0.count, schedule, "q_sample");
    SignalBatch out(x0.count, x0.length);
    for (int n = 0; n < x0.count; ++n) {
        const double abar = alpha_bar_at(schedule, t[n]);
        const double cs = std::sqrt(abar);
        const double cn = std::sqrt(1.0 - abar);
        const double* xr = x0.row(n);
        const double* er = eps.row(n);
        double* yr = out.row(n);
        for (int i = 0; i < x0.length; ++i) yr[i] = cs * xr[i] + cn * er[i];
    }
    return out;
}

/// Step-form forward noising applied T times:
/// x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) eps_t.
/// Distributional oracle for q_sample; eps_sequence[i] is the draw of step i+1.
inline SignalBatch q_sample_iterative(const SignalBatch& x0,
                                      const std::vector<SignalBatch>& eps_sequence,
                                      const NoiseSchedule& schedule) {
    if (static_cast<int>(eps_sequence.size()) != schedule.total_steps)
        throw std::invalid_argument("q_sample_iterative: need exactly total_steps noise batches");
    SignalBatch x = x0;
    for (int i = 0; i < schedule.total_steps; ++i) {
        const SignalBatch& e = eps_sequence[i];
        require_same_shape(x0, e, "q_sample_iterative");
        const double ca = std::sqrt(schedule.alphas[i]);
        const double cn = std::sqrt(schedule.betas[i]);
        for (std::size_t j = 0; j < x.values.size(); ++j)
            x.values[j] = ca * x.values[j] + cn * e.values[j];
    }
    return x;
}

/// Mean of the parameterized reverse step:
/// (1 / sqrt(alpha_t)) * (x_t - ((1 - alpha_t) / sqrt(1 - abar_t)) * eps_hat).
inline SignalBatch posterior_mean(const SignalBatch& x_t, const std::vector<int>& t,
                                  const SignalBatch& eps_hat, const NoiseSchedule& schedule) {
    require_same_shape(x_t, eps_hat, "posterior_mean");
    detail::check_steps(t, x_t.count, schedule, "posterior_mean");
    SignalBatch out(x_t.count, x_t.length);
    for (int n = 0; n < x_t.count; ++n) {
        const double alpha = schedule.alpha_at(t[n]);
        const double abar = alpha_bar_at(schedule, t[n]);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
        const double coef = (1.0 - alpha) / std::sqrt(1.0 - abar);
        const double* xr = x_t.row(n);
        const double* er = eps_hat.row(n);
        double* yr = out.row(n);
        for (int i = 0; i < x_t.length; ++i) yr[i] = inv_sqrt_alpha * (xr[i] - coef * er[i]);
    }
    return out;
}

/// One reverse step: posterior_mean(x_t, t, eps_hat) + sigma_t * z.
/// z must be all zeros at t = 1 so the final output carries no noise floor.
inline SignalBatch p_sample_step(const SignalBatch& eps_hat, const SignalBatch& x_t, int t,
                                 const SignalBatch& z, const NoiseSchedule& schedule) {
    require_same_shape(x_t, eps_hat, "p_sample_step");
    require_same_shape(x_t, z, "p_sample_step");
    schedule.check_step(t);
    if (t == 1) {
        for (double v : z.values)
            if (v != 0.0) throw std::invalid_argument("p_sample_step: z must be zero at t = 1");
    }
    const std::vector<int> tv(static_cast<std::size_t>(x_t.count), t);
    SignalBatch out = posterior_mean(x_t, tv, eps_hat, schedule);
    const double sigma = schedule.sigma_at(t);
    for (std::size_t j = 0; j < out.values.size(); ++j) out.values[j] += sigma * z.values[j];
    return out;
}

/// Simplified training objective: mean squared error over all elements.
inline double loss_simple(const SignalBatch& eps, const SignalBatch& eps_hat) {
    require_same_shape(eps, eps_hat, "loss_simple");
    if (eps.values.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t j = 0; j < eps.values.size(); ++j) {
        const double d = eps.values[j] - eps_hat.values[j];
        acc += d * d;
    }
    return acc / static_cast<double>(eps.values.size());
}

/// Full reverse chain from a given x_T. When deterministic is true, z = 0 at
/// every step (teacher-forcing harness); otherwise z is drawn per item from
/// substreams of seed (offset by stream_offset). Records a snapshot every
/// trace_every applied steps (plus the final state) when trace_every is set.
inline std::pair<SignalBatch, DenoiseTrace> denoise_from(
    const NoisePredictor& model, const NoiseSchedule& schedule, SignalBatch x,
    std::uint64_t seed, bool deterministic, std::optional<int> trace_every = std::nullopt,
    std::uint64_t stream_offset = 0) {
    if (trace_every && *trace_every <= 0)
        throw std::invalid_argument("denoise_from: trace_every must be positive");
    DenoiseTrace trace;
    if (x.count == 0) return {std::move(x), std::move(trace)};

    std::vector<Rng> streams;
    if (!deterministic) {
        streams.reserve(static_cast<std::size_t>(x.count));
        for (int n = 0; n < x.count; ++n)
            streams.emplace_back(substream_seed(seed, stream_offset + static_cast<std::uint64_t>(n)));
    }

    SignalBatch z(x.count, x.length);
    const int T = schedule.total_steps;
    for (int t = T; t >= 1; --t) {
        const std::vector<int> tv(static_cast<std::size_t>(x.count), t);
        const SignalBatch eps_hat = model(x, tv);
        require_same_shape(x, eps_hat, "denoise_from: predictor output");
        if (t > 1 && !deterministic) {
            for (int n = 0; n < x.count; ++n) streams[static_cast<std::size_t>(n)].fill_normal(z.row(n), z.length);
        } else {
            z.values.assign(z.values.size(), 0.0);
        }
        x = p_sample_step(eps_hat, x, t, z, schedule);
        if (trace_every && ((T - t + 1) % *trace_every == 0 || t == 1))
            trace.snapshots.emplace_back(t, x);
    }
    return {std::move(x), std::move(trace)};
}

/// Generate `count` series of `length` samples: x_T from standard normal,
/// then the reverse chain down to t = 1. Per-item noise comes from substreams
/// derived by counter offset, so results are invariant to batch partitioning
/// and the call is a pure function of (model, schedule, seed, count, length).
inline std::pair<SignalBatch, DenoiseTrace> sample(const NoisePredictor& model,
                                                   const NoiseSchedule& schedule, int count,
                                                   int length, std::uint64_t seed,
                                                   std::optional<int> trace_every = std::nullopt) {
    if (count < 0) throw std::invalid_argument("sample: count must be >= 0");
    SignalBatch x(count, length);
    for (int n = 0; n < count; ++n) {
        Rng init(substream_seed(seed, static_cast<std::uint64_t>(n)));
        init.fill_normal(x.row(n), length);
    }
    if (count == 0) return {std::move(x), DenoiseTrace{}};
    // Reverse-step z streams sit past the x_T init streams, so every draw is
    // a fixed function of (seed, item index).
    return denoise_from(model, schedule, std::move(x), seed, false, trace_every, 1ull << 32);
}

/// Trace export: CSV with columns (t, series_index, sample_index, value).
inline std::string trace_to_csv(const DenoiseTrace& trace) {
    std::string out = "t,series_index,sample_index,value\n";
    char buf[64];
    for (const auto& [t, batch] : trace.snapshots)
        for (int n = 0; n < batch.count; ++n)
            for (int i = 0; i < batch.length; ++i) {
                std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.9g\n", t, n, i, batch.at(n, i));
                out += buf;
            }
    return out;
}

}  // namespace tsdm
