#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

namespace tsdm {

/// Diffusion noise schedule: per-step variances beta_t, alpha_t = 1 - beta_t,
/// their running products alpha_bar_t, and the reverse-step variances
/// sigma_t^2 (fixed to beta_t). Storage is 0-indexed; step indices at the API
/// boundary are 1-based, i.e. betas[i] is the variance of step t = i + 1.
struct NoiseSchedule {
    int total_steps = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
    std::vector<double> reverse_vars;

    void check_step(int t) const {
        if (t < 1 || t > total_steps)
            throw std::out_of_range("schedule: step index " + std::to_string(t) +
                                    " outside [1, " + std::to_string(total_steps) + "]");
    }

    double beta_at(int t) const { check_step(t); return betas[t - 1]; }
    double alpha_at(int t) const { check_step(t); return alphas[t - 1]; }
    double reverse_var_at(int t) const { check_step(t); return reverse_vars[t - 1]; }
    double sigma_at(int t) const { return std::sqrt(reverse_var_at(t)); }
};

/// alpha_bar at 1-based step t.
inline double alpha_bar_at(const NoiseSchedule& s, int t) {
    s.check_step(t);
    return s.alpha_bars[t - 1];
}

/// Linearly interpolated betas from beta_start to beta_end over total_steps
/// steps, with all derived arrays populated.
inline NoiseSchedule linear_beta_schedule(int total_steps, double beta_start, double beta_end) {
    if (total_steps < 2) throw std::invalid_argument("schedule: total_steps must be >= 2");
    if (!(beta_start > 0.0)) throw std::invalid_argument("schedule: beta_start must be > 0");
    if (!(beta_end < 1.0)) throw std::invalid_argument("schedule: beta_end must be < 1");
    if (!(beta_start < beta_end))
        throw std::invalid_argument("schedule: beta_start must be < beta_end");

    NoiseSchedule s;
    s.total_steps = total_steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.resize(total_steps);
    s.alphas.resize(total_steps);
    s.alpha_bars.resize(total_steps);
    s.reverse_vars.resize(total_steps);

    const double step = (beta_end - beta_start) / (total_steps - 1);
    double bar = 1.0;
    for (int i = 0; i < total_steps; ++i) {
        s.betas[i] = beta_start + i * step;
        s.alphas[i] = 1.0 - s.betas[i];
        bar *= s.alphas[i];
        s.alpha_bars[i] = bar;
        s.reverse_vars[i] = s.betas[i];
    }
    if (!(s.alpha_bars.back() > 0.0))
        throw std::invalid_argument(
            "schedule: alpha_bar underflows to zero; reduce total_steps or beta_end");
    return s;
}

/// Re-checks every structural invariant of a schedule. Used after
/// deserialization and in tests.
inline void validate_schedule(const NoiseSchedule& s) {
    const int T = s.total_steps;
    if (T < 2 || static_cast<int>(s.betas.size()) != T || static_cast<int>(s.alphas.size()) != T ||
        static_cast<int>(s.alpha_bars.size()) != T || static_cast<int>(s.reverse_vars.size()) != T)
        throw std::invalid_argument("schedule: inconsistent array sizes");
    if (!(s.alpha_bars.back() > 0.0))
        throw std::invalid_argument("schedule: alpha_bar reaches zero");
    double bar = 1.0;
    for (int i = 0; i < T; ++i) {
        if (!(s.betas[i] > 0.0 && s.betas[i] < 1.0))
            throw std::invalid_argument("schedule: beta outside (0, 1)");
        if (i > 0 && !(s.betas[i] > s.betas[i - 1]))
            throw std::invalid_argument("schedule: betas not strictly increasing");
        if (s.alphas[i] != 1.0 - s.betas[i])
            throw std::invalid_argument("schedule: alpha != 1 - beta");
        bar *= s.alphas[i];
        const double rel = std::abs(s.alpha_bars[i] - bar) / bar;
        if (!(rel < 1e-12)) throw std::invalid_argument("schedule: alpha_bar drifts from product");
        if (i > 0 && !(s.alpha_bars[i] < s.alpha_bars[i - 1]))
            throw std::invalid_argument("schedule: alpha_bars not strictly decreasing");
        if (s.reverse_vars[i] != s.betas[i])
            throw std::invalid_argument("schedule: reverse variance != beta");
    }
}

}  // namespace tsdm
