#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsdm/bytes.hpp"
#include "tsdm/parallel.hpp"
#include "tsdm/config_json.hpp"
#include "tsdm/data.hpp"
#include "tsdm/diffusion.hpp"
#include "tsdm/rng.hpp"
#include "tsdm/schedule.hpp"
#include "tsdm/unet.hpp"

namespace tsdm {

/// Training-run configuration. The optimizer is adam-style with fixed decay
/// rates (0.9, 0.999) and epsilon 1e-8; gradients are clipped to global norm
/// 1.0 before every update.
struct TrainConfig {
    int batch_size = 10;
    int epochs = 200;
    int total_steps = 3000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double learning_rate = 2e-4;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;        // epochs between checkpoints; 0 disables
    std::string checkpoint_path;     // required when checkpoint_every > 0

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
        if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
        if (total_steps < 2) throw std::invalid_argument("train config: total_steps must be >= 2");
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("train config: learning_rate must be positive");
        if (checkpoint_every < 0)
            throw std::invalid_argument("train config: checkpoint_every must be >= 0");
        if (checkpoint_every > 0 && checkpoint_path.empty())
            throw std::invalid_argument("train config: checkpoint_every needs checkpoint_path");
    }

    NoiseSchedule make_schedule() const {
        return linear_beta_schedule(total_steps, beta_start, beta_end);
    }
};

struct TrainReport {
    std::vector<std::pair<std::int64_t, double>> loss_history;  // (step, loss)
    std::vector<double> epoch_seconds;
    std::string final_checkpoint_path;
};

struct TrainResult {
    unet::Params<float> params;
    TrainReport report;
};

/// Uniform step draw in [1, T].
inline int draw_timestep(Rng& rng, int total_steps) {
    return 1 + static_cast<int>(rng.u64() % static_cast<std::uint64_t>(total_steps));
}

// ---- checkpoint format ----
// magic "TSDC", version u32 LE = 1, schedule block (T u32, beta_start f64,
// beta_end f64), norm scale f64, config block (u32 length + canonical UTF-8
// JSON), tensor count u32, then per tensor: name length u16 + UTF-8 name,
// rank u8, dims u32 each, f32 LE data in architecture order.

struct Checkpoint {
    unet::Params<float> params;
    unet::Config config;
    NoiseSchedule schedule;
    double norm_scale = 1.0;
};

inline std::string checkpoint_to_bytes(const unet::Params<float>& params, const unet::Config& cfg,
                                       const NoiseSchedule& schedule, double norm_scale) {
    const auto table = unet::param_shape_table(cfg);
    if (params.count() != table.size())
        throw std::invalid_argument("checkpoint: parameter set does not match config");
    std::string out;
    out += "TSDC";
    bytes::put_u32(out, 1);
    bytes::put_u32(out, static_cast<std::uint32_t>(schedule.total_steps));
    bytes::put_f64(out, schedule.beta_start);
    bytes::put_f64(out, schedule.beta_end);
    bytes::put_f64(out, norm_scale);
    const std::string cfg_json = canonical_unet_config_json(cfg);
    bytes::put_u32(out, static_cast<std::uint32_t>(cfg_json.size()));
    out += cfg_json;
    bytes::put_u32(out, static_cast<std::uint32_t>(params.count()));
    for (std::size_t i = 0; i < params.count(); ++i) {
        const auto& [name, t] = params.tensors[i];
        if (name != table[i].name || t.rank != table[i].rank)
            throw std::invalid_argument("checkpoint: tensor order does not match architecture");
        bytes::put_u16(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(t.rank));
        for (int d = 0; d < t.rank; ++d) bytes::put_u32(out, static_cast<std::uint32_t>(t.dims[d]));
        for (float v : t.v) bytes::put_f32(out, v);
    }
    return out;
}

inline void save_checkpoint(const unet::Params<float>& params, const unet::Config& cfg,
                            const NoiseSchedule& schedule, double norm_scale,
                            const std::string& path) {
    write_file(path, checkpoint_to_bytes(params, cfg, schedule, norm_scale));
}

inline Checkpoint checkpoint_from_bytes(const std::string& buf) {
    bytes::Reader r(buf, "checkpoint");
    if (r.str(4) != "TSDC") throw FormatError("checkpoint: bad magic, expected TSDC");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
    Checkpoint ck;
    const std::uint32_t total_steps = r.u32();
    const double beta_start = r.f64();
    const double beta_end = r.f64();
    ck.norm_scale = r.f64();
    const std::uint32_t json_len = r.u32();
    const std::string cfg_json = r.str(json_len);
    json j;
    try {
        j = json::parse(cfg_json);
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed config block: ") + e.what());
    }
    try {
        ck.config = unet_json::from_json(j, "checkpoint config");
    } catch (const std::exception& e) {
        throw FormatError(std::string("checkpoint: invalid config: ") + e.what());
    }
    // Arrays are recomputed from the stored endpoints and re-validated.
    ck.schedule = linear_beta_schedule(static_cast<int>(total_steps), beta_start, beta_end);
    validate_schedule(ck.schedule);

    const auto table = unet::param_shape_table(ck.config);
    const std::uint32_t n_tensors = r.u32();
    if (n_tensors != table.size())
        throw FormatError("checkpoint: tensor count does not match config shape map");
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const std::uint16_t name_len = r.u16();
        const std::string name = r.str(name_len);
        const int rank = static_cast<int>(r.u8());
        const unet::TensorSpec& spec = table[i];
        if (name != spec.name || rank != spec.rank)
            throw FormatError("checkpoint: shape map mismatch at tensor '" + name + "'");
        std::array<int, 3> dims{1, 1, 1};
        for (int d = 0; d < rank; ++d) dims[static_cast<std::size_t>(d)] = static_cast<int>(r.u32());
        if (dims != spec.dims)
            throw FormatError("checkpoint: shape map mismatch at tensor '" + name + "'");
        Tensor<float> t;
        switch (rank) {
            case 1: t = Tensor<float>::d1(dims[0]); break;
            case 2: t = Tensor<float>::d2(dims[0], dims[1]); break;
            case 3: t = Tensor<float>::d3(dims[0], dims[1], dims[2]); break;
            default: throw FormatError("checkpoint: bad tensor rank");
        }
        for (auto& v : t.v) v = r.f32();
        ck.params.add(name, std::move(t));
    }
    r.expect_end();
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return checkpoint_from_bytes(read_file(path));
}

/// Noise predictor evaluated at the precision the checkpoint's config names.
inline NoisePredictor predictor_from_checkpoint(const Checkpoint& ck) {
    if (ck.config.precision == unet::Precision::Double)
        return unet::make_noise_predictor<double>(ck.params.cast<double>(), ck.config);
    return unet::make_noise_predictor<float>(ck.params, ck.config);
}

namespace detail {

template <typename T>
struct Adam {
    std::vector<Tensor<T>> m, v;
    std::int64_t step = 0;

    explicit Adam(const unet::Params<T>& params) {
        for (const auto& [name, t] : params.tensors) {
            m.push_back(zeros_like(t));
            v.push_back(zeros_like(t));
        }
    }

    void update(unet::Params<T>& params, const unet::Params<T>& grads, double lr) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        ++step;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
        parallel_for(static_cast<std::int64_t>(params.count()),
                     [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
                Tensor<T>& p = params.tensors[static_cast<std::size_t>(i)].second;
                const Tensor<T>& g = grads.tensors[static_cast<std::size_t>(i)].second;
                Tensor<T>& mi = m[static_cast<std::size_t>(i)];
                Tensor<T>& vi = v[static_cast<std::size_t>(i)];
                for (std::size_t j = 0; j < p.size(); ++j) {
                    const double gj = static_cast<double>(g.v[j]);
                    const double mj = b1 * static_cast<double>(mi.v[j]) + (1.0 - b1) * gj;
                    const double vj = b2 * static_cast<double>(vi.v[j]) + (1.0 - b2) * gj * gj;
                    mi.v[j] = static_cast<T>(mj);
                    vi.v[j] = static_cast<T>(vj);
                    p.v[j] = static_cast<T>(static_cast<double>(p.v[j]) -
                                            lr * (mj / c1) / (std::sqrt(vj / c2) + eps));
                }
            }
        });
    }
};

/// Scales gradients so their global L2 norm does not exceed max_norm.
template <typename T>
void clip_global_norm(unet::Params<T>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads.tensors)
        for (const T& v : g.v) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& [name, g] : grads.tensors)
            for (T& v : g.v) v = static_cast<T>(static_cast<double>(v) * s);
    }
}

template <typename T>
TrainResult train_impl(const LabeledDataset& data, const TrainConfig& cfg,
                       const unet::Config& ucfg, const NoiseSchedule& schedule) {
    unet::Params<T> params = unet::init_params<T>(ucfg, substream_seed(cfg.seed, 0));
    Adam<T> adam(params);
    Rng shuffle_rng(substream_seed(cfg.seed, 1));
    Rng t_rng(substream_seed(cfg.seed, 2));
    Rng eps_rng(substream_seed(cfg.seed, 3));

    TrainResult result;
    std::int64_t step = 0;
    std::vector<int> order(static_cast<std::size_t>(data.count));
    for (int i = 0; i < data.count; ++i) order[static_cast<std::size_t>(i)] = i;

    auto save_now = [&](const std::string& path) {
        if constexpr (std::is_same_v<T, float>)
            save_checkpoint(params, ucfg, schedule, *data.norm_scale, path);
        else
            save_checkpoint(params.template cast<float>(), ucfg, schedule, *data.norm_scale, path);
        result.report.final_checkpoint_path = path;
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        // Fisher-Yates so the permutation is pinned by our own generator.
        for (int i = data.count - 1; i > 0; --i) {
            const int j = shuffle_rng.uniform_int(0, i);
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        for (int start = 0; start < data.count; start += cfg.batch_size) {
            const int bsz = std::min(cfg.batch_size, data.count - start);
            SignalBatch x0(bsz, data.length);
            for (int b = 0; b < bsz; ++b) {
                const int src = order[static_cast<std::size_t>(start + b)];
                std::copy_n(data.row(src), data.length, x0.row(b));
            }
            std::vector<int> t(static_cast<std::size_t>(bsz));
            for (int b = 0; b < bsz; ++b) t[static_cast<std::size_t>(b)] = draw_timestep(t_rng, cfg.total_steps);
            SignalBatch eps(bsz, data.length);
            eps_rng.fill_normal(eps.values.data(), eps.values.size());

            unet::LossAndGrads<T> lg;
            try {
                lg = unet::loss_and_gradients<T>(params, ucfg, x0, t, eps, schedule);
            } catch (const std::runtime_error& e) {
                // Non-finite loss: abort, keeping whatever checkpoint was last written.
                throw std::runtime_error(std::string("train: aborted at step ") +
                                         std::to_string(step) + ": " + e.what());
            }
            clip_global_norm(lg.gradients, 1.0);
            adam.update(params, lg.gradients, cfg.learning_rate);
            result.report.loss_history.emplace_back(step, lg.loss);
            ++step;
        }
        const auto t1 = std::chrono::steady_clock::now();
        result.report.epoch_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
            save_now(cfg.checkpoint_path);
    }
    if (cfg.checkpoint_every > 0) save_now(cfg.checkpoint_path);

    if constexpr (std::is_same_v<T, float>)
        result.params = std::move(params);
    else
        result.params = params.template cast<float>();
    return result;
}

}  // namespace detail

/// Random-timestep noise-prediction training of the U-Net on one class of
/// normalized data. Deterministic per seed: same inputs give identical final
/// parameters.
inline TrainResult train(const LabeledDataset& data, const TrainConfig& cfg,
                         const unet::Config& ucfg) {
    cfg.validate();
    ucfg.validate();
    data.check();
    if (data.count == 0) throw std::invalid_argument("train: empty dataset");
    if (!data.norm_scale)
        throw std::invalid_argument("train: dataset must be normalized (norm scale missing)");
    if (data.length != ucfg.length)
        throw std::invalid_argument("train: dataset length does not match model length");
    if (cfg.batch_size > data.count)
        throw std::invalid_argument("train: batch_size exceeds dataset size");
    if (data.labeled())
        for (const std::string& l : data.labels)
            if (l != data.labels.front())
                throw std::invalid_argument("train: expected a single-class dataset");

    const NoiseSchedule schedule = cfg.make_schedule();
    if (ucfg.precision == unet::Precision::Double)
        return detail::train_impl<double>(data, cfg, ucfg, schedule);
    return detail::train_impl<float>(data, cfg, ucfg, schedule);
}

inline std::string loss_history_to_csv(const TrainReport& report) {
    std::string out = "step,loss\n";
    char buf[64];
    for (const auto& [step, loss] : report.loss_history) {
        std::snprintf(buf, sizeof(buf), "%lld,%.9g\n", static_cast<long long>(step), loss);
        out += buf;
    }
    return out;
}

}  // namespace tsdm
