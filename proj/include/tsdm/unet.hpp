#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsdm/autodiff.hpp"
#include "tsdm/diffusion.hpp"
#include "tsdm/params.hpp"
#include "tsdm/rng.hpp"
#include "tsdm/schedule.hpp"
#include "tsdm/signal.hpp"
#include "tsdm/tensor.hpp"

namespace tsdm::unet {

enum class Precision { Single, Double };

/// Architecture hyperparameters of the time-embedded residual U-Net noise
/// predictor. Down stages run res_blocks_down ResBlocks each with a
/// DownSample between stages; the bottleneck runs two ResBlocks (attention on
/// each when attn_middle); up stages run res_blocks_up ResBlocks, each
/// concatenating one saved skip, with attention after the last block of the
/// stages listed in attn_up_stages. res_blocks_up must be res_blocks_down + 1
/// so the skip stack balances.
struct Config {
    int length = 2048;
    int base_channels = 32;
    std::vector<int> channel_multipliers = {1, 2, 4};
    int res_blocks_down = 2;
    int res_blocks_up = 3;
    bool attn_middle = true;
    std::vector<int> attn_up_stages = {0, 1, 2};
    int time_embed_dim = 128;
    int res_kernel_size = 3;
    int down_kernel_size = 4;
    int up_kernel_size = 3;
    int norm_groups = 8;
    Precision precision = Precision::Single;

    int stages() const { return static_cast<int>(channel_multipliers.size()); }
    int stage_channels(int i) const { return base_channels * channel_multipliers[i]; }

    void validate() const {
        if (length <= 0) throw std::invalid_argument("unet config: length must be positive");
        if (base_channels <= 0) throw std::invalid_argument("unet config: base_channels must be positive");
        if (channel_multipliers.empty())
            throw std::invalid_argument("unet config: channel_multipliers must be nonempty");
        for (int m : channel_multipliers)
            if (m <= 0) throw std::invalid_argument("unet config: multipliers must be positive");
        if (length % (1 << stages()) != 0)
            throw std::invalid_argument("unet config: length must be divisible by 2^stages");
        if (res_blocks_down < 1) throw std::invalid_argument("unet config: res_blocks_down must be >= 1");
        if (res_blocks_up != res_blocks_down + 1)
            throw std::invalid_argument(
                "unet config: res_blocks_up must equal res_blocks_down + 1 (skip stack balance)");
        if (time_embed_dim <= 0 || time_embed_dim % 2 != 0)
            throw std::invalid_argument("unet config: time_embed_dim must be positive and even");
        for (int s : attn_up_stages)
            if (s < 0 || s >= stages())
                throw std::invalid_argument("unet config: attn_up_stages index out of range");
        for (std::size_t i = 0; i + 1 < attn_up_stages.size(); ++i)
            for (std::size_t j = i + 1; j < attn_up_stages.size(); ++j)
                if (attn_up_stages[i] == attn_up_stages[j])
                    throw std::invalid_argument("unet config: duplicate attn_up_stages entry");
        if (res_kernel_size < 1 || res_kernel_size % 2 == 0)
            throw std::invalid_argument("unet config: res_kernel_size must be odd");
        if (up_kernel_size < 1 || up_kernel_size % 2 == 0)
            throw std::invalid_argument("unet config: up_kernel_size must be odd");
        if (down_kernel_size < 2 || down_kernel_size % 2 != 0)
            throw std::invalid_argument("unet config: down_kernel_size must be even");
        if (norm_groups < 1) throw std::invalid_argument("unet config: norm_groups must be >= 1");
    }

    bool operator==(const Config&) const = default;
};

template <typename T>
using Params = ParamSet<T>;

enum class InitKind { KaimingConv, KaimingLinear, Ones, Zeros };

struct TensorSpec {
    std::string name;
    int rank = 0;
    std::array<int, 3> dims{1, 1, 1};
    InitKind kind = InitKind::Zeros;
};

namespace detail {

/// Largest divisor of c not exceeding the configured group count.
inline int norm_groups_for(const Config& cfg, int c) {
    for (int g = std::min(cfg.norm_groups, c); g > 1; --g)
        if (c % g == 0) return g;
    return 1;
}

inline bool stage_has_up_attn(const Config& cfg, int stage) {
    return std::find(cfg.attn_up_stages.begin(), cfg.attn_up_stages.end(), stage) !=
           cfg.attn_up_stages.end();
}

template <typename Fn>
void emit_resblock(const Config& cfg, const std::string& prefix, int cin, int cout, Fn&& emit) {
    const int rk = cfg.res_kernel_size;
    emit(TensorSpec{prefix + ".norm1.g", 1, {cin, 1, 1}, InitKind::Ones});
    emit(TensorSpec{prefix + ".norm1.b", 1, {cin, 1, 1}, InitKind::Zeros});
    emit(TensorSpec{prefix + ".conv1.w", 3, {cout, cin, rk}, InitKind::KaimingConv});
    emit(TensorSpec{prefix + ".conv1.b", 1, {cout, 1, 1}, InitKind::Zeros});
    emit(TensorSpec{prefix + ".temb.w", 2, {cout, cfg.time_embed_dim, 1}, InitKind::KaimingLinear});
    emit(TensorSpec{prefix + ".temb.b", 1, {cout, 1, 1}, InitKind::Zeros});
    emit(TensorSpec{prefix + ".norm2.g", 1, {cout, 1, 1}, InitKind::Ones});
    emit(TensorSpec{prefix + ".norm2.b", 1, {cout, 1, 1}, InitKind::Zeros});
    emit(TensorSpec{prefix + ".conv2.w", 3, {cout, cout, rk}, InitKind::KaimingConv});
    emit(TensorSpec{prefix + ".conv2.b", 1, {cout, 1, 1}, InitKind::Zeros});
    if (cin != cout) {
        emit(TensorSpec{prefix + ".skip.w", 3, {cout, cin, 1}, InitKind::KaimingConv});
        emit(TensorSpec{prefix + ".skip.b", 1, {cout, 1, 1}, InitKind::Zeros});
    }
}

template <typename Fn>
void emit_attnblock(const std::string& prefix, int c, Fn&& emit) {
    emit(TensorSpec{prefix + ".norm.g", 1, {c, 1, 1}, InitKind::Ones});
    emit(TensorSpec{prefix + ".norm.b", 1, {c, 1, 1}, InitKind::Zeros});
    for (const char* p : {"q", "k", "v", "proj"}) {
        emit(TensorSpec{prefix + "." + p + ".w", 3, {c, c, 1}, InitKind::KaimingConv});
        emit(TensorSpec{prefix + "." + p + ".b", 1, {c, 1, 1}, InitKind::Zeros});
    }
}

}  // namespace detail

/// Walks every parameter tensor of the architecture in a fixed order; the
/// name -> shape map is a pure function of the config.
template <typename Fn>
void for_each_tensor(const Config& cfg, Fn&& emit) {
    cfg.validate();
    const int D = cfg.time_embed_dim;
    const int S = cfg.stages();
    const int rk = cfg.res_kernel_size;

    emit(TensorSpec{"temb.lin1.w", 2, {D, D, 1}, InitKind::KaimingLinear});
    emit(TensorSpec{"temb.lin1.b", 1, {D, 1, 1}, InitKind::Zeros});
    emit(TensorSpec{"temb.lin2.w", 2, {D, D, 1}, InitKind::KaimingLinear});
    emit(TensorSpec{"temb.lin2.b", 1, {D, 1, 1}, InitKind::Zeros});

    emit(TensorSpec{"conv_in.w", 3, {cfg.base_channels, 1, rk}, InitKind::KaimingConv});
    emit(TensorSpec{"conv_in.b", 1, {cfg.base_channels, 1, 1}, InitKind::Zeros});

    int cur = cfg.base_channels;
    std::vector<int> skips{cur};
    for (int i = 0; i < S; ++i) {
        const std::string stage = "down" + std::to_string(i);
        for (int r = 0; r < cfg.res_blocks_down; ++r) {
            detail::emit_resblock(cfg, stage + ".res" + std::to_string(r), cur,
                                  cfg.stage_channels(i), emit);
            cur = cfg.stage_channels(i);
            skips.push_back(cur);
        }
        if (i < S - 1) {
            emit(TensorSpec{stage + ".down.w", 3, {cur, cur, cfg.down_kernel_size}, InitKind::KaimingConv});
            emit(TensorSpec{stage + ".down.b", 1, {cur, 1, 1}, InitKind::Zeros});
            skips.push_back(cur);
        }
    }

    detail::emit_resblock(cfg, "mid.res0", cur, cur, emit);
    if (cfg.attn_middle) detail::emit_attnblock("mid.attn0", cur, emit);
    detail::emit_resblock(cfg, "mid.res1", cur, cur, emit);
    if (cfg.attn_middle) detail::emit_attnblock("mid.attn1", cur, emit);

    for (int i = S - 1; i >= 0; --i) {
        const std::string stage = "up" + std::to_string(i);
        for (int r = 0; r < cfg.res_blocks_up; ++r) {
            const int sc = skips.back();
            skips.pop_back();
            detail::emit_resblock(cfg, stage + ".res" + std::to_string(r), cur + sc,
                                  cfg.stage_channels(i), emit);
            cur = cfg.stage_channels(i);
        }
        if (detail::stage_has_up_attn(cfg, i)) detail::emit_attnblock(stage + ".attn", cur, emit);
        if (i > 0) {
            emit(TensorSpec{stage + ".up.w", 3, {cur, cur, cfg.up_kernel_size}, InitKind::KaimingConv});
            emit(TensorSpec{stage + ".up.b", 1, {cur, 1, 1}, InitKind::Zeros});
        }
    }

    emit(TensorSpec{"out.norm.g", 1, {cfg.base_channels, 1, 1}, InitKind::Ones});
    emit(TensorSpec{"out.norm.b", 1, {cfg.base_channels, 1, 1}, InitKind::Zeros});
    // Zero-initialized so the untrained model predicts zero noise.
    emit(TensorSpec{"out.conv.w", 3, {1, cfg.base_channels, rk}, InitKind::Zeros});
    emit(TensorSpec{"out.conv.b", 1, {1, 1, 1}, InitKind::Zeros});
}

inline std::vector<TensorSpec> param_shape_table(const Config& cfg) {
    std::vector<TensorSpec> out;
    for_each_tensor(cfg, [&](const TensorSpec& s) { out.push_back(s); });
    return out;
}

inline std::size_t param_count(const Config& cfg) {
    std::size_t n = 0;
    for_each_tensor(cfg, [&](const TensorSpec& s) {
        n += static_cast<std::size_t>(s.dims[0]) *
             (s.rank > 1 ? s.dims[1] : 1) * (s.rank > 2 ? s.dims[2] : 1);
    });
    return n;
}

/// Kaiming fan-in normal init for convolutions and projections, ones/zeros
/// for normalization scale/offset, zero output convolution.
template <typename T>
Params<T> init_params(const Config& cfg, std::uint64_t seed) {
    Params<T> params;
    Rng rng(seed);
    for_each_tensor(cfg, [&](const TensorSpec& s) {
        Tensor<T> t;
        switch (s.rank) {
            case 1: t = Tensor<T>::d1(s.dims[0]); break;
            case 2: t = Tensor<T>::d2(s.dims[0], s.dims[1]); break;
            default: t = Tensor<T>::d3(s.dims[0], s.dims[1], s.dims[2]); break;
        }
        switch (s.kind) {
            case InitKind::KaimingConv: {
                const double fan_in = static_cast<double>(s.dims[1]) * s.dims[2];
                const double std = std::sqrt(2.0 / fan_in);
                for (auto& v : t.v) v = static_cast<T>(rng.normal() * std);
                break;
            }
            case InitKind::KaimingLinear: {
                const double std = std::sqrt(2.0 / static_cast<double>(s.dims[1]));
                for (auto& v : t.v) v = static_cast<T>(rng.normal() * std);
                break;
            }
            case InitKind::Ones: t.fill(T(1)); break;
            case InitKind::Zeros: break;
        }
        params.add(s.name, std::move(t));
    });
    return params;
}

/// Raw sinusoidal step embedding: component 2i = sin(t / 10000^(2i/dim)),
/// component 2i+1 = cos of the same argument.
inline std::vector<double> time_embedding(int t, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("time_embedding: dim must be even");
    if (t < 0) throw std::invalid_argument("time_embedding: t must be nonnegative");
    std::vector<double> e(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim / 2; ++i) {
        const double freq = std::exp(-std::log(10000.0) * (2.0 * i) / dim);
        e[2 * i] = std::sin(t * freq);
        e[2 * i + 1] = std::cos(t * freq);
    }
    return e;
}

namespace detail {

template <typename T>
struct GraphRefs {
    ad::Tape<T>& tape;
    const Config& cfg;
    std::vector<std::pair<std::string, typename ad::Tape<T>::Ref>> leaves;

    typename ad::Tape<T>::Ref p(const std::string& name) {
        for (auto& [n, r] : leaves)
            if (n == name) return r;
        throw std::logic_error("unet graph: missing parameter " + name);
    }
};

template <typename T>
typename ad::Tape<T>::Ref resblock(GraphRefs<T>& g, typename ad::Tape<T>::Ref h,
                                   typename ad::Tape<T>::Ref temb_act, const std::string& prefix,
                                   int cin, int cout) {
    auto& tape = g.tape;
    const int rk = g.cfg.res_kernel_size;
    auto a = tape.group_norm(h, g.p(prefix + ".norm1.g"), g.p(prefix + ".norm1.b"),
                             norm_groups_for(g.cfg, cin), prefix + ".norm1");
    a = tape.silu(a);
    a = tape.conv1d(a, g.p(prefix + ".conv1.w"), g.p(prefix + ".conv1.b"), 1, rk / 2,
                    prefix + ".conv1");
    auto tb = tape.linear(temb_act, g.p(prefix + ".temb.w"), g.p(prefix + ".temb.b"),
                          prefix + ".temb");
    a = tape.add_channel_bias(a, tb);
    a = tape.group_norm(a, g.p(prefix + ".norm2.g"), g.p(prefix + ".norm2.b"),
                        norm_groups_for(g.cfg, cout), prefix + ".norm2");
    a = tape.silu(a);
    a = tape.conv1d(a, g.p(prefix + ".conv2.w"), g.p(prefix + ".conv2.b"), 1, rk / 2,
                    prefix + ".conv2");
    auto r = h;
    if (cin != cout)
        r = tape.conv1d(h, g.p(prefix + ".skip.w"), g.p(prefix + ".skip.b"), 1, 0,
                        prefix + ".skip");
    return tape.add(a, r);
}

template <typename T>
typename ad::Tape<T>::Ref attnblock(GraphRefs<T>& g, typename ad::Tape<T>::Ref h,
                                    const std::string& prefix, int c) {
    auto& tape = g.tape;
    auto n = tape.group_norm(h, g.p(prefix + ".norm.g"), g.p(prefix + ".norm.b"),
                             norm_groups_for(g.cfg, c), prefix + ".norm");
    auto q = tape.conv1d(n, g.p(prefix + ".q.w"), g.p(prefix + ".q.b"), 1, 0, prefix + ".q");
    auto k = tape.conv1d(n, g.p(prefix + ".k.w"), g.p(prefix + ".k.b"), 1, 0, prefix + ".k");
    auto v = tape.conv1d(n, g.p(prefix + ".v.w"), g.p(prefix + ".v.b"), 1, 0, prefix + ".v");
    auto a = tape.attention(q, k, v);
    auto p = tape.conv1d(a, g.p(prefix + ".proj.w"), g.p(prefix + ".proj.b"), 1, 0,
                         prefix + ".proj");
    return tape.add(h, p);
}

/// Builds the full noise-prediction graph. x is (B, 1, L); returns (B, 1, L).
template <typename T>
typename ad::Tape<T>::Ref build_graph(GraphRefs<T>& g, typename ad::Tape<T>::Ref x,
                                      const std::vector<int>& t) {
    auto& tape = g.tape;
    const Config& cfg = g.cfg;
    const int B = x->val.dims[0];
    const int D = cfg.time_embed_dim;
    const int S = cfg.stages();

    Tensor<T> sinusoid = Tensor<T>::d2(B, D);
    for (int bi = 0; bi < B; ++bi) {
        const std::vector<double> e = time_embedding(t[static_cast<std::size_t>(bi)], D);
        for (int i = 0; i < D; ++i) sinusoid(bi, i) = static_cast<T>(e[static_cast<std::size_t>(i)]);
    }
    auto temb = tape.leaf(std::move(sinusoid), false, "temb.sinusoid");
    temb = tape.linear(temb, g.p("temb.lin1.w"), g.p("temb.lin1.b"), "temb.lin1");
    temb = tape.silu(temb);
    temb = tape.linear(temb, g.p("temb.lin2.w"), g.p("temb.lin2.b"), "temb.lin2");
    auto temb_act = tape.silu(temb);  // shared activation fed to every ResBlock projection

    auto h = tape.conv1d(x, g.p("conv_in.w"), g.p("conv_in.b"), 1, cfg.res_kernel_size / 2,
                         "conv_in");
    int cur = cfg.base_channels;
    std::vector<std::pair<typename ad::Tape<T>::Ref, int>> skips{{h, cur}};

    for (int i = 0; i < S; ++i) {
        const std::string stage = "down" + std::to_string(i);
        for (int r = 0; r < cfg.res_blocks_down; ++r) {
            h = resblock(g, h, temb_act, stage + ".res" + std::to_string(r), cur,
                         cfg.stage_channels(i));
            cur = cfg.stage_channels(i);
            skips.emplace_back(h, cur);
        }
        if (i < S - 1) {
            h = tape.conv1d(h, g.p(stage + ".down.w"), g.p(stage + ".down.b"), 2,
                            (cfg.down_kernel_size - 2) / 2, stage + ".down");
            skips.emplace_back(h, cur);
        }
    }

    h = resblock(g, h, temb_act, "mid.res0", cur, cur);
    if (cfg.attn_middle) h = attnblock(g, h, "mid.attn0", cur);
    h = resblock(g, h, temb_act, "mid.res1", cur, cur);
    if (cfg.attn_middle) h = attnblock(g, h, "mid.attn1", cur);

    for (int i = S - 1; i >= 0; --i) {
        const std::string stage = "up" + std::to_string(i);
        for (int r = 0; r < cfg.res_blocks_up; ++r) {
            auto [skip, sc] = skips.back();
            skips.pop_back();
            h = resblock(g, tape.concat_channels(h, skip), temb_act,
                         stage + ".res" + std::to_string(r), cur + sc, cfg.stage_channels(i));
            cur = cfg.stage_channels(i);
        }
        if (stage_has_up_attn(cfg, i)) h = attnblock(g, h, stage + ".attn", cur);
        if (i > 0) {
            h = tape.upsample_nearest2(h);
            h = tape.conv1d(h, g.p(stage + ".up.w"), g.p(stage + ".up.b"), 1,
                            cfg.up_kernel_size / 2, stage + ".up");
        }
    }

    h = tape.group_norm(h, g.p("out.norm.g"), g.p("out.norm.b"),
                        norm_groups_for(cfg, cfg.base_channels), "out.norm");
    h = tape.silu(h);
    h = tape.conv1d(h, g.p("out.conv.w"), g.p("out.conv.b"), 1, cfg.res_kernel_size / 2,
                    "out.conv");
    return h;
}

template <typename T>
GraphRefs<T> make_refs(ad::Tape<T>& tape, const Config& cfg, const Params<T>& params,
                       bool needs_grad) {
    if (params.count() != param_shape_table(cfg).size())
        throw std::invalid_argument("unet: parameter count does not match config");
    GraphRefs<T> g{tape, cfg, {}};
    g.leaves.reserve(params.count());
    for (const auto& [name, t] : params.tensors)
        g.leaves.emplace_back(name, tape.leaf(t, needs_grad, name));
    return g;
}

template <typename T>
Tensor<T> batch_to_tensor(const SignalBatch& x) {
    Tensor<T> t = Tensor<T>::d3(x.count, 1, x.length);
    for (std::size_t i = 0; i < x.values.size(); ++i) t.v[i] = static_cast<T>(x.values[i]);
    return t;
}

template <typename T>
SignalBatch tensor_to_batch(const Tensor<T>& t) {
    SignalBatch out(t.dims[0], t.dims[2]);
    for (std::size_t i = 0; i < t.size(); ++i) out.values[i] = static_cast<double>(t.v[i]);
    return out;
}

// Items never interact inside the network (normalization is per item), so
// batches are evaluated as fixed pairs of items on independent tapes, one
// pair per pool chunk. The pair size is a constant: results do not depend on
// the thread count.
constexpr int kItemChunk = 2;

inline int chunk_count(int batch) { return (batch + kItemChunk - 1) / kItemChunk; }

inline SignalBatch slice_batch(const SignalBatch& b, int from, int to) {
    SignalBatch out(to - from, b.length);
    std::copy(b.row(from), b.row(from) + static_cast<std::size_t>(to - from) * b.length,
              out.values.data());
    return out;
}

}  // namespace detail

/// Predicted noise for a batch of noised series; pure in all inputs.
template <typename T>
SignalBatch forward(const Params<T>& params, const Config& cfg, const SignalBatch& x_t,
                    const std::vector<int>& t) {
    cfg.validate();
    if (x_t.length != cfg.length)
        throw std::invalid_argument("unet forward: input length does not match config");
    if (static_cast<int>(t.size()) != x_t.count)
        throw std::invalid_argument("unet forward: need one step index per item");
    if (x_t.count == 0) return SignalBatch(0, cfg.length);

    const int chunks = detail::chunk_count(x_t.count);
    SignalBatch out(x_t.count, cfg.length);
    std::vector<std::string> errors(static_cast<std::size_t>(chunks));
    parallel_for(chunks, [&](std::int64_t lo, std::int64_t hi) {
        for (int c = static_cast<int>(lo); c < hi; ++c) {
            try {
                const int from = c * detail::kItemChunk;
                const int to = std::min(x_t.count, from + detail::kItemChunk);
                ad::Tape<T> tape(false);
                auto g = detail::make_refs(tape, cfg, params, false);
                auto x = tape.leaf(detail::batch_to_tensor<T>(detail::slice_batch(x_t, from, to)),
                                   false, "x_t");
                const std::vector<int> tc(t.begin() + from, t.begin() + to);
                auto y = detail::build_graph(g, x, tc);
                std::copy(y->val.v.begin(), y->val.v.end(), out.row(from));
            } catch (const std::exception& e) {
                errors[static_cast<std::size_t>(c)] = e.what();
            }
        }
    });
    for (const std::string& e : errors)
        if (!e.empty()) throw std::runtime_error("unet forward: " + e);
    return out;
}

template <typename T>
struct LossAndGrads {
    double loss = 0.0;
    Params<T> gradients;
};

namespace detail {

template <typename T>
double loss_impl(const Params<T>& params, const Config& cfg, const SignalBatch& x0,
                 const std::vector<int>& t, const SignalBatch& eps, const NoiseSchedule& schedule,
                 bool with_grads, Params<T>* grads_out) {
    cfg.validate();
    if (x0.length != cfg.length)
        throw std::invalid_argument("unet loss: input length does not match config");
    require_same_shape(x0, eps, "unet loss");
    if (x0.count == 0) throw std::invalid_argument("unet loss: empty batch");
    if (!x0.all_finite() || !eps.all_finite())
        throw std::invalid_argument("unet loss: non-finite input");

    const SignalBatch x_t = q_sample(x0, t, eps, schedule);
    const int B = x0.count;
    const int chunks = chunk_count(B);

    // Sum of squared errors and scaled gradients per pair, reduced in fixed
    // chunk order afterwards.
    std::vector<double> chunk_sse(static_cast<std::size_t>(chunks), 0.0);
    std::vector<Params<T>> chunk_grads(static_cast<std::size_t>(with_grads ? chunks : 0));
    std::vector<std::string> errors(static_cast<std::size_t>(chunks));

    parallel_for(chunks, [&](std::int64_t lo, std::int64_t hi) {
        for (int c = static_cast<int>(lo); c < hi; ++c) {
            try {
                const int from = c * kItemChunk;
                const int to = std::min(B, from + kItemChunk);
                const int bc = to - from;
                ad::Tape<T> tape(with_grads);
                auto g = make_refs(tape, cfg, params, true);
                auto x = tape.leaf(batch_to_tensor<T>(slice_batch(x_t, from, to)), false, "x_t");
                const std::vector<int> tc(t.begin() + from, t.begin() + to);
                auto y = build_graph(g, x, tc);
                auto loss = tape.mse_against(y, batch_to_tensor<T>(slice_batch(eps, from, to)));

                const double mean_c = static_cast<double>(loss->val(0));
                if (!std::isfinite(mean_c)) {
                    for (const auto& node : tape.nodes())
                        if (!node->val.all_finite())
                            throw std::runtime_error(
                                "non-finite values, first offending tensor: " +
                                (node->label.empty() ? std::string("<unnamed>") : node->label));
                    throw std::runtime_error("non-finite loss");
                }
                chunk_sse[static_cast<std::size_t>(c)] =
                    mean_c * static_cast<double>(bc) * cfg.length;

                if (with_grads) {
                    tape.backward(loss);
                    Params<T> grads;
                    for (auto& [name, ref] : g.leaves) grads.add(name, tape.grad_of(ref));
                    chunk_grads[static_cast<std::size_t>(c)] = std::move(grads);
                }
            } catch (const std::exception& e) {
                errors[static_cast<std::size_t>(c)] = e.what();
            }
        }
    });
    for (const std::string& e : errors)
        if (!e.empty()) throw std::runtime_error("unet loss: " + e);

    double sse = 0.0;
    for (double s : chunk_sse) sse += s;
    const double loss_v = sse / (static_cast<double>(B) * cfg.length);

    if (with_grads) {
        // d(total mean)/dp = sum over pairs of (pair items / B) * d(pair mean)/dp;
        // one thread owns a whole tensor, pairs accumulated in fixed order.
        Params<T> grads;
        for (const auto& [name, tensor] : params.tensors) grads.add(name, zeros_like(tensor));
        parallel_for(static_cast<std::int64_t>(grads.count()),
                     [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
                Tensor<T>& out = grads.tensors[static_cast<std::size_t>(i)].second;
                for (int c = 0; c < chunks; ++c) {
                    const int from = c * kItemChunk;
                    const int bc = std::min(B, from + kItemChunk) - from;
                    const T w = static_cast<T>(static_cast<double>(bc) / B);
                    const Tensor<T>& gc =
                        chunk_grads[static_cast<std::size_t>(c)].tensors[static_cast<std::size_t>(i)].second;
                    for (std::size_t j = 0; j < out.size(); ++j) out.v[j] += w * gc.v[j];
                }
            }
        });
        *grads_out = std::move(grads);
    }
    return loss_v;
}

}  // namespace detail

/// Training loss only (no gradient work); used by finite-difference checks.
template <typename T>
double training_loss(const Params<T>& params, const Config& cfg, const SignalBatch& x0,
                     const std::vector<int>& t, const SignalBatch& eps,
                     const NoiseSchedule& schedule) {
    return detail::loss_impl<T>(params, cfg, x0, t, eps, schedule, false, nullptr);
}

/// Simplified objective on a batch plus exact reverse-mode gradients for
/// every parameter tensor.
template <typename T>
LossAndGrads<T> loss_and_gradients(const Params<T>& params, const Config& cfg,
                                   const SignalBatch& x0, const std::vector<int>& t,
                                   const SignalBatch& eps, const NoiseSchedule& schedule) {
    LossAndGrads<T> out;
    out.loss = detail::loss_impl<T>(params, cfg, x0, t, eps, schedule, true, &out.gradients);
    return out;
}

/// Wraps parameters into a NoisePredictor for the sampling loop.
template <typename T>
NoisePredictor make_noise_predictor(Params<T> params, Config cfg) {
    cfg.validate();
    return [params = std::move(params), cfg = std::move(cfg)](
               const SignalBatch& x_t, const std::vector<int>& t) {
        return forward<T>(params, cfg, x_t, t);
    };
}

}  // namespace tsdm::unet
