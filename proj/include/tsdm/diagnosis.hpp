#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tsdm/autodiff.hpp"
#include "tsdm/config_json.hpp"
#include "tsdm/data.hpp"
#include "tsdm/diffusion.hpp"
#include "tsdm/params.hpp"
#include "tsdm/rng.hpp"
#include "tsdm/trainer.hpp"

namespace tsdm::diag {

/// Per-class expansion plan: which checkpoint generates how many series for
/// each fault class.
struct AugmentPlanEntry {
    std::string label;
    std::string checkpoint;
    int generated_count = 0;
    int small_count = 0;  // informational; the original small-sample size
};

struct AugmentPlan {
    std::vector<AugmentPlanEntry> classes;

    void validate() const {
        if (classes.empty()) throw std::invalid_argument("augment plan: no classes");
        std::set<std::string> seen;
        for (const auto& e : classes) {
            if (e.label.empty()) throw std::invalid_argument("augment plan: empty class label");
            if (!seen.insert(e.label).second)
                throw std::invalid_argument("augment plan: duplicate class '" + e.label + "'");
            if (e.generated_count <= 0)
                throw std::invalid_argument("augment plan: class '" + e.label +
                                            "' has nonpositive generated count");
            if (e.checkpoint.empty())
                throw std::invalid_argument("augment plan: class '" + e.label + "' has no checkpoint");
        }
    }
};

/// Plan file: JSON object mapping class label -> {"checkpoint": path,
/// "count": n, optional "small_count": n}.
inline AugmentPlan augment_plan_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("augment plan: expected a JSON object");
    AugmentPlan plan;
    for (const auto& [label, entry] : j.items()) {
        reject_unknown_keys(entry, {"checkpoint", "count", "small_count"},
                            "augment plan class '" + label + "'");
        AugmentPlanEntry e;
        e.label = label;
        if (!entry.contains("checkpoint") || !entry.contains("count"))
            throw std::invalid_argument("augment plan class '" + label +
                                        "': needs 'checkpoint' and 'count'");
        e.checkpoint = entry.at("checkpoint").get<std::string>();
        e.generated_count = entry.at("count").get<int>();
        e.small_count = entry.value("small_count", 0);
        plan.classes.push_back(std::move(e));
    }
    plan.validate();
    return plan;
}

inline json augment_plan_to_json(const AugmentPlan& plan) {
    json j = json::object();
    for (const auto& e : plan.classes) {
        json entry{{"checkpoint", e.checkpoint}, {"count", e.generated_count}};
        if (e.small_count > 0) entry["small_count"] = e.small_count;
        j[e.label] = std::move(entry);
    }
    return j;
}

/// Builds the diffusion training set: for each class, samples the planned
/// number of series from its checkpointed model, denormalizes with the stored
/// scale, labels and concatenates them.
inline LabeledDataset expand_small_sample(const AugmentPlan& plan, std::uint64_t seed) {
    plan.validate();
    std::vector<Checkpoint> checkpoints;
    checkpoints.reserve(plan.classes.size());
    for (const auto& e : plan.classes) {
        checkpoints.push_back(load_checkpoint(e.checkpoint));
        if (checkpoints.back().config.length != checkpoints.front().config.length)
            throw std::invalid_argument("expand_small_sample: class '" + e.label +
                                        "' model length differs from the first class");
    }
    const int length = checkpoints.front().config.length;
    int total = 0;
    for (const auto& e : plan.classes) total += e.generated_count;

    LabeledDataset out(total, length);
    out.labels.reserve(static_cast<std::size_t>(total));
    int row = 0;
    for (std::size_t c = 0; c < plan.classes.size(); ++c) {
        const auto& e = plan.classes[c];
        const Checkpoint& ck = checkpoints[c];
        const NoisePredictor predictor = predictor_from_checkpoint(ck);
        auto [generated, trace] = sample(predictor, ck.schedule, e.generated_count, length,
                                         substream_seed(seed, c));
        for (int n = 0; n < generated.count; ++n) {
            const double* src = generated.row(n);
            double* dst = out.row(row + n);
            for (int i = 0; i < length; ++i) dst[i] = src[i] * ck.norm_scale;
        }
        for (int n = 0; n < e.generated_count; ++n) out.labels.push_back(e.label);
        row += e.generated_count;
    }
    out.check();
    return out;
}

// ---- baseline 1D CNN classifier ----

/// Convolution stack spec for the baseline classifier: filters per layer with
/// a shared kernel/stride, global average pooling, optional dense hidden
/// layer, then a softmax head.
struct CnnConfig {
    std::vector<int> filters = {16, 32, 64};
    int kernel = 9;
    int stride = 2;
    std::string pooling = "gap";
    int dense_width = 0;  // 0: logits straight from pooled features
    double learning_rate = 1e-3;
    int epochs = 100;
    int batch_size = 10;
    std::uint64_t seed = 0;

    void validate() const {
        if (filters.empty()) throw std::invalid_argument("cnn config: need at least one conv layer");
        for (int f : filters)
            if (f < 1) throw std::invalid_argument("cnn config: filter counts must be >= 1");
        if (kernel < 1) throw std::invalid_argument("cnn config: kernel must be >= 1");
        if (stride < 1) throw std::invalid_argument("cnn config: stride must be >= 1");
        if (pooling != "gap") throw std::invalid_argument("cnn config: only 'gap' pooling is supported");
        if (dense_width < 0) throw std::invalid_argument("cnn config: dense_width must be >= 0");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("cnn config: learning_rate must be positive");
        if (epochs < 0) throw std::invalid_argument("cnn config: epochs must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("cnn config: batch_size must be >= 1");
    }
};

struct Classifier {
    CnnConfig config;
    std::vector<std::string> class_names;  // sorted; index = logit position
    int length = 0;
    ParamSet<float> params;
};

struct EpochStat {
    double loss = 0.0;
    double accuracy = 0.0;
};

namespace detail {

inline std::vector<std::string> sorted_class_names(const LabeledDataset& d) {
    if (!d.labeled()) throw std::invalid_argument("classifier: dataset has no labels");
    std::set<std::string> s(d.labels.begin(), d.labels.end());
    return {s.begin(), s.end()};
}

inline std::vector<int> label_indices(const LabeledDataset& d,
                                      const std::vector<std::string>& names) {
    std::map<std::string, int> idx;
    for (std::size_t i = 0; i < names.size(); ++i) idx[names[i]] = static_cast<int>(i);
    std::vector<int> out(static_cast<std::size_t>(d.count));
    for (int n = 0; n < d.count; ++n) {
        auto it = idx.find(d.labels[static_cast<std::size_t>(n)]);
        if (it == idx.end())
            throw std::invalid_argument("classifier: unknown label '" +
                                        d.labels[static_cast<std::size_t>(n)] + "'");
        out[static_cast<std::size_t>(n)] = it->second;
    }
    return out;
}

template <typename Fn>
void cnn_for_each_tensor(const CnnConfig& cfg, int length, int classes, Fn&& emit) {
    int cin = 1;
    int len = length;
    for (std::size_t l = 0; l < cfg.filters.size(); ++l) {
        const int cout = cfg.filters[l];
        emit("conv" + std::to_string(l) + ".w", Tensor<float>::d3(cout, cin, cfg.kernel));
        emit("conv" + std::to_string(l) + ".b", Tensor<float>::d1(cout));
        len = (len + 2 * (cfg.kernel / 2) - cfg.kernel) / cfg.stride + 1;
        if (len < 1) throw std::invalid_argument("cnn config: conv stack shrinks input away");
        cin = cout;
    }
    if (cfg.dense_width > 0) {
        emit("dense.w", Tensor<float>::d2(cfg.dense_width, cin));
        emit("dense.b", Tensor<float>::d1(cfg.dense_width));
        cin = cfg.dense_width;
    }
    emit("head.w", Tensor<float>::d2(classes, cin));
    emit("head.b", Tensor<float>::d1(classes));
}

/// Builds logits for a batch; used for both training (with grads) and
/// inference.
inline ad::Tape<float>::Ref cnn_logits(ad::Tape<float>& tape,
                                       std::vector<std::pair<std::string, ad::Tape<float>::Ref>>& leaves,
                                       const CnnConfig& cfg, ad::Tape<float>::Ref x) {
    auto p = [&](const std::string& name) -> ad::Tape<float>::Ref {
        for (auto& [n, r] : leaves)
            if (n == name) return r;
        throw std::logic_error("cnn: missing parameter " + name);
    };
    auto h = x;
    for (std::size_t l = 0; l < cfg.filters.size(); ++l) {
        const std::string pre = "conv" + std::to_string(l);
        h = tape.conv1d(h, p(pre + ".w"), p(pre + ".b"), cfg.stride, cfg.kernel / 2, pre);
        h = tape.relu(h);
    }
    auto pooled = tape.mean_pool_length(h);
    if (cfg.dense_width > 0) pooled = tape.relu(tape.linear(pooled, p("dense.w"), p("dense.b"), "dense"));
    return tape.linear(pooled, p("head.w"), p("head.b"), "head");
}

inline Tensor<float> rows_to_tensor(const LabeledDataset& d, const std::vector<int>& rows) {
    Tensor<float> t = Tensor<float>::d3(static_cast<int>(rows.size()), 1, d.length);
    for (std::size_t b = 0; b < rows.size(); ++b) {
        const double* src = d.row(rows[b]);
        for (int i = 0; i < d.length; ++i) t(static_cast<int>(b), 0, i) = static_cast<float>(src[i]);
    }
    return t;
}

inline std::vector<int> predict_rows(const Classifier& cls, const LabeledDataset& d,
                                     const std::vector<int>& rows) {
    ad::Tape<float> tape(false);
    std::vector<std::pair<std::string, ad::Tape<float>::Ref>> leaves;
    for (const auto& [name, t] : cls.params.tensors) leaves.emplace_back(name, tape.leaf(t, false, name));
    auto x = tape.leaf(rows_to_tensor(d, rows), false, "x");
    auto logits = cnn_logits(tape, leaves, cls.config, x);
    std::vector<int> pred(rows.size());
    const int K = logits->val.dims[1];
    for (std::size_t b = 0; b < rows.size(); ++b) {
        int best = 0;
        for (int c = 1; c < K; ++c)
            if (logits->val(static_cast<int>(b), c) > logits->val(static_cast<int>(b), best)) best = c;
        pred[b] = best;
    }
    return pred;
}

}  // namespace detail

/// Cross-entropy training of the baseline CNN; deterministic per seed.
inline std::pair<Classifier, std::vector<EpochStat>> train_classifier(const LabeledDataset& train_set,
                                                                      const CnnConfig& cfg) {
    cfg.validate();
    train_set.check();
    if (train_set.count == 0) throw std::invalid_argument("train_classifier: empty dataset");
    Classifier cls;
    cls.config = cfg;
    cls.class_names = detail::sorted_class_names(train_set);
    cls.length = train_set.length;
    if (cls.class_names.size() < 2)
        throw std::invalid_argument("train_classifier: need at least two classes");
    const int K = static_cast<int>(cls.class_names.size());
    const std::vector<int> labels = detail::label_indices(train_set, cls.class_names);

    Rng init_rng(substream_seed(cfg.seed, 0));
    detail::cnn_for_each_tensor(cfg, train_set.length, K, [&](const std::string& name, Tensor<float> t) {
        if (name.ends_with(".w")) {
            const double fan_in = t.rank == 3 ? static_cast<double>(t.dims[1]) * t.dims[2]
                                              : static_cast<double>(t.dims[1]);
            const double std = std::sqrt(2.0 / fan_in);
            for (auto& v : t.v) v = static_cast<float>(init_rng.normal() * std);
        }
        cls.params.add(name, std::move(t));
    });

    tsdm::detail::Adam<float> adam(cls.params);
    Rng shuffle_rng(substream_seed(cfg.seed, 1));
    std::vector<EpochStat> history;
    std::vector<int> order(static_cast<std::size_t>(train_set.count));
    for (int i = 0; i < train_set.count; ++i) order[static_cast<std::size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = train_set.count - 1; i > 0; --i) {
            const int j = shuffle_rng.uniform_int(0, i);
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        double loss_sum = 0.0;
        int correct = 0;
        int batches = 0;
        for (int start = 0; start < train_set.count; start += cfg.batch_size) {
            const int bsz = std::min(cfg.batch_size, train_set.count - start);
            std::vector<int> rows(order.begin() + start, order.begin() + start + bsz);
            std::vector<int> batch_labels(static_cast<std::size_t>(bsz));
            for (int b = 0; b < bsz; ++b)
                batch_labels[static_cast<std::size_t>(b)] = labels[static_cast<std::size_t>(rows[static_cast<std::size_t>(b)])];

            ad::Tape<float> tape(true);
            std::vector<std::pair<std::string, ad::Tape<float>::Ref>> leaves;
            for (const auto& [name, t] : cls.params.tensors)
                leaves.emplace_back(name, tape.leaf(t, true, name));
            auto x = tape.leaf(detail::rows_to_tensor(train_set, rows), false, "x");
            auto logits = detail::cnn_logits(tape, leaves, cfg, x);
            auto loss = tape.softmax_cross_entropy(logits, batch_labels);
            if (!std::isfinite(static_cast<double>(loss->val(0))))
                throw std::runtime_error("train_classifier: non-finite loss");
            tape.backward(loss);

            for (int b = 0; b < bsz; ++b) {
                int best = 0;
                for (int c = 1; c < K; ++c)
                    if (logits->val(b, c) > logits->val(b, best)) best = c;
                if (best == batch_labels[static_cast<std::size_t>(b)]) ++correct;
            }

            ParamSet<float> grads;
            for (auto& [name, ref] : leaves) grads.add(name, tape.grad_of(ref));
            tsdm::detail::clip_global_norm(grads, 1.0);
            adam.update(cls.params, grads, cfg.learning_rate);
            loss_sum += static_cast<double>(loss->val(0));
            ++batches;
        }
        history.push_back({loss_sum / std::max(1, batches),
                           static_cast<double>(correct) / train_set.count});
    }
    return {std::move(cls), std::move(history)};
}

struct EvalResult {
    double accuracy = 0.0;
    std::vector<std::vector<int>> confusion;  // rows: true class, cols: predicted
    std::vector<std::string> class_names;
};

/// Accuracy and confusion matrix on a labeled test set. Labels must come from
/// the classifier's training label set.
inline EvalResult evaluate(const Classifier& cls, const LabeledDataset& test_set) {
    test_set.check();
    if (test_set.count == 0) throw std::invalid_argument("evaluate: empty test set");
    if (test_set.length != cls.length)
        throw std::invalid_argument("evaluate: test series length does not match classifier");
    const std::vector<int> truth = detail::label_indices(test_set, cls.class_names);
    const int K = static_cast<int>(cls.class_names.size());
    EvalResult r;
    r.class_names = cls.class_names;
    r.confusion.assign(static_cast<std::size_t>(K), std::vector<int>(static_cast<std::size_t>(K), 0));
    int correct = 0;
    constexpr int kChunk = 64;
    for (int start = 0; start < test_set.count; start += kChunk) {
        const int n = std::min(kChunk, test_set.count - start);
        std::vector<int> rows(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = start + i;
        const std::vector<int> pred = detail::predict_rows(cls, test_set, rows);
        for (int i = 0; i < n; ++i) {
            const int t = truth[static_cast<std::size_t>(start + i)];
            const int p = pred[static_cast<std::size_t>(i)];
            ++r.confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
            if (t == p) ++correct;
        }
    }
    r.accuracy = static_cast<double>(correct) / test_set.count;
    return r;
}

struct AbReport {
    std::vector<double> small_accuracies;
    std::vector<double> augmented_accuracies;
    double small_median = 0.0;
    double augmented_median = 0.0;
    double improvement_pct = 0.0;  // (augmented - small) / small * 100, on medians
};

namespace detail {
inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace detail

/// Trains the classifier on both arms across n_seeds seeds against the same
/// test set and reports per-arm accuracies, medians and the relative
/// improvement of the augmented arm.
inline AbReport ab_compare(const LabeledDataset& small_set, const LabeledDataset& augmented_set,
                           const LabeledDataset& test_set, const CnnConfig& cfg, int n_seeds) {
    if (n_seeds < 3) throw std::invalid_argument("ab_compare: need at least 3 seeds");
    AbReport report;
    for (int s = 0; s < n_seeds; ++s) {
        CnnConfig run_cfg = cfg;
        run_cfg.seed = substream_seed(cfg.seed, static_cast<std::uint64_t>(s));
        auto [small_cls, h1] = train_classifier(small_set, run_cfg);
        report.small_accuracies.push_back(evaluate(small_cls, test_set).accuracy);
        auto [aug_cls, h2] = train_classifier(augmented_set, run_cfg);
        report.augmented_accuracies.push_back(evaluate(aug_cls, test_set).accuracy);
    }
    report.small_median = detail::median(report.small_accuracies);
    report.augmented_median = detail::median(report.augmented_accuracies);
    report.improvement_pct = report.small_median > 0.0
                                 ? (report.augmented_median - report.small_median) /
                                       report.small_median * 100.0
                                 : 0.0;
    return report;
}

inline json ab_report_to_json(const AbReport& r) {
    return json{{"small_accuracies", r.small_accuracies},
                {"augmented_accuracies", r.augmented_accuracies},
                {"small_median", r.small_median},
                {"augmented_median", r.augmented_median},
                {"improvement_pct", r.improvement_pct}};
}

inline std::string ab_report_to_csv(const AbReport& r) {
    std::string out = "seed,arm,accuracy\n";
    char buf[64];
    for (std::size_t i = 0; i < r.small_accuracies.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,small,%.9g\n", i, r.small_accuracies[i]);
        out += buf;
        std::snprintf(buf, sizeof(buf), "%zu,augmented,%.9g\n", i, r.augmented_accuracies[i]);
        out += buf;
    }
    return out;
}

}  // namespace tsdm::diag
