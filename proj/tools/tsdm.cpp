// Command-line front end: synthetic data construction, diffusion training,
// sampling, spectral reports and the small-sample augmentation workflow.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tsdm/data.hpp"
#include "tsdm/diagnosis.hpp"
#include "tsdm/diffusion.hpp"
#include "tsdm/runconfig.hpp"
#include "tsdm/schedule.hpp"
#include "tsdm/spectral.hpp"
#include "tsdm/svg.hpp"
#include "tsdm/trainer.hpp"
#include "tsdm/unet.hpp"
#include "tsdm/version.hpp"

namespace {

using tsdm::json;

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& seed) {
    if (seed) return *seed;
    std::random_device rd;
    return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

tsdm::DatasetFormat format_for(const std::string& path, const std::string& override_format) {
    if (override_format == "csv") return tsdm::DatasetFormat::Csv;
    if (override_format == "binary") return tsdm::DatasetFormat::Binary;
    return path.ends_with(".csv") ? tsdm::DatasetFormat::Csv : tsdm::DatasetFormat::Binary;
}

/// Every command records its resolved inputs next to its outputs: for a file
/// output at P the stamp is P.run.json, for a directory it is run.json inside.
void write_stamp(const std::string& out_path, bool out_is_dir, const std::string& command,
                 std::uint64_t seed, const json& args, const json& config = json()) {
    json stamp{{"tool", "tsdm"},
               {"version", tsdm::kVersion},
               {"command", command},
               {"seed", seed},
               {"args", args}};
    if (!config.is_null()) stamp["config"] = config;
    const std::string path = out_is_dir ? out_path + "/run.json" : out_path + ".run.json";
    tsdm::write_file(path, stamp.dump(2) + "\n");
}

std::vector<double> parse_freqs(const std::string& s) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        std::size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        const std::string cell = s.substr(pos, comma - pos);
        if (cell.empty()) throw CLI::ValidationError("--freqs", "empty frequency entry");
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(cell, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != cell.size())
            throw CLI::ValidationError("--freqs", "not a number: '" + cell + "'");
        out.push_back(v);
        pos = comma + 1;
    }
    return out;
}

struct GenDataArgs {
    std::string mode = "single";
    std::string freqs;
    int n = 200;
    int len = 2048;
    std::optional<std::uint64_t> seed;
    std::string label;
    std::string out;
    std::string format = "auto";
};

void cmd_gen_data(const GenDataArgs& a) {
    const std::uint64_t seed = resolve_seed(a.seed);
    const std::vector<double> freqs = parse_freqs(a.freqs);
    tsdm::LabeledDataset d;
    if (a.mode == "single") {
        if (freqs.size() != 1)
            throw std::invalid_argument("gen-data: single mode takes exactly one frequency");
        d = tsdm::gen_single_frequency(freqs[0], a.n, a.len, seed, a.label);
    } else {
        d = tsdm::gen_multi_frequency(freqs, a.n, a.len, seed, a.label);
    }
    tsdm::save_dataset(d, a.out, format_for(a.out, a.format));
    write_stamp(a.out, false, "gen-data", seed,
                json{{"mode", a.mode},
                     {"freqs", freqs},
                     {"n", a.n},
                     {"len", a.len},
                     {"label", a.label},
                     {"out", a.out}});
    std::printf("wrote %d series of length %d to %s\n", d.count, d.length, a.out.c_str());
}

struct TrainArgs {
    std::string data;
    std::string config;
    std::string out_ckpt;
    std::string out_loss;
    std::optional<std::uint64_t> seed;
};

void cmd_train(const TrainArgs& a) {
    tsdm::RunConfig rc;
    if (!a.config.empty()) rc = tsdm::load_run_config(a.config);
    if (a.seed) rc.train.seed = *a.seed;

    tsdm::LabeledDataset data = tsdm::load_dataset(a.data, format_for(a.data, "auto"));
    if (!data.norm_scale) data = tsdm::normalize(data);
    if (rc.train.checkpoint_every > 0 && rc.train.checkpoint_path.empty())
        rc.train.checkpoint_path = a.out_ckpt;

    const tsdm::TrainResult result = tsdm::train(data, rc.train, rc.unet);
    tsdm::save_checkpoint(result.params, rc.unet, rc.train.make_schedule(), *data.norm_scale,
                          a.out_ckpt);
    const std::string loss_path = a.out_loss.empty() ? a.out_ckpt + ".loss.csv" : a.out_loss;
    tsdm::write_file(loss_path, tsdm::loss_history_to_csv(result.report));
    write_stamp(a.out_ckpt, false, "train", rc.train.seed,
                json{{"data", a.data}, {"out_ckpt", a.out_ckpt}, {"out_loss", loss_path}},
                tsdm::run_config_to_json(rc));
    if (!result.report.loss_history.empty())
        std::printf("trained %zu steps, final loss %.6g, checkpoint %s\n",
                    result.report.loss_history.size(), result.report.loss_history.back().second,
                    a.out_ckpt.c_str());
    else
        std::printf("trained 0 steps, checkpoint %s\n", a.out_ckpt.c_str());
}

struct SampleArgs {
    std::string ckpt;
    int count = 40;
    std::optional<std::uint64_t> seed;
    std::optional<int> trace_every;
    std::string out;
    std::string format = "auto";
    bool svg = false;
};

void cmd_sample(const SampleArgs& a) {
    const std::uint64_t seed = resolve_seed(a.seed);
    const tsdm::Checkpoint ck = tsdm::load_checkpoint(a.ckpt);
    const tsdm::NoisePredictor model = tsdm::predictor_from_checkpoint(ck);
    auto [batch, trace] = tsdm::sample(model, ck.schedule, a.count, ck.config.length, seed,
                                       a.trace_every);
    for (double& v : batch.values) v *= ck.norm_scale;
    tsdm::save_dataset(tsdm::dataset_from_batch(batch), a.out, format_for(a.out, a.format));
    if (a.trace_every) {
        for (auto& [t, snap] : trace.snapshots)
            for (double& v : snap.values) v *= ck.norm_scale;
        tsdm::write_file(a.out + ".trace.csv", tsdm::trace_to_csv(trace));
        if (a.svg) tsdm::write_file(a.out + ".trace.svg", tsdm::svg::trace_chart(trace));
    }
    write_stamp(a.out, false, "sample", seed,
                json{{"ckpt", a.ckpt},
                     {"count", a.count},
                     {"trace_every", a.trace_every ? json(*a.trace_every) : json()},
                     {"out", a.out}});
    std::printf("sampled %d series of length %d from %s\n", batch.count, batch.length,
                a.ckpt.c_str());
}

struct SpectrumArgs {
    std::string data;
    std::string out;
    bool avg = false;
    bool summary = false;
    std::optional<int> peaks;
    bool per_series = false;
    bool svg = false;
};

void cmd_spectrum(const SpectrumArgs& a) {
    const tsdm::LabeledDataset d = tsdm::load_dataset(a.data, format_for(a.data, "auto"));
    std::filesystem::create_directories(a.out);
    std::vector<tsdm::Spectrum> spectra;
    spectra.reserve(static_cast<std::size_t>(d.count));
    for (int n = 0; n < d.count; ++n) spectra.push_back(tsdm::magnitude_spectrum(d.row(n), d.length));

    const bool nothing_requested = !a.avg && !a.summary && !a.peaks && !a.per_series;
    if (a.avg || nothing_requested) {
        const tsdm::Spectrum avg = tsdm::average_spectrum(d);
        tsdm::write_file(a.out + "/average_spectrum.csv", tsdm::spectrum_to_csv(avg));
        if (a.svg) tsdm::write_file(a.out + "/average_spectrum.svg", tsdm::svg::spectrum_chart(avg));
    }
    if (a.summary) {
        const tsdm::SpectrumSummary sum = tsdm::spectrum_summary(spectra);
        tsdm::write_file(a.out + "/spectrum_summary.csv", tsdm::summary_to_csv(sum));
        if (a.svg) tsdm::write_file(a.out + "/spectrum_summary.svg", tsdm::svg::box_plot(sum));
    }
    if (a.peaks) {
        std::string csv = "series_index,rank,bin,magnitude\n";
        char buf[96];
        for (int n = 0; n < d.count; ++n) {
            const tsdm::PeakList p = tsdm::dominant_peaks(spectra[static_cast<std::size_t>(n)], *a.peaks);
            for (std::size_t r = 0; r < p.peaks.size(); ++r) {
                std::snprintf(buf, sizeof(buf), "%d,%zu,%d,%.9g\n", n, r, p.peaks[r].bin,
                              p.peaks[r].magnitude);
                csv += buf;
            }
        }
        tsdm::write_file(a.out + "/peaks.csv", csv);
    }
    if (a.per_series) {
        char name[64];
        for (int n = 0; n < d.count; ++n) {
            std::snprintf(name, sizeof(name), "/spectrum_%04d.csv", n);
            tsdm::write_file(a.out + name, tsdm::spectrum_to_csv(spectra[static_cast<std::size_t>(n)]));
        }
    }
    write_stamp(a.out, true, "spectrum", 0,
                json{{"data", a.data},
                     {"avg", a.avg || nothing_requested},
                     {"summary", a.summary},
                     {"peaks", a.peaks ? json(*a.peaks) : json()},
                     {"per_series", a.per_series},
                     {"out", a.out}});
    std::printf("spectral reports for %d series written to %s\n", d.count, a.out.c_str());
}

struct AugmentArgs {
    std::string plan;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string format = "auto";
};

void cmd_augment(const AugmentArgs& a) {
    const std::uint64_t seed = resolve_seed(a.seed);
    json plan_json;
    try {
        plan_json = json::parse(tsdm::read_file(a.plan));
    } catch (const json::exception& e) {
        throw std::invalid_argument("augment plan " + a.plan + ": " + e.what());
    }
    const tsdm::diag::AugmentPlan plan = tsdm::diag::augment_plan_from_json(plan_json);
    const tsdm::LabeledDataset out = tsdm::diag::expand_small_sample(plan, seed);
    tsdm::save_dataset(out, a.out, format_for(a.out, a.format));
    write_stamp(a.out, false, "augment", seed,
                json{{"plan", a.plan}, {"out", a.out}, {"plan_contents", plan_json}});
    std::printf("expanded %zu classes into %d series of length %d\n", plan.classes.size(),
                out.count, out.length);
}

struct DiagnoseArgs {
    std::string train_path;
    std::string augmented_path;
    std::string test_path;
    int seeds = 5;
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
};

void cmd_diagnose(const DiagnoseArgs& a) {
    tsdm::RunConfig rc;
    if (!a.config.empty()) rc = tsdm::load_run_config(a.config);
    if (a.seed) rc.cnn.seed = *a.seed;
    const tsdm::LabeledDataset small = tsdm::load_dataset(a.train_path, format_for(a.train_path, "auto"));
    const tsdm::LabeledDataset augmented =
        tsdm::load_dataset(a.augmented_path, format_for(a.augmented_path, "auto"));
    const tsdm::LabeledDataset test = tsdm::load_dataset(a.test_path, format_for(a.test_path, "auto"));

    const tsdm::diag::AbReport report =
        tsdm::diag::ab_compare(small, augmented, test, rc.cnn, a.seeds);
    tsdm::write_file(a.out, tsdm::diag::ab_report_to_json(report).dump(2) + "\n");
    tsdm::write_file(a.out + ".csv", tsdm::diag::ab_report_to_csv(report));
    write_stamp(a.out, false, "diagnose", rc.cnn.seed,
                json{{"train", a.train_path},
                     {"augmented", a.augmented_path},
                     {"test", a.test_path},
                     {"seeds", a.seeds},
                     {"out", a.out}},
                tsdm::run_config_to_json(rc));
    std::printf("small median %.4f, augmented median %.4f, improvement %.3f%%\n",
                report.small_median, report.augmented_median, report.improvement_pct);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"time-series diffusion: generation, training, sampling and diagnosis"};
    app.require_subcommand(1);
    app.set_version_flag("--version", tsdm::kVersion);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "construct a trigonometric dataset");
    gen_cmd->add_option("--mode", gen.mode, "single or multi")
        ->check(CLI::IsMember({"single", "multi"}));
    gen_cmd->add_option("--freqs", gen.freqs, "comma-separated cycles per record")->required();
    gen_cmd->add_option("--n", gen.n, "number of series");
    gen_cmd->add_option("--len", gen.len, "series length");
    gen_cmd->add_option("--seed", gen.seed, "RNG seed");
    gen_cmd->add_option("--label", gen.label, "class label for every series");
    gen_cmd->add_option("--out", gen.out, "output dataset path")->required();
    gen_cmd->add_option("--format", gen.format, "binary, csv or auto")
        ->check(CLI::IsMember({"binary", "csv", "auto"}));
    gen_cmd->callback([&] { cmd_gen_data(gen); });

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "train the diffusion model on one class");
    train_cmd->add_option("--data", train.data, "training dataset")->required();
    train_cmd->add_option("--config", train.config, "run config JSON");
    train_cmd->add_option("--out-ckpt", train.out_ckpt, "checkpoint output path")->required();
    train_cmd->add_option("--out-loss", train.out_loss, "loss history CSV path");
    train_cmd->add_option("--seed", train.seed, "overrides the config seed");
    train_cmd->callback([&] { cmd_train(train); });

    SampleArgs sample;
    auto* sample_cmd = app.add_subcommand("sample", "generate series from a checkpoint");
    sample_cmd->add_option("--ckpt", sample.ckpt, "checkpoint path")->required();
    sample_cmd->add_option("--count", sample.count, "number of series");
    sample_cmd->add_option("--seed", sample.seed, "RNG seed");
    sample_cmd->add_option("--trace-every", sample.trace_every,
                           "record a denoising snapshot every k steps");
    sample_cmd->add_option("--out", sample.out, "output dataset path")->required();
    sample_cmd->add_option("--format", sample.format, "binary, csv or auto")
        ->check(CLI::IsMember({"binary", "csv", "auto"}));
    sample_cmd->add_flag("--svg", sample.svg, "also render the trace as SVG");
    sample_cmd->callback([&] { cmd_sample(sample); });

    SpectrumArgs spectrum;
    auto* spec_cmd = app.add_subcommand("spectrum", "spectral reports for a dataset");
    spec_cmd->add_option("--data", spectrum.data, "input dataset")->required();
    spec_cmd->add_option("--out", spectrum.out, "output directory")->required();
    spec_cmd->add_flag("--avg", spectrum.avg, "average spectrum CSV");
    spec_cmd->add_flag("--summary", spectrum.summary, "per-bin box-plot summary CSV");
    spec_cmd->add_option("--peaks", spectrum.peaks, "top-k dominant peaks per series");
    spec_cmd->add_flag("--per-series", spectrum.per_series, "one spectrum CSV per series");
    spec_cmd->add_flag("--svg", spectrum.svg, "also render SVG charts");
    spec_cmd->callback([&] { cmd_spectrum(spectrum); });

    AugmentArgs augment;
    auto* aug_cmd = app.add_subcommand("augment", "expand a small-sample plan into a dataset");
    aug_cmd->add_option("--plan", augment.plan, "augment plan JSON")->required();
    aug_cmd->add_option("--seed", augment.seed, "RNG seed");
    aug_cmd->add_option("--out", augment.out, "output dataset path")->required();
    aug_cmd->add_option("--format", augment.format, "binary, csv or auto")
        ->check(CLI::IsMember({"binary", "csv", "auto"}));
    aug_cmd->callback([&] { cmd_augment(augment); });

    DiagnoseArgs diagnose;
    auto* diag_cmd = app.add_subcommand("diagnose", "A/B classifier comparison of two arms");
    diag_cmd->add_option("--train", diagnose.train_path, "small-sample arm dataset")->required();
    diag_cmd->add_option("--augmented", diagnose.augmented_path, "augmented arm dataset")->required();
    diag_cmd->add_option("--test", diagnose.test_path, "shared test dataset")->required();
    diag_cmd->add_option("--seeds", diagnose.seeds, "number of training seeds");
    diag_cmd->add_option("--config", diagnose.config, "run config JSON");
    diag_cmd->add_option("--seed", diagnose.seed, "overrides the config seed");
    diag_cmd->add_option("--out", diagnose.out, "report JSON path")->required();
    diag_cmd->callback([&] { cmd_diagnose(diagnose); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
