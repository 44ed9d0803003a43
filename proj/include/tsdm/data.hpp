#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsdm/bytes.hpp"
#include "tsdm/rng.hpp"
#include "tsdm/signal.hpp"

namespace tsdm {

constexpr double kTwoPi = 2.0 * 3.14159265358979323846;

/// N series of fixed length with optional class labels. norm_scale records
/// the global max-abs divided out by normalize(); multiply by it to recover
/// the original amplitudes.
struct LabeledDataset {
    int count = 0;
    int length = 0;
    std::vector<double> values;
    std::vector<std::string> labels;  // empty, or exactly `count` entries
    std::optional<double> norm_scale;

    LabeledDataset() = default;
    LabeledDataset(int count_, int length_) : count(count_), length(length_) {
        if (count_ < 0 || length_ <= 0)
            throw std::invalid_argument("dataset: count must be >= 0 and length > 0");
        values.assign(static_cast<std::size_t>(count_) * length_, 0.0);
    }

    double& at(int n, int i) { return values[static_cast<std::size_t>(n) * length + i]; }
    double at(int n, int i) const { return values[static_cast<std::size_t>(n) * length + i]; }
    double* row(int n) { return values.data() + static_cast<std::size_t>(n) * length; }
    const double* row(int n) const { return values.data() + static_cast<std::size_t>(n) * length; }

    bool labeled() const { return !labels.empty(); }

    void check() const {
        if (!labels.empty() && static_cast<int>(labels.size()) != count)
            throw std::invalid_argument("dataset: labels must cover every series");
        for (double x : values)
            if (!std::isfinite(x)) throw std::invalid_argument("dataset: non-finite value");
    }

    SignalBatch to_batch() const {
        SignalBatch b(count, length);
        b.values = values;
        return b;
    }
};

inline LabeledDataset dataset_from_batch(const SignalBatch& b, std::string label = {}) {
    LabeledDataset d(b.count, b.length);
    d.values = b.values;
    if (!label.empty()) d.labels.assign(static_cast<std::size_t>(b.count), label);
    return d;
}

/// Single-frequency records: series n is sin(2 pi k1 phi + b_n) sampled at
/// phi = i / length, with a per-series random phase in [0, 2 pi). k1 is in
/// cycles per record, which equals the DFT bin of the peak.
inline LabeledDataset gen_single_frequency(double k1, int n_series, int length,
                                           std::uint64_t seed, const std::string& label = {}) {
    if (!(k1 > 0.0)) throw std::invalid_argument("gen_single_frequency: k1 must be positive");
    if (n_series < 1 || length < 1)
        throw std::invalid_argument("gen_single_frequency: n_series and length must be >= 1");
    LabeledDataset d(n_series, length);
    Rng rng(seed);
    for (int n = 0; n < n_series; ++n) {
        const double phase = rng.uniform(0.0, kTwoPi);
        double* r = d.row(n);
        for (int i = 0; i < length; ++i)
            r[i] = std::sin(kTwoPi * k1 * (static_cast<double>(i) / length) + phase);
    }
    if (!label.empty()) d.labels.assign(static_cast<std::size_t>(n_series), label);
    return d;
}

/// Sum of sines with independent per-series, per-component phases.
inline LabeledDataset gen_multi_frequency(const std::vector<double>& freqs, int n_series,
                                          int length, std::uint64_t seed,
                                          const std::string& label = {}) {
    if (freqs.empty()) throw std::invalid_argument("gen_multi_frequency: need at least one frequency");
    for (std::size_t i = 0; i < freqs.size(); ++i) {
        if (!(freqs[i] > 0.0))
            throw std::invalid_argument("gen_multi_frequency: frequencies must be positive");
        for (std::size_t j = i + 1; j < freqs.size(); ++j)
            if (freqs[i] == freqs[j])
                throw std::invalid_argument("gen_multi_frequency: duplicate frequency");
    }
    if (n_series < 1 || length < 1)
        throw std::invalid_argument("gen_multi_frequency: n_series and length must be >= 1");
    LabeledDataset d(n_series, length);
    Rng rng(seed);
    std::vector<double> phases(freqs.size());
    for (int n = 0; n < n_series; ++n) {
        for (double& p : phases) p = rng.uniform(0.0, kTwoPi);
        double* r = d.row(n);
        for (int i = 0; i < length; ++i) {
            const double phi = static_cast<double>(i) / length;
            double acc = 0.0;
            for (std::size_t m = 0; m < freqs.size(); ++m)
                acc += std::sin(kTwoPi * freqs[m] * phi + phases[m]);
            r[i] = acc;
        }
    }
    if (!label.empty()) d.labels.assign(static_cast<std::size_t>(n_series), label);
    return d;
}

/// Divides all values by the global max-abs so they lie in [-1, 1] and
/// records the scale. Rejects all-zero and already-normalized datasets.
inline LabeledDataset normalize(const LabeledDataset& d) {
    if (d.count == 0) throw std::invalid_argument("normalize: empty dataset");
    if (d.norm_scale) throw std::invalid_argument("normalize: dataset already normalized");
    double mx = 0.0;
    for (double x : d.values) mx = std::max(mx, std::abs(x));
    if (mx == 0.0) throw std::invalid_argument("normalize: all-zero dataset, scale undefined");
    LabeledDataset out = d;
    for (double& x : out.values) x /= mx;
    out.norm_scale = mx;
    return out;
}

inline LabeledDataset denormalize(const LabeledDataset& d) {
    if (!d.norm_scale) throw std::invalid_argument("denormalize: dataset has no recorded scale");
    LabeledDataset out = d;
    const double s = *d.norm_scale;
    for (double& x : out.values) x *= s;
    out.norm_scale.reset();
    return out;
}

// ---- on-disk formats ----

enum class DatasetFormat { Binary, Csv };

/// Binary layout: magic "TSDM", version u32 LE = 1, n_series u32 LE,
/// length u32 LE, label block (u32 LE byte length, then UTF-8
/// newline-terminated labels; empty block = unlabeled), then n_series x
/// length f32 LE values, row-major. norm_scale is not stored.
inline std::string dataset_to_binary(const LabeledDataset& d) {
    d.check();
    std::string out;
    out += "TSDM";
    bytes::put_u32(out, 1);
    bytes::put_u32(out, static_cast<std::uint32_t>(d.count));
    bytes::put_u32(out, static_cast<std::uint32_t>(d.length));
    std::string labels;
    if (d.labeled())
        for (const std::string& l : d.labels) {
            if (l.empty() || l.find('\n') != std::string::npos)
                throw std::invalid_argument("dataset: labels must be non-empty and newline-free");
            labels += l;
            labels += '\n';
        }
    bytes::put_u32(out, static_cast<std::uint32_t>(labels.size()));
    out += labels;
    for (double x : d.values) bytes::put_f32(out, static_cast<float>(x));
    return out;
}

inline LabeledDataset dataset_from_binary(const std::string& buf) {
    bytes::Reader r(buf, "dataset");
    if (r.str(4) != "TSDM") throw FormatError("dataset: bad magic, expected TSDM");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw FormatError("dataset: unsupported format version " + std::to_string(version));
    const std::uint32_t n = r.u32();
    const std::uint32_t len = r.u32();
    if (len == 0) throw FormatError("dataset: zero length");
    const std::uint32_t label_bytes = r.u32();
    const std::string label_block = r.str(label_bytes);
    LabeledDataset d(static_cast<int>(n), static_cast<int>(len));
    if (label_bytes > 0) {
        if (label_block.back() != '\n') throw FormatError("dataset: label block not newline-terminated");
        std::size_t start = 0;
        for (std::size_t i = 0; i < label_block.size(); ++i)
            if (label_block[i] == '\n') {
                if (i == start) throw FormatError("dataset: empty label");
                d.labels.emplace_back(label_block, start, i - start);
                start = i + 1;
            }
        if (d.labels.size() != n)
            throw FormatError("dataset: label count does not match series count");
    }
    for (std::size_t i = 0; i < d.values.size(); ++i) d.values[i] = static_cast<double>(r.f32());
    r.expect_end();
    return d;
}

/// CSV layout: one series per row, comma-separated decimal values; labeled
/// rows start with a `label:<name>` cell. Values round-trip to 9 significant
/// digits.
inline std::string dataset_to_csv(const LabeledDataset& d) {
    d.check();
    std::string out;
    char buf[48];
    for (int n = 0; n < d.count; ++n) {
        if (d.labeled()) {
            const std::string& l = d.labels[static_cast<std::size_t>(n)];
            if (l.empty() || l.find_first_of(",\n") != std::string::npos)
                throw std::invalid_argument("dataset: labels must be non-empty without comma/newline");
            out += "label:";
            out += l;
            out += ',';
        }
        for (int i = 0; i < d.length; ++i) {
            std::snprintf(buf, sizeof(buf), "%.9g", d.at(n, i));
            out += buf;
            out += i + 1 < d.length ? ',' : '\n';
        }
    }
    return out;
}

inline LabeledDataset dataset_from_csv(const std::string& text) {
    std::vector<std::vector<double>> rows;
    std::vector<std::string> labels;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> row;
        std::size_t pos = 0;
        bool first = true;
        while (pos <= line.size()) {
            std::size_t comma = line.find(',', pos);
            if (comma == std::string::npos) comma = line.size();
            std::string cell = line.substr(pos, comma - pos);
            if (first && cell.rfind("label:", 0) == 0) {
                labels.push_back(cell.substr(6));
                if (labels.back().empty())
                    throw FormatError("dataset csv: empty label on line " + std::to_string(line_no));
            } else {
                std::size_t used = 0;
                double v = 0.0;
                try {
                    v = std::stod(cell, &used);
                } catch (const std::exception&) {
                    throw FormatError("dataset csv: non-numeric cell '" + cell + "' on line " +
                                      std::to_string(line_no));
                }
                if (used != cell.size())
                    throw FormatError("dataset csv: non-numeric cell '" + cell + "' on line " +
                                      std::to_string(line_no));
                row.push_back(v);
            }
            first = false;
            pos = comma + 1;
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw FormatError("dataset csv: ragged row on line " + std::to_string(line_no));
        if (!labels.empty() && labels.size() != rows.size() + 1)
            throw FormatError("dataset csv: mixed labeled and unlabeled rows (line " +
                              std::to_string(line_no) + ")");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw FormatError("dataset csv: no data rows");
    if (rows.front().empty()) throw FormatError("dataset csv: rows carry no values");
    LabeledDataset d(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
    for (std::size_t n = 0; n < rows.size(); ++n)
        for (std::size_t i = 0; i < rows[n].size(); ++i)
            d.values[n * rows[n].size() + i] = rows[n][i];
    d.labels = std::move(labels);
    d.check();
    return d;
}

inline void save_dataset(const LabeledDataset& d, const std::string& path, DatasetFormat format) {
    write_file(path, format == DatasetFormat::Binary ? dataset_to_binary(d) : dataset_to_csv(d));
}

inline LabeledDataset load_dataset(const std::string& path, DatasetFormat format) {
    const std::string buf = read_file(path);
    if (buf.empty()) throw FormatError("dataset: empty file: " + path);
    return format == DatasetFormat::Binary ? dataset_from_binary(buf) : dataset_from_csv(buf);
}

}  // namespace tsdm
