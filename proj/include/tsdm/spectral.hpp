#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsdm/data.hpp"

namespace tsdm {

/// Single-sided amplitude spectrum: L/2 + 1 bins, bin k in cycles per record.
/// A unit-amplitude sine aligned with bin k reads 1.0 at that bin.
struct Spectrum {
    std::vector<double> magnitudes;
    double bin_unit = 1.0;  // cycles per record per bin

    int bins() const { return static_cast<int>(magnitudes.size()); }
};

/// Per-bin five-number summary over a set of spectra plus the values falling
/// outside the 1.5 IQR whiskers.
struct SpectrumSummary {
    std::vector<double> min, q1, median, q3, max;
    std::vector<std::vector<double>> outliers;  // per bin

    int bins() const { return static_cast<int>(min.size()); }
};

namespace detail {

inline void fft_radix2(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -kTwoPi / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace detail

/// Single-sided DFT magnitude spectrum of one real series of even length:
/// (2/L)|X_k| for interior bins, (1/L)|X_k| at DC and Nyquist.
inline Spectrum magnitude_spectrum(const double* x, int length) {
    if (length < 2 || length % 2 != 0)
        throw std::invalid_argument("magnitude_spectrum: length must be even and >= 2");
    const int half = length / 2;
    std::vector<std::complex<double>> X(static_cast<std::size_t>(length));
    if (detail::is_pow2(length)) {
        for (int i = 0; i < length; ++i) X[static_cast<std::size_t>(i)] = x[i];
        detail::fft_radix2(X);
    } else {
        for (int k = 0; k <= half; ++k) {
            double re = 0.0, im = 0.0;
            for (int i = 0; i < length; ++i) {
                const double a = kTwoPi * k * i / length;
                re += x[i] * std::cos(a);
                im -= x[i] * std::sin(a);
            }
            X[static_cast<std::size_t>(k)] = {re, im};
        }
    }
    Spectrum s;
    s.magnitudes.resize(static_cast<std::size_t>(half) + 1);
    for (int k = 0; k <= half; ++k) {
        const double amp = std::abs(X[static_cast<std::size_t>(k)]) / length;
        s.magnitudes[static_cast<std::size_t>(k)] = (k == 0 || k == half) ? amp : 2.0 * amp;
    }
    return s;
}

inline Spectrum magnitude_spectrum(const std::vector<double>& x) {
    return magnitude_spectrum(x.data(), static_cast<int>(x.size()));
}

struct Peak {
    int bin = 0;
    double magnitude = 0.0;
};

struct PeakList {
    std::vector<Peak> peaks;
    bool complete = true;  // false when fewer local maxima exist than requested
};

/// The k largest local maxima (strictly greater than both neighbors), sorted
/// by magnitude descending with ties broken toward the lower bin. Bins below
/// min_bin are excluded; the default skips DC.
inline PeakList dominant_peaks(const Spectrum& s, int k, int min_bin = 1) {
    if (k < 1) throw std::invalid_argument("dominant_peaks: k must be >= 1");
    if (min_bin < 0) throw std::invalid_argument("dominant_peaks: min_bin must be >= 0");
    std::vector<Peak> maxima;
    const auto& m = s.magnitudes;
    for (int b = std::max(min_bin, 1); b + 1 < s.bins(); ++b)
        if (m[static_cast<std::size_t>(b)] > m[static_cast<std::size_t>(b - 1)] &&
            m[static_cast<std::size_t>(b)] > m[static_cast<std::size_t>(b + 1)])
            maxima.push_back({b, m[static_cast<std::size_t>(b)]});
    std::stable_sort(maxima.begin(), maxima.end(), [](const Peak& a, const Peak& b) {
        if (a.magnitude != b.magnitude) return a.magnitude > b.magnitude;
        return a.bin < b.bin;
    });
    PeakList out;
    out.complete = static_cast<int>(maxima.size()) >= k;
    maxima.resize(std::min<std::size_t>(maxima.size(), static_cast<std::size_t>(k)));
    out.peaks = std::move(maxima);
    return out;
}

/// Type-7 (linear interpolation) quantile of already sorted values.
inline double sorted_quantile(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw std::invalid_argument("quantile: empty set");
    const double pos = p * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

/// Per-bin quartile statistics across a set of equal-length spectra, with
/// outliers beyond 1.5 IQR recorded per bin.
inline SpectrumSummary spectrum_summary(const std::vector<Spectrum>& spectra) {
    if (spectra.empty()) throw std::invalid_argument("spectrum_summary: need at least one spectrum");
    const int bins = spectra.front().bins();
    for (const Spectrum& s : spectra)
        if (s.bins() != bins) throw std::invalid_argument("spectrum_summary: spectra length mismatch");
    SpectrumSummary out;
    out.min.resize(static_cast<std::size_t>(bins));
    out.q1.resize(static_cast<std::size_t>(bins));
    out.median.resize(static_cast<std::size_t>(bins));
    out.q3.resize(static_cast<std::size_t>(bins));
    out.max.resize(static_cast<std::size_t>(bins));
    out.outliers.resize(static_cast<std::size_t>(bins));
    std::vector<double> v(spectra.size());
    for (int b = 0; b < bins; ++b) {
        for (std::size_t i = 0; i < spectra.size(); ++i)
            v[i] = spectra[i].magnitudes[static_cast<std::size_t>(b)];
        std::sort(v.begin(), v.end());
        const std::size_t bi = static_cast<std::size_t>(b);
        out.min[bi] = v.front();
        out.q1[bi] = sorted_quantile(v, 0.25);
        out.median[bi] = sorted_quantile(v, 0.5);
        out.q3[bi] = sorted_quantile(v, 0.75);
        out.max[bi] = v.back();
        const double iqr = out.q3[bi] - out.q1[bi];
        const double lo = out.q1[bi] - 1.5 * iqr;
        const double hi = out.q3[bi] + 1.5 * iqr;
        for (double x : v)
            if (x < lo || x > hi) out.outliers[bi].push_back(x);
    }
    return out;
}

/// Per-bin arithmetic mean of the magnitude spectra of every series.
inline Spectrum average_spectrum(const LabeledDataset& d) {
    if (d.count == 0) throw std::invalid_argument("average_spectrum: empty dataset");
    Spectrum acc = magnitude_spectrum(d.row(0), d.length);
    for (int n = 1; n < d.count; ++n) {
        const Spectrum s = magnitude_spectrum(d.row(n), d.length);
        for (std::size_t k = 0; k < acc.magnitudes.size(); ++k) acc.magnitudes[k] += s.magnitudes[k];
    }
    for (double& m : acc.magnitudes) m /= d.count;
    return acc;
}

constexpr double kUnmatchedPeak = std::numeric_limits<double>::infinity();

/// For each target bin, the relative distance |p - b| / b to the nearest
/// dominant peak p; kUnmatchedPeak when the spectrum has no local maxima.
inline std::vector<double> peak_match_error(const Spectrum& s, const std::vector<int>& target_bins) {
    for (int b : target_bins)
        if (b < 1 || b >= s.bins())
            throw std::invalid_argument("peak_match_error: target bin out of range");
    const PeakList all = dominant_peaks(s, std::max(1, s.bins()), 1);
    std::vector<double> errors;
    errors.reserve(target_bins.size());
    for (int b : target_bins) {
        if (all.peaks.empty()) {
            errors.push_back(kUnmatchedPeak);
            continue;
        }
        int best = all.peaks.front().bin;
        for (const Peak& p : all.peaks)
            if (std::abs(p.bin - b) < std::abs(best - b)) best = p.bin;
        errors.push_back(std::abs(best - b) / static_cast<double>(b));
    }
    return errors;
}

// ---- CSV exports ----

inline std::string spectrum_to_csv(const Spectrum& s) {
    std::string out = "bin,magnitude\n";
    char buf[64];
    for (int k = 0; k < s.bins(); ++k) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g\n", k, s.magnitudes[static_cast<std::size_t>(k)]);
        out += buf;
    }
    return out;
}

inline std::string summary_to_csv(const SpectrumSummary& s) {
    std::string out = "bin,min,q1,median,q3,max,outlier_count\n";
    char buf[160];
    for (int k = 0; k < s.bins(); ++k) {
        const std::size_t ki = static_cast<std::size_t>(k);
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%zu\n", k, s.min[ki], s.q1[ki],
                      s.median[ki], s.q3[ki], s.max[ki], s.outliers[ki].size());
        out += buf;
    }
    return out;
}

}  // namespace tsdm
