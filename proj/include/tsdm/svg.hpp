#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "tsdm/diffusion.hpp"
#include "tsdm/spectral.hpp"

namespace tsdm::svg {

// Minimal SVG renderings of the CSV artifacts. The CSVs are the source of
// truth; these exist for quick visual inspection only.

namespace detail {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

struct Range {
    double lo = 0.0, hi = 1.0;
    double map(double v, double out_lo, double out_hi) const {
        const double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
        return out_lo + t * (out_hi - out_lo);
    }
};

inline Range value_range(const std::vector<double>& v) {
    Range r{v.empty() ? 0.0 : v.front(), v.empty() ? 1.0 : v.front()};
    for (double x : v) {
        r.lo = std::min(r.lo, x);
        r.hi = std::max(r.hi, x);
    }
    if (r.hi == r.lo) r.hi = r.lo + 1.0;
    return r;
}

inline std::string polyline(const std::vector<double>& y, const Range& r, double x0, double x1,
                            double y_top, double y_bot, const char* color) {
    std::string pts;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double px = x0 + (x1 - x0) * (y.size() > 1 ? static_cast<double>(i) / (y.size() - 1) : 0.5);
        const double py = y_bot - (y_bot - y_top) * (r.map(y[i], 0.0, 1.0));
        pts += num(px) + "," + num(py) + " ";
    }
    return "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"1\" points=\"" + pts + "\"/>\n";
}

}  // namespace detail

/// One polyline per series, stacked as small multiples.
inline std::string series_chart(const std::vector<std::vector<double>>& series,
                                const std::vector<std::string>& titles, int width = 900,
                                int row_height = 120) {
    const int rows = static_cast<int>(series.size());
    const int height = rows * row_height + 20;
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                      std::to_string(width) + "\" height=\"" + std::to_string(height) + "\">\n";
    for (int i = 0; i < rows; ++i) {
        const double top = 10.0 + i * row_height;
        const double bot = top + row_height - 18.0;
        const auto r = detail::value_range(series[static_cast<std::size_t>(i)]);
        out += "<rect x=\"40\" y=\"" + detail::num(top) + "\" width=\"" + std::to_string(width - 50) +
               "\" height=\"" + detail::num(bot - top) + "\" fill=\"#fafafa\" stroke=\"#ccc\"/>\n";
        out += detail::polyline(series[static_cast<std::size_t>(i)], r, 40.0, width - 10.0, top, bot,
                                "#1f6fb2");
        if (i < static_cast<int>(titles.size()))
            out += "<text x=\"42\" y=\"" + detail::num(bot + 13.0) +
                   "\" font-size=\"11\" font-family=\"sans-serif\">" + titles[static_cast<std::size_t>(i)] +
                   "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

inline std::string spectrum_chart(const Spectrum& s, int width = 900, int height = 260) {
    return series_chart({s.magnitudes}, {"magnitude spectrum"}, width, height - 20);
}

/// Per-bin box-and-whisker rendering of a SpectrumSummary.
inline std::string box_plot(const SpectrumSummary& s, int width = 1000, int height = 300) {
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                      std::to_string(width) + "\" height=\"" + std::to_string(height) + "\">\n";
    detail::Range r = detail::value_range(s.max);
    r.lo = 0.0;
    const double plot_left = 30.0, plot_right = width - 10.0;
    const double plot_top = 10.0, plot_bot = height - 20.0;
    const int bins = s.bins();
    const double step = (plot_right - plot_left) / std::max(1, bins);
    const double bw = std::max(1.0, step * 0.6);
    auto ymap = [&](double v) { return plot_bot - (plot_bot - plot_top) * r.map(v, 0.0, 1.0); };
    for (int b = 0; b < bins; ++b) {
        const std::size_t bi = static_cast<std::size_t>(b);
        const double cx = plot_left + step * (b + 0.5);
        out += "<line x1=\"" + detail::num(cx) + "\" y1=\"" + detail::num(ymap(s.min[bi])) +
               "\" x2=\"" + detail::num(cx) + "\" y2=\"" + detail::num(ymap(s.max[bi])) +
               "\" stroke=\"#888\" stroke-width=\"0.6\"/>\n";
        out += "<rect x=\"" + detail::num(cx - bw / 2) + "\" y=\"" + detail::num(ymap(s.q3[bi])) +
               "\" width=\"" + detail::num(bw) + "\" height=\"" +
               detail::num(std::max(0.3, ymap(s.q1[bi]) - ymap(s.q3[bi]))) +
               "\" fill=\"#9ecae1\" stroke=\"#3182bd\" stroke-width=\"0.5\"/>\n";
        out += "<line x1=\"" + detail::num(cx - bw / 2) + "\" y1=\"" + detail::num(ymap(s.median[bi])) +
               "\" x2=\"" + detail::num(cx + bw / 2) + "\" y2=\"" + detail::num(ymap(s.median[bi])) +
               "\" stroke=\"#08306b\" stroke-width=\"1\"/>\n";
        for (double o : s.outliers[bi])
            out += "<circle cx=\"" + detail::num(cx) + "\" cy=\"" + detail::num(ymap(o)) +
                   "\" r=\"1.2\" fill=\"#d84b3a\"/>\n";
    }
    out += "</svg>\n";
    return out;
}

/// Small multiples of a denoising trace: series 0 of each snapshot.
inline std::string trace_chart(const DenoiseTrace& trace, int width = 900, int row_height = 110) {
    std::vector<std::vector<double>> rows;
    std::vector<std::string> titles;
    for (const auto& [t, batch] : trace.snapshots) {
        if (batch.count == 0) continue;
        rows.emplace_back(batch.row(0), batch.row(0) + batch.length);
        titles.push_back("t = " + std::to_string(t));
    }
    return series_chart(rows, titles, width, row_height);
}

}  // namespace tsdm::svg
