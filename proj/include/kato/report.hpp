#pragma once

// Artifact writers: atomic file output, CSV tables and small SVG charts.

#include "kato/core.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace kato::report {

/// Writes `contents` to a sibling temporary file and renames it over `path`.
inline void write_atomic(const std::filesystem::path& path, const std::string& contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorKind::io, "cannot write " + tmp.string());
        out << contents;
        require(static_cast<bool>(out), ErrorKind::io, "write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<real>> rows;

    std::string csv() const {
        std::ostringstream os;
        os << std::setprecision(12);
        for (size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
        os << '\n';
        for (const auto& r : rows) {
            for (size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
            os << '\n';
        }
        return os.str();
    }
};

struct Series {
    std::string label;
    std::vector<real> x, y;
};

namespace detail {

inline const char* palette(size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};
    return colors[i % 6];
}

inline std::string number(real v) {
    std::ostringstream os;
    os << std::setprecision(4) << v;
    return os.str();
}

}  // namespace detail

/// Line chart; `log_x` / `log_y` switch the axes to log10 scale (non-positive values are dropped)
/// and `markers` draws points instead of polylines.
inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series, bool log_x = false, bool log_y = false,
                              bool markers = false) {
    constexpr real W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
    auto tx = [&](real v) { return log_x ? std::log10(v) : v; };
    auto ty = [&](real v) { return log_y ? std::log10(v) : v; };
    auto ok = [&](real x, real y) {
        return std::isfinite(x) && std::isfinite(y) && (!log_x || x > 0) && (!log_y || y > 0);
    };
    real x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i)
            if (ok(s.x[i], s.y[i])) {
                x0 = std::min(x0, tx(s.x[i])), x1 = std::max(x1, tx(s.x[i]));
                y0 = std::min(y0, ty(s.y[i])), y1 = std::max(y1, ty(s.y[i]));
            }
    if (!(x0 < x1)) x0 -= 1, x1 += 1;
    if (!(y0 < y1)) y0 -= 1, y1 += 1;
    auto px = [&](real v) { return L + (tx(v) - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](real v) { return H - B - (ty(v) - y0) / (y1 - y0) * (H - T - B); };
    std::ostringstream os;
    os << std::setprecision(6);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
       << xlabel << (log_x ? " (log10)" : "") << "</text>\n";
    os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 "
       << (T + H - B) / 2 << ")\" text-anchor=\"middle\">" << ylabel << (log_y ? " (log10)" : "") << "</text>\n";
    os << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\" font-size=\"10\">" << detail::number(x0) << "</text>\n";
    os << "<text x=\"" << W - R << "\" y=\"" << H - B + 16 << "\" font-size=\"10\" text-anchor=\"end\">"
       << detail::number(x1) << "</text>\n";
    os << "<text x=\"" << L - 4 << "\" y=\"" << H - B << "\" font-size=\"10\" text-anchor=\"end\">" << detail::number(y0)
       << "</text>\n";
    os << "<text x=\"" << L - 4 << "\" y=\"" << T + 4 << "\" font-size=\"10\" text-anchor=\"end\">" << detail::number(y1)
       << "</text>\n";
    for (size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        if (markers) {
            for (size_t i = 0; i < s.x.size(); ++i)
                if (ok(s.x[i], s.y[i]))
                    os << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"2.5\" fill=\""
                       << detail::palette(k) << "\"/>\n";
        } else {
            os << "<polyline fill=\"none\" stroke=\"" << detail::palette(k) << "\" stroke-width=\"1.5\" points=\"";
            for (size_t i = 0; i < s.x.size(); ++i)
                if (ok(s.x[i], s.y[i])) os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
            os << "\"/>\n";
        }
        os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (k + 1) << "\" font-size=\"11\" fill=\""
           << detail::palette(k) << "\">" << s.label << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

/// Histogram with `bins` equal-width bins.
inline std::string histogram(const std::string& title, const std::string& xlabel, const std::vector<real>& values,
                             int bins = 20) {
    constexpr real W = 640, H = 400, L = 60, R = 30, T = 40, B = 50;
    std::vector<real> v;
    for (real x : values)
        if (std::isfinite(x)) v.push_back(x);
    real lo = v.empty() ? 0 : *std::min_element(v.begin(), v.end());
    real hi = v.empty() ? 1 : *std::max_element(v.begin(), v.end());
    if (!(lo < hi)) lo -= 0.5, hi += 0.5;
    std::vector<int> count(static_cast<size_t>(bins), 0);
    for (real x : v) {
        const int b = std::min(bins - 1, static_cast<int>((x - lo) / (hi - lo) * bins));
        ++count[static_cast<size_t>(b)];
    }
    const int top = std::max(1, *std::max_element(count.begin(), count.end()));
    std::ostringstream os;
    os << std::setprecision(6);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
    const real bw = (W - L - R) / bins;
    for (int b = 0; b < bins; ++b) {
        const real h = (H - T - B) * count[static_cast<size_t>(b)] / top;
        os << "<rect x=\"" << L + b * bw << "\" y=\"" << H - B - h << "\" width=\"" << bw - 1 << "\" height=\"" << h
           << "\" fill=\"#1f77b4\"/>\n";
    }
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\" font-size=\"10\">" << detail::number(lo) << "</text>\n";
    os << "<text x=\"" << W - R << "\" y=\"" << H - B + 16 << "\" font-size=\"10\" text-anchor=\"end\">"
       << detail::number(hi) << "</text>\n";
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">" << xlabel
       << "</text>\n";
    os << "<text x=\"" << L - 4 << "\" y=\"" << T + 4 << "\" font-size=\"10\" text-anchor=\"end\">" << top << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

}  // namespace kato::report
