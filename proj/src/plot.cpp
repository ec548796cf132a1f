// SPDX-License-Identifier: Apache-2.0
#include "medgen/plot.hpp"

#include "medgen/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace medgen {

namespace {

constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
const char* const kColors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};

std::string esc(const std::string& s) {
    std::string o;
    for (char c : s) {
        switch (c) {
        case '<': o += "&lt;"; break;
        case '>': o += "&gt;"; break;
        case '&': o += "&amp;"; break;
        case '"': o += "&quot;"; break;
        default: o += c;
        }
    }
    return o;
}

struct Frame {
    double lo = 0.0, hi = 1.0;
    double y(double v) const { return kTop + (kH - kTop - kBottom) * (1.0 - (v - lo) / (hi - lo)); }
};

Frame frame_for(const std::vector<Series>& series) {
    double hi = 0.0, lo = 0.0;
    for (auto& s : series)
        for (double v : s.values)
            if (std::isfinite(v)) {
                hi = std::max(hi, v);
                lo = std::min(lo, v);
            }
    if (hi <= lo) hi = lo + 1.0;
    // round the top up to a tidy value
    const double mag = std::pow(10.0, std::floor(std::log10(hi - lo)));
    hi = std::ceil(hi / mag * 2.0) / 2.0 * mag;
    return {lo, hi};
}

void axes(std::ostringstream& os, const std::string& title, const std::string& y_label, const Frame& f) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << esc(title) << "</text>\n";
    const double x0 = kLeft, x1 = kW - kRight;
    for (int i = 0; i <= 5; ++i) {
        const double v = f.lo + (f.hi - f.lo) * i / 5.0;
        const double y = f.y(v);
        os << "<line x1=\"" << x0 << "\" y1=\"" << y << "\" x2=\"" << x1 << "\" y2=\"" << y
           << "\" stroke=\"#ddd\"/>\n";
        os << "<text x=\"" << x0 - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << v
           << "</text>\n";
    }
    os << "<line x1=\"" << x0 << "\" y1=\"" << kTop << "\" x2=\"" << x0 << "\" y2=\"" << kH - kBottom
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << x0 << "\" y1=\"" << kH - kBottom << "\" x2=\"" << x1 << "\" y2=\"" << kH - kBottom
       << "\" stroke=\"black\"/>\n";
    os << "<text transform=\"translate(18," << kH / 2 << ") rotate(-90)\" text-anchor=\"middle\" font-size=\"12\">"
       << esc(y_label) << "</text>\n";
}

void legend(std::ostringstream& os, const std::vector<Series>& series) {
    for (size_t i = 0; i < series.size(); ++i) {
        const double y = kTop + 18.0 * i;
        os << "<rect x=\"" << kW - kRight + 12 << "\" y=\"" << y << "\" width=\"12\" height=\"12\" fill=\""
           << kColors[i % 6] << "\"/>\n";
        os << "<text x=\"" << kW - kRight + 30 << "\" y=\"" << y + 10 << "\" font-size=\"11\">" << esc(series[i].name)
           << "</text>\n";
    }
}

void check(const std::vector<std::string>& labels, const std::vector<Series>& series) {
    if (labels.empty() || series.empty()) throw InvalidInput("plot: nothing to draw");
    for (auto& s : series)
        if (s.values.size() != labels.size())
            throw InvalidInput("plot: series '" + s.name + "' has " + std::to_string(s.values.size()) +
                               " values for " + std::to_string(labels.size()) + " labels");
}

} // namespace

std::string render_bar_svg(const std::string& title, const std::vector<std::string>& labels,
                           const std::vector<Series>& series, const std::string& y_label) {
    check(labels, series);
    const Frame f = frame_for(series);
    std::ostringstream os;
    axes(os, title, y_label, f);
    const double group = (kW - kLeft - kRight) / static_cast<double>(labels.size());
    const double bar = group * 0.8 / static_cast<double>(series.size());
    for (size_t g = 0; g < labels.size(); ++g) {
        const double gx = kLeft + group * g + group * 0.1;
        for (size_t s = 0; s < series.size(); ++s) {
            const double v = std::isfinite(series[s].values[g]) ? series[s].values[g] : 0.0;
            const double y = f.y(v), base = f.y(std::max(0.0, f.lo));
            os << "<rect x=\"" << gx + bar * s << "\" y=\"" << std::min(y, base) << "\" width=\"" << bar * 0.95
               << "\" height=\"" << std::abs(base - y) << "\" fill=\"" << kColors[s % 6] << "\"/>\n";
        }
        os << "<text x=\"" << gx + group * 0.4 << "\" y=\"" << kH - kBottom + 16
           << "\" text-anchor=\"middle\" font-size=\"11\">" << esc(labels[g]) << "</text>\n";
    }
    legend(os, series);
    os << "</svg>\n";
    return os.str();
}

std::string render_line_svg(const std::string& title, const std::vector<std::string>& x_labels,
                            const std::vector<Series>& series, const std::string& y_label) {
    check(x_labels, series);
    const Frame f = frame_for(series);
    std::ostringstream os;
    axes(os, title, y_label, f);
    const double span = kW - kLeft - kRight;
    auto x = [&](size_t i) {
        return x_labels.size() == 1 ? kLeft + span / 2 : kLeft + 20 + (span - 40) * i / (x_labels.size() - 1.0);
    };
    for (size_t i = 0; i < x_labels.size(); ++i)
        os << "<text x=\"" << x(i) << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
           << esc(x_labels[i]) << "</text>\n";
    for (size_t s = 0; s < series.size(); ++s) {
        os << "<polyline fill=\"none\" stroke=\"" << kColors[s % 6] << "\" stroke-width=\"2\" points=\"";
        for (size_t i = 0; i < x_labels.size(); ++i) os << x(i) << "," << f.y(series[s].values[i]) << " ";
        os << "\"/>\n";
        for (size_t i = 0; i < x_labels.size(); ++i)
            os << "<circle cx=\"" << x(i) << "\" cy=\"" << f.y(series[s].values[i]) << "\" r=\"3\" fill=\""
               << kColors[s % 6] << "\"/>\n";
    }
    legend(os, series);
    os << "</svg>\n";
    return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    os << text;
    if (!os) throw DataError("write failed: " + path.string());
}

} // namespace medgen
