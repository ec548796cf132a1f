// SPDX-License-Identifier: Apache-2.0
//
// Minimal SVG charts for metric reports.
#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace medgen {

struct Series {
    std::string name;
    std::vector<double> values; // one per x label
};

/// Grouped bars: one group per label, one bar per series.
std::string render_bar_svg(const std::string& title, const std::vector<std::string>& labels,
                           const std::vector<Series>& series, const std::string& y_label);

/// One polyline per series over categorical x positions.
std::string render_line_svg(const std::string& title, const std::vector<std::string>& x_labels,
                            const std::vector<Series>& series, const std::string& y_label);

void write_text(const std::filesystem::path& path, const std::string& text);

} // namespace medgen
