#pragma once

#include <span>
#include <string>
#include <vector>

#include "bevit/metrics.hpp"

namespace bevit::report {

void write_text(const std::string& path, const std::string& content);
void write_reports_csv(const std::string& path, std::span<const metrics::MetricsReport> reports);
void write_report_json(const std::string& path, const metrics::MetricsReport& report);

struct HeatmapData {
    std::string title;
    std::vector<std::string> row_labels;
    std::vector<std::string> col_labels;
    std::vector<double> values;  // row-major rows x cols; NaN renders gray
};

// Light blue (low) to red (high) per column; the best cell of each column is
// bold. Byte-identical output for identical inputs.
std::string svg_heatmap(const HeatmapData& data);

struct ScatterSeries {
    std::string name;  // one color per series
    const metrics::LdaResult* lda = nullptr;
    std::span<const int> labels;  // one marker shape per class id
};

// 2-d embedding scatter with per-class 2-SD ellipses per series.
std::string svg_scatter(const std::string& title, std::span<const ScatterSeries> series);

}  // namespace bevit::report
