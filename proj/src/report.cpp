#include "bevit/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "bevit/error.hpp"

namespace bevit::report {

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write: " + path);
    out << content;
    if (!out) throw IoError("write failed: " + path);
}

void write_reports_csv(const std::string& path, std::span<const metrics::MetricsReport> reports) {
    if (reports.empty()) throw DataError("no reports to write");
    std::ostringstream out;
    out << metrics::report_csv_header() << "\n";
    for (const auto& r : reports) out << metrics::report_csv_row(r) << "\n";
    write_text(path, out.str());
}

void write_report_json(const std::string& path, const metrics::MetricsReport& report) {
    write_text(path, metrics::to_json(report) + "\n");
}

namespace {

std::string fmt(double v, const char* spec = "%.4f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return std::string(buf);
}

std::string esc(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&') out += "&amp;";
        else if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else out += c;
    }
    return out;
}

// light blue -> red
std::string lerp_color(double t) {
    t = std::clamp(t, 0.0, 1.0);
    const int r = static_cast<int>(std::lround(186 + t * (205 - 186)));
    const int g = static_cast<int>(std::lround(222 + t * (61 - 222)));
    const int b = static_cast<int>(std::lround(235 + t * (52 - 235)));
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
    return std::string(buf);
}

const char* series_color(std::size_t i) {
    static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#17becf"};
    return kColors[i % 7];
}

std::string marker(int cls, double x, double y, const std::string& color) {
    char buf[256];
    switch (cls % 5) {
        case 0:
            std::snprintf(buf, sizeof buf,
                          "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\" fill-opacity=\"0.7\"/>",
                          x, y, color.c_str());
            break;
        case 1:
            std::snprintf(buf, sizeof buf,
                          "<rect x=\"%.2f\" y=\"%.2f\" width=\"5.2\" height=\"5.2\" fill=\"%s\" "
                          "fill-opacity=\"0.7\"/>",
                          x - 2.6, y - 2.6, color.c_str());
            break;
        case 2:
            std::snprintf(buf, sizeof buf,
                          "<path d=\"M %.2f %.2f L %.2f %.2f L %.2f %.2f Z\" fill=\"%s\" "
                          "fill-opacity=\"0.7\"/>",
                          x, y - 3.4, x - 3.0, y + 2.6, x + 3.0, y + 2.6, color.c_str());
            break;
        case 3:
            std::snprintf(buf, sizeof buf,
                          "<path d=\"M %.2f %.2f L %.2f %.2f L %.2f %.2f L %.2f %.2f Z\" "
                          "fill=\"%s\" fill-opacity=\"0.7\"/>",
                          x, y - 3.4, x + 3.4, y, x, y + 3.4, x - 3.4, y, color.c_str());
            break;
        default:
            std::snprintf(buf, sizeof buf,
                          "<path d=\"M %.2f %.2f L %.2f %.2f M %.2f %.2f L %.2f %.2f\" "
                          "stroke=\"%s\" stroke-width=\"1.6\"/>",
                          x - 2.6, y - 2.6, x + 2.6, y + 2.6, x - 2.6, y + 2.6, x + 2.6, y - 2.6,
                          color.c_str());
            break;
    }
    return std::string(buf);
}

}  // namespace

std::string svg_heatmap(const HeatmapData& data) {
    const std::size_t rows = data.row_labels.size();
    const std::size_t cols = data.col_labels.size();
    if (data.values.size() != rows * cols)
        throw DataError("heatmap values do not fill rows x cols");

    const int cell_w = 86, cell_h = 24, left = 170, top = 56;
    const int width = left + cell_w * static_cast<int>(cols) + 20;
    const int height = top + cell_h * static_cast<int>(rows) + 24;

    // per-column normalization and best cell
    std::vector<double> cmin(cols, std::numeric_limits<double>::infinity());
    std::vector<double> cmax(cols, -std::numeric_limits<double>::infinity());
    std::vector<std::size_t> best(cols, SIZE_MAX);
    for (std::size_t c = 0; c < cols; ++c)
        for (std::size_t r = 0; r < rows; ++r) {
            const double v = data.values[r * cols + c];
            if (std::isnan(v)) continue;
            cmin[c] = std::min(cmin[c], v);
            cmax[c] = std::max(cmax[c], v);
            if (best[c] == SIZE_MAX || v > data.values[best[c] * cols + c]) best[c] = r;
        }

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" font-family=\"Helvetica, Arial, sans-serif\" font-size=\"11\">\n";
    svg << "<text x=\"8\" y=\"18\" font-size=\"14\">" << esc(data.title) << "</text>\n";
    for (std::size_t c = 0; c < cols; ++c)
        svg << "<text x=\"" << left + static_cast<int>(c) * cell_w + cell_w / 2 << "\" y=\""
            << top - 8 << "\" text-anchor=\"middle\">" << esc(data.col_labels[c]) << "</text>\n";
    for (std::size_t r = 0; r < rows; ++r)
        svg << "<text x=\"" << left - 8 << "\" y=\"" << top + static_cast<int>(r) * cell_h + 16
            << "\" text-anchor=\"end\">" << esc(data.row_labels[r]) << "</text>\n";
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = data.values[r * cols + c];
            const int x = left + static_cast<int>(c) * cell_w;
            const int y = top + static_cast<int>(r) * cell_h;
            std::string fill = "#dddddd";
            if (!std::isnan(v)) {
                const double span = cmax[c] - cmin[c];
                fill = lerp_color(span > 0 ? (v - cmin[c]) / span : 0.5);
            }
            svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell_w << "\" height=\""
                << cell_h << "\" fill=\"" << fill << "\" stroke=\"white\"/>\n";
            if (!std::isnan(v)) {
                const bool is_best = best[c] == r;
                svg << "<text x=\"" << x + cell_w / 2 << "\" y=\"" << y + 16
                    << "\" text-anchor=\"middle\"" << (is_best ? " font-weight=\"bold\"" : "")
                    << ">" << fmt(v) << "</text>\n";
            }
        }
    svg << "</svg>\n";
    return svg.str();
}

std::string svg_scatter(const std::string& title, std::span<const ScatterSeries> series) {
    if (series.empty()) throw DataError("scatter needs at least one series");
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        const auto& p = s.lda->projected;
        const auto k = static_cast<std::size_t>(s.lda->out_dims);
        for (std::size_t i = 0; i < p.size(); i += k) {
            const double px = p[i];
            const double py = k > 1 ? p[i + 1] : 0.0;
            xmin = std::min(xmin, px);
            xmax = std::max(xmax, px);
            ymin = std::min(ymin, py);
            ymax = std::max(ymax, py);
        }
    }
    const double padx = 0.06 * (xmax - xmin + 1e-12);
    const double pady = 0.06 * (ymax - ymin + 1e-12);
    xmin -= padx;
    xmax += padx;
    ymin -= pady;
    ymax += pady;

    const int width = 560, height = 420, left = 50, top = 40;
    const int plot_w = width - left - 20, plot_h = height - top - 40;
    auto sx = [&](double v) { return left + (v - xmin) / (xmax - xmin) * plot_w; };
    auto sy = [&](double v) { return top + plot_h - (v - ymin) / (ymax - ymin) * plot_h; };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" font-family=\"Helvetica, Arial, sans-serif\" font-size=\"11\">\n";
    svg << "<text x=\"8\" y=\"18\" font-size=\"14\">" << esc(title) << "</text>\n";
    svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << plot_w << "\" height=\""
        << plot_h << "\" fill=\"none\" stroke=\"#999\"/>\n";

    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const std::string color = series_color(si);
        const auto& lda = *s.lda;
        const int k = lda.out_dims;
        for (std::size_t i = 0; i < s.labels.size(); ++i) {
            const double px = lda.projected[i * static_cast<std::size_t>(k)];
            const double py = k > 1 ? lda.projected[i * static_cast<std::size_t>(k) + 1] : 0.0;
            svg << marker(s.labels[i], sx(px), sy(py), color) << "\n";
        }
        for (std::size_t c = 0; c < lda.class_ids.size(); ++c) {
            const double mx = lda.class_mean[c * static_cast<std::size_t>(k)];
            const double my = k > 1 ? lda.class_mean[c * static_cast<std::size_t>(k) + 1] : 0.0;
            const double sdx = lda.class_sd[c * static_cast<std::size_t>(k)];
            const double sdy = k > 1 ? lda.class_sd[c * static_cast<std::size_t>(k) + 1] : 0.0;
            // 2-SD ellipse in data units mapped into the viewport
            svg << "<ellipse cx=\"" << fmt(sx(mx), "%.2f") << "\" cy=\"" << fmt(sy(my), "%.2f")
                << "\" rx=\"" << fmt(2 * sdx / (xmax - xmin) * plot_w, "%.2f") << "\" ry=\""
                << fmt(2 * sdy / (ymax - ymin) * plot_h, "%.2f") << "\" fill=\"none\" stroke=\""
                << color << "\" stroke-dasharray=\"4 3\"/>\n";
        }
        svg << "<text x=\"" << left + 8 << "\" y=\"" << top + 16 + 14 * static_cast<int>(si)
            << "\" fill=\"" << color << "\">" << esc(s.name) << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace bevit::report
