#include "matssl/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "matssl/common.hpp"

namespace matssl {

namespace {

constexpr int kWidth = 720;
constexpr int kPanelHeight = 260;
constexpr int kMarginLeft = 64;
constexpr int kMarginRight = 150;  // legend space
constexpr int kMarginTop = 36;
constexpr int kMarginBottom = 40;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt_coord(double v) {
    // two decimals are plenty for pixel coordinates and keep files small
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string escape_xml(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

}  // namespace

std::string render_svg(const std::vector<PlotPanel>& panels) {
    const int total_h = static_cast<int>(panels.size()) * kPanelHeight;
    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
       << std::max(total_h, kPanelHeight) << "\" font-family=\"monospace\" font-size=\"11\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

    for (std::size_t pi = 0; pi < panels.size(); ++pi) {
        const PlotPanel& panel = panels[pi];
        const int top = static_cast<int>(pi) * kPanelHeight;
        const int x0 = kMarginLeft;
        const int x1 = kWidth - kMarginRight;
        const int y0 = top + kMarginTop;
        const int y1 = top + kPanelHeight - kMarginBottom;

        double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
        for (const auto& s : panel.series) {
            for (const auto& [x, y] : s.points) {
                xmin = std::min(xmin, x);
                xmax = std::max(xmax, x);
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
            }
        }
        const bool has_data = xmin <= xmax;
        if (!has_data) {
            xmin = 0.0;
            xmax = 1.0;
            ymin = 0.0;
            ymax = 1.0;
        }
        if (xmax == xmin) xmax = xmin + 1.0;
        if (ymax == ymin) {
            ymax = ymin + (ymin == 0.0 ? 1.0 : std::abs(ymin) * 0.1);
        }
        const double ypad = (ymax - ymin) * 0.05;
        ymin -= ypad;
        ymax += ypad;

        const auto px = [&](double x) {
            return x0 + (x - xmin) / (xmax - xmin) * (x1 - x0);
        };
        const auto py = [&](double y) {
            return y1 - (y - ymin) / (ymax - ymin) * (y1 - y0);
        };

        os << "<text x=\"" << x0 << "\" y=\"" << top + 20 << "\" font-size=\"13\">"
           << escape_xml(panel.title) << "</text>\n";
        os << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << x1 - x0 << "\" height=\""
           << y1 - y0 << "\" fill=\"none\" stroke=\"#333333\"/>\n";

        for (int tick = 0; tick <= 4; ++tick) {
            const double ty = ymin + (ymax - ymin) * tick / 4.0;
            const double gy = py(ty);
            os << "<line x1=\"" << x0 << "\" y1=\"" << fmt_coord(gy) << "\" x2=\"" << x1
               << "\" y2=\"" << fmt_coord(gy) << "\" stroke=\"#dddddd\"/>\n";
            os << "<text x=\"" << x0 - 6 << "\" y=\"" << fmt_coord(gy + 4)
               << "\" text-anchor=\"end\">" << format_double(std::round(ty * 1e4) / 1e4)
               << "</text>\n";
            const double tx = xmin + (xmax - xmin) * tick / 4.0;
            const double gx = px(tx);
            os << "<text x=\"" << fmt_coord(gx) << "\" y=\"" << y1 + 16
               << "\" text-anchor=\"middle\">" << format_double(std::round(tx * 100.0) / 100.0)
               << "</text>\n";
        }
        if (!panel.x_label.empty()) {
            os << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << y1 + 32
               << "\" text-anchor=\"middle\">" << escape_xml(panel.x_label) << "</text>\n";
        }
        if (!panel.y_label.empty()) {
            os << "<text x=\"" << x0 << "\" y=\"" << y0 - 8 << "\">" << escape_xml(panel.y_label)
               << "</text>\n";
        }

        int color_idx = 0;
        int legend_row = 0;
        for (const auto& s : panel.series) {
            if (s.points.empty()) continue;
            const char* color = kPalette[color_idx % 8];
            ++color_idx;
            os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
            for (std::size_t i = 0; i < s.points.size(); ++i) {
                if (i) os << ' ';
                os << fmt_coord(px(s.points[i].first)) << ',' << fmt_coord(py(s.points[i].second));
            }
            os << "\"/>\n";
            const int ly = y0 + 10 + 16 * legend_row;
            ++legend_row;
            os << "<line x1=\"" << x1 + 8 << "\" y1=\"" << ly << "\" x2=\"" << x1 + 28 << "\" y2=\""
               << ly << "\" stroke=\"" << color << "\" stroke-width=\"1.5\"/>\n";
            os << "<text x=\"" << x1 + 32 << "\" y=\"" << ly + 4 << "\">" << escape_xml(s.label)
               << "</text>\n";
        }
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace matssl
