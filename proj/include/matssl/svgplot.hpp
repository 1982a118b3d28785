// Dependency-free SVG line charts; byte-stable output for identical input.
#pragma once

#include <string>
#include <utility>
#include <vector>

namespace matssl {

struct PlotSeries {
    std::string label;
    std::vector<std::pair<double, double>> points;  // (x, y)
};

struct PlotPanel {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<PlotSeries> series;
};

std::string render_svg(const std::vector<PlotPanel>& panels);

}  // namespace matssl
