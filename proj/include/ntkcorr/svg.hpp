#pragma once

#include <string>
#include <vector>

namespace ntkcorr {

struct PlotSeries {
    std::string label;
    std::string color = "#1f77b4";
    std::vector<std::pair<double, double>> points;
    bool draw_line = false;  // connect points instead of scattering them
};

struct PlotOptions {
    std::string title;
    std::string x_label = "x";
    std::string y_label = "y";
    bool log_x = false;
    bool log_y = false;
    int width = 720;
    int height = 480;
};

// Static SVG scatter/line plot with decade ticks on log axes. Points with
// non-positive coordinates on a log axis are dropped.
std::string render_plot(const std::vector<PlotSeries>& series, const PlotOptions& options);

void write_plot(const std::string& path, const std::vector<PlotSeries>& series,
                const PlotOptions& options);

}  // namespace ntkcorr
