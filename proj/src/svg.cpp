#include "ntkcorr/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "ntkcorr/errors.hpp"

namespace ntkcorr {

namespace {

struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    void include(double v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
};

std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(6);
    ss << v;
    return ss.str();
}

std::string tick_label(double v, bool log_axis) {
    std::ostringstream ss;
    if (log_axis) {
        ss.precision(3);
    } else {
        ss.precision(4);
    }
    ss << v;
    return ss.str();
}

}  // namespace

std::string render_plot(const std::vector<PlotSeries>& series, const PlotOptions& options) {
    const double margin_left = 70.0;
    const double margin_right = 20.0;
    const double margin_top = 36.0;
    const double margin_bottom = 52.0;
    const double plot_w = options.width - margin_left - margin_right;
    const double plot_h = options.height - margin_top - margin_bottom;

    auto tx = [&](double v) { return options.log_x ? std::log10(v) : v; };
    auto ty = [&](double v) { return options.log_y ? std::log10(v) : v; };

    Range xr;
    Range yr;
    for (const auto& s : series) {
        for (const auto& [x, y] : s.points) {
            if ((options.log_x && x <= 0.0) || (options.log_y && y <= 0.0)) {
                continue;
            }
            if (!std::isfinite(x) || !std::isfinite(y)) {
                continue;
            }
            xr.include(tx(x));
            yr.include(ty(y));
        }
    }
    if (xr.lo > xr.hi) {
        xr = {0.0, 1.0};
    }
    if (yr.lo > yr.hi) {
        yr = {0.0, 1.0};
    }
    if (xr.hi - xr.lo < 1e-12) {
        xr.lo -= 0.5;
        xr.hi += 0.5;
    }
    if (yr.hi - yr.lo < 1e-12) {
        yr.lo -= 0.5;
        yr.hi += 0.5;
    }
    const double pad_x = 0.04 * (xr.hi - xr.lo);
    const double pad_y = 0.06 * (yr.hi - yr.lo);
    xr.lo -= pad_x;
    xr.hi += pad_x;
    yr.lo -= pad_y;
    yr.hi += pad_y;

    auto px = [&](double v) { return margin_left + (tx(v) - xr.lo) / (xr.hi - xr.lo) * plot_w; };
    auto py = [&](double v) {
        return margin_top + plot_h - (ty(v) - yr.lo) / (yr.hi - yr.lo) * plot_h;
    };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << options.width
        << "\" height=\"" << options.height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << options.width / 2 << "\" y=\"20\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"14\">" << options.title << "</text>\n";

    // axes box
    svg << "<rect x=\"" << margin_left << "\" y=\"" << margin_top << "\" width=\"" << plot_w
        << "\" height=\"" << plot_h << "\" fill=\"none\" stroke=\"#444\"/>\n";

    // ticks: decades on log axes, 5 even ticks otherwise
    auto emit_ticks = [&](bool horizontal) {
        const Range& r = horizontal ? xr : yr;
        const bool log_axis = horizontal ? options.log_x : options.log_y;
        std::vector<double> ticks;
        if (log_axis) {
            for (int e = static_cast<int>(std::floor(r.lo)); e <= static_cast<int>(std::ceil(r.hi));
                 ++e) {
                if (e >= r.lo - 1e-9 && e <= r.hi + 1e-9) {
                    ticks.push_back(std::pow(10.0, e));
                }
            }
            if (ticks.size() < 2) {
                ticks = {std::pow(10.0, r.lo), std::pow(10.0, r.hi)};
            }
        } else {
            for (int i = 0; i <= 4; ++i) {
                ticks.push_back(r.lo + (r.hi - r.lo) * i / 4.0);
            }
        }
        for (double t : ticks) {
            if (horizontal) {
                const double x = px(log_axis ? t : t);
                svg << "<line x1=\"" << x << "\" y1=\"" << margin_top + plot_h << "\" x2=\"" << x
                    << "\" y2=\"" << margin_top + plot_h + 5 << "\" stroke=\"#444\"/>\n";
                svg << "<text x=\"" << x << "\" y=\"" << margin_top + plot_h + 20
                    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
                    << tick_label(t, log_axis) << "</text>\n";
            } else {
                const double y = py(log_axis ? t : t);
                svg << "<line x1=\"" << margin_left - 5 << "\" y1=\"" << y << "\" x2=\""
                    << margin_left << "\" y2=\"" << y << "\" stroke=\"#444\"/>\n";
                svg << "<text x=\"" << margin_left - 8 << "\" y=\"" << y + 4
                    << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
                    << tick_label(t, log_axis) << "</text>\n";
            }
        }
    };
    emit_ticks(true);
    emit_ticks(false);

    svg << "<text x=\"" << margin_left + plot_w / 2 << "\" y=\"" << options.height - 10
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
        << options.x_label << "</text>\n";
    svg << "<text x=\"16\" y=\"" << margin_top + plot_h / 2
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
        << "transform=\"rotate(-90 16 " << margin_top + plot_h / 2 << ")\">" << options.y_label
        << "</text>\n";

    double legend_y = margin_top + 14.0;
    for (const auto& s : series) {
        std::vector<std::pair<double, double>> pts;
        for (const auto& [x, y] : s.points) {
            if ((options.log_x && x <= 0.0) || (options.log_y && y <= 0.0)) {
                continue;
            }
            if (!std::isfinite(x) || !std::isfinite(y)) {
                continue;
            }
            pts.emplace_back(x, y);
        }
        if (s.draw_line && pts.size() >= 2) {
            svg << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
            for (const auto& [x, y] : pts) {
                svg << fmt(px(x)) << ',' << fmt(py(y)) << ' ';
            }
            svg << "\"/>\n";
        } else {
            for (const auto& [x, y] : pts) {
                svg << "<circle cx=\"" << fmt(px(x)) << "\" cy=\"" << fmt(py(y))
                    << "\" r=\"2.6\" fill=\"" << s.color << "\" fill-opacity=\"0.75\"/>\n";
            }
        }
        if (!s.label.empty()) {
            svg << "<rect x=\"" << margin_left + plot_w - 150 << "\" y=\"" << legend_y - 9
                << "\" width=\"10\" height=\"10\" fill=\"" << s.color << "\"/>\n";
            svg << "<text x=\"" << margin_left + plot_w - 136 << "\" y=\"" << legend_y
                << "\" font-family=\"sans-serif\" font-size=\"11\">" << s.label << "</text>\n";
            legend_y += 16.0;
        }
    }
    svg << "</svg>\n";
    return svg.str();
}

void write_plot(const std::string& path, const std::vector<PlotSeries>& series,
                const PlotOptions& options) {
    std::ofstream os(path);
    if (!os) {
        throw InputError("write_plot: cannot open '" + path + "'");
    }
    os << render_plot(series, options);
}

}  // namespace ntkcorr
