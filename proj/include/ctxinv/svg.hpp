#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace ctxinv::svg {

struct Series {
  std::string name;
  std::vector<double> y;  // y[i] is plotted at x = i; NaN breaks the line
  std::string color = "#1f77b4";
};

struct Panel {
  std::string title;
  std::string y_label;
  std::vector<Series> series;
};

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/// Stacked line charts sharing a step x-axis, written as one standalone SVG.
inline void write_panels(std::ostream& os, const std::vector<Panel>& panels, int width = 640,
                         int panel_height = 260) {
  const double left = 70, right = 150, top = 30, bottom = 40;
  const int height = panel_height * static_cast<int>(panels.size());
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  for (std::size_t p = 0; p < panels.size(); ++p) {
    const Panel& panel = panels[p];
    const double y0 = static_cast<double>(p) * panel_height;
    const double pw = width - left - right;
    const double ph = panel_height - top - bottom;

    std::size_t n = 0;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : panel.series) {
      n = std::max(n, s.y.size());
      for (double v : s.y) {
        if (std::isfinite(v)) {
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      }
    }
    if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-12) {
      const double pad = std::max(std::abs(hi) * 0.05, 1e-6);
      lo -= pad;
      hi += pad;
    }
    const double x_max = n > 1 ? static_cast<double>(n - 1) : 1.0;
    auto px = [&](double x) { return left + pw * x / x_max; };
    auto py = [&](double v) { return y0 + top + ph * (1.0 - (v - lo) / (hi - lo)); };

    os << "<g>\n";
    os << "<text x=\"" << left << "\" y=\"" << y0 + 18 << "\" font-size=\"13\">" << detail::escape(panel.title)
       << "</text>\n";
    os << "<rect x=\"" << left << "\" y=\"" << y0 + top << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int k = 0; k <= 4; ++k) {
      const double v = lo + (hi - lo) * k / 4.0;
      const double yy = py(v);
      os << "<line x1=\"" << left << "\" y1=\"" << yy << "\" x2=\"" << left + pw << "\" y2=\"" << yy
         << "\" stroke=\"#ddd\"/>\n";
      os << "<text x=\"" << left - 6 << "\" y=\"" << yy + 4 << "\" text-anchor=\"end\">" << detail::num(v)
         << "</text>\n";
      const double xv = x_max * k / 4.0;
      os << "<text x=\"" << px(xv) << "\" y=\"" << y0 + top + ph + 14 << "\" text-anchor=\"middle\">"
         << detail::num(xv) << "</text>\n";
    }
    os << "<text x=\"" << left + pw / 2 << "\" y=\"" << y0 + panel_height - 8
       << "\" text-anchor=\"middle\">step</text>\n";
    os << "<text transform=\"translate(16," << y0 + top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << detail::escape(panel.y_label) << "</text>\n";

    for (std::size_t s = 0; s < panel.series.size(); ++s) {
      const Series& series = panel.series[s];
      std::string d;
      bool pen_down = false;
      for (std::size_t i = 0; i < series.y.size(); ++i) {
        if (!std::isfinite(series.y[i])) {
          pen_down = false;
          continue;
        }
        d += pen_down ? " L" : (d.empty() ? "M" : " M");
        d += detail::num(px(static_cast<double>(i))) + ',' + detail::num(py(series.y[i]));
        pen_down = true;
      }
      if (!d.empty()) {
        os << "<path d=\"" << d << "\" fill=\"none\" stroke=\"" << series.color << "\" stroke-width=\"1.5\"/>\n";
      }
      const double ly = y0 + top + 12 + 16 * static_cast<double>(s);
      os << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 30 << "\" y2=\"" << ly
         << "\" stroke=\"" << series.color << "\" stroke-width=\"2\"/>\n";
      os << "<text x=\"" << left + pw + 34 << "\" y=\"" << ly + 4 << "\">" << detail::escape(series.name)
         << "</text>\n";
    }
    os << "</g>\n";
  }
  os << "</svg>\n";
}

}  // namespace ctxinv::svg
