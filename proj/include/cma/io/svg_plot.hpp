#pragma once

// Minimal static line plots as SVG (loss and dice curves).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cma/core/common.hpp"

namespace cma::io {

struct Series {
  std::string name;
  std::string color = "#1f77b4";
  std::vector<double> x, y;
};

inline void write_svg_plot(const std::string& path, const std::string& title,
                           const std::vector<Series>& series, const std::string& xlabel,
                           const std::string& ylabel) {
  const double width = 720, height = 420;
  const double ml = 64, mr = 16, mt = 36, mb = 44;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const auto& s : series)
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      if (first) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        first = false;
      } else {
        xmin = std::min(xmin, s.x[i]);
        xmax = std::max(xmax, s.x[i]);
        ymin = std::min(ymin, s.y[i]);
        ymax = std::max(ymax, s.y[i]);
      }
    }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr); };
  auto sy = [&](double y) { return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb); };

  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height << "'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<text x='" << width / 2 << "' y='20' text-anchor='middle' font-family='sans-serif' font-size='14'>"
      << title << "</text>\n";
  // axes
  svg << "<line x1='" << ml << "' y1='" << height - mb << "' x2='" << width - mr << "' y2='" << height - mb
      << "' stroke='black'/>\n";
  svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << height - mb
      << "' stroke='black'/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = xmin + (xmax - xmin) * i / 4.0;
    const double fy = ymin + (ymax - ymin) * i / 4.0;
    svg << "<text x='" << sx(fx) << "' y='" << height - mb + 16
        << "' text-anchor='middle' font-family='sans-serif' font-size='10'>" << std::round(fx * 100) / 100
        << "</text>\n";
    svg << "<text x='" << ml - 6 << "' y='" << sy(fy) + 3
        << "' text-anchor='end' font-family='sans-serif' font-size='10'>" << std::round(fy * 100) / 100
        << "</text>\n";
    svg << "<line x1='" << ml << "' y1='" << sy(fy) << "' x2='" << width - mr << "' y2='" << sy(fy)
        << "' stroke='#dddddd'/>\n";
  }
  svg << "<text x='" << width / 2 << "' y='" << height - 8
      << "' text-anchor='middle' font-family='sans-serif' font-size='11'>" << xlabel << "</text>\n";
  svg << "<text x='14' y='" << height / 2 << "' text-anchor='middle' font-family='sans-serif' "
      << "font-size='11' transform='rotate(-90 14 " << height / 2 << ")'>" << ylabel << "</text>\n";

  double legend_y = mt + 4;
  for (const auto& s : series) {
    svg << "<polyline fill='none' stroke='" << s.color << "' stroke-width='1.5' points='";
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      svg << sx(s.x[i]) << "," << sy(s.y[i]) << " ";
    }
    svg << "'/>\n";
    svg << "<line x1='" << width - mr - 130 << "' y1='" << legend_y << "' x2='" << width - mr - 110 << "' y2='"
        << legend_y << "' stroke='" << s.color << "' stroke-width='2'/>\n";
    svg << "<text x='" << width - mr - 104 << "' y='" << legend_y + 4
        << "' font-family='sans-serif' font-size='11'>" << s.name << "</text>\n";
    legend_y += 16;
  }
  svg << "</svg>\n";

  std::ofstream out(path);
  CMA_CHECK(out.good(), IoError, "cannot write plot " << path);
  out << svg.str();
}

}  // namespace cma::io
