#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ktcaa {

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

// Minimal static SVG line chart; enough to eyeball loss curves and CMC.
inline void write_line_chart(const std::filesystem::path& path, const std::string& title,
                             const std::vector<PlotSeries>& series) {
  const int width = 720, height = 440, margin = 50;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (!(xmax >= xmin)) { xmin = 0; xmax = 1; }
  if (!(ymax >= ymin)) { ymin = 0; ymax = 1; }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;

  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  auto px = [&](double x) {
    return margin + (x - xmin) / (xmax - xmin) * (width - 2 * margin);
  };
  auto py = [&](double y) {
    return height - margin - (y - ymin) / (ymax - ymin) * (height - 2 * margin);
  };

  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_line_chart: cannot open " + path.string());
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
    << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  f << "<text x='" << width / 2 << "' y='24' text-anchor='middle' font-size='16'>" << title
    << "</text>\n";
  f << "<line x1='" << margin << "' y1='" << height - margin << "' x2='" << width - margin
    << "' y2='" << height - margin << "' stroke='black'/>\n";
  f << "<line x1='" << margin << "' y1='" << margin << "' x2='" << margin << "' y2='"
    << height - margin << "' stroke='black'/>\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", ymin);
  f << "<text x='4' y='" << height - margin << "' font-size='11'>" << buf << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.4g", ymax);
  f << "<text x='4' y='" << margin + 4 << "' font-size='11'>" << buf << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.4g", xmin);
  f << "<text x='" << margin << "' y='" << height - margin + 16 << "' font-size='11'>" << buf
    << "</text>\n";
  std::snprintf(buf, sizeof buf, "%.4g", xmax);
  f << "<text x='" << width - margin << "' y='" << height - margin + 16
    << "' text-anchor='end' font-size='11'>" << buf << "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    if (s.x.empty()) continue;
    f << "<polyline fill='none' stroke='" << colors[si % 6] << "' stroke-width='1.5' points='";
    for (std::size_t i = 0; i < s.x.size(); ++i) f << px(s.x[i]) << "," << py(s.y[i]) << " ";
    f << "'/>\n";
    f << "<text x='" << width - margin - 4 << "' y='" << margin + 16 * (si + 1)
      << "' text-anchor='end' fill='" << colors[si % 6] << "' font-size='12'>" << s.label
      << "</text>\n";
  }
  f << "</svg>\n";
}

}  // namespace ktcaa
