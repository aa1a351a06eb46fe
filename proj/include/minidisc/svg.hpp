#pragma once

// Minimal deterministic SVG emission for line and grouped-bar charts. No
// styling knobs; charts are pure functions of the data handed in.

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace minidisc::svg {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
  std::string color = "#1f77b4";
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
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

inline void line_chart(const std::string& path, const std::string& title,
                       const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series) {
  const double w = 640, h = 420, ml = 70, mr = 160, mt = 50, mb = 60;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
  }
  if (ymin > ymax) {
    ymin = 0;
    ymax = 1;
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  double px = (xmax - xmin) * 0.04, py = (ymax - ymin) * 0.06;
  xmin -= px;
  xmax += px;
  ymin -= py;
  ymax += py;
  auto X = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto Y = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write svg: " + path);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" viewBox=\"0 0 " << w << " " << h << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
      << detail::escape(title) << "</text>\n";
  // axes
  out << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\""
      << h - mb << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double xv = xmin + (xmax - xmin) * i / 4.0;
    double yv = ymin + (ymax - ymin) * i / 4.0;
    out << "<text x=\"" << detail::fmt(X(xv)) << "\" y=\"" << h - mb + 18
        << "\" text-anchor=\"middle\" font-size=\"11\">" << detail::fmt(xv) << "</text>\n";
    out << "<text x=\"" << ml - 8 << "\" y=\"" << detail::fmt(Y(yv) + 4)
        << "\" text-anchor=\"end\" font-size=\"11\">" << detail::fmt(yv) << "</text>\n";
  }
  out << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 16
      << "\" text-anchor=\"middle\" font-size=\"13\">" << detail::escape(x_label) << "</text>\n";
  out << "<text x=\"18\" y=\"" << (mt + h - mb) / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
      << (mt + h - mb) / 2 << ")\">" << detail::escape(y_label) << "</text>\n";
  // series
  size_t si = 0;
  for (const auto& s : series) {
    out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.8\" points=\"";
    for (auto [x, y] : s.points) out << detail::fmt(X(x)) << "," << detail::fmt(Y(y)) << " ";
    out << "\"/>\n";
    for (auto [x, y] : s.points)
      out << "<circle cx=\"" << detail::fmt(X(x)) << "\" cy=\"" << detail::fmt(Y(y))
          << "\" r=\"2.4\" fill=\"" << s.color << "\"/>\n";
    double ly = mt + 16.0 * double(si);
    out << "<rect x=\"" << w - mr + 10 << "\" y=\"" << ly - 9
        << "\" width=\"10\" height=\"10\" fill=\"" << s.color << "\"/>\n"
        << "<text x=\"" << w - mr + 26 << "\" y=\"" << ly << "\" font-size=\"12\">"
        << detail::escape(s.name) << "</text>\n";
    ++si;
  }
  out << "</svg>\n";
}

struct BarGroup {
  std::string label;
  std::vector<double> values;  // one value per series
};

inline void bar_chart(const std::string& path, const std::string& title,
                      const std::vector<std::string>& series_names,
                      const std::vector<BarGroup>& groups, const std::string& y_label) {
  const double w = 640, h = 420, ml = 70, mr = 160, mt = 50, mb = 60;
  const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"};
  double ymax = 0;
  for (const auto& g : groups)
    for (double v : g.values) ymax = std::max(ymax, v);
  if (ymax <= 0) ymax = 1;
  ymax *= 1.08;
  auto Y = [&](double y) { return h - mb - y / ymax * (h - mt - mb); };
  double gw = (w - ml - mr) / std::max<size_t>(groups.size(), 1);

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write svg: " + path);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" viewBox=\"0 0 " << w << " " << h << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
      << detail::escape(title) << "</text>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\""
      << h - mb << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double yv = ymax * i / 4.0;
    out << "<text x=\"" << ml - 8 << "\" y=\"" << detail::fmt(Y(yv) + 4)
        << "\" text-anchor=\"end\" font-size=\"11\">" << detail::fmt(yv) << "</text>\n";
  }
  size_t ns = series_names.size();
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    double x0 = ml + gw * double(gi);
    double bw = gw * 0.8 / double(std::max<size_t>(ns, 1));
    for (size_t si = 0; si < groups[gi].values.size() && si < ns; ++si) {
      double v = groups[gi].values[si];
      out << "<rect x=\"" << detail::fmt(x0 + gw * 0.1 + bw * double(si)) << "\" y=\""
          << detail::fmt(Y(v)) << "\" width=\"" << detail::fmt(bw * 0.92) << "\" height=\""
          << detail::fmt(Y(0) - Y(v)) << "\" fill=\"" << palette[si % 4] << "\"/>\n";
    }
    out << "<text x=\"" << detail::fmt(x0 + gw / 2) << "\" y=\"" << h - mb + 18
        << "\" text-anchor=\"middle\" font-size=\"11\">" << detail::escape(groups[gi].label)
        << "</text>\n";
  }
  for (size_t si = 0; si < ns; ++si) {
    double ly = mt + 16.0 * double(si);
    out << "<rect x=\"" << w - mr + 10 << "\" y=\"" << ly - 9
        << "\" width=\"10\" height=\"10\" fill=\"" << palette[si % 4] << "\"/>\n"
        << "<text x=\"" << w - mr + 26 << "\" y=\"" << ly << "\" font-size=\"12\">"
        << detail::escape(series_names[si]) << "</text>\n";
  }
  out << "<text x=\"18\" y=\"" << (mt + h - mb) / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
      << (mt + h - mb) / 2 << ")\">" << detail::escape(y_label) << "</text>\n";
  out << "</svg>\n";
}

}  // namespace minidisc::svg
