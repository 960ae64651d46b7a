#include "deepmts/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "deepmts/error.hpp"
#include "deepmts/train.hpp"

namespace deepmts::report {

namespace {

constexpr const char* kColours[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace

std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series) {
  constexpr double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title) << "</text>\n"
    << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
    o << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n"
      << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv) << "</text>\n";
  }
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n"
    << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (T + H - B) / 2
    << ")\">" << escape(y_label) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* colour = kColours[s % std::size(kColours)];
    o << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < std::min(series[s].x.size(), series[s].y.size()); ++i) {
      if (!std::isfinite(series[s].x[i]) || !std::isfinite(series[s].y[i])) continue;
      o << px(series[s].x[i]) << ',' << py(series[s].y[i]) << ' ';
    }
    o << "\"/>\n<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (s + 1) << "\" fill=\"" << colour << "\">"
      << escape(series[s].name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string format_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (width.size() <= c) width.push_back(0);
      width[c] = std::max(width[c], r[c].size());
    }
  std::ostringstream o;
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      o << r[c];
      if (c + 1 < r.size()) o << std::string(width[c] - r[c].size() + 2, ' ');
    }
    o << '\n';
  }
  return o.str();
}

std::string write_report(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(run_dir)) throw ValidationError("incomplete run: " + run_dir.string() + " is not a directory");
  std::vector<std::pair<std::size_t, fs::path>> folds;
  for (std::size_t k = 0; k < 5; ++k) {
    const auto t = run_dir / ("fold" + std::to_string(k)) / "trajectory.csv";
    if (fs::exists(t)) folds.emplace_back(k, t);
  }
  const auto tables = run_dir / "tables";
  const bool has_tables = fs::exists(tables / "table2.csv");
  if (folds.empty() && !has_tables) {
    throw ValidationError("incomplete run: no fold trajectories or tables under " + run_dir.string());
  }

  std::ostringstream text;
  text << "run: " << run_dir.string() << "\n";
  if (fs::exists(run_dir / "config")) {
    std::ifstream cfg(run_dir / "config");
    std::string line;
    while (std::getline(cfg, line)) {
      if (line.rfind("variant", 0) == 0 || line.rfind("backbone", 0) == 0 || line.rfind("csn_input", 0) == 0 ||
          line.rfind("iterations", 0) == 0 || line.rfind("seed", 0) == 0) {
        text << "  " << line << '\n';
      }
    }
  }

  if (!folds.empty()) {
    fs::create_directories(run_dir / "plots");
    std::vector<Series> loss, cidx, dsc;
    for (const auto& [k, path] : folds) {
      const auto traj = train::read_trajectory(path);
      Series l{"fold" + std::to_string(k), {}, {}}, c = l, d = l;
      for (const auto& p : traj) {
        l.x.push_back(double(p.iteration));
        l.y.push_back(p.loss);
        c.x.push_back(double(p.iteration));
        c.y.push_back(p.val_c_index);
        d.x.push_back(double(p.iteration));
        d.y.push_back(p.val_dsc);
      }
      loss.push_back(std::move(l));
      cidx.push_back(std::move(c));
      dsc.push_back(std::move(d));
    }
    const auto write = [&](const std::string& file, const std::string& svg) {
      std::ofstream out(run_dir / "plots" / file);
      if (!out) throw RuntimeFailure("cannot write plot " + file);
      out << svg;
    };
    write("loss.svg", line_plot_svg("Training loss", "iteration", "loss", loss));
    write("val_c_index.svg", line_plot_svg("Validation C-index", "iteration", "C-index", cidx));
    write("val_dsc.svg", line_plot_svg("Validation DSC", "iteration", "DSC", dsc));
    text << "\nfolds with trajectories: " << folds.size() << "\n";
  }

  if (fs::exists(run_dir / "summary.csv")) {
    auto rows = read_csv(run_dir / "summary.csv");
    text << "\nsummary\n" << format_table(rows);
  }
  for (const char* t : {"table2.csv", "table3.csv", "table4.csv"}) {
    if (fs::exists(tables / t)) text << '\n' << t << '\n' << format_table(read_csv(tables / t));
  }
  std::ofstream out(run_dir / "report.txt");
  if (!out) throw RuntimeFailure("cannot write report");
  out << text.str();
  return text.str();
}

}  // namespace deepmts::report
