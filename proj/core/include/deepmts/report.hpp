#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace deepmts::report {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Standalone SVG line chart. Non-finite points are skipped.
std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series);

/// Reads a CSV into rows of cells (header included).
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);
/// Fixed-width rendering of CSV rows.
std::string format_table(const std::vector<std::vector<std::string>>& rows);

/// Writes report.txt and plots/*.svg into run_dir and returns the text. Throws
/// ValidationError("incomplete run ...") when there is nothing to report.
std::string write_report(const std::filesystem::path& run_dir);

}  // namespace deepmts::report
