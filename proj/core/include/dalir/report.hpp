#pragma once

#include <string>
#include <vector>

#include "dalir/bench.hpp"

namespace dalir {

// CSV emitters; every file is deterministic (no wall-clock fields except in
// latency.csv, which is never hashed)
void write_metrics_csv(const std::string& path, const std::vector<CellResult>& cells);
void write_latency_csv(const std::string& path, const std::vector<LatencyRow>& rows);
void write_data_scale_csv(const std::string& path, const DataScaleResult& r);
void write_action_cond_csv(const std::string& path, const ActionCondResult& r);
void write_supervision_csv(const std::string& path, const SupervisionResult& r);
void write_cand_scale_csv(const std::string& path, const CandScaleResult& r);
// per-trajectory score sequences for the diagnostics chart
void write_score_traj_csv(const std::string& path, const Imagination& imag,
                          const Dataset& holdout, float gamma, int max_per_label);

uint64_t file_content_hash(const std::string& path);

struct ChartSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<ChartSeries>& series);
std::string svg_bar_chart(const std::string& title, const std::string& y_label,
                          const std::vector<std::string>& labels,
                          const std::vector<double>& values);

// Renders report.md plus SVG charts from the CSV files in results_dir.
// Throws if the directory holds none of the known CSVs. Output depends only
// on the inputs, so regeneration is byte-identical.
void emit_report(const std::string& results_dir, const std::string& out_dir);

}  // namespace dalir
