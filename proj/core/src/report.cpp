#include "dalir/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "dalir/checkpoint.hpp"

namespace dalir {

namespace fsys = std::filesystem;

namespace {

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string hex64s(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  fsys::path p(path);
  if (p.has_parent_path()) fsys::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  return out;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&')
      out += "&amp;";
    else if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else
      out += c;
  }
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int col(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    throw std::runtime_error("missing CSV column '" + name + "'");
  }
  double num(size_t row, const std::string& name) const {
    return std::stod(rows[row][size_t(col(name))]);
  }
  const std::string& str(size_t row, const std::string& name) const {
    return rows[row][size_t(col(name))];
  }
};

bool load_csv(const std::string& path, CsvTable& t) {
  std::ifstream in(path);
  if (!in) return false;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      t.rows.push_back(std::move(cells));
    }
  }
  return !t.header.empty();
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<CellResult>& cells) {
  auto out = open_out(path);
  out << "task,method,n_cand,seed_idx,episodes,successes,success_rate,ci_lo,ci_hi,mean_steps,"
         "policy_hash,imag_hash,config_hash\n";
  for (const auto& c : cells) {
    out << task_name(c.task) << ',' << rerank_method_name(c.method) << ',' << c.n_cand << ','
        << c.seed_idx << ',' << c.episodes << ',' << c.successes << ','
        << fmt(c.success_rate) << ',' << fmt(c.ci_lo) << ',' << fmt(c.ci_hi) << ','
        << fmt(c.mean_steps, 2) << ',' << hex64s(c.policy_hash) << ',' << hex64s(c.imag_hash)
        << ',' << hex64s(c.config_hash) << '\n';
  }
}

void write_latency_csv(const std::string& path, const std::vector<LatencyRow>& rows) {
  auto out = open_out(path);
  out << "backbone,method,n_cand,mean_ms,p50_ms,p95_ms,fps\n";
  for (const auto& r : rows)
    out << r.backbone << ',' << r.method << ',' << r.n_cand << ',' << fmt(r.mean_ms) << ','
        << fmt(r.p50_ms) << ',' << fmt(r.p95_ms) << ',' << fmt(r.fps, 2) << '\n';
}

void write_data_scale_csv(const std::string& path, const DataScaleResult& r) {
  auto out = open_out(path);
  out << "n_trajs,seed_idx,holdout_mse,holdout_hash\n";
  for (const auto& row : r.rows)
    out << row.n_trajs << ',' << row.seed_idx << ',' << fmt(row.holdout_mse, 6) << ','
        << hex64s(r.holdout_hash) << '\n';
}

void write_action_cond_csv(const std::string& path, const ActionCondResult& r) {
  auto out = open_out(path);
  out << "task,variant,holdout_mse\n";
  for (const auto& row : r.rows)
    out << task_name(row.task) << ',' << (row.ablated ? "ablated" : "conditioned") << ','
        << fmt(row.holdout_mse, 6) << '\n';
}

void write_supervision_csv(const std::string& path, const SupervisionResult& r) {
  auto out = open_out(path);
  out << "mode,task,seed_idx,n_cand,episodes,successes,success_rate\n";
  for (const auto& row : r.rows)
    out << row.mode << ',' << task_name(row.cell.task) << ',' << row.cell.seed_idx << ','
        << row.cell.n_cand << ',' << row.cell.episodes << ',' << row.cell.successes << ','
        << fmt(row.cell.success_rate) << '\n';
}

void write_cand_scale_csv(const std::string& path, const CandScaleResult& r) {
  auto out = open_out(path);
  out << "n_cand,seed_idx,episodes,successes,success_rate\n";
  for (const auto& c : r.cells)
    out << c.n_cand << ',' << c.seed_idx << ',' << c.episodes << ',' << c.successes << ','
        << fmt(c.success_rate) << '\n';
}

void write_score_traj_csv(const std::string& path, const Imagination& imag,
                          const Dataset& holdout, float gamma, int max_per_label) {
  auto out = open_out(path);
  out << "traj,outcome,t,score,target\n";
  int n_succ = 0, n_fail = 0;
  for (size_t ti = 0; ti < holdout.trajs.size(); ++ti) {
    const Trajectory& tr = holdout.trajs[ti];
    int& n = tr.y_terminal ? n_succ : n_fail;
    if (n >= max_per_label) continue;
    n++;
    std::vector<float> seq = score_sequence(imag, tr);
    std::vector<float> tgt = mc_targets(tr, gamma);
    for (size_t t = 0; t < seq.size(); ++t)
      out << ti << ',' << (tr.y_terminal ? "success" : "fail") << ',' << t << ','
          << fmt(seq[t]) << ',' << fmt(tgt[t]) << '\n';
  }
}

uint64_t file_content_hash(const std::string& path) { return hash_file(path); }

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

struct Frame {
  double w = 640, h = 400;
  double ml = 64, mr = 20, mt = 36, mb = 48;
  double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
  double px(double x) const { return ml + (x - x_lo) / (x_hi - x_lo) * (w - ml - mr); }
  double py(double y) const { return h - mb - (y - y_lo) / (y_hi - y_lo) * (h - mt - mb); }
};

void chart_frame(std::ostringstream& svg, const Frame& f, const std::string& title,
                 const std::string& x_label, const std::string& y_label) {
  svg << "<rect x=\"0\" y=\"0\" width=\"" << f.w << "\" height=\"" << f.h
      << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << f.w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
      << xml_escape(title) << "</text>\n";
  svg << "<line x1=\"" << f.ml << "\" y1=\"" << f.h - f.mb << "\" x2=\"" << f.w - f.mr
      << "\" y2=\"" << f.h - f.mb << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << f.ml << "\" y1=\"" << f.mt << "\" x2=\"" << f.ml << "\" y2=\""
      << f.h - f.mb << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double v = f.y_lo + (f.y_hi - f.y_lo) * i / 4.0;
    double y = f.py(v);
    svg << "<line x1=\"" << f.ml - 4 << "\" y1=\"" << y << "\" x2=\"" << f.ml << "\" y2=\"" << y
        << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << f.ml - 8 << "\" y=\"" << y + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(v, 3) << "</text>\n";
  }
  svg << "<text x=\"" << (f.ml + f.w - f.mr) / 2 << "\" y=\"" << f.h - 10
      << "\" text-anchor=\"middle\" font-size=\"12\">" << xml_escape(x_label) << "</text>\n";
  svg << "<text x=\"14\" y=\"" << (f.mt + f.h - f.mb) / 2
      << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
      << (f.mt + f.h - f.mb) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
}

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<ChartSeries>& series) {
  Frame f;
  f.x_lo = 1e300;
  f.x_hi = -1e300;
  f.y_lo = 1e300;
  f.y_hi = -1e300;
  for (const auto& s : series)
    for (size_t i = 0; i < s.x.size(); ++i) {
      f.x_lo = std::min(f.x_lo, s.x[i]);
      f.x_hi = std::max(f.x_hi, s.x[i]);
      f.y_lo = std::min(f.y_lo, s.y[i]);
      f.y_hi = std::max(f.y_hi, s.y[i]);
    }
  if (f.x_lo >= f.x_hi) f.x_hi = f.x_lo + 1;
  if (f.y_lo >= f.y_hi) f.y_hi = f.y_lo + 1;
  double pad = (f.y_hi - f.y_lo) * 0.08;
  f.y_lo -= pad;
  f.y_hi += pad;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << f.w << ' ' << f.h
      << "\">\n";
  chart_frame(svg, f, title, x_label, y_label);
  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % 6];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < s.x.size(); ++i)
      svg << fmt(f.px(s.x[i]), 1) << ',' << fmt(f.py(s.y[i]), 1) << ' ';
    svg << "\"/>\n";
    for (size_t i = 0; i < s.x.size(); ++i)
      svg << "<circle cx=\"" << fmt(f.px(s.x[i]), 1) << "\" cy=\"" << fmt(f.py(s.y[i]), 1)
          << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    svg << "<text x=\"" << f.w - f.mr - 4 << "\" y=\"" << f.mt + 16 + 16 * double(si)
        << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << color << "\">"
        << xml_escape(s.name) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string svg_bar_chart(const std::string& title, const std::string& y_label,
                          const std::vector<std::string>& labels,
                          const std::vector<double>& values) {
  Frame f;
  f.x_lo = 0;
  f.x_hi = double(values.size());
  f.y_lo = 0;
  f.y_hi = 1e-12;
  for (double v : values) f.y_hi = std::max(f.y_hi, v);
  f.y_hi *= 1.1;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << f.w << ' ' << f.h
      << "\">\n";
  chart_frame(svg, f, title, "", y_label);
  for (size_t i = 0; i < values.size(); ++i) {
    double x0 = f.px(double(i) + 0.15), x1 = f.px(double(i) + 0.85);
    double y0 = f.py(values[i]), y1 = f.py(0.0);
    svg << "<rect x=\"" << fmt(x0, 1) << "\" y=\"" << fmt(y0, 1) << "\" width=\""
        << fmt(x1 - x0, 1) << "\" height=\"" << fmt(y1 - y0, 1) << "\" fill=\"" << kPalette[1]
        << "\"/>\n";
    svg << "<text x=\"" << fmt(f.px(double(i) + 0.5), 1) << "\" y=\"" << f.h - f.mb + 14
        << "\" text-anchor=\"middle\" font-size=\"10\">" << xml_escape(labels[i]) << "</text>\n";
    svg << "<text x=\"" << fmt(f.px(double(i) + 0.5), 1) << "\" y=\"" << fmt(y0 - 4, 1)
        << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt(values[i], 3) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void emit_report(const std::string& results_dir, const std::string& out_dir) {
  fsys::create_directories(out_dir);
  fsys::create_directories(out_dir + "/charts");
  std::ostringstream md;
  md << "# Evaluation report\n";
  bool any = false;

  CsvTable metrics;
  if (load_csv(results_dir + "/metrics.csv", metrics)) {
    any = true;
    // method -> (sum, count) of success rates
    std::map<std::string, std::pair<double, int>> agg;
    for (size_t r = 0; r < metrics.rows.size(); ++r) {
      auto& a = agg[metrics.str(r, "method")];
      a.first += metrics.num(r, "success_rate");
      a.second++;
    }
    md << "\n## Success rates\n\n| method | mean success | cells |\n|---|---|---|\n";
    std::vector<std::string> labels;
    std::vector<double> values;
    for (const auto& [m, a] : agg) {
      double mean = a.first / a.second;
      md << "| " << m << " | " << fmt(mean) << " | " << a.second << " |\n";
      labels.push_back(m);
      values.push_back(mean);
    }
    auto svg = open_out(out_dir + "/charts/success_by_method.svg");
    svg << svg_bar_chart("Mean success by method", "success rate", labels, values);
    md << "\n![success](charts/success_by_method.svg)\n";
    if (!metrics.rows.empty()) {
      md << "\nConfig hash: `" << metrics.str(0, "config_hash") << "`\n";
    }
  }

  CsvTable lat;
  if (load_csv(results_dir + "/latency.csv", lat)) {
    any = true;
    md << "\n## Latency\n\n| backbone | method | n_cand | mean ms | p50 | p95 | fps |\n"
          "|---|---|---|---|---|---|---|\n";
    std::vector<ChartSeries> series;
    std::map<std::string, size_t> series_idx;
    for (size_t r = 0; r < lat.rows.size(); ++r) {
      md << "| " << lat.str(r, "backbone") << " | " << lat.str(r, "method") << " | "
         << lat.str(r, "n_cand") << " | " << fmt(lat.num(r, "mean_ms"), 3) << " | "
         << fmt(lat.num(r, "p50_ms"), 3) << " | " << fmt(lat.num(r, "p95_ms"), 3) << " | "
         << fmt(lat.num(r, "fps"), 1) << " |\n";
      if (lat.str(r, "method") != "latent") continue;
      std::string key = lat.str(r, "backbone");
      if (!series_idx.count(key)) {
        series_idx[key] = series.size();
        series.push_back({key, {}, {}});
      }
      auto& s = series[series_idx[key]];
      s.x.push_back(lat.num(r, "n_cand"));
      s.y.push_back(lat.num(r, "mean_ms"));
    }
    if (!series.empty()) {
      auto svg = open_out(out_dir + "/charts/latency_vs_candidates.svg");
      svg << svg_line_chart("Per-decision latency vs candidate count", "N_cand", "ms", series);
      md << "\n![latency](charts/latency_vs_candidates.svg)\n";
    }
  }

  CsvTable cand;
  if (load_csv(results_dir + "/cand_scale.csv", cand)) {
    any = true;
    std::map<int, std::pair<double, int>> agg;
    for (size_t r = 0; r < cand.rows.size(); ++r) {
      auto& a = agg[int(cand.num(r, "n_cand"))];
      a.first += cand.num(r, "success_rate");
      a.second++;
    }
    ChartSeries s{"latent rerank", {}, {}};
    md << "\n## Candidate scaling\n\n| n_cand | mean success |\n|---|---|\n";
    for (const auto& [n, a] : agg) {
      double mean = a.first / a.second;
      md << "| " << n << " | " << fmt(mean) << " |\n";
      s.x.push_back(n);
      s.y.push_back(mean);
    }
    auto svg = open_out(out_dir + "/charts/success_vs_candidates.svg");
    svg << svg_line_chart("Success vs candidate count", "N_cand", "success rate", {s});
    md << "\n![candidates](charts/success_vs_candidates.svg)\n";
  }

  CsvTable ds;
  if (load_csv(results_dir + "/data_scale.csv", ds)) {
    any = true;
    std::map<int, std::pair<double, int>> agg;
    for (size_t r = 0; r < ds.rows.size(); ++r) {
      auto& a = agg[int(ds.num(r, "n_trajs"))];
      a.first += ds.num(r, "holdout_mse");
      a.second++;
    }
    md << "\n## Mixed-data scaling (held-out latent MSE)\n\n| trajectories | mse |\n|---|---|\n";
    ChartSeries s{"holdout mse", {}, {}};
    for (const auto& [n, a] : agg) {
      md << "| " << n << " | " << fmt(a.first / a.second, 6) << " |\n";
      s.x.push_back(n);
      s.y.push_back(a.first / a.second);
    }
    auto svg = open_out(out_dir + "/charts/mse_vs_data.svg");
    svg << svg_line_chart("Held-out latent MSE vs mixed trajectories", "trajectories", "MSE", {s});
    md << "\n![data](charts/mse_vs_data.svg)\n";
  }

  CsvTable ac;
  if (load_csv(results_dir + "/action_cond.csv", ac)) {
    any = true;
    md << "\n## Action conditioning\n\n| task | variant | holdout mse |\n|---|---|---|\n";
    for (size_t r = 0; r < ac.rows.size(); ++r)
      md << "| " << ac.str(r, "task") << " | " << ac.str(r, "variant") << " | "
         << fmt(ac.num(r, "holdout_mse"), 6) << " |\n";
  }

  CsvTable sup;
  if (load_csv(results_dir + "/supervision.csv", sup)) {
    any = true;
    std::map<std::string, std::pair<double, int>> agg;
    for (size_t r = 0; r < sup.rows.size(); ++r) {
      auto& a = agg[sup.str(r, "mode")];
      a.first += sup.num(r, "success_rate");
      a.second++;
    }
    md << "\n## Scorer supervision\n\n| mode | mean success |\n|---|---|\n";
    for (const auto& [m, a] : agg) md << "| " << m << " | " << fmt(a.first / a.second) << " |\n";
  }

  CsvTable traj;
  if (load_csv(results_dir + "/score_traj.csv", traj)) {
    any = true;
    std::map<std::string, ChartSeries> per_traj;
    for (size_t r = 0; r < traj.rows.size(); ++r) {
      std::string key = traj.str(r, "outcome") + " #" + traj.str(r, "traj");
      auto& s = per_traj[key];
      s.name = key;
      s.x.push_back(traj.num(r, "t"));
      s.y.push_back(traj.num(r, "score"));
    }
    std::vector<ChartSeries> series;
    for (auto& [k, s] : per_traj) series.push_back(std::move(s));
    auto svg = open_out(out_dir + "/charts/score_trajectories.svg");
    svg << svg_line_chart("Predicted success score along held-out episodes", "t", "score",
                          series);
    md << "\n## Score trajectories\n\n![scores](charts/score_trajectories.svg)\n";
  }

  if (!any) throw std::runtime_error("no result CSVs found in '" + results_dir + "'");
  auto out = open_out(out_dir + "/report.md");
  out << md.str();
}

}  // namespace dalir
