#pragma once

// Machine-readable outputs: metrics reports (JSON and one-row CSV), training
// logs, downstream result rows, and aggregation across runs with 95% CIs.
//
// Metrics CSV columns:
//   target_id,kind,J,m,N,mse,ev,rel_sparsity,diversity@<tau>...,connectivity,stability,config_hash,version
// Downstream CSV columns:
//   target_id,kind,J,task,L,metric,value,seed,config_hash,version

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saens/metrics.hpp"
#include "saens/train.hpp"

namespace saens {

struct Provenance {
  std::string config_hash;
  std::string version{kVersion};

  nlohmann::json to_json() const { return {{"config_hash", config_hash}, {"version", version}}; }
};

// Shortest text that round-trips the double.
inline std::string fmt_double(double v) {
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string fmt_tau(double tau) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", tau);
  return buf;
}

inline std::string csv_safe(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = '_';
  return s;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot create " + p.string());
  out << text;
  if (!out) throw IoError("failed writing " + p.string());
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Metrics reports

inline nlohmann::json to_json(const MetricsReport& r, const Provenance& prov) {
  nlohmann::json div = nlohmann::json::object();
  for (const auto& [tau, count] : r.diversity) div[fmt_tau(tau)] = count;
  nlohmann::json j{{"target_id", r.target_id},
                   {"kind", r.kind},
                   {"J", r.J},
                   {"m", r.m},
                   {"N", r.N},
                   {"mse", r.mse},
                   {"explained_variance", r.explained_variance},
                   {"relative_sparsity", r.relative_sparsity},
                   {"diversity", div},
                   {"connectivity", r.connectivity},
                   {"coactivation_density", r.coactivation_density},
                   {"eval_split", r.eval_split},
                   {"provenance", prov.to_json()}};
  j["stability"] = r.stability ? nlohmann::json(*r.stability) : nlohmann::json(nullptr);
  return j;
}

inline std::string metrics_csv_header(const MetricsReport& r) {
  std::string h = "target_id,kind,J,m,N,mse,ev,rel_sparsity";
  for (const auto& [tau, count] : r.diversity) h += ",diversity@" + fmt_tau(tau);
  return h + ",connectivity,stability,config_hash,version";
}

inline std::string metrics_csv_row(const MetricsReport& r, const Provenance& prov) {
  std::string row = csv_safe(r.target_id) + "," + r.kind + "," + std::to_string(r.J) + "," + std::to_string(r.m) + "," +
                    std::to_string(r.N) + "," + fmt_double(r.mse) + "," + fmt_double(r.explained_variance) + "," +
                    fmt_double(r.relative_sparsity);
  for (const auto& [tau, count] : r.diversity) row += "," + std::to_string(count);
  row += "," + fmt_double(r.connectivity) + "," + (r.stability ? fmt_double(*r.stability) : std::string());
  return row + "," + prov.config_hash + "," + prov.version;
}

inline std::string metrics_csv(const MetricsReport& r, const Provenance& prov) {
  return metrics_csv_header(r) + "\n" + metrics_csv_row(r, prov) + "\n";
}

// ---------------------------------------------------------------------------
// Training logs

inline std::string train_log_csv(const std::vector<std::vector<TrainLogRow>>& logs, const Provenance& prov) {
  std::string out =
      "member,step,epoch,lambda,total_loss,recon_loss,sparsity_term,mean_l0,ev_estimate,dead_features,config_hash,version\n";
  for (std::size_t j = 0; j < logs.size(); ++j) {
    for (const auto& r : logs[j]) {
      out += std::to_string(j) + "," + std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt_double(r.lambda) +
             "," + fmt_double(r.total_loss) + "," + fmt_double(r.recon_loss) + "," + fmt_double(r.sparsity_term) + "," +
             fmt_double(r.mean_l0) + "," + fmt_double(r.ev_estimate) + "," + std::to_string(r.dead_features) + "," +
             prov.config_hash + "," + prov.version + "\n";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Downstream results

struct ResultRow {
  std::string target_id;
  std::string kind;
  Index J = 1;
  std::string task;
  Index L = 0;
  std::string metric;  // accuracy | s_shift | ...
  double value = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr const char* kResultCsvHeader = "target_id,kind,J,task,L,metric,value,seed,config_hash,version";

inline std::string results_csv(const std::vector<ResultRow>& rows, const Provenance& prov) {
  std::string out = std::string(kResultCsvHeader) + "\n";
  for (const auto& r : rows) {
    out += csv_safe(r.target_id) + "," + r.kind + "," + std::to_string(r.J) + "," + csv_safe(r.task) + "," +
           std::to_string(r.L) + "," + r.metric + "," + fmt_double(r.value) + "," + std::to_string(r.seed) + "," +
           prov.config_hash + "," + prov.version + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

struct AggregateRow {
  std::string method;
  Index J = 1;
  std::string metric;
  Index runs = 0;
  double mean = 0.0;
  std::optional<double> ci_low;
  std::optional<double> ci_high;
};

struct MeanCi {
  double mean = 0.0;
  std::optional<double> half_width;  // absent for a single run
};

// Normal-approximation 95% interval: mean +- 1.96 * sd / sqrt(R), sd with R - 1.
inline MeanCi mean_ci95(const std::vector<double>& v) {
  require(!v.empty(), "mean_ci95: no values");
  MeanCi out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  if (v.size() >= 2) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    out.half_width = 1.96 * sd / std::sqrt(static_cast<double>(v.size()));
  }
  return out;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

// Groups every metrics CSV and downstream CSV under `dir` by (method, J, metric).
// Files with other headers are ignored; a metrics file whose columns disagree
// with the first one seen is a schema mismatch.
inline std::vector<AggregateRow> aggregate_results(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("results directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  std::map<std::tuple<std::string, Index, std::string>, std::vector<double>> groups;
  std::optional<std::vector<std::string>> metrics_schema;
  for (const auto& f : files) {
    std::istringstream in(read_text(f));
    std::string line;
    if (!std::getline(in, line)) continue;
    const auto header = detail::split_csv_line(line);
    const bool is_metrics = header.size() > 8 && header[0] == "target_id" && header[5] == "mse";
    const bool is_result = line == kResultCsvHeader;
    if (!is_metrics && !is_result) continue;
    if (is_metrics) {
      if (!metrics_schema) metrics_schema = header;
      if (*metrics_schema != header) throw ValidationError("schema mismatch in " + f.string());
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cells = detail::split_csv_line(line);
      if (cells.size() != header.size()) throw ValidationError("schema mismatch (column count) in " + f.string());
      const std::string method = cells[1];
      const Index J = std::stol(cells[2]);
      if (is_metrics) {
        for (std::size_t c = 5; c + 2 < header.size(); ++c) {
          if (cells[c].empty()) continue;
          groups[{method, J, header[c]}].push_back(std::stod(cells[c]));
        }
      } else {
        const std::string metric = cells[5] + "[" + cells[3] + "]@L=" + cells[4];
        groups[{method, J, metric}].push_back(std::stod(cells[6]));
      }
    }
  }
  std::vector<AggregateRow> out;
  for (const auto& [key, values] : groups) {
    AggregateRow r;
    std::tie(r.method, r.J, r.metric) = key;
    r.runs = static_cast<Index>(values.size());
    const MeanCi ci = mean_ci95(values);
    r.mean = ci.mean;
    if (ci.half_width) {
      r.ci_low = ci.mean - *ci.half_width;
      r.ci_high = ci.mean + *ci.half_width;
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string aggregate_csv(const std::vector<AggregateRow>& rows, const Provenance& prov) {
  std::string out = "method,J,metric,runs,mean,ci_low,ci_high,config_hash,version\n";
  for (const auto& r : rows) {
    out += r.method + "," + std::to_string(r.J) + "," + r.metric + "," + std::to_string(r.runs) + "," + fmt_double(r.mean) +
           "," + (r.ci_low ? fmt_double(*r.ci_low) : "") + "," + (r.ci_high ? fmt_double(*r.ci_high) : "") + "," +
           prov.config_hash + "," + prov.version + "\n";
  }
  return out;
}

}  // namespace saens
