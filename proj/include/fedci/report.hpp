#pragma once

// Artifact serialization. CSV is the canonical numeric format: fixed column
// order, fixed 12-significant-digit rendering, newline endings, no
// timestamps, no absolute paths — re-running a scenario with the same seed
// must reproduce every file byte for byte. JSON mirrors the same content plus
// the verdicts, under an explicit schema_version for the merge tool.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedci/errors.hpp"
#include "fedci/mc.hpp"
#include "fedci/theory.hpp"

namespace fedci {

constexpr int kReportSchemaVersion = 1;

inline std::string g12(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", x);
  return buf;
}

namespace reportdetail {

inline std::vector<double> to_std(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace reportdetail

// Long-format summary: one row per (estimator, coordinate, metric), with the
// MC standard error filled where one is defined, plus a failures row per
// estimator.
inline std::string report_csv(const McResult& res) {
  std::string out = "estimator,coord,metric,value,mc_se\n";
  for (const auto& s : res.summaries) {
    const int C = static_cast<int>(s.mean.size());
    for (int c = 0; c < C; ++c) {
      const std::string prefix = s.name + "," + std::to_string(c) + ",";
      out += prefix + "mean," + g12(s.mean[c]) + ",\n";
      out += prefix + "bias," + g12(s.bias[c]) + "," + g12(s.bias_mcse[c]) + "\n";
      out += prefix + "variance," + g12(s.variance[c]) + "," +
             g12(s.variance_mcse[c]) + "\n";
      out += prefix + "mse," + g12(s.mse[c]) + ",\n";
      out += prefix + "coverage," + g12(s.coverage[c]) + ",\n";
    }
    out += s.name + ",,failures," + std::to_string(s.failures) + ",\n";
  }
  return out;
}

inline std::string predictions_csv(const McResult& res,
                                   const std::vector<AsymptoticPrediction>& preds) {
  std::string out = "estimator,coord,time,bias,variance\n";
  for (const auto& p : preds) {
    const int C = static_cast<int>(p.variance.size());
    const int bias_len = static_cast<int>(p.bias.size());
    for (int c = 0; c < C; ++c) {
      out += estimator_name(p.kind) + "," + std::to_string(c) + ",";
      if (static_cast<int>(p.times.size()) == C) out += g12(p.times[c]);
      out += ",";
      const int bi = std::min(c, bias_len - 1);
      out += (p.bias_known && bi >= 0 ? g12(p.bias[bi]) : std::string("nan")) +
             "," + g12(p.variance[c]) + "\n";
    }
  }
  (void)res;
  return out;
}

inline nlohmann::json report_json(const std::string& scenario,
                                  const McResult& res,
                                  const std::vector<AsymptoticPrediction>& preds,
                                  const std::vector<TheoremVerdict>& verdicts) {
  using nlohmann::json;
  json j;
  j["schema_version"] = kReportSchemaVersion;
  j["scenario"] = scenario;
  j["problem"] = problem_name(res.problem);
  j["seed"] = res.seed;
  j["replicates"] = res.replicates;
  j["target"] = res.target_note;
  j["truth"] = reportdetail::to_std(res.truth);
  j["grid"] = reportdetail::to_std(res.grid);
  j["estimators"] = json::array();
  for (std::size_t i = 0; i < res.summaries.size(); ++i) {
    const auto& s = res.summaries[i];
    const auto& run = res.runs[i];
    json e;
    e["name"] = s.name;
    e["replicates_ok"] = s.replicates_ok;
    e["failures"] = s.failures;
    e["first_error"] = s.first_error;
    e["mean"] = reportdetail::to_std(s.mean);
    e["bias"] = reportdetail::to_std(s.bias);
    e["bias_mcse"] = reportdetail::to_std(s.bias_mcse);
    e["variance"] = reportdetail::to_std(s.variance);
    e["variance_mcse"] = reportdetail::to_std(s.variance_mcse);
    e["mse"] = reportdetail::to_std(s.mse);
    e["coverage"] = reportdetail::to_std(s.coverage);
    if (run.log) {
      e["rounds"] = run.log->rounds();
      e["scalars"] = run.log->total_scalars();
      e["protocol"] = run.log->protocol;
    }
    j["estimators"].push_back(e);
  }
  j["predictions"] = json::array();
  for (const auto& p : preds) {
    json e;
    e["estimator"] = estimator_name(p.kind);
    e["bias_known"] = p.bias_known;
    e["bias"] = reportdetail::to_std(p.bias);
    e["variance"] = reportdetail::to_std(p.variance);
    if (p.times.size() > 0) e["times"] = reportdetail::to_std(p.times);
    j["predictions"].push_back(e);
  }
  j["verdicts"] = nlohmann::json::array();
  for (const auto& v : verdicts) {
    json e;
    e["id"] = v.id;
    e["claim"] = v.claim;
    e["applicable"] = v.applicable;
    e["pass"] = v.pass;
    e["margin"] = v.margin;
    e["detail"] = v.detail;
    j["verdicts"].push_back(e);
  }
  return j;
}

inline nlohmann::json roundlogs_json(const McResult& res) {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["logs"] = nlohmann::json::array();
  for (const auto& run : res.runs) {
    if (!run.log) continue;
    nlohmann::json e = run.log->to_json();
    e["estimator"] = estimator_name(run.kind);
    j["logs"].push_back(e);
  }
  return j;
}

inline std::string verdicts_text(const std::vector<TheoremVerdict>& verdicts) {
  std::string out;
  bool all_pass = true;
  for (const auto& v : verdicts) {
    if (!v.applicable) {
      out += "(" + v.id + ") n/a   " + v.claim + "\n";
      continue;
    }
    out += "(" + v.id + ") " + (v.pass ? "PASS" : "FAIL") + "  " + v.claim +
           "  [margin " + g12(v.margin) + "]\n";
    if (!v.detail.empty()) out += "      " + v.detail + "\n";
    all_pass = all_pass && v.pass;
  }
  out += all_pass ? "result: all applicable checks passed\n"
                  : "result: CHECK FAILURES\n";
  return out;
}

// Side-by-side comparison of ≥1 report.json documents: estimators as rows,
// per-input {bias, variance, mse, predicted variance, rounds, scalars}
// blocks, and for multiple inputs a trailing max-abs-difference row against
// the first input. Coordinate 0 is shown for multi-coordinate estimands.
struct MergedReport {
  std::string text;
  std::string csv;
};

inline MergedReport merge_reports(const std::vector<nlohmann::json>& inputs) {
  using nlohmann::json;
  if (inputs.empty()) throw ConfigError("merge: no report files");
  for (const auto& r : inputs) {
    if (!r.contains("schema_version") ||
        r["schema_version"].get<int>() != kReportSchemaVersion)
      throw ConfigError("merge: schema_version mismatch between inputs");
  }
  std::vector<std::string> names;
  for (const auto& r : inputs)
    for (const auto& e : r["estimators"]) {
      const std::string n = e["name"].get<std::string>();
      bool seen = false;
      for (const auto& have : names) seen = seen || have == n;
      if (!seen) names.push_back(n);
    }

  struct Cell {
    bool present = false;
    double bias = 0, variance = 0, mse = 0, pred_var = 0;
    bool has_pred = false;
    long rounds = -1, scalars = -1;
  };
  const std::size_t I = inputs.size();
  std::vector<std::vector<Cell>> grid(names.size(), std::vector<Cell>(I));
  for (std::size_t i = 0; i < I; ++i) {
    const auto& r = inputs[i];
    for (const auto& e : r["estimators"]) {
      const std::string n = e["name"].get<std::string>();
      std::size_t row = 0;
      while (names[row] != n) ++row;
      Cell& c = grid[row][i];
      c.present = true;
      c.bias = e["bias"][0].is_null() ? std::nan("") : e["bias"][0].get<double>();
      c.variance = e["variance"][0].is_null() ? std::nan("")
                                              : e["variance"][0].get<double>();
      c.mse = e["mse"][0].is_null() ? std::nan("") : e["mse"][0].get<double>();
      if (e.contains("rounds")) c.rounds = e["rounds"].get<long>();
      if (e.contains("scalars")) c.scalars = e["scalars"].get<long>();
      for (const auto& p : r["predictions"]) {
        if (p["estimator"].get<std::string>() == n) {
          c.pred_var = p["variance"][0].get<double>();
          c.has_pred = true;
        }
      }
    }
  }

  MergedReport out;
  out.csv = "estimator,input,bias,variance,mse,predicted_variance,rounds,"
            "scalars\n";
  auto cell_fields = [](const Cell& c) {
    std::string f = g12(c.bias) + "," + g12(c.variance) + "," + g12(c.mse) +
                    "," + (c.has_pred ? g12(c.pred_var) : "") + "," +
                    (c.rounds >= 0 ? std::to_string(c.rounds) : "") + "," +
                    (c.scalars >= 0 ? std::to_string(c.scalars) : "");
    return f;
  };
  for (std::size_t row = 0; row < names.size(); ++row)
    for (std::size_t i = 0; i < I; ++i)
      if (grid[row][i].present)
        out.csv += names[row] + "," + std::to_string(i) + "," +
                   cell_fields(grid[row][i]) + "\n";

  char line[256];
  out.text += "estimator            input        bias       variance"
              "            mse      pred var  rounds  scalars\n";
  for (std::size_t row = 0; row < names.size(); ++row) {
    for (std::size_t i = 0; i < I; ++i) {
      const Cell& c = grid[row][i];
      if (!c.present) continue;
      std::snprintf(line, sizeof line,
                    "%-20s %5zu %11.4g %14.6g %14.6g %13s %7s %8s\n",
                    names[row].c_str(), i, c.bias, c.variance, c.mse,
                    c.has_pred ? g12(c.pred_var).c_str() : "-",
                    c.rounds >= 0 ? std::to_string(c.rounds).c_str() : "-",
                    c.scalars >= 0 ? std::to_string(c.scalars).c_str() : "-");
      out.text += line;
    }
  }
  if (I > 1) {
    double dbias = 0, dvar = 0, dmse = 0;
    for (std::size_t row = 0; row < names.size(); ++row) {
      const Cell& base = grid[row][0];
      if (!base.present) continue;
      for (std::size_t i = 1; i < I; ++i) {
        const Cell& c = grid[row][i];
        if (!c.present) continue;
        dbias = std::max(dbias, std::abs(c.bias - base.bias));
        dvar = std::max(dvar, std::abs(c.variance - base.variance));
        dmse = std::max(dmse, std::abs(c.mse - base.mse));
      }
    }
    std::snprintf(line, sizeof line, "%-20s %5s %11.4g %14.6g %14.6g\n",
                  "max-abs-diff", "-", dbias, dvar, dmse);
    out.text += line;
    out.csv += "max-abs-diff,," + g12(dbias) + "," + g12(dvar) + "," +
               g12(dmse) + ",,,\n";
  }
  return out;
}

}  // namespace fedci
