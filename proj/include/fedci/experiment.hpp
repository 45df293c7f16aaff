#pragma once

// End-to-end scenario execution: validate the config, run the replicated
// experiment, build the matching asymptotic predictions (running the large-n
// site-bias oracle for survival problems), check the theorem verdicts, and
// write the artifact set into the output directory.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "fedci/config.hpp"
#include "fedci/mc.hpp"
#include "fedci/report.hpp"
#include "fedci/theory.hpp"

namespace fedci {

struct ExperimentArtifacts {
  ExperimentConfig config;
  McResult result;
  std::vector<AsymptoticPrediction> predictions;
  std::vector<TheoremVerdict> verdicts;
  std::optional<SiteBiasEstimate> site_bias;
};

namespace expdetail {

inline bool has_estimator(const McConfig& mc, EstimatorKind k) {
  for (EstimatorKind e : mc.estimators)
    if (e == k) return true;
  return false;
}

inline Eigen::VectorXd dl_tau2_by_time(const SiteBiasEstimate& sb,
                                       const Eigen::VectorXd& truth,
                                       const std::vector<double>& nks) {
  const int K = static_cast<int>(nks.size());
  const int G = static_cast<int>(truth.size());
  Eigen::VectorXd tau2 = Eigen::VectorXd::Zero(G);
  for (int g = 0; g < G; ++g) {
    std::vector<AteEstimate> ests;
    for (int k = 0; k < K; ++k) {
      AteEstimate e;
      e.value = truth[g] + sb.delta(k, g);
      e.variance = std::max(sb.variance_curve[k][g] / nks[k], 1e-12);
      e.n = nks[k];
      ests.push_back(e);
    }
    try {
      tau2[g] = estimate_tau2(ests);
    } catch (const DegenerateWeights&) {
      tau2[g] = 0.0;
    }
  }
  return tau2;
}

}  // namespace expdetail

// Asymptotic predictions for every estimator in the run that has a theory
// row. Survival problems first estimate the per-site limits (delta_k, the
// information matrices, b_k(t) and V_k(t)) with the oracle; the estimate is
// stored in `site_bias` so reports can show it.
inline std::vector<AsymptoticPrediction> build_predictions(
    const McConfig& mc, std::optional<SiteBiasEstimate>& site_bias) {
  std::vector<AsymptoticPrediction> preds;
  if (mc.problem == ProblemKind::Linear) {
    for (EstimatorKind k : mc.estimators)
      preds.push_back(v_infinity_linear(k, mc.linear, mc.local_site));
    return preds;
  }

  site_bias = estimate_site_bias(mc);
  const SiteBiasEstimate& sb = *site_bias;
  const int K = mc.num_sites();
  std::vector<double> nks;
  for (int s : mc.survival.site_sizes) nks.push_back(static_cast<double>(s));

  if (mc.problem == ProblemKind::Cox) {
    std::vector<Eigen::VectorXd> deltas;
    for (int k = 0; k < K; ++k) deltas.push_back(sb.delta.row(k).transpose());
    for (EstimatorKind k : mc.estimators) {
      if (k == EstimatorKind::Local) continue;  // no cross-site theory row
      preds.push_back(cox_asymptotics(k, deltas, sb.mean_info, nks));
    }
    return preds;
  }

  // Competing risks: curves on the evaluation grid.
  const TruthSpec truth = mc_truth(mc);
  std::vector<Eigen::VectorXd> b_curves, v_curves;
  for (int k = 0; k < K; ++k) {
    b_curves.push_back(sb.delta.row(k).transpose());
    v_curves.push_back(sb.variance_curve[k]);
  }
  for (EstimatorKind k : mc.estimators) {
    if (k == EstimatorKind::MetaRandom) {
      const Eigen::VectorXd tau2 =
          expdetail::dl_tau2_by_time(sb, truth.value, nks);
      const Eigen::MatrixXd w = random_effects_weights(v_curves, nks, tau2);
      preds.push_back(
          aj_asymptotics(k, mc.grid, b_curves, v_curves, nks, w));
    } else if (k == EstimatorKind::MetaFixed) {
      // the fixed-effects combiner weighs sites by pointwise precision
      const Eigen::MatrixXd w = random_effects_weights(
          v_curves, nks, Eigen::VectorXd::Zero(mc.grid.size()));
      preds.push_back(
          aj_asymptotics(k, mc.grid, b_curves, v_curves, nks, w));
    } else {
      preds.push_back(aj_asymptotics(k, mc.grid, b_curves, v_curves, nks));
    }
  }
  return preds;
}

inline ExperimentArtifacts run_experiment(const ExperimentConfig& cfg) {
  if (!cfg.seed_set)
    throw ConfigError(
        "config: no master seed (set `$.mc.seed`, --seed, or FEDCI_SEED); "
        "clock seeding is not supported");
  cfg.mc.validate();
  ExperimentArtifacts art;
  art.config = cfg;
  art.result = run_mc(cfg.mc);
  art.predictions = build_predictions(cfg.mc, art.site_bias);
  art.verdicts = check_theorems(art.result, art.predictions, cfg.tolerances);
  return art;
}

namespace expdetail {

inline void write_file(const std::filesystem::path& path,
                       const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io: cannot write " + path.string());
  out << content;
}

inline std::string site_csv(const SiteSample& s) {
  std::string out;
  const int d = s.dim();
  for (int j = 0; j < d; ++j) out += "x" + std::to_string(j + 1) + ",";
  if (s.kind() == SampleKind::Linear) {
    out += "w,y\n";
    for (Eigen::Index i = 0; i < s.n(); ++i) {
      for (int j = 0; j < d; ++j) out += g12(s.X()(i, j)) + ",";
      out += std::to_string(s.W()[i]) + "," + g12(s.Y()[i]) + "\n";
    }
  } else {
    out += "time,event\n";
    for (Eigen::Index i = 0; i < s.n(); ++i) {
      for (int j = 0; j < d; ++j) out += g12(s.X()(i, j)) + ",";
      out += g12(s.time()[i]) + "," + std::to_string(s.event()[i]) + "\n";
    }
  }
  return out;
}

}  // namespace expdetail

// Writes the artifact files and returns their names (relative to the output
// directory), in the order written.
inline std::vector<std::string> write_artifacts(const ExperimentArtifacts& art,
                                                const OutputOptions& output) {
  namespace fs = std::filesystem;
  const fs::path dir(output.directory);
  fs::create_directories(dir);
  std::vector<std::string> written;
  if (output.csv) {
    expdetail::write_file(dir / "report.csv", report_csv(art.result));
    written.push_back("report.csv");
    expdetail::write_file(dir / "predictions.csv",
                          predictions_csv(art.result, art.predictions));
    written.push_back("predictions.csv");
  }
  if (output.json) {
    expdetail::write_file(dir / "report.json",
                          report_json(art.config.scenario, art.result,
                                      art.predictions, art.verdicts)
                                  .dump(2) +
                              "\n");
    written.push_back("report.json");
    expdetail::write_file(dir / "roundlogs.json",
                          roundlogs_json(art.result).dump(2) + "\n");
    written.push_back("roundlogs.json");
  }
  expdetail::write_file(dir / "verdicts.txt", verdicts_text(art.verdicts));
  written.push_back("verdicts.txt");
  if (output.dump_data) {
    const std::vector<SiteSample> sites =
        detail::generate_sites(art.config.mc, 0);
    for (std::size_t k = 0; k < sites.size(); ++k) {
      const std::string name = "data-site" + std::to_string(k) + ".csv";
      expdetail::write_file(dir / name, expdetail::site_csv(sites[k]));
      written.push_back(name);
    }
  }
  return written;
}

}  // namespace fedci
