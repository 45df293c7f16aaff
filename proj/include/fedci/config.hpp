#pragma once

// Experiment configuration: a single JSON document, validated strictly before
// any computation runs. Unknown keys are rejected with the full path to the
// offending entry, wrong types name the expected one, and the master seed has
// no default — a config without one (and without a --seed / FEDCI_SEED
// override) is an error rather than a silent clock seed.

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedci/dgp.hpp"
#include "fedci/errors.hpp"
#include "fedci/mc.hpp"

namespace fedci {

struct OutputOptions {
  std::string directory = "out";
  bool csv = true;
  bool json = true;
  bool dump_data = false;
};

struct ExperimentConfig {
  std::string scenario = "unnamed";
  McConfig mc;
  TheoremTolerances tolerances;
  OutputOptions output;
  bool seed_set = false;  // seeds must come from config, flag, or environment
};

namespace cfgdetail {

using nlohmann::json;

inline void reject_unknown(const json& obj, const std::string& path,
                           std::initializer_list<const char*> allowed) {
  if (!obj.is_object())
    throw ConfigError("config: " + path + " must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* a : allowed)
      if (it.key() == a) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("config: unknown key `" + path + "." + it.key() + "`");
  }
}

inline double as_double(const json& v, const std::string& path) {
  if (!v.is_number())
    throw ConfigError("config: `" + path + "` must be a number");
  return v.get<double>();
}

inline long as_integer(const json& v, const std::string& path) {
  if (!v.is_number_integer())
    throw ConfigError("config: `" + path + "` must be an integer");
  return v.get<long>();
}

inline bool as_bool(const json& v, const std::string& path) {
  if (!v.is_boolean())
    throw ConfigError("config: `" + path + "` must be a boolean");
  return v.get<bool>();
}

inline std::string as_string(const json& v, const std::string& path) {
  if (!v.is_string())
    throw ConfigError("config: `" + path + "` must be a string");
  return v.get<std::string>();
}

inline Eigen::VectorXd as_vector(const json& v, const std::string& path) {
  if (!v.is_array())
    throw ConfigError("config: `" + path + "` must be an array of numbers");
  Eigen::VectorXd out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[static_cast<Eigen::Index>(i)] =
        as_double(v[i], path + "[" + std::to_string(i) + "]");
  return out;
}

inline std::vector<int> as_int_list(const json& v, const std::string& path) {
  if (!v.is_array())
    throw ConfigError("config: `" + path + "` must be an array of integers");
  std::vector<int> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out.push_back(static_cast<int>(
        as_integer(v[i], path + "[" + std::to_string(i) + "]")));
  return out;
}

inline Eigen::MatrixXd as_matrix(const json& v, const std::string& path) {
  if (!v.is_array() || v.empty())
    throw ConfigError("config: `" + path + "` must be an array of rows");
  const std::size_t rows = v.size();
  Eigen::VectorXd first = as_vector(v[0], path + "[0]");
  Eigen::MatrixXd out(rows, first.size());
  out.row(0) = first.transpose();
  for (std::size_t i = 1; i < rows; ++i) {
    Eigen::VectorXd row = as_vector(v[i], path + "[" + std::to_string(i) + "]");
    if (row.size() != first.size())
      throw ConfigError("config: `" + path + "` rows have unequal lengths");
    out.row(static_cast<Eigen::Index>(i)) = row.transpose();
  }
  return out;
}

inline std::vector<Eigen::VectorXd> as_vector_list(const json& v,
                                                   const std::string& path) {
  if (!v.is_array())
    throw ConfigError("config: `" + path + "` must be an array of arrays");
  std::vector<Eigen::VectorXd> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out.push_back(as_vector(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline EstimatorKind estimator_from_name(const std::string& name,
                                         const std::string& path) {
  for (EstimatorKind k :
       {EstimatorKind::Local, EstimatorKind::MetaSW, EstimatorKind::MetaIVW,
        EstimatorKind::OneShotSW, EstimatorKind::OneShotIVW, EstimatorKind::GD,
        EstimatorKind::Pooled, EstimatorKind::FedProx, EstimatorKind::FedAvg,
        EstimatorKind::MetaFixed, EstimatorKind::MetaRandom})
    if (estimator_name(k) == name) return k;
  throw ConfigError("config: `" + path + "`: unknown estimator \"" + name +
                    "\"");
}

inline BaselineHazard parse_baseline(const json& v, const std::string& path) {
  reject_unknown(v, path, {"family", "rate", "shape", "scale"});
  if (!v.contains("family"))
    throw ConfigError("config: `" + path + ".family` is required");
  const std::string family = as_string(v["family"], path + ".family");
  BaselineHazard b;
  if (family == "constant") {
    b.family = BaselineHazard::Family::Constant;
    if (v.contains("rate")) b.rate = as_double(v["rate"], path + ".rate");
    if (v.contains("shape") || v.contains("scale"))
      throw ConfigError("config: `" + path +
                        "`: constant baselines take only `rate`");
  } else if (family == "weibull") {
    b.family = BaselineHazard::Family::Weibull;
    if (v.contains("shape")) b.shape = as_double(v["shape"], path + ".shape");
    if (v.contains("scale")) b.scale = as_double(v["scale"], path + ".scale");
    if (v.contains("rate"))
      throw ConfigError("config: `" + path +
                        "`: weibull baselines take `shape`/`scale`, not `rate`");
  } else {
    throw ConfigError("config: `" + path + ".family` must be \"constant\" or "
                      "\"weibull\"");
  }
  return b;
}

inline LinearDgpSpec parse_linear_dgp(const json& v, const std::string& path) {
  reject_unknown(v, path,
                 {"site_sizes", "propensities", "means", "covariance",
                  "theta_control", "theta_treated", "noise_sd"});
  for (const char* key : {"site_sizes", "propensities", "means", "covariance",
                          "theta_control", "theta_treated"})
    if (!v.contains(key))
      throw ConfigError("config: `" + path + "." + key + "` is required");
  LinearDgpSpec spec;
  spec.site_sizes = as_int_list(v["site_sizes"], path + ".site_sizes");
  const Eigen::VectorXd props =
      as_vector(v["propensities"], path + ".propensities");
  spec.propensities.assign(props.data(), props.data() + props.size());
  spec.means = as_vector_list(v["means"], path + ".means");
  spec.covariance = as_matrix(v["covariance"], path + ".covariance");
  spec.theta_control = as_vector(v["theta_control"], path + ".theta_control");
  spec.theta_treated = as_vector(v["theta_treated"], path + ".theta_treated");
  if (v.contains("noise_sd"))
    spec.noise_sd = as_double(v["noise_sd"], path + ".noise_sd");
  return spec;
}

inline SurvivalDgpSpec parse_survival_dgp(const json& v,
                                          const std::string& path) {
  reject_unknown(v, path,
                 {"site_sizes", "means", "covariance", "cause_betas",
                  "baselines", "censoring_rate", "horizon"});
  for (const char* key :
       {"site_sizes", "means", "covariance", "cause_betas", "baselines"})
    if (!v.contains(key))
      throw ConfigError("config: `" + path + "." + key + "` is required");
  SurvivalDgpSpec spec;
  spec.site_sizes = as_int_list(v["site_sizes"], path + ".site_sizes");
  spec.means = as_vector_list(v["means"], path + ".means");
  spec.covariance = as_matrix(v["covariance"], path + ".covariance");
  spec.cause_betas = as_vector_list(v["cause_betas"], path + ".cause_betas");
  const json& bl = v["baselines"];
  if (!bl.is_array())
    throw ConfigError("config: `" + path +
                      ".baselines` must be an array (one row per site)");
  for (std::size_t k = 0; k < bl.size(); ++k) {
    const std::string row_path =
        path + ".baselines[" + std::to_string(k) + "]";
    if (!bl[k].is_array())
      throw ConfigError("config: `" + row_path +
                        "` must be an array (one entry per cause)");
    std::vector<BaselineHazard> row;
    for (std::size_t j = 0; j < bl[k].size(); ++j)
      row.push_back(parse_baseline(
          bl[k][j], row_path + "[" + std::to_string(j) + "]"));
    spec.baselines.push_back(std::move(row));
  }
  if (v.contains("censoring_rate"))
    spec.censoring_rate =
        as_double(v["censoring_rate"], path + ".censoring_rate");
  if (v.contains("horizon")) {
    if (v["horizon"].is_null())
      spec.horizon = std::numeric_limits<double>::infinity();
    else
      spec.horizon = as_double(v["horizon"], path + ".horizon");
  }
  return spec;
}

inline void parse_protocol(const json& v, const std::string& path,
                           ProtocolConfig& pc) {
  reject_unknown(v, path, {"rounds", "lambda", "step_size", "local_steps",
                           "tol", "max_local_iters"});
  if (v.contains("rounds"))
    pc.rounds = static_cast<int>(as_integer(v["rounds"], path + ".rounds"));
  if (v.contains("lambda")) pc.lambda = as_double(v["lambda"], path + ".lambda");
  if (v.contains("step_size"))
    pc.step_size = as_double(v["step_size"], path + ".step_size");
  if (v.contains("local_steps"))
    pc.local_steps =
        static_cast<int>(as_integer(v["local_steps"], path + ".local_steps"));
  if (v.contains("tol")) pc.tol = as_double(v["tol"], path + ".tol");
  if (v.contains("max_local_iters"))
    pc.max_local_iters = static_cast<int>(
        as_integer(v["max_local_iters"], path + ".max_local_iters"));
}

}  // namespace cfgdetail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& root) {
  using cfgdetail::as_bool;
  using cfgdetail::as_double;
  using cfgdetail::as_integer;
  using cfgdetail::as_string;
  using nlohmann::json;

  cfgdetail::reject_unknown(root, "$",
                            {"scenario", "problem", "dgp", "estimators",
                             "protocols", "mc", "tolerances", "output"});
  ExperimentConfig cfg;
  if (root.contains("scenario"))
    cfg.scenario = as_string(root["scenario"], "$.scenario");

  if (!root.contains("problem"))
    throw ConfigError("config: `$.problem` is required");
  const std::string problem = as_string(root["problem"], "$.problem");
  if (problem == "linear") cfg.mc.problem = ProblemKind::Linear;
  else if (problem == "cox") cfg.mc.problem = ProblemKind::Cox;
  else if (problem == "competing-risks")
    cfg.mc.problem = ProblemKind::CompetingRisks;
  else
    throw ConfigError("config: `$.problem` must be \"linear\", \"cox\", or "
                      "\"competing-risks\"");

  if (!root.contains("dgp"))
    throw ConfigError("config: `$.dgp` is required");
  if (cfg.mc.problem == ProblemKind::Linear)
    cfg.mc.linear = cfgdetail::parse_linear_dgp(root["dgp"], "$.dgp");
  else
    cfg.mc.survival = cfgdetail::parse_survival_dgp(root["dgp"], "$.dgp");

  if (!root.contains("estimators") || !root["estimators"].is_array() ||
      root["estimators"].empty())
    throw ConfigError("config: `$.estimators` must be a non-empty array");
  for (std::size_t i = 0; i < root["estimators"].size(); ++i) {
    const std::string path = "$.estimators[" + std::to_string(i) + "]";
    cfg.mc.estimators.push_back(cfgdetail::estimator_from_name(
        as_string(root["estimators"][i], path), path));
  }

  if (root.contains("protocols")) {
    cfgdetail::reject_unknown(root["protocols"], "$.protocols",
                              {"fedprox", "gd"});
    if (root["protocols"].contains("fedprox"))
      cfgdetail::parse_protocol(root["protocols"]["fedprox"],
                                "$.protocols.fedprox", cfg.mc.fedprox);
    if (root["protocols"].contains("gd"))
      cfgdetail::parse_protocol(root["protocols"]["gd"], "$.protocols.gd",
                                cfg.mc.gd);
  }

  if (!root.contains("mc"))
    throw ConfigError("config: `$.mc` is required");
  const json& mc = root["mc"];
  cfgdetail::reject_unknown(mc, "$.mc",
                            {"replicates", "seed", "jobs", "local_site",
                             "cause", "grid", "oracle_n", "oracle_replicates"});
  if (!mc.contains("replicates"))
    throw ConfigError("config: `$.mc.replicates` is required");
  cfg.mc.replicates =
      static_cast<int>(as_integer(mc["replicates"], "$.mc.replicates"));
  if (mc.contains("seed")) {
    if (!mc["seed"].is_number_integer() || mc["seed"].get<long long>() < 0)
      throw ConfigError("config: `$.mc.seed` must be a non-negative integer");
    cfg.mc.seed = mc["seed"].get<std::uint64_t>();
    cfg.seed_set = true;
  }
  if (mc.contains("jobs"))
    cfg.mc.jobs = static_cast<int>(as_integer(mc["jobs"], "$.mc.jobs"));
  if (mc.contains("local_site"))
    cfg.mc.local_site =
        static_cast<int>(as_integer(mc["local_site"], "$.mc.local_site"));
  if (mc.contains("cause"))
    cfg.mc.cause = static_cast<int>(as_integer(mc["cause"], "$.mc.cause"));
  if (mc.contains("grid")) cfg.mc.grid = cfgdetail::as_vector(mc["grid"], "$.mc.grid");
  if (mc.contains("oracle_n"))
    cfg.mc.oracle_n = as_integer(mc["oracle_n"], "$.mc.oracle_n");
  if (mc.contains("oracle_replicates"))
    cfg.mc.oracle_replicates = static_cast<int>(
        as_integer(mc["oracle_replicates"], "$.mc.oracle_replicates"));

  if (root.contains("tolerances")) {
    const json& t = root["tolerances"];
    cfgdetail::reject_unknown(t, "$.tolerances",
                              {"equality", "order_slack_se", "equal_band_se",
                               "bias_gate_se", "match_gate_se"});
    if (t.contains("equality"))
      cfg.tolerances.equality = as_double(t["equality"], "$.tolerances.equality");
    if (t.contains("order_slack_se"))
      cfg.tolerances.order_slack_se =
          as_double(t["order_slack_se"], "$.tolerances.order_slack_se");
    if (t.contains("equal_band_se"))
      cfg.tolerances.equal_band_se =
          as_double(t["equal_band_se"], "$.tolerances.equal_band_se");
    if (t.contains("bias_gate_se"))
      cfg.tolerances.bias_gate_se =
          as_double(t["bias_gate_se"], "$.tolerances.bias_gate_se");
    if (t.contains("match_gate_se"))
      cfg.tolerances.match_gate_se =
          as_double(t["match_gate_se"], "$.tolerances.match_gate_se");
  }

  if (root.contains("output")) {
    const json& o = root["output"];
    cfgdetail::reject_unknown(o, "$.output",
                              {"directory", "formats", "dump_data"});
    if (o.contains("directory"))
      cfg.output.directory = as_string(o["directory"], "$.output.directory");
    if (o.contains("formats")) {
      if (!o["formats"].is_array())
        throw ConfigError("config: `$.output.formats` must be an array");
      cfg.output.csv = false;
      cfg.output.json = false;
      for (std::size_t i = 0; i < o["formats"].size(); ++i) {
        const std::string f = as_string(
            o["formats"][i], "$.output.formats[" + std::to_string(i) + "]");
        if (f == "csv") cfg.output.csv = true;
        else if (f == "json") cfg.output.json = true;
        else
          throw ConfigError("config: `$.output.formats[" + std::to_string(i) +
                            "]` must be \"csv\" or \"json\"");
      }
    }
    if (o.contains("dump_data"))
      cfg.output.dump_data = as_bool(o["dump_data"], "$.output.dump_data");
  }

  // Full semantic validation (dimensions, ranges, estimator/problem fit)
  // happens in McConfig::validate, deferred until a seed is known.
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(root);
}

}  // namespace fedci
