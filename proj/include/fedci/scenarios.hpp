#pragma once

// Bundled experiment configurations. Each one is an ordinary config document
// (it goes through the same strict parser as a user file), sized to finish on
// a laptop core: a fast smoke run, the three linear studies (variance
// ordering, covariate shift), and the two survival studies.

#include <string>
#include <vector>

#include <json.hpp>

#include "fedci/errors.hpp"

namespace fedci {

struct ScenarioInfo {
  std::string name;
  std::string summary;
};

inline std::vector<ScenarioInfo> list_scenarios() {
  return {
      {"homogeneous-smoke",
       "2 identical linear sites, R=50; every linear estimator agrees"},
      {"theorem2-ordering",
       "4 linear sites with spread propensities, R=2000; variance chain"},
      {"theorem3-covariate-shift",
       "2 linear sites, shifted means + arm-specific slopes, R=2000; "
       "inverse-variance meta goes biased"},
      {"cox-table2",
       "3 survival sites, shared coefficient, heterogeneous Weibull "
       "baselines, R=500"},
      {"aj-table3",
       "3 competing-risks sites with per-site exponential rates, R=400; "
       "incidence-curve aggregation"},
  };
}

inline nlohmann::json scenario_config(const std::string& name) {
  using nlohmann::json;
  if (name == "homogeneous-smoke") {
    return json{
        {"scenario", "homogeneous-smoke"},
        {"problem", "linear"},
        {"dgp",
         {{"site_sizes", {200, 200}},
          {"propensities", {0.5, 0.5}},
          {"means", {{0.0, 0.0}, {0.0, 0.0}}},
          {"covariance", {{1.0, 0.0}, {0.0, 1.0}}},
          {"theta_control", {1.0, 0.3, -0.2}},
          {"theta_treated", {2.0, 0.3, -0.2}},
          {"noise_sd", 1.0}}},
        {"estimators",
         {"local", "meta-sw", "meta-ivw", "one-shot-sw", "one-shot-ivw", "gd",
          "pooled", "fedprox"}},
        {"protocols",
         {{"fedprox", {{"rounds", 40}, {"lambda", 0.5}}},
          {"gd", {{"rounds", 300}}}}},
        {"mc", {{"replicates", 50}, {"seed", 20260814}}},
    };
  }
  if (name == "theorem2-ordering") {
    return json{
        {"scenario", "theorem2-ordering"},
        {"problem", "linear"},
        {"dgp",
         {{"site_sizes", {500, 500, 500, 500}},
          {"propensities", {0.2, 0.3, 0.5, 0.7}},
          {"means", {{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}}},
          {"covariance", {{1.0, 0.0}, {0.0, 1.0}}},
          {"theta_control", {1.0, 0.4, -0.3}},
          {"theta_treated", {2.0, 0.4, -0.3}},
          {"noise_sd", 1.0}}},
        {"estimators",
         {"pooled", "gd", "one-shot-ivw", "one-shot-sw", "meta-ivw",
          "meta-sw"}},
        {"protocols", {{"gd", {{"rounds", 600}}}}},
        {"mc", {{"replicates", 2000}, {"seed", 918273}}},
    };
  }
  if (name == "theorem3-covariate-shift") {
    return json{
        {"scenario", "theorem3-covariate-shift"},
        {"problem", "linear"},
        {"dgp",
         {{"site_sizes", {500, 500}},
          {"propensities", {0.2, 0.7}},
          {"means", {{0.0, 0.0}, {2.0, 2.0}}},
          {"covariance", {{1.0, 0.0}, {0.0, 1.0}}},
          {"theta_control", {1.0, 0.2, 0.2}},
          {"theta_treated", {2.0, 0.7, 0.7}},
          {"noise_sd", 1.0}}},
        {"estimators", {"pooled", "gd", "one-shot-ivw", "meta-ivw"}},
        {"protocols", {{"gd", {{"rounds", 1500}}}}},
        {"mc", {{"replicates", 2000}, {"seed", 5150}}},
    };
  }
  if (name == "cox-table2") {
    return json{
        {"scenario", "cox-table2"},
        {"problem", "cox"},
        {"dgp",
         {{"site_sizes", {1000, 1000, 1000}},
          {"means", {{0.0}, {0.0}, {0.0}}},
          {"covariance", {{1.0}}},
          {"cause_betas", {{0.5}}},
          {"baselines",
           {{{{"family", "weibull"}, {"shape", 0.8}, {"scale", 1.0}}},
            {{{"family", "weibull"}, {"shape", 1.0}, {"scale", 1.4}}},
            {{{"family", "weibull"}, {"shape", 1.4}, {"scale", 0.7}}}}},
          {"censoring_rate", 0.25}}},
        {"estimators",
         {"pooled", "fedprox", "fedavg", "meta-fixed", "meta-random"}},
        {"protocols", {{"fedprox", {{"rounds", 50}, {"lambda", 1.0}}}}},
        {"mc",
         {{"replicates", 500},
          {"seed", 777001},
          {"oracle_replicates", 20000}}},
    };
  }
  if (name == "aj-table3") {
    return json{
        {"scenario", "aj-table3"},
        {"problem", "competing-risks"},
        {"dgp",
         {{"site_sizes", {600, 600, 600}},
          {"means", {{0.0}, {0.0}, {0.0}}},
          {"covariance", {{1.0}}},
          {"cause_betas", {{0.0}, {0.0}}},
          {"baselines",
           {{{{"family", "constant"}, {"rate", 0.5}},
             {{"family", "constant"}, {"rate", 0.7}}},
            {{{"family", "constant"}, {"rate", 1.0}},
             {{"family", "constant"}, {"rate", 0.7}}},
            {{{"family", "constant"}, {"rate", 1.5}},
             {{"family", "constant"}, {"rate", 0.7}}}}},
          {"censoring_rate", 0.3}}},
        {"estimators", {"pooled", "fedavg", "meta-fixed", "meta-random"}},
        {"mc",
         {{"replicates", 400},
          {"seed", 424243},
          {"grid", {0.25, 0.5, 0.75, 1.0, 1.5}},
          {"oracle_replicates", 20000}}},
    };
  }
  throw ConfigError("unknown scenario \"" + name +
                    "\"; `fedci list-scenarios` prints the bundled ones");
}

}  // namespace fedci
