#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fedci/config.hpp>
#include <fedci/scenarios.hpp>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace fedci;
using nlohmann::json;

namespace {

json valid_doc() {
    return json{
        {"scenario", "round-trip"},
        {"problem", "linear"},
        {"dgp",
         {{"site_sizes", {80, 120}},
          {"propensities", {0.4, 0.6}},
          {"means", {{0.0}, {1.0}}},
          {"covariance", {{1.0}}},
          {"theta_control", {1.0, 0.5}},
          {"theta_treated", {2.0, 0.5}},
          {"noise_sd", 0.8}}},
        {"estimators", {"pooled", "meta-ivw", "one-shot-ivw"}},
        {"protocols", {{"fedprox", {{"rounds", 25}, {"lambda", 2.0}}}}},
        {"mc", {{"replicates", 32}, {"seed", 99}, {"jobs", 2}}},
        {"tolerances", {{"equality", 1e-7}}},
        {"output",
         {{"directory", "results"}, {"formats", {"json"}}, {"dump_data", true}}},
    };
}

}  // namespace

TEST_CASE("a full document round-trips into the typed config") {
    auto cfg = parse_experiment_config(valid_doc());
    CHECK(cfg.scenario == "round-trip");
    CHECK(cfg.mc.problem == ProblemKind::Linear);
    CHECK(cfg.mc.linear.site_sizes == std::vector<int>{80, 120});
    CHECK(cfg.mc.linear.noise_sd == doctest::Approx(0.8));
    REQUIRE(cfg.mc.estimators.size() == 3);
    CHECK(cfg.mc.estimators[1] == EstimatorKind::MetaIVW);
    CHECK(cfg.mc.replicates == 32);
    CHECK(cfg.mc.jobs == 2);
    CHECK(cfg.seed_set);
    CHECK(cfg.mc.seed == 99);
    CHECK(cfg.mc.fedprox.rounds == 25);
    CHECK(cfg.mc.fedprox.lambda == doctest::Approx(2.0));
    CHECK(cfg.tolerances.equality == doctest::Approx(1e-7));
    CHECK(cfg.tolerances.order_slack_se == doctest::Approx(2.0));
    CHECK(cfg.output.directory == "results");
    CHECK_FALSE(cfg.output.csv);
    CHECK(cfg.output.json);
    CHECK(cfg.output.dump_data);
    CHECK_NOTHROW(cfg.mc.validate());
}

TEST_CASE("a document without a seed parses but flags the gap") {
    auto doc = valid_doc();
    doc["mc"].erase("seed");
    auto cfg = parse_experiment_config(doc);
    CHECK_FALSE(cfg.seed_set);
}

TEST_CASE("unknown keys are rejected with their full path") {
    auto doc = valid_doc();
    doc["mc"]["seeed"] = 1;
    CHECK_THROWS_WITH_AS(parse_experiment_config(doc),
                         doctest::Contains("unknown key `$.mc.seeed`"),
                         ConfigError);

    auto nested = valid_doc();
    nested["dgp"]["sizes"] = json::array({1});
    CHECK_THROWS_WITH_AS(parse_experiment_config(nested),
                         doctest::Contains("$.dgp.sizes"), ConfigError);
}

TEST_CASE("wrong types name the expected one and the offending path") {
    auto doc = valid_doc();
    doc["mc"]["replicates"] = 2.5;
    CHECK_THROWS_WITH_AS(
        parse_experiment_config(doc),
        doctest::Contains("`$.mc.replicates` must be an integer"), ConfigError);

    auto doc2 = valid_doc();
    doc2["mc"]["seed"] = -4;
    CHECK_THROWS_WITH_AS(parse_experiment_config(doc2),
                         doctest::Contains("$.mc.seed"), ConfigError);

    auto doc3 = valid_doc();
    doc3["dgp"]["noise_sd"] = "big";
    CHECK_THROWS_WITH_AS(parse_experiment_config(doc3),
                         doctest::Contains("`$.dgp.noise_sd` must be a number"),
                         ConfigError);
}

TEST_CASE("required blocks and enum values are enforced") {
    auto no_problem = valid_doc();
    no_problem.erase("problem");
    CHECK_THROWS_WITH_AS(parse_experiment_config(no_problem),
                         doctest::Contains("`$.problem` is required"),
                         ConfigError);

    auto bad_estimator = valid_doc();
    bad_estimator["estimators"].push_back("krige");
    CHECK_THROWS_WITH_AS(parse_experiment_config(bad_estimator),
                         doctest::Contains("unknown estimator \"krige\""),
                         ConfigError);

    auto bad_format = valid_doc();
    bad_format["output"]["formats"] = {"yaml"};
    CHECK_THROWS_WITH_AS(parse_experiment_config(bad_format),
                         doctest::Contains("$.output.formats[0]"), ConfigError);
}

TEST_CASE("baseline hazard families reject parameters they do not take") {
    json doc{
        {"problem", "cox"},
        {"dgp",
         {{"site_sizes", {100}},
          {"means", {{0.0}}},
          {"covariance", {{1.0}}},
          {"cause_betas", {{0.5}}},
          {"baselines",
           {{{{"family", "constant"}, {"rate", 1.0}, {"shape", 2.0}}}}}}},
        {"estimators", {"pooled"}},
        {"mc", {{"replicates", 10}, {"seed", 1}}},
    };
    CHECK_THROWS_WITH_AS(parse_experiment_config(doc),
                         doctest::Contains("constant baselines take only"),
                         ConfigError);

    doc["dgp"]["baselines"] = json::array(
        {json::array({json{{"family", "weibull"}, {"rate", 1.0}}})});
    CHECK_THROWS_WITH_AS(parse_experiment_config(doc),
                         doctest::Contains("weibull baselines take"),
                         ConfigError);

    // a null horizon means "follow everyone to the end"
    doc["dgp"]["baselines"] = json::array(
        {json::array({json{{"family", "weibull"}, {"shape", 2.0}}})});
    doc["dgp"]["horizon"] = nullptr;
    auto cfg = parse_experiment_config(doc);
    CHECK(std::isinf(cfg.mc.survival.horizon));
}

TEST_CASE("every bundled scenario parses, carries a seed, and validates") {
    auto scenarios = list_scenarios();
    REQUIRE(scenarios.size() == 5);
    for (const auto& info : scenarios) {
        CAPTURE(info.name);
        auto cfg = parse_experiment_config(scenario_config(info.name));
        CHECK(cfg.scenario == info.name);
        CHECK(cfg.seed_set);
        CHECK_NOTHROW(cfg.mc.validate());
    }
    CHECK_THROWS_AS(scenario_config("no-such-study"), ConfigError);
}

TEST_CASE("config files that cannot be read fail with a clear message") {
    CHECK_THROWS_WITH_AS(load_experiment_config("/nonexistent/place.json"),
                         doctest::Contains("cannot open"), ConfigError);

    const auto path =
        std::filesystem::temp_directory_path() / "fedci-broken-config.json";
    {
        std::ofstream out(path);
        out << "{ definitely not json";
    }
    CHECK_THROWS_WITH_AS(load_experiment_config(path.string()),
                         doctest::Contains("not valid JSON"), ConfigError);
    std::filesystem::remove(path);
}
