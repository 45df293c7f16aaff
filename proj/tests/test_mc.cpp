#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fedci/experiment.hpp>
#include <fedci/mc.hpp>
#include <fedci/theory.hpp>

#include <cmath>
#include <string>

using namespace fedci;

namespace {

// Two mildly heterogeneous sites, small enough that a full replicated run
// with every linear estimator takes well under a second.
McConfig small_linear(int replicates, std::uint64_t seed) {
    McConfig cfg;
    cfg.problem = ProblemKind::Linear;
    cfg.linear.site_sizes = {60, 60};
    cfg.linear.propensities = {0.4, 0.6};
    cfg.linear.means = {Eigen::VectorXd::Constant(1, 0.0),
                        Eigen::VectorXd::Constant(1, 0.5)};
    cfg.linear.covariance = Eigen::MatrixXd::Identity(1, 1);
    cfg.linear.theta_control = Eigen::Vector2d(1.0, 0.5);
    cfg.linear.theta_treated = Eigen::Vector2d(2.0, 0.7);
    cfg.linear.noise_sd = 1.0;
    cfg.estimators = {EstimatorKind::Local,      EstimatorKind::MetaSW,
                      EstimatorKind::MetaIVW,    EstimatorKind::OneShotSW,
                      EstimatorKind::OneShotIVW, EstimatorKind::GD,
                      EstimatorKind::Pooled,     EstimatorKind::FedProx};
    cfg.replicates = replicates;
    cfg.seed = seed;
    cfg.fedprox.rounds = 30;
    cfg.fedprox.lambda = 1.0;
    cfg.gd.rounds = 250;
    return cfg;
}

bool same_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            const bool na = std::isnan(a(i, j)), nb = std::isnan(b(i, j));
            if (na != nb) return false;
            if (!na && a(i, j) != b(i, j)) return false;
        }
    return true;
}

}  // namespace

TEST_CASE("replicated runs replay bit-exactly, independent of the job count") {
    auto cfg = small_linear(16, 2468);
    auto first = run_mc(cfg);
    auto second = run_mc(cfg);
    McConfig threaded = cfg;
    threaded.jobs = 3;
    auto third = run_mc(threaded);

    REQUIRE(first.runs.size() == 8);
    for (std::size_t e = 0; e < first.runs.size(); ++e) {
        CHECK(same_matrix(first.runs[e].draws, second.runs[e].draws));
        CHECK(same_matrix(first.runs[e].draws, third.runs[e].draws));
        CHECK(same_matrix(first.runs[e].var_draws, third.runs[e].var_draws));
        CHECK(first.runs[e].errors == third.runs[e].errors);
    }
}

TEST_CASE("summary moments are population-form: mse = bias^2 + variance") {
    auto res = run_mc(small_linear(40, 97));
    for (const auto& s : res.summaries) {
        REQUIRE(s.replicates_ok == 40);
        for (Eigen::Index c = 0; c < s.mse.size(); ++c) {
            const double want = s.bias[c] * s.bias[c] + s.variance[c];
            CHECK(std::abs(s.mse[c] - want) <=
                  1e-12 * std::max(1.0, std::abs(want)));
            CHECK(s.bias_mcse[c] > 0);
            CHECK(s.variance_mcse[c] > 0);
            // coverage exists only where the pipeline reports a variance
            if (std::isfinite(s.coverage[c])) {
                CHECK(s.coverage[c] >= 0.0);
                CHECK(s.coverage[c] <= 1.0);
            }
        }
    }
    // estimators that report a variance get a coverage entry on a 1/R lattice
    const auto* pooled = res.summary(EstimatorKind::Pooled);
    REQUIRE(pooled != nullptr);
    CHECK(std::abs(pooled->coverage[0] * 40 -
                   std::round(pooled->coverage[0] * 40)) < 1e-9);
}

TEST_CASE("first-replicate round logs are captured per estimator") {
    auto res = run_mc(small_linear(4, 11));
    const auto* one_shot = res.run(EstimatorKind::OneShotIVW);
    REQUIRE(one_shot != nullptr);
    REQUIRE(one_shot->log.has_value());
    CHECK(one_shot->log->protocol == "one-shot-ivw");
    CHECK(one_shot->log->rounds() == 2);
    const auto* gd = res.run(EstimatorKind::GD);
    REQUIRE(gd->log.has_value());
    CHECK(gd->log->protocol == "gd");
    CHECK(gd->log->rounds() == 251);
    // direct estimators have nothing to log
    CHECK_FALSE(res.run(EstimatorKind::Pooled)->log.has_value());
}

TEST_CASE("theorem verdicts on a homogeneous-ish linear run") {
    auto cfg = small_linear(60, 31415);
    auto res = run_mc(cfg);
    std::optional<SiteBiasEstimate> sb;
    auto preds = build_predictions(cfg, sb);
    auto verdicts = check_theorems(res, preds);
    REQUIRE(verdicts.size() == 4);
    CHECK(verdicts[0].id == "a");
    CHECK(verdicts[0].applicable);
    CHECK(verdicts[0].pass);
    CHECK(verdicts[1].id == "b");
    CHECK(verdicts[1].applicable);
    CHECK(verdicts[1].pass);
    CHECK(verdicts[2].id == "c");
    CHECK(verdicts[2].applicable);
    CHECK(verdicts[2].pass);
    // (d) is survival-only
    CHECK_FALSE(verdicts[3].applicable);
    // linear problems never invoke the site-bias oracle
    CHECK_FALSE(sb.has_value());
}

TEST_CASE("replicate failures are contained, counted, and reported") {
    McConfig cfg;
    cfg.problem = ProblemKind::Linear;
    // 6 subjects at site 0: splits leaving an arm with < 2 of them cannot
    // support an intercept+slope fit, so the local estimator fails on a good
    // fraction of replicates; the pooled fit rides on site 1 and never does.
    cfg.linear.site_sizes = {6, 40};
    cfg.linear.propensities = {0.5, 0.5};
    cfg.linear.means = {Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)};
    cfg.linear.covariance = Eigen::MatrixXd::Identity(1, 1);
    cfg.linear.theta_control = Eigen::Vector2d(0.0, 1.0);
    cfg.linear.theta_treated = Eigen::Vector2d(1.0, 1.0);
    cfg.estimators = {EstimatorKind::Local, EstimatorKind::Pooled};
    cfg.replicates = 64;
    cfg.seed = 60446;

    auto res = run_mc(cfg);
    const auto* local = res.summary(EstimatorKind::Local);
    const auto* local_run = res.run(EstimatorKind::Local);
    REQUIRE(local != nullptr);
    CHECK(local->failures + local->replicates_ok == 64);
    CHECK(local->failures > 0);
    CHECK(local->replicates_ok > 0);
    CHECK_FALSE(local->first_error.empty());
    for (int r = 0; r < 64; ++r) {
        const bool failed = !local_run->errors[r].empty();
        CHECK(std::isnan(local_run->draws(r, 0)) == failed);
    }
    // moments come from the surviving replicates and stay finite
    CHECK(std::isfinite(local->bias[0]));
    CHECK(std::isfinite(local->variance[0]));

    const auto* pooled = res.summary(EstimatorKind::Pooled);
    CHECK(pooled->failures == 0);
    CHECK(pooled->replicates_ok == 64);
}

TEST_CASE("monte carlo standard errors shrink like 1/sqrt(R)") {
    auto small = small_linear(200, 5);
    small.estimators = {EstimatorKind::Pooled};
    auto big = small;
    big.replicates = 800;
    auto res_small = run_mc(small);
    auto res_big = run_mc(big);
    const double ratio = res_small.summaries[0].bias_mcse[0] /
                         res_big.summaries[0].bias_mcse[0];
    CHECK(ratio > 1.6);
    CHECK(ratio < 2.4);
}

TEST_CASE("estimators are validated against the problem family") {
    auto cfg = small_linear(10, 1);
    cfg.estimators.push_back(EstimatorKind::FedAvg);
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("fedavg"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("linear"),
                         ConfigError);
}

TEST_CASE("the scored target is pinned per problem family") {
    auto cfg = small_linear(10, 1);
    cfg.linear.site_sizes = {100, 300};
    cfg.linear.theta_control = Eigen::Vector2d(1.0, 0.5);
    cfg.linear.theta_treated = Eigen::Vector2d(2.0, 0.7);
    cfg.linear.means = {Eigen::VectorXd::Zero(1),
                        Eigen::VectorXd::Constant(1, 2.5)};
    // site ATEs: 1 + 0.2*0 = 1 and 1 + 0.2*2.5 = 1.5; sizes mix 1:3
    auto truth = mc_truth(cfg);
    CHECK(truth.value.size() == 1);
    CHECK(truth.value[0] == doctest::Approx(1.375).epsilon(1e-12));

    McConfig cox;
    cox.problem = ProblemKind::Cox;
    cox.survival.site_sizes = {50, 50};
    cox.survival.means = {Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)};
    cox.survival.covariance = Eigen::MatrixXd::Identity(1, 1);
    cox.survival.cause_betas = {Eigen::VectorXd::Constant(1, 0.7)};
    cox.survival.baselines = {{BaselineHazard::constant(1.0)},
                              {BaselineHazard::constant(2.0)}};
    cox.estimators = {EstimatorKind::Pooled};
    auto cox_truth = mc_truth(cox);
    CHECK(cox_truth.value.size() == 1);
    CHECK(cox_truth.value[0] == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("site-level oracle finds no bias when sites share one law") {
    auto cfg = small_linear(10, 314);
    cfg.linear.means = {Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)};
    cfg.linear.propensities = {0.5, 0.5};
    cfg.oracle_replicates = 8;
    auto sb = estimate_site_bias(cfg);
    REQUIRE(sb.delta.rows() == 2);
    CHECK(sb.rho[0] == doctest::Approx(0.5));
    CHECK(sb.rho[1] == doctest::Approx(0.5));
    for (int k = 0; k < 2; ++k) {
        CHECK(sb.se(k, 0) > 0);
        CHECK(std::abs(sb.delta(k, 0)) < 4.0 * sb.se(k, 0));
    }
}

TEST_CASE("spread propensities blow up the size-weighted meta variance") {
    McConfig cfg;
    cfg.problem = ProblemKind::Linear;
    cfg.linear.site_sizes = {400, 400};
    cfg.linear.propensities = {0.1, 0.9};
    cfg.linear.means = {Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)};
    cfg.linear.covariance = Eigen::MatrixXd::Identity(1, 1);
    cfg.linear.theta_control = Eigen::Vector2d(0.0, 0.4);
    cfg.linear.theta_treated = Eigen::Vector2d(1.0, 0.4);
    cfg.linear.noise_sd = 1.0;
    cfg.estimators = {EstimatorKind::MetaSW, EstimatorKind::OneShotSW,
                      EstimatorKind::Pooled};
    cfg.replicates = 2500;
    cfg.seed = 271828;

    auto res = run_mc(cfg);
    for (EstimatorKind k : cfg.estimators) {
        const double pred = v_infinity_linear(k, cfg.linear, 0).variance[0];
        const double emp = res.summary(k)->variance[0];
        CHECK(std::abs(emp / pred - 1.0) < 0.12);
    }
    // size weights pay ~(1/4)(1/pq) per site against the pooled 1/(p~q~):
    // (25/9) at these propensities
    const double ratio = res.summary(EstimatorKind::MetaSW)->variance[0] /
                         res.summary(EstimatorKind::Pooled)->variance[0];
    CHECK(std::abs(ratio - 25.0 / 9.0) / (25.0 / 9.0) < 0.15);
}
