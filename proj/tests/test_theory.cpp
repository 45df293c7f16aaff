#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fedci/dgp.hpp>
#include <fedci/theory.hpp>

#include <vector>

using namespace fedci;

namespace {

LinearDgpSpec two_site_spec(std::vector<double> props,
                            std::vector<Eigen::VectorXd> means) {
    LinearDgpSpec spec;
    spec.site_sizes = {100, 300};
    spec.propensities = std::move(props);
    spec.means = std::move(means);
    spec.covariance = Eigen::MatrixXd::Identity(1, 1);
    spec.theta_control = Eigen::Vector2d(0.0, 1.0);
    spec.theta_treated = Eigen::Vector2d(1.0, 2.0);  // slope difference 1
    spec.noise_sd = 1.0;
    return spec;
}

Eigen::VectorXd v1(double x) { return Eigen::VectorXd::Constant(1, x); }

}  // namespace

TEST_CASE("estimator names are stable identifiers") {
    CHECK(estimator_name(EstimatorKind::MetaSW) == "meta-sw");
    CHECK(estimator_name(EstimatorKind::OneShotIVW) == "one-shot-ivw");
    CHECK(estimator_name(EstimatorKind::FedProx) == "fedprox");
    CHECK(estimator_name(EstimatorKind::MetaRandom) == "meta-random");
}

TEST_CASE("equal propensities collapse the linear variance table") {
    auto spec = two_site_spec({0.5, 0.5},
                              {v1(0.0), v1(0.0)});
    for (auto kind : {EstimatorKind::Pooled, EstimatorKind::GD,
                      EstimatorKind::OneShotSW, EstimatorKind::OneShotIVW,
                      EstimatorKind::MetaSW, EstimatorKind::MetaIVW}) {
        auto pred = v_infinity_linear(kind, spec);
        CHECK(pred.variance[0] == doctest::Approx(0.0125).epsilon(1e-12));
        CHECK(pred.bias[0] == doctest::Approx(0.0));
    }
    CHECK(v_infinity_linear(EstimatorKind::Local, spec, 0).variance[0] ==
          doctest::Approx(0.05).epsilon(1e-12));
    CHECK(v_infinity_linear(EstimatorKind::Local, spec, 1).variance[0] ==
          doctest::Approx(1.0 / 60.0).epsilon(1e-12));
}

TEST_CASE("unequal propensities order the linear variance table") {
    auto spec = two_site_spec({0.2, 0.7},
                              {v1(0.0), v1(0.0)});
    auto pooled = v_infinity_linear(EstimatorKind::Pooled, spec);
    auto msw = v_infinity_linear(EstimatorKind::MetaSW, spec);
    auto mivw = v_infinity_linear(EstimatorKind::MetaIVW, spec);
    CHECK(pooled.variance[0] ==
          doctest::Approx(0.012730179028133).epsilon(1e-12));
    CHECK(msw.variance[0] ==
          doctest::Approx(0.0153348214285714).epsilon(1e-12));
    CHECK(mivw.variance[0] ==
          doctest::Approx(0.0151839030722631).epsilon(1e-12));
    CHECK(v_infinity_linear(EstimatorKind::Local, spec, 0).variance[0] ==
          doctest::Approx(0.0725).epsilon(1e-12));
    CHECK(v_infinity_linear(EstimatorKind::Local, spec, 1).variance[0] ==
          doctest::Approx(0.0192063492063492).epsilon(1e-12));
    // the one-shot and iterative rows coincide with the pooled row
    CHECK(v_infinity_linear(EstimatorKind::GD, spec).variance[0] ==
          doctest::Approx(pooled.variance[0]));
    CHECK(v_infinity_linear(EstimatorKind::FedProx, spec).variance[0] ==
          doctest::Approx(pooled.variance[0]));
    CHECK(pooled.variance[0] < mivw.variance[0]);
    CHECK(mivw.variance[0] < msw.variance[0]);
}

TEST_CASE("covariate shift biases the precision-weighted combination only") {
    auto spec = two_site_spec({0.2, 0.7},
                              {v1(0.0), v1(1.0)});
    // site effects 1 and 2, mixture effect 1.75
    auto local0 = v_infinity_linear(EstimatorKind::Local, spec, 0);
    CHECK(local0.bias[0] == doctest::Approx(-0.75).epsilon(1e-12));
    auto mivw = v_infinity_linear(EstimatorKind::MetaIVW, spec);
    CHECK(mivw.bias[0] == doctest::Approx(0.0405668541756818).epsilon(1e-9));
    for (auto kind : {EstimatorKind::Pooled, EstimatorKind::GD,
                      EstimatorKind::OneShotIVW, EstimatorKind::MetaSW}) {
        CHECK(v_infinity_linear(kind, spec).bias[0] == doctest::Approx(0.0));
    }
    CHECK_THROWS_AS(v_infinity_linear(EstimatorKind::Local, spec, 5),
                    ConfigError);
    CHECK_THROWS_AS(v_infinity_linear(EstimatorKind::FedAvg, spec),
                    ConfigError);
}

TEST_CASE("proportional-hazards table rows have closed forms") {
    std::vector<Eigen::VectorXd> deltas = {v1(0.1), v1(-0.1)};
    std::vector<Eigen::MatrixXd> infos = {
        Eigen::MatrixXd::Constant(1, 1, 2.0),
        Eigen::MatrixXd::Constant(1, 1, 4.0)};
    std::vector<double> nks = {100, 100};

    auto pooled = cox_asymptotics(EstimatorKind::Pooled, deltas, infos, nks);
    CHECK(pooled.bias[0] == 0.0);
    CHECK(pooled.covariance(0, 0) ==
          doctest::Approx(1.0 / 600.0).epsilon(1e-12));
    CHECK(pooled.variance[0] == doctest::Approx(1.0 / 600.0));

    auto fedavg = cox_asymptotics(EstimatorKind::FedAvg, deltas, infos, nks);
    CHECK(fedavg.bias[0] == doctest::Approx(0.0));
    CHECK(fedavg.covariance(0, 0) == doctest::Approx(0.001875).epsilon(1e-12));

    // information-trace weights are 1/3 and 2/3; in scalar problems the
    // weighted combination recovers exactly the pooled precision
    auto mf = cox_asymptotics(EstimatorKind::MetaFixed, deltas, infos, nks);
    CHECK(mf.bias[0] == doctest::Approx(-0.1 / 3.0).epsilon(1e-12));
    CHECK(mf.covariance(0, 0) == doctest::Approx(1.0 / 600.0).epsilon(1e-12));

    Eigen::VectorXd w(2);
    w << 0.5, 0.5;
    auto mr = cox_asymptotics(EstimatorKind::MetaRandom, deltas, infos, nks, w);
    CHECK(mr.bias[0] == doctest::Approx(0.0));
    CHECK(mr.covariance(0, 0) == doctest::Approx(0.001875).epsilon(1e-12));

    CHECK_THROWS_AS(cox_asymptotics(EstimatorKind::Local, deltas, infos, nks),
                    ConfigError);
    CHECK_THROWS_AS(
        cox_asymptotics(EstimatorKind::Pooled, {v1(0.1)}, infos, nks),
        ConfigError);
}

TEST_CASE("incidence-curve table rows combine bias and variance pointwise") {
    Eigen::VectorXd grid(2);
    grid << 0.5, 1.0;
    std::vector<Eigen::VectorXd> b = {Eigen::Vector2d(0.01, 0.02),
                                      Eigen::Vector2d(-0.01, 0.0)};
    std::vector<Eigen::VectorXd> v = {Eigen::Vector2d(1.0, 2.0),
                                      Eigen::Vector2d(2.0, 4.0)};
    std::vector<double> nks = {100, 300};

    auto pooled = aj_asymptotics(EstimatorKind::Pooled, grid, b, v, nks);
    CHECK(pooled.bias[0] == 0.0);
    CHECK(pooled.variance[0] == doctest::Approx(0.004375).epsilon(1e-12));
    CHECK(pooled.times.size() == 2);

    auto fedavg = aj_asymptotics(EstimatorKind::FedAvg, grid, b, v, nks);
    CHECK(fedavg.bias[0] == doctest::Approx(-0.005).epsilon(1e-12));
    CHECK(fedavg.variance[0] == doctest::Approx(0.004375).epsilon(1e-12));

    // without explicit weights the fixed-effects row matches the size-weighted one
    auto mf_default = aj_asymptotics(EstimatorKind::MetaFixed, grid, b, v, nks);
    CHECK(mf_default.bias[0] == doctest::Approx(fedavg.bias[0]));
    CHECK(mf_default.variance[0] == doctest::Approx(fedavg.variance[0]));

    Eigen::MatrixXd half = Eigen::MatrixXd::Constant(2, 2, 0.5);
    auto mf = aj_asymptotics(EstimatorKind::MetaFixed, grid, b, v, nks, half);
    CHECK(mf.bias[0] == doctest::Approx(0.0));
    CHECK(mf.variance[0] ==
          doctest::Approx(0.25 / 100.0 + 0.25 * 2.0 / 300.0).epsilon(1e-12));

    // zero between-site spread: weights are inverse of V_k / n_k
    auto rw = random_effects_weights(v, nks, Eigen::Vector2d(0.0, 0.0));
    CHECK(rw(0, 0) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(rw(1, 0) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(rw.colwise().sum().maxCoeff() == doctest::Approx(1.0));

    auto mr = aj_asymptotics(EstimatorKind::MetaRandom, grid, b, v, nks, rw);
    CHECK(mr.bias[0] == doctest::Approx(0.4 * 0.01 - 0.6 * 0.01).epsilon(1e-12));
    CHECK(mr.variance[0] ==
          doctest::Approx(0.16 / 100.0 + 0.36 * 2.0 / 300.0).epsilon(1e-12));

    CHECK_THROWS_AS(aj_asymptotics(EstimatorKind::MetaRandom, grid, b, v, nks),
                    ConfigError);
    CHECK_THROWS_AS(aj_asymptotics(EstimatorKind::GD, grid, b, v, nks),
                    ConfigError);

    // matched per-site precision makes the random-effects weights uniform
    std::vector<Eigen::VectorXd> v_eq = {Eigen::Vector2d(1.0, 1.0),
                                         Eigen::Vector2d(3.0, 3.0)};
    auto uni = random_effects_weights(v_eq, nks, Eigen::Vector2d(0.5, 0.5));
    CHECK(uni(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
}
