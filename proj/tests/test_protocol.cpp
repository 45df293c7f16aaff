#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fedci/dgp.hpp>
#include <fedci/linear.hpp>
#include <fedci/protocol.hpp>
#include <fedci/rng.hpp>
#include <fedci/sample.hpp>

#include <cmath>
#include <string>
#include <vector>

using namespace fedci;

namespace {

// Zero loss everywhere: runs the communication schedule without moving models.
struct FlatObjective final : LocalObjective {
    int d_;
    explicit FlatObjective(int d) : d_(d) {}
    int dim() const override { return d_; }
    void prepare(const SiteSample&) override {}
    double value(int, const Eigen::VectorXd&) const override { return 0.0; }
    Eigen::VectorXd gradient(int, const Eigen::VectorXd&) const override {
        return Eigen::VectorXd::Zero(d_);
    }
    Eigen::VectorXd prox_solve(int, const Eigen::VectorXd& anchor, double,
                               double, int) const override {
        return anchor;
    }
    double curvature_bound(int) const override { return 0.0; }
};

std::vector<SiteSample> linear_sites(int K, int n, std::uint64_t seed) {
    LinearDgpSpec spec;
    spec.site_sizes.assign(K, n);
    spec.propensities.assign(K, 0.5);
    spec.means.assign(K, Eigen::Vector2d(0.0, 0.0));
    spec.covariance = Eigen::Matrix2d::Identity();
    spec.theta_control = Eigen::Vector3d(1.0, 0.5, -0.5);
    spec.theta_treated = Eigen::Vector3d(2.0, 0.5, -0.5);
    spec.noise_sd = 1.0;
    std::vector<SiteSample> sites;
    for (int k = 0; k < K; ++k) {
        RngStream rng(derive_stream(seed, k, 0, StreamPurpose::Data));
        sites.push_back(gen_linear_site(spec, k, rng));
    }
    return sites;
}

// Noise-free regression sites sharing one coefficient vector; per-site
// covariate scales differ so local curvatures do too.
std::vector<SiteSample> planted_sites(int K, int n, int d,
                                      const Eigen::VectorXd& theta_star,
                                      std::uint64_t seed) {
    std::vector<SiteSample> sites;
    for (int k = 0; k < K; ++k) {
        RngStream rng(derive_stream(seed, k, 0, StreamPurpose::Data));
        const double scale = 0.5 + 0.4 * k;
        Eigen::MatrixXd X(n, d);
        for (int i = 0; i < n; ++i)
            X.row(i) = (scale * rng.normal_vector(d)).transpose();
        Eigen::VectorXd Y = X * theta_star;
        Eigen::VectorXi W(n);
        for (int i = 0; i < n; ++i) W[i] = i % 2;
        sites.push_back(SiteSample::linear(k, X, W, Y));
    }
    return sites;
}

// Reference solve of the pooled least-squares problem over every row.
Eigen::VectorXd pooled_ols(const std::vector<SiteSample>& sites,
                           bool intercept) {
    long n = 0;
    for (const auto& s : sites) n += s.n();
    const int d = sites.front().dim();
    const int p = d + (intercept ? 1 : 0);
    Eigen::MatrixXd A(n, p);
    Eigen::VectorXd y(n);
    long r = 0;
    for (const auto& s : sites) {
        for (int i = 0; i < s.n(); ++i) {
            int c = 0;
            if (intercept) A(r, c++) = 1.0;
            for (int j = 0; j < d; ++j) A(r, c++) = s.X()(i, j);
            y(r) = s.Y()[i];
            ++r;
        }
    }
    return A.colPivHouseholderQr().solve(y);
}

}  // namespace

TEST_CASE("metropolis mixing on standard graphs") {
    auto ring4 = Topology::ring(4);
    CHECK_NOTHROW(ring4.validate());
    CHECK(ring4.total_directed_edges() == 8);
    for (int k = 0; k < 4; ++k) {
        CHECK(ring4.mixing.row(k).sum() == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(ring4.mixing(k, k) == doctest::Approx(1.0 / 3.0));
        CHECK(ring4.mixing(k, (k + 1) % 4) == doctest::Approx(1.0 / 3.0));
    }
    // doubly stochastic by symmetry
    CHECK((ring4.mixing - ring4.mixing.transpose()).cwiseAbs().maxCoeff() <
          1e-15);

    auto pair = Topology::ring(2);
    CHECK(pair.total_directed_edges() == 2);
    CHECK(pair.mixing(0, 1) == doctest::Approx(0.5));

    auto full3 = Topology::complete(3);
    CHECK(full3.total_directed_edges() == 6);
    CHECK(full3.mixing(0, 1) == doctest::Approx(1.0 / 3.0));
    CHECK(full3.mixing(0, 0) == doctest::Approx(1.0 / 3.0));

    // path graph: the center node has degree 2, ends get larger self-weights
    auto path = Topology::metropolis({{1}, {0, 2}, {1}});
    CHECK(path.mixing(0, 1) == doctest::Approx(1.0 / 3.0));
    CHECK(path.mixing(0, 0) == doctest::Approx(2.0 / 3.0));
    CHECK(path.mixing(1, 1) == doctest::Approx(1.0 / 3.0));
    CHECK_NOTHROW(path.validate());

    CHECK_THROWS_AS(Topology::ring(1), ConfigError);
}

TEST_CASE("degenerate mixing matrices are rejected") {
    Topology t;
    t.K = 2;
    t.neighbors = {{}, {}};
    t.mixing = Eigen::Matrix2d::Identity();
    CHECK_THROWS_WITH_AS(t.validate(),
                         doctest::Contains("not connected"), ConfigError);

    t.neighbors = {{1}, {0}};
    t.mixing << 0.5, 0.5, 0.0, 1.0;
    CHECK_THROWS_WITH_AS(t.validate(),
                         doctest::Contains("asymmetric"), ConfigError);

    t.mixing << 0.7, 0.3, 0.3, 0.6;
    CHECK_THROWS_WITH_AS(t.validate(),
                         doctest::Contains("sum to 1"), ConfigError);
}

TEST_CASE("raw rows are fenced while a federation is active") {
    auto sites = linear_sites(2, 30, 99);
    // outside any federation everything is reachable
    CHECK_NOTHROW(sites[1].X());
    {
        FederationScope fed;
        // coordinator context: no site may expose rows
        CHECK_THROWS_AS(sites[0].Y(), FederationViolation);
        {
            SiteScope scope(sites[0].site_id());
            CHECK_NOTHROW(sites[0].X());
            CHECK_NOTHROW(sites[0].W());
            CHECK_THROWS_AS(sites[1].X(), FederationViolation);
            // metadata stays visible everywhere
            CHECK(sites[1].n() == 30);
            CHECK(sites[1].dim() == 2);
        }
    }
    CHECK_NOTHROW(sites[0].Y());
}

TEST_CASE("least-squares site objective: gradients and proximal solves") {
    auto sites = linear_sites(1, 120, 4242);
    ArmLeastSquares obj(-1);
    obj.prepare(sites[0]);
    REQUIRE(obj.dim() == 3);

    RngStream rng(7);
    Eigen::VectorXd theta = rng.normal_vector(3);
    Eigen::VectorXd g = obj.gradient(0, theta);
    Eigen::VectorXd fd = obj.fd_gradient(0, theta);
    CHECK((g - fd).cwiseAbs().maxCoeff() < 1e-6);

    // lambda = 0 is the plain least-squares solution
    Eigen::VectorXd direct = pooled_ols({sites[0]}, true);
    Eigen::VectorXd prox0 = obj.prox_solve(0, theta, 0.0, 1e-10, 50);
    CHECK((prox0 - direct).cwiseAbs().maxCoeff() < 1e-8);

    // a huge proximal pull pins the solution at the anchor
    Eigen::VectorXd proxinf = obj.prox_solve(0, theta, 1e9, 1e-10, 50);
    CHECK((proxinf - theta).cwiseAbs().maxCoeff() < 1e-6);

    CHECK_THROWS_AS(ArmLeastSquares(2), ConfigError);
}

TEST_CASE("proximal averaging with identical sites converges to their fit") {
    auto one = linear_sites(1, 150, 31);
    std::vector<SiteSample> sites = {one[0], one[0], one[0]};
    ArmLeastSquares obj(-1);
    ProtocolConfig cfg;
    cfg.rounds = 60;
    cfg.lambda = 1.0;
    auto res = run_fedprox(sites, obj, cfg);
    Eigen::VectorXd direct = pooled_ols({one[0]}, true);
    CHECK((res.global - direct).cwiseAbs().maxCoeff() < 1e-8);

    auto audit = audit_communication(res.log, ProtocolKind::FedProx, 3, 60);
    CHECK(audit.ok);
    CHECK(res.log.rounds() == 61);
    CHECK(res.log.total_scalars() == 60 * (3 * 3 + 3 * 3) + 3 * 3);
}

TEST_CASE("distributed gradient descent lands on the pooled fit") {
    auto sites = linear_sites(2, 400, 555);
    ArmLeastSquares obj(-1);
    ProtocolConfig cfg;
    cfg.rounds = 80;
    auto res = run_gd(sites, obj, cfg);
    Eigen::VectorXd direct = pooled_ols(sites, true);
    CHECK((res.global - direct).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(audit_communication(res.log, ProtocolKind::GD, 3, 80).ok);
}

TEST_CASE("a reckless step size is detected, not silently diverged") {
    auto sites = linear_sites(2, 100, 808);
    ArmLeastSquares obj(-1);
    ProtocolConfig cfg;
    cfg.rounds = 100;
    cfg.step_size = 1000.0;
    CHECK_THROWS_WITH_AS(run_gd(sites, obj, cfg),
                         doctest::Contains("round"), StepSizeTooLarge);
}

TEST_CASE("personalized local steps settle at each site's own optimum") {
    auto sites = linear_sites(3, 200, 17);
    ArmLeastSquares obj(-1);
    ProtocolConfig cfg;
    cfg.rounds = 1;
    cfg.local_steps = 600;
    auto res = run_personalized(sites, obj, cfg);
    for (int k = 0; k < 3; ++k) {
        Eigen::VectorXd own = pooled_ols({sites[k]}, true);
        CHECK((res.per_site[k] - own).cwiseAbs().maxCoeff() < 1e-6);
    }
    CHECK(audit_communication(res.log, ProtocolKind::Personalized, 3, 1).ok);
}

TEST_CASE("peer-to-peer descent reaches consensus on a shared minimizer") {
    Eigen::VectorXd theta_star(3);
    theta_star << 1.0, -2.0, 0.5;
    auto sites = planted_sites(5, 60, 3, theta_star, 91);
    ArmLeastSquares obj(-1, /*intercept=*/false);
    ProtocolConfig cfg;
    cfg.rounds = 800;
    auto topo = Topology::ring(5);
    auto res = run_p2p(sites, obj, topo, cfg);
    for (int k = 0; k < 5; ++k)
        CHECK((res.per_site[k] - theta_star).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(audit_communication(res.log, ProtocolKind::P2P, 3, 800,
                              topo.total_directed_edges())
              .ok);
}

TEST_CASE("gossip mixing conserves the network mean") {
    auto topo = Topology::ring(5);
    // pure mixing applied to arbitrary states: the uniform mean is invariant
    RngStream rng(12);
    Eigen::MatrixXd states(5, 3);
    for (int k = 0; k < 5; ++k)
        states.row(k) = rng.normal_vector(3).transpose();
    Eigen::RowVector3d mean0 = states.colwise().mean();
    for (int t = 0; t < 200; ++t) states = topo.mixing * states;
    CHECK((states.colwise().mean() - mean0).cwiseAbs().maxCoeff() < 1e-12);

    // one protocol round with interim gradient steps: the mean of the mixed
    // models equals the mean of the pre-mix models. A separate probe instance
    // recomputes the interim states; the runner owns its own objective.
    auto sites = linear_sites(3, 50, 2020);
    ArmLeastSquares probe(-1, false);
    for (const auto& s : sites) probe.prepare(s);
    double lmax = 0;
    for (int k = 0; k < 3; ++k) lmax = std::max(lmax, probe.curvature_bound(k));
    const double eta = 1.0 / lmax;
    Eigen::Vector2d interim_mean = Eigen::Vector2d::Zero();
    for (int k = 0; k < 3; ++k)
        interim_mean -= eta / 3.0 * probe.gradient(k, Eigen::Vector2d::Zero());

    ArmLeastSquares obj(-1, false);
    ProtocolConfig cfg;
    cfg.rounds = 1;
    auto res = run_p2p(sites, obj, Topology::complete(3), cfg);
    Eigen::Vector2d model_mean = Eigen::Vector2d::Zero();
    for (int k = 0; k < 3; ++k) model_mean += res.per_site[k] / 3.0;
    CHECK((model_mean - interim_mean).cwiseAbs().maxCoeff() < 1e-12);

    // a flat objective reports zero curvature, so the step size is zero and
    // mixing alone leaves a consensus state untouched
    FlatObjective flat(2);
    ProtocolConfig quiet;
    quiet.rounds = 10;
    quiet.init = Eigen::Vector2d(0.7, -0.3);
    auto still = run_p2p(sites, flat, Topology::ring(3), quiet);
    for (int k = 0; k < 3; ++k)
        CHECK((still.per_site[k] - quiet.init).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("shared projection and local heads recover an exact factor model") {
    const int d = 3, n = 300;
    Eigen::VectorXd f_star(d);
    f_star << 0.6, 0.8, 0.0;
    Eigen::Vector2d head0(0.0, 1.0), head1(1.0, 2.0);
    std::vector<SiteSample> sites;
    for (int k = 0; k < 2; ++k) {
        RngStream rng(derive_stream(606, k, 0, StreamPurpose::Data));
        Eigen::MatrixXd X(n, d);
        Eigen::VectorXi W(n);
        Eigen::VectorXd Y(n);
        for (int i = 0; i < n; ++i) {
            X.row(i) = rng.normal_vector(d).transpose();
            W[i] = i % 2;
            const double z = X.row(i).dot(f_star);
            Y[i] = W[i] ? head1[0] + head1[1] * z : head0[0] + head0[1] * z;
        }
        sites.push_back(SiteSample::linear(k, X, W, Y));
    }
    ProtocolConfig cfg;
    cfg.rounds = 8;
    cfg.lambda = 1e-6;
    cfg.tol = 1e-12;
    auto res = run_decomposition(sites, cfg, 1);
    // the projection scale is absorbed by the heads, so compare predictions
    RngStream probe_rng(777);
    for (int probe = 0; probe < 10; ++probe) {
        Eigen::VectorXd x = probe_rng.normal_vector(d);
        const double z_true = x.dot(f_star);
        const double z_hat = (res.shared.transpose() * x)[0];
        for (int a = 0; a < 2; ++a) {
            const auto& h = res.heads[0][a];
            const double want =
                a ? head1[0] + head1[1] * z_true : head0[0] + head0[1] * z_true;
            CHECK(std::abs(h[0] + h[1] * z_hat - want) < 1e-4);
        }
    }
    CHECK(audit_communication(res.log, ProtocolKind::Decomposition, d, 8).ok);
}

TEST_CASE("freezing identity heads reduces the factor model to averaging") {
    auto sites = linear_sites(2, 150, 3131);
    ProtocolConfig cfg;
    cfg.rounds = 7;
    cfg.lambda = 0.7;
    // both runners must start from the same anchor for the trajectories to
    // coincide; the decomposition default is a coordinate projection, not 0
    cfg.init = Eigen::VectorXd::Zero(2);
    std::array<Eigen::VectorXd, 2> heads;
    heads[0] = Eigen::Vector2d(0.0, 1.0);
    heads[1] = Eigen::Vector2d(0.0, 1.0);
    auto dec = run_decomposition(sites, cfg, 1, heads);

    ArmLeastSquares obj(-1, /*intercept=*/false);
    auto prox = run_fedprox(sites, obj, cfg);
    CHECK((dec.shared.col(0) - prox.global).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("local solver failures carry the site and round") {
    SurvivalDgpSpec spec;
    spec.site_sizes = {100};
    spec.means = {Eigen::VectorXd::Zero(1)};
    spec.covariance = Eigen::MatrixXd::Identity(1, 1);
    spec.cause_betas = {Eigen::VectorXd::Constant(1, 0.5)};
    spec.baselines = {{BaselineHazard::constant(1.0)}};
    spec.censoring_rate = 0.3;
    RngStream rng(derive_stream(404, 0, 0, StreamPurpose::Data));
    std::vector<SiteSample> sites;
    sites.push_back(gen_cox_site(spec, 0, rng));

    CoxPartialObjective obj(1);
    ProtocolConfig cfg;
    cfg.rounds = 3;
    cfg.lambda = 0.5;
    cfg.tol = 1e-14;
    cfg.max_local_iters = 1;
    try {
        run_fedprox(sites, obj, cfg);
        FAIL("expected the proximal subproblem to run out of iterations");
    } catch (const NonConvergence& e) {
        const std::string msg = e.what();
        CHECK(msg.find("run_fedprox: site 0, round 1") != std::string::npos);
    }
}

TEST_CASE("meta and one-shot pipelines match their declared wire format") {
    auto sites = linear_sites(3, 120, 64);
    auto meta = run_meta_ate(sites, WeightScheme{WeightKind::SampleSize});
    CHECK(meta.locals.size() == 3);
    CHECK(audit_communication(meta.log, ProtocolKind::Meta, 1, 1).ok);
    // the combination equals what the locals produce off-line
    std::vector<AteEstimate> locals;
    for (const auto& s : sites) locals.push_back(local_ate(s));
    auto direct = meta_combine(locals, WeightScheme{WeightKind::SampleSize});
    CHECK(meta.estimate.value == doctest::Approx(direct.value).epsilon(1e-12));

    auto ivw = run_one_shot(sites, OneShotMode::GramWeighted);
    auto pooled = local_ate(concat_samples(sites));
    CHECK(std::abs(ivw.estimate.value - pooled.value) < 1e-8);
    CHECK(audit_communication(ivw.log, ProtocolKind::OneShotIVW, 3, 2).ok);

    auto sw = run_one_shot(sites, OneShotMode::SampleSize);
    CHECK(audit_communication(sw.log, ProtocolKind::OneShotSW, 3, 2).ok);
    CHECK(sw.log.total_scalars() <  ivw.log.total_scalars());
}

TEST_CASE("the audit catches tampered logs") {
    auto sites = linear_sites(2, 80, 2024);
    ArmLeastSquares obj(-1);
    ProtocolConfig cfg;
    cfg.rounds = 4;
    auto res = run_fedprox(sites, obj, cfg);

    auto good = audit_communication(res.log, ProtocolKind::FedProx, 3, 4);
    CHECK(good.ok);

    auto tampered = res.log;
    tampered.entries[2].site_to_server += 1;
    auto bad = audit_communication(tampered, ProtocolKind::FedProx, 3, 4);
    CHECK_FALSE(bad.ok);
    CHECK(bad.first_bad_round == 3);

    auto wrong_dim = audit_communication(res.log, ProtocolKind::FedProx, 4, 4);
    CHECK_FALSE(wrong_dim.ok);
    CHECK(wrong_dim.detail.find("param_dim") != std::string::npos);

    auto truncated = res.log;
    truncated.entries.pop_back();
    auto short_log = audit_communication(truncated, ProtocolKind::FedProx, 3, 4);
    CHECK_FALSE(short_log.ok);
    CHECK(short_log.detail.find("rounds") != std::string::npos);
}
