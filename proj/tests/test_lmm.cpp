#include <catch2/catch_amalgamated.hpp>

#include "dslmm/lmm.hpp"
#include "dslmm/simulate.hpp"
#include "dslmm/grouping.hpp"

#include <algorithm>
#include <random>

using namespace dslmm;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// balanced one-way toy: y = (1, 3, 11, 13), eu = (1, 1, 2, 2)
LongDataset one_way_toy() {
    LongDataset ds;
    const double ys[4] = {1, 3, 11, 13};
    for (int i = 0; i < 4; ++i) {
        Observation o;
        o.eu_id = i < 2 ? "e1" : "e2";
        o.obs_id = "o" + std::to_string(i);
        o.time = 1;
        o.rep = i % 2 + 1;
        o.y = ys[i];
        ds.observations.push_back(o);
    }
    ds.validate();
    return ds;
}

} // namespace

TEST_CASE("REML on the balanced one-way toy equals the ANOVA moment estimators", "[lmm]") {
    const auto ds = one_way_toy();
    const auto dm = build_design(ds, {});
    const auto fm = fit_lmm(dm, {true, false}, {});

    // MSW = 2 and MSB = 100, so sigma_b2 = (100 - 2)/2 = 49
    CHECK_THAT(fm.beta(0), WithinRel(7.0, 1e-8));
    CHECK_THAT(fm.vc.sigma_eps2, WithinRel(2.0, 1e-6));
    CHECK_THAT(fm.vc.sigma_b2, WithinRel(49.0, 1e-6));
    REQUIRE(fm.b_hat.size() == 2);
    CHECK_THAT(fm.b_hat[0], WithinRel(-4.9, 1e-6));
    CHECK_THAT(fm.b_hat[1], WithinRel(4.9, 1e-6));
    // fitted (2.1, 2.1, 11.9, 11.9) -> mse = mean((y - yhat)^2) = 1.01
    CHECK_THAT(fm.mse, WithinRel(1.01, 1e-6));
    CHECK(fm.converged);
}

TEST_CASE("ML and REML agree on beta for fixed theta", "[lmm]") {
    const auto ds = one_way_toy();
    const auto dm = build_design(ds, {});
    FitOptions ml_opt, reml_opt;
    ml_opt.criterion = Criterion::ml;
    reml_opt.criterion = Criterion::reml;
    ml_opt.fixed_theta = std::vector<double>{3.7};
    reml_opt.fixed_theta = std::vector<double>{3.7};
    const auto f1 = fit_lmm(dm, {true, false}, ml_opt);
    const auto f2 = fit_lmm(dm, {true, false}, reml_opt);
    CHECK_THAT(f1.beta(0), WithinAbs(f2.beta(0), 1e-12));
}

TEST_CASE("profiled ML deviance at theta=0 reduces to least squares", "[lmm]") {
    const auto ds = one_way_toy();
    const auto dm = build_design(ds, {});
    const double dev = profiled_deviance(dm, {true, false}, {0.0}, Criterion::ml);
    // OLS on the intercept: rss = sum (y - 7)^2 = 104
    const double n = 4.0, rss = 104.0;
    const double expect = n * (1.0 + std::log(2.0 * std::numbers::pi * rss / n));
    CHECK_THAT(dev, WithinAbs(expect, 1e-10));
}

TEST_CASE("deviance is lower at the generating theta than far from it", "[lmm][slow]") {
    int better = 0;
    for (int rep = 0; rep < 20; ++rep) {
        SimulationConfig cfg;
        cfg.n = 12;
        cfg.M = 2;
        cfg.t = 4;
        cfg.K = 2;
        cfg.J = 8;
        cfg.L = 2;
        cfg.sigma_b2 = 5;
        cfg.sigma_eta2 = 0;
        cfg.sigma_eps2 = 2;
        cfg.rho = 0;
        cfg.seed = 1000 + static_cast<std::uint64_t>(rep);
        const auto ds = simulate_complete(cfg);
        const auto dm = build_design(ds, canonical_terms(ds));
        const double at_truth = profiled_deviance(dm, {true, false}, {2.5}, Criterion::reml);
        const double far = profiled_deviance(dm, {true, false}, {25.0}, Criterion::reml);
        if (at_truth <= far) ++better;
    }
    CHECK(better >= 18);
}

TEST_CASE("augmented system reproduces the BLUP formula and the engine", "[lmm]") {
    SimulationConfig cfg;
    cfg.n = 3;
    cfg.M = 2;
    cfg.t = 3;
    cfg.K = 2;
    cfg.J = 6;
    cfg.L = 2;
    cfg.sigma_b2 = 4;
    cfg.sigma_eta2 = 3;
    cfg.sigma_eps2 = 2;
    cfg.seed = 44;
    const auto complete = simulate_complete(cfg);
    const auto ds = destructive_sample(complete, cfg.K, 7);
    const auto pa = assign_pseudo_units(ds, 2);
    const auto dm = build_design(ds, canonical_terms(ds), &pa);

    FitOptions opt;
    opt.fixed_theta = std::vector<double>{2.0, 1.5};
    const auto fm = fit_lmm(dm, {true, true}, opt);

    const auto vc = VarianceComponents::make(2.0 * fm.vc.sigma_eps2, 1.5 * fm.vc.sigma_eps2,
                                             fm.vc.sigma_eps2, true, true);
    const auto as = assemble_augmented_system(dm, vc);
    const Eigen::VectorXd vhat = solve_augmented(as, fm.beta);

    REQUIRE(vhat.size() == dm.n_eu() + dm.n_zeta());
    for (long i = 0; i < dm.n_eu(); ++i)
        CHECK_THAT(vhat(i), WithinAbs(fm.b_hat[static_cast<std::size_t>(i)], 1e-8));
    for (long i = 0; i < dm.n_zeta(); ++i)
        CHECK_THAT(vhat(dm.n_eu() + i), WithinAbs(fm.eta_hat[static_cast<std::size_t>(i)], 1e-8));

    // augmented residual is orthogonal to [X~ Z~] at the joint optimum
    Eigen::VectorXd vfull(dm.n_eu() + dm.n_zeta());
    for (long i = 0; i < dm.n_eu(); ++i) vfull(i) = fm.b_hat[static_cast<std::size_t>(i)];
    for (long i = 0; i < dm.n_zeta(); ++i) vfull(dm.n_eu() + i) = fm.eta_hat[static_cast<std::size_t>(i)];
    const Eigen::VectorXd resid = as.y_tilde - as.X_tilde * fm.beta - as.Z_tilde * vfull;
    CHECK((as.X_tilde.transpose() * resid).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((as.Z_tilde.transpose() * resid).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("Delta to infinity shrinks v to zero; Delta to zero gives group deviations", "[lmm]") {
    const auto ds = one_way_toy();
    const auto dm = build_design(ds, {});

    // near-zero variance ratio: complete shrinkage
    {
        FitOptions opt;
        opt.fixed_theta = std::vector<double>{1e-12};
        const auto fm = fit_lmm(dm, {true, false}, opt);
        CHECK(std::fabs(fm.b_hat[0]) < 1e-9);
        CHECK(std::fabs(fm.b_hat[1]) < 1e-9);
        CHECK_THAT(fm.beta(0), WithinAbs(7.0, 1e-9));   // OLS intercept
    }
    // huge ratio: no penalty, group deviations from the grand mean
    {
        FitOptions opt;
        opt.fixed_theta = std::vector<double>{1e12};
        const auto fm = fit_lmm(dm, {true, false}, opt);
        CHECK_THAT(fm.b_hat[0], WithinAbs(-5.0, 1e-6));
        CHECK_THAT(fm.b_hat[1], WithinAbs(5.0, 1e-6));
    }
}

TEST_CASE("balanced shrinkage matches the closed form", "[lmm]") {
    // one eu with J observations, fixed theta: bhat = (J theta/(J theta + 1)) (ybar_i - beta)
    const auto ds = one_way_toy();
    const auto dm = build_design(ds, {});
    FitOptions opt;
    opt.fixed_theta = std::vector<double>{3.0};
    const auto fm = fit_lmm(dm, {true, false}, opt);
    const double shrink = 2.0 * 3.0 / (2.0 * 3.0 + 1.0);
    CHECK_THAT(fm.b_hat[0], WithinAbs(shrink * (2.0 - fm.beta(0)), 1e-10));
    CHECK_THAT(fm.b_hat[1], WithinAbs(shrink * (12.0 - fm.beta(0)), 1e-10));
}

TEST_CASE("zero-variance truth lands on the boundary with OLS beta", "[lmm]") {
    SimulationConfig cfg;
    cfg.n = 10;
    cfg.M = 2;
    cfg.t = 3;
    cfg.K = 2;
    cfg.J = 6;
    cfg.L = 2;
    cfg.sigma_b2 = 0;
    cfg.sigma_eta2 = 0;
    cfg.sigma_eps2 = 2;
    cfg.rho = 0;
    cfg.deltaA = 1.0;
    cfg.seed = 321;
    const auto ds = simulate_complete(cfg);
    const auto dm = build_design(ds, canonical_terms(ds));
    const auto fm = fit_lmm(dm, {true, false}, {});

    CHECK(fm.vc.sigma_b2 < 0.05);
    const Eigen::VectorXd ols =
        (dm.X.transpose() * dm.X).ldlt().solve(dm.X.transpose() * dm.y);
    CHECK((fm.beta - ols).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("Cholesky block identities hold at arbitrary theta", "[lmm]") {
    SimulationConfig cfg;
    cfg.n = 3;
    cfg.M = 2;
    cfg.t = 3;
    cfg.K = 2;
    cfg.J = 6;
    cfg.L = 1;
    cfg.sigma_b2 = 2;
    cfg.sigma_eta2 = 1;
    cfg.sigma_eps2 = 1;
    cfg.seed = 5;
    const auto ds = destructive_sample(simulate_complete(cfg), cfg.K, 3);
    const auto pa = assign_pseudo_units(ds, 2);
    const auto dm = build_design(ds, canonical_terms(ds), &pa);

    for (const auto theta : {std::vector<double>{1.0, 1.0}, {0.25, 4.0}, {10.0, 0.1}}) {
        const auto cb = compute_cholesky_blocks(dm, {true, true}, theta);
        const double lam_b = std::sqrt(theta[0]), lam_e = std::sqrt(theta[1]);
        Eigen::MatrixXd z(dm.n_obs(), dm.n_eu() + dm.n_zeta());
        z.setZero();
        for (long i = 0; i < dm.n_obs(); ++i) {
            z(i, dm.zb_index[static_cast<std::size_t>(i)]) = lam_b;
            z(i, dm.n_eu() + dm.zeta_index[static_cast<std::size_t>(i)]) = lam_e;
        }
        const Eigen::MatrixXd lhs = cb.R_ZZ.transpose() * cb.R_ZZ;
        const Eigen::MatrixXd rhs =
            z.transpose() * z + Eigen::MatrixXd::Identity(z.cols(), z.cols());
        CHECK((lhs - rhs).norm() / rhs.norm() < 1e-8);

        const Eigen::MatrixXd lhs2 = cb.R_ZZ.transpose() * cb.R_ZX;
        const Eigen::MatrixXd rhs2 = z.transpose() * dm.X;
        CHECK((lhs2 - rhs2).norm() / (1.0 + rhs2.norm()) < 1e-8);

        const Eigen::MatrixXd lhs3 = cb.R_X.transpose() * cb.R_X;
        const Eigen::MatrixXd rhs3 = dm.X.transpose() * dm.X - cb.R_ZX.transpose() * cb.R_ZX;
        CHECK((lhs3 - rhs3).norm() / (1.0 + rhs3.norm()) < 1e-8);
    }
}

TEST_CASE("order of observations does not change the fit", "[lmm]") {
    SimulationConfig cfg;
    cfg.n = 4;
    cfg.M = 2;
    cfg.t = 3;
    cfg.K = 2;
    cfg.J = 6;
    cfg.L = 2;
    cfg.sigma_b2 = 3;
    cfg.sigma_eta2 = 2;
    cfg.sigma_eps2 = 1;
    cfg.seed = 60;
    const auto ds = destructive_sample(simulate_complete(cfg), cfg.K, 2);
    const auto pa = assign_pseudo_units(ds, 2);
    const auto dm = build_design(ds, canonical_terms(ds), &pa);
    const auto fm = fit_lmm(dm, {true, true}, {});

    LongDataset perm = ds;
    std::mt19937_64 eng(8);
    std::shuffle(perm.observations.begin(), perm.observations.end(), eng);
    perm.validate();
    const auto pa2 = assign_pseudo_units(perm, 2);
    const auto dm2 = build_design(perm, canonical_terms(perm), &pa2);
    const auto fm2 = fit_lmm(dm2, {true, true}, {});

    CHECK((fm.beta - fm2.beta).cwiseAbs().maxCoeff() < 1e-10);
    CHECK_THAT(fm.vc.sigma_b2, WithinAbs(fm2.vc.sigma_b2, 1e-8));
    CHECK_THAT(fm.vc.sigma_eta2, WithinAbs(fm2.vc.sigma_eta2, 1e-8));
    CHECK_THAT(fm.vc.sigma_eps2, WithinAbs(fm2.vc.sigma_eps2, 1e-8));
    for (std::size_t i = 0; i < fm.b_hat.size(); ++i)
        CHECK_THAT(fm.b_hat[i], WithinAbs(fm2.b_hat[i], 1e-9));
}

TEST_CASE("variance component recovery at the paper scale", "[lmm][slow]") {
    // complete panels, per-unit random effects: REML recovers (5, 4, 2)
    double sb = 0, se = 0, sp = 0;
    const int reps = 4;
    for (int rep = 0; rep < reps; ++rep) {
        SimulationConfig cfg;
        cfg.n = 10;
        cfg.M = 2;
        cfg.t = 10;
        cfg.K = 4;
        cfg.J = 40;
        cfg.L = 10;    // the paper's replication; fewer replicates keep the test quick
        cfg.sigma_b2 = 5;
        cfg.sigma_eta2 = 4;
        cfg.sigma_eps2 = 2;
        cfg.rho = 0.8;
        cfg.deltaA = 0.5;
        cfg.deltaATmax = 0.5;
        cfg.seed = 9000 + static_cast<std::uint64_t>(rep);
        const auto ds = simulate_complete(cfg);
        const auto pa = assign_identity_units(ds);
        const auto dm = build_design(ds, canonical_terms(ds), &pa);
        const auto fm = fit_lmm(dm, {true, true}, {});
        sb += fm.vc.sigma_b2;
        se += fm.vc.sigma_eta2;
        sp += fm.vc.sigma_eps2;
    }
    CHECK_THAT(sb / reps, WithinRel(5.0, 0.4));   // 20 eus per rep: wide but centered
    CHECK_THAT(se / reps, WithinRel(4.0, 0.15));
    CHECK_THAT(sp / reps, WithinRel(2.0, 0.15));
}

TEST_CASE("variance component accessors expose the Delta parameterization", "[lmm]") {
    const auto vc = VarianceComponents::make(8.0, 2.0, 4.0, true, true);
    // Delta' Delta = sigma_eps2 Psi^{-1}
    CHECK_THAT(vc.delta_b() * vc.delta_b() * vc.sigma_b2, WithinAbs(vc.sigma_eps2, 1e-10));
    CHECK_THAT(vc.delta_eta() * vc.delta_eta() * vc.sigma_eta2, WithinAbs(vc.sigma_eps2, 1e-10));
    CHECK_THROWS_AS(VarianceComponents::make(-1.0, 0.0, 1.0, true, false), std::invalid_argument);
}

TEST_CASE("single experimental unit warns about confounding", "[lmm]") {
    LongDataset ds;
    for (int i = 0; i < 5; ++i) {
        Observation o;
        o.eu_id = "only";
        o.obs_id = "o" + std::to_string(i);
        o.time = 1;
        o.rep = i + 1;
        o.y = i;
        ds.observations.push_back(o);
    }
    ds.validate();
    const auto dm = build_design(ds, {});
    const auto fm = fit_lmm(dm, {true, false}, {});
    REQUIRE_FALSE(fm.warnings.empty());
    CHECK(fm.warnings[0].find("confounded") != std::string::npos);
}
