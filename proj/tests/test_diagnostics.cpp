#include <catch2/catch_amalgamated.hpp>

#include "dslmm/diagnostics.hpp"
#include "dslmm/simulate.hpp"
#include "dslmm/design.hpp"

using namespace dslmm;
using Catch::Matchers::WithinAbs;

TEST_CASE("alternating series has lag-1 autocorrelation near -1", "[diagnostics]") {
    std::vector<double> x;
    for (int i = 0; i < 400; ++i) x.push_back(i % 2 == 0 ? 1.0 : -1.0);
    const auto acf = sample_acf(x, 2);
    CHECK_THAT(acf[0], WithinAbs(-1.0, 0.02));
    CHECK_THAT(acf[1], WithinAbs(1.0, 0.02));
}

TEST_CASE("AR(1) series recovers its lag-1 correlation", "[diagnostics]") {
    Rng rng(101);
    std::vector<double> x(500);
    x[0] = rng.normal();
    for (std::size_t i = 1; i < x.size(); ++i) x[i] = 0.8 * x[i - 1] + 0.6 * rng.normal();
    const auto acf = sample_acf(x, 3);
    CHECK(acf[0] > 0.7);
    CHECK(acf[0] < 0.9);
}

TEST_CASE("acf is invariant to shift and positive scaling", "[diagnostics]") {
    Rng rng(7);
    std::vector<double> x(100), y(100);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = rng.normal();
        y[i] = 5.0 + 3.0 * x[i];
    }
    const auto a1 = sample_acf(x, 5);
    const auto a2 = sample_acf(y, 5);
    for (std::size_t h = 0; h < a1.size(); ++h) CHECK_THAT(a1[h], WithinAbs(a2[h], 1e-12));
    CHECK_THROWS_AS(sample_acf({1.0}, 1), std::invalid_argument);
}

TEST_CASE("grouped residual correlograms stay inside the white-noise band", "[diagnostics][slow]") {
    SimulationConfig cfg;   // paper configuration
    cfg.seed = 313;
    const auto ds = destructive_sample(simulate_complete(cfg), cfg.K, derive_seed(cfg.seed, {7}));
    const auto pa = assign_pseudo_units(ds, cfg.G);
    const auto dm = build_design(ds, canonical_terms(ds), &pa);
    const auto fm = fit_lmm(dm, {true, true}, {});
    const auto acf = residual_acf(fm, ds, pa, 5);
    CHECK(acf.size() == 40);   // n*M*G series
    for (const auto& r : acf) CHECK(r.n == cfg.t);
    CHECK(fraction_within_band(acf) >= 0.9);
}

TEST_CASE("anderson-darling calibration and power", "[diagnostics][slow]") {
    // normal samples reject at about the nominal rate
    int rejects = 0;
    const int reps = 300;
    for (int rep = 0; rep < reps; ++rep) {
        Rng rng(5000 + static_cast<std::uint64_t>(rep));
        std::vector<double> x(100);
        for (auto& v : x) v = rng.normal();
        if (anderson_darling(x).p < 0.05) ++rejects;
    }
    const double rate = static_cast<double>(rejects) / reps;
    CHECK(rate > 0.015);
    CHECK(rate < 0.10);

    // strongly exponential sample is rejected decisively
    Rng rng(99);
    std::vector<double> e(200);
    for (auto& v : e) v = -std::log(rng.uniform());
    CHECK(anderson_darling(e).p < 0.001);

    CHECK_THROWS_WITH(anderson_darling(std::vector<double>(20, 3.0)),
                      Catch::Matchers::ContainsSubstring("zero variance"));
    CHECK_THROWS_AS(anderson_darling({1, 2, 3}), std::invalid_argument);
}

TEST_CASE("anderson-darling statistic is location-scale invariant", "[diagnostics]") {
    Rng rng(17);
    std::vector<double> x(60), y(60);
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = rng.normal();
        y[i] = -2.5 + 0.3 * x[i];
    }
    CHECK_THAT(anderson_darling(x).statistic, WithinAbs(anderson_darling(y).statistic, 1e-12));
}

TEST_CASE("bartlett calibration, power and invariance", "[diagnostics][slow]") {
    int rejects = 0;
    const int reps = 300;
    for (int rep = 0; rep < reps; ++rep) {
        Rng rng(8000 + static_cast<std::uint64_t>(rep));
        std::vector<std::vector<double>> groups(4, std::vector<double>(25));
        for (auto& g : groups)
            for (auto& v : g) v = rng.normal();
        if (bartlett(groups).p < 0.05) ++rejects;
    }
    const double rate = static_cast<double>(rejects) / reps;
    CHECK(rate > 0.015);
    CHECK(rate < 0.10);

    // variances 1 and 16 with n = 50 each
    Rng rng(55);
    std::vector<std::vector<double>> uneq(2, std::vector<double>(50));
    for (auto& v : uneq[0]) v = rng.normal();
    for (auto& v : uneq[1]) v = 4.0 * rng.normal();
    CHECK(bartlett(uneq).p < 0.001);

    // common scaling leaves the statistic unchanged
    std::vector<std::vector<double>> scaled = uneq;
    for (auto& g : scaled)
        for (auto& v : g) v *= 7.0;
    CHECK_THAT(bartlett(uneq).statistic, WithinAbs(bartlett(scaled).statistic, 1e-9));

    // identical groups -> statistic 0, p = 1
    std::vector<double> base{1.0, 2.0, 3.0, 4.0};
    CHECK_THAT(bartlett({base, base}).statistic, WithinAbs(0.0, 1e-12));
    CHECK_THAT(bartlett({base, base}).p, WithinAbs(1.0, 1e-12));

    CHECK_THROWS_AS(bartlett({{1.0, 2.0}}), std::invalid_argument);
    CHECK_THROWS_WITH(bartlett({{1.0, 1.0}, {1.0, 2.0}}),
                      Catch::Matchers::ContainsSubstring("zero variance"));
}

TEST_CASE("random bins are deterministic and balanced", "[diagnostics]") {
    std::vector<double> v(41);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
    const auto b1 = random_bins(v, 4, 20240901);
    const auto b2 = random_bins(v, 4, 20240901);
    CHECK(b1 == b2);
    std::size_t total = 0;
    for (const auto& g : b1) {
        total += g.size();
        CHECK(g.size() >= 10);
    }
    CHECK(total == v.size());
}
