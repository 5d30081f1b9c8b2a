#include <catch2/catch_amalgamated.hpp>

#include "dslmm/stats.hpp"

#include <cmath>

using namespace dslmm;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

TEST_CASE("incomplete beta against reference values", "[stats]") {
    // I_x(a,b) reference values from the regularized beta definition
    CHECK_THAT(inc_beta(0.5, 0.5, 0.5), WithinAbs(0.5, 1e-12));
    CHECK_THAT(inc_beta(2.0, 3.0, 0.5), WithinAbs(0.6875, 1e-12));
    CHECK_THAT(inc_beta(5.0, 1.0, 0.9), WithinAbs(std::pow(0.9, 5.0), 1e-12));
    CHECK(inc_beta(2.0, 2.0, 0.0) == 0.0);
    CHECK(inc_beta(2.0, 2.0, 1.0) == 1.0);
}

TEST_CASE("F distribution tail", "[stats]") {
    // pf(q, df1, df2, lower.tail=FALSE) in R
    CHECK_THAT(f_sf(4.0, 1.0, 4.0), WithinAbs(0.11611652351681559, 1e-12));
    CHECK_THAT(f_sf(1.0, 10.0, 20.0), WithinAbs(0.4755004684328913, 1e-10));
    CHECK_THAT(f_sf(2.5, 3.0, 12.0), WithinAbs(0.10915471239500632, 1e-10));
    CHECK(f_sf(0.0, 3.0, 9.0) == 1.0);
    CHECK(f_sf(std::numeric_limits<double>::infinity(), 3.0, 9.0) == 0.0);
}

TEST_CASE("chi-square tail", "[stats]") {
    CHECK_THAT(chi2_sf(3.841458820694124, 1.0), WithinAbs(0.05, 1e-10));
    CHECK_THAT(chi2_sf(18.307038053275146, 10.0), WithinAbs(0.05, 1e-10));
    CHECK_THAT(chi2_sf(1.0, 2.0), WithinAbs(std::exp(-0.5), 1e-12));
}

TEST_CASE("normal cdf symmetry", "[stats]") {
    CHECK_THAT(norm_cdf(0.0), WithinAbs(0.5, 1e-15));
    CHECK_THAT(norm_cdf(1.959963984540054), WithinAbs(0.975, 1e-12));
    CHECK_THAT(norm_cdf(-1.0) + norm_cdf(1.0), WithinAbs(1.0, 1e-14));
}

TEST_CASE("Kolmogorov tail and KS test", "[stats]") {
    // Q(x) at the classical critical point
    CHECK_THAT(kolmogorov_sf(1.3581015157406195), WithinAbs(0.05, 1e-6));
    // exact uniform grid has tiny D
    std::vector<double> u;
    for (int i = 0; i < 1000; ++i) u.push_back((i + 0.5) / 1000.0);
    const auto r = ks_uniform(u);
    CHECK(r.d < 0.001);
    CHECK(r.p > 0.99);
    // a clearly non-uniform sample is rejected
    std::vector<double> sq;
    for (int i = 0; i < 1000; ++i) {
        const double x = (i + 0.5) / 1000.0;
        sq.push_back(x * x);
    }
    CHECK(ks_uniform(sq).p < 1e-6);
}

TEST_CASE("sample helpers", "[stats]") {
    std::vector<double> v{1.0, 3.0, 11.0, 13.0};
    CHECK_THAT(mean_of(v), WithinAbs(7.0, 1e-15));
    CHECK_THAT(variance_of(v), WithinAbs((36.0 + 16.0 + 16.0 + 36.0) / 3.0, 1e-12));
    CHECK_THAT(median_of(v), WithinAbs(7.0, 1e-15));
    const auto q = quantiles_of(v, {0.0, 0.5, 1.0});
    CHECK(q[0] == 1.0);
    CHECK(q[2] == 13.0);
}
