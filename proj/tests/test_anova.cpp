#include <catch2/catch_amalgamated.hpp>

#include "dslmm/anova.hpp"
#include "dslmm/simulate.hpp"
#include "dslmm/design.hpp"
#include "dslmm/lmm.hpp"

#include <map>

using namespace dslmm;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// the 8-observation toy: M=2, t=2, n=1, J=1, L=2, cell means (0, 2, 4, 6)
// with +-1 within-cell noise
LongDataset eight_obs_toy() {
    LongDataset ds;
    ds.factors.push_back({"A", {"a1", "a2"}});
    const double cell_mean[2][2] = {{0, 2}, {4, 6}};
    int obs = 0;
    for (int m = 0; m < 2; ++m)
        for (int k = 1; k <= 2; ++k)
            for (int l = 0; l < 2; ++l) {
                Observation o;
                o.eu_id = "eu" + std::to_string(m + 1);
                o.obs_id = "o" + std::to_string(obs++);
                o.time = k;
                o.rep = l + 1;
                o.levels = {m};
                o.y = cell_mean[m][k - 1] + (l == 0 ? -1.0 : 1.0);
                ds.observations.push_back(o);
            }
    ds.validate();
    return ds;
}

// brute-force sums of squares over cell means, independent of the table code
struct BruteForce {
    double ssa = 0, sst = 0, ssat = 0, sse = 0, total = 0;
};

BruteForce brute_force_fixed(const LongDataset& ds) {
    std::map<int, std::vector<double>> by_m;
    std::map<int, std::vector<double>> by_k;
    std::map<std::pair<int, int>, std::vector<double>> by_mk;
    std::vector<double> all;
    for (const auto& o : ds.observations) {
        by_m[o.levels[0]].push_back(o.y);
        by_k[o.time].push_back(o.y);
        by_mk[{o.levels[0], o.time}].push_back(o.y);
        all.push_back(o.y);
    }
    const double grand = mean_of(all);
    BruteForce bf;
    for (auto& [m, v] : by_m) bf.ssa += v.size() * std::pow(mean_of(v) - grand, 2);
    for (auto& [k, v] : by_k) bf.sst += v.size() * std::pow(mean_of(v) - grand, 2);
    for (auto& [mk, v] : by_mk) {
        const double cm = mean_of(v);
        const double am = mean_of(by_m[mk.first]);
        const double tm = mean_of(by_k[mk.second]);
        bf.ssat += v.size() * std::pow(cm - am - tm + grand, 2);
        for (double y : v) bf.sse += (y - cm) * (y - cm);
    }
    for (double y : all) bf.total += (y - grand) * (y - grand);
    return bf;
}

} // namespace

TEST_CASE("fixed table matches the brute-force oracle on the 8-observation toy", "[anova]") {
    const auto ds = eight_obs_toy();
    const auto tab = anova_fixed(ds);
    const auto bf = brute_force_fixed(ds);

    CHECK_THAT(tab.row("A").ss, WithinAbs(32.0, 1e-10));
    CHECK_THAT(tab.row("time").ss, WithinAbs(8.0, 1e-10));
    CHECK_THAT(tab.row("A:time").ss, WithinAbs(0.0, 1e-10));
    CHECK_THAT(tab.row("error").ss, WithinAbs(8.0, 1e-10));

    CHECK_THAT(tab.row("A").ss, WithinAbs(bf.ssa, 1e-10));
    CHECK_THAT(tab.row("time").ss, WithinAbs(bf.sst, 1e-10));
    CHECK_THAT(tab.row("A:time").ss, WithinAbs(bf.ssat, 1e-10));
    CHECK_THAT(tab.row("error").ss, WithinAbs(bf.sse, 1e-10));

    CHECK_THAT(tab.row("A").f, WithinAbs(16.0, 1e-10));
    CHECK_THAT(tab.row("time").f, WithinAbs(4.0, 1e-10));
    CHECK_THAT(tab.row("A:time").f, WithinAbs(0.0, 1e-10));
    CHECK(tab.row("A").df == 1.0);
    CHECK(tab.row("error").df == 4.0);

    // additivity
    double ss_sum = 0.0, df_sum = 0.0;
    for (const auto& r : tab.rows) {
        ss_sum += r.ss;
        df_sum += r.df;
    }
    CHECK_THAT(ss_sum, WithinAbs(tab.total_ss, 1e-8));
    CHECK(df_sum == tab.total_df);
}

TEST_CASE("all-equal responses give zero SS and F=0 p=1", "[anova]") {
    LongDataset ds = eight_obs_toy();
    for (auto& o : ds.observations) o.y = 3.0;
    ds.validate();
    const auto tab = anova_fixed(ds);
    for (const auto& r : tab.rows) CHECK_THAT(r.ss, WithinAbs(0.0, 1e-12));
    CHECK(tab.row("A").f == 0.0);
    CHECK(tab.row("A").p == 1.0);
}

TEST_CASE("F statistics are shift invariant", "[anova]") {
    SimulationConfig cfg;
    cfg.n = 2;
    cfg.M = 2;
    cfg.t = 3;
    cfg.K = 2;
    cfg.J = 6;
    cfg.L = 2;
    cfg.sigma_b2 = 1;
    cfg.sigma_eta2 = 1;
    cfg.sigma_eps2 = 1;
    cfg.deltaA = 0.3;
    cfg.seed = 17;
    const auto ds = destructive_sample(simulate_complete(cfg), cfg.K, 5);
    const auto t1 = anova_fixed(ds);
    LongDataset shifted = ds;
    for (auto& o : shifted.observations) o.y += 1234.5;
    shifted.validate();
    const auto t2 = anova_fixed(shifted);
    CHECK_THAT(t1.row("A").f, WithinRel(t2.row("A").f, 1e-7));
    CHECK_THAT(t1.row("time").f, WithinRel(t2.row("time").f, 1e-7));
    CHECK_THAT(t1.row("A:time").f, WithinRel(t2.row("A:time").f, 1e-7));
}

TEST_CASE("unbalanced data is refused with a clear message", "[anova]") {
    LongDataset ds = eight_obs_toy();
    ds.observations.pop_back();
    ds.validate();
    CHECK_THROWS_WITH(anova_fixed(ds), Catch::Matchers::ContainsSubstring("unbalanced"));
}

TEST_CASE("cell-mean table: J=L=1 agrees with the fixed table", "[anova]") {
    // averaging is the identity when each (eu, time) holds one observation
    SimulationConfig cfg;
    cfg.n = 4;
    cfg.M = 2;
    cfg.t = 3;
    cfg.K = 1;
    cfg.J = 3;
    cfg.L = 1;
    cfg.sigma_b2 = 2;
    cfg.sigma_eta2 = 1;
    cfg.sigma_eps2 = 1;
    cfg.deltaA = 0.4;
    cfg.seed = 23;
    const auto ds = destructive_sample(simulate_complete(cfg), cfg.K, 2);
    const auto tf = anova_fixed(ds);
    const auto td = anova_deaton(ds);
    CHECK_THAT(td.row("A").ss, WithinRel(tf.row("A").ss, 1e-10));
    CHECK_THAT(td.row("time").ss, WithinRel(tf.row("time").ss, 1e-10));
    CHECK_THAT(td.row("A:time").ss, WithinRel(tf.row("A:time").ss, 1e-10));
}

TEST_CASE("cell-mean table recovers known unit offsets", "[anova]") {
    // two eus per treatment with offsets +-c and no noise: SS(b) = M * 2t c^2
    const double c = 2.0;
    const int t = 3;
    LongDataset ds;
    ds.factors.push_back({"A", {"a1", "a2"}});
    int obs = 0;
    for (int m = 0; m < 2; ++m)
        for (int i = 0; i < 2; ++i)
            for (int k = 1; k <= t; ++k) {
                Observation o;
                o.eu_id = "m" + std::to_string(m) + "e" + std::to_string(i);
                o.obs_id = "o" + std::to_string(obs++);
                o.time = k;
                o.rep = 1;
                o.levels = {m};
                o.y = 10.0 * m + (i == 0 ? -c : c) + 0.5 * k;
                ds.observations.push_back(o);
            }
    ds.validate();
    const auto tab = anova_deaton(ds);
    CHECK_THAT(tab.row("b").ss, WithinAbs(2.0 * 2.0 * t * c * c, 1e-10));
    CHECK(tab.row("b").df == 2.0);
    // additivity
    double ss_sum = 0.0;
    for (const auto& r : tab.rows) ss_sum += r.ss;
    CHECK_THAT(ss_sum, WithinAbs(tab.total_ss, 1e-8));
}

TEST_CASE("cell-mean F_A is calibrated under a large unit variance", "[anova][slow]") {
    // null A effect, sigma_b2 large: F_A = MS(A)/MS(b) rejects at the nominal
    // rate while MS(A)/MSE would over-reject wildly
    int reject_b = 0, reject_e = 0;
    const int reps = 400;
    for (int rep = 0; rep < reps; ++rep) {
        SimulationConfig cfg;
        cfg.n = 6;
        cfg.M = 2;
        cfg.t = 4;
        cfg.K = 2;
        cfg.J = 8;
        cfg.L = 1;
        cfg.sigma_b2 = 5;
        cfg.sigma_eta2 = 1;
        cfg.sigma_eps2 = 1;
        cfg.rho = 0;
        cfg.deltaA = 0;
        cfg.seed = 40000 + static_cast<std::uint64_t>(rep);
        const auto ds = destructive_sample(simulate_complete(cfg), cfg.K,
                                           derive_seed(cfg.seed, {1}));
        const auto tab = anova_deaton(ds);
        if (tab.row("A").p < 0.05) ++reject_b;
        const double f_wrong = tab.row("A").ms / tab.row("error").ms;
        if (f_sf(f_wrong, tab.row("A").df, tab.row("error").df) < 0.05) ++reject_e;
    }
    const double rate_b = static_cast<double>(reject_b) / reps;
    const double rate_e = static_cast<double>(reject_e) / reps;
    CHECK(rate_b > 0.02);
    CHECK(rate_b < 0.09);
    CHECK(rate_e > 0.25);
}

TEST_CASE("grouped table structure at the paper shape", "[anova]") {
    SimulationConfig cfg;
    cfg.n = 3;
    cfg.M = 2;
    cfg.t = 4;
    cfg.K = 4;
    cfg.J = 16;
    cfg.L = 2;
    cfg.sigma_b2 = 2;
    cfg.sigma_eta2 = 2;
    cfg.sigma_eps2 = 1;
    cfg.seed = 71;
    const auto ds = destructive_sample(simulate_complete(cfg), cfg.K, 11);
    const auto pa = assign_pseudo_units(ds, 2);
    const auto tab = anova_proposed(ds, pa);

    const double M = 2, n = 3, t = 4, G = 2;
    CHECK(tab.row("A").df == M - 1);
    CHECK(tab.row("b").df == M * (n - 1));
    CHECK(tab.row("eta").df == n * M * (G - 1));
    CHECK(tab.row("time").df == t - 1);
    CHECK(tab.row("A:time").df == (M - 1) * (t - 1));
    CHECK(tab.row("error").df == M * (t - 1) * (n * G - 1));
    CHECK(tab.total_df == M * n * t * G - 1);

    double ss_sum = 0.0, df_sum = 0.0;
    for (const auto& r : tab.rows) {
        ss_sum += r.ss;
        df_sum += r.df;
    }
    CHECK_THAT(ss_sum, WithinRel(tab.total_ss, 1e-10));
    CHECK(df_sum == tab.total_df);

    // degenerate all-equal responses
    LongDataset flat = ds;
    for (auto& o : flat.observations) o.y = 1.0;
    flat.validate();
    const auto pa2 = assign_pseudo_units(flat, 2);
    const auto tab2 = anova_proposed(flat, pa2);
    for (const auto& r : tab2.rows) CHECK_THAT(r.ss, WithinAbs(0.0, 1e-12));
}

TEST_CASE("grouped table rejects G=1 and unequal groups", "[anova]") {
    SimulationConfig cfg;
    cfg.n = 2;
    cfg.M = 2;
    cfg.t = 3;
    cfg.K = 3;
    cfg.J = 9;
    cfg.L = 1;
    cfg.seed = 4;
    const auto ds = destructive_sample(simulate_complete(cfg), cfg.K, 2);
    const auto pa1 = assign_pseudo_units(ds, 1);
    CHECK_THROWS_WITH(anova_proposed(ds, pa1), Catch::Matchers::ContainsSubstring("G >= 2"));
    const auto pa2 = assign_pseudo_units(ds, 2);   // cells of 3 split 2/1
    CHECK_THROWS_WITH(anova_proposed(ds, pa2), Catch::Matchers::ContainsSubstring("unequal"));
}

TEST_CASE("decoded fixed effects coincide across model bases", "[anova]") {
    SimulationConfig cfg;
    cfg.n = 4;
    cfg.M = 2;
    cfg.t = 3;
    cfg.K = 4;
    cfg.J = 12;
    cfg.L = 2;
    cfg.sigma_b2 = 3;
    cfg.sigma_eta2 = 2;
    cfg.sigma_eps2 = 1;
    cfg.deltaA = 0.6;
    cfg.deltaATmax = 0.4;
    cfg.seed = 90;
    const auto ds = destructive_sample(simulate_complete(cfg), cfg.K, 19);
    const auto pa = assign_pseudo_units(ds, 2);

    // identical least-squares treatment/time/interaction estimates on the
    // raw, cell-mean and group-mean bases (balanced dichotomous design)
    const auto dm_raw = build_design(ds, canonical_terms(ds));
    const auto fm_raw = fit_lmm(dm_raw, {false, false}, {});

    const auto agg = aggregate_eu_time_means(ds);
    const auto dm_agg = build_design(agg, canonical_terms(agg));
    const auto fm_agg = fit_lmm(dm_agg, {false, false}, {});

    CHECK((fm_raw.beta - fm_agg.beta).cwiseAbs().maxCoeff() < 1e-9);

    // the A/time/interaction sums of squares agree across bases after
    // rescaling by the number of raw observations behind each basis value
    const auto tf = anova_fixed(ds);
    const auto td = anova_deaton(ds);
    const auto tp = anova_proposed(ds, pa);
    const double per_cell = static_cast<double>(cfg.K) * cfg.L;   // raw obs per (eu, time)
    const double per_group = per_cell / 2.0;
    for (const std::string src : {"A", "time", "A:time"}) {
        CHECK_THAT(tf.row(src).ss, WithinRel(td.row(src).ss * per_cell, 1e-9));
        CHECK_THAT(tf.row(src).ss, WithinRel(tp.row(src).ss * per_group, 1e-9));
    }
}

TEST_CASE("grouped EMS identities on a complete panel with independent units", "[anova][slow]") {
    // complete panel, every unit its own pseudo-unit, rho=0: the eta mean
    // square estimates sigma_eps2/L + t*sigma_eta2 and the error mean square
    // estimates sigma_eps2/L
    double ms_eta = 0.0, ms_err = 0.0, ms_b = 0.0;
    const int reps = 80;
    SimulationConfig cfg;
    cfg.n = 4;
    cfg.M = 2;
    cfg.t = 5;
    cfg.K = 1;
    cfg.J = 6;
    cfg.L = 2;
    cfg.sigma_b2 = 5;
    cfg.sigma_eta2 = 4;
    cfg.sigma_eps2 = 2;
    cfg.rho = 0;
    for (int rep = 0; rep < reps; ++rep) {
        cfg.seed = 52000 + static_cast<std::uint64_t>(rep);
        const auto ds = simulate_complete(cfg);
        const auto pa = assign_identity_units(ds);
        const auto tab = anova_grouped(ds, pa, "reference");
        ms_eta += tab.row("eta").ms;
        ms_err += tab.row("error").ms;
        ms_b += tab.row("b").ms;
    }
    ms_eta /= reps;
    ms_err /= reps;
    ms_b /= reps;
    const double base = cfg.sigma_eps2 / cfg.L;
    CHECK_THAT(ms_err, WithinRel(base, 0.1));
    CHECK_THAT(ms_eta, WithinRel(base + cfg.t * cfg.sigma_eta2, 0.1));
    CHECK_THAT(ms_b, WithinRel(base + cfg.t * cfg.sigma_eta2 + cfg.t * cfg.J * cfg.sigma_b2, 0.35));
}

TEST_CASE("one-variance generators move only the predicted rows", "[anova][slow]") {
    // complete-panel grouped table with rho=0; switching a single variance on
    // moves only the rows whose EMS carries it
    auto mean_rows = [](double sb, double se, double sp, std::uint64_t seed0) {
        std::map<std::string, double> acc;
        const int reps = 60;
        for (int rep = 0; rep < reps; ++rep) {
            SimulationConfig cfg;
            cfg.n = 4;
            cfg.M = 2;
            cfg.t = 4;
            cfg.K = 1;
            cfg.J = 4;
            cfg.L = 2;
            cfg.sigma_b2 = sb;
            cfg.sigma_eta2 = se;
            cfg.sigma_eps2 = sp;
            cfg.rho = 0;
            cfg.seed = seed0 + static_cast<std::uint64_t>(rep);
            const auto ds = simulate_complete(cfg);
            const auto tab = anova_grouped(ds, assign_identity_units(ds), "reference");
            for (const auto& r : tab.rows) acc[r.source] += r.ms / reps;
        }
        return acc;
    };

    const auto eta_only = mean_rows(0.0, 3.0, 0.5, 61000);
    // error row stays at sigma_eps2/L while eta and b rows rise
    CHECK_THAT(eta_only.at("error"), WithinRel(0.25, 0.15));
    CHECK(eta_only.at("eta") > 4.0 * eta_only.at("error"));

    const auto b_only = mean_rows(3.0, 0.0, 0.5, 62000);
    CHECK_THAT(b_only.at("error"), WithinRel(0.25, 0.15));
    CHECK_THAT(b_only.at("eta"), WithinRel(0.25, 0.25));   // eta row unmoved
    CHECK(b_only.at("b") > 4.0 * b_only.at("eta"));
}

TEST_CASE("eta mean square approaches the error mean square without group structure", "[anova][slow]") {
    // sigma_eta2 = 0 and grouping independent of the response: MS_eta/MSE -> 1
    double ratio = 0.0;
    const int reps = 60;
    for (int rep = 0; rep < reps; ++rep) {
        SimulationConfig cfg;
        cfg.n = 4;
        cfg.M = 2;
        cfg.t = 4;
        cfg.K = 4;
        cfg.J = 16;
        cfg.L = 2;
        cfg.sigma_b2 = 2;
        cfg.sigma_eta2 = 0;
        cfg.sigma_eps2 = 2;
        cfg.rho = 0;
        cfg.seed = 63000 + static_cast<std::uint64_t>(rep);
        const auto ds = destructive_sample(simulate_complete(cfg), cfg.K, derive_seed(cfg.seed, {2}));
        const auto pa = assign_pseudo_units_random(ds, 2, derive_seed(cfg.seed, {3}));
        const auto tab = anova_grouped(ds, pa);
        ratio += tab.row("eta").ms / tab.row("error").ms / reps;
    }
    CHECK_THAT(ratio, WithinAbs(1.0, 0.15));
}

TEST_CASE("fixed-table null p-values are uniform under the model's own world", "[anova][slow]") {
    // generator with no unit effects: the pooled-error F tests are exact
    std::vector<double> pvals;
    for (int rep = 0; rep < 150; ++rep) {
        SimulationConfig cfg;
        cfg.n = 3;
        cfg.M = 2;
        cfg.t = 4;
        cfg.K = 2;
        cfg.J = 8;
        cfg.L = 2;
        cfg.sigma_b2 = 0;
        cfg.sigma_eta2 = 0;
        cfg.sigma_eps2 = 2;
        cfg.rho = 0.8;   // destruction leaves the sampled errors independent
        cfg.deltaATmax = 0;
        cfg.seed = 70000 + static_cast<std::uint64_t>(rep);
        const auto ds = destructive_sample(simulate_complete(cfg), cfg.K, derive_seed(cfg.seed, {4}));
        pvals.push_back(anova_fixed(ds).p_value("A:time"));
    }
    CHECK(ks_uniform(pvals).p > 0.01);
}
