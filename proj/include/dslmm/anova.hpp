#pragma once

// Balanced analysis-of-variance tables for the competing models. Each table
// works on the response basis its model is defined on:
//   - fixed effects: raw observations,
//   - cell-mean model: one mean per (eu, time) cell (split-plot layout),
//   - grouped model: one mean per (eu, pseudo-unit, time) cell.
// On these bases the printed degrees of freedom, the expected mean squares
// and the F denominators are all internally consistent; fixed-effect
// estimates decoded from any of the three designs coincide in balanced
// data.

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dslmm/data.hpp"
#include "dslmm/grouping.hpp"
#include "dslmm/stats.hpp"

namespace dslmm {

struct AnovaRow {
    std::string source;
    double df = 0.0;
    double ss = 0.0;
    double ms = 0.0;
    std::string ems;
    double f = std::numeric_limits<double>::quiet_NaN();
    double p = std::numeric_limits<double>::quiet_NaN();

    bool has_f() const { return !std::isnan(f); }
};

struct AnovaTable {
    std::string model;            // fixed | deaton | proposed | reference
    std::vector<AnovaRow> rows;   // effect and error rows
    double total_ss = 0.0;
    double total_df = 0.0;

    const AnovaRow& row(const std::string& source) const {
        for (const auto& r : rows)
            if (r.source == source) return r;
        throw std::invalid_argument("no ANOVA row named '" + source + "'");
    }

    double p_value(const std::string& source) const {
        const auto& r = row(source);
        if (!r.has_f()) throw std::invalid_argument("row '" + source + "' carries no F test");
        return r.p;
    }
};

// ---------------------------------------------------------------------------
// canonical balanced layout
// ---------------------------------------------------------------------------

namespace detail {

struct CanonicalLayout {
    std::string factor;                     // treatment factor name
    int M = 0;                              // treatment levels
    int t = 0;
    int n = 0;                              // eus per treatment
    std::size_t cell = 0;                   // observations per (eu, time)
    std::map<std::string, int> eu_treatment; // eu -> level index
};

inline CanonicalLayout canonical_layout(const LongDataset& ds) {
    if (ds.factors.size() != 1)
        throw std::invalid_argument("balanced ANOVA expects exactly one treatment factor, found " +
                                    std::to_string(ds.factors.size()));
    CanonicalLayout lo;
    lo.factor = ds.factors[0].name;
    lo.M = static_cast<int>(ds.factors[0].levels.size());
    lo.t = ds.t;

    std::map<std::pair<std::string, int>, std::size_t> cells;
    for (const auto& o : ds.observations) {
        auto it = lo.eu_treatment.find(o.eu_id);
        if (it == lo.eu_treatment.end()) lo.eu_treatment[o.eu_id] = o.levels[0];
        else if (it->second != o.levels[0])
            throw std::invalid_argument("experimental unit " + o.eu_id + " appears under two treatments");
        cells[{o.eu_id, o.time}]++;
    }
    std::vector<int> per_treatment(static_cast<std::size_t>(lo.M), 0);
    for (const auto& [eu, m] : lo.eu_treatment) per_treatment[static_cast<std::size_t>(m)]++;
    lo.n = per_treatment[0];
    for (int m = 0; m < lo.M; ++m)
        if (per_treatment[static_cast<std::size_t>(m)] != lo.n)
            throw std::invalid_argument("unbalanced data: treatments have unequal numbers of experimental units");
    if (cells.size() != lo.eu_treatment.size() * static_cast<std::size_t>(lo.t))
        throw std::invalid_argument("unbalanced data: some (eu, time) cells are empty");
    lo.cell = cells.begin()->second;
    for (const auto& [key, c] : cells)
        if (c != lo.cell)
            throw std::invalid_argument("unbalanced data: (eu, time) cell counts differ");
    return lo;
}

inline void finish_f_tests(AnovaTable& tab, const std::vector<std::pair<std::string, std::string>>& tests) {
    // tests: (numerator row, denominator row)
    for (const auto& [num, den] : tests) {
        for (auto& r : tab.rows) {
            if (r.source != num) continue;
            const auto& d = tab.row(den);
            if (r.df <= 0.0 || d.df <= 0.0) continue;
            if (d.ms <= 0.0) {
                // degenerate data with zero variation in the denominator
                if (r.ss <= 0.0) { r.f = 0.0; r.p = 1.0; }
                else { r.f = std::numeric_limits<double>::infinity(); r.p = 0.0; }
            } else {
                r.f = r.ms / d.ms;
                r.p = f_sf(r.f, r.df, d.df);
            }
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Table for the fixed-effects model (raw observations)
// ---------------------------------------------------------------------------

inline AnovaTable anova_fixed(const LongDataset& ds) {
    const auto lo = detail::canonical_layout(ds);
    const double u = static_cast<double>(lo.cell);   // J*L per (eu, time)
    const double M = lo.M, t = lo.t, n = lo.n;
    if (n * u <= 1.0)
        throw std::invalid_argument("zero error degrees of freedom: one observation per (treatment, time) cell");

    std::map<int, double> sum_m;
    std::map<int, double> sum_k;
    std::map<std::pair<int, int>, double> sum_mk;
    double total = 0.0, total_sq = 0.0;
    for (const auto& o : ds.observations) {
        const int m = o.levels[0];
        sum_m[m] += o.y;
        sum_k[o.time] += o.y;
        sum_mk[{m, o.time}] += o.y;
        total += o.y;
        total_sq += o.y * o.y;
    }
    const double N = M * n * t * u;
    const double cf = total * total / N;

    double ssa = -cf, sst = -cf, ssat = cf;
    for (const auto& [m, s] : sum_m) ssa += s * s / (n * t * u);
    for (const auto& [k, s] : sum_k) sst += s * s / (M * n * u);
    for (const auto& [mk, s] : sum_mk) ssat += s * s / (n * u);
    for (const auto& [m, s] : sum_m) ssat -= s * s / (n * t * u);
    for (const auto& [k, s] : sum_k) ssat -= s * s / (M * n * u);
    double sse = total_sq;
    for (const auto& [mk, s] : sum_mk) sse -= s * s / (n * u);

    AnovaTable tab;
    tab.model = "fixed";
    tab.total_ss = total_sq - cf;
    tab.total_df = N - 1.0;
    tab.rows.push_back({"A", M - 1.0, ssa, ssa / (M - 1.0),
                        "s2_eps + ntJL/(M-1) sum A^2"});
    tab.rows.push_back({"time", t - 1.0, sst, sst / (t - 1.0),
                        "s2_eps + MnJL/(t-1) sum T^2"});
    tab.rows.push_back({"A:time", (M - 1.0) * (t - 1.0), ssat, ssat / ((M - 1.0) * (t - 1.0)),
                        "s2_eps + nJL/((M-1)(t-1)) sum AT^2"});
    const double dfe = M * t * (n * u - 1.0);
    tab.rows.push_back({"error", dfe, sse, sse / dfe, "s2_eps"});
    detail::finish_f_tests(tab, {{"A", "error"}, {"time", "error"}, {"A:time", "error"}});
    return tab;
}

// ---------------------------------------------------------------------------
// Table for the cell-mean (pseudo-panel) model
// ---------------------------------------------------------------------------

inline AnovaTable anova_deaton(const LongDataset& ds) {
    const LongDataset agg = aggregate_eu_time_means(ds);
    const auto lo = detail::canonical_layout(agg);
    const double M = lo.M, t = lo.t, n = lo.n;
    if (lo.n < 2)
        throw std::invalid_argument("cell-mean table needs at least 2 experimental units per treatment");

    std::map<int, double> sum_m;
    std::map<int, double> sum_k;
    std::map<std::pair<int, int>, double> sum_mk;
    std::map<std::string, double> sum_i;
    double total = 0.0, total_sq = 0.0;
    for (const auto& o : agg.observations) {
        const int m = o.levels[0];
        sum_m[m] += o.y;
        sum_k[o.time] += o.y;
        sum_mk[{m, o.time}] += o.y;
        sum_i[o.eu_id] += o.y;
        total += o.y;
        total_sq += o.y * o.y;
    }
    const double N = M * n * t;
    const double cf = total * total / N;

    double ssa = -cf, sst = -cf, ssat = cf, ssb = 0.0;
    for (const auto& [m, s] : sum_m) ssa += s * s / (n * t);
    for (const auto& [k, s] : sum_k) sst += s * s / (M * n);
    for (const auto& [mk, s] : sum_mk) ssat += s * s / n;
    for (const auto& [m, s] : sum_m) ssat -= s * s / (n * t);
    for (const auto& [k, s] : sum_k) ssat -= s * s / (M * n);
    for (const auto& [eu, s] : sum_i) ssb += s * s / t;
    for (const auto& [m, s] : sum_m) ssb -= s * s / (n * t);
    // split-plot residual
    double sse = total_sq;
    for (const auto& [mk, s] : sum_mk) sse -= s * s / n;
    for (const auto& [eu, s] : sum_i) sse -= s * s / t;
    for (const auto& [m, s] : sum_m) sse += s * s / (n * t);

    AnovaTable tab;
    tab.model = "deaton";
    tab.total_ss = total_sq - cf;
    tab.total_df = N - 1.0;
    tab.rows.push_back({"A", M - 1.0, ssa, ssa / (M - 1.0),
                        "s2_ebar + t s2_b + tn/(M-1) sum A^2"});
    tab.rows.push_back({"b", M * (n - 1.0), ssb, ssb / (M * (n - 1.0)),
                        "s2_ebar + t s2_b"});
    tab.rows.push_back({"time", t - 1.0, sst, sst / (t - 1.0),
                        "s2_ebar + Mn/(t-1) sum T^2"});
    tab.rows.push_back({"A:time", (M - 1.0) * (t - 1.0), ssat, ssat / ((M - 1.0) * (t - 1.0)),
                        "s2_ebar + n/((M-1)(t-1)) sum AT^2"});
    const double dfe = M * (t - 1.0) * (n - 1.0);
    tab.rows.push_back({"error", dfe, sse, sse / dfe, "s2_ebar"});
    detail::finish_f_tests(tab, {{"A", "b"}, {"b", "error"}, {"time", "error"}, {"A:time", "error"}});
    return tab;
}

// ---------------------------------------------------------------------------
// Table for the grouped (pseudo-unit) model; with the identity per-unit
// grouping on a complete panel this is the full-model reference table
// ---------------------------------------------------------------------------

inline AnovaTable anova_grouped(const LongDataset& ds, const PseudoUnitAssignment& pa,
                                const std::string& model_tag = "proposed") {
    if (pa.group_of_row.size() != ds.size())
        throw std::invalid_argument("grouping does not cover the dataset");

    // group-mean basis values
    std::map<std::tuple<std::string, int, int>, std::pair<double, std::size_t>> cells; // (eu,g,k)
    std::map<std::string, int> eu_treatment;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& o = ds.observations[i];
        auto& [sum, cnt] = cells[{o.eu_id, pa.group_of_row[i], o.time}];
        sum += o.y;
        cnt += 1;
        auto it = eu_treatment.find(o.eu_id);
        if (it == eu_treatment.end()) eu_treatment[o.eu_id] = o.levels[0];
        else if (it->second != o.levels[0])
            throw std::invalid_argument("experimental unit " + o.eu_id + " appears under two treatments");
    }
    if (ds.factors.size() != 1)
        throw std::invalid_argument("balanced ANOVA expects exactly one treatment factor");

    // balance checks: equal group-cell sizes, every (eu, group) at every time
    std::map<std::string, std::set<int>> groups_of_eu;
    std::size_t cell_size = cells.begin()->second.second;
    for (const auto& [key, sc] : cells) {
        if (sc.second != cell_size)
            throw std::invalid_argument("unequal pseudo-unit group sizes: table requires a balanced grouping");
        groups_of_eu[std::get<0>(key)].insert(std::get<1>(key));
    }
    const int G = static_cast<int>(groups_of_eu.begin()->second.size());
    for (const auto& [eu, gs] : groups_of_eu)
        if (static_cast<int>(gs.size()) != G)
            throw std::invalid_argument("experimental units carry different numbers of pseudo-units");
    if (G < 2)
        throw std::invalid_argument("grouped table needs G >= 2: the pseudo-unit row has zero degrees of freedom");
    for (const auto& [eu, gs] : groups_of_eu)
        for (int g : gs)
            for (int k = 1; k <= ds.t; ++k)
                if (!cells.count({eu, g, k}))
                    throw std::invalid_argument("pseudo-unit " + eu + "/" + std::to_string(g) +
                                                " has no observation at time " + std::to_string(k));

    const double M = static_cast<double>(ds.factors[0].levels.size());
    const double t = ds.t;
    std::vector<int> per_treatment(static_cast<std::size_t>(M), 0);
    for (const auto& [eu, m] : eu_treatment) per_treatment[static_cast<std::size_t>(m)]++;
    const double n = per_treatment[0];
    for (int c : per_treatment)
        if (c != per_treatment[0])
            throw std::invalid_argument("unbalanced data: treatments have unequal numbers of experimental units");
    if (n < 2)
        throw std::invalid_argument("grouped table needs at least 2 experimental units per treatment");

    std::map<int, double> sum_m;
    std::map<int, double> sum_k;
    std::map<std::pair<int, int>, double> sum_mk;
    std::map<std::string, double> sum_i;
    std::map<std::pair<std::string, int>, double> sum_ig;
    double total = 0.0, total_sq = 0.0;
    for (const auto& [key, sc] : cells) {
        const auto& [eu, g, k] = key;
        const double x = sc.first / static_cast<double>(sc.second);
        const int m = eu_treatment[eu];
        sum_m[m] += x;
        sum_k[k] += x;
        sum_mk[{m, k}] += x;
        sum_i[eu] += x;
        sum_ig[{eu, g}] += x;
        total += x;
        total_sq += x * x;
    }
    const double Gd = G;
    const double N = M * n * t * Gd;
    const double cf = total * total / N;

    double ssa = -cf, sst = -cf, ssat = cf, ssb = 0.0, sseta = 0.0;
    for (const auto& [m, s] : sum_m) ssa += s * s / (n * t * Gd);
    for (const auto& [k, s] : sum_k) sst += s * s / (M * n * Gd);
    for (const auto& [mk, s] : sum_mk) ssat += s * s / (n * Gd);
    for (const auto& [m, s] : sum_m) ssat -= s * s / (n * t * Gd);
    for (const auto& [k, s] : sum_k) ssat -= s * s / (M * n * Gd);
    for (const auto& [eu, s] : sum_i) ssb += s * s / (t * Gd);
    for (const auto& [m, s] : sum_m) ssb -= s * s / (n * t * Gd);
    for (const auto& [ig, s] : sum_ig) sseta += s * s / t;
    for (const auto& [eu, s] : sum_i) sseta -= s * s / (t * Gd);
    // residual after (eu, group) means and (treatment, time) means
    double sse = total_sq;
    for (const auto& [mk, s] : sum_mk) sse -= s * s / (n * Gd);
    for (const auto& [ig, s] : sum_ig) sse -= s * s / t;
    for (const auto& [m, s] : sum_m) sse += s * s / (n * t * Gd);

    AnovaTable tab;
    tab.model = model_tag;
    tab.total_ss = total_sq - cf;
    tab.total_df = N - 1.0;
    tab.rows.push_back({"A", M - 1.0, ssa, ssa / (M - 1.0),
                        "s2_e' + t s2_eta' + tG s2_b + ntG/(M-1) sum A^2"});
    tab.rows.push_back({"b", M * (n - 1.0), ssb, ssb / (M * (n - 1.0)),
                        "s2_e' + t s2_eta' + tG s2_b"});
    tab.rows.push_back({"eta", n * M * (Gd - 1.0), sseta, sseta / (n * M * (Gd - 1.0)),
                        "s2_e' + t s2_eta'"});
    tab.rows.push_back({"time", t - 1.0, sst, sst / (t - 1.0),
                        "s2_e' + MnG/(t-1) sum T^2"});
    tab.rows.push_back({"A:time", (M - 1.0) * (t - 1.0), ssat, ssat / ((M - 1.0) * (t - 1.0)),
                        "s2_e' + nG/((M-1)(t-1)) sum AT^2"});
    const double dfe = M * (t - 1.0) * (n * Gd - 1.0);
    tab.rows.push_back({"error", dfe, sse, sse / dfe, "s2_e'"});
    detail::finish_f_tests(tab, {{"A", "b"}, {"b", "eta"}, {"eta", "error"},
                                 {"time", "error"}, {"A:time", "error"}});
    return tab;
}

inline AnovaTable anova_proposed(const LongDataset& ds, const PseudoUnitAssignment& pa) {
    return anova_grouped(ds, pa, "proposed");
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

inline std::string anova_to_csv(const AnovaTable& tab) {
    std::string out = "source,df,ss,ms,f,p\n";
    char buf[160];
    for (const auto& r : tab.rows) {
        if (r.has_f())
            std::snprintf(buf, sizeof(buf), "%s,%g,%.17g,%.17g,%.17g,%.17g\n",
                          r.source.c_str(), r.df, r.ss, r.ms, r.f, r.p);
        else
            std::snprintf(buf, sizeof(buf), "%s,%g,%.17g,%.17g,,\n", r.source.c_str(), r.df, r.ss, r.ms);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "total,%g,%.17g,,,\n", tab.total_df, tab.total_ss);
    out += buf;
    return out;
}

inline std::string anova_to_text(const AnovaTable& tab) {
    char buf[200];
    std::string out = "Analysis of variance (" + tab.model + " model)\n";
    std::snprintf(buf, sizeof(buf), "%-8s %8s %14s %14s %10s %12s  %s\n",
                  "source", "df", "SS", "MS", "F", "p", "E(MS)");
    out += buf;
    for (const auto& r : tab.rows) {
        if (r.has_f())
            std::snprintf(buf, sizeof(buf), "%-8s %8g %14.6g %14.6g %10.4g %12.4g  %s\n",
                          r.source.c_str(), r.df, r.ss, r.ms, r.f, r.p, r.ems.c_str());
        else
            std::snprintf(buf, sizeof(buf), "%-8s %8g %14.6g %14.6g %10s %12s  %s\n",
                          r.source.c_str(), r.df, r.ss, r.ms, "", "", r.ems.c_str());
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%-8s %8g %14.6g\n", "total", tab.total_df, tab.total_ss);
    out += buf;
    return out;
}

} // namespace dslmm
