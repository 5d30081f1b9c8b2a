#pragma once

// Monte Carlo protocol: simulate a complete panel, apply the destructive
// sampling, fit the competing models on identical data and collect mean
// squared errors and hypothesis-test p-values across a scenario sweep.
// Replicates run in parallel; per-replicate RNG substreams are derived from
// (seed, scenario index, replicate), so reports are pure functions of the
// grid and do not depend on the thread count.

#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dslmm/anova.hpp"
#include "dslmm/data.hpp"
#include "dslmm/design.hpp"
#include "dslmm/grouping.hpp"
#include "dslmm/lmm.hpp"
#include "dslmm/manova.hpp"
#include "dslmm/simulate.hpp"
#include "dslmm/stats.hpp"
#include "dslmm/svg.hpp"

namespace dslmm {

struct ScenarioGrid {
    SimulationConfig base;
    std::string sweep = "dAT";       // dAT | dA | dT
    std::vector<double> values = {0.0};
    int reps = 100;
    int threads = 1;

    void validate() const {
        if (sweep != "dAT" && sweep != "dA" && sweep != "dT")
            throw std::invalid_argument("sweep must be one of dAT, dA, dT");
        if (values.empty()) throw std::invalid_argument("sweep needs at least one value");
        for (double v : values)
            if (!(v >= 0.0) || !std::isfinite(v))
                throw std::invalid_argument("sweep values must be finite and non-negative");
        if (reps < 1) throw std::invalid_argument("reps must be >= 1");
        base.validate();
    }

    SimulationConfig config_at(std::size_t idx, int rep) const {
        SimulationConfig cfg = base;
        const double v = values.at(idx);
        if (sweep == "dAT") cfg.deltaATmax = v;
        else if (sweep == "dA") cfg.deltaA = v;
        else cfg.timeSlope = v / std::max(1, cfg.t - 1);   // swept value is the max T gap
        cfg.seed = derive_seed(base.seed, {0x726570ULL, idx, static_cast<std::uint64_t>(rep)});
        return cfg;
    }
};

// ---------------------------------------------------------------------------
// per-replicate records
// ---------------------------------------------------------------------------

struct MseRecord {
    double scenario = 0.0;
    int rep = 0;
    double mse_proposed = 0.0;
    double mse_randint = 0.0;
    double mse_deaton = 0.0;
    double mse_fixed = 0.0;
    double mse_manova_basis = 0.0;
    bool lemma_ok = true;
    bool valid = false;
    std::string error;
};

struct PvalueRecord {
    double scenario = 0.0;
    int rep = 0;
    double reference = 1.0;
    double fixed = 1.0;
    double deaton = 1.0;
    double proposed = 1.0;
    double manova = 1.0;
    bool valid = false;
    std::string error;
};

struct ComparisonReport {
    std::string mode;             // "mse" | "pvalue"
    std::string sweep;
    std::vector<double> values;
    int reps = 0;
    int hypothesis = 0;           // pvalue mode
    bool fixed_truth = false;     // mse mode: variance components pinned at generator values
    std::vector<MseRecord> mse;
    std::vector<PvalueRecord> pvalues;
    int lemma_violations = 0;
    int lemma_checked = 0;
    std::vector<std::string> failures;
};

namespace detail {

inline void parallel_for(int n, int threads, const std::function<void(int)>& body) {
    threads = std::max(1, threads);
    if (threads == 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
        });
    for (auto& th : pool) th.join();
}

// variance ratios implied by the generator for each model's own response
// basis; used when fits pin the components at truth instead of estimating
inline std::vector<double> truth_theta_proposed(const SimulationConfig& c) {
    return {c.sigma_b2 / c.sigma_eps2, c.sigma_eta2 / c.sigma_eps2};
}
inline std::vector<double> truth_theta_randint(const SimulationConfig& c) {
    return {c.sigma_b2 / (c.sigma_eta2 + c.sigma_eps2)};
}
inline std::vector<double> truth_theta_deaton(const SimulationConfig& c) {
    const double cell_var = c.sigma_eta2 / c.K + c.sigma_eps2 / (static_cast<double>(c.K) * c.L);
    return {c.sigma_b2 / cell_var};
}

// mean squared error on the raw observations of predictions indexed by
// (eu, time)
inline double broadcast_mse(const LongDataset& raw, const LongDataset& agg, const Eigen::VectorXd& fitted) {
    std::map<std::pair<std::string, int>, double> pred;
    for (std::size_t i = 0; i < agg.size(); ++i)
        pred[{agg.observations[i].eu_id, agg.observations[i].time}] = fitted(static_cast<long>(i));
    double ss = 0.0;
    for (const auto& o : raw.observations) {
        const auto it = pred.find({o.eu_id, o.time});
        if (it == pred.end()) throw std::invalid_argument("missing cell prediction for eu " + o.eu_id);
        ss += (o.y - it->second) * (o.y - it->second);
    }
    return ss / static_cast<double>(raw.size());
}

// residual mean square of the multivariate model on its own trajectory basis
inline double manova_basis_mse(const ManovaResponses& mr) {
    std::vector<Term> terms;
    for (const auto& f : mr.factors)
        if (f.levels.size() >= 2) terms.push_back(Term{{f.name}});
    const Eigen::MatrixXd w = manova_design(mr, terms);
    const Eigen::MatrixXd e = residual_sscp(w, mr.Y);
    return e.trace() / static_cast<double>(mr.Y.rows() * mr.Y.cols());
}

} // namespace detail

// ---------------------------------------------------------------------------
// MSE comparison (Lemma ordering)
// ---------------------------------------------------------------------------

inline ComparisonReport run_mse_comparison(const ScenarioGrid& grid, bool fixed_truth = false) {
    grid.validate();
    ComparisonReport rep;
    rep.mode = "mse";
    rep.sweep = grid.sweep;
    rep.values = grid.values;
    rep.reps = grid.reps;
    rep.fixed_truth = fixed_truth;
    rep.mse.resize(grid.values.size() * static_cast<std::size_t>(grid.reps));

    const int total = static_cast<int>(rep.mse.size());
    detail::parallel_for(total, grid.threads, [&](int idx) {
        const std::size_t vi = static_cast<std::size_t>(idx) / static_cast<std::size_t>(grid.reps);
        const int r = idx % grid.reps;
        MseRecord& rec = rep.mse[static_cast<std::size_t>(idx)];
        rec.scenario = grid.values[vi];
        rec.rep = r;
        try {
            const SimulationConfig cfg = grid.config_at(vi, r);
            const LongDataset complete = simulate_complete(cfg);
            const LongDataset destr = destructive_sample(complete, cfg.K,
                                                         derive_seed(cfg.seed, {0x6b696c6cULL}));
            const auto pa = assign_pseudo_units(destr, cfg.G, GroupingStrategy::rank);

            FitOptions opt;
            opt.criterion = Criterion::reml;

            const auto terms = canonical_terms(destr);
            const auto dm_grouped = build_design(destr, terms, &pa);

            FitOptions opt_prop = opt;
            if (fixed_truth) opt_prop.fixed_theta = detail::truth_theta_proposed(cfg);
            const auto fit_prop = fit_lmm(dm_grouped, {true, true}, opt_prop);

            FitOptions opt_ri = opt;
            if (fixed_truth) opt_ri.fixed_theta = detail::truth_theta_randint(cfg);
            const auto fit_ri = fit_lmm(dm_grouped, {true, false}, opt_ri);

            const auto fit_ols = fit_lmm(dm_grouped, {false, false}, opt);

            const LongDataset agg = aggregate_eu_time_means(destr);
            const auto dm_agg = build_design(agg, canonical_terms(agg));
            FitOptions opt_de = opt;
            if (fixed_truth) opt_de.fixed_theta = detail::truth_theta_deaton(cfg);
            const auto fit_de = fit_lmm(dm_agg, {true, false}, opt_de);

            rec.mse_proposed = fit_prop.mse;
            rec.mse_randint = fit_ri.mse;
            rec.mse_fixed = fit_ols.mse;
            rec.mse_deaton = detail::broadcast_mse(destr, agg, fit_de.fitted);
            rec.mse_manova_basis = detail::manova_basis_mse(build_manova_responses(destr, pa));

            const double slack = 1e-6;
            rec.lemma_ok = rec.mse_proposed <= rec.mse_randint + slack &&
                           rec.mse_randint <= rec.mse_deaton + slack &&
                           rec.mse_deaton <= rec.mse_fixed + slack;
            rec.valid = true;
        } catch (const std::exception& e) {
            rec.error = e.what();
        }
    });

    for (const auto& r : rep.mse) {
        if (!r.valid) {
            rep.failures.push_back("scenario " + std::to_string(r.scenario) + " rep " +
                                   std::to_string(r.rep) + ": " + r.error);
            continue;
        }
        ++rep.lemma_checked;
        if (!r.lemma_ok) ++rep.lemma_violations;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// p-value experiment
// ---------------------------------------------------------------------------

namespace detail {

inline std::string hypothesis_term(int hypothesis) {
    switch (hypothesis) {
        case 1: return "A:time";
        case 2: return "A";
        case 3: return "time";
    }
    throw std::invalid_argument("hypothesis must be 1, 2 or 3");
}

// MANOVA route per hypothesis: treatment test on raw trajectories for the
// main effect; profile-analysis tests on differenced trajectories for the
// interaction (parallelism) and the time effect (flatness)
inline double manova_pvalue(const ManovaResponses& mr, int hypothesis) {
    if (hypothesis == 2) return manova_test(mr, "A").pillai.p;
    const auto diff = difference_transform(mr);
    if (hypothesis == 1) return manova_test(diff, "A").pillai.p;
    return manova_test(diff, "(Intercept)").pillai.p;
}

} // namespace detail

struct PvalueOptions {
    // form the pseudo-units independently of the responses (seeded uniform
    // unit split) instead of by response rank; calibration oracles use this
    bool independent_grouping = false;
};

inline ComparisonReport run_pvalue_experiment(const ScenarioGrid& grid, int hypothesis,
                                              const PvalueOptions& opts = {}) {
    grid.validate();
    const std::string term = detail::hypothesis_term(hypothesis);
    ComparisonReport rep;
    rep.mode = "pvalue";
    rep.sweep = grid.sweep;
    rep.values = grid.values;
    rep.reps = grid.reps;
    rep.hypothesis = hypothesis;
    rep.pvalues.resize(grid.values.size() * static_cast<std::size_t>(grid.reps));

    const int total = static_cast<int>(rep.pvalues.size());
    detail::parallel_for(total, grid.threads, [&](int idx) {
        const std::size_t vi = static_cast<std::size_t>(idx) / static_cast<std::size_t>(grid.reps);
        const int r = idx % grid.reps;
        PvalueRecord& rec = rep.pvalues[static_cast<std::size_t>(idx)];
        rec.scenario = grid.values[vi];
        rec.rep = r;
        try {
            const SimulationConfig cfg = grid.config_at(vi, r);
            const LongDataset complete = simulate_complete(cfg);

            // reference: the full per-unit model is estimable on the
            // complete panel, where every unit is its own pseudo-unit
            const auto pa_ref = assign_identity_units(complete);
            rec.reference = anova_grouped(complete, pa_ref, "reference").p_value(term);

            const LongDataset destr = destructive_sample(complete, cfg.K,
                                                         derive_seed(cfg.seed, {0x6b696c6cULL}));
            const auto pa = opts.independent_grouping
                                ? assign_pseudo_units_random(destr, cfg.G,
                                                             derive_seed(cfg.seed, {0x696e64ULL}))
                                : assign_pseudo_units(destr, cfg.G, GroupingStrategy::rank);

            rec.fixed = anova_fixed(destr).p_value(term);
            rec.deaton = anova_deaton(destr).p_value(term);
            rec.proposed = anova_grouped(destr, pa).p_value(term);
            rec.manova = detail::manova_pvalue(build_manova_responses(destr, pa), hypothesis);
            rec.valid = true;
        } catch (const std::exception& e) {
            rec.error = e.what();
        }
    });

    for (const auto& r : rep.pvalues)
        if (!r.valid)
            rep.failures.push_back("scenario " + std::to_string(r.scenario) + " rep " +
                                   std::to_string(r.rep) + ": " + r.error);
    return rep;
}

// ---------------------------------------------------------------------------
// summaries and serialization
// ---------------------------------------------------------------------------

struct CellSummary {
    double scenario = 0.0;
    std::map<std::string, double> median;            // per method
    std::map<std::string, double> median_abs_dev;    // per method: median |p - reference|
};

inline std::vector<CellSummary> summarize_pvalues(const ComparisonReport& rep) {
    std::vector<CellSummary> out;
    for (double v : rep.values) {
        CellSummary cs;
        cs.scenario = v;
        std::map<std::string, std::vector<double>> p, dev;
        for (const auto& r : rep.pvalues) {
            if (!r.valid || r.scenario != v) continue;
            p["reference"].push_back(r.reference);
            p["fixed"].push_back(r.fixed);
            p["deaton"].push_back(r.deaton);
            p["proposed"].push_back(r.proposed);
            p["manova"].push_back(r.manova);
            dev["fixed"].push_back(std::fabs(r.fixed - r.reference));
            dev["deaton"].push_back(std::fabs(r.deaton - r.reference));
            dev["proposed"].push_back(std::fabs(r.proposed - r.reference));
            dev["manova"].push_back(std::fabs(r.manova - r.reference));
        }
        for (const auto& [name, vals] : p)
            if (!vals.empty()) cs.median[name] = median_of(vals);
        for (const auto& [name, vals] : dev)
            if (!vals.empty()) cs.median_abs_dev[name] = median_of(vals);
        out.push_back(std::move(cs));
    }
    return out;
}

inline std::vector<CellSummary> summarize_mse(const ComparisonReport& rep) {
    std::vector<CellSummary> out;
    for (double v : rep.values) {
        CellSummary cs;
        cs.scenario = v;
        std::map<std::string, std::vector<double>> m;
        for (const auto& r : rep.mse) {
            if (!r.valid || r.scenario != v) continue;
            m["proposed"].push_back(r.mse_proposed);
            m["randint"].push_back(r.mse_randint);
            m["deaton"].push_back(r.mse_deaton);
            m["fixed"].push_back(r.mse_fixed);
            m["manova"].push_back(r.mse_manova_basis);
        }
        for (const auto& [name, vals] : m)
            if (!vals.empty()) cs.median[name] = median_of(vals);
        out.push_back(std::move(cs));
    }
    return out;
}

inline nlohmann::json report_to_json(const ComparisonReport& rep) {
    nlohmann::json j;
    j["mode"] = rep.mode;
    j["sweep"] = rep.sweep;
    j["values"] = rep.values;
    j["reps"] = rep.reps;
    if (rep.mode == "pvalue") j["hypothesis"] = rep.hypothesis;
    if (rep.mode == "mse") {
        j["fixed_truth"] = rep.fixed_truth;
        j["lemma_checked"] = rep.lemma_checked;
        j["lemma_violations"] = rep.lemma_violations;
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : rep.mse) {
            if (!r.valid) continue;
            rows.push_back({{"scenario", r.scenario},
                            {"rep", r.rep},
                            {"proposed", r.mse_proposed},
                            {"randint", r.mse_randint},
                            {"deaton", r.mse_deaton},
                            {"fixed", r.mse_fixed},
                            {"manova", r.mse_manova_basis},
                            {"lemma_ok", r.lemma_ok}});
        }
        j["replicates"] = rows;
        nlohmann::json med = nlohmann::json::array();
        for (const auto& cs : summarize_mse(rep)) {
            nlohmann::json c;
            c["scenario"] = cs.scenario;
            c["median_mse"] = cs.median;
            med.push_back(c);
        }
        j["summary"] = med;
    } else {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : rep.pvalues) {
            if (!r.valid) continue;
            rows.push_back({{"scenario", r.scenario},
                            {"rep", r.rep},
                            {"reference", r.reference},
                            {"fixed", r.fixed},
                            {"deaton", r.deaton},
                            {"proposed", r.proposed},
                            {"manova", r.manova}});
        }
        j["replicates"] = rows;
        nlohmann::json med = nlohmann::json::array();
        for (const auto& cs : summarize_pvalues(rep)) {
            nlohmann::json c;
            c["scenario"] = cs.scenario;
            c["median_p"] = cs.median;
            c["median_abs_dev_from_reference"] = cs.median_abs_dev;
            med.push_back(c);
        }
        j["summary"] = med;
        // monotonicity of the median p of each method along the sweep
        nlohmann::json mono;
        const auto cells = summarize_pvalues(rep);
        for (const std::string name : {"reference", "fixed", "deaton", "proposed", "manova"}) {
            bool ok = true;
            for (std::size_t i = 1; i < cells.size(); ++i) {
                const auto a = cells[i - 1].median.find(name);
                const auto b = cells[i].median.find(name);
                if (a != cells[i - 1].median.end() && b != cells[i].median.end())
                    ok = ok && b->second <= a->second + 1e-12;
            }
            mono[name] = ok;
        }
        j["median_p_nonincreasing"] = mono;
    }
    if (!rep.failures.empty()) j["failures"] = rep.failures;
    return j;
}

// tidy rows: scenario,rep,method,metric,value
inline std::string report_to_tidy_csv(const ComparisonReport& rep) {
    std::string out = "scenario,rep,method,metric,value\n";
    char buf[160];
    auto emit = [&](double sc, int r, const char* method, const char* metric, double v) {
        std::snprintf(buf, sizeof(buf), "%.17g,%d,%s,%s,%.17g\n", sc, r, method, metric, v);
        out += buf;
    };
    if (rep.mode == "mse") {
        for (const auto& r : rep.mse) {
            if (!r.valid) continue;
            emit(r.scenario, r.rep, "proposed", "mse", r.mse_proposed);
            emit(r.scenario, r.rep, "randint", "mse", r.mse_randint);
            emit(r.scenario, r.rep, "deaton", "mse", r.mse_deaton);
            emit(r.scenario, r.rep, "fixed", "mse", r.mse_fixed);
            emit(r.scenario, r.rep, "manova", "mse_basis", r.mse_manova_basis);
        }
    } else {
        for (const auto& r : rep.pvalues) {
            if (!r.valid) continue;
            emit(r.scenario, r.rep, "reference", "p", r.reference);
            emit(r.scenario, r.rep, "fixed", "p", r.fixed);
            emit(r.scenario, r.rep, "deaton", "p", r.deaton);
            emit(r.scenario, r.rep, "proposed", "p", r.proposed);
            emit(r.scenario, r.rep, "manova", "p", r.manova);
        }
    }
    return out;
}

inline std::string report_to_svg(const ComparisonReport& rep) {
    std::vector<BoxPanel> panels;
    char title[96];
    for (double v : rep.values) {
        BoxPanel panel;
        std::snprintf(title, sizeof(title), "%s = %g", rep.sweep.c_str(), v);
        panel.title = title;
        std::map<std::string, std::vector<double>> vals;
        if (rep.mode == "mse") {
            for (const auto& r : rep.mse) {
                if (!r.valid || r.scenario != v) continue;
                vals["1 proposed"].push_back(r.mse_proposed);
                vals["2 randint"].push_back(r.mse_randint);
                vals["3 deaton"].push_back(r.mse_deaton);
                vals["4 fixed"].push_back(r.mse_fixed);
                vals["5 manova"].push_back(r.mse_manova_basis);
            }
        } else {
            std::vector<double> refs;
            for (const auto& r : rep.pvalues) {
                if (!r.valid || r.scenario != v) continue;
                vals["1 proposed"].push_back(r.proposed);
                vals["2 deaton"].push_back(r.deaton);
                vals["3 fixed"].push_back(r.fixed);
                vals["4 manova"].push_back(r.manova);
                refs.push_back(r.reference);
            }
            if (!refs.empty()) panel.reference = median_of(refs);
        }
        for (const auto& [name, vv] : vals)
            if (!vv.empty()) panel.boxes.push_back(svg::box_of(name.substr(2), vv));
        panels.push_back(std::move(panel));
    }
    const std::string what = rep.mode == "mse"
                                 ? "MSE by model across the " + rep.sweep + " sweep"
                                 : "p-values for H0(" + std::to_string(rep.hypothesis) + ") across the " +
                                       rep.sweep + " sweep";
    return render_boxplot_grid(what, panels, rep.mode == "mse" ? "MSE" : "p");
}

} // namespace dslmm
