// dslmm command line: simulate panels, form pseudo-units, fit the mixed
// models, run the ANOVA/MANOVA tables, the Monte Carlo comparison and the
// residual diagnostics. Exit codes: 0 success, 1 validation error,
// 2 numerical failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "dslmm/dslmm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t resolve_seed(bool seed_set, std::uint64_t seed_flag, std::uint64_t cfg_seed) {
    if (seed_set) return seed_flag;
    if (const char* env = std::getenv("DLMM_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw std::invalid_argument("DLMM_SEED is not an integer: " + std::string(env));
        }
    }
    return cfg_seed;
}

dslmm::SimulationConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config: " + path);
    json j;
    in >> j;
    return j.get<dslmm::SimulationConfig>();
}

void write_text(const std::string& path, const std::string& content) {
    dslmm::detail::write_file_atomic(path, content);
}

void write_json(const std::string& path, const json& j) {
    write_text(path, j.dump(2) + "\n");
}

dslmm::GroupingStrategy parse_strategy(const std::string& s) {
    if (s == "rank") return dslmm::GroupingStrategy::rank;
    if (s == "quantile") return dslmm::GroupingStrategy::quantile;
    if (s == "covariate") return dslmm::GroupingStrategy::covariate;
    throw std::invalid_argument("unknown grouping strategy: " + s);
}

struct SweepSpec {
    std::string name;           // dAT | dA | dT
    std::vector<double> values;
};

SweepSpec parse_sweep(const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("sweep must look like dAT=0,0.5,1");
    SweepSpec s;
    s.name = spec.substr(0, eq);
    std::string rest = spec.substr(eq + 1);
    std::size_t pos = 0;
    while (pos < rest.size()) {
        auto comma = rest.find(',', pos);
        if (comma == std::string::npos) comma = rest.size();
        s.values.push_back(std::stod(rest.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    if (s.values.empty()) throw std::invalid_argument("sweep has no values");
    return s;
}

int run(int argc, char** argv) {
    CLI::App app{"mixed-effects modeling for longitudinal data with destructive sampling"};
    app.require_subcommand(1);

    // --- simulate -----------------------------------------------------------
    auto* sim = app.add_subcommand("simulate", "generate a panel from a config and destroy it");
    std::string sim_config, sim_out, sim_complete_out;
    std::uint64_t sim_seed = 0;
    bool sim_keep_complete = false;
    sim->add_option("--config", sim_config, "simulation config JSON")->required();
    sim->add_option("--out", sim_out, "output CSV (destructive sample)")->required();
    auto* sim_seed_opt = sim->add_option("--seed", sim_seed, "override the config seed");
    sim->add_option("--complete-out", sim_complete_out, "also write the complete panel CSV");
    sim->add_flag("--complete-only", sim_keep_complete, "write the complete panel to --out, skip destruction");

    // --- group --------------------------------------------------------------
    auto* grp = app.add_subcommand("group", "assign pseudo-observational units");
    std::string grp_in, grp_out, grp_strategy = "rank", grp_covariate;
    int grp_g = 2;
    grp->add_option("--in", grp_in, "input panel CSV")->required();
    grp->add_option("--out", grp_out, "assignment CSV (eu,time,obs,group)")->required();
    grp->add_option("--groups", grp_g, "groups per experimental unit")->capture_default_str();
    grp->add_option("--strategy", grp_strategy, "rank | quantile | covariate")->capture_default_str();
    grp->add_option("--covariate", grp_covariate, "factor name for the covariate strategy");

    // --- fit ----------------------------------------------------------------
    auto* fit = app.add_subcommand("fit", "fit one of the models by ML/REML");
    std::string fit_in, fit_out, fit_model = "proposed", fit_criterion = "reml";
    int fit_g = 2;
    fit->add_option("--in", fit_in, "input panel CSV")->required();
    fit->add_option("--out", fit_out, "fit result JSON")->required();
    fit->add_option("--model", fit_model, "proposed | randint | deaton | fixed")->capture_default_str();
    fit->add_option("--criterion", fit_criterion, "reml | ml")->capture_default_str();
    fit->add_option("--groups", fit_g, "pseudo-units per eu (proposed model)")->capture_default_str();

    // --- anova --------------------------------------------------------------
    auto* anv = app.add_subcommand("anova", "balanced analysis-of-variance table");
    std::string anv_in, anv_out, anv_model = "proposed";
    int anv_g = 2;
    anv->add_option("--in", anv_in, "input panel CSV")->required();
    anv->add_option("--model", anv_model, "fixed | deaton | proposed | reference")->capture_default_str();
    anv->add_option("--groups", anv_g, "pseudo-units per eu (proposed)")->capture_default_str();
    anv->add_option("--out", anv_out, "write the table as CSV (also printed)");

    // --- manova -------------------------------------------------------------
    auto* man = app.add_subcommand("manova", "multivariate tests on group trajectories");
    std::string man_in, man_out, man_term = "A", man_transform = "none";
    int man_g = 2;
    man->add_option("--in", man_in, "input panel CSV")->required();
    man->add_option("--term", man_term, "tested term (factor, interaction, or (Intercept))")->capture_default_str();
    man->add_option("--groups", man_g, "pseudo-units per eu")->capture_default_str();
    man->add_option("--transform", man_transform, "none | differences")->capture_default_str();
    man->add_option("--out", man_out, "write the result as CSV (also printed)");

    // --- compare ------------------------------------------------------------
    auto* cmp = app.add_subcommand("compare", "Monte Carlo comparison of the four models");
    std::string cmp_config, cmp_out, cmp_sweep = "dAT=0,0.5,1", cmp_mode = "mse";
    int cmp_reps = 100, cmp_threads = 1, cmp_hypothesis = 1;
    std::uint64_t cmp_seed = 0;
    cmp->add_option("--config", cmp_config, "base simulation config JSON")->required();
    cmp->add_option("--out", cmp_out, "output directory")->required();
    cmp->add_option("--sweep", cmp_sweep, "sweep spec, e.g. dAT=0,0.5,1 or dA=0,0.4,1")->capture_default_str();
    cmp->add_option("--reps", cmp_reps, "replicates per scenario")->capture_default_str();
    cmp->add_option("--mode", cmp_mode, "mse | pvalue")->capture_default_str();
    cmp->add_option("--hypothesis", cmp_hypothesis, "1 (interaction), 2 (treatment), 3 (time)")->capture_default_str();
    cmp->add_option("--threads", cmp_threads, "parallel replicate workers")->capture_default_str();
    auto* cmp_seed_opt = cmp->add_option("--seed", cmp_seed, "override the config seed");

    // --- diagnose -----------------------------------------------------------
    auto* dia = app.add_subcommand("diagnose", "residual correlograms and normality/homoscedasticity tests");
    std::string dia_in, dia_out;
    int dia_g = 2, dia_maxlag = 5, dia_bins = 4;
    std::uint64_t dia_seed = 20240901;
    dia->add_option("--in", dia_in, "input panel CSV")->required();
    dia->add_option("--out", dia_out, "output directory")->required();
    dia->add_option("--groups", dia_g, "pseudo-units per eu")->capture_default_str();
    dia->add_option("--maxlag", dia_maxlag, "correlogram lags")->capture_default_str();
    dia->add_option("--bins", dia_bins, "random bins for the Bartlett screens")->capture_default_str();
    dia->add_option("--seed", dia_seed, "seed for the random binning")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    if (sim->parsed()) {
        dslmm::SimulationConfig cfg = load_config(sim_config);
        cfg.seed = resolve_seed(!sim_seed_opt->empty(), sim_seed, cfg.seed);
        const auto complete = dslmm::simulate_complete(cfg);
        if (sim_keep_complete) {
            dslmm::save_csv(complete, sim_out);
        } else {
            const auto destr = dslmm::destructive_sample(complete, cfg.K,
                                                         dslmm::derive_seed(cfg.seed, {0x6b696c6cULL}));
            dslmm::save_csv(destr, sim_out);
        }
        if (!sim_complete_out.empty()) dslmm::save_csv(complete, sim_complete_out);
        return 0;
    }

    if (grp->parsed()) {
        const auto ds = dslmm::load_csv(grp_in);
        const auto pa = dslmm::assign_pseudo_units(ds, grp_g, parse_strategy(grp_strategy), grp_covariate);
        write_text(grp_out, dslmm::assignment_to_csv(pa, ds));
        return 0;
    }

    if (fit->parsed()) {
        const auto ds = dslmm::load_csv(fit_in);
        const dslmm::Criterion crit = fit_criterion == "ml" ? dslmm::Criterion::ml
                                                            : dslmm::Criterion::reml;
        dslmm::FitOptions opts;
        opts.criterion = crit;
        dslmm::FittedLMM fm;
        json extra;
        if (fit_model == "proposed") {
            const auto pa = dslmm::assign_pseudo_units(ds, fit_g, dslmm::GroupingStrategy::rank);
            const auto dm = dslmm::build_design(ds, dslmm::canonical_terms(ds), &pa);
            fm = dslmm::fit_lmm(dm, {true, true}, opts);
            extra["groups"] = fit_g;
        } else if (fit_model == "randint") {
            const auto dm = dslmm::build_design(ds, dslmm::canonical_terms(ds));
            fm = dslmm::fit_lmm(dm, {true, false}, opts);
        } else if (fit_model == "deaton") {
            const auto agg = dslmm::aggregate_eu_time_means(ds);
            const auto dm = dslmm::build_design(agg, dslmm::canonical_terms(agg));
            fm = dslmm::fit_lmm(dm, {true, false}, opts);
            extra["basis"] = "eu-time cell means";
        } else if (fit_model == "fixed") {
            const auto dm = dslmm::build_design(ds, dslmm::canonical_terms(ds));
            fm = dslmm::fit_lmm(dm, {false, false}, opts);
        } else {
            throw std::invalid_argument("unknown model: " + fit_model);
        }
        json j = dslmm::fit_to_json(fm);
        j["model"] = fit_model;
        for (auto& [k, v] : extra.items()) j[k] = v;
        write_json(fit_out, j);
        return 0;
    }

    if (anv->parsed()) {
        const auto ds = dslmm::load_csv(anv_in);
        dslmm::AnovaTable tab;
        if (anv_model == "fixed") {
            tab = dslmm::anova_fixed(ds);
        } else if (anv_model == "deaton") {
            tab = dslmm::anova_deaton(ds);
        } else if (anv_model == "proposed") {
            const auto pa = dslmm::assign_pseudo_units(ds, anv_g, dslmm::GroupingStrategy::rank);
            tab = dslmm::anova_proposed(ds, pa);
        } else if (anv_model == "reference") {
            const auto pa = dslmm::assign_identity_units(ds);
            tab = dslmm::anova_grouped(ds, pa, "reference");
        } else {
            throw std::invalid_argument("unknown model: " + anv_model);
        }
        std::cout << dslmm::anova_to_text(tab);
        if (!anv_out.empty()) write_text(anv_out, dslmm::anova_to_csv(tab));
        return 0;
    }

    if (man->parsed()) {
        const auto ds = dslmm::load_csv(man_in);
        const auto pa = dslmm::assign_pseudo_units(ds, man_g, dslmm::GroupingStrategy::rank);
        auto mr = dslmm::build_manova_responses(ds, pa);
        if (man_transform == "differences") mr = dslmm::difference_transform(mr);
        else if (man_transform != "none")
            throw std::invalid_argument("unknown transform: " + man_transform);
        const auto res = dslmm::manova_test(mr, man_term);
        std::cout << dslmm::manova_to_text(res);
        if (!man_out.empty())
            write_text(man_out, dslmm::manova_to_csv_header() + dslmm::manova_to_csv_row(res));
        return 0;
    }

    if (cmp->parsed()) {
        dslmm::ScenarioGrid grid;
        grid.base = load_config(cmp_config);
        grid.base.seed = resolve_seed(!cmp_seed_opt->empty(), cmp_seed, grid.base.seed);
        const SweepSpec sweep = parse_sweep(cmp_sweep);
        grid.sweep = sweep.name;
        grid.values = sweep.values;
        grid.reps = cmp_reps;
        grid.threads = cmp_threads;

        dslmm::ComparisonReport rep;
        if (cmp_mode == "mse") rep = dslmm::run_mse_comparison(grid);
        else if (cmp_mode == "pvalue") rep = dslmm::run_pvalue_experiment(grid, cmp_hypothesis);
        else throw std::invalid_argument("unknown mode: " + cmp_mode);

        fs::create_directories(cmp_out);
        write_json((fs::path(cmp_out) / "report.json").string(), dslmm::report_to_json(rep));
        write_text((fs::path(cmp_out) / "report.csv").string(), dslmm::report_to_tidy_csv(rep));
        write_text((fs::path(cmp_out) / "boxplots.svg").string(), dslmm::report_to_svg(rep));
        std::cout << "wrote " << cmp_out << "/report.json, report.csv, boxplots.svg\n";
        if (rep.mode == "mse")
            std::cout << "lemma ordering held in " << (rep.lemma_checked - rep.lemma_violations)
                      << "/" << rep.lemma_checked << " replicates\n";
        if (!rep.failures.empty())
            std::cout << rep.failures.size() << " replicate(s) failed; see report.json\n";
        return 0;
    }

    if (dia->parsed()) {
        const auto ds = dslmm::load_csv(dia_in);
        const auto pa = dslmm::assign_pseudo_units(ds, dia_g, dslmm::GroupingStrategy::rank);
        const auto dm = dslmm::build_design(ds, dslmm::canonical_terms(ds), &pa);
        const auto fm = dslmm::fit_lmm(dm, {true, true}, {});

        const auto acf = dslmm::residual_acf(fm, ds, pa, dia_maxlag);
        fs::create_directories(dia_out);
        std::string acf_csv = "eu,group,lag,acf,band\n";
        char buf[160];
        for (const auto& r : acf)
            for (std::size_t h = 0; h < r.acf.size(); ++h) {
                std::snprintf(buf, sizeof(buf), "%s,%d,%zu,%.17g,%.17g\n",
                              r.eu.c_str(), r.group, h + 1, r.acf[h], r.band);
                acf_csv += buf;
            }
        write_text((fs::path(dia_out) / "acf.csv").string(), acf_csv);
        write_text((fs::path(dia_out) / "correlograms.svg").string(),
                   dslmm::render_correlogram_grid("Residual correlograms by pseudo-unit", acf));

        json tests;
        tests["acf_fraction_within_band"] = dslmm::fraction_within_band(acf);
        std::vector<double> resid;
        for (long i = 0; i < fm.fitted.size(); ++i)
            resid.push_back(ds.observations[static_cast<std::size_t>(i)].y - fm.fitted(i));
        auto run_tests = [&](const char* name, const std::vector<double>& sample) {
            json out;
            if (sample.size() >= 8) {
                const auto ad = dslmm::anderson_darling(sample);
                out["anderson_darling"] = {{"statistic", ad.statistic}, {"p", ad.p}, {"n", ad.n}};
            }
            if (sample.size() >= static_cast<std::size_t>(2 * dia_bins)) {
                const auto bt = dslmm::bartlett(dslmm::random_bins(sample, dia_bins, dia_seed));
                out["bartlett_random_bins"] = {{"statistic", bt.statistic}, {"p", bt.p}, {"bins", dia_bins}};
            }
            tests[name] = out;
        };
        run_tests("residuals", resid);
        run_tests("blup_b", fm.b_hat);
        run_tests("blup_eta", fm.eta_hat);
        write_json((fs::path(dia_out) / "tests.json").string(), tests);
        std::cout << "wrote " << dia_out << "/acf.csv, correlograms.svg, tests.json\n";
        return 0;
    }

    return 1;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const dslmm::numeric_error& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
