#pragma once

// Multivariate analysis of variance on per-group mean trajectories. One row
// per (experimental unit, pseudo-unit); the t time points form the response
// vector. Hypothesis and error cross products come from nested multivariate
// least-squares fits; the four classical statistics are functions of the
// eigenvalues of Qe^{-1} Qh, solved through the symmetric reduction with the
// Cholesky factor of Qe so Qe is never inverted explicitly.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <map>
#include <string>
#include <vector>

#include "dslmm/data.hpp"
#include "dslmm/design.hpp"
#include "dslmm/grouping.hpp"
#include "dslmm/stats.hpp"

namespace dslmm {

struct ManovaResponses {
    Eigen::MatrixXd Y;                       // rows x t mean trajectories
    std::vector<std::string> eu;             // per row
    std::vector<int> group;                  // per row
    std::vector<std::vector<int>> levels;    // per row, aligned with factors
    std::vector<FactorDef> factors;
    int t = 0;
};

inline ManovaResponses build_manova_responses(const LongDataset& ds, const PseudoUnitAssignment& pa) {
    if (pa.group_of_row.size() != ds.size())
        throw std::invalid_argument("grouping does not cover the dataset");
    std::map<std::pair<std::string, int>, std::vector<std::pair<double, std::size_t>>> rows;
    std::map<std::string, std::vector<int>> eu_levels;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& o = ds.observations[i];
        auto& acc = rows[{o.eu_id, pa.group_of_row[i]}];
        if (acc.empty()) acc.assign(static_cast<std::size_t>(ds.t), {0.0, 0});
        acc[static_cast<std::size_t>(o.time - 1)].first += o.y;
        acc[static_cast<std::size_t>(o.time - 1)].second += 1;
        auto it = eu_levels.find(o.eu_id);
        if (it == eu_levels.end()) eu_levels.emplace(o.eu_id, o.levels);
        else if (it->second != o.levels)
            throw std::invalid_argument("factor levels vary within experimental unit " + o.eu_id);
    }

    ManovaResponses mr;
    mr.t = ds.t;
    mr.factors = ds.factors;
    mr.Y.resize(static_cast<long>(rows.size()), ds.t);
    long r = 0;
    for (const auto& [key, acc] : rows) {
        for (int k = 0; k < ds.t; ++k) {
            const auto& [sum, cnt] = acc[static_cast<std::size_t>(k)];
            if (cnt == 0)
                throw std::invalid_argument("empty trajectory cell: eu=" + key.first + " group=" +
                                            std::to_string(key.second) + " time=" + std::to_string(k + 1));
            mr.Y(r, k) = sum / static_cast<double>(cnt);
        }
        mr.eu.push_back(key.first);
        mr.group.push_back(key.second);
        mr.levels.push_back(eu_levels[key.first]);
        ++r;
    }
    return mr;
}

// Successive differences across time; removes any per-row level, so a test
// of a between-row term on the differenced responses is the classical
// profile parallelism (interaction) test, and a test of the intercept is
// the time-effect test.
inline ManovaResponses difference_transform(const ManovaResponses& mr) {
    if (mr.t < 2) throw std::invalid_argument("difference transform needs t >= 2");
    ManovaResponses out = mr;
    out.t = mr.t - 1;
    out.Y.resize(mr.Y.rows(), mr.t - 1);
    for (long r = 0; r < mr.Y.rows(); ++r)
        for (int k = 0; k + 1 < mr.t; ++k)
            out.Y(r, k) = mr.Y(r, k + 1) - mr.Y(r, k);
    return out;
}

// ---------------------------------------------------------------------------
// test
// ---------------------------------------------------------------------------

struct ManovaStat {
    double value = 0.0;
    double f = 0.0;
    double df1 = 0.0;
    double df2 = 0.0;
    double p = 1.0;
};

struct ManovaResult {
    std::string term;
    double nu_h = 0.0;
    double nu_e = 0.0;
    Eigen::MatrixXd Qh;
    Eigen::MatrixXd Qe;
    std::vector<double> eigenvalues;   // descending
    ManovaStat pillai;                 // V
    ManovaStat lawley_hotelling;       // U
    ManovaStat wilks;                  // Lambda
    ManovaStat roy;                    // theta; F is an upper bound test
};

namespace detail {

// between-row design on the trajectory rows: intercept + requested main
// effects (+ the tested interaction, when the term is one)
inline Eigen::MatrixXd manova_design(const ManovaResponses& mr, const std::vector<Term>& terms) {
    const long n = mr.Y.rows();
    long p = 1;
    for (const auto& term : terms) {
        long cols = 1;
        for (const auto& f : term.factors) {
            bool found = false;
            for (const auto& fd : mr.factors)
                if (fd.name == f) { cols *= static_cast<long>(fd.levels.size()) - 1; found = true; }
            if (!found) throw std::invalid_argument("term references unknown factor " + f);
        }
        p += cols;
    }
    Eigen::MatrixXd w(n, p);
    w.col(0).setOnes();
    long col = 1;
    auto factor_of = [&](const std::string& name) -> std::size_t {
        for (std::size_t i = 0; i < mr.factors.size(); ++i)
            if (mr.factors[i].name == name) return i;
        throw std::invalid_argument("unknown factor " + name);
    };
    for (const auto& term : terms) {
        const std::size_t fa = factor_of(term.factors[0]);
        const int nA = static_cast<int>(mr.factors[fa].levels.size());
        if (term.factors.size() == 1) {
            for (int j = 0; j + 1 < nA; ++j) {
                for (long i = 0; i < n; ++i)
                    w(i, col) = effect_code(mr.levels[static_cast<std::size_t>(i)][fa], j, nA);
                ++col;
            }
        } else {
            const std::size_t fb = factor_of(term.factors[1]);
            const int nB = static_cast<int>(mr.factors[fb].levels.size());
            for (int j = 0; j + 1 < nA; ++j)
                for (int k = 0; k + 1 < nB; ++k) {
                    for (long i = 0; i < n; ++i)
                        w(i, col) = effect_code(mr.levels[static_cast<std::size_t>(i)][fa], j, nA) *
                                    effect_code(mr.levels[static_cast<std::size_t>(i)][fb], k, nB);
                    ++col;
                }
        }
    }
    return w;
}

// residual cross-product matrix of the multivariate least-squares fit
inline Eigen::MatrixXd residual_sscp(const Eigen::MatrixXd& w, const Eigen::MatrixXd& y) {
    if (w.cols() == 0) return y.transpose() * y;
    const Eigen::MatrixXd wtw = w.transpose() * w;
    Eigen::LLT<Eigen::MatrixXd> llt(wtw);
    if (llt.info() != Eigen::Success) throw numeric_error("singular between-row design in MANOVA");
    const Eigen::MatrixXd bhat = llt.solve(w.transpose() * y);
    const Eigen::MatrixXd resid = y - w * bhat;
    return resid.transpose() * resid;
}

} // namespace detail

// generalized eigenvalues of Qe^{-1} Qh through the Cholesky reduction,
// descending, with roundoff negatives clamped at zero
inline std::vector<double> manova_eigenvalues(const Eigen::MatrixXd& qh, const Eigen::MatrixXd& qe) {
    Eigen::LLT<Eigen::MatrixXd> llt(qe);
    if (llt.info() != Eigen::Success) throw numeric_error("Qe is not positive definite");
    const Eigen::MatrixXd lmat = llt.matrixL();
    Eigen::MatrixXd m = lmat.triangularView<Eigen::Lower>().solve(qh);
    m = lmat.triangularView<Eigen::Lower>().solve(m.transpose().eval());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig((0.5 * (m + m.transpose())).eval());
    if (eig.info() != Eigen::Success) throw numeric_error("eigen decomposition failed in MANOVA");
    std::vector<double> lam(eig.eigenvalues().data(), eig.eigenvalues().data() + qh.rows());
    std::sort(lam.begin(), lam.end(), std::greater<double>());
    const double lam_max = lam.empty() ? 0.0 : std::max(lam.front(), 0.0);
    for (double& l : lam) {
        if (l < -1e-10 * (1.0 + lam_max))
            throw numeric_error("negative eigenvalue beyond roundoff in Qe^{-1} Qh: " + std::to_string(l));
        l = std::max(l, 0.0);
    }
    return lam;
}

// the four statistics and their F approximations from the eigenvalues
inline ManovaResult manova_stats_from_eigenvalues(const std::string& term, double nu_h, double nu_e,
                                                  int p_resp, const std::vector<double>& lam) {
    ManovaResult res;
    res.term = term;
    res.nu_h = nu_h;
    res.nu_e = nu_e;
    res.eigenvalues = lam;

    double v = 0.0, u = 0.0, wl = 1.0;
    for (double l : lam) {
        v += l / (1.0 + l);
        u += l;
        wl /= 1.0 + l;
    }
    const double lam_max = lam.empty() ? 0.0 : lam.front();
    const double roy = lam_max / (1.0 + lam_max);

    const double pp = static_cast<double>(p_resp);
    const double q = nu_h;
    const double ve = nu_e;
    const double s = std::min(pp, q);
    const double mprime = (std::fabs(q - pp) - 1.0) / 2.0;
    const double nprime = (ve - pp - 1.0) / 2.0;

    res.pillai.value = v;
    res.pillai.df1 = s * (2.0 * mprime + s + 1.0);
    res.pillai.df2 = s * (2.0 * nprime + s + 1.0);
    if (s - v > 1e-14) {
        res.pillai.f = (2.0 * nprime + s + 1.0) * v / ((2.0 * mprime + s + 1.0) * (s - v));
        res.pillai.p = f_sf(res.pillai.f, res.pillai.df1, res.pillai.df2);
    } else {
        res.pillai.f = std::numeric_limits<double>::infinity();
        res.pillai.p = 0.0;
    }

    res.wilks.value = wl;
    {
        const double tt = (pp * pp + q * q - 5.0 > 0.0)
                              ? std::sqrt((pp * pp * q * q - 4.0) / (pp * pp + q * q - 5.0))
                              : 1.0;
        const double r = ve - (pp - q + 1.0) / 2.0;
        const double uu = (pp * q - 2.0) / 4.0;
        res.wilks.df1 = pp * q;
        res.wilks.df2 = r * tt - 2.0 * uu;
        if (wl > 1e-300 && res.wilks.df2 > 0.0) {
            const double wroot = std::pow(wl, 1.0 / tt);
            res.wilks.f = (1.0 - wroot) / wroot * res.wilks.df2 / res.wilks.df1;
            res.wilks.p = f_sf(res.wilks.f, res.wilks.df1, res.wilks.df2);
        } else {
            res.wilks.f = std::numeric_limits<double>::infinity();
            res.wilks.p = 0.0;
        }
    }

    res.lawley_hotelling.value = u;
    res.lawley_hotelling.df1 = s * (2.0 * mprime + s + 1.0);
    res.lawley_hotelling.df2 = 2.0 * (s * nprime + 1.0);
    res.lawley_hotelling.f = u * 2.0 * (s * nprime + 1.0) / (s * s * (2.0 * mprime + s + 1.0));
    res.lawley_hotelling.p = f_sf(res.lawley_hotelling.f, res.lawley_hotelling.df1,
                                  res.lawley_hotelling.df2);

    res.roy.value = roy;
    {
        const double r2 = std::max(pp, q);
        res.roy.df1 = r2;
        res.roy.df2 = ve - r2 + q;
        res.roy.f = lam_max * res.roy.df2 / r2;
        res.roy.p = f_sf(res.roy.f, res.roy.df1, res.roy.df2);
    }
    return res;
}

inline ManovaResult manova_test(const ManovaResponses& mr, const std::string& term_name) {
    const long n = mr.Y.rows();
    const int p_resp = mr.t;

    // full design: intercept + every main effect (+ tested interaction)
    std::vector<Term> full_terms;
    for (const auto& f : mr.factors)
        if (f.levels.size() >= 2) full_terms.push_back(Term{{f.name}});
    bool test_intercept = term_name == "(Intercept)" || term_name == "1";
    Term tested;
    if (!test_intercept) {
        tested = parse_term(term_name);
        if (tested.factors.size() == 2) full_terms.push_back(tested);
        bool present = false;
        for (const auto& t : full_terms) present = present || t.name() == tested.name();
        if (!present) throw std::invalid_argument("term '" + term_name + "' is not in the MANOVA design");
    }

    const Eigen::MatrixXd w_full = detail::manova_design(mr, full_terms);
    const Eigen::MatrixXd e_full = detail::residual_sscp(w_full, mr.Y);

    Eigen::MatrixXd e_red;
    double nu_h = 0.0;
    if (test_intercept) {
        // reduced model drops the constant column
        Eigen::MatrixXd w_red = w_full.rightCols(w_full.cols() - 1);
        e_red = detail::residual_sscp(w_red, mr.Y);
        nu_h = 1.0;
    } else {
        std::vector<Term> red_terms;
        for (const auto& t : full_terms)
            if (t.name() != tested.name()) red_terms.push_back(t);
        const Eigen::MatrixXd w_red = detail::manova_design(mr, red_terms);
        e_red = detail::residual_sscp(w_red, mr.Y);
        nu_h = static_cast<double>(w_full.cols() - w_red.cols());
    }

    const double nu_e = static_cast<double>(n - w_full.cols());
    if (nu_e < p_resp)
        throw std::invalid_argument("error degrees of freedom (" + std::to_string(nu_e) +
                                    ") below the response dimension: Qe is singular");

    const Eigen::MatrixXd qh = e_red - e_full;
    const auto lam = manova_eigenvalues(qh, e_full);
    ManovaResult res = manova_stats_from_eigenvalues(term_name, nu_h, nu_e, p_resp, lam);
    res.Qh = qh;
    res.Qe = e_full;
    return res;
}

// CSV rows: term,df,pillai,approxF,numdf,dendf,p
inline std::string manova_to_csv_header() { return "term,df,pillai,approxF,numdf,dendf,p\n"; }

inline std::string manova_to_csv_row(const ManovaResult& r) {
    char buf[240];
    std::snprintf(buf, sizeof(buf), "%s,%g,%.17g,%.17g,%g,%g,%.17g\n",
                  r.term.c_str(), r.nu_h, r.pillai.value, r.pillai.f,
                  r.pillai.df1, r.pillai.df2, r.pillai.p);
    return buf;
}

inline std::string manova_to_text(const ManovaResult& r) {
    char buf[240];
    std::string out = "MANOVA term " + r.term + " (nu_h=" + std::to_string(static_cast<int>(r.nu_h)) +
                      ", nu_e=" + std::to_string(static_cast<int>(r.nu_e)) + ")\n";
    auto line = [&](const char* name, const ManovaStat& s) {
        std::snprintf(buf, sizeof(buf), "%-18s %10.6g  F=%-10.5g df=(%g, %g)  p=%.6g\n",
                      name, s.value, s.f, s.df1, s.df2, s.p);
        out += buf;
    };
    line("Pillai", r.pillai);
    line("Wilks", r.wilks);
    line("Lawley-Hotelling", r.lawley_hotelling);
    line("Roy (upper bound)", r.roy);
    return out;
}

} // namespace dslmm
