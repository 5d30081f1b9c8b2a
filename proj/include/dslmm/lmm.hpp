#pragma once

// Mixed-model estimation by penalized least squares. The random-effect
// scale is handled through the relative precision factor Delta with
// Delta'Delta = sigma_eps^2 * Psi^{-1}; internally the deviance is profiled
// over (beta, sigma_eps^2) and evaluated through a sequential Cholesky
// decomposition of the augmented system, blocked by experimental unit (the
// random effects are nested, so Z'Z is block diagonal per unit). The
// optimizer works on log variance ratios, where the boundary theta -> 0 is
// well behaved.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dslmm/design.hpp"
#include "dslmm/stats.hpp"

namespace dslmm {

enum class Criterion { ml, reml };

inline const char* to_string(Criterion c) { return c == Criterion::ml ? "ml" : "reml"; }

// ---------------------------------------------------------------------------
// variance components
// ---------------------------------------------------------------------------

struct VarianceComponents {
    double sigma_b2 = 0.0;
    double sigma_eta2 = 0.0;
    double sigma_eps2 = 1.0;
    // variance ratios sigma^2_x / sigma_eps^2 for the random terms present,
    // ordered [b, eta]; Delta entries are 1/sqrt(theta)
    std::vector<double> theta;
    bool has_b = false;
    bool has_eta = false;

    static VarianceComponents make(double sb2, double se2, double seps2, bool with_b, bool with_eta) {
        if (sb2 < 0 || se2 < 0 || seps2 <= 0)
            throw std::invalid_argument("variances must be non-negative with sigma_eps2 > 0");
        VarianceComponents vc;
        vc.sigma_b2 = with_b ? sb2 : 0.0;
        vc.sigma_eta2 = with_eta ? se2 : 0.0;
        vc.sigma_eps2 = seps2;
        vc.has_b = with_b;
        vc.has_eta = with_eta;
        if (with_b) vc.theta.push_back(sb2 / seps2);
        if (with_eta) vc.theta.push_back(se2 / seps2);
        return vc;
    }

    double delta_b() const {
        if (!has_b || theta.empty() || theta[0] <= 0.0)
            throw std::invalid_argument("Delta undefined for zero variance");
        return 1.0 / std::sqrt(theta[0]);
    }
    double delta_eta() const {
        const std::size_t i = has_b ? 1 : 0;
        if (!has_eta || theta.size() <= i || theta[i] <= 0.0)
            throw std::invalid_argument("Delta undefined for zero variance");
        return 1.0 / std::sqrt(theta[i]);
    }
};

// ---------------------------------------------------------------------------
// explicit augmented system [y; 0] = [X; 0] beta + [Z; Delta] v + e
// ---------------------------------------------------------------------------

struct AugmentedSystem {
    Eigen::VectorXd y_tilde;
    Eigen::MatrixXd X_tilde;
    Eigen::MatrixXd Z_tilde;
    long q = 0;   // random-effect dimension
};

inline AugmentedSystem assemble_augmented_system(const DesignMatrices& dm, const VarianceComponents& vc) {
    const long n = dm.n_obs();
    const long qb = vc.has_b ? dm.n_eu() : 0;
    const long qe = vc.has_eta ? dm.n_zeta() : 0;
    const long q = qb + qe;
    if (q == 0) throw std::invalid_argument("no random effects present");

    AugmentedSystem as;
    as.q = q;
    as.y_tilde.setZero(n + q);
    as.y_tilde.head(n) = dm.y;
    as.X_tilde.setZero(n + q, dm.p());
    as.X_tilde.topRows(n) = dm.X;
    as.Z_tilde.setZero(n + q, q);
    for (long i = 0; i < n; ++i) {
        if (qb > 0 && dm.zb_index[static_cast<std::size_t>(i)] >= 0)
            as.Z_tilde(i, dm.zb_index[static_cast<std::size_t>(i)]) = 1.0;
        if (qe > 0 && dm.zeta_index[static_cast<std::size_t>(i)] >= 0)
            as.Z_tilde(i, qb + dm.zeta_index[static_cast<std::size_t>(i)]) = 1.0;
    }
    const double db = qb > 0 ? vc.delta_b() : 0.0;
    const double de = qe > 0 ? vc.delta_eta() : 0.0;
    for (long j = 0; j < qb; ++j) as.Z_tilde(n + j, j) = db;
    for (long j = 0; j < qe; ++j) as.Z_tilde(n + qb + j, qb + j) = de;
    return as;
}

// v-hat for fixed beta: (Z~'Z~)^{-1} Z~'(y~ - X~ beta)
inline Eigen::VectorXd solve_augmented(const AugmentedSystem& as, const Eigen::VectorXd& beta) {
    const Eigen::MatrixXd ztz = as.Z_tilde.transpose() * as.Z_tilde;
    Eigen::LLT<Eigen::MatrixXd> llt(ztz);
    if (llt.info() != Eigen::Success)
        throw numeric_error("singular Z~'Z~ in augmented system");
    return llt.solve(as.Z_tilde.transpose() * (as.y_tilde - as.X_tilde * beta));
}

// ---------------------------------------------------------------------------
// blocked engine
// ---------------------------------------------------------------------------

struct RandomStructure {
    bool with_b = true;
    bool with_eta = false;
    int dim() const { return (with_b ? 1 : 0) + (with_eta ? 1 : 0); }
};

namespace detail {

// per-experimental-unit cross products of [Z_i | X | y]
struct EuBlock {
    Eigen::MatrixXd zz;        // q_i x q_i
    Eigen::MatrixXd zx;        // q_i x p
    Eigen::VectorXd zy;        // q_i
    std::vector<int> zeta_cols;   // global zeta column per local index
    bool has_b = false;
};

struct BlockedStats {
    std::vector<EuBlock> blocks;
    Eigen::MatrixXd xtx;
    Eigen::VectorXd xty;
    double yty = 0.0;
    long n = 0;
    long p = 0;
    long qb = 0;
    long qeta = 0;
};

inline BlockedStats build_blocked_stats(const DesignMatrices& dm, const RandomStructure& rs) {
    if (rs.with_eta && dm.n_zeta() == 0)
        throw std::invalid_argument("model requires pseudo-unit effects but the design has no grouping");
    if (rs.dim() > 0 && dm.n_eu() == 0)
        throw std::invalid_argument("random effects require experimental-unit indicators in the design");

    // accumulate in a canonical row order so the sufficient statistics (and
    // with them the whole fit) do not depend on how the rows were presented
    std::vector<long> order(static_cast<std::size_t>(dm.n_obs()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<long>(i);
    std::sort(order.begin(), order.end(), [&](long a, long b) {
        const auto ia = static_cast<std::size_t>(a), ib = static_cast<std::size_t>(b);
        if (dm.zb_index[ia] != dm.zb_index[ib]) return dm.zb_index[ia] < dm.zb_index[ib];
        if (dm.zeta_index[ia] != dm.zeta_index[ib]) return dm.zeta_index[ia] < dm.zeta_index[ib];
        if (dm.y(a) != dm.y(b)) return dm.y(a) < dm.y(b);
        for (long c = 0; c < dm.p(); ++c)
            if (dm.X(a, c) != dm.X(b, c)) return dm.X(a, c) < dm.X(b, c);
        return false;
    });

    BlockedStats st;
    st.n = dm.n_obs();
    st.p = dm.p();
    st.qb = rs.with_b ? dm.n_eu() : 0;
    st.qeta = rs.with_eta ? dm.n_zeta() : 0;

    // blocks follow the experimental units; every zeta column is nested in
    // exactly one unit
    // pseudo-unit columns in ascending global index within each unit, so the
    // block layout is independent of the row order
    const long n_eu = dm.n_eu();
    std::vector<std::vector<int>> zeta_of_eu(static_cast<std::size_t>(n_eu));
    std::vector<int> zeta_local(static_cast<std::size_t>(dm.n_zeta()), -1);
    if (rs.with_eta) {
        std::vector<int> owner(static_cast<std::size_t>(dm.n_zeta()), -1);
        for (long i = 0; i < st.n; ++i) {
            const int zc = dm.zeta_index[static_cast<std::size_t>(i)];
            const int eu = dm.zb_index[static_cast<std::size_t>(i)];
            if (zc >= 0) {
                if (owner[static_cast<std::size_t>(zc)] < 0)
                    owner[static_cast<std::size_t>(zc)] = eu;
                else if (owner[static_cast<std::size_t>(zc)] != eu)
                    throw std::invalid_argument("pseudo-unit columns must be nested within experimental units");
            }
        }
        for (int zc = 0; zc < static_cast<int>(dm.n_zeta()); ++zc) {
            const int eu = owner[static_cast<std::size_t>(zc)];
            if (eu < 0) continue;
            zeta_local[static_cast<std::size_t>(zc)] =
                static_cast<int>(zeta_of_eu[static_cast<std::size_t>(eu)].size());
            zeta_of_eu[static_cast<std::size_t>(eu)].push_back(zc);
        }
    }

    if (rs.dim() > 0) st.blocks.resize(static_cast<std::size_t>(n_eu));
    for (long e = 0; e < n_eu && rs.dim() > 0; ++e) {
        auto& blk = st.blocks[static_cast<std::size_t>(e)];
        blk.has_b = rs.with_b;
        blk.zeta_cols = zeta_of_eu[static_cast<std::size_t>(e)];
        const long qi = (rs.with_b ? 1 : 0) + static_cast<long>(blk.zeta_cols.size());
        blk.zz.setZero(qi, qi);
        blk.zx.setZero(qi, st.p);
        blk.zy.setZero(qi);
    }
    st.xtx.setZero(st.p, st.p);
    st.xty.setZero(st.p);
    st.yty = 0.0;
    for (long oi = 0; oi < st.n; ++oi) {
        const long i = order[static_cast<std::size_t>(oi)];
        st.xtx.noalias() += dm.X.row(i).transpose() * dm.X.row(i);
        st.xty.noalias() += dm.X.row(i).transpose() * dm.y(i);
        st.yty += dm.y(i) * dm.y(i);
        if (rs.dim() == 0) continue;
        const int eu = dm.zb_index[static_cast<std::size_t>(i)];
        auto& blk = st.blocks[static_cast<std::size_t>(eu)];
        const long b_ofs = rs.with_b ? 1 : 0;
        if (rs.with_b) {
            blk.zz(0, 0) += 1.0;
            blk.zx.row(0) += dm.X.row(i);
            blk.zy(0) += dm.y(i);
        }
        if (rs.with_eta) {
            const int zc = dm.zeta_index[static_cast<std::size_t>(i)];
            if (zc < 0) throw std::invalid_argument("grouping does not cover every observation");
            const long lc = b_ofs + zeta_local[static_cast<std::size_t>(zc)];
            blk.zz(lc, lc) += 1.0;
            if (rs.with_b) {
                blk.zz(0, lc) += 1.0;
                blk.zz(lc, 0) += 1.0;
            }
            blk.zx.row(lc) += dm.X.row(i);
            blk.zy(lc) += dm.y(i);
        }
    }
    return st;
}

struct DevianceEval {
    double log_det_rzz = 0.0;
    double log_det_rx = 0.0;
    double r2 = 0.0;              // penalized residual sum of squares
    Eigen::VectorXd beta;
    double value = 0.0;           // criterion value
    bool ok = true;
};

// theta: variance ratios aligned with [b, eta] (present terms only)
inline DevianceEval eval_profiled(const BlockedStats& st, const RandomStructure& rs,
                                  const std::vector<double>& theta, Criterion crit,
                                  std::vector<Eigen::VectorXd>* u_out = nullptr) {
    DevianceEval ev;
    const double lam_b = rs.with_b ? std::sqrt(std::max(theta[0], 0.0)) : 0.0;
    const double lam_e = rs.with_eta ? std::sqrt(std::max(theta[rs.with_b ? 1 : 0], 0.0)) : 0.0;

    Eigen::MatrixXd cxx = st.xtx;
    Eigen::VectorXd cxy = st.xty;
    double r2 = st.yty;

    for (const auto& blk : st.blocks) {
        const long qi = blk.zz.rows();
        Eigen::VectorXd lam(qi);
        long r = 0;
        if (blk.has_b) lam(r++) = lam_b;
        for (std::size_t z = 0; z < blk.zeta_cols.size(); ++z) lam(r++) = lam_e;

        Eigen::MatrixXd a = lam.asDiagonal() * blk.zz * lam.asDiagonal();
        a.diagonal().array() += 1.0;
        Eigen::LLT<Eigen::MatrixXd> llt(a);
        if (llt.info() != Eigen::Success) {
            ev.ok = false;
            ev.value = std::numeric_limits<double>::infinity();
            return ev;
        }
        const Eigen::MatrixXd lmat = llt.matrixL();
        for (long d = 0; d < qi; ++d) ev.log_det_rzz += std::log(lmat(d, d));

        const Eigen::MatrixXd b = lmat.triangularView<Eigen::Lower>().solve(
            (lam.asDiagonal() * blk.zx).eval());
        const Eigen::VectorXd dvec = lmat.triangularView<Eigen::Lower>().solve(
            (lam.asDiagonal() * blk.zy).eval());
        cxx.noalias() -= b.transpose() * b;
        cxy.noalias() -= b.transpose() * dvec;
        r2 -= dvec.squaredNorm();
    }

    Eigen::LLT<Eigen::MatrixXd> lltx(cxx);
    if (lltx.info() != Eigen::Success) {
        const double cond = cxx.diagonal().maxCoeff() /
                            std::max(cxx.diagonal().minCoeff(), 1e-300);
        throw numeric_error("fixed-effect system numerically singular (diagonal condition estimate " +
                            std::to_string(cond) + ")");
    }
    const Eigen::MatrixXd lx = lltx.matrixL();
    for (long d = 0; d < st.p; ++d) ev.log_det_rx += std::log(lx(d, d));
    const Eigen::VectorXd cxy_rot = lx.triangularView<Eigen::Lower>().solve(cxy);
    ev.beta = lx.transpose().triangularView<Eigen::Upper>().solve(cxy_rot);
    r2 -= cxy_rot.squaredNorm();
    ev.r2 = std::max(r2, 1e-300);

    const double n = static_cast<double>(st.n);
    const double p = static_cast<double>(st.p);
    const double two_pi = 2.0 * std::numbers::pi;
    if (crit == Criterion::ml) {
        ev.value = 2.0 * ev.log_det_rzz + n * (1.0 + std::log(two_pi * ev.r2 / n));
    } else {
        ev.value = 2.0 * ev.log_det_rzz + 2.0 * ev.log_det_rx +
                   (n - p) * (1.0 + std::log(two_pi * ev.r2 / (n - p)));
    }

    if (u_out) {
        u_out->clear();
        for (const auto& blk : st.blocks) {
            const long qi = blk.zz.rows();
            Eigen::VectorXd lam(qi);
            long r = 0;
            if (blk.has_b) lam(r++) = lam_b;
            for (std::size_t z = 0; z < blk.zeta_cols.size(); ++z) lam(r++) = lam_e;
            Eigen::MatrixXd a = lam.asDiagonal() * blk.zz * lam.asDiagonal();
            a.diagonal().array() += 1.0;
            Eigen::LLT<Eigen::MatrixXd> llt(a);
            const Eigen::MatrixXd lmat = llt.matrixL();
            const Eigen::MatrixXd b = lmat.triangularView<Eigen::Lower>().solve(
                (lam.asDiagonal() * blk.zx).eval());
            const Eigen::VectorXd dvec = lmat.triangularView<Eigen::Lower>().solve(
                (lam.asDiagonal() * blk.zy).eval());
            Eigen::VectorXd u = lmat.transpose().triangularView<Eigen::Upper>().solve(
                (dvec - b * ev.beta).eval());
            // back to the original scale: v = Lambda u
            for (long d = 0; d < qi; ++d) u(d) *= lam(d);
            u_out->push_back(std::move(u));
        }
    }
    return ev;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Cholesky blocks of the augmented decomposition, materialized for checks
// ---------------------------------------------------------------------------

struct CholeskyBlocks {
    Eigen::MatrixXd R_ZZ;   // q x q, upper triangular
    Eigen::MatrixXd R_ZX;   // q x p
    Eigen::MatrixXd R_X;    // p x p, upper triangular
};

inline CholeskyBlocks compute_cholesky_blocks(const DesignMatrices& dm, const RandomStructure& rs,
                                              const std::vector<double>& theta) {
    const long qb = rs.with_b ? dm.n_eu() : 0;
    const long qe = rs.with_eta ? dm.n_zeta() : 0;
    const long q = qb + qe;
    const double lam_b = rs.with_b ? std::sqrt(std::max(theta[0], 0.0)) : 0.0;
    const double lam_e = rs.with_eta ? std::sqrt(std::max(theta[rs.with_b ? 1 : 0], 0.0)) : 0.0;

    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(dm.n_obs(), q);
    for (long i = 0; i < dm.n_obs(); ++i) {
        if (qb > 0 && dm.zb_index[static_cast<std::size_t>(i)] >= 0)
            z(i, dm.zb_index[static_cast<std::size_t>(i)]) = 1.0;
        if (qe > 0 && dm.zeta_index[static_cast<std::size_t>(i)] >= 0)
            z(i, qb + dm.zeta_index[static_cast<std::size_t>(i)]) = 1.0;
    }
    Eigen::VectorXd lam(q);
    for (long j = 0; j < qb; ++j) lam(j) = lam_b;
    for (long j = 0; j < qe; ++j) lam(qb + j) = lam_e;

    Eigen::MatrixXd a = lam.asDiagonal() * (z.transpose() * z) * lam.asDiagonal();
    a.diagonal().array() += 1.0;
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success) throw numeric_error("augmented Z block not positive definite");

    CholeskyBlocks cb;
    cb.R_ZZ = Eigen::MatrixXd(llt.matrixL()).transpose();
    cb.R_ZX = Eigen::MatrixXd(llt.matrixL()).triangularView<Eigen::Lower>().solve(
        (lam.asDiagonal() * (z.transpose() * dm.X)).eval());
    Eigen::MatrixXd cxx = dm.X.transpose() * dm.X - cb.R_ZX.transpose() * cb.R_ZX;
    Eigen::LLT<Eigen::MatrixXd> lltx(cxx);
    if (lltx.info() != Eigen::Success) throw numeric_error("R_X block not positive definite");
    cb.R_X = Eigen::MatrixXd(lltx.matrixL()).transpose();
    return cb;
}

// ---------------------------------------------------------------------------
// Nelder-Mead on log variance ratios
// ---------------------------------------------------------------------------

struct NelderMeadResult {
    std::vector<double> x;
    double fmin = 0.0;
    int iterations = 0;
    bool converged = false;
};

inline NelderMeadResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                                    std::vector<double> x0, double step,
                                    double lo, double hi,
                                    double ftol = 1e-9, double xtol = 1e-9, int max_iter = 500) {
    const std::size_t n = x0.size();
    auto clamp = [&](std::vector<double> x) {
        for (auto& v : x) v = std::min(hi, std::max(lo, v));
        return x;
    };
    std::vector<std::vector<double>> simplex;
    simplex.push_back(clamp(x0));
    for (std::size_t i = 0; i < n; ++i) {
        auto x = x0;
        x[i] += step;
        simplex.push_back(clamp(x));
    }
    std::vector<double> fv;
    for (const auto& x : simplex) fv.push_back(f(x));

    NelderMeadResult res;
    auto order = [&] {
        std::vector<std::size_t> idx(simplex.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
        std::vector<std::vector<double>> s2;
        std::vector<double> f2;
        for (auto i : idx) { s2.push_back(simplex[i]); f2.push_back(fv[i]); }
        simplex.swap(s2);
        fv.swap(f2);
    };

    for (int iter = 0; iter < max_iter; ++iter) {
        order();
        res.iterations = iter + 1;
        double fspread = fv.back() - fv.front();
        double xspread = 0.0;
        for (std::size_t i = 1; i < simplex.size(); ++i)
            for (std::size_t d = 0; d < n; ++d)
                xspread = std::max(xspread, std::fabs(simplex[i][d] - simplex[0][d]));
        if (fspread <= ftol * (1.0 + std::fabs(fv.front())) && xspread <= xtol) {
            res.converged = true;
            break;
        }

        std::vector<double> centroid(n, 0.0);
        for (std::size_t i = 0; i + 1 < simplex.size(); ++i)
            for (std::size_t d = 0; d < n; ++d) centroid[d] += simplex[i][d];
        for (auto& c : centroid) c /= static_cast<double>(n);

        auto blend = [&](double coef) {
            std::vector<double> x(n);
            for (std::size_t d = 0; d < n; ++d)
                x[d] = centroid[d] + coef * (simplex.back()[d] - centroid[d]);
            return clamp(x);
        };

        const auto xr = blend(-1.0);
        const double fr = f(xr);
        if (fr < fv.front()) {
            const auto xe = blend(-2.0);
            const double fe = f(xe);
            if (fe < fr) { simplex.back() = xe; fv.back() = fe; }
            else { simplex.back() = xr; fv.back() = fr; }
        } else if (fr < fv[fv.size() - 2]) {
            simplex.back() = xr;
            fv.back() = fr;
        } else {
            const bool outside = fr < fv.back();
            const auto xc = blend(outside ? -0.5 : 0.5);
            const double fc = f(xc);
            if (fc < std::min(fr, fv.back())) {
                simplex.back() = xc;
                fv.back() = fc;
            } else {
                for (std::size_t i = 1; i < simplex.size(); ++i) {
                    for (std::size_t d = 0; d < n; ++d)
                        simplex[i][d] = simplex[0][d] + 0.5 * (simplex[i][d] - simplex[0][d]);
                    fv[i] = f(simplex[i]);
                }
            }
        }
    }
    order();
    res.x = simplex.front();
    res.fmin = fv.front();
    return res;
}

// ---------------------------------------------------------------------------
// fitted model
// ---------------------------------------------------------------------------

struct FittedLMM {
    Eigen::VectorXd beta;
    DecodedEffects effects;
    std::vector<double> b_hat;             // aligned with zb_names
    std::vector<double> eta_hat;           // aligned with zeta_names
    std::vector<std::string> zb_names;
    std::vector<std::string> zeta_names;
    VarianceComponents vc;
    double deviance = 0.0;
    Criterion criterion = Criterion::reml;
    Eigen::VectorXd fitted;
    double mse = 0.0;
    bool converged = true;
    bool boundary = false;
    int iterations = 0;
    std::vector<std::string> warnings;
};

struct FitOptions {
    Criterion criterion = Criterion::reml;
    std::optional<std::vector<double>> fixed_theta; // skip optimization when set
    double ftol = 1e-9;
    double xtol = 1e-9;
    int max_iter = 500;
};

constexpr double kLogThetaFloor = -27.631021115928547;   // log(1e-12)
constexpr double kLogThetaCeil = 27.631021115928547;

inline double profiled_deviance(const DesignMatrices& dm, const RandomStructure& rs,
                                const std::vector<double>& theta, Criterion crit) {
    for (double th : theta)
        if (th < 0.0) throw std::invalid_argument("theta must be non-negative");
    if (static_cast<int>(theta.size()) != rs.dim())
        throw std::invalid_argument("theta dimension does not match the random structure");
    const auto st = detail::build_blocked_stats(dm, rs);
    return detail::eval_profiled(st, rs, theta, crit).value;
}

inline FittedLMM fit_lmm(const DesignMatrices& dm, const RandomStructure& rs, const FitOptions& opts = {}) {
    FittedLMM fm;
    fm.criterion = opts.criterion;
    const long n = dm.n_obs();
    const long p = dm.p();
    if (n <= p) throw std::invalid_argument("need more observations than fixed-effect columns");

    if (rs.dim() == 0) {
        // pure fixed-effects model: ordinary least squares
        Eigen::LLT<Eigen::MatrixXd> llt(dm.X.transpose() * dm.X);
        if (llt.info() != Eigen::Success) throw numeric_error("X'X singular in least squares");
        fm.beta = llt.solve(dm.X.transpose() * dm.y);
        fm.fitted = dm.X * fm.beta;
        const double rss = (dm.y - fm.fitted).squaredNorm();
        fm.mse = rss / static_cast<double>(n);
        const double two_pi = 2.0 * std::numbers::pi;
        double log_det_rx = 0.0;
        {
            const Eigen::MatrixXd lx = llt.matrixL();
            for (long d = 0; d < p; ++d) log_det_rx += std::log(lx(d, d));
        }
        fm.deviance = opts.criterion == Criterion::ml
                          ? static_cast<double>(n) * (1.0 + std::log(two_pi * rss / static_cast<double>(n)))
                          : static_cast<double>(n - p) *
                                    (1.0 + std::log(two_pi * rss / static_cast<double>(n - p))) +
                                2.0 * log_det_rx;
        fm.vc = VarianceComponents::make(0.0, 0.0,
                                         rss / static_cast<double>(opts.criterion == Criterion::ml ? n : n - p),
                                         false, false);
        fm.effects = decode_effects(dm, fm.beta);
        fm.converged = true;
        return fm;
    }

    const auto st = detail::build_blocked_stats(dm, rs);
    if (rs.with_b && dm.n_eu() == 1)
        fm.warnings.push_back("single experimental unit: b is confounded with the intercept");

    auto objective = [&](const std::vector<double>& x) {
        std::vector<double> theta(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) theta[i] = std::exp(x[i]);
        return detail::eval_profiled(st, rs, theta, opts.criterion).value;
    };

    std::vector<double> theta_hat;
    int total_iter = 0;
    bool converged = true;
    if (opts.fixed_theta) {
        theta_hat = *opts.fixed_theta;
        if (static_cast<int>(theta_hat.size()) != rs.dim())
            throw std::invalid_argument("fixed theta dimension does not match the random structure");
    } else {
        // start at an equal split of the variance across components
        std::vector<double> x(static_cast<std::size_t>(rs.dim()), 0.0);
        double step = 1.0;
        NelderMeadResult nm;
        for (int round = 0; round < 3; ++round) {
            nm = nelder_mead(objective, x, step, kLogThetaFloor, kLogThetaCeil,
                             opts.ftol, opts.xtol, opts.max_iter);
            total_iter += nm.iterations;
            x = nm.x;
            step *= 0.01;
        }
        converged = nm.converged;
        theta_hat.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) theta_hat[i] = std::exp(x[i]);
    }

    std::vector<Eigen::VectorXd> u;
    const auto ev = detail::eval_profiled(st, rs, theta_hat, opts.criterion, &u);
    if (!ev.ok) throw numeric_error("deviance evaluation failed at the optimum");

    const double denom = opts.criterion == Criterion::ml ? static_cast<double>(n)
                                                         : static_cast<double>(n - p);
    const double sigma_eps2 = ev.r2 / denom;
    double sb2 = 0.0, se2 = 0.0;
    std::size_t ti = 0;
    if (rs.with_b) sb2 = theta_hat[ti++] * sigma_eps2;
    if (rs.with_eta) se2 = theta_hat[ti++] * sigma_eps2;

    fm.vc = VarianceComponents::make(sb2, se2, sigma_eps2, rs.with_b, rs.with_eta);
    // boundary: ratio at the internal floor reports as a zero variance
    ti = 0;
    if (rs.with_b && theta_hat[ti++] <= 1e-10) { fm.vc.sigma_b2 = 0.0; fm.boundary = true; }
    if (rs.with_eta && theta_hat[ti++] <= 1e-10) { fm.vc.sigma_eta2 = 0.0; fm.boundary = true; }

    fm.beta = ev.beta;
    fm.effects = decode_effects(dm, fm.beta);
    fm.deviance = ev.value;
    fm.converged = converged;
    fm.iterations = total_iter;
    fm.zb_names = dm.zb_names;
    fm.zeta_names = dm.zeta_names;

    fm.b_hat.assign(rs.with_b ? dm.zb_names.size() : 0, 0.0);
    fm.eta_hat.assign(rs.with_eta ? dm.zeta_names.size() : 0, 0.0);
    for (std::size_t e = 0; e < st.blocks.size(); ++e) {
        const auto& blk = st.blocks[e];
        long r = 0;
        if (blk.has_b) fm.b_hat[e] = u[e](r++);
        for (std::size_t z = 0; z < blk.zeta_cols.size(); ++z)
            fm.eta_hat[static_cast<std::size_t>(blk.zeta_cols[z])] = u[e](r++);
    }

    fm.fitted = dm.X * fm.beta;
    for (long i = 0; i < n; ++i) {
        if (rs.with_b) fm.fitted(i) += fm.b_hat[static_cast<std::size_t>(dm.zb_index[static_cast<std::size_t>(i)])];
        if (rs.with_eta) fm.fitted(i) += fm.eta_hat[static_cast<std::size_t>(dm.zeta_index[static_cast<std::size_t>(i)])];
    }
    fm.mse = (dm.y - fm.fitted).squaredNorm() / static_cast<double>(n);
    return fm;
}

inline double mse_of(const FittedLMM& fm) { return fm.mse; }

// ---------------------------------------------------------------------------
// JSON export
// ---------------------------------------------------------------------------

inline nlohmann::json fit_to_json(const FittedLMM& fm) {
    nlohmann::json j;
    j["criterion"] = to_string(fm.criterion);
    j["deviance"] = fm.deviance;
    j["mse"] = fm.mse;
    j["converged"] = fm.converged;
    j["boundary"] = fm.boundary;
    j["iterations"] = fm.iterations;
    j["intercept"] = fm.effects.intercept;
    nlohmann::json terms = nlohmann::json::array();
    for (const auto& te : fm.effects.terms) {
        nlohmann::json tj;
        tj["term"] = te.term;
        if (te.col_levels.empty()) {
            nlohmann::json vals;
            for (long i = 0; i < te.values.rows(); ++i) vals[te.row_levels[static_cast<std::size_t>(i)]] = te.values(i, 0);
            tj["effects"] = vals;
        } else {
            nlohmann::json vals;
            for (long i = 0; i < te.values.rows(); ++i) {
                nlohmann::json row;
                for (long k = 0; k < te.values.cols(); ++k)
                    row[te.col_levels[static_cast<std::size_t>(k)]] = te.values(i, k);
                vals[te.row_levels[static_cast<std::size_t>(i)]] = row;
            }
            tj["effects"] = vals;
        }
        terms.push_back(tj);
    }
    j["terms"] = terms;
    j["variance_components"] = {{"sigma_b2", fm.vc.sigma_b2},
                                {"sigma_eta2", fm.vc.sigma_eta2},
                                {"sigma_eps2", fm.vc.sigma_eps2}};
    if (!fm.b_hat.empty()) {
        nlohmann::json b;
        for (std::size_t i = 0; i < fm.b_hat.size(); ++i) b[fm.zb_names[i]] = fm.b_hat[i];
        j["blup_b"] = b;
    }
    if (!fm.eta_hat.empty()) {
        nlohmann::json e;
        for (std::size_t i = 0; i < fm.eta_hat.size(); ++i) e[fm.zeta_names[i]] = fm.eta_hat[i];
        j["blup_eta"] = e;
    }
    if (!fm.warnings.empty()) j["warnings"] = fm.warnings;
    return j;
}

} // namespace dslmm
