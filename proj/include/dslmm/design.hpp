#pragma once

// Fixed- and random-effect design construction. Factors are encoded with
// sum-to-zero (effects) coding so that decoded level effects satisfy the
// estimability constraints exactly: main effects sum to zero and every
// interaction row/column sums to zero. "time" is a built-in factor with
// levels 1..t.

#include <Eigen/Dense>
#include <Eigen/QR>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dslmm/data.hpp"
#include "dslmm/grouping.hpp"

namespace dslmm {

struct Term {
    std::vector<std::string> factors;   // 1 = main effect, 2 = interaction

    std::string name() const {
        std::string s;
        for (std::size_t i = 0; i < factors.size(); ++i) {
            if (i) s += ":";
            s += factors[i];
        }
        return s;
    }
};

inline Term parse_term(const std::string& spec) {
    Term t;
    std::string cur;
    for (char c : spec) {
        if (c == ':') {
            if (!cur.empty()) t.factors.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) t.factors.push_back(cur);
    if (t.factors.empty() || t.factors.size() > 2)
        throw std::invalid_argument("term '" + spec + "' must name one factor or a two-factor interaction");
    return t;
}

struct ColumnInfo {
    std::string term;
    int level_a = 0;   // level index within the first factor
    int level_b = -1;  // second factor level for interactions
};

struct DesignMatrices {
    Eigen::MatrixXd X;                   // fixed effects, intercept first
    std::vector<ColumnInfo> columns;     // aligned with X columns
    std::vector<Term> terms;
    std::vector<std::pair<std::string, std::vector<std::string>>> term_levels; // factor name -> level names

    // random-effect indicators stored as row -> column index
    std::vector<int> zb_index;           // experimental-unit intercepts, -1 when absent
    std::vector<std::string> zb_names;   // sorted eu ids
    std::vector<int> zeta_index;         // pseudo-unit intercepts, -1 when absent
    std::vector<std::string> zeta_names; // "eu/g" labels, sorted

    Eigen::VectorXd y;
    int t = 0;

    long n_obs() const { return X.rows(); }
    long p() const { return X.cols(); }
    long n_eu() const { return static_cast<long>(zb_names.size()); }
    long n_zeta() const { return static_cast<long>(zeta_names.size()); }

    Eigen::MatrixXd zb_dense() const {
        Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(X.rows(), n_eu());
        for (long i = 0; i < X.rows(); ++i)
            if (zb_index[static_cast<std::size_t>(i)] >= 0)
                Z(i, zb_index[static_cast<std::size_t>(i)]) = 1.0;
        return Z;
    }

    Eigen::MatrixXd zeta_dense() const {
        Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(X.rows(), n_zeta());
        for (long i = 0; i < X.rows(); ++i)
            if (zeta_index[static_cast<std::size_t>(i)] >= 0)
                Z(i, zeta_index[static_cast<std::size_t>(i)]) = 1.0;
        return Z;
    }
};

namespace detail {

inline std::vector<std::string> factor_level_names(const LongDataset& ds, const std::string& name) {
    if (name == "time") {
        std::vector<std::string> lv;
        for (int k = 1; k <= ds.t; ++k) lv.push_back(std::to_string(k));
        return lv;
    }
    const int f = ds.factor_index(name);
    if (f < 0) throw std::invalid_argument("unknown factor: " + name);
    return ds.factors[f].levels;
}

inline int factor_level_of(const LongDataset& ds, const Observation& o, const std::string& name) {
    if (name == "time") return o.time - 1;
    const int f = ds.factor_index(name);
    return o.levels[static_cast<std::size_t>(f)];
}

// sum-to-zero codes for level `lev` of a factor with `n` levels: column j
// carries 1 for level j, -1 for the last level, 0 otherwise
inline double effect_code(int lev, int j, int n) {
    if (lev == j) return 1.0;
    if (lev == n - 1) return -1.0;
    return 0.0;
}

} // namespace detail

inline DesignMatrices build_design(const LongDataset& ds,
                                   const std::vector<Term>& fixed_terms,
                                   const PseudoUnitAssignment* grouping = nullptr,
                                   bool with_eu_intercepts = true) {
    DesignMatrices dm;
    dm.t = ds.t;
    dm.terms = fixed_terms;
    const long n = static_cast<long>(ds.size());

    long p = 1;
    std::vector<std::vector<std::string>> term_factor_levels;
    for (const auto& term : fixed_terms) {
        long cols = 1;
        for (const auto& f : term.factors) {
            const auto lv = detail::factor_level_names(ds, f);
            if (lv.size() < 2)
                throw std::invalid_argument("factor " + f + " needs at least 2 levels to enter the design");
            cols *= static_cast<long>(lv.size()) - 1;
            bool seen = false;
            for (const auto& [fname, _] : dm.term_levels) seen = seen || fname == f;
            if (!seen) dm.term_levels.emplace_back(f, lv);
        }
        p += cols;
    }

    dm.X.resize(n, p);
    dm.columns.clear();
    dm.columns.push_back({"(Intercept)", 0, -1});
    dm.X.col(0).setOnes();

    long col = 1;
    for (const auto& term : fixed_terms) {
        const auto lvA = detail::factor_level_names(ds, term.factors[0]);
        const int nA = static_cast<int>(lvA.size());
        if (term.factors.size() == 1) {
            for (int j = 0; j + 1 < nA; ++j) {
                for (long i = 0; i < n; ++i) {
                    const int lev = detail::factor_level_of(ds, ds.observations[static_cast<std::size_t>(i)],
                                                            term.factors[0]);
                    dm.X(i, col) = detail::effect_code(lev, j, nA);
                }
                dm.columns.push_back({term.name(), j, -1});
                ++col;
            }
        } else {
            const auto lvB = detail::factor_level_names(ds, term.factors[1]);
            const int nB = static_cast<int>(lvB.size());
            for (int j = 0; j + 1 < nA; ++j) {
                for (int k = 0; k + 1 < nB; ++k) {
                    for (long i = 0; i < n; ++i) {
                        const auto& o = ds.observations[static_cast<std::size_t>(i)];
                        const int la = detail::factor_level_of(ds, o, term.factors[0]);
                        const int lb = detail::factor_level_of(ds, o, term.factors[1]);
                        dm.X(i, col) = detail::effect_code(la, j, nA) * detail::effect_code(lb, k, nB);
                    }
                    dm.columns.push_back({term.name(), j, k});
                    ++col;
                }
            }
        }
    }

    dm.y.resize(n);
    for (long i = 0; i < n; ++i) dm.y(i) = ds.observations[static_cast<std::size_t>(i)].y;

    // rank check: report the deficiency instead of silently dropping columns
    {
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(dm.X);
        qr.setThreshold(1e-10);
        if (qr.rank() < p)
            throw std::invalid_argument("design matrix is rank deficient: rank " +
                                        std::to_string(qr.rank()) + " < " + std::to_string(p) + " columns");
    }

    dm.zb_index.assign(static_cast<std::size_t>(n), -1);
    if (with_eu_intercepts) {
        dm.zb_names = ds.eu_ids();   // sorted
        std::map<std::string, int> idx;
        for (std::size_t i = 0; i < dm.zb_names.size(); ++i) idx[dm.zb_names[i]] = static_cast<int>(i);
        for (long i = 0; i < n; ++i)
            dm.zb_index[static_cast<std::size_t>(i)] = idx[ds.observations[static_cast<std::size_t>(i)].eu_id];
    }

    dm.zeta_index.assign(static_cast<std::size_t>(n), -1);
    if (grouping != nullptr) {
        if (grouping->group_of_row.size() != ds.size())
            throw std::invalid_argument("grouping does not cover every observation");
        std::set<std::pair<std::string, int>> keys;
        for (std::size_t i = 0; i < ds.size(); ++i)
            keys.insert({ds.observations[i].eu_id, grouping->group_of_row[i]});
        std::map<std::pair<std::string, int>, int> idx;
        for (const auto& k : keys) {
            idx[k] = static_cast<int>(dm.zeta_names.size());
            dm.zeta_names.push_back(k.first + "/" + std::to_string(k.second));
        }
        for (std::size_t i = 0; i < ds.size(); ++i)
            dm.zeta_index[i] = idx[{ds.observations[i].eu_id, grouping->group_of_row[i]}];
    }

    return dm;
}

// canonical treatment-by-time model: A + time + A:time, where A is the
// dataset's single treatment factor; degenerates gracefully for datasets
// without factors or with a single time
inline std::vector<Term> canonical_terms(const LongDataset& ds) {
    if (ds.factors.size() > 1)
        throw std::invalid_argument("canonical model expects at most one treatment factor, found " +
                                    std::to_string(ds.factors.size()));
    std::vector<Term> terms;
    if (!ds.factors.empty()) terms.push_back(Term{{ds.factors[0].name}});
    if (ds.t >= 2) {
        terms.push_back(Term{{"time"}});
        if (!ds.factors.empty()) terms.push_back(Term{{ds.factors[0].name, "time"}});
    }
    return terms;
}

// ---------------------------------------------------------------------------
// decoded effects: full per-level values under the sum-to-zero constraints
// ---------------------------------------------------------------------------

struct TermEffects {
    std::string term;
    std::vector<std::string> row_levels;
    std::vector<std::string> col_levels;   // empty for main effects
    Eigen::MatrixXd values;                // rows x max(1, cols)
};

struct DecodedEffects {
    double intercept = 0.0;
    std::vector<TermEffects> terms;
};

inline DecodedEffects decode_effects(const DesignMatrices& dm, const Eigen::VectorXd& beta) {
    if (beta.size() != dm.p()) throw std::invalid_argument("coefficient length does not match design");
    DecodedEffects out;
    out.intercept = beta(0);
    long col = 1;
    for (const auto& term : dm.terms) {
        TermEffects te;
        te.term = term.name();
        auto levels_of = [&](const std::string& f) {
            for (const auto& [n, lv] : dm.term_levels)
                if (n == f) return lv;
            throw std::invalid_argument("missing levels for factor " + f);
        };
        const auto lvA = levels_of(term.factors[0]);
        const int nA = static_cast<int>(lvA.size());
        te.row_levels = lvA;
        if (term.factors.size() == 1) {
            te.values.setZero(nA, 1);
            double sum = 0.0;
            for (int j = 0; j + 1 < nA; ++j) {
                te.values(j, 0) = beta(col++);
                sum += te.values(j, 0);
            }
            te.values(nA - 1, 0) = -sum;
        } else {
            const auto lvB = levels_of(term.factors[1]);
            const int nB = static_cast<int>(lvB.size());
            te.col_levels = lvB;
            te.values.setZero(nA, nB);
            for (int j = 0; j + 1 < nA; ++j)
                for (int k = 0; k + 1 < nB; ++k)
                    te.values(j, k) = beta(col++);
            for (int j = 0; j + 1 < nA; ++j) {
                double s = 0.0;
                for (int k = 0; k + 1 < nB; ++k) s += te.values(j, k);
                te.values(j, nB - 1) = -s;
            }
            for (int k = 0; k < nB; ++k) {
                double s = 0.0;
                for (int j = 0; j + 1 < nA; ++j) s += te.values(j, k);
                te.values(nA - 1, k) = -s;
            }
        }
        out.terms.push_back(std::move(te));
    }
    return out;
}

inline Eigen::VectorXd encode_effects(const DesignMatrices& dm, const DecodedEffects& de) {
    Eigen::VectorXd beta(dm.p());
    beta(0) = de.intercept;
    long col = 1;
    for (std::size_t ti = 0; ti < dm.terms.size(); ++ti) {
        const auto& te = de.terms.at(ti);
        const long nA = te.values.rows();
        if (dm.terms[ti].factors.size() == 1) {
            for (long j = 0; j + 1 < nA; ++j) beta(col++) = te.values(j, 0);
        } else {
            const long nB = te.values.cols();
            for (long j = 0; j + 1 < nA; ++j)
                for (long k = 0; k + 1 < nB; ++k)
                    beta(col++) = te.values(j, k);
        }
    }
    return beta;
}

} // namespace dslmm
