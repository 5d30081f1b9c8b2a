#pragma once

// Residual and random-effect checks: per-pseudo-unit correlograms of the
// time-ordered mean residuals, Anderson-Darling normality (case 3, both
// parameters estimated) and the Bartlett homoscedasticity test.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dslmm/data.hpp"
#include "dslmm/grouping.hpp"
#include "dslmm/lmm.hpp"
#include "dslmm/rng.hpp"
#include "dslmm/stats.hpp"

namespace dslmm {

// ---------------------------------------------------------------------------
// autocorrelations
// ---------------------------------------------------------------------------

struct AcfResult {
    std::string eu;
    int group = 0;
    std::vector<double> acf;    // lags 1..maxlag
    double band = 0.0;          // +-1.96/sqrt(n)
    int n = 0;                  // series length
};

inline std::vector<double> sample_acf(const std::vector<double>& x, int maxlag) {
    const int n = static_cast<int>(x.size());
    if (n < 2) throw std::invalid_argument("series shorter than 2");
    if (maxlag < 1 || maxlag >= n) throw std::invalid_argument("maxlag must be in [1, n)");
    const double m = mean_of(x);
    double denom = 0.0;
    for (double v : x) denom += (v - m) * (v - m);
    std::vector<double> out(static_cast<std::size_t>(maxlag), 0.0);
    if (denom == 0.0) return out;   // flat series carries no autocorrelation signal
    for (int h = 1; h <= maxlag; ++h) {
        double num = 0.0;
        for (int i = 0; i + h < n; ++i)
            num += (x[static_cast<std::size_t>(i)] - m) * (x[static_cast<std::size_t>(i + h)] - m);
        out[static_cast<std::size_t>(h - 1)] = num / denom;
    }
    return out;
}

// Correlograms of the grouped residual series of a fitted model: one series
// per (eu, group), entry k = mean residual of the group at time k.
inline std::vector<AcfResult> residual_acf(const FittedLMM& fm, const LongDataset& ds,
                                           const PseudoUnitAssignment& pa, int maxlag) {
    if (static_cast<std::size_t>(fm.fitted.size()) != ds.size())
        throw std::invalid_argument("fit does not match the dataset");
    if (pa.group_of_row.size() != ds.size())
        throw std::invalid_argument("grouping does not cover the dataset");
    std::map<std::pair<std::string, int>, std::vector<std::pair<double, std::size_t>>> series;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& o = ds.observations[i];
        auto& acc = series[{o.eu_id, pa.group_of_row[i]}];
        if (acc.empty()) acc.assign(static_cast<std::size_t>(ds.t), {0.0, 0});
        acc[static_cast<std::size_t>(o.time - 1)].first += o.y - fm.fitted(static_cast<long>(i));
        acc[static_cast<std::size_t>(o.time - 1)].second += 1;
    }
    std::vector<AcfResult> out;
    for (const auto& [key, acc] : series) {
        std::vector<double> x;
        for (const auto& [sum, cnt] : acc)
            if (cnt > 0) x.push_back(sum / static_cast<double>(cnt));
        AcfResult r;
        r.eu = key.first;
        r.group = key.second;
        r.n = static_cast<int>(x.size());
        r.band = 1.96 / std::sqrt(static_cast<double>(r.n));
        r.acf = sample_acf(x, std::min(maxlag, r.n - 1));
        out.push_back(std::move(r));
    }
    return out;
}

inline double fraction_within_band(const std::vector<AcfResult>& results) {
    std::size_t total = 0, inside = 0;
    for (const auto& r : results)
        for (double a : r.acf) {
            ++total;
            if (std::fabs(a) <= r.band) ++inside;
        }
    if (total == 0) throw std::invalid_argument("no autocorrelation points");
    return static_cast<double>(inside) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

struct TestResult {
    std::string name;
    double statistic = 0.0;
    double p = 1.0;
    std::size_t n = 0;
};

// Case-3 Anderson-Darling (mean and variance estimated), with the
// small-sample adjustment A*^2 = A^2 (1 + 0.75/n + 2.25/n^2) and the
// D'Agostino-Stephens piecewise p-value approximation.
inline TestResult anderson_darling(std::vector<double> sample) {
    const std::size_t n = sample.size();
    if (n < 8) throw std::invalid_argument("anderson_darling needs n >= 8");
    const double m = mean_of(sample);
    const double sd = std::sqrt(variance_of(sample));
    if (sd == 0.0) throw std::invalid_argument("anderson_darling: zero variance sample");
    std::sort(sample.begin(), sample.end());

    const double nn = static_cast<double>(n);
    double a2 = -nn;
    for (std::size_t i = 0; i < n; ++i) {
        const double zi = (sample[i] - m) / sd;
        const double zr = (sample[n - 1 - i] - m) / sd;
        const double lo = std::max(norm_cdf(zi), 1e-300);
        const double hi = std::max(norm_sf(zr), 1e-300);
        a2 -= (2.0 * static_cast<double>(i) + 1.0) / nn * (std::log(lo) + std::log(hi));
    }
    const double astar = a2 * (1.0 + 0.75 / nn + 2.25 / (nn * nn));

    double p;
    if (astar >= 0.6)
        p = std::exp(1.2937 - 5.709 * astar + 0.0186 * astar * astar);
    else if (astar > 0.34)
        p = std::exp(0.9177 - 4.279 * astar - 1.38 * astar * astar);
    else if (astar > 0.2)
        p = 1.0 - std::exp(-8.318 + 42.796 * astar - 59.938 * astar * astar);
    else
        p = 1.0 - std::exp(-13.436 + 101.14 * astar - 223.73 * astar * astar);

    TestResult r;
    r.name = "anderson-darling";
    r.statistic = astar;
    r.p = std::min(1.0, std::max(0.0, p));
    r.n = n;
    return r;
}

inline TestResult bartlett(const std::vector<std::vector<double>>& groups) {
    const std::size_t k = groups.size();
    if (k < 2) throw std::invalid_argument("bartlett needs at least 2 groups");
    double n_total = 0.0, pooled = 0.0, log_sum = 0.0, inv_sum = 0.0;
    std::size_t count = 0;
    for (const auto& g : groups) {
        if (g.size() < 2) throw std::invalid_argument("bartlett: every group needs at least 2 values");
        const double v = variance_of(g);
        if (v <= 0.0) throw std::invalid_argument("bartlett: group with zero variance");
        const double ni = static_cast<double>(g.size());
        n_total += ni;
        pooled += (ni - 1.0) * v;
        log_sum += (ni - 1.0) * std::log(v);
        inv_sum += 1.0 / (ni - 1.0);
        count += g.size();
    }
    const double kk = static_cast<double>(k);
    const double sp2 = pooled / (n_total - kk);
    const double c = 1.0 + (inv_sum - 1.0 / (n_total - kk)) / (3.0 * (kk - 1.0));
    const double stat = ((n_total - kk) * std::log(sp2) - log_sum) / c;

    TestResult r;
    r.name = "bartlett";
    r.statistic = stat;
    r.p = chi2_sf(std::max(stat, 0.0), kk - 1.0);
    r.n = count;
    return r;
}

// Random assignment of values into equal bins, used to screen random
// effects for heteroscedasticity the way a grouped Bartlett test expects.
inline std::vector<std::vector<double>> random_bins(const std::vector<double>& values,
                                                    int nbins, std::uint64_t seed) {
    if (nbins < 2) throw std::invalid_argument("need at least 2 bins");
    if (values.size() < static_cast<std::size_t>(2 * nbins))
        throw std::invalid_argument("too few values for " + std::to_string(nbins) + " bins");
    std::vector<std::size_t> idx(values.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed, {0x62696e73ULL});
    rng.shuffle(idx);
    std::vector<std::vector<double>> bins(static_cast<std::size_t>(nbins));
    for (std::size_t i = 0; i < idx.size(); ++i)
        bins[i % static_cast<std::size_t>(nbins)].push_back(values[idx[i]]);
    return bins;
}

} // namespace dslmm
