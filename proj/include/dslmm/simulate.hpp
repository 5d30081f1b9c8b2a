#pragma once

// Complete-panel generator with AR(1) within-unit errors and the
// destructive sampling scheme: every simulated observational unit is kept
// at exactly one time. Generation is keyed by (seed, treatment, unit)
// substreams so output does not depend on evaluation order.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dslmm/data.hpp"
#include "dslmm/rng.hpp"

namespace dslmm {

struct SimulationConfig {
    int n = 10;               // experimental units per treatment
    int M = 2;                // treatments
    int t = 10;               // times
    int K = 4;                // observational units kept per (eu, time)
    int J = 40;               // simulated observational units per eu
    int L = 10;               // replicates per (unit, time)
    double mu = 0.0;
    double deltaA = 0.0;      // |A_2 - A_1|
    double timeSlope = 5.0;   // response increase per unit of time
    double deltaATmax = 0.0;  // max gap between interaction cells
    double sigma_b2 = 5.0;
    double sigma_eta2 = 4.0;
    double sigma_eps2 = 2.0;
    double rho = 0.8;
    std::uint64_t seed = 1;
    int G = 2;                // groups for downstream fitting

    void validate() const {
        if (n < 1 || M < 2 || t < 2 || K < 1 || J < 1 || L < 1)
            throw std::invalid_argument("simulation sizes must satisfy n,K,J,L >= 1, M >= 2, t >= 2");
        if (sigma_b2 < 0 || sigma_eta2 < 0 || sigma_eps2 < 0)
            throw std::invalid_argument("variances must be non-negative");
        if (!(std::fabs(rho) < 1.0)) throw std::invalid_argument("|rho| must be < 1");
        if (deltaA < 0 || deltaATmax < 0)
            throw std::invalid_argument("effect gaps must be non-negative");
        if (static_cast<long>(K) * t > J)
            throw std::invalid_argument("destructive sampling needs K*t <= J unused units per eu");
        if (G < 1) throw std::invalid_argument("G must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const SimulationConfig& c) {
    j = nlohmann::json{{"n", c.n},       {"M", c.M},       {"t", c.t},
                       {"K", c.K},       {"J", c.J},       {"L", c.L},
                       {"mu", c.mu},     {"deltaA", c.deltaA},
                       {"timeSlope", c.timeSlope},         {"deltaATmax", c.deltaATmax},
                       {"sigma_b2", c.sigma_b2},           {"sigma_eta2", c.sigma_eta2},
                       {"sigma_eps2", c.sigma_eps2},       {"rho", c.rho},
                       {"seed", c.seed}, {"G", c.G}};
}

inline void from_json(const nlohmann::json& j, SimulationConfig& c) {
    SimulationConfig d;
    c.n = j.value("n", d.n);
    c.M = j.value("M", d.M);
    c.t = j.value("t", d.t);
    c.K = j.value("K", d.K);
    c.J = j.contains("J") ? j.at("J").get<int>() : c.K * c.t;
    c.L = j.value("L", d.L);
    c.mu = j.value("mu", d.mu);
    c.deltaA = j.value("deltaA", d.deltaA);
    c.timeSlope = j.value("timeSlope", d.timeSlope);
    c.deltaATmax = j.value("deltaATmax", d.deltaATmax);
    c.sigma_b2 = j.value("sigma_b2", d.sigma_b2);
    c.sigma_eta2 = j.value("sigma_eta2", d.sigma_eta2);
    c.sigma_eps2 = j.value("sigma_eps2", d.sigma_eps2);
    c.rho = j.value("rho", d.rho);
    c.seed = j.value("seed", d.seed);
    c.G = j.value("G", d.G);
}

// ---------------------------------------------------------------------------
// AR(1) correlation matrix
// ---------------------------------------------------------------------------

struct Ar1Matrix {
    int t = 0;
    double rho = 0.0;
    Eigen::MatrixXd entries;
};

inline Ar1Matrix ar1_matrix(int t, double rho) {
    if (t < 1) throw std::invalid_argument("t must be >= 1");
    if (!(std::fabs(rho) < 1.0)) throw std::invalid_argument("|rho| must be < 1");
    Ar1Matrix m;
    m.t = t;
    m.rho = rho;
    m.entries.resize(t, t);
    for (int a = 0; a < t; ++a)
        for (int b = 0; b < t; ++b)
            m.entries(a, b) = std::pow(rho, std::abs(a - b));
    return m;
}

// ---------------------------------------------------------------------------
// fixed effects under the sum-to-zero constraints
// ---------------------------------------------------------------------------

struct FixedEffects {
    std::vector<double> A;                  // M values, sum 0
    std::vector<double> T;                  // t values, sum 0
    std::vector<std::vector<double>> AT;    // M x t, each row and column sums 0
};

inline FixedEffects make_fixed_effects(const SimulationConfig& cfg) {
    FixedEffects fe;
    // treatments: centered ramp with total span deltaA
    fe.A.resize(static_cast<std::size_t>(cfg.M));
    for (int m = 0; m < cfg.M; ++m)
        fe.A[static_cast<std::size_t>(m)] =
            cfg.deltaA * (static_cast<double>(m) / (cfg.M - 1) - 0.5);
    // time: linear trend centered at zero
    fe.T.resize(static_cast<std::size_t>(cfg.t));
    for (int k = 0; k < cfg.t; ++k)
        fe.T[static_cast<std::size_t>(k)] = cfg.timeSlope * (k + 1 - (cfg.t + 1) / 2.0);
    // interaction: outer product of centered ramps rescaled so the largest
    // gap between any two cells equals deltaATmax
    fe.AT.assign(static_cast<std::size_t>(cfg.M),
                 std::vector<double>(static_cast<std::size_t>(cfg.t), 0.0));
    if (cfg.deltaATmax > 0.0) {
        double lo = 0.0, hi = 0.0;
        for (int m = 0; m < cfg.M; ++m) {
            for (int k = 0; k < cfg.t; ++k) {
                const double u = static_cast<double>(m) / (cfg.M - 1) - 0.5;
                const double v = static_cast<double>(k) / (cfg.t - 1) - 0.5;
                fe.AT[static_cast<std::size_t>(m)][static_cast<std::size_t>(k)] = u * v;
                lo = std::min(lo, u * v);
                hi = std::max(hi, u * v);
            }
        }
        const double scale = cfg.deltaATmax / (hi - lo);
        for (auto& row : fe.AT)
            for (auto& v : row) v *= scale;
    }
    return fe;
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

namespace detail {

inline std::string eu_label(int m, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "t%d_eu%02d", m + 1, i + 1);
    return buf;
}

} // namespace detail

// Complete panel: every unit of every experimental unit measured at every
// time with L replicates. One treatment factor named "A".
inline LongDataset simulate_complete(const SimulationConfig& cfg) {
    cfg.validate();
    const FixedEffects fe = make_fixed_effects(cfg);
    const Ar1Matrix sigma = ar1_matrix(cfg.t, cfg.rho);
    const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(sigma.entries).matrixL();
    const double sd_eps = std::sqrt(cfg.sigma_eps2);
    const double sd_b = std::sqrt(cfg.sigma_b2);
    const double sd_eta = std::sqrt(cfg.sigma_eta2);

    LongDataset ds;
    ds.factors.push_back({"A", {}});
    for (int m = 0; m < cfg.M; ++m) ds.factors[0].levels.push_back("a" + std::to_string(m + 1));
    ds.observations.reserve(static_cast<std::size_t>(cfg.M) * cfg.n * cfg.J * cfg.t * cfg.L);

    Eigen::VectorXd z(cfg.t), eps(cfg.t);
    for (int m = 0; m < cfg.M; ++m) {
        for (int i = 0; i < cfg.n; ++i) {
            Rng rng(cfg.seed, {0x73696dULL, static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(i)});
            const double b = sd_b * rng.normal();
            const std::string eu = detail::eu_label(m, i);
            for (int j = 0; j < cfg.J; ++j) {
                const double eta = sd_eta * rng.normal();
                char obs[32];
                std::snprintf(obs, sizeof(obs), "ou%03d", j + 1);
                for (int l = 0; l < cfg.L; ++l) {
                    for (int k = 0; k < cfg.t; ++k) z(k) = rng.normal();
                    eps = sd_eps * (chol * z);
                    for (int k = 0; k < cfg.t; ++k) {
                        Observation o;
                        o.eu_id = eu;
                        o.obs_id = obs;
                        o.time = k + 1;
                        o.rep = l + 1;
                        o.levels = {m};
                        o.y = cfg.mu + fe.A[static_cast<std::size_t>(m)] + b + eta +
                              fe.T[static_cast<std::size_t>(k)] +
                              fe.AT[static_cast<std::size_t>(m)][static_cast<std::size_t>(k)] + eps(k);
                        ds.observations.push_back(std::move(o));
                    }
                }
            }
        }
    }
    ds.validate();
    return ds;
}

// Destructive sample: per experimental unit, allocate units to times without
// replacement so each unit is observed at exactly one time, K units per
// (eu, time); all replicates of the chosen (unit, time) pair are kept.
inline LongDataset destructive_sample(const LongDataset& ds, int K, std::uint64_t seed) {
    if (K < 1) throw std::invalid_argument("K must be >= 1");
    // distinct units per eu, in sorted order for determinism
    std::map<std::string, std::set<std::string>> units;
    for (const auto& o : ds.observations) units[o.eu_id].insert(o.obs_id);

    // chosen time per (eu, obs)
    std::map<std::pair<std::string, std::string>, int> chosen;
    std::uint64_t eu_tag = 0;
    for (const auto& [eu, obs_set] : units) {
        const std::size_t need = static_cast<std::size_t>(K) * static_cast<std::size_t>(ds.t);
        if (obs_set.size() < need)
            throw std::invalid_argument("eu " + eu + " has " + std::to_string(obs_set.size()) +
                                        " units, needs K*t = " + std::to_string(need));
        std::vector<std::string> pool(obs_set.begin(), obs_set.end());
        Rng rng(seed, {0x64657374ULL, eu_tag++});
        rng.shuffle(pool);
        std::size_t pos = 0;
        for (int k = 1; k <= ds.t; ++k)
            for (int c = 0; c < K; ++c)
                chosen[{eu, pool[pos++]}] = k;
    }

    LongDataset out;
    out.factors = ds.factors;
    for (const auto& o : ds.observations) {
        const auto it = chosen.find({o.eu_id, o.obs_id});
        if (it != chosen.end() && it->second == o.time) out.observations.push_back(o);
    }
    out.validate();
    out.require_destructive();
    return out;
}

} // namespace dslmm
