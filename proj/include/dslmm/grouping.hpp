#pragma once

// Pseudo-observational units: partition the observations of each
// (experimental unit, time) cell into G groups so that every group has
// measurements at every time even though each physical unit is destroyed
// after a single measurement.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dslmm/data.hpp"
#include "dslmm/rng.hpp"

namespace dslmm {

enum class GroupingStrategy { rank, quantile, covariate };

inline const char* to_string(GroupingStrategy s) {
    switch (s) {
        case GroupingStrategy::rank: return "rank";
        case GroupingStrategy::quantile: return "quantile";
        case GroupingStrategy::covariate: return "covariate";
    }
    return "?";
}

struct PseudoUnitAssignment {
    int G = 1;
    std::string strategy;
    std::vector<int> group_of_row;   // aligned with dataset rows, values 1..G

    int group(std::size_t row) const { return group_of_row.at(row); }
};

namespace detail {

struct CellRow {
    std::size_t row;
    double y;
    const std::string* obs_id;
    int rep;
};

// cells keyed by (eu, time); row order within a cell is input order
inline std::map<std::pair<std::string, int>, std::vector<CellRow>> cells_of(const LongDataset& ds) {
    std::map<std::pair<std::string, int>, std::vector<CellRow>> cells;
    for (std::size_t i = 0; i < ds.observations.size(); ++i) {
        const auto& o = ds.observations[i];
        cells[{o.eu_id, o.time}].push_back({i, o.y, &o.obs_id, o.rep});
    }
    return cells;
}

inline void sort_cell(std::vector<CellRow>& cell) {
    std::sort(cell.begin(), cell.end(), [](const CellRow& a, const CellRow& b) {
        if (a.y != b.y) return a.y < b.y;
        if (*a.obs_id != *b.obs_id) return *a.obs_id < *b.obs_id;
        return a.rep < b.rep;
    });
}

// block sizes ceil(c/G) first, floor(c/G) after, counted from the bottom
inline std::vector<std::size_t> block_sizes(std::size_t c, int G) {
    std::vector<std::size_t> sizes(static_cast<std::size_t>(G), c / static_cast<std::size_t>(G));
    const std::size_t extra = c % static_cast<std::size_t>(G);
    for (std::size_t g = 0; g < extra; ++g) sizes[g] += 1;
    return sizes;
}

} // namespace detail

inline PseudoUnitAssignment assign_pseudo_units(const LongDataset& ds, int G,
                                                GroupingStrategy strategy = GroupingStrategy::rank,
                                                const std::string& covariate = "") {
    if (G < 1) throw std::invalid_argument("G must be >= 1");
    PseudoUnitAssignment pa;
    pa.G = G;
    pa.strategy = to_string(strategy);
    pa.group_of_row.assign(ds.size(), 1);
    if (G == 1) return pa;

    if (strategy == GroupingStrategy::covariate) {
        if (covariate.empty()) throw std::invalid_argument("covariate strategy requires a factor name");
        const int f = ds.factor_index(covariate);
        if (f < 0) throw std::invalid_argument("unknown covariate factor: " + covariate);
        if (static_cast<int>(ds.factors[f].levels.size()) != G)
            throw std::invalid_argument("covariate factor " + covariate + " has " +
                                        std::to_string(ds.factors[f].levels.size()) +
                                        " levels, expected G=" + std::to_string(G));
        for (std::size_t i = 0; i < ds.size(); ++i)
            pa.group_of_row[i] = ds.observations[i].levels[f] + 1;
        return pa;
    }

    auto cells = detail::cells_of(ds);
    for (auto& [key, cell] : cells) {
        if (cell.size() < static_cast<std::size_t>(G))
            throw std::invalid_argument("cell eu=" + key.first + " time=" + std::to_string(key.second) +
                                        " has " + std::to_string(cell.size()) +
                                        " observations, fewer than G=" + std::to_string(G));
        detail::sort_cell(cell);
        if (strategy == GroupingStrategy::rank) {
            const auto sizes = detail::block_sizes(cell.size(), G);
            std::size_t pos = 0;
            for (int g = 0; g < G; ++g)
                for (std::size_t j = 0; j < sizes[static_cast<std::size_t>(g)]; ++j)
                    pa.group_of_row[cell[pos++].row] = g + 1;
        } else {
            // quantile: nearest-rank percentile cut points, ties go low
            const std::size_t c = cell.size();
            std::vector<double> cuts;
            for (int g = 1; g < G; ++g) {
                const auto idx = static_cast<std::size_t>(
                    std::ceil(static_cast<double>(c) * g / G)) - 1;
                cuts.push_back(cell[std::min(idx, c - 1)].y);
            }
            for (const auto& r : cell) {
                int g = G;
                for (int q = 0; q < G - 1; ++q)
                    if (r.y <= cuts[static_cast<std::size_t>(q)]) { g = q + 1; break; }
                pa.group_of_row[r.row] = g;
            }
        }
    }
    return pa;
}

// Grouping independent of the response: seeded uniform split of the
// observational units of each cell, with every replicate following its
// unit. Used when the grouping must not be informed by y (calibration
// runs, homoscedasticity checks on random effects).
inline PseudoUnitAssignment assign_pseudo_units_random(const LongDataset& ds, int G, std::uint64_t seed) {
    if (G < 1) throw std::invalid_argument("G must be >= 1");
    PseudoUnitAssignment pa;
    pa.G = G;
    pa.strategy = "random";
    pa.group_of_row.assign(ds.size(), 1);
    if (G == 1) return pa;

    std::map<std::pair<std::string, int>, std::set<std::string>> cell_units;
    for (const auto& o : ds.observations) cell_units[{o.eu_id, o.time}].insert(o.obs_id);

    std::map<std::tuple<std::string, int, std::string>, int> group_of_unit;
    std::uint64_t cell_tag = 0;
    for (const auto& [key, unit_set] : cell_units) {
        if (unit_set.size() < static_cast<std::size_t>(G))
            throw std::invalid_argument("cell eu=" + key.first + " time=" + std::to_string(key.second) +
                                        " has fewer observational units than G");
        std::vector<std::string> units(unit_set.begin(), unit_set.end());
        Rng rng(seed, {0x67726f7570ULL, cell_tag++});
        rng.shuffle(units);
        const auto sizes = detail::block_sizes(units.size(), G);
        std::size_t pos = 0;
        for (int g = 0; g < G; ++g)
            for (std::size_t j = 0; j < sizes[static_cast<std::size_t>(g)]; ++j)
                group_of_unit[{key.first, key.second, units[pos++]}] = g + 1;
    }
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& o = ds.observations[i];
        pa.group_of_row[i] = group_of_unit.at({o.eu_id, o.time, o.obs_id});
    }
    return pa;
}

// Identity grouping: every observational unit is its own pseudo-unit. On a
// complete panel this reproduces the full model where the per-unit effect is
// estimable, which serves as the reference fit.
inline PseudoUnitAssignment assign_identity_units(const LongDataset& ds) {
    std::map<std::string, std::set<std::string>> units;
    for (const auto& o : ds.observations) units[o.eu_id].insert(o.obs_id);
    std::map<std::pair<std::string, std::string>, int> group_of;
    int gmax = 0;
    for (const auto& [eu, obs_set] : units) {
        int g = 0;
        for (const auto& obs : obs_set) group_of[{eu, obs}] = ++g;
        gmax = std::max(gmax, g);
    }
    PseudoUnitAssignment pa;
    pa.G = gmax;
    pa.strategy = "identity";
    pa.group_of_row.resize(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i)
        pa.group_of_row[i] = group_of[{ds.observations[i].eu_id, ds.observations[i].obs_id}];
    return pa;
}

// ---------------------------------------------------------------------------
// balance report
// ---------------------------------------------------------------------------

struct PseudoUnitSummary {
    // count per (eu, group, time)
    std::map<std::tuple<std::string, int, int>, std::size_t> counts;
    std::vector<std::tuple<std::string, int, int>> empty_cells;
    bool equal_sizes = true;
};

inline PseudoUnitSummary pseudo_unit_summary(const PseudoUnitAssignment& pa, const LongDataset& ds) {
    if (pa.group_of_row.size() != ds.size())
        throw std::invalid_argument("assignment does not cover the dataset");
    PseudoUnitSummary s;
    std::set<std::string> eus;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& o = ds.observations[i];
        s.counts[{o.eu_id, pa.group_of_row[i], o.time}]++;
        eus.insert(o.eu_id);
    }
    std::size_t first = 0;
    bool have_first = false;
    for (const auto& eu : eus) {
        for (int g = 1; g <= pa.G; ++g) {
            for (int k = 1; k <= ds.t; ++k) {
                const auto it = s.counts.find({eu, g, k});
                const std::size_t c = it == s.counts.end() ? 0 : it->second;
                if (c == 0) s.empty_cells.push_back({eu, g, k});
                if (!have_first) { first = c; have_first = true; }
                if (c != first) s.equal_sizes = false;
            }
        }
    }
    return s;
}

inline std::string assignment_to_csv(const PseudoUnitAssignment& pa, const LongDataset& ds) {
    if (pa.group_of_row.size() != ds.size())
        throw std::invalid_argument("assignment does not cover the dataset");
    std::set<std::tuple<std::string, int, std::string, int>> rows;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& o = ds.observations[i];
        rows.insert({o.eu_id, o.time, o.obs_id, pa.group_of_row[i]});
    }
    std::string out = "eu,time,obs,group\n";
    for (const auto& [eu, time, obs, g] : rows) {
        out += detail::csv_escape(eu) + "," + std::to_string(time) + "," +
               detail::csv_escape(obs) + "," + std::to_string(g) + "\n";
    }
    return out;
}

} // namespace dslmm
