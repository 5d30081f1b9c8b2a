#pragma once

// Long-format dataset shared by every model: one row per measurement of an
// observational unit inside an experimental unit. Immutable after
// construction/validation; all downstream operations are pure.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dslmm {

struct FactorDef {
    std::string name;
    std::vector<std::string> levels;

    int level_index(const std::string& level) const {
        for (std::size_t i = 0; i < levels.size(); ++i)
            if (levels[i] == level) return static_cast<int>(i);
        return -1;
    }
};

struct Observation {
    std::string eu_id;
    std::string obs_id;          // synthesized when the source has none
    int time = 0;                // 1..t
    int rep = 0;
    std::vector<int> levels;     // level index per dataset factor, aligned with LongDataset::factors
    double y = 0.0;
};

class LongDataset {
public:
    std::vector<Observation> observations;
    std::vector<FactorDef> factors;
    int t = 0;
    bool balanced = false;

    std::size_t size() const { return observations.size(); }

    int factor_index(const std::string& name) const {
        for (std::size_t i = 0; i < factors.size(); ++i)
            if (factors[i].name == name) return static_cast<int>(i);
        return -1;
    }

    std::vector<std::string> eu_ids() const {
        std::set<std::string> s;
        for (const auto& o : observations) s.insert(o.eu_id);
        return {s.begin(), s.end()};
    }

    // true when no (eu, obs) pair is measured at more than one time
    bool is_destructive() const {
        std::map<std::pair<std::string, std::string>, int> seen;
        for (const auto& o : observations) {
            auto key = std::make_pair(o.eu_id, o.obs_id);
            auto it = seen.find(key);
            if (it == seen.end()) {
                seen.emplace(key, o.time);
            } else if (it->second != o.time) {
                return false;
            }
        }
        return true;
    }

    void require_destructive() const {
        std::map<std::pair<std::string, std::string>, int> seen;
        for (const auto& o : observations) {
            auto key = std::make_pair(o.eu_id, o.obs_id);
            auto it = seen.find(key);
            if (it == seen.end()) {
                seen.emplace(key, o.time);
            } else if (it->second != o.time) {
                throw std::invalid_argument("observational unit observed twice: eu=" + o.eu_id +
                                            " obs=" + o.obs_id);
            }
        }
    }

    void validate() {
        if (observations.empty()) throw std::invalid_argument("dataset has no observations");
        t = 0;
        for (const auto& o : observations) {
            if (o.eu_id.empty()) throw std::invalid_argument("empty experimental-unit identifier");
            if (o.time < 1) throw std::invalid_argument("time index must be >= 1");
            if (!std::isfinite(o.y)) throw std::invalid_argument("non-finite response");
            if (o.levels.size() != factors.size())
                throw std::invalid_argument("observation factor levels do not match dataset factors");
            for (std::size_t f = 0; f < factors.size(); ++f) {
                if (o.levels[f] < 0 || o.levels[f] >= static_cast<int>(factors[f].levels.size()))
                    throw std::invalid_argument("factor level out of range for factor " + factors[f].name);
            }
            t = std::max(t, o.time);
        }
        std::set<int> times;
        for (const auto& o : observations) times.insert(o.time);
        for (int k = 1; k <= t; ++k)
            if (!times.count(k))
                throw std::invalid_argument("times must be the integers 1..t with no gaps; missing time " +
                                            std::to_string(k));
        balanced = compute_balanced();
    }

private:
    bool compute_balanced() const {
        // equal counts over every (treatment cell x time) combination
        std::map<std::pair<std::vector<int>, int>, std::size_t> counts;
        for (const auto& o : observations) counts[{o.levels, o.time}]++;
        const std::size_t expected_cells = [&] {
            std::size_t cells = static_cast<std::size_t>(t);
            for (const auto& f : factors) cells *= f.levels.size();
            return cells;
        }();
        if (counts.size() != expected_cells) return false;
        std::size_t c0 = counts.begin()->second;
        for (const auto& [k, c] : counts)
            if (c != c0) return false;
        return true;
    }
};

// ---------------------------------------------------------------------------
// CSV interface: header row, canonical columns eu,obs,time,rep,<factor...>,y
// ---------------------------------------------------------------------------

struct CsvSchema {
    std::string eu = "eu";
    std::string obs = "obs";      // optional column
    std::string time = "time";
    std::string rep = "rep";      // optional column
    std::string y = "y";
    bool require_destructive = false;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') { cur.push_back('"'); ++i; }
                else quoted = false;
            } else cur.push_back(c);
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_double(const std::string& s, std::size_t row, const std::string& col) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("unparsable numeric value '" + s + "' in column " + col +
                                    " at row " + std::to_string(row));
    }
}

inline int parse_int(const std::string& s, std::size_t row, const std::string& col) {
    const double v = parse_double(s, row, col);
    const int i = static_cast<int>(std::llround(v));
    if (std::fabs(v - i) > 1e-9)
        throw std::invalid_argument("expected integer in column " + col + " at row " + std::to_string(row));
    return i;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string csv_escape(const std::string& s) {
    bool need = false;
    for (char c : s)
        if (c == ',' || c == '"' || c == '\n' || c == '\r') { need = true; break; }
    if (!need) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"";
        out.push_back(c);
    }
    out += "\"";
    return out;
}

// atomic text write: temp file in the target directory, then rename
inline void write_file_atomic(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out << content;
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    fs::rename(tmp, target);
}

} // namespace detail

inline LongDataset load_csv(const std::string& path, const CsvSchema& schema = {}) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open file: " + path);
    std::string header;
    if (!std::getline(in, header)) throw std::invalid_argument("empty file: " + path);

    const auto cols = detail::split_csv_line(header);
    auto col_of = [&](const std::string& name) -> int {
        for (std::size_t i = 0; i < cols.size(); ++i)
            if (cols[i] == name) return static_cast<int>(i);
        return -1;
    };
    const int c_eu = col_of(schema.eu);
    const int c_obs = col_of(schema.obs);
    const int c_time = col_of(schema.time);
    const int c_rep = col_of(schema.rep);
    const int c_y = col_of(schema.y);
    if (c_eu < 0) throw std::invalid_argument("missing column '" + schema.eu + "' in " + path);
    if (c_time < 0) throw std::invalid_argument("missing column '" + schema.time + "' in " + path);
    if (c_y < 0) throw std::invalid_argument("missing column '" + schema.y + "' in " + path);

    LongDataset ds;
    std::vector<int> factor_cols;
    for (std::size_t i = 0; i < cols.size(); ++i) {
        const int ci = static_cast<int>(i);
        if (ci == c_eu || ci == c_obs || ci == c_time || ci == c_rep || ci == c_y) continue;
        if (cols[i].empty()) throw std::invalid_argument("empty column name in header of " + path);
        factor_cols.push_back(ci);
        ds.factors.push_back({cols[i], {}});
    }

    std::map<std::tuple<std::string, std::string, int, int>, std::size_t> keys;
    std::string line;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != cols.size())
            throw std::invalid_argument("row " + std::to_string(row) + " has " +
                                        std::to_string(fields.size()) + " fields, expected " +
                                        std::to_string(cols.size()));
        Observation o;
        o.eu_id = fields[c_eu];
        o.time = detail::parse_int(fields[c_time], row, schema.time);
        o.rep = c_rep >= 0 ? detail::parse_int(fields[c_rep], row, schema.rep) : 1;
        o.y = detail::parse_double(fields[c_y], row, schema.y);
        if (c_obs >= 0 && !fields[c_obs].empty()) {
            o.obs_id = fields[c_obs];
        } else {
            // synthetic identity: destruction makes the original identity irrelevant
            o.obs_id = o.eu_id + ":" + std::to_string(o.time) + ":" + std::to_string(row - 1);
        }
        for (std::size_t f = 0; f < factor_cols.size(); ++f) {
            const std::string& level = fields[factor_cols[f]];
            int idx = ds.factors[f].level_index(level);
            if (idx < 0) {
                ds.factors[f].levels.push_back(level);
                idx = static_cast<int>(ds.factors[f].levels.size()) - 1;
            }
            o.levels.push_back(idx);
        }
        auto key = std::make_tuple(o.eu_id, o.obs_id, o.time, o.rep);
        auto [it, inserted] = keys.emplace(key, row);
        if (!inserted)
            throw std::invalid_argument("duplicate (eu, obs, time, rep) key at row " + std::to_string(row) +
                                        " (first seen at row " + std::to_string(it->second) + ")");
        ds.observations.push_back(std::move(o));
    }
    if (ds.observations.empty()) throw std::invalid_argument("empty file: " + path);

    // level order: lexicographic, so datasets do not depend on row order
    for (std::size_t f = 0; f < ds.factors.size(); ++f) {
        auto sorted = ds.factors[f].levels;
        std::sort(sorted.begin(), sorted.end());
        std::vector<int> remap(ds.factors[f].levels.size());
        for (std::size_t old = 0; old < remap.size(); ++old) {
            const auto it = std::find(sorted.begin(), sorted.end(), ds.factors[f].levels[old]);
            remap[old] = static_cast<int>(it - sorted.begin());
        }
        ds.factors[f].levels = sorted;
        for (auto& o : ds.observations) o.levels[f] = remap[o.levels[f]];
    }

    ds.validate();
    if (schema.require_destructive) ds.require_destructive();
    return ds;
}

inline std::string to_csv(const LongDataset& ds) {
    std::string out = "eu,obs,time,rep";
    for (const auto& f : ds.factors) out += "," + detail::csv_escape(f.name);
    out += ",y\n";
    for (const auto& o : ds.observations) {
        out += detail::csv_escape(o.eu_id);
        out += ",";
        out += detail::csv_escape(o.obs_id);
        out += "," + std::to_string(o.time) + "," + std::to_string(o.rep);
        for (std::size_t f = 0; f < ds.factors.size(); ++f)
            out += "," + detail::csv_escape(ds.factors[f].levels[o.levels[f]]);
        out += "," + detail::format_double(o.y) + "\n";
    }
    return out;
}

inline void save_csv(const LongDataset& ds, const std::string& path) {
    detail::write_file_atomic(path, to_csv(ds));
}

// Collapse to one row per (eu, time): the response becomes the cell mean
// over observational units and replicates. Factor levels must be constant
// within each experimental unit.
inline LongDataset aggregate_eu_time_means(const LongDataset& ds) {
    std::map<std::pair<std::string, int>, std::pair<double, std::size_t>> cells;
    std::map<std::string, std::vector<int>> eu_levels;
    for (const auto& o : ds.observations) {
        auto& [sum, count] = cells[{o.eu_id, o.time}];
        sum += o.y;
        count += 1;
        auto it = eu_levels.find(o.eu_id);
        if (it == eu_levels.end()) {
            eu_levels.emplace(o.eu_id, o.levels);
        } else if (it->second != o.levels) {
            throw std::invalid_argument("factor levels vary within experimental unit " + o.eu_id +
                                        "; cell-mean aggregation needs unit-level factors");
        }
    }
    LongDataset out;
    out.factors = ds.factors;
    for (const auto& [key, sc] : cells) {
        Observation o;
        o.eu_id = key.first;
        o.obs_id = "avg";
        o.time = key.second;
        o.rep = 1;
        o.levels = eu_levels[key.first];
        o.y = sc.first / static_cast<double>(sc.second);
        out.observations.push_back(std::move(o));
    }
    out.validate();
    return out;
}

} // namespace dslmm
