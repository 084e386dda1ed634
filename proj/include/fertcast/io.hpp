#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fertcast/data.hpp"
#include "fertcast/diagnostics.hpp"
#include "fertcast/evaluate.hpp"
#include "fertcast/forecast.hpp"
#include "fertcast/model.hpp"
#include "fertcast/rng.hpp"
#include "fertcast/sampler.hpp"

// File formats and run artifacts: HFD-style whitespace tables (read-only
// adapter), the canonical cohort,age_label,births,exposure CSV, flat
// key=value run configuration, draw/stats persistence, and the JSON reports
// behind the command-line driver.  Artifacts written as part of a run start
// with a "# run <id>" line so outputs from different configurations cannot be
// silently mixed; readers hand the id back for the caller to check.

namespace fertcast {

inline constexpr const char* kVersion = "0.1.0";

namespace detail {

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  std::array<char, 32> buf;
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline std::string format_count(double v) {
  return std::to_string(static_cast<long long>(std::llround(v)));
}

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::string trim(std::string_view s) {
  const auto issp = [](char c) { return c == ' ' || c == '\t'; };
  std::size_t b = 0, e = s.size();
  while (b < e && issp(s[b])) ++b;
  while (e > b && issp(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> whitespace_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline double parse_double(const std::string& tok, const std::string& where) {
  double v = 0.0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size() || !std::isfinite(v)) {
    throw std::invalid_argument(where + ": expected a number, got '" + tok + "'");
  }
  return v;
}

inline long long parse_int(const std::string& tok, const std::string& where) {
  long long v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
    throw std::invalid_argument(where + ": expected an integer, got '" + tok + "'");
  }
  return v;
}

inline std::uint64_t parse_uint64(const std::string& tok, const std::string& where) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) {
    throw std::invalid_argument(where + ": expected an unsigned integer, got '" + tok + "'");
  }
  return v;
}

inline std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    out += c;
    if (c == '"') out += '"';
  }
  out += '"';
  return out;
}

inline std::vector<std::string> csv_fields(const std::string& line, const std::string& where) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"' && cur.empty()) {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw std::invalid_argument(where + ": unterminated quoted field");
  out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// HFD-style whitespace tables

struct RawRow {
  int cohort = 0;
  std::string age_label;  // verbatim, including open-interval "-"/"+" suffixes
  double value = 0.0;
  int line = 0;
};

struct RawTable {
  std::vector<RawRow> rows;        // file order; missing markers already dropped
  std::vector<int> skipped_lines;  // metadata above the header, for the log
};

// Whitespace-delimited cohort table: metadata lines, then a header whose
// first two columns are Cohort (or Year) and Age, then one row per
// cohort-age with "." marking a missing value.
inline RawTable parse_table(std::istream& in) {
  RawTable out;
  std::string line;
  int lineno = 0;
  int n_columns = -1;
  std::map<std::pair<int, std::string>, int> seen;  // (cohort, label) -> line
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tok = detail::whitespace_tokens(line);
    if (tok.empty()) continue;
    if (n_columns < 0) {
      const std::string c0 = detail::lower(tok[0]);
      if (tok.size() >= 3 && (c0 == "cohort" || c0 == "year") && detail::lower(tok[1]) == "age") {
        n_columns = static_cast<int>(tok.size());
      } else {
        out.skipped_lines.push_back(lineno);
      }
      continue;
    }
    const std::string where = "line " + std::to_string(lineno);
    if (static_cast<int>(tok.size()) != n_columns) {
      throw std::invalid_argument(where + ": expected " + std::to_string(n_columns) +
                                  " columns, got " + std::to_string(tok.size()));
    }
    const int cohort = static_cast<int>(detail::parse_int(tok[0], where));
    const auto [it, inserted] = seen.emplace(std::make_pair(cohort, tok[1]), lineno);
    if (!inserted) {
      throw std::invalid_argument("lines " + std::to_string(it->second) + " and " +
                                  std::to_string(lineno) + ": duplicate entry for cohort " +
                                  tok[0] + " age " + tok[1]);
    }
    if (tok[2] == ".") continue;  // missing marker: absent cell
    const double v = detail::parse_double(tok[2], where);
    if (v < 0.0) {
      throw std::invalid_argument(where + ": negative value " + tok[2] + " for cohort " + tok[0] +
                                  " age " + tok[1]);
    }
    out.rows.push_back({cohort, tok[1], v, lineno});
  }
  if (n_columns < 0) {
    throw std::invalid_argument("no header row: expected a line starting with 'Cohort Age'");
  }
  return out;
}

// "12-" -> 12, "55+" -> 55, "30" -> 30.  The open-interval suffix only marks
// where the source file truncated the age range; the grid's edge cells absorb
// the same ages.
inline int parse_age_label(const std::string& label) {
  std::string core = label;
  if (!core.empty() && (core.back() == '+' || core.back() == '-')) core.pop_back();
  const int age = static_cast<int>(detail::parse_int(core, "age label '" + label + "'"));
  if (age < AgeGrid::kMinAge || age > AgeGrid::kMaxAge) {
    throw std::invalid_argument("age label '" + label + "' lies outside ages " +
                                std::to_string(AgeGrid::kMinAge) + ".." +
                                std::to_string(AgeGrid::kMaxAge));
  }
  return age;
}

namespace detail {

inline std::map<std::pair<int, int>, double> by_cohort_age(const RawTable& t,
                                                           const char* which) {
  std::map<std::pair<int, int>, double> out;
  std::map<std::pair<int, int>, int> lines;
  for (const auto& r : t.rows) {
    const int age = parse_age_label(r.age_label);
    const auto [it, inserted] = lines.emplace(std::make_pair(r.cohort, age), r.line);
    if (!inserted) {
      throw std::invalid_argument(std::string(which) + " lines " + std::to_string(it->second) +
                                  " and " + std::to_string(r.line) +
                                  ": age labels collapse to the same age " + std::to_string(age));
    }
    out[{r.cohort, age}] = r.value;
  }
  return out;
}

}  // namespace detail

// Sum single-age birth and exposure rows into grid cells.  A cell counts as
// observed only when every age inside it is present in the births table; a
// partially covered aggregate cell (at the edge of the observation window)
// stays unobserved.  Split birth counts are rounded back to whole births.
inline FertilityDataset build_dataset(const RawTable& births, const RawTable& exposure,
                                      const AgeGrid& grid) {
  grid.validate();
  const auto b = detail::by_cohort_age(births, "births");
  const auto e = detail::by_cohort_age(exposure, "exposure");
  if (b.empty()) throw std::invalid_argument("births table has no usable rows");
  const int lo = b.begin()->first.first;
  const int hi = b.rbegin()->first.first;

  FertilityDataset ds;
  ds.grid = grid;
  const int n = grid.n_cells();
  for (int c = lo; c <= hi; ++c) {
    CohortData cd;
    cd.cohort = c;
    cd.births.assign(n, 0.0);
    cd.exposure.assign(n, 0.0);
    cd.observed.assign(n, 0);
    for (int i = 0; i < n; ++i) {
      const AgeCell& cell = grid.cells[i];
      bool all_ages = true;
      double B = 0.0, R = 0.0;
      for (int a = cell.age_lo; a <= cell.age_hi && all_ages; ++a) {
        const auto bi = b.find({c, a});
        if (bi == b.end()) {
          all_ages = false;
          break;
        }
        const auto ei = e.find({c, a});
        if (ei == e.end()) {
          throw std::invalid_argument("cohort " + std::to_string(c) + " age " +
                                      std::to_string(a) + ": births recorded without exposure");
        }
        B += bi->second;
        R += ei->second;
      }
      if (!all_ages) continue;
      if (!(R > 0.0)) {
        if (B > 0.0) {
          throw std::invalid_argument("cohort " + std::to_string(c) + " cell " + cell.label +
                                      ": births recorded with zero exposure");
        }
        continue;  // no one at risk: cell unobserved
      }
      cd.births[i] = std::round(B);
      cd.exposure[i] = R;
      cd.observed[i] = 1;
    }
    ds.cohorts.push_back(std::move(cd));
  }
  while (!ds.cohorts.empty() && ds.cohorts.front().n_observed() == 0) {
    ds.cohorts.erase(ds.cohorts.begin());
  }
  while (!ds.cohorts.empty() && ds.cohorts.back().n_observed() == 0) ds.cohorts.pop_back();
  if (ds.cohorts.empty()) throw std::invalid_argument("no observed cells in the table pair");
  for (auto& cd : ds.cohorts) cd.complete = cd.observed[n - 1] != 0;
  ds.canonicalize();
  return ds;
}

// ---------------------------------------------------------------------------
// Canonical dataset CSV: header cohort,age_label,births,exposure, one row per
// observed cell, cohorts ascending then cells in grid order.  Writing then
// reading then writing again reproduces the bytes exactly.

inline void write_dataset_csv(std::ostream& os, const FertilityDataset& ds,
                              std::string_view run_id = {}) {
  if (!run_id.empty()) os << "# run " << run_id << "\n";
  os << "cohort,age_label,births,exposure\n";
  for (const auto& cd : ds.cohorts) {
    for (int i = 0; i < ds.grid.n_cells(); ++i) {
      if (!cd.observed[i]) continue;
      os << cd.cohort << ',' << detail::csv_escape(ds.grid.cells[i].label) << ','
         << detail::format_count(cd.births[i]) << ',' << detail::format_double(cd.exposure[i])
         << '\n';
    }
  }
}

inline std::string dataset_csv(const FertilityDataset& ds) {
  std::ostringstream ss;
  write_dataset_csv(ss, ds);
  return ss.str();
}

inline FertilityDataset read_dataset_csv(std::istream& in,
                                         const AgeGrid& grid = AgeGrid::standard()) {
  grid.validate();
  const int n = grid.n_cells();
  std::string line;
  int lineno = 0;
  bool header_seen = false;
  std::map<int, CohortData> by_cohort;
  std::map<std::pair<int, int>, int> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::string where = "line " + std::to_string(lineno);
    const auto f = detail::csv_fields(line, where);
    if (!header_seen) {
      if (f != std::vector<std::string>{"cohort", "age_label", "births", "exposure"}) {
        throw std::invalid_argument(where + ": expected header cohort,age_label,births,exposure");
      }
      header_seen = true;
      continue;
    }
    if (f.size() != 4) {
      throw std::invalid_argument(where + ": expected 4 fields, got " + std::to_string(f.size()));
    }
    const int cohort = static_cast<int>(detail::parse_int(f[0], where));
    const int cell = grid.find_cell(f[1]);
    if (cell < 0) throw std::invalid_argument(where + ": unknown age label '" + f[1] + "'");
    const double births = detail::parse_double(f[2], where);
    if (!(births >= 0.0) || std::floor(births) != births) {
      throw std::invalid_argument(where + ": births must be a non-negative count");
    }
    const double exposure = detail::parse_double(f[3], where);
    if (!(exposure > 0.0)) throw std::invalid_argument(where + ": exposure must be positive");
    const auto [it, inserted] = seen.emplace(std::make_pair(cohort, cell), lineno);
    if (!inserted) {
      throw std::invalid_argument("lines " + std::to_string(it->second) + " and " +
                                  std::to_string(lineno) + ": duplicate cell for cohort " + f[0] +
                                  " label " + f[1]);
    }
    auto bi = by_cohort.find(cohort);
    if (bi == by_cohort.end()) {
      CohortData cd;
      cd.cohort = cohort;
      cd.births.assign(n, 0.0);
      cd.exposure.assign(n, 0.0);
      cd.observed.assign(n, 0);
      bi = by_cohort.emplace(cohort, std::move(cd)).first;
    }
    bi->second.births[cell] = births;
    bi->second.exposure[cell] = exposure;
    bi->second.observed[cell] = 1;
  }
  if (!header_seen) throw std::invalid_argument("dataset file has no header row");
  if (by_cohort.empty()) throw std::invalid_argument("dataset file has no data rows");

  FertilityDataset ds;
  ds.grid = grid;
  const int lo = by_cohort.begin()->first;
  const int hi = by_cohort.rbegin()->first;
  for (int c = lo; c <= hi; ++c) {
    const auto it = by_cohort.find(c);
    if (it != by_cohort.end()) {
      ds.cohorts.push_back(std::move(it->second));
    } else {
      CohortData cd;  // interior cohort with no rows: keep the year, no data
      cd.cohort = c;
      cd.births.assign(n, 0.0);
      cd.exposure.assign(n, 0.0);
      cd.observed.assign(n, 0);
      ds.cohorts.push_back(std::move(cd));
    }
  }
  for (auto& cd : ds.cohorts) cd.complete = cd.observed[n - 1] != 0;
  ds.canonicalize();
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SimulatedCohort {
  BasicCohortParams<double> params;
  std::vector<double> exposure;  // per grid cell
};

// Draw one birth count per cell from the model's negative binomial at the
// given true parameters.  Deterministic per seed.
inline FertilityDataset simulate_dataset(int first_cohort,
                                         const std::vector<SimulatedCohort>& cohorts,
                                         const std::vector<double>& beta, const ModelConfig& cfg,
                                         std::uint64_t seed) {
  cfg.validate();
  if (cohorts.empty()) throw std::invalid_argument("simulate_dataset: no cohorts");
  if (static_cast<int>(beta.size()) != cfg.spline_size) {
    throw std::invalid_argument("dispersion coefficients do not match spline_size");
  }
  const BsplineBasis basis = age_spline_basis(cfg.spline_size);
  const auto phi_age = detail::phi_by_age(beta, basis);
  if (phi_age.empty()) {
    throw std::invalid_argument("dispersion coefficients overflow the log scale");
  }

  FertilityDataset ds;
  ds.grid = cfg.grid;
  const int n = ds.grid.n_cells();
  auto eng = make_engine(seed, 0);
  for (std::size_t c = 0; c < cohorts.size(); ++c) {
    const int year = first_cohort + static_cast<int>(c);
    const auto& sc = cohorts[c];
    if (static_cast<int>(sc.exposure.size()) != n) {
      throw std::invalid_argument("cohort " + std::to_string(year) +
                                  ": exposure does not cover the grid");
    }
    const auto row =
        detail::cohort_cell_rates(sc.params, phi_age, ds.grid, cfg.family1, cfg.family2);
    if (!row.ok) {
      throw std::invalid_argument("cohort " + std::to_string(year) +
                                  ": parameters outside the mixture support");
    }
    CohortData cd;
    cd.cohort = year;
    cd.complete = true;
    cd.exposure = sc.exposure;
    cd.births.resize(n);
    cd.observed.assign(n, 1);
    for (int i = 0; i < n; ++i) {
      if (!(sc.exposure[i] > 0.0)) {
        throw std::invalid_argument("cohort " + std::to_string(year) + " cell " +
                                    ds.grid.cells[i].label + ": exposure must be positive");
      }
      cd.births[i] =
          static_cast<double>(nb_birth_draw(sc.exposure[i] * row.f[i], row.phi_eff[i], eng));
    }
    ds.cohorts.push_back(std::move(cd));
  }
  ds.canonicalize();
  return ds;
}

// ---------------------------------------------------------------------------
// Run configuration: flat key=value text, '#' comments, emitted in a fixed
// order so the config hash is stable.

struct RunConfig {
  std::string family1 = "gamma";
  std::string family2 = "gamma";
  int spline_size = 8;
  bool non_centered = false;

  int chains = 4;
  int iterations = 10000;
  int warmup = -1;  // -1 picks half of iterations
  int thin = 4;
  double target_accept = 0.95;
  int max_depth = 12;
  std::uint64_t seed = 0;

  int horizon = 30;
  int jumpoff = 0;  // evaluation jump-off period; 0 means the last observed
  int holdout_years = 10;

  ModelConfig model_config(AgeGrid grid = AgeGrid::standard()) const {
    ModelConfig m;
    m.family1 = parse_family(family1);
    m.family2 = parse_family(family2);
    m.spline_size = spline_size;
    m.non_centered = non_centered;
    m.grid = std::move(grid);
    m.validate();
    return m;
  }

  SamplerConfig sampler_config() const {
    SamplerConfig s;
    s.chains = chains;
    s.iterations = iterations;
    s.warmup = warmup;
    s.thin = thin;
    s.target_accept = target_accept;
    s.max_depth = max_depth;
    s.seed = seed;
    s.validate();
    return s;
  }
};

inline void emit_config(std::ostream& os, const RunConfig& c) {
  os << "family1 = " << c.family1 << "\n"
     << "family2 = " << c.family2 << "\n"
     << "spline_size = " << c.spline_size << "\n"
     << "non_centered = " << (c.non_centered ? "true" : "false") << "\n"
     << "chains = " << c.chains << "\n"
     << "iterations = " << c.iterations << "\n"
     << "warmup = " << c.warmup << "\n"
     << "thin = " << c.thin << "\n"
     << "target_accept = " << detail::format_double(c.target_accept) << "\n"
     << "max_depth = " << c.max_depth << "\n"
     << "seed = " << c.seed << "\n"
     << "horizon = " << c.horizon << "\n"
     << "jumpoff = " << c.jumpoff << "\n"
     << "holdout_years = " << c.holdout_years << "\n";
}

inline std::string config_text(const RunConfig& c) {
  std::ostringstream ss;
  emit_config(ss, c);
  return ss.str();
}

inline RunConfig parse_config(std::istream& in) {
  RunConfig c;
  std::string line;
  int lineno = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    const std::string where = "line " + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(where + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw std::invalid_argument(where + ": expected key = value");
    }
    const auto [it, inserted] = seen.emplace(key, lineno);
    if (!inserted) {
      throw std::invalid_argument("lines " + std::to_string(it->second) + " and " +
                                  std::to_string(lineno) + ": duplicate config key '" + key + "'");
    }
    const auto as_int = [&] { return static_cast<int>(detail::parse_int(value, where)); };
    const auto as_bool = [&] {
      if (value == "true") return true;
      if (value == "false") return false;
      throw std::invalid_argument(where + ": expected true or false, got '" + value + "'");
    };
    if (key == "family1") {
      parse_family(value);  // reject unknown names early
      c.family1 = value;
    } else if (key == "family2") {
      parse_family(value);
      c.family2 = value;
    } else if (key == "spline_size") {
      c.spline_size = as_int();
    } else if (key == "non_centered") {
      c.non_centered = as_bool();
    } else if (key == "chains") {
      c.chains = as_int();
    } else if (key == "iterations") {
      c.iterations = as_int();
    } else if (key == "warmup") {
      c.warmup = as_int();
    } else if (key == "thin") {
      c.thin = as_int();
    } else if (key == "target_accept") {
      c.target_accept = detail::parse_double(value, where);
    } else if (key == "max_depth") {
      c.max_depth = as_int();
    } else if (key == "seed") {
      c.seed = detail::parse_uint64(value, where);
    } else if (key == "horizon") {
      c.horizon = as_int();
    } else if (key == "jumpoff") {
      c.jumpoff = as_int();
    } else if (key == "holdout_years") {
      c.holdout_years = as_int();
    } else {
      throw std::invalid_argument(where + ": unknown config key '" + key + "'");
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Hashes and the run manifest

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(config_text(c))); }

inline std::string dataset_fingerprint(const FertilityDataset& ds) {
  return hex64(fnv1a64(dataset_csv(ds)));
}

struct RunManifest {
  std::string config_hash;
  std::string dataset_fingerprint;
  std::uint64_t seed = 0;
  std::string version = kVersion;
  std::string created;  // ISO-8601 UTC

  std::string run_id() const { return config_hash + "-" + dataset_fingerprint; }
};

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline RunManifest make_manifest(const RunConfig& cfg, const FertilityDataset& ds) {
  RunManifest m;
  m.config_hash = config_hash(cfg);
  m.dataset_fingerprint = dataset_fingerprint(ds);
  m.seed = cfg.seed;
  m.created = utc_timestamp();
  return m;
}

inline void write_manifest_json(std::ostream& os, const RunManifest& m) {
  nlohmann::ordered_json j;
  j["config_hash"] = m.config_hash;
  j["dataset_fingerprint"] = m.dataset_fingerprint;
  j["run_id"] = m.run_id();
  j["seed"] = m.seed;
  j["version"] = m.version;
  j["created"] = m.created;
  os << j.dump(2) << "\n";
}

inline RunManifest read_manifest_json(std::istream& in) {
  const auto j = nlohmann::json::parse(in);
  RunManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.version = j.value("version", std::string(kVersion));
  m.created = j.value("created", std::string());
  return m;
}

// The leading "# run <id>" marker of a run artifact, or "" for other lines.
inline std::string run_header_id(const std::string& line) {
  constexpr std::string_view prefix = "# run ";
  if (line.rfind(prefix, 0) != 0) return {};
  return detail::trim(line.substr(prefix.size()));
}

inline void require_same_run(std::string_view artifact, std::string_view found,
                             std::string_view expected) {
  if (found != expected) {
    throw std::invalid_argument(std::string(artifact) + ": run id '" + std::string(found) +
                                "' does not match the manifest ('" + std::string(expected) + "')");
  }
}

// ---------------------------------------------------------------------------
// Draws and chain statistics

inline void write_draws_csv(std::ostream& os, const Draws& draws, std::string_view run_id = {}) {
  if (!run_id.empty()) os << "# run " << run_id << "\n";
  os << "chain,iter,param,value\n";
  const bool named = static_cast<int>(draws.param_names.size()) == draws.n_params;
  const int R = draws.n_retained();
  for (int c = 0; c < draws.n_chains(); ++c) {
    for (int s = 0; s < R; ++s) {
      for (int p = 0; p < draws.n_params; ++p) {
        os << c << ',' << s << ','
           << detail::csv_escape(named ? draws.param_names[p] : "p" + std::to_string(p)) << ','
           << detail::format_double(draws.value(c, s, p)) << '\n';
      }
    }
  }
}

inline Draws read_draws_csv(std::istream& in, std::string* run_id = nullptr) {
  Draws d;
  std::string line;
  int lineno = 0;
  bool header_seen = false;
  std::vector<std::vector<double>> chains;
  std::vector<std::string> names;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto id = run_header_id(line);
      if (!id.empty() && run_id) *run_id = id;
      continue;
    }
    const std::string where = "line " + std::to_string(lineno);
    const auto f = detail::csv_fields(line, where);
    if (!header_seen) {
      if (f != std::vector<std::string>{"chain", "iter", "param", "value"}) {
        throw std::invalid_argument(where + ": expected header chain,iter,param,value");
      }
      header_seen = true;
      continue;
    }
    if (f.size() != 4) {
      throw std::invalid_argument(where + ": expected 4 fields, got " + std::to_string(f.size()));
    }
    const int chain = static_cast<int>(detail::parse_int(f[0], where));
    const int iter = static_cast<int>(detail::parse_int(f[1], where));
    if (chain == static_cast<int>(chains.size())) {
      chains.emplace_back();
    } else if (chain != static_cast<int>(chains.size()) - 1) {
      throw std::invalid_argument(where + ": chains must appear in order");
    }
    if (chain == 0 && iter == 0) {
      names.push_back(f[2]);
    } else if (!names.empty()) {
      // after the first iteration the parameter cycle is fixed
      const std::string& want = names[chains[chain].size() % names.size()];
      if (f[2] != want) {
        throw std::invalid_argument(where + ": expected parameter " + want + ", got " + f[2]);
      }
    }
    chains[chain].push_back(detail::parse_double(f[3], where));
  }
  if (!header_seen) throw std::invalid_argument("draws file has no header row");
  if (chains.empty() || names.empty()) throw std::invalid_argument("draws file has no rows");
  d.n_params = static_cast<int>(names.size());
  d.param_names = std::move(names);
  for (std::size_t c = 0; c < chains.size(); ++c) {
    if (chains[c].size() != chains[0].size() || chains[c].size() % d.n_params != 0) {
      throw std::invalid_argument("chain " + std::to_string(c) +
                                  ": draw count does not fill whole iterations");
    }
  }
  d.chain_values = std::move(chains);
  d.warmup_divergences.assign(d.n_chains(), 0);
  d.post_divergences.assign(d.n_chains(), 0);
  return d;
}

struct ChainStatsRow {
  int chain = 0;
  int warmup_divergences = 0;
  int post_divergences = 0;
  double adapted_step = 0.0;
  double mean_accept = 0.0;
};

inline void write_stats_csv(std::ostream& os, const Draws& draws, std::string_view run_id = {}) {
  if (!run_id.empty()) os << "# run " << run_id << "\n";
  os << "chain,warmup_divergences,post_divergences,adapted_step,mean_accept\n";
  for (int c = 0; c < draws.n_chains(); ++c) {
    double accept = 0.0;
    if (c < static_cast<int>(draws.chain_stats.size()) && !draws.chain_stats[c].empty()) {
      for (const auto& st : draws.chain_stats[c]) accept += st.accept;
      accept /= static_cast<double>(draws.chain_stats[c].size());
    }
    const double step =
        c < static_cast<int>(draws.adapted_step.size()) ? draws.adapted_step[c] : 0.0;
    os << c << ',' << draws.warmup_divergences[c] << ',' << draws.post_divergences[c] << ','
       << detail::format_double(step) << ',' << detail::format_double(accept) << '\n';
  }
}

inline std::vector<ChainStatsRow> read_stats_csv(std::istream& in, std::string* run_id = nullptr) {
  std::vector<ChainStatsRow> out;
  std::string line;
  int lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto id = run_header_id(line);
      if (!id.empty() && run_id) *run_id = id;
      continue;
    }
    const std::string where = "line " + std::to_string(lineno);
    const auto f = detail::csv_fields(line, where);
    if (!header_seen) {
      const std::vector<std::string> want{"chain", "warmup_divergences", "post_divergences",
                                          "adapted_step", "mean_accept"};
      if (f != want) throw std::invalid_argument(where + ": unexpected stats header");
      header_seen = true;
      continue;
    }
    if (f.size() != 5) {
      throw std::invalid_argument(where + ": expected 5 fields, got " + std::to_string(f.size()));
    }
    ChainStatsRow r;
    r.chain = static_cast<int>(detail::parse_int(f[0], where));
    r.warmup_divergences = static_cast<int>(detail::parse_int(f[1], where));
    r.post_divergences = static_cast<int>(detail::parse_int(f[2], where));
    r.adapted_step = detail::parse_double(f[3], where);
    r.mean_accept = detail::parse_double(f[4], where);
    out.push_back(r);
  }
  if (!header_seen) throw std::invalid_argument("stats file has no header row");
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise log-likelihood of the observed cells

struct LogLikTable {
  PointwiseLogLik values;
  std::vector<CellRef> cells;  // (cohort, lowest age of the cell), row order
};

// Log-likelihood of every observed cell under every retained draw.  Rows are
// draws in chain-major order, matching how posterior_rates flattens chains.
inline LogLikTable pointwise_loglik(const Draws& draws, const FertilityDataset& ds,
                                    const ModelConfig& cfg) {
  const ForecastDraws fd = posterior_rates(draws, ds, cfg, 0, 0);
  LogLikTable out;
  for (int c = 0; c < ds.n_cohorts(); ++c) {
    for (int i = 0; i < ds.grid.n_cells(); ++i) {
      if (ds.cohorts[c].observed[i]) {
        out.cells.push_back({ds.cohorts[c].cohort, ds.grid.cells[i].age_lo});
      }
    }
  }
  out.values.resize(fd.n_draws, static_cast<int>(out.cells.size()));
  for (int d = 0; d < fd.n_draws; ++d) {
    int k = 0;
    for (int c = 0; c < ds.n_cohorts(); ++c) {
      const auto& cd = ds.cohorts[c];
      for (int i = 0; i < ds.grid.n_cells(); ++i) {
        if (!cd.observed[i]) continue;
        out.values.at(d, k++) =
            nb_log_pmf(cd.births[i], cd.exposure[i] * fd.rate(d, c, i), fd.dispersion(d, c, i));
      }
    }
  }
  return out;
}

// Rows [begin, end) of a log-likelihood table, e.g. one chain's block.
inline PointwiseLogLik draw_rows(const PointwiseLogLik& ll, int begin, int end) {
  if (begin < 0 || end > ll.n_draws || begin >= end) {
    throw std::invalid_argument("draw_rows: bad range");
  }
  PointwiseLogLik out;
  out.resize(end - begin, ll.n_points);
  const std::size_t stride = static_cast<std::size_t>(ll.n_points);
  std::copy(ll.values.begin() + begin * stride, ll.values.begin() + end * stride,
            out.values.begin());
  return out;
}

// ---------------------------------------------------------------------------
// Forecast summary output: tidy CSV plus a small metadata JSON

inline constexpr std::array<const char*, 7> kLevelSuffix = {"q2.5", "q5",  "q25", "q50",
                                                            "q75",  "q95", "q97.5"};

inline void write_forecast_csv(std::ostream& os, const ForecastSummary& s, const AgeGrid& grid,
                               std::string_view run_id = {}) {
  if (s.cells.empty() || static_cast<int>(s.cells[0].size()) != grid.n_cells()) {
    throw std::invalid_argument("forecast summary does not match the grid");
  }
  if (!run_id.empty()) os << "# run " << run_id << "\n";
  os << "cohort,cell,statistic,value\n";
  const auto row = [&os](int year, const std::string& cell, const std::string& stat, double v) {
    os << year << ',' << detail::csv_escape(cell) << ',' << stat << ','
       << detail::format_double(v) << '\n';
  };
  for (std::size_t c = 0; c < s.cells.size(); ++c) {
    const int year = s.first_cohort + static_cast<int>(c);
    for (int i = 0; i < grid.n_cells(); ++i) {
      const auto& cell = s.cells[c][i];
      const std::string& label = grid.cells[i].label;
      row(year, label, "f_mean", cell.f_mean);
      for (int l = 0; l < 7; ++l) {
        row(year, label, std::string("f_") + kLevelSuffix[l], cell.f[l]);
      }
      if (s.has_predictive) {
        for (int l = 0; l < 7; ++l) {
          row(year, label, std::string("pred_") + kLevelSuffix[l], cell.predictive[l]);
        }
      }
    }
    row(year, "", "cfs_mean", s.cohorts[c].cfs_mean);
    for (int l = 0; l < 7; ++l) {
      row(year, "", std::string("cfs_") + kLevelSuffix[l], s.cohorts[c].cfs[l]);
    }
  }
}

inline void write_forecast_meta_json(std::ostream& os, const RunConfig& cfg,
                                     const RunManifest& m, int horizon,
                                     const ForecastSummary& s) {
  nlohmann::ordered_json j;
  j["run_id"] = m.run_id();
  j["config_hash"] = m.config_hash;
  j["dataset_fingerprint"] = m.dataset_fingerprint;
  j["family1"] = cfg.family1;
  j["family2"] = cfg.family2;
  j["horizon"] = horizon;
  j["seed"] = cfg.seed;
  j["first_cohort"] = s.first_cohort;
  j["n_observed"] = s.n_observed;
  j["has_predictive"] = s.has_predictive;
  j["levels"] = std::vector<double>(s.levels.begin(), s.levels.end());
  j["version"] = kVersion;
  j["created"] = utc_timestamp();
  os << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Evaluation report: one row per model, one column per metric.  Coverage is
// left empty for point-only baselines.

struct EvaluationRow {
  std::string model;
  double rmse = std::numeric_limits<double>::quiet_NaN();
  double coverage50 = std::numeric_limits<double>::quiet_NaN();
  double coverage90 = std::numeric_limits<double>::quiet_NaN();
  int n_cells = 0;
};

inline void write_report_csv(std::ostream& os, const std::vector<EvaluationRow>& rows,
                             std::string_view run_id = {}) {
  if (!run_id.empty()) os << "# run " << run_id << "\n";
  os << "model,rmse,coverage_50,coverage_90,n_cells\n";
  const auto opt = [](double v) { return std::isnan(v) ? std::string() : detail::format_double(v); };
  for (const auto& r : rows) {
    os << detail::csv_escape(r.model) << ',' << opt(r.rmse) << ',' << opt(r.coverage50) << ','
       << opt(r.coverage90) << ',' << r.n_cells << '\n';
  }
}

// ---------------------------------------------------------------------------
// Diagnostics report

struct DiagnosticsReport {
  std::vector<std::string> params;
  std::vector<double> rhat;
  std::vector<char> rhat_degenerate;
  double max_rhat = 1.0;

  std::vector<int> warmup_divergences;
  std::vector<int> post_divergences;

  bool loo_available = false;
  double elpd = std::numeric_limits<double>::quiet_NaN();
  double looic = std::numeric_limits<double>::quiet_NaN();
  double max_pareto_k = -std::numeric_limits<double>::infinity();
  std::vector<CellRef> flagged;
  std::vector<std::vector<CellRef>> refit_batches;
  std::vector<double> chain_looic;  // empty when chains are too short for it

  ModePartition modes;
  double max_rhat_selected = std::numeric_limits<double>::quiet_NaN();
};

// Convergence and fit diagnostics for a completed run: split R-hat for every
// parameter, divergence counts, leave-one-out fit with tail-index flags, the
// refit batching for flagged cells, and mode-based chain selection.
inline DiagnosticsReport diagnose_run(const Draws& draws, const std::vector<ChainStatsRow>& stats,
                                      const FertilityDataset& ds, const ModelConfig& cfg) {
  DiagnosticsReport rep;
  const int P = draws.n_params;
  const bool named = static_cast<int>(draws.param_names.size()) == P;
  rep.params.reserve(P);
  rep.rhat.reserve(P);
  std::vector<int> all_chains(draws.n_chains());
  for (int c = 0; c < draws.n_chains(); ++c) all_chains[c] = c;
  for (int p = 0; p < P; ++p) {
    rep.params.push_back(named ? draws.param_names[p] : "p" + std::to_string(p));
    const RhatResult r = draws.n_chains() >= 2 ? split_rhat(draws, p)
                                               : split_rhat_within(draws, all_chains, p);
    rep.rhat.push_back(r.value);
    rep.rhat_degenerate.push_back(r.degenerate ? 1 : 0);
    rep.max_rhat = std::max(rep.max_rhat, r.value);
  }

  rep.warmup_divergences.assign(draws.n_chains(), 0);
  rep.post_divergences.assign(draws.n_chains(), 0);
  for (const auto& row : stats) {
    if (row.chain >= 0 && row.chain < draws.n_chains()) {
      rep.warmup_divergences[row.chain] = row.warmup_divergences;
      rep.post_divergences[row.chain] = row.post_divergences;
    }
  }

  if (draws.total_retained() >= 100) {
    const LogLikTable tab = pointwise_loglik(draws, ds, cfg);
    const LooResult loo = psis_loo(tab.values);
    rep.loo_available = true;
    rep.elpd = loo.elpd;
    rep.looic = loo.looic;
    for (double k : loo.pareto_k) rep.max_pareto_k = std::max(rep.max_pareto_k, k);
    for (int i : loo.flagged) rep.flagged.push_back(tab.cells[i]);
    rep.refit_batches = refit_plan(rep.flagged);
    const int R = draws.n_retained();
    if (R >= 100) {
      rep.chain_looic.resize(draws.n_chains());
      for (int c = 0; c < draws.n_chains(); ++c) {
        rep.chain_looic[c] = psis_loo(draw_rows(tab.values, c * R, (c + 1) * R)).looic;
      }
    }
  }

  rep.modes = mode_partition(draws, rep.chain_looic);
  double worst = 1.0;
  for (int p = 0; p < P; ++p) {
    worst = std::max(worst, split_rhat_within(draws, rep.modes.selected_chains, p).value);
  }
  rep.max_rhat_selected = worst;
  return rep;
}

inline void write_diagnostics_json(std::ostream& os, const DiagnosticsReport& rep,
                                   std::string_view run_id = {}) {
  nlohmann::ordered_json j;
  if (!run_id.empty()) j["run_id"] = std::string(run_id);
  j["max_rhat"] = rep.max_rhat;
  auto rhat = nlohmann::ordered_json::object();
  auto degenerate = nlohmann::ordered_json::array();
  for (std::size_t p = 0; p < rep.params.size(); ++p) {
    rhat[rep.params[p]] = rep.rhat[p];
    if (rep.rhat_degenerate[p]) degenerate.push_back(rep.params[p]);
  }
  j["rhat"] = std::move(rhat);
  j["degenerate_params"] = std::move(degenerate);
  j["divergences"]["warmup"] = rep.warmup_divergences;
  j["divergences"]["post"] = rep.post_divergences;
  if (rep.loo_available) {
    auto cells = nlohmann::ordered_json::array();
    for (const auto& c : rep.flagged) cells.push_back({{"cohort", c.cohort}, {"age", c.age}});
    auto batches = nlohmann::ordered_json::array();
    for (const auto& batch : rep.refit_batches) {
      auto b = nlohmann::ordered_json::array();
      for (const auto& c : batch) b.push_back({{"cohort", c.cohort}, {"age", c.age}});
      batches.push_back(std::move(b));
    }
    j["loo"] = {{"elpd", rep.elpd},
                {"looic", rep.looic},
                {"max_pareto_k", rep.max_pareto_k},
                {"flagged", std::move(cells)},
                {"refit", std::move(batches)}};
    if (!rep.chain_looic.empty()) j["loo"]["chain_looic"] = rep.chain_looic;
  } else {
    j["loo"] = nullptr;
  }
  j["modes"] = {{"n_groups", rep.modes.n_groups},
                {"group_of_chain", rep.modes.group_of_chain},
                {"selected", rep.modes.selected},
                {"selected_chains", rep.modes.selected_chains},
                {"max_rhat_selected", rep.max_rhat_selected}};
  os << j.dump(2) << "\n";
}

}  // namespace fertcast
