#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

// Age grid and observed-data containers. The grid partitions integer ages
// [12, 55] into cells; the default layout aggregates the sparse tails into
// "12-14" and "49+" and keeps single-year cells between.

namespace fertcast {

struct AgeCell {
  std::string label;
  int age_lo;  // inclusive
  int age_hi;  // inclusive
  int n_ages() const { return age_hi - age_lo + 1; }
  double midpoint() const { return 0.5 * (age_lo + age_hi + 1); }
};

struct AgeGrid {
  std::vector<AgeCell> cells;

  static constexpr int kMinAge = 12;
  static constexpr int kMaxAge = 55;

  static AgeGrid standard() {
    AgeGrid g;
    g.cells.push_back({"12-14", 12, 14});
    for (int a = 15; a <= 48; ++a) g.cells.push_back({std::to_string(a), a, a});
    g.cells.push_back({"49+", 49, 55});
    return g;
  }

  int n_cells() const { return static_cast<int>(cells.size()); }
  int n_ages() const { return kMaxAge - kMinAge + 1; }

  // Index of the cell covering a single age, or -1.
  int cell_of_age(int age) const {
    for (int i = 0; i < n_cells(); ++i) {
      if (age >= cells[i].age_lo && age <= cells[i].age_hi) return i;
    }
    return -1;
  }

  int find_cell(const std::string& label) const {
    for (int i = 0; i < n_cells(); ++i) {
      if (cells[i].label == label) return i;
    }
    return -1;
  }

  void validate() const {
    if (cells.empty()) throw std::invalid_argument("age grid is empty");
    int expect = kMinAge;
    for (const auto& c : cells) {
      if (c.age_lo != expect || c.age_hi < c.age_lo) {
        throw std::invalid_argument("age grid cells must partition [12, 55] in order");
      }
      expect = c.age_hi + 1;
    }
    if (expect != kMaxAge + 1) {
      throw std::invalid_argument("age grid does not cover ages up to 55");
    }
  }
};

// One cohort's observations on the grid. Parallel arrays over grid cells;
// observed[i] marks cells with data (recent cohorts are ragged at the top of
// the age range).
struct CohortData {
  int cohort = 0;
  std::vector<double> births;
  std::vector<double> exposure;
  std::vector<char> observed;
  bool complete = false;

  int n_observed() const {
    int n = 0;
    for (char o : observed) n += (o != 0);
    return n;
  }
};

struct FertilityDataset {
  AgeGrid grid;
  std::vector<CohortData> cohorts;  // ascending, consecutive cohort years

  int n_cohorts() const { return static_cast<int>(cohorts.size()); }
  int first_cohort() const { return cohorts.empty() ? 0 : cohorts.front().cohort; }

  // Latest period index t = cohort + lowest age of an observed cell.
  int max_period() const {
    int t = 0;
    for (const auto& cd : cohorts) {
      for (int i = 0; i < grid.n_cells(); ++i) {
        if (cd.observed[i]) t = std::max(t, cd.cohort + grid.cells[i].age_lo);
      }
    }
    return t;
  }

  // Sort cohorts and check invariants; call after any manual assembly.
  void canonicalize() {
    std::sort(cohorts.begin(), cohorts.end(),
              [](const CohortData& a, const CohortData& b) { return a.cohort < b.cohort; });
    grid.validate();
    const int n = grid.n_cells();
    for (std::size_t k = 0; k < cohorts.size(); ++k) {
      const auto& cd = cohorts[k];
      if (static_cast<int>(cd.births.size()) != n || static_cast<int>(cd.exposure.size()) != n ||
          static_cast<int>(cd.observed.size()) != n) {
        throw std::invalid_argument("cohort " + std::to_string(cd.cohort) +
                                    ": arrays do not match the grid");
      }
      if (k > 0 && cd.cohort != cohorts[k - 1].cohort + 1) {
        throw std::invalid_argument("cohort years must be consecutive; gap before " +
                                    std::to_string(cd.cohort));
      }
      for (int i = 0; i < n; ++i) {
        if (!cd.observed[i]) continue;
        const double b = cd.births[i];
        if (!(b >= 0.0) || std::floor(b) != b) {
          throw std::invalid_argument("cohort " + std::to_string(cd.cohort) + " cell " +
                                      grid.cells[i].label + ": births must be a count");
        }
        if (!(cd.exposure[i] > 0.0)) {
          throw std::invalid_argument("cohort " + std::to_string(cd.cohort) + " cell " +
                                      grid.cells[i].label + ": exposure must be positive");
        }
      }
    }
  }
};

}  // namespace fertcast
