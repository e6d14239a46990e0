#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nvspin/types.hpp"

namespace nvspin {

// Universal I/O record: an ascending grid, one signal column, optional extra
// named columns and free-form provenance metadata.
struct Spectrum {
  std::vector<double> x;
  std::vector<double> y;
  std::optional<std::vector<double>> y_err;
  std::string x_unit = "x";
  std::string y_unit = "y";
  std::vector<std::pair<std::string, std::vector<double>>> extra;
  std::map<std::string, std::string> meta;

  std::size_t size() const { return x.size(); }

  void validate() const {
    require(x.size() == y.size(), "spectrum: x and y lengths differ");
    if (y_err)
      require(y_err->size() == x.size(), "spectrum: y_err length differs");
    for (const auto &[name, col] : extra)
      require(col.size() == x.size(), "spectrum: column '" + name + "' length differs");
    for (std::size_t i = 1; i < x.size(); ++i)
      require(x[i] > x[i - 1], "spectrum: x must be strictly ascending");
  }

  const std::vector<double> *column(const std::string &name) const {
    for (const auto &[n, col] : extra)
      if (n == name)
        return &col;
    return nullptr;
  }
};

struct TimeTrace {
  std::vector<double> times; ///< us
  std::vector<double> values;

  void validate() const {
    require(times.size() == values.size(), "time trace: lengths differ");
    for (std::size_t i = 1; i < times.size(); ++i)
      require(times[i] > times[i - 1], "time trace: times must be strictly ascending");
  }

  Spectrum to_spectrum(std::string y_unit = "population") const {
    Spectrum s;
    s.x = times;
    s.y = values;
    s.x_unit = "time_us";
    s.y_unit = std::move(y_unit);
    return s;
  }

  static TimeTrace from_spectrum(const Spectrum &s) { return {s.x, s.y}; }
};

inline std::vector<double> linspace(double start, double stop, std::size_t n) {
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = start;
    return out;
  }
  for (std::size_t i = 0; i < n; ++i)
    out[i] = start + (stop - start) * static_cast<double>(i) / static_cast<double>(n - 1);
  return out;
}

inline void require_ascending(const std::vector<double> &grid, const char *what) {
  for (std::size_t i = 1; i < grid.size(); ++i)
    require(grid[i] > grid[i - 1], std::string(what) + ": grid must be strictly ascending");
}

} // namespace nvspin
