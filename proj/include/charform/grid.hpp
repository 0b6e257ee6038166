#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace charform {

class GridError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Axis {
  double origin = 0.0;
  double spacing = 1.0;
  int count = 0;
  bool operator==(const Axis&) const = default;
};

// Regular tensor grid, row-major storage with the last axis fastest.
struct RegularGrid {
  std::vector<Axis> axes;

  int dimension() const { return static_cast<int>(axes.size()); }

  std::size_t size() const {
    std::size_t n = 1;
    for (const auto& a : axes) n *= static_cast<std::size_t>(a.count);
    return n;
  }

  std::size_t linear(std::span<const int> idx) const {
    std::size_t lin = 0;
    for (std::size_t a = 0; a < axes.size(); ++a)
      lin = lin * static_cast<std::size_t>(axes[a].count) +
            static_cast<std::size_t>(idx[a]);
    return lin;
  }

  std::vector<int> unravel(std::size_t lin) const {
    std::vector<int> idx(axes.size());
    for (std::size_t a = axes.size(); a-- > 0;) {
      idx[a] = static_cast<int>(lin % static_cast<std::size_t>(axes[a].count));
      lin /= static_cast<std::size_t>(axes[a].count);
    }
    return idx;
  }

  double coord(int axis, int i) const {
    return axes[static_cast<std::size_t>(axis)].origin +
           axes[static_cast<std::size_t>(axis)].spacing * i;
  }

  std::vector<double> point(std::span<const int> idx) const {
    std::vector<double> x(axes.size());
    for (std::size_t a = 0; a < axes.size(); ++a)
      x[a] = coord(static_cast<int>(a), idx[a]);
    return x;
  }

  bool contains(std::span<const double> x, double tol = 1e-12) const {
    for (std::size_t a = 0; a < axes.size(); ++a) {
      double lo = axes[a].origin;
      double hi = axes[a].origin + axes[a].spacing * (axes[a].count - 1);
      double pad = tol * (std::abs(hi - lo) + 1.0);
      if (x[a] < lo - pad || x[a] > hi + pad) return false;
    }
    return true;
  }

  bool interior(std::span<const int> idx) const {
    for (std::size_t a = 0; a < axes.size(); ++a)
      if (idx[a] <= 0 || idx[a] >= axes[a].count - 1) return false;
    return true;
  }

  bool operator==(const RegularGrid&) const = default;
};

inline RegularGrid make_grid(
    std::span<const std::tuple<double, double, int>> axes_spec) {
  RegularGrid g;
  for (const auto& [lo, hi, count] : axes_spec) {
    if (count < 2) throw GridError("grid axis needs at least 2 points");
    g.axes.push_back({lo, (hi - lo) / (count - 1), count});
  }
  return g;
}

struct GridData {
  RegularGrid grid;
  std::vector<double> values;
};

// Multilinear interpolation; throws outside the grid domain.
inline double interpolate(const GridData& gd, std::span<const double> x) {
  const auto& g = gd.grid;
  const int n = g.dimension();
  if (!g.contains(x))
    throw GridError("point outside sampled-grid domain");
  std::vector<int> base(static_cast<std::size_t>(n));
  std::vector<double> frac(static_cast<std::size_t>(n));
  for (int a = 0; a < n; ++a) {
    const Axis& ax = g.axes[static_cast<std::size_t>(a)];
    double t = (x[static_cast<std::size_t>(a)] - ax.origin) / ax.spacing;
    int i = static_cast<int>(std::floor(t));
    if (i < 0) i = 0;
    if (i > ax.count - 2) i = ax.count - 2;
    base[static_cast<std::size_t>(a)] = i;
    frac[static_cast<std::size_t>(a)] = t - i;
  }
  double acc = 0.0;
  const int corners = 1 << n;
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int c = 0; c < corners; ++c) {
    double w = 1.0;
    for (int a = 0; a < n; ++a) {
      int bit = (c >> a) & 1;
      idx[static_cast<std::size_t>(a)] = base[static_cast<std::size_t>(a)] + bit;
      w *= bit ? frac[static_cast<std::size_t>(a)]
               : 1.0 - frac[static_cast<std::size_t>(a)];
    }
    if (w != 0.0) acc += w * gd.values[g.linear(idx)];
  }
  return acc;
}

// Second-order stencil derivative along one axis: central in the interior,
// one-sided at the edges.
inline GridData stencil_derivative(const GridData& gd, int axis) {
  const auto& g = gd.grid;
  const Axis& ax = g.axes[static_cast<std::size_t>(axis)];
  if (ax.count < 3)
    throw GridError("sampled axis needs at least 3 points for differences");
  GridData out{g, std::vector<double>(gd.values.size())};
  const double h = ax.spacing;
  const std::size_t total = g.size();
  for (std::size_t lin = 0; lin < total; ++lin) {
    std::vector<int> idx = g.unravel(lin);
    int i = idx[static_cast<std::size_t>(axis)];
    auto at = [&](int j) {
      std::vector<int> k = idx;
      k[static_cast<std::size_t>(axis)] = j;
      return gd.values[g.linear(k)];
    };
    double d;
    if (i == 0)
      d = (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h);
    else if (i == ax.count - 1)
      d = (3.0 * at(i) - 4.0 * at(i - 1) + at(i - 2)) / (2.0 * h);
    else
      d = (at(i + 1) - at(i - 1)) / (2.0 * h);
    out.values[lin] = d;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid file format: one JSON header line (axes + index order), then CSV rows
// of values, last axis fastest, 17 significant digits.
// ---------------------------------------------------------------------------

inline void write_grid_csv(const std::string& path, const GridData& gd) {
  std::ofstream f(path);
  if (!f) throw GridError("cannot open '" + path + "' for writing");
  nlohmann::json header;
  header["axes"] = nlohmann::json::array();
  for (const auto& a : gd.grid.axes)
    header["axes"].push_back(
        {{"origin", a.origin}, {"spacing", a.spacing}, {"count", a.count}});
  header["order"] = "row-major";
  f << header.dump() << "\n";
  const int last =
      gd.grid.axes.empty() ? 1 : gd.grid.axes.back().count;
  char buf[64];
  for (std::size_t i = 0; i < gd.values.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", gd.values[i]);
    f << buf;
    f << (((i + 1) % static_cast<std::size_t>(last) == 0) ? '\n' : ',');
  }
}

inline GridData read_grid_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw GridError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw GridError("missing grid header");
  nlohmann::json header = nlohmann::json::parse(line);
  GridData gd;
  for (const auto& a : header.at("axes"))
    gd.grid.axes.push_back({a.at("origin").get<double>(),
                            a.at("spacing").get<double>(),
                            a.at("count").get<int>()});
  gd.values.reserve(gd.grid.size());
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ','))
      if (!cell.empty()) gd.values.push_back(std::strtod(cell.c_str(), nullptr));
  }
  if (gd.values.size() != gd.grid.size())
    throw GridError("grid data size does not match header");
  return gd;
}

}  // namespace charform
