#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "charform/charsolve.hpp"
#include "charform/config.hpp"
#include "charform/diagnose.hpp"
#include "charform/expr.hpp"
#include "charform/grid.hpp"

namespace charform {

// ---------------------------------------------------------------------------
// RunConfig -> solver objects.
// ---------------------------------------------------------------------------

inline CharacteristicSystem build_system(const RunConfig& cfg) {
  try {
    if (cfg.hamiltonian)
      return canonical_system(Expression::parse(*cfg.hamiltonian),
                              cfg.dimension);
    if (cfg.equation)
      return derive_characteristic_system(Expression::parse(*cfg.equation),
                                          cfg.dimension);
  } catch (const ParseError& e) {
    throw ConfigError(std::string("equation parse error: ") + e.what());
  }
  throw ConfigError("no equation or hamiltonian configured");
}

inline InitialData build_initial_data(const RunConfig& cfg) {
  InitialData init;
  const int n = cfg.dimension;
  try {
    init.surface.resize(static_cast<std::size_t>(n));
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    for (const auto& [name, text] : cfg.surface) {
      if (name.size() < 2 || name[0] != 'x')
        throw ConfigError("surface key '" + name + "' must be x1..xn");
      int i = std::atoi(name.c_str() + 1);
      if (i < 1 || i > n)
        throw ConfigError("surface key '" + name + "' out of range");
      init.surface[static_cast<std::size_t>(i - 1)] = Expression::parse(text);
      seen[static_cast<std::size_t>(i - 1)] = true;
    }
    for (int i = 0; i < n; ++i)
      if (!seen[static_cast<std::size_t>(i)])
        throw ConfigError("surface is missing x" + std::to_string(i + 1));
    init.u0 = Expression::parse(cfg.u0);
    if (!cfg.momenta.empty()) {
      init.momenta.resize(static_cast<std::size_t>(n));
      std::vector<bool> pm(static_cast<std::size_t>(n), false);
      for (const auto& [name, text] : cfg.momenta) {
        if (name.size() < 2 || name[0] != 'p')
          throw ConfigError("momenta key '" + name + "' must be p1..pn");
        int i = std::atoi(name.c_str() + 1);
        if (i < 1 || i > n)
          throw ConfigError("momenta key '" + name + "' out of range");
        init.momenta[static_cast<std::size_t>(i - 1)] =
            Expression::parse(text);
        pm[static_cast<std::size_t>(i - 1)] = true;
      }
      for (int i = 0; i < n; ++i)
        if (!pm[static_cast<std::size_t>(i)])
          throw ConfigError("momenta block must give all p1..pn");
    }
  } catch (const ParseError& e) {
    throw ConfigError(std::string("expression parse error: ") + e.what());
  }
  if (static_cast<int>(cfg.ranges.size()) != n - 1)
    throw ConfigError("initial range block must declare r1..r" +
                      std::to_string(n - 1));
  if (cfg.rays < 2) throw ConfigError("solver rays must be >= 2");
  for (const auto& [name, lo, hi] : cfg.ranges) {
    (void)name;
    init.r_min.push_back(lo);
    init.r_max.push_back(hi);
    init.r_count.push_back(cfg.rays);
  }
  init.bracket_lo = cfg.bracket_lo;
  init.bracket_hi = cfg.bracket_hi;
  init.branch = cfg.branch;
  return init;
}

inline RegularGrid build_diagnose_grid(const RunConfig& cfg) {
  if (cfg.grid.empty()) throw ConfigError("diagnose grid block is required");
  RegularGrid g;
  for (const auto& gs : cfg.grid)
    g.axes.push_back({gs.lo, (gs.hi - gs.lo) / (gs.count - 1), gs.count});
  return g;
}

struct SolveResult {
  CharacteristicSystem system;
  InitialData initial;
  std::vector<RayFan> fans;                         // one per branch
  std::vector<std::vector<CausticRecord>> caustics;  // aligned with fans
};

inline SolveResult run_solve(const RunConfig& cfg, int threads = 1) {
  SolveResult out{build_system(cfg), build_initial_data(cfg), {}, {}};
  auto branches = initialize_strips(out.system, out.initial);
  for (const auto& strips : branches) {
    RayFan fan = integrate(out.system, strips, out.initial, cfg.h, cfg.s_max,
                           threads);
    if (fan.rays.size() >= 3)
      out.caustics.push_back(detect_caustics(fan));
    else
      out.caustics.push_back({});
    out.fans.push_back(std::move(fan));
  }
  return out;
}

// Direct-field input: builds a fully valid ReconstructedField from analytic
// expressions in x1..xn or from grid files.
inline ReconstructedField build_direct_field(const RunConfig& cfg) {
  const FieldSpec& fs = *cfg.field;
  std::optional<RegularGrid> grid;
  if (!cfg.grid.empty()) grid = build_diagnose_grid(cfg);

  std::vector<std::pair<int, GridData>> loaded;
  int n = 0;
  for (const auto& [name, path] : fs.files) {
    int i = std::atoi(name.c_str() + 1);
    GridData gd = read_grid_csv(path);
    if (!grid)
      grid = gd.grid;
    else if (!(*grid == gd.grid))
      throw ConfigError("field file '" + path + "' grid mismatch");
    n = std::max(n, i);
    loaded.emplace_back(i, std::move(gd));
  }
  for (const auto& [name, text] : fs.expressions) {
    (void)text;
    n = std::max(n, std::atoi(name.c_str() + 1));
  }
  if (!grid) throw ConfigError("direct field input needs a diagnose grid");
  n = std::max(n, grid->dimension());

  ReconstructedField field;
  field.grid = *grid;
  const std::size_t total = grid->size();
  field.u.assign(total, 0.0);
  field.p.assign(static_cast<std::size_t>(n), std::vector<double>(total, 0.0));
  field.mask.assign(total, CellState::Valid);
  field.tangent.assign(total, std::vector<double>(static_cast<std::size_t>(n), 0.0));

  for (auto& [i, gd] : loaded) {
    if (i < 1 || i > n) throw ConfigError("field key out of range");
    field.p[static_cast<std::size_t>(i - 1)] = std::move(gd.values);
  }
  std::vector<std::string> coords = detail::coordinate_names(n);
  for (const auto& [name, text] : fs.expressions) {
    int i = std::atoi(name.c_str() + 1);
    if (name.empty() || name[0] != 'p' || i < 1 || i > n)
      throw ConfigError("field key '" + name + "' must be p1..pn");
    Expression e = Expression::parse(text);
    Program prog = e.compile(coords);
    std::vector<double>& dst = field.p[static_cast<std::size_t>(i - 1)];
    for (std::size_t lin = 0; lin < total; ++lin) {
      std::vector<int> idx = grid->unravel(lin);
      std::vector<double> x = grid->point(idx);
      dst[lin] = prog.eval<double>(x);
    }
  }
  return field;
}

// ---------------------------------------------------------------------------
// Subcommands. Exit codes: 0 success, 2 config error, 3 solver error.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw SolverError("cannot open '" + path + "' for writing");
  f << text;
}

}  // namespace detail

inline int dispatch_errors(const std::function<void()>& body,
                           std::ostream& diag) {
  try {
    body();
    return 0;
  } catch (const ConfigError& e) {
    diag << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    diag << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    diag << "solver error: " << e.what() << "\n";
    return 3;
  }
}

inline int cmd_solve(const RunConfig& cfg, const std::string& out_dir,
                     int threads, std::ostream& diag) {
  return dispatch_errors(
      [&] {
        SolveResult res = run_solve(cfg, threads);
        std::filesystem::create_directories(out_dir);
        for (std::size_t b = 0; b < res.fans.size(); ++b) {
          std::string name =
              b == 0 ? "fan.csv" : "fan_" + std::to_string(b) + ".csv";
          write_fan_csv(out_dir + "/" + name, res.fans[b]);
        }
        nlohmann::json summary = fan_summary_json(res.fans, res.caustics);
        detail::write_text(out_dir + "/summary.json", summary.dump(2) + "\n");
      },
      diag);
}

inline int cmd_closure(const RunConfig& cfg, const std::string& out_dir,
                       int threads, std::ostream& diag) {
  return dispatch_errors(
      [&] {
        ClosureReport rep;
        if (cfg.field) {
          ReconstructedField field = build_direct_field(cfg);
          rep = closure_report(field, cfg.threshold);
        } else {
          SolveResult res = run_solve(cfg, threads);
          RegularGrid grid = build_diagnose_grid(cfg);
          ReconstructedField field = reconstruct_field(res.fans[0], grid);
          rep = closure_report(field, cfg.threshold, res.caustics[0]);
        }
        std::filesystem::create_directories(out_dir);
        detail::write_text(out_dir + "/closure.json",
                           rep.to_json().dump(2) + "\n");
      },
      diag);
}

inline int cmd_caustics(const RunConfig& cfg, const std::string& out_dir,
                        int threads, std::ostream& diag) {
  return dispatch_errors(
      [&] {
        if (cfg.rays < 3)
          throw ConfigError("caustic detection needs rays >= 3");
        SolveResult res = run_solve(cfg, threads);
        std::filesystem::create_directories(out_dir);
        nlohmann::json j;
        j["caustics"] = nlohmann::json::array();
        for (std::size_t b = 0; b < res.fans.size(); ++b)
          for (const auto& r : res.caustics[b])
            j["caustics"].push_back({{"branch", b},
                                     {"ray", r.ray},
                                     {"s_lo", r.s_lo},
                                     {"s_hi", r.s_hi},
                                     {"s_star", r.s_star}});
        detail::write_text(out_dir + "/caustics.json", j.dump(2) + "\n");

        std::ofstream f(out_dir + "/jacobian.csv");
        f << "branch,ray,s,jacobian\n";
        for (std::size_t b = 0; b < res.fans.size(); ++b)
          for (std::size_t k = 0; k < res.fans[b].rays.size(); ++k)
            for (const auto& cp : res.fans[b].rays[k].pts)
              f << b << ',' << k << ',' << detail::format_double(cp.s) << ','
                << detail::format_double(cp.jacobian) << '\n';
      },
      diag);
}

}  // namespace charform
