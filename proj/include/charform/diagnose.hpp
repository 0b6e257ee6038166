#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "charform/charsolve.hpp"
#include "charform/forms.hpp"
#include "charform/grid.hpp"

namespace charform {

enum class CellState : std::uint8_t { Valid = 0, Multivalued = 1, Uncovered = 2 };

struct ReconstructedField {
  RegularGrid grid;
  std::vector<double> u;
  std::vector<std::vector<double>> p;       // p[i] over grid, row-major
  std::vector<CellState> mask;
  std::vector<std::vector<double>> tangent;  // local ray direction per cell

  std::size_t count(CellState s) const {
    std::size_t c = 0;
    for (CellState m : mask)
      if (m == s) ++c;
    return c;
  }
};

namespace detail {

// Inverse bilinear map of a quad: solves X(a,b) = target with Newton.
inline bool invert_bilinear(const double (&A)[2], const double (&B)[2],
                            const double (&C)[2], const double (&D)[2],
                            const double (&P)[2], double scale, double& a,
                            double& b) {
  a = 0.5;
  b = 0.5;
  for (int it = 0; it < 40; ++it) {
    double xa[2], res[2];
    for (int d = 0; d < 2; ++d) {
      xa[d] = (1 - b) * ((1 - a) * A[d] + a * B[d]) +
              b * ((1 - a) * D[d] + a * C[d]);
      res[d] = xa[d] - P[d];
    }
    if (std::abs(res[0]) + std::abs(res[1]) < 1e-12 * scale) break;
    double Ja[2], Jb[2];
    for (int d = 0; d < 2; ++d) {
      Ja[d] = (1 - b) * (B[d] - A[d]) + b * (C[d] - D[d]);
      Jb[d] = (1 - a) * (D[d] - A[d]) + a * (C[d] - B[d]);
    }
    double det = Ja[0] * Jb[1] - Ja[1] * Jb[0];
    if (det == 0.0 || !std::isfinite(det)) return false;
    double da = (res[0] * Jb[1] - res[1] * Jb[0]) / det;
    double db = (Ja[0] * res[1] - Ja[1] * res[0]) / det;
    a -= da;
    b -= db;
    if (!std::isfinite(a) || !std::isfinite(b)) return false;
    if (a < -2.0 || a > 3.0 || b < -2.0 || b > 3.0) return false;
  }
  double xa[2];
  for (int d = 0; d < 2; ++d)
    xa[d] = (1 - b) * ((1 - a) * A[d] + a * B[d]) +
            b * ((1 - a) * D[d] + a * C[d]);
  if (std::abs(xa[0] - P[0]) + std::abs(xa[1] - P[1]) > 1e-9 * scale)
    return false;
  const double eps = 1e-9;
  return a >= -eps && a <= 1.0 + eps && b >= -eps && b <= 1.0 + eps;
}

}  // namespace detail

// Samples (u, p) from a ray fan onto a regular grid by inverting the
// quadrilateral mesh spanned by adjacent rays and consecutive checkpoints.
// Cells reached by contributors with conflicting Jacobian signs are marked
// multivalued; cells with no contributor are uncovered.
inline ReconstructedField reconstruct_field(const RayFan& fan,
                                            const RegularGrid& grid) {
  if (fan.rays.empty()) throw SolverError("empty ray fan");
  if (fan.n != 2 || grid.dimension() != 2)
    throw SolverError("field reconstruction supports dimension 2");

  ReconstructedField out;
  out.grid = grid;
  const std::size_t total = grid.size();
  out.u.assign(total, std::numeric_limits<double>::quiet_NaN());
  out.p.assign(2, std::vector<double>(
                      total, std::numeric_limits<double>::quiet_NaN()));
  out.mask.assign(total, CellState::Uncovered);
  out.tangent.assign(total, {0.0, 0.0});
  std::vector<int> jac_sign(total, 0);

  const Axis& ax0 = grid.axes[0];
  const Axis& ax1 = grid.axes[1];
  double scale = std::abs(ax0.spacing * ax0.count) +
                 std::abs(ax1.spacing * ax1.count);

  const std::size_t nrays = fan.rays.size();
  for (std::size_t k = 0; k + 1 < nrays; ++k) {
    const Ray& r0 = fan.rays[k];
    const Ray& r1 = fan.rays[k + 1];
    for (std::size_t m = 0; m + 1 < r0.pts.size(); ++m) {
      const RayCheckpoint& pa = r0.pts[m];
      const RayCheckpoint& pb = r1.pts[m];
      const RayCheckpoint& pc = r1.pts[m + 1];
      const RayCheckpoint& pd = r0.pts[m + 1];
      if (std::isnan(pa.u) || std::isnan(pb.u) || std::isnan(pc.u) ||
          std::isnan(pd.u))
        continue;
      double A[2] = {pa.x[0], pa.x[1]};
      double B[2] = {pb.x[0], pb.x[1]};
      double C[2] = {pc.x[0], pc.x[1]};
      double D[2] = {pd.x[0], pd.x[1]};
      double lo0 = std::min({A[0], B[0], C[0], D[0]});
      double hi0 = std::max({A[0], B[0], C[0], D[0]});
      double lo1 = std::min({A[1], B[1], C[1], D[1]});
      double hi1 = std::max({A[1], B[1], C[1], D[1]});
      double pad = 1e-12 * scale;
      int i0 = static_cast<int>(std::ceil((lo0 - ax0.origin - pad) / ax0.spacing));
      int i1 = static_cast<int>(std::floor((hi0 - ax0.origin + pad) / ax0.spacing));
      int j0 = static_cast<int>(std::ceil((lo1 - ax1.origin - pad) / ax1.spacing));
      int j1 = static_cast<int>(std::floor((hi1 - ax1.origin + pad) / ax1.spacing));
      i0 = std::max(i0, 0);
      i1 = std::min(i1, ax0.count - 1);
      j0 = std::max(j0, 0);
      j1 = std::min(j1, ax1.count - 1);
      for (int i = i0; i <= i1; ++i) {
        for (int j = j0; j <= j1; ++j) {
          double P[2] = {grid.coord(0, i), grid.coord(1, j)};
          double a, b;
          if (!detail::invert_bilinear(A, B, C, D, P, scale, a, b)) continue;
          a = std::clamp(a, 0.0, 1.0);
          b = std::clamp(b, 0.0, 1.0);
          auto blend = [&](double va, double vb, double vc, double vd) {
            return (1 - b) * ((1 - a) * va + a * vb) +
                   b * ((1 - a) * vd + a * vc);
          };
          double jac = blend(pa.jacobian, pb.jacobian, pc.jacobian,
                             pd.jacobian);
          int sign = jac > 0 ? 1 : (jac < 0 ? -1 : 0);
          int idx_arr[2] = {i, j};
          std::size_t lin = grid.linear(idx_arr);
          if (out.mask[lin] == CellState::Uncovered) {
            out.mask[lin] = CellState::Valid;
            out.u[lin] = blend(pa.u, pb.u, pc.u, pd.u);
            for (int d = 0; d < 2; ++d)
              out.p[static_cast<std::size_t>(d)][lin] =
                  blend(pa.p[static_cast<std::size_t>(d)],
                        pb.p[static_cast<std::size_t>(d)],
                        pc.p[static_cast<std::size_t>(d)],
                        pd.p[static_cast<std::size_t>(d)]);
            double t0 = 0.5 * ((D[0] - A[0]) + (C[0] - B[0])) / fan.h;
            double t1 = 0.5 * ((D[1] - A[1]) + (C[1] - B[1])) / fan.h;
            out.tangent[lin] = {t0, t1};
            jac_sign[lin] = sign;
          } else if (sign != 0 && jac_sign[lin] != 0 &&
                     sign != jac_sign[lin]) {
            out.mask[lin] = CellState::Multivalued;
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Closure report: the commutator diagnostic of the reconstructed p-field.
// ---------------------------------------------------------------------------

enum class Classification { Function, Functional, Multivalued };

inline const char* to_string(Classification c) {
  switch (c) {
    case Classification::Function:
      return "Function";
    case Classification::Functional:
      return "Functional";
    default:
      return "Multivalued";
  }
}

struct ClosureReport {
  CommutatorField commutator;
  double max_abs_interior = 0.0;
  Classification classification = Classification::Function;
  double threshold = 0.0;
  std::vector<CausticRecord> caustics;
  std::size_t valid_cells = 0;
  std::size_t multivalued_cells = 0;
  std::size_t uncovered_cells = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["classification"] = to_string(classification);
    j["max_abs_interior"] = max_abs_interior;
    j["threshold"] = threshold;
    j["caustics"] = caustics_json(caustics);
    j["valid_cells"] = valid_cells;
    j["multivalued_cells"] = multivalued_cells;
    j["uncovered_cells"] = uncovered_cells;
    return j;
  }
};

inline ClosureReport closure_report(
    const ReconstructedField& field, double threshold,
    std::vector<CausticRecord> caustics = {}) {
  const int n = field.grid.dimension();
  std::size_t valid = field.count(CellState::Valid);
  if (valid == 0) throw SolverError("closure report: valid region is empty");

  // masked cells become NaN; stencils touching them drop out of the max
  DifferentialForm theta(n, 1);
  for (int i = 0; i < n; ++i) {
    GridData gd{field.grid, field.p[static_cast<std::size_t>(i)]};
    for (std::size_t c = 0; c < gd.values.size(); ++c)
      if (field.mask[c] != CellState::Valid)
        gd.values[c] = std::numeric_limits<double>::quiet_NaN();
    theta.set({i}, CoefficientField::sampled(std::move(gd)));
  }

  ClosureReport rep;
  rep.commutator = commutator(theta, field.grid, /*interior_only=*/true);
  rep.max_abs_interior = rep.commutator.max_abs;
  rep.threshold = threshold;
  rep.caustics = std::move(caustics);
  rep.valid_cells = valid;
  rep.multivalued_cells = field.count(CellState::Multivalued);
  rep.uncovered_cells = field.count(CellState::Uncovered);
  if (rep.multivalued_cells > 0)
    rep.classification = Classification::Multivalued;
  else if (rep.max_abs_interior < threshold)
    rep.classification = Classification::Function;
  else
    rep.classification = Classification::Functional;
  return rep;
}

// ---------------------------------------------------------------------------
// Poincare invariant check: along canonical rays the action differential
// must satisfy du/dt = -E + sum_j p_j dx_j/dt.
// ---------------------------------------------------------------------------

inline double poincare_check(const RayFan& fan, const Expression& E) {
  if (!fan.canonical)
    throw SolverError("fan not canonical: Poincare check needs a Hamiltonian");
  CharacteristicSystem sys = canonical_system(E, fan.n);
  double defect = 0.0;
  for (const Ray& ray : fan.rays) {
    for (const RayCheckpoint& cp : ray.pts) {
      if (std::isnan(cp.u)) continue;
      StripState st{cp.x, cp.u, cp.p};
      StripDerivatives d = sys.rhs(st);
      if (!d.finite) continue;
      double e = sys.hamiltonian_value(st);
      double rhs = -e;
      for (int j = 1; j < fan.n; ++j)
        rhs += cp.p[static_cast<std::size_t>(j)] *
               d.dx[static_cast<std::size_t>(j)];
      defect = std::max(defect, std::abs(d.du - rhs));
    }
  }
  return defect;
}

// ---------------------------------------------------------------------------
// Transverse derivative discontinuity scan.
// ---------------------------------------------------------------------------

struct DiscontinuityRecord {
  std::vector<int> cell;
  int axis = 0;
  double jump = 0.0;
};

inline std::vector<DiscontinuityRecord> discontinuity_scan(
    const ReconstructedField& field) {
  const int n = field.grid.dimension();
  const std::size_t total = field.grid.size();
  if (field.count(CellState::Valid) == 0)
    throw SolverError("discontinuity scan: valid region is empty");

  struct Pair {
    std::size_t lin;
    std::vector<int> cell;
    int axis;
    double jump;
  };
  std::vector<Pair> pairs;
  std::vector<double> jumps;
  for (std::size_t lin = 0; lin < total; ++lin) {
    if (field.mask[lin] != CellState::Valid) continue;
    std::vector<int> idx = field.grid.unravel(lin);
    for (int a = 0; a < n; ++a) {
      if (idx[static_cast<std::size_t>(a)] + 1 >=
          field.grid.axes[static_cast<std::size_t>(a)].count)
        continue;
      std::vector<int> nb = idx;
      ++nb[static_cast<std::size_t>(a)];
      std::size_t nlin = field.grid.linear(nb);
      if (field.mask[nlin] != CellState::Valid) continue;  // masked: skip pair
      double j2 = 0.0;
      for (int i = 0; i < n; ++i) {
        double d = field.p[static_cast<std::size_t>(i)][nlin] -
                   field.p[static_cast<std::size_t>(i)][lin];
        j2 += d * d;
      }
      double jump = std::sqrt(j2);
      pairs.push_back({lin, idx, a, jump});
      jumps.push_back(jump);
    }
  }
  if (jumps.empty()) return {};
  std::vector<double> sorted = jumps;
  std::sort(sorted.begin(), sorted.end());
  double median = sorted[sorted.size() / 2];

  std::vector<DiscontinuityRecord> flags;
  for (const Pair& pr : pairs) {
    if (!(pr.jump > 10.0 * median)) continue;
    // jump direction must be transverse to the local ray tangent
    const auto& t = field.tangent[pr.lin];
    double tn = 0.0;
    for (double v : t) tn += v * v;
    tn = std::sqrt(tn);
    if (tn == 0.0) continue;
    double cosine =
        std::abs(t[static_cast<std::size_t>(pr.axis)]) / tn;
    if (cosine >= 0.5) continue;
    flags.push_back({pr.cell, pr.axis, pr.jump});
  }
  return flags;
}

}  // namespace charform
