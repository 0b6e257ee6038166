#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "charform/diagnose.hpp"

using namespace charform;

namespace {

Expression E_(const std::string& text) { return Expression::parse(text); }

InitialData line_data(const std::string& u0, double lo, double hi, int count) {
  InitialData init;
  init.surface = {E_("0"), E_("r1")};
  init.u0 = E_(u0);
  init.r_min = {lo};
  init.r_max = {hi};
  init.r_count = {count};
  return init;
}

RegularGrid grid2(double lo0, double hi0, int c0, double lo1, double hi1,
                  int c1) {
  RegularGrid g;
  g.axes.push_back({lo0, (hi0 - lo0) / (c0 - 1), c0});
  g.axes.push_back({lo1, (hi1 - lo1) / (c1 - 1), c1});
  return g;
}

ReconstructedField synthetic_field(const RegularGrid& g,
                                   const std::string& p1_text,
                                   const std::string& p2_text) {
  ReconstructedField f;
  f.grid = g;
  f.u.assign(g.size(), 0.0);
  f.mask.assign(g.size(), CellState::Valid);
  f.tangent.assign(g.size(), {1.0, 0.0});
  const std::vector<std::string> coords{"x1", "x2"};
  for (const std::string& text : {p1_text, p2_text}) {
    Program prog = Expression::parse(text).compile(coords);
    std::vector<double> vals(g.size());
    for (std::size_t lin = 0; lin < vals.size(); ++lin)
      vals[lin] = prog.eval<double>(g.point(g.unravel(lin)));
    f.p.push_back(std::move(vals));
  }
  return f;
}

}  // namespace

TEST_CASE("reconstruction recovers the advected profile") {
  CharacteristicSystem sys = canonical_system(E_("2*p2"), 2);
  InitialData init = line_data("sin(r1)", -3.0, 1.0, 161);
  RayFan fan =
      integrate(sys, initialize_strips(sys, init)[0], init, 0.01, 1.0);

  RegularGrid g = grid2(0.1, 0.9, 21, -1.0, 1.0, 21);
  ReconstructedField field = reconstruct_field(fan, g);
  CHECK(field.count(CellState::Valid) == g.size());
  double max_err = 0.0;
  for (std::size_t lin = 0; lin < g.size(); ++lin) {
    std::vector<double> pt = g.point(g.unravel(lin));
    double exact = std::sin(pt[1] - 2.0 * pt[0]);
    max_err = std::max(max_err, std::abs(field.u[lin] - exact));
    max_err = std::max(
        max_err, std::abs(field.p[1][lin] - std::cos(pt[1] - 2.0 * pt[0])));
  }
  CHECK(max_err < 1e-4);

  // the reconstructed momentum field is closed: Function classification
  ClosureReport rep = closure_report(field, 1e-2);
  CHECK(rep.classification == Classification::Function);
  CHECK(rep.max_abs_interior < 1e-2);
  CHECK(rep.multivalued_cells == 0);
  CHECK(rep.uncovered_cells == 0);
}

TEST_CASE("grid nodes outside the fan are marked uncovered") {
  CharacteristicSystem sys = canonical_system(E_("2*p2"), 2);
  InitialData init = line_data("sin(r1)", -1.0, 1.0, 21);
  RayFan fan =
      integrate(sys, initialize_strips(sys, init)[0], init, 0.01, 1.0);
  // rays cover x2 in [t-1... ]; x2 = 8 is far outside
  RegularGrid g = grid2(0.1, 0.9, 9, 6.0, 8.0, 9);
  ReconstructedField field = reconstruct_field(fan, g);
  CHECK(field.count(CellState::Uncovered) == g.size());
  CHECK(std::isnan(field.u[0]));
  CHECK_THROWS_AS(closure_report(field, 1e-2), SolverError);
}

TEST_CASE("reconstruction requires a planar problem") {
  CharacteristicSystem sys = canonical_system(E_("2*p2"), 2);
  InitialData init = line_data("sin(r1)", -1.0, 1.0, 5);
  RayFan fan =
      integrate(sys, initialize_strips(sys, init)[0], init, 0.01, 0.5);
  RegularGrid g1;
  g1.axes.push_back({0.0, 0.1, 5});
  CHECK_THROWS_AS(reconstruct_field(fan, g1), SolverError);
}

TEST_CASE("folded fans are classified as multivalued") {
  // u_t + u_x^2/2 = 0, u(0,x) = -x^4/... : p2(0) = -4 r^3 folds the fan
  CharacteristicSystem sys = canonical_system(E_("p2^2/2"), 2);
  InitialData init = line_data("-r1^4", -1.0, 1.0, 41);
  RayFan fan =
      integrate(sys, initialize_strips(sys, init)[0], init, 0.01, 0.8);
  auto caustics = detect_caustics(fan);
  CHECK(!caustics.empty());

  // the fold opens at t = 1/12; the window spans both regimes
  RegularGrid g = grid2(0.05, 0.7, 13, -0.6, 0.6, 13);
  ReconstructedField field = reconstruct_field(fan, g);
  CHECK(field.count(CellState::Multivalued) > 0);
  CHECK(field.count(CellState::Valid) > 0);
  ClosureReport rep = closure_report(field, 1e-2, caustics);
  CHECK(rep.classification == Classification::Multivalued);
  CHECK(rep.caustics.size() == caustics.size());
  CHECK(std::string(to_string(rep.classification)) == "Multivalued");
  // report serialization carries the counts
  nlohmann::json j = rep.to_json();
  CHECK(j["classification"] == "Multivalued");
  CHECK(j["caustics"].size() == caustics.size());
}

TEST_CASE("a non-closed momentum field is classified Functional") {
  RegularGrid g = grid2(0.0, 1.0, 11, 0.0, 1.0, 11);
  ReconstructedField f = synthetic_field(g, "x2", "0");
  ClosureReport rep = closure_report(f, 1e-2);
  CHECK(rep.classification == Classification::Functional);
  CHECK(rep.max_abs_interior == Catch::Approx(1.0).margin(1e-10));
}

TEST_CASE("masked cells drop out of the commutator stencils") {
  RegularGrid g = grid2(0.0, 1.0, 11, 0.0, 1.0, 11);
  ReconstructedField f = synthetic_field(g, "x2", "0");
  // poison a block; the remaining interior still witnesses K = -1
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      int idx[2] = {i, j};
      f.mask[g.linear(idx)] = CellState::Uncovered;
    }
  ClosureReport rep = closure_report(f, 1e-2);
  CHECK(std::isfinite(rep.max_abs_interior));
  CHECK(rep.classification == Classification::Functional);
}

TEST_CASE("Poincare invariant defect stays small along canonical rays") {
  Expression E = E_("(p2^2 + x2^2)/2");
  CharacteristicSystem sys = canonical_system(E, 2);
  InitialData init = line_data("r1^2/2", 0.5, 1.5, 5);
  RayFan fan = integrate(sys, initialize_strips(sys, init)[0], init, 0.01,
                         4.0 * std::numbers::pi);
  CHECK(poincare_check(fan, E) < 1e-7);

  // a fan from a generic F is not canonical
  CharacteristicSystem gen =
      derive_characteristic_system(E_("p1^2 + p2^2 - 1"), 2);
  InitialData einit;
  einit.surface = {E_("0"), E_("r1")};
  einit.u0 = E_("0");
  einit.r_min = {-1.0};
  einit.r_max = {1.0};
  einit.r_count = {5};
  einit.branch = 1;
  RayFan efan =
      integrate(gen, initialize_strips(gen, einit)[0], einit, 0.01, 0.5);
  CHECK_THROWS_AS(poincare_check(efan, E), SolverError);
}

TEST_CASE("discontinuity scan flags transverse momentum jumps") {
  RegularGrid g = grid2(0.0, 1.0, 11, 0.0, 1.0, 11);
  ReconstructedField f = synthetic_field(g, "0", "0");
  // step in p1 across x2 = 0.5, rays running along the x1 axis
  for (std::size_t lin = 0; lin < g.size(); ++lin)
    if (g.point(g.unravel(lin))[1] >= 0.5) f.p[0][lin] = 1.0;
  auto flags = discontinuity_scan(f);
  REQUIRE(flags.size() == 11);
  for (const auto& rec : flags) {
    CHECK(rec.axis == 1);
    CHECK(rec.jump == Catch::Approx(1.0));
  }

  // parallel jumps (along the tangent) are not flagged
  ReconstructedField par = synthetic_field(g, "0", "0");
  for (std::size_t lin = 0; lin < g.size(); ++lin)
    if (par.grid.point(par.grid.unravel(lin))[0] >= 0.5) par.p[0][lin] = 1.0;
  CHECK(discontinuity_scan(par).empty());

  // a smooth field produces no flags
  ReconstructedField smooth = synthetic_field(g, "x2", "x1");
  CHECK(discontinuity_scan(smooth).empty());
}
