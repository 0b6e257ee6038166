#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "charform/expr.hpp"
#include "charform/grid.hpp"

namespace charform {

class FormError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string> coordinate_names(int n) {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(n));
  for (int i = 1; i <= n; ++i) names.push_back("x" + std::to_string(i));
  return names;
}

// One analytic factor: an expression over x1..xn with up to two exact
// derivative applications (nested duals).
struct Atom {
  Expression expr;
  std::vector<int> axes;  // derivative axes, applied left to right
  int dimension = 0;
  Program program;

  Atom(Expression e, int dim) : expr(std::move(e)), dimension(dim) {
    program = expr.compile(coordinate_names(dim));
  }

  double evaluate(std::span<const double> x, EvalFlags* flags) const {
    const std::size_t n = static_cast<std::size_t>(dimension);
    if (axes.empty()) {
      std::vector<double> v(x.begin(), x.end());
      return program.eval<double>(v, flags);
    }
    if (axes.size() == 1) {
      std::vector<Dual<double>> v(n);
      for (std::size_t i = 0; i < n; ++i)
        v[i] = Dual<double>(x[i],
                            i == static_cast<std::size_t>(axes[0]) ? 1.0 : 0.0);
      return program.eval<Dual<double>>(v, flags).d;
    }
    if (axes.size() == 2) {
      using DD = Dual<Dual<double>>;
      std::vector<DD> v(n);
      for (std::size_t i = 0; i < n; ++i) {
        double s0 = i == static_cast<std::size_t>(axes[0]) ? 1.0 : 0.0;
        double s1 = i == static_cast<std::size_t>(axes[1]) ? 1.0 : 0.0;
        v[i] = DD(Dual<double>(x[i], s0), Dual<double>(s1, 0.0));
      }
      return program.eval<DD>(v, flags).d.d;
    }
    throw FormError("analytic derivatives beyond second order not supported");
  }
};

}  // namespace detail

// A coefficient of a differential form: a weighted sum of products of
// analytic atoms and sampled grids.
class CoefficientField {
 public:
  using SampledRef = std::shared_ptr<const GridData>;
  using Factor = std::variant<detail::Atom, SampledRef>;
  struct Term {
    double weight = 1.0;
    std::vector<Factor> factors;
  };

  CoefficientField() = default;  // zero field

  static CoefficientField analytic(Expression e, int dimension) {
    CoefficientField f;
    f.dimension_ = dimension;
    Term t;
    t.factors.emplace_back(detail::Atom(std::move(e), dimension));
    f.terms_.push_back(std::move(t));
    return f;
  }

  static CoefficientField constant(double c, int dimension) {
    CoefficientField f;
    f.dimension_ = dimension;
    if (c != 0.0) f.terms_.push_back(Term{c, {}});
    return f;
  }

  static CoefficientField sampled(GridData gd) {
    CoefficientField f;
    f.dimension_ = gd.grid.dimension();
    Term t;
    t.factors.emplace_back(std::make_shared<const GridData>(std::move(gd)));
    f.terms_.push_back(std::move(t));
    return f;
  }

  bool is_zero() const { return terms_.empty(); }
  int dimension() const { return dimension_; }

  double evaluate(std::span<const double> x, EvalFlags* flags = nullptr) const {
    double acc = 0.0;
    for (const Term& t : terms_) {
      double prod = t.weight;
      for (const Factor& f : t.factors) {
        if (const auto* atom = std::get_if<detail::Atom>(&f))
          prod *= atom->evaluate(x, flags);
        else
          prod *= interpolate(*std::get<SampledRef>(f), x);
      }
      acc += prod;
    }
    return acc;
  }

  // Exact derivative for analytic atoms, second-order stencils for sampled
  // grids. Products (wedge results) are not differentiable here.
  CoefficientField derivative(int axis) const {
    CoefficientField out;
    out.dimension_ = dimension_;
    for (const Term& t : terms_) {
      if (t.factors.empty()) continue;  // constant
      if (t.factors.size() > 1)
        throw FormError("derivative of a product coefficient is not supported");
      Term dt;
      dt.weight = t.weight;
      if (const auto* atom = std::get_if<detail::Atom>(&t.factors[0])) {
        detail::Atom da = *atom;
        da.axes.push_back(axis);
        dt.factors.emplace_back(std::move(da));
      } else {
        const auto& gd = std::get<SampledRef>(t.factors[0]);
        dt.factors.emplace_back(std::make_shared<const GridData>(
            stencil_derivative(*gd, axis)));
      }
      out.terms_.push_back(std::move(dt));
    }
    return out;
  }

  CoefficientField& operator+=(const CoefficientField& other) {
    if (terms_.empty()) dimension_ = other.dimension_;
    for (const Term& t : other.terms_) terms_.push_back(t);
    return *this;
  }

  CoefficientField scaled(double w) const {
    CoefficientField out = *this;
    if (w == 0.0) {
      out.terms_.clear();
      return out;
    }
    for (Term& t : out.terms_) t.weight *= w;
    return out;
  }

  static CoefficientField product(const CoefficientField& a,
                                  const CoefficientField& b) {
    CoefficientField out;
    out.dimension_ = a.dimension_ ? a.dimension_ : b.dimension_;
    for (const Term& ta : a.terms_)
      for (const Term& tb : b.terms_) {
        Term t;
        t.weight = ta.weight * tb.weight;
        t.factors = ta.factors;
        t.factors.insert(t.factors.end(), tb.factors.begin(),
                         tb.factors.end());
        out.terms_.push_back(std::move(t));
      }
    return out;
  }

  // First sampled grid referenced by this field, if any.
  const RegularGrid* sampled_grid() const {
    for (const Term& t : terms_)
      for (const Factor& f : t.factors)
        if (const auto* s = std::get_if<SampledRef>(&f)) return &(*s)->grid;
    return nullptr;
  }

 private:
  int dimension_ = 0;
  std::vector<Term> terms_;
};

using MultiIndex = std::vector<int>;  // strictly increasing, 0-based axes

struct DifferentialForm {
  int dimension = 0;
  int degree = 0;
  std::map<MultiIndex, CoefficientField> coeffs;

  DifferentialForm() = default;
  DifferentialForm(int n, int k) : dimension(n), degree(k) {
    if (k < 0 || k > n) throw FormError("form degree must satisfy 0 <= k <= n");
  }

  void set(MultiIndex idx, CoefficientField field) {
    validate_index(idx);
    coeffs[std::move(idx)] = std::move(field);
  }

  void add(const MultiIndex& idx, const CoefficientField& field) {
    validate_index(idx);
    coeffs[idx] += field;
  }

  CoefficientField get(const MultiIndex& idx) const {
    auto it = coeffs.find(idx);
    if (it == coeffs.end()) return CoefficientField::constant(0.0, dimension);
    return it->second;
  }

 private:
  void validate_index(const MultiIndex& idx) const {
    if (static_cast<int>(idx.size()) != degree)
      throw FormError("multi-index length does not match form degree");
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= dimension)
        throw FormError("multi-index axis out of range");
      if (i > 0 && idx[i] <= idx[i - 1])
        throw FormError("multi-index must be strictly increasing");
    }
  }
};

namespace detail {

inline void check_matching_grids(const DifferentialForm& f) {
  const RegularGrid* ref = nullptr;
  for (const auto& [idx, c] : f.coeffs) {
    const RegularGrid* g = c.sampled_grid();
    if (!g) continue;
    if (!ref)
      ref = g;
    else if (!(*ref == *g))
      throw FormError("mismatched grid metadata between coefficients");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Exterior derivative. For a 1-form the dx_i^dx_j coefficient (i<j) is the
// commutator K_ij = d p_j / d x_i - d p_i / d x_j.
// ---------------------------------------------------------------------------

inline DifferentialForm exterior_derivative(const DifferentialForm& omega) {
  if (omega.degree >= omega.dimension)
    throw FormError("exterior derivative of a top-degree form");
  detail::check_matching_grids(omega);
  DifferentialForm out(omega.dimension, omega.degree + 1);
  for (const auto& [idx, c] : omega.coeffs) {
    if (c.is_zero()) continue;
    for (int j = 0; j < omega.dimension; ++j) {
      if (std::find(idx.begin(), idx.end(), j) != idx.end()) continue;
      MultiIndex jdx = idx;
      auto pos = std::lower_bound(jdx.begin(), jdx.end(), j);
      int sign = static_cast<int>(pos - jdx.begin()) % 2 == 0 ? 1 : -1;
      jdx.insert(pos, j);
      out.add(jdx, c.derivative(j).scaled(sign));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commutator of a 1-form sampled on a grid.
// ---------------------------------------------------------------------------

struct CommutatorField {
  int dimension = 0;
  RegularGrid grid;
  std::map<std::pair<int, int>, std::vector<double>> components;  // i<j
  double max_abs = 0.0;
  std::vector<int> argmax_index;
  std::pair<int, int> argmax_pair{-1, -1};

  double component(int i, int j, std::size_t lin) const {
    if (i == j) return 0.0;
    if (i < j) return components.at({i, j})[lin];
    return -components.at({j, i})[lin];
  }
};

inline CommutatorField commutator(const DifferentialForm& theta,
                                  const RegularGrid& sample_grid,
                                  bool interior_only = true) {
  if (theta.degree != 1) throw FormError("commutator requires a 1-form");
  detail::check_matching_grids(theta);
  if (const RegularGrid* g =
          theta.coeffs.empty() ? nullptr
                               : theta.coeffs.begin()->second.sampled_grid())
    if (!(*g == sample_grid))
      throw FormError("mismatched grid metadata between coefficients");
  DifferentialForm dtheta = exterior_derivative(theta);

  CommutatorField out;
  out.dimension = theta.dimension;
  out.grid = sample_grid;
  const std::size_t total = sample_grid.size();
  for (int i = 0; i < theta.dimension; ++i)
    for (int j = i + 1; j < theta.dimension; ++j)
      out.components[{i, j}] = std::vector<double>(total, 0.0);

  std::vector<int> idx;
  for (std::size_t lin = 0; lin < total; ++lin) {
    idx = sample_grid.unravel(lin);
    std::vector<double> x = sample_grid.point(idx);
    bool interior = sample_grid.interior(idx);
    for (auto& [pair, vals] : out.components) {
      double k = dtheta.get({pair.first, pair.second}).evaluate(x);
      vals[lin] = k;
      if (interior_only && !interior) continue;
      if (std::isnan(k)) continue;
      if (std::abs(k) > out.max_abs) {
        out.max_abs = std::abs(k);
        out.argmax_index = idx;
        out.argmax_pair = pair;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Wedge product: graded-commutative, bilinear.
// ---------------------------------------------------------------------------

inline DifferentialForm wedge(const DifferentialForm& a,
                              const DifferentialForm& b) {
  if (a.dimension != b.dimension)
    throw FormError("wedge of forms over different dimensions");
  if (a.degree + b.degree > a.dimension)
    throw FormError("wedge degree exceeds dimension");
  DifferentialForm out(a.dimension, a.degree + b.degree);
  for (const auto& [ia, ca] : a.coeffs) {
    if (ca.is_zero()) continue;
    for (const auto& [ib, cb] : b.coeffs) {
      if (cb.is_zero()) continue;
      bool overlap = false;
      for (int i : ia)
        if (std::find(ib.begin(), ib.end(), i) != ib.end()) overlap = true;
      if (overlap) continue;
      // sign of the permutation sorting (ia, ib) into increasing order
      int inversions = 0;
      for (int i : ia)
        for (int j : ib)
          if (i > j) ++inversions;
      MultiIndex merged = ia;
      merged.insert(merged.end(), ib.begin(), ib.end());
      std::sort(merged.begin(), merged.end());
      double sign = inversions % 2 == 0 ? 1.0 : -1.0;
      out.add(merged, CoefficientField::product(ca, cb).scaled(sign));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Line integral of a 1-form along a polyline: per-segment quadrature with
// coefficient values averaged at the segment endpoints.
// ---------------------------------------------------------------------------

inline double line_integral(const DifferentialForm& theta,
                            std::vector<std::vector<double>> path,
                            bool closed = false) {
  if (theta.degree != 1) throw FormError("line integral requires a 1-form");
  if (path.size() < 2) throw FormError("path needs at least 2 points");
  if (closed) {
    const auto& first = path.front();
    const auto& last = path.back();
    double gap = 0.0;
    for (std::size_t a = 0; a < first.size(); ++a)
      gap += std::abs(first[a] - last[a]);
    if (gap > 1e-12) path.push_back(first);
  }
  const int n = theta.dimension;
  std::vector<CoefficientField> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = theta.get({i});

  std::vector<std::vector<double>> vals(path.size(),
                                        std::vector<double>(n, 0.0));
  for (std::size_t k = 0; k < path.size(); ++k)
    for (int i = 0; i < n; ++i)
      vals[k][static_cast<std::size_t>(i)] =
          p[static_cast<std::size_t>(i)].evaluate(path[k]);

  double acc = 0.0;
  for (std::size_t k = 0; k + 1 < path.size(); ++k)
    for (int i = 0; i < n; ++i) {
      std::size_t ii = static_cast<std::size_t>(i);
      acc += 0.5 * (vals[k][ii] + vals[k + 1][ii]) *
             (path[k + 1][ii] - path[k][ii]);
    }
  return acc;
}

}  // namespace charform
