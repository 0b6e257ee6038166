#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "charform/expr.hpp"

namespace charform {

class SolverError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

// slot layout used throughout: x1..xn, u, p1..pn
inline std::vector<std::string> strip_slot_names(int n) {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(2 * n + 1));
  for (int i = 1; i <= n; ++i) names.push_back("x" + std::to_string(i));
  names.push_back("u");
  for (int i = 1; i <= n; ++i) names.push_back("p" + std::to_string(i));
  return names;
}

inline double quiet_nan() { return std::numeric_limits<double>::quiet_NaN(); }

// determinant of a small dense matrix, Gaussian elimination with row pivoting
inline double small_det(std::vector<std::vector<double>> m) {
  const std::size_t n = m.size();
  double det = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    if (m[piv][c] == 0.0) return 0.0;
    if (piv != c) {
      std::swap(m[piv], m[c]);
      det = -det;
    }
    det *= m[c][c];
    for (std::size_t r = c + 1; r < n; ++r) {
      double f = m[r][c] / m[c][c];
      for (std::size_t k = c; k < n; ++k) m[r][k] -= f * m[c][k];
    }
  }
  return det;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Characteristic system: dx_i/ds = dF/dp_i, dp_i/ds = -(dF/dx_i + p_i dF/du),
// du/ds = sum_i p_i dF/dp_i (Charpit strip transport).
// ---------------------------------------------------------------------------

struct StripState {
  std::vector<double> x;
  double u = 0.0;
  std::vector<double> p;
};

struct StripDerivatives {
  std::vector<double> dx;
  double du = 0.0;
  std::vector<double> dp;
  double F_value = 0.0;
  bool finite = true;
};

class CharacteristicSystem {
 public:
  static CharacteristicSystem from_equation(Expression F, int n) {
    for (const auto& v : F.variables()) check_variable(v, n);
    bool has_p = false;
    for (int i = 1; i <= n; ++i)
      if (F.references("p" + std::to_string(i))) has_p = true;
    if (!has_p)
      throw SolverError(
          "degeneracy error: F does not depend on any momentum p_i");
    CharacteristicSystem sys;
    sys.n_ = n;
    sys.F_ = F.references("t") ? F.renamed("t", "x1") : F;
    sys.slots_ = detail::strip_slot_names(n);
    sys.program_ = sys.F_.compile(sys.slots_);
    return sys;
  }

  // Hamilton-Jacobi form: F = p1 + E(t, x2..xn, p2..pn), t the ray parameter.
  static CharacteristicSystem from_hamiltonian(Expression E, int n) {
    if (E.references("p1"))
      throw SolverError("malformed HJ problem: E references p1");
    if (E.references("u"))
      throw SolverError("malformed HJ problem: E references u");
    Expression Et = E.references("t") ? E.renamed("t", "x1") : E;
    for (const auto& v : Et.variables()) check_variable(v, n);
    Expression F(make_binary('+', make_variable("p1"), Et.root()));
    CharacteristicSystem sys;
    sys.n_ = n;
    sys.F_ = std::move(F);
    sys.slots_ = detail::strip_slot_names(n);
    sys.program_ = sys.F_.compile(sys.slots_);
    sys.E_ = std::move(Et);
    sys.E_program_ = sys.E_->compile(sys.slots_);
    sys.canonical_ = true;
    return sys;
  }

  int dimension() const { return n_; }
  bool canonical() const { return canonical_; }
  const Expression& F() const { return F_; }
  const Expression* hamiltonian() const { return E_ ? &*E_ : nullptr; }

  void pack(const StripState& st, std::vector<double>& slots) const {
    const std::size_t n = static_cast<std::size_t>(n_);
    slots.resize(2 * n + 1);
    for (std::size_t i = 0; i < n; ++i) slots[i] = st.x[i];
    slots[n] = st.u;
    for (std::size_t i = 0; i < n; ++i) slots[n + 1 + i] = st.p[i];
  }

  double residual(const StripState& st, EvalFlags* flags = nullptr) const {
    std::vector<double> slots;
    pack(st, slots);
    return program_.eval<double>(slots, flags);
  }

  double hamiltonian_value(const StripState& st,
                           EvalFlags* flags = nullptr) const {
    if (!E_) throw SolverError("fan not canonical: no Hamiltonian available");
    std::vector<double> slots;
    pack(st, slots);
    return E_program_->eval<double>(slots, flags);
  }

  StripDerivatives rhs(const StripState& st) const {
    const std::size_t n = static_cast<std::size_t>(n_);
    std::vector<double> slots;
    pack(st, slots);
    StripDerivatives d;
    d.dx.resize(n);
    d.dp.resize(n);

    EvalFlags flags;
    std::vector<Dual<double>> duals(slots.size());
    auto partial = [&](std::size_t seed) {
      for (std::size_t i = 0; i < slots.size(); ++i)
        duals[i] = Dual<double>(slots[i], i == seed ? 1.0 : 0.0);
      Dual<double> r = program_.eval<Dual<double>>(duals, &flags);
      d.F_value = r.v;
      return r.d;
    };

    double Fu = partial(n);
    double du = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double Fp = partial(n + 1 + i);
      double Fx = partial(i);
      d.dx[i] = Fp;
      d.dp[i] = -(Fx + st.p[i] * Fu);
      du += st.p[i] * Fp;
    }
    d.du = du;
    d.finite = !flags.non_finite && std::isfinite(d.du);
    for (std::size_t i = 0; i < n && d.finite; ++i)
      if (!std::isfinite(d.dx[i]) || !std::isfinite(d.dp[i])) d.finite = false;
    return d;
  }

 private:
  static void check_variable(const std::string& v, int n) {
    if (v == "u" || v == "t") return;
    if ((v.size() >= 2) && (v[0] == 'x' || v[0] == 'p')) {
      int k = std::atoi(v.c_str() + 1);
      if (k >= 1 && k <= n) return;
    }
    throw SolverError("undeclared variable '" + v + "' for dimension " +
                      std::to_string(n));
  }

  int n_ = 0;
  Expression F_;
  std::vector<std::string> slots_;
  Program program_;
  std::optional<Expression> E_;
  std::optional<Program> E_program_;
  bool canonical_ = false;
};

inline CharacteristicSystem derive_characteristic_system(Expression F, int n) {
  return CharacteristicSystem::from_equation(std::move(F), n);
}

inline CharacteristicSystem canonical_system(Expression E, int n) {
  return CharacteristicSystem::from_hamiltonian(std::move(E), n);
}

// ---------------------------------------------------------------------------
// Initial data on an (n-1)-parameter surface.
// ---------------------------------------------------------------------------

struct InitialData {
  std::vector<Expression> surface;  // x_i(r1..r_{n-1}), size n
  Expression u0;
  std::vector<Expression> momenta;  // optional, size n when present
  std::vector<double> r_min, r_max;
  std::vector<int> r_count;
  double bracket_lo = -10.0;
  double bracket_hi = 10.0;
  std::optional<int> branch;

  int parameter_count() const { return static_cast<int>(r_min.size()); }
  std::size_t sample_count() const {
    std::size_t c = 1;
    for (int k : r_count) c *= static_cast<std::size_t>(k);
    return c;
  }
};

struct InitialStrip {
  std::vector<double> r;
  std::vector<double> x;
  double u = 0.0;
  std::vector<double> p;
};

struct PdeProblem {
  int n = 0;
  Expression equation;  // F, or E when hj_mode
  bool hj_mode = false;
  InitialData initial;
  double h = 0.01;
  double s_max = 1.0;
};

namespace detail {

inline std::vector<std::string> parameter_names(int m) {
  std::vector<std::string> names;
  for (int i = 1; i <= m; ++i) names.push_back("r" + std::to_string(i));
  return names;
}

struct SurfaceSample {
  std::vector<double> r;
  std::vector<double> x;
  double u0 = 0.0;
  std::vector<std::vector<double>> dxdr;  // [param][coord]
  std::vector<double> du0dr;
};

// Solves the underdetermined tangential system T p = g (T is (n-1) x n,
// full rank) for a particular solution and the 1-dim nullspace direction.
inline void tangential_decomposition(std::vector<std::vector<double>> T,
                                     std::vector<double> g,
                                     std::vector<double>& p_part,
                                     std::vector<double>& nu) {
  const std::size_t rows = T.size();
  const std::size_t cols = rows + 1;
  std::vector<int> pivot_col(rows, -1);
  std::size_t r = 0;
  for (std::size_t c = 0; c < cols && r < rows; ++c) {
    std::size_t piv = r;
    for (std::size_t i = r + 1; i < rows; ++i)
      if (std::abs(T[i][c]) > std::abs(T[piv][c])) piv = i;
    if (std::abs(T[piv][c]) < 1e-13) continue;
    std::swap(T[piv], T[r]);
    std::swap(g[piv], g[r]);
    for (std::size_t i = 0; i < rows; ++i) {
      if (i == r) continue;
      double f = T[i][c] / T[r][c];
      for (std::size_t k = 0; k < cols; ++k) T[i][k] -= f * T[r][k];
      g[i] -= f * g[r];
    }
    pivot_col[r] = static_cast<int>(c);
    ++r;
  }
  if (r < rows)
    throw SolverError("degenerate initial surface parameterization");
  int free_col = -1;
  for (std::size_t c = 0; c < cols; ++c)
    if (std::find(pivot_col.begin(), pivot_col.end(), static_cast<int>(c)) ==
        pivot_col.end())
      free_col = static_cast<int>(c);

  p_part.assign(cols, 0.0);
  nu.assign(cols, 0.0);
  nu[static_cast<std::size_t>(free_col)] = 1.0;
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t pc = static_cast<std::size_t>(pivot_col[i]);
    p_part[pc] = g[i] / T[i][pc];
    nu[pc] = -T[i][static_cast<std::size_t>(free_col)] / T[i][pc];
  }
}

}  // namespace detail

// Fixes the tangential momentum components from du0/dr_a = sum_i p_i dx_i/dr_a
// and root-finds the remaining component from F = 0. Multiple real roots in
// the declared bracket come back as separate branches.
inline std::vector<std::vector<InitialStrip>> initialize_strips(
    const CharacteristicSystem& system, const InitialData& init) {
  const int n = system.dimension();
  const int m = n - 1;
  if (static_cast<int>(init.surface.size()) != n)
    throw SolverError("initial surface must give all " + std::to_string(n) +
                      " coordinates");
  if (static_cast<int>(init.r_min.size()) != m ||
      static_cast<int>(init.r_max.size()) != m ||
      static_cast<int>(init.r_count.size()) != m)
    throw SolverError("initial parameter ranges must match dimension-1");
  for (int a = 0; a < m; ++a) {
    if (init.r_count[static_cast<std::size_t>(a)] < 2)
      throw SolverError("initial data needs at least 2 samples per parameter");
    if (!(init.r_max[static_cast<std::size_t>(a)] >
          init.r_min[static_cast<std::size_t>(a)]))
      throw SolverError("degenerate initial parameter range");
  }

  const std::vector<std::string> rnames = detail::parameter_names(m);

  // sample the surface and its tangential derivatives
  std::vector<detail::SurfaceSample> samples;
  const std::size_t count = init.sample_count();
  samples.reserve(count);
  for (std::size_t lin = 0; lin < count; ++lin) {
    detail::SurfaceSample s;
    s.r.resize(static_cast<std::size_t>(m));
    std::size_t rem = lin;
    for (int a = m - 1; a >= 0; --a) {
      int c = init.r_count[static_cast<std::size_t>(a)];
      int i = static_cast<int>(rem % static_cast<std::size_t>(c));
      rem /= static_cast<std::size_t>(c);
      double lo = init.r_min[static_cast<std::size_t>(a)];
      double hi = init.r_max[static_cast<std::size_t>(a)];
      s.r[static_cast<std::size_t>(a)] =
          c == 1 ? lo : lo + (hi - lo) * i / (c - 1);
    }
    Bindings rb;
    for (int a = 0; a < m; ++a)
      rb[rnames[static_cast<std::size_t>(a)]] = s.r[static_cast<std::size_t>(a)];

    s.dxdr.assign(static_cast<std::size_t>(m),
                  std::vector<double>(static_cast<std::size_t>(n), 0.0));
    for (int i = 0; i < n; ++i) {
      GradientResult gr =
          eval_with_gradient(init.surface[static_cast<std::size_t>(i)], rb,
                             rnames);
      s.x.push_back(gr.value);
      for (int a = 0; a < m; ++a)
        s.dxdr[static_cast<std::size_t>(a)][static_cast<std::size_t>(i)] =
            gr.gradient[static_cast<std::size_t>(a)];
    }
    GradientResult gu = eval_with_gradient(init.u0, rb, rnames);
    s.u0 = gu.value;
    s.du0dr = gu.gradient;
    samples.push_back(std::move(s));
  }

  // per-sample momentum roots
  std::vector<std::vector<std::vector<double>>> roots_per_sample(count);
  std::size_t branch_count = 0;
  for (std::size_t si = 0; si < count; ++si) {
    const auto& s = samples[si];
    std::vector<std::vector<double>>& roots = roots_per_sample[si];

    if (!init.momenta.empty()) {
      Bindings rb;
      for (int a = 0; a < m; ++a)
        rb[rnames[static_cast<std::size_t>(a)]] =
            s.r[static_cast<std::size_t>(a)];
      std::vector<double> p;
      for (const auto& e : init.momenta) p.push_back(eval(e, rb));
      roots.push_back(std::move(p));
    } else if (system.canonical()) {
      // time-slice surface: tangential system closes over p2..pn, p1 = -E
      for (int a = 0; a < m; ++a)
        if (std::abs(s.dxdr[static_cast<std::size_t>(a)][0]) > 1e-12)
          throw SolverError(
              "HJ initial surface must be a time slice (x1 constant)");
      std::vector<std::vector<double>> M(
          static_cast<std::size_t>(m),
          std::vector<double>(static_cast<std::size_t>(m) + 1, 0.0));
      for (int a = 0; a < m; ++a) {
        for (int j = 0; j < m; ++j)
          M[static_cast<std::size_t>(a)][static_cast<std::size_t>(j)] =
              s.dxdr[static_cast<std::size_t>(a)][static_cast<std::size_t>(j) +
                                                  1];
        M[static_cast<std::size_t>(a)][static_cast<std::size_t>(m)] =
            s.du0dr[static_cast<std::size_t>(a)];
      }
      // solve M_sq p_space = rhs by elimination
      for (std::size_t c = 0; c < static_cast<std::size_t>(m); ++c) {
        std::size_t piv = c;
        for (std::size_t i = c + 1; i < static_cast<std::size_t>(m); ++i)
          if (std::abs(M[i][c]) > std::abs(M[piv][c])) piv = i;
        if (std::abs(M[piv][c]) < 1e-13)
          throw SolverError("degenerate initial surface parameterization");
        std::swap(M[piv], M[c]);
        for (std::size_t i = 0; i < static_cast<std::size_t>(m); ++i) {
          if (i == c) continue;
          double f = M[i][c] / M[c][c];
          for (std::size_t k = c; k <= static_cast<std::size_t>(m); ++k)
            M[i][k] -= f * M[c][k];
        }
      }
      std::vector<double> p(static_cast<std::size_t>(n), 0.0);
      for (int j = 0; j < m; ++j)
        p[static_cast<std::size_t>(j) + 1] =
            M[static_cast<std::size_t>(j)][static_cast<std::size_t>(m)] /
            M[static_cast<std::size_t>(j)][static_cast<std::size_t>(j)];
      StripState st{s.x, s.u0, p};
      p[0] = -system.hamiltonian_value(st);
      roots.push_back(std::move(p));
    } else {
      std::vector<double> p_part, nu;
      detail::tangential_decomposition(s.dxdr, s.du0dr, p_part, nu);
      std::vector<double> slots(static_cast<std::size_t>(2 * n + 1));
      auto Fof = [&](double alpha) {
        StripState st;
        st.x = s.x;
        st.u = s.u0;
        st.p.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
          st.p[static_cast<std::size_t>(i)] =
              p_part[static_cast<std::size_t>(i)] +
              alpha * nu[static_cast<std::size_t>(i)];
        return system.residual(st);
      };
      const int scan = 256;
      double lo = init.bracket_lo, hi = init.bracket_hi;
      double prev = Fof(lo);
      std::vector<double> alphas;
      for (int k = 1; k <= scan; ++k) {
        double a1 = lo + (hi - lo) * k / scan;
        double cur = Fof(a1);
        double a0 = lo + (hi - lo) * (k - 1) / scan;
        if (prev == 0.0) alphas.push_back(a0);
        if (std::isfinite(prev) && std::isfinite(cur) && prev * cur < 0.0) {
          // bisection to |F| < 1e-12
          double ga = prev, xa = a0, xb = a1;
          for (int it = 0; it < 200; ++it) {
            double xm = 0.5 * (xa + xb);
            double gm = Fof(xm);
            if (std::abs(gm) < 1e-12) {
              xa = xb = xm;
              break;
            }
            if (ga * gm < 0.0)
              xb = xm;
            else {
              xa = xm;
              ga = gm;
            }
          }
          alphas.push_back(0.5 * (xa + xb));
        }
        prev = cur;
      }
      if (prev == 0.0) alphas.push_back(hi);
      // dedup
      std::sort(alphas.begin(), alphas.end());
      alphas.erase(std::unique(alphas.begin(), alphas.end(),
                               [&](double a, double b) {
                                 return std::abs(a - b) <
                                        1e-9 * (hi - lo);
                               }),
                   alphas.end());
      for (double a : alphas) {
        std::vector<double> p(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
          p[static_cast<std::size_t>(i)] =
              p_part[static_cast<std::size_t>(i)] +
              a * nu[static_cast<std::size_t>(i)];
        roots.push_back(std::move(p));
      }
      if (roots.empty())
        throw SolverError("initial strip inconsistent: no real root of F = 0");
    }

    if (si == 0)
      branch_count = roots.size();
    else if (roots.size() != branch_count)
      throw SolverError(
          "inconsistent momentum branch count across initial samples");
  }

  std::vector<std::size_t> branch_ids;
  if (init.branch) {
    if (*init.branch < 0 || static_cast<std::size_t>(*init.branch) >= branch_count)
      throw SolverError("branch selector out of range");
    branch_ids.push_back(static_cast<std::size_t>(*init.branch));
  } else {
    for (std::size_t b = 0; b < branch_count; ++b) branch_ids.push_back(b);
  }

  std::vector<std::vector<InitialStrip>> branches;
  for (std::size_t b : branch_ids) {
    std::vector<InitialStrip> strips;
    strips.reserve(count);
    for (std::size_t si = 0; si < count; ++si) {
      const auto& s = samples[si];
      InitialStrip strip;
      strip.r = s.r;
      strip.x = s.x;
      strip.u = s.u0;
      strip.p = roots_per_sample[si][b];

      // transversality: det of tangent rows and the ray direction
      StripState st{strip.x, strip.u, strip.p};
      StripDerivatives d = system.rhs(st);
      std::vector<std::vector<double>> mtx;
      for (int a = 0; a < m; ++a)
        mtx.push_back(s.dxdr[static_cast<std::size_t>(a)]);
      mtx.push_back(d.dx);
      if (std::abs(detail::small_det(mtx)) < 1e-10)
        throw SolverError("characteristic initial manifold");
      strips.push_back(std::move(strip));
    }
    branches.push_back(std::move(strips));
  }
  return branches;
}

// ---------------------------------------------------------------------------
// Ray fan integration: fixed-step classical RK4, checkpoints every step.
// ---------------------------------------------------------------------------

struct RayCheckpoint {
  double s = 0.0;
  std::vector<double> x;
  double u = 0.0;
  std::vector<double> p;
  double jacobian = 0.0;
  double F_residual = 0.0;
};

struct Ray {
  std::vector<double> r;  // initial-parameter sample
  std::vector<RayCheckpoint> pts;
  int truncated_at = -1;  // checkpoint index of first invalid state, or -1
};

struct RayFan {
  int n = 0;
  bool canonical = false;
  double h = 0.0;
  int steps = 0;
  std::vector<int> param_counts;
  std::vector<double> param_spacing;
  std::vector<Ray> rays;
};

namespace detail {

inline void integrate_one_ray(const CharacteristicSystem& sys,
                              const InitialStrip& strip, double h, int steps,
                              Ray& ray) {
  const int n = sys.dimension();
  ray.r = strip.r;
  ray.pts.resize(static_cast<std::size_t>(steps + 1));
  StripState st{strip.x, strip.u, strip.p};

  auto record = [&](int m, const StripState& state) {
    RayCheckpoint& cp = ray.pts[static_cast<std::size_t>(m)];
    cp.s = h * m;
    cp.x = state.x;
    cp.u = state.u;
    cp.p = state.p;
    cp.F_residual = sys.residual(state);
    cp.jacobian = quiet_nan();
  };
  auto invalidate_from = [&](int m) {
    ray.truncated_at = m;
    for (int k = m; k <= steps; ++k) {
      RayCheckpoint& cp = ray.pts[static_cast<std::size_t>(k)];
      cp.s = h * k;
      cp.x.assign(static_cast<std::size_t>(n), quiet_nan());
      cp.u = quiet_nan();
      cp.p.assign(static_cast<std::size_t>(n), quiet_nan());
      cp.jacobian = quiet_nan();
      cp.F_residual = quiet_nan();
    }
  };

  record(0, st);
  auto axpy = [&](const StripState& base, double w,
                  const StripDerivatives& d) {
    StripState out = base;
    for (int i = 0; i < n; ++i) {
      out.x[static_cast<std::size_t>(i)] += w * d.dx[static_cast<std::size_t>(i)];
      out.p[static_cast<std::size_t>(i)] += w * d.dp[static_cast<std::size_t>(i)];
    }
    out.u += w * d.du;
    return out;
  };

  for (int m = 0; m < steps; ++m) {
    StripDerivatives k1 = sys.rhs(st);
    if (!k1.finite) {
      invalidate_from(m + 1);
      return;
    }
    StripDerivatives k2 = sys.rhs(axpy(st, 0.5 * h, k1));
    StripDerivatives k3 = sys.rhs(axpy(st, 0.5 * h, k2));
    StripDerivatives k4 = sys.rhs(axpy(st, h, k3));
    if (!k2.finite || !k3.finite || !k4.finite) {
      invalidate_from(m + 1);
      return;
    }
    for (int i = 0; i < n; ++i) {
      std::size_t ii = static_cast<std::size_t>(i);
      st.x[ii] += h / 6.0 * (k1.dx[ii] + 2.0 * k2.dx[ii] + 2.0 * k3.dx[ii] +
                             k4.dx[ii]);
      st.p[ii] += h / 6.0 * (k1.dp[ii] + 2.0 * k2.dp[ii] + 2.0 * k3.dp[ii] +
                             k4.dp[ii]);
    }
    st.u += h / 6.0 * (k1.du + 2.0 * k2.du + 2.0 * k3.du + k4.du);
    bool ok = std::isfinite(st.u);
    for (int i = 0; i < n && ok; ++i)
      if (!std::isfinite(st.x[static_cast<std::size_t>(i)]) ||
          !std::isfinite(st.p[static_cast<std::size_t>(i)]))
        ok = false;
    if (!ok) {
      invalidate_from(m + 1);
      return;
    }
    record(m + 1, st);
  }
}

// Ray-fan Jacobian det d(x)/d(r, s): tangential columns by finite differences
// across neighboring rays, the ray direction from the system RHS.
inline void fill_jacobians(const CharacteristicSystem& sys, RayFan& fan) {
  const int n = fan.n;
  const int m = static_cast<int>(fan.param_counts.size());
  const std::size_t nrays = fan.rays.size();

  auto ray_lin = [&](std::span<const int> idx) {
    std::size_t lin = 0;
    for (int a = 0; a < m; ++a)
      lin = lin * static_cast<std::size_t>(fan.param_counts[
                static_cast<std::size_t>(a)]) +
            static_cast<std::size_t>(idx[static_cast<std::size_t>(a)]);
    return lin;
  };

  for (std::size_t k = 0; k < nrays; ++k) {
    // unravel ray index over the parameter grid
    std::vector<int> idx(static_cast<std::size_t>(m));
    std::size_t rem = k;
    for (int a = m - 1; a >= 0; --a) {
      int c = fan.param_counts[static_cast<std::size_t>(a)];
      idx[static_cast<std::size_t>(a)] =
          static_cast<int>(rem % static_cast<std::size_t>(c));
      rem /= static_cast<std::size_t>(c);
    }
    Ray& ray = fan.rays[k];
    for (std::size_t cp = 0; cp < ray.pts.size(); ++cp) {
      RayCheckpoint& point = ray.pts[cp];
      if (std::isnan(point.u)) continue;
      std::vector<std::vector<double>> mtx;
      bool valid = true;
      for (int a = 0; a < m && valid; ++a) {
        int c = fan.param_counts[static_cast<std::size_t>(a)];
        double dr = fan.param_spacing[static_cast<std::size_t>(a)];
        int i = idx[static_cast<std::size_t>(a)];
        auto xat = [&](int j) -> const std::vector<double>* {
          std::vector<int> nb = idx;
          nb[static_cast<std::size_t>(a)] = j;
          const RayCheckpoint& q = fan.rays[ray_lin(nb)].pts[cp];
          return std::isnan(q.u) ? nullptr : &q.x;
        };
        std::vector<double> row(static_cast<std::size_t>(n));
        if (i > 0 && i < c - 1) {
          const auto* xm = xat(i - 1);
          const auto* xp = xat(i + 1);
          if (!xm || !xp) {
            valid = false;
            break;
          }
          for (int d = 0; d < n; ++d)
            row[static_cast<std::size_t>(d)] =
                ((*xp)[static_cast<std::size_t>(d)] -
                 (*xm)[static_cast<std::size_t>(d)]) /
                (2.0 * dr);
        } else if (c >= 3) {
          int sgn = (i == 0) ? 1 : -1;
          const auto* x0 = xat(i);
          const auto* x1 = xat(i + sgn);
          const auto* x2 = xat(i + 2 * sgn);
          if (!x0 || !x1 || !x2) {
            valid = false;
            break;
          }
          for (int d = 0; d < n; ++d)
            row[static_cast<std::size_t>(d)] =
                sgn *
                (-3.0 * (*x0)[static_cast<std::size_t>(d)] +
                 4.0 * (*x1)[static_cast<std::size_t>(d)] -
                 (*x2)[static_cast<std::size_t>(d)]) /
                (2.0 * dr);
        } else {
          const auto* x0 = xat(0);
          const auto* x1 = xat(1);
          if (!x0 || !x1) {
            valid = false;
            break;
          }
          for (int d = 0; d < n; ++d)
            row[static_cast<std::size_t>(d)] =
                ((*x1)[static_cast<std::size_t>(d)] -
                 (*x0)[static_cast<std::size_t>(d)]) /
                dr;
        }
        mtx.push_back(std::move(row));
      }
      if (!valid) continue;
      StripState st{point.x, point.u, point.p};
      StripDerivatives d = sys.rhs(st);
      if (!d.finite) continue;
      mtx.push_back(d.dx);
      point.jacobian = small_det(mtx);
    }
  }
}

}  // namespace detail

inline RayFan integrate(const CharacteristicSystem& system,
                        const std::vector<InitialStrip>& strips,
                        const InitialData& init, double h, double s_max,
                        int threads = 1) {
  if (!(h > 0.0) || !(s_max > 0.0))
    throw SolverError("step size and s_max must be positive");
  if (strips.empty()) throw SolverError("no initial strips");
  const int steps = static_cast<int>(std::llround(s_max / h));
  if (steps < 1) throw SolverError("s_max smaller than one step");

  RayFan fan;
  fan.n = system.dimension();
  fan.canonical = system.canonical();
  fan.h = h;
  fan.steps = steps;
  fan.param_counts = init.r_count;
  for (int a = 0; a < init.parameter_count(); ++a) {
    int c = init.r_count[static_cast<std::size_t>(a)];
    fan.param_spacing.push_back(
        c > 1 ? (init.r_max[static_cast<std::size_t>(a)] -
                 init.r_min[static_cast<std::size_t>(a)]) /
                    (c - 1)
              : 1.0);
  }
  fan.rays.resize(strips.size());

  auto worker = [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k)
      detail::integrate_one_ray(system, strips[k], h, steps, fan.rays[k]);
  };
  if (threads <= 1 || strips.size() < 2) {
    worker(0, strips.size());
  } else {
    std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(threads),
                                           strips.size());
    std::vector<std::thread> pool;
    std::size_t chunk = (strips.size() + nt - 1) / nt;
    for (std::size_t t = 0; t < nt; ++t) {
      std::size_t b = t * chunk;
      std::size_t e = std::min(strips.size(), b + chunk);
      if (b < e) pool.emplace_back(worker, b, e);
    }
    for (auto& th : pool) th.join();
  }

  // a ray survives if it produced at least one step of valid data
  bool any_survived = false;
  for (const Ray& r : fan.rays)
    if (r.truncated_at < 0 || r.truncated_at > 1) any_survived = true;
  if (!any_survived) throw SolverError("no rays survived integration");

  detail::fill_jacobians(system, fan);
  return fan;
}

// ---------------------------------------------------------------------------
// Caustic detection: Jacobian sign change or magnitude collapse.
// ---------------------------------------------------------------------------

struct CausticRecord {
  int ray = 0;
  double s_lo = 0.0;
  double s_hi = 0.0;
  double s_star = 0.0;
};

inline std::vector<CausticRecord> detect_caustics(const RayFan& fan,
                                                  double rel_floor = 1e-10) {
  if (fan.rays.size() < 3)
    throw SolverError("caustic detection needs at least 3 rays");
  std::vector<CausticRecord> records;
  for (std::size_t k = 0; k < fan.rays.size(); ++k) {
    const Ray& ray = fan.rays[k];
    double j0 = 0.0;
    bool have_j0 = false;
    double last_recorded = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m + 1 < ray.pts.size(); ++m) {
      double ja = ray.pts[m].jacobian;
      double jb = ray.pts[m + 1].jacobian;
      if (!std::isfinite(ja)) continue;
      if (!have_j0) {
        j0 = std::abs(ja);
        have_j0 = true;
      }
      if (std::isfinite(jb) && ja * jb < 0.0) {
        CausticRecord rec;
        rec.ray = static_cast<int>(k);
        rec.s_lo = ray.pts[m].s;
        rec.s_hi = ray.pts[m + 1].s;
        rec.s_star = rec.s_lo + (rec.s_hi - rec.s_lo) * ja / (ja - jb);
        records.push_back(rec);
        last_recorded = rec.s_star;
        continue;
      }
      // tangential degeneracy: magnitude collapse without a sign change
      if (have_j0 && std::abs(ja) < rel_floor * j0 &&
          ray.pts[m].s - last_recorded > 2.0 * fan.h) {
        CausticRecord rec;
        rec.ray = static_cast<int>(k);
        rec.s_lo = m > 0 ? ray.pts[m - 1].s : ray.pts[m].s;
        rec.s_hi = ray.pts[m + 1].s;
        rec.s_star = ray.pts[m].s;
        records.push_back(rec);
        last_recorded = rec.s_star;
      }
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Exports.
// ---------------------------------------------------------------------------

inline void write_fan_csv(const std::string& path, const RayFan& fan) {
  std::ofstream f(path);
  if (!f) throw SolverError("cannot open '" + path + "' for writing");
  f << "ray,s";
  for (int i = 1; i <= fan.n; ++i) f << ",x" << i;
  f << ",u";
  for (int i = 1; i <= fan.n; ++i) f << ",p" << i;
  f << ",jacobian,F_residual\n";
  for (std::size_t k = 0; k < fan.rays.size(); ++k) {
    for (const RayCheckpoint& cp : fan.rays[k].pts) {
      f << k << ',' << detail::format_double(cp.s);
      for (double v : cp.x) f << ',' << detail::format_double(v);
      f << ',' << detail::format_double(cp.u);
      for (double v : cp.p) f << ',' << detail::format_double(v);
      f << ',' << detail::format_double(cp.jacobian) << ','
        << detail::format_double(cp.F_residual) << '\n';
    }
  }
}

inline double max_abs_residual(const RayFan& fan) {
  double r = 0.0;
  for (const Ray& ray : fan.rays)
    for (const RayCheckpoint& cp : ray.pts)
      if (std::isfinite(cp.F_residual))
        r = std::max(r, std::abs(cp.F_residual));
  return r;
}

inline nlohmann::json caustics_json(const std::vector<CausticRecord>& recs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : recs)
    arr.push_back({{"ray", r.ray},
                   {"s_lo", r.s_lo},
                   {"s_hi", r.s_hi},
                   {"s_star", r.s_star}});
  return arr;
}

inline nlohmann::json fan_summary_json(
    const std::vector<RayFan>& fans,
    const std::vector<std::vector<CausticRecord>>& caustics) {
  nlohmann::json j;
  j["branch_count"] = fans.size();
  j["branches"] = nlohmann::json::array();
  nlohmann::json all_caustics = nlohmann::json::array();
  for (std::size_t b = 0; b < fans.size(); ++b) {
    const RayFan& fan = fans[b];
    int truncated = 0;
    for (const Ray& r : fan.rays)
      if (r.truncated_at >= 0) ++truncated;
    j["branches"].push_back({{"rays", fan.rays.size()},
                             {"steps", fan.steps},
                             {"h", fan.h},
                             {"truncated_rays", truncated},
                             {"max_abs_F_residual", max_abs_residual(fan)}});
    if (b < caustics.size())
      for (const auto& r : caustics[b]) {
        nlohmann::json rec = {{"branch", b},
                              {"ray", r.ray},
                              {"s_lo", r.s_lo},
                              {"s_hi", r.s_hi},
                              {"s_star", r.s_star}};
        all_caustics.push_back(rec);
      }
  }
  j["caustics"] = all_caustics;
  return j;
}

}  // namespace charform
