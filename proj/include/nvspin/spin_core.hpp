#pragma once

// Spin operators, NV + nuclear spin Hamiltonians, diagonalization, transition
// catalogs and the excited-state level anticrossing.
//
// Units: energies in MHz (ordinary frequency), fields in Gauss, times in us.
// Product basis ordering: m_s in {+1, 0, -1} (outer) x m_I descending (inner).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <boost/math/tools/roots.hpp>

#include "nvspin/types.hpp"

namespace nvspin {

// Spin quantum number stored as 2S so half-integers stay exact.
struct SpinQuantum {
  int twice = 2;

  static constexpr SpinQuantum half() { return {1}; }
  static constexpr SpinQuantum one() { return {2}; }

  constexpr double value() const { return twice / 2.0; }
  constexpr int dim() const { return twice + 1; }
  constexpr bool operator==(const SpinQuantum &) const = default;
};

enum class Species { C13, N15, N14 };
enum class Orbital { GS, ES };

inline std::string_view to_string(Species s) {
  switch (s) {
  case Species::C13:
    return "C13";
  case Species::N15:
    return "N15";
  case Species::N14:
    return "N14";
  }
  return "?";
}

inline std::optional<Species> parse_species(std::string_view name) {
  if (name == "C13")
    return Species::C13;
  if (name == "N15")
    return Species::N15;
  if (name == "N14")
    return Species::N14;
  return std::nullopt;
}

inline std::string_view to_string(Orbital o) { return o == Orbital::GS ? "GS" : "ES"; }

struct NuclearSpecies {
  Species id = Species::N14;
  SpinQuantum spin = SpinQuantum::one();
  double gamma_n = 3.077e-4; ///< MHz/G, signed; enters as -gamma_n B.I

  static NuclearSpecies of(Species s) {
    switch (s) {
    case Species::C13:
      return {s, SpinQuantum::half(), 1.0705e-3};
    case Species::N15:
      return {s, SpinQuantum::half(), -4.316e-4};
    case Species::N14:
      break;
    }
    return {Species::N14, SpinQuantum::one(), 3.077e-4};
  }
};

// Axially symmetric hyperfine tensor about the NV axis. Contact interaction
// is the special case a_par == a_perp.
struct Hyperfine {
  double a_par = 0.0;
  double a_perp = 0.0;

  static Hyperfine axial(double par, double perp) { return {par, perp}; }
  static Hyperfine contact(double a) { return {a, a}; }
};

struct SpinSystemParams {
  NuclearSpecies species;
  double zfs_gs = 2870.0; ///< Delta, MHz
  double zfs_es = 1420.0; ///< D, MHz
  double gamma_e = 2.799; ///< g mu_B, MHz/G
  double A_par_gs = 0.0;
  double A_perp_gs = 0.0;
  double A_par_es = 0.0;
  double A_perp_es = 0.0;
  double quad_P_gs = 0.0;
  double quad_P_es = 0.0;

  // Per-species defaults. GS A_perp is left at zero for every species: it is
  // a fit or user-supplied quantity.
  static SpinSystemParams defaults(Species s) {
    SpinSystemParams p;
    p.species = NuclearSpecies::of(s);
    p.A_par_es = p.A_perp_es = 50.0;
    switch (s) {
    case Species::N14:
      p.A_par_gs = -2.162;
      p.quad_P_gs = -4.945;
      p.quad_P_es = 5.0;
      break;
    case Species::N15:
      p.A_par_gs = 3.03;
      break;
    case Species::C13:
      p.A_par_gs = 13.0;
      break;
    }
    return p;
  }

  double zfs(Orbital o) const { return o == Orbital::GS ? zfs_gs : zfs_es; }
  double quad(Orbital o) const { return o == Orbital::GS ? quad_P_gs : quad_P_es; }
  Hyperfine hyperfine(Orbital o) const {
    return o == Orbital::GS ? Hyperfine{A_par_gs, A_perp_gs} : Hyperfine{A_par_es, A_perp_es};
  }

  void validate() const {
    const double vals[] = {zfs_gs,    zfs_es,    gamma_e,   A_par_gs,  A_perp_gs,
                           A_par_es,  A_perp_es, quad_P_gs, quad_P_es, species.gamma_n};
    for (double v : vals)
      require(std::isfinite(v), "spin system parameters must be finite");
    require(zfs_gs > 0.0 && zfs_es > 0.0, "zero-field splittings must be positive");
    require(species.spin.twice == 1 || species.spin.twice == 2, "nuclear spin must be 1/2 or 1");
    if (species.spin.twice == 1)
      require(quad_P_gs == 0.0 && quad_P_es == 0.0, "quadrupole splitting requires I = 1");
  }
};

struct FieldConfig {
  Vec3 B0 = Vec3::Zero();
  Vec3 B1 = Vec3::Zero();
  double drive_freq = 0.0;

  void validate() const {
    require(all_finite(B0) && all_finite(B1) && std::isfinite(drive_freq),
            "field components must be finite");
    require(drive_freq >= 0.0, "drive frequency must be non-negative");
  }
};

struct BasisLabel {
  int ms = 0;
  int two_mI = 0;

  double mI() const { return two_mI / 2.0; }
  bool operator==(const BasisLabel &) const = default;

  std::string str() const {
    auto signed_str = [](int v) { return (v > 0 ? "+" : "") + std::to_string(v); };
    std::string n = (two_mI % 2 == 0) ? signed_str(two_mI / 2) : signed_str(two_mI) + "/2";
    return "(" + signed_str(ms) + "," + n + ")";
  }
};

inline std::vector<BasisLabel> product_basis(SpinQuantum nuclear) {
  std::vector<BasisLabel> out;
  for (int ms : {1, 0, -1})
    for (int m2 = nuclear.twice; m2 >= -nuclear.twice; m2 -= 2)
      out.push_back({ms, m2});
  return out;
}

inline std::optional<std::size_t> find_label(const std::vector<BasisLabel> &labels,
                                             BasisLabel want) {
  auto it = std::find(labels.begin(), labels.end(), want);
  if (it == labels.end())
    return std::nullopt;
  return static_cast<std::size_t>(it - labels.begin());
}

struct HamiltonianMatrix {
  CMatrix entries;
  std::vector<BasisLabel> labels; ///< empty for generic (non-spin) matrices

  Eigen::Index dim() const { return entries.rows(); }
};

struct EigenSystem {
  RVector values; ///< ascending
  CMatrix vectors; ///< column k pairs with values[k]
  std::vector<BasisLabel> labels;

  Eigen::Index dim() const { return values.size(); }

  // Bare basis index with the largest weight in eigenvector k, and that weight.
  std::pair<Eigen::Index, double> dominant(Eigen::Index k) const {
    Eigen::Index best = 0;
    double w = vectors.col(k).cwiseAbs2().maxCoeff(&best);
    return {best, w};
  }
};

struct SpinMatrices {
  CMatrix x, y, z;
};

/// Angular-momentum matrices in the |m> basis, m descending.
inline SpinMatrices build_spin_operators(SpinQuantum spin) {
  if (spin.twice != 1 && spin.twice != 2)
    throw InvalidArgument("unsupported spin value " + std::to_string(spin.value()));
  const int d = spin.dim();
  const double s = spin.value();
  CMatrix raise = CMatrix::Zero(d, d);
  CMatrix z = CMatrix::Zero(d, d);
  for (int i = 0; i < d; ++i) {
    double m = s - i;
    z(i, i) = m;
    if (i > 0)
      raise(i - 1, i) = std::sqrt(s * (s + 1) - m * (m + 1));
  }
  CMatrix lower = raise.adjoint();
  return {(raise + lower) / 2.0, (raise - lower) / cplx(0.0, 2.0), z};
}

inline CMatrix kron(const CMatrix &a, const CMatrix &b) {
  CMatrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Electron (S = 1) and nuclear operators embedded in the product space.
struct ProductOperators {
  CMatrix Sx, Sy, Sz, Ix, Iy, Iz;

  explicit ProductOperators(SpinQuantum nuclear) {
    const auto s = build_spin_operators(SpinQuantum::one());
    const auto i = build_spin_operators(nuclear);
    const CMatrix es = CMatrix::Identity(3, 3);
    const CMatrix en = CMatrix::Identity(nuclear.dim(), nuclear.dim());
    Sx = kron(s.x, en);
    Sy = kron(s.y, en);
    Sz = kron(s.z, en);
    Ix = kron(es, i.x);
    Iy = kron(es, i.y);
    Iz = kron(es, i.z);
  }

  // B.(gamma_e S - gamma_n I)
  CMatrix zeeman(const Vec3 &B, double gamma_e, double gamma_n) const {
    return gamma_e * (B.x() * Sx + B.y() * Sy + B.z() * Sz) -
           gamma_n * (B.x() * Ix + B.y() * Iy + B.z() * Iz);
  }
};

/// Static Hamiltonian of one orbital state:
/// ZFS Sz^2 + P Iz^2 + B0.(gamma_e S - gamma_n I) + A_par Sz Iz + A_perp (Sx Ix + Sy Iy).
/// `hyperfine` overrides the params' tensor for that orbital (e.g. contact mode).
inline HamiltonianMatrix assemble_hamiltonian(const SpinSystemParams &params, Orbital orbital,
                                              const Vec3 &B0,
                                              std::optional<Hyperfine> hyperfine = std::nullopt) {
  params.validate();
  if (!all_finite(B0))
    throw InvalidArgument("static field has non-finite components");
  const auto spin = params.species.spin;
  const ProductOperators op(spin);
  const Hyperfine hf = hyperfine.value_or(params.hyperfine(orbital));
  CMatrix h = params.zfs(orbital) * op.Sz * op.Sz + params.quad(orbital) * op.Iz * op.Iz +
              op.zeeman(B0, params.gamma_e, params.species.gamma_n) +
              hf.a_par * op.Sz * op.Iz + hf.a_perp * (op.Sx * op.Ix + op.Sy * op.Iy);
  return {std::move(h), product_basis(spin)};
}

/// Drive operator multiplying cos(2 pi f t): B1.(gamma_e S - gamma_n I).
inline CMatrix drive_coupling(const SpinSystemParams &params, const Vec3 &B1) {
  if (!all_finite(B1))
    throw InvalidArgument("drive field has non-finite components");
  return ProductOperators(params.species.spin).zeeman(B1, params.gamma_e, params.species.gamma_n);
}

inline bool is_hermitian(const CMatrix &m, double rel_tol = 1e-12) {
  if (m.rows() != m.cols())
    return false;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return (m - m.adjoint()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

// Rotates each column so its largest-magnitude component is real and
// positive. Ties resolve to the lowest index.
inline void fix_phases(CMatrix &vectors) {
  for (Eigen::Index k = 0; k < vectors.cols(); ++k) {
    Eigen::Index best = 0;
    double best_mag = -1.0;
    for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
      double mag = std::abs(vectors(i, k));
      if (mag > best_mag * (1.0 + 1e-12) + 1e-300) {
        best_mag = mag;
        best = i;
      }
    }
    if (best_mag > 0.0)
      vectors.col(k) *= std::conj(vectors(best, k)) / best_mag;
  }
}

inline EigenSystem eigensolve(const CMatrix &h, std::vector<BasisLabel> labels = {}) {
  if (!is_hermitian(h))
    throw InvalidArgument("eigensolve: matrix is not Hermitian");
  Eigen::SelfAdjointEigenSolver<CMatrix> solver(h);
  if (solver.info() != Eigen::Success)
    throw ConvergenceError("eigensolve: Hermitian eigensolver failed");
  EigenSystem es{solver.eigenvalues(), solver.eigenvectors(), std::move(labels)};
  fix_phases(es.vectors);
  return es;
}

inline EigenSystem eigensolve(const HamiltonianMatrix &h) { return eigensolve(h.entries, h.labels); }

struct Transition {
  double freq = 0.0;     ///< MHz, upper - lower
  double strength = 0.0; ///< |<f|V|i>|^2
  Eigen::Index lower = 0, upper = 0;
  std::optional<BasisLabel> lower_label, upper_label;
};

/// All eigenstate pairs with positive splitting and |<f|V|i>|^2 above `floor`,
/// sorted by frequency. Labels come from the dominant bare component.
inline std::vector<Transition> transition_catalog(const EigenSystem &es, const CMatrix &coupling,
                                                  double floor = 1e-10) {
  if (coupling.rows() != es.dim() || coupling.cols() != es.dim())
    throw DimensionError("transition_catalog: coupling dimension mismatch");
  const CMatrix m = es.vectors.adjoint() * coupling * es.vectors;
  std::vector<Transition> out;
  for (Eigen::Index i = 0; i < es.dim(); ++i) {
    for (Eigen::Index f = i + 1; f < es.dim(); ++f) {
      const double freq = es.values[f] - es.values[i];
      const double strength = std::norm(m(f, i));
      if (freq <= 0.0 || strength <= floor)
        continue;
      Transition t{freq, strength, i, f, std::nullopt, std::nullopt};
      if (!es.labels.empty()) {
        t.lower_label = es.labels[es.dominant(i).first];
        t.upper_label = es.labels[es.dominant(f).first];
      }
      out.push_back(t);
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Transition &a, const Transition &b) { return a.freq < b.freq; });
  return out;
}

// Weighted centroid of the eigenvalues over the bare m_s = ms subspace:
// sum_k |P_ms v_k|^2 lambda_k / sum_k |P_ms v_k|^2.
inline double manifold_centroid(const EigenSystem &es, int ms) {
  double num = 0.0, den = 0.0;
  for (Eigen::Index k = 0; k < es.dim(); ++k) {
    double w = 0.0;
    for (std::size_t i = 0; i < es.labels.size(); ++i)
      if (es.labels[i].ms == ms)
        w += std::norm(es.vectors(static_cast<Eigen::Index>(i), k));
    num += w * es.values[k];
    den += w;
  }
  return num / den;
}

/// Axial field at the center of the ES m_s = 0 / m_s = -1 anticrossing: the
/// root of the centroid splitting between the two electron manifolds. Searched
/// in [lo, hi] Gauss.
inline double eslac_field(const SpinSystemParams &params, double lo = 0.0, double hi = 1000.0) {
  params.validate();
  auto gap = [&](double bz) {
    const auto es = eigensolve(assemble_hamiltonian(params, Orbital::ES, Vec3(0, 0, bz)));
    return manifold_centroid(es, -1) - manifold_centroid(es, 0);
  };
  const double f_lo = gap(lo), f_hi = gap(hi);
  if (!(f_lo * f_hi <= 0.0))
    throw ConvergenceError("eslac_field: no m_s=0/-1 crossing between " + std::to_string(lo) +
                           " and " + std::to_string(hi) + " G");
  if (f_lo == 0.0)
    return lo;
  if (f_hi == 0.0)
    return hi;
  std::uintmax_t iters = 200;
  auto [a, b] = boost::math::tools::toms748_solve(
      gap, lo, hi, f_lo, f_hi, boost::math::tools::eps_tolerance<double>(50), iters);
  return 0.5 * (a + b);
}

} // namespace nvspin
