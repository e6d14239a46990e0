#pragma once

// Optical-pumping models: the per-cycle ESLAC Markov map, the adjacent-m_I
// rate model driven by Floquet aggregates, and a parametric readout model.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "nvspin/floquet.hpp"
#include "nvspin/parallel.hpp"
#include "nvspin/spectrum.hpp"
#include "nvspin/spin_core.hpp"

namespace nvspin {

struct OpticalCycleParams {
  double excitation_rate = 1.0;    ///< 1/us
  double es_lifetime = 0.012;      ///< us
  double singlet_branch_ms1 = 0.4; ///< ES m_s = +-1 -> singlet
  double singlet_branch_ms0 = 0.05;
  double singlet_to_ms0 = 1.0;
  double fluor_bright = 1.0; ///< photons per radiative cycle
  double fluor_dark = 0.0;   ///< photons per singlet cycle
  double dark_penalty_per_pass = 0.3;
  double dark_penalty_cap = 0.8;
  double nuclear_depol_per_cycle = 0.008; ///< relaxation toward uniform m_I per cycle

  void validate() const {
    auto prob = [](double p, const char *name) {
      require(std::isfinite(p) && p >= 0.0 && p <= 1.0,
              std::string("optical cycle: ") + name + " must lie in [0, 1]");
    };
    require(excitation_rate > 0.0, "optical cycle: excitation_rate must be > 0");
    require(es_lifetime > 0.0, "optical cycle: es_lifetime must be > 0");
    prob(singlet_branch_ms1, "singlet_branch_ms1");
    prob(singlet_branch_ms0, "singlet_branch_ms0");
    prob(singlet_to_ms0, "singlet_to_ms0");
    prob(nuclear_depol_per_cycle, "nuclear_depol_per_cycle");
    prob(dark_penalty_cap, "dark_penalty_cap");
    require(singlet_branch_ms1 > singlet_branch_ms0,
            "optical cycle: singlet_branch_ms1 must exceed singlet_branch_ms0");
    require(fluor_bright > 0.0 && fluor_dark >= 0.0 && fluor_dark <= fluor_bright,
            "optical cycle: need 0 <= fluor_dark <= fluor_bright, fluor_bright > 0");
    require(dark_penalty_per_pass >= 0.0, "optical cycle: dark_penalty_per_pass must be >= 0");
  }
};

struct PolarizationResult {
  std::vector<int> levels;         ///< 2 m_I, descending
  std::vector<double> populations; ///< per level
  double polarization = 0.0;       ///< P(max m_I) - P(min m_I)
  bool degenerate = false;         ///< steady state not unique; fallback used

  static double polarization_of(const std::vector<double> &pops) {
    return pops.empty() ? 0.0 : pops.front() - pops.back();
  }
};

inline std::vector<int> nuclear_levels(SpinQuantum spin) {
  std::vector<int> out;
  for (int m2 = spin.twice; m2 >= -spin.twice; m2 -= 2)
    out.push_back(m2);
  return out;
}

// ---------------------------------------------------------------------------
// ESLAC cycle

enum class FlipFlopBranch {
  Lower, ///< |0, m> <-> |-1, m + 1>
  Upper  ///< |0, m> <-> |+1, m - 1>
};

struct FlipFlopCoupling {
  double coupling = 0.0; ///< |V|, MHz
  double detuning = 0.0; ///< delta, MHz
  double probability = 0.0;
};

/// Per-cycle flip-flop probability for the ES pair selected by `branch`
/// starting from |0, m_I>: V^2/(V^2 + delta^2) times sin^2(pi W t) averaged over
/// an exponential ES lifetime, W = sqrt(V^2 + delta^2). V is read from the ES
/// Hamiltonian; delta comes from its secular (A_perp = 0) diagonal.
inline FlipFlopCoupling eslac_flip_flop_probability(const SpinSystemParams &params, double b0z,
                                                    int two_mI, double es_lifetime = 0.012,
                                                    FlipFlopBranch branch = FlipFlopBranch::Lower) {
  require(std::isfinite(b0z), "eslac_flip_flop_probability: B0z must be finite");
  require(es_lifetime > 0.0, "eslac_flip_flop_probability: es_lifetime must be > 0");
  const Vec3 b0(0.0, 0.0, b0z);
  const HamiltonianMatrix full = assemble_hamiltonian(params, Orbital::ES, b0);
  const HamiltonianMatrix secular =
      assemble_hamiltonian(params, Orbital::ES, b0, Hyperfine{params.A_par_es, 0.0});
  const BasisLabel from{0, two_mI};
  const BasisLabel to = branch == FlipFlopBranch::Lower ? BasisLabel{-1, two_mI + 2}
                                                        : BasisLabel{1, two_mI - 2};
  const auto a = find_label(full.labels, from), b = find_label(full.labels, to);
  if (!a || !b)
    throw InvalidArgument("eslac_flip_flop_probability: no flip-flop partner for " + from.str() +
                          " -> " + to.str());
  const auto ia = static_cast<Eigen::Index>(*a), ib = static_cast<Eigen::Index>(*b);
  FlipFlopCoupling out;
  out.coupling = std::abs(full.entries(ia, ib));
  out.detuning = secular.entries(ia, ia).real() - secular.entries(ib, ib).real();
  const double w2 = out.coupling * out.coupling + out.detuning * out.detuning;
  if (w2 == 0.0)
    return out;
  // <sin^2(pi W t)> over exp(-t/tau)/tau = x^2 / (2 (1 + x^2)), x = 2 pi W tau
  const double x = kTwoPi * std::sqrt(w2) * es_lifetime;
  out.probability = out.coupling * out.coupling / w2 * 0.5 * x * x / (1.0 + x * x);
  return out;
}

struct PumpOptions {
  double tol = 1e-13;              ///< max population change per cycle
  std::size_t max_cycles = 2000000;
  std::size_t n_readout_cycles = 100; ///< window for counting dark passes
  std::size_t trace_stride = 1;       ///< record every k-th cycle (0 disables)
  std::optional<std::vector<double>> initial; ///< full GS vector; uniform if absent
};

struct PumpResult {
  PolarizationResult steady;
  std::vector<double> gs_populations; ///< over the product basis
  std::vector<double> trace;          ///< polarization per recorded cycle
  std::vector<double> dark_passes;    ///< extra singlet passes per level vs the maximal level
  std::size_t cycles = 0;
};

// One optical cycle as a column-stochastic map on GS populations, plus the
// per-state singlet probability used for dark-pass counting.
struct OpticalCycleMap {
  RMatrix map;
  RVector singlet;
  std::vector<BasisLabel> labels;
};

inline OpticalCycleMap build_optical_cycle(const SpinSystemParams &params,
                                           const OpticalCycleParams &cycle, double b0z) {
  cycle.validate();
  const auto labels = product_basis(params.species.spin);
  const auto d = static_cast<Eigen::Index>(labels.size());
  auto idx = [&](int ms, int two_mI) {
    return static_cast<Eigen::Index>(*find_label(labels, {ms, two_mI}));
  };

  // excitation is spin-conserving, so ES populations start as a copy of GS
  RMatrix m = RMatrix::Identity(d, d);
  for (const int two_mI : nuclear_levels(params.species.spin)) {
    for (const auto branch : {FlipFlopBranch::Lower, FlipFlopBranch::Upper}) {
      const int partner = branch == FlipFlopBranch::Lower ? two_mI + 2 : two_mI - 2;
      if (std::abs(partner) > params.species.spin.twice)
        continue;
      const double p =
          eslac_flip_flop_probability(params, b0z, two_mI, cycle.es_lifetime, branch).probability;
      const Eigen::Index a = idx(0, two_mI);
      const Eigen::Index b = idx(branch == FlipFlopBranch::Lower ? -1 : 1, partner);
      RMatrix t = RMatrix::Identity(d, d);
      t(a, a) = t(b, b) = 1.0 - p;
      t(a, b) = t(b, a) = p;
      m = t * m;
    }
  }

  RMatrix decay = RMatrix::Zero(d, d);
  RVector singlet(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto [ms, two_mI] = labels[static_cast<std::size_t>(j)];
    const double br = ms == 0 ? cycle.singlet_branch_ms0 : cycle.singlet_branch_ms1;
    singlet[j] = br;
    decay(j, j) += 1.0 - br;
    decay(idx(0, two_mI), j) += br * cycle.singlet_to_ms0;
    decay(idx(1, two_mI), j) += br * (1.0 - cycle.singlet_to_ms0) / 2.0;
    decay(idx(-1, two_mI), j) += br * (1.0 - cycle.singlet_to_ms0) / 2.0;
  }

  const double dep = cycle.nuclear_depol_per_cycle;
  const auto n = static_cast<double>(params.species.spin.dim());
  RMatrix relax = (1.0 - dep) * RMatrix::Identity(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      if (labels[static_cast<std::size_t>(i)].ms == labels[static_cast<std::size_t>(j)].ms)
        relax(i, j) += dep / n;

  // singlet probability is taken after the ES exchange, i.e. on m * p
  RVector singlet_after = (singlet.transpose() * m).transpose();
  return {relax * decay * m, singlet_after, labels};
}

/// Expected singlet passes over `n_cycles` optical cycles starting from each
/// GS basis state, minus the count from |0, max m_I>. Clamped at zero.
inline std::vector<double> state_dark_passes(const OpticalCycleMap &cm, std::size_t n_cycles) {
  const Eigen::Index d = cm.map.rows();
  // row vector c^T accumulates sum_k singlet^T M^k
  RVector acc = RVector::Zero(d), row = cm.singlet;
  const RMatrix mt = cm.map.transpose();
  for (std::size_t c = 0; c < n_cycles; ++c) {
    acc += row;
    row = mt * row;
  }
  int top = -1000;
  for (const auto &l : cm.labels)
    top = std::max(top, l.two_mI);
  const double ref = acc[static_cast<Eigen::Index>(*find_label(cm.labels, {0, top}))];
  std::vector<double> out;
  for (Eigen::Index i = 0; i < d; ++i)
    out.push_back(std::max(0.0, acc[i] - ref));
  return out;
}

inline PolarizationResult nuclear_marginal(const std::vector<BasisLabel> &labels,
                                           const RVector &gs, SpinQuantum spin) {
  PolarizationResult r;
  r.levels = nuclear_levels(spin);
  r.populations.assign(r.levels.size(), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t k = 0; k < r.levels.size(); ++k)
      if (labels[i].two_mI == r.levels[k])
        r.populations[k] += gs[static_cast<Eigen::Index>(i)];
  r.polarization = PolarizationResult::polarization_of(r.populations);
  return r;
}

/// Iterates the optical cycle map to its fixed point.
inline PumpResult pump_to_steady_state(const SpinSystemParams &params,
                                       const OpticalCycleParams &cycle, double b0z,
                                       const PumpOptions &opt = {}) {
  require(opt.tol > 0.0, "pump_to_steady_state: tol must be > 0");
  const OpticalCycleMap cm = build_optical_cycle(params, cycle, b0z);
  const Eigen::Index d = cm.map.rows();
  RVector x;
  if (opt.initial) {
    require(static_cast<Eigen::Index>(opt.initial->size()) == d,
            "pump_to_steady_state: initial vector has wrong length");
    x = Eigen::Map<const RVector>(opt.initial->data(), d);
    require((x.array() >= 0.0).all() && std::abs(x.sum() - 1.0) < 1e-9,
            "pump_to_steady_state: initial vector must be a probability distribution");
  } else {
    x = RVector::Constant(d, 1.0 / static_cast<double>(d));
  }

  PumpResult out;
  const auto spin = params.species.spin;
  bool converged = false;
  for (std::size_t c = 1; c <= opt.max_cycles; ++c) {
    RVector next = cm.map * x;
    next /= next.sum();
    const double change = (next - x).cwiseAbs().maxCoeff();
    x = std::move(next);
    if (opt.trace_stride > 0 && c % opt.trace_stride == 0)
      out.trace.push_back(nuclear_marginal(cm.labels, x, spin).polarization);
    if (change < opt.tol) {
      out.cycles = c;
      converged = true;
      break;
    }
  }
  if (!converged)
    throw ConvergenceError("pump_to_steady_state: no fixed point within " +
                           std::to_string(opt.max_cycles) + " cycles");
  out.steady = nuclear_marginal(cm.labels, x, spin);
  out.gs_populations.assign(x.data(), x.data() + d);

  // Extra singlet passes relative to the maximal-m_I level, per |0, m_I>.
  const auto all = state_dark_passes(cm, opt.n_readout_cycles);
  for (const int two_mI : nuclear_levels(spin))
    out.dark_passes.push_back(all[*find_label(cm.labels, {0, two_mI})]);
  return out;
}

/// Readout signal relative to a fully polarized (zero extra dark passes)
/// reference: sum_m pop(m) [1 - penalty(passes(m))], penalty = min(c passes, cap)
/// scaled by the bright/dark photon contrast.
inline double fluorescence_signal(const std::vector<double> &populations,
                                  const std::vector<double> &dark_passes,
                                  const OpticalCycleParams &cycle) {
  cycle.validate();
  require(populations.size() == dark_passes.size(),
          "fluorescence_signal: populations and dark passes differ in length");
  const double contrast = (cycle.fluor_bright - cycle.fluor_dark) / cycle.fluor_bright;
  double signal = 0.0;
  for (std::size_t k = 0; k < populations.size(); ++k) {
    require(populations[k] >= 0.0 && dark_passes[k] >= 0.0,
            "fluorescence_signal: negative population or pass count");
    const double penalty =
        std::min(cycle.dark_penalty_per_pass * dark_passes[k], cycle.dark_penalty_cap);
    signal += populations[k] * (1.0 - contrast * penalty);
  }
  return signal;
}

/// Per-basis-state fluorescence weights 1 - contrast * penalty(passes), for
/// use as a linear readout observable.
inline std::vector<double> fluorescence_weights(const std::vector<double> &passes,
                                                const OpticalCycleParams &cycle) {
  cycle.validate();
  const double contrast = (cycle.fluor_bright - cycle.fluor_dark) / cycle.fluor_bright;
  std::vector<double> w;
  for (double p : passes)
    w.push_back(1.0 - contrast * std::min(cycle.dark_penalty_per_pass * p, cycle.dark_penalty_cap));
  return w;
}

// ---------------------------------------------------------------------------
// Rate model

/// Continuous-time chain over nuclear levels. generator(j, i) is the rate
/// i -> j for i != j; diagonals make every column sum to zero.
struct RateModel {
  std::vector<int> levels; ///< 2 m_I, descending
  RMatrix generator;

  static RateModel from_rates(std::vector<int> levels, const RMatrix &rates) {
    const auto n = static_cast<Eigen::Index>(levels.size());
    if (rates.rows() != n || rates.cols() != n)
      throw DimensionError("rate model: rate matrix does not match the level count");
    RateModel m{std::move(levels), RMatrix::Zero(n, n)};
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j)
          continue;
        require(std::isfinite(rates(j, i)) && rates(j, i) >= 0.0, "rate model: rates must be >= 0");
        m.generator(j, i) = rates(j, i);
        m.generator(i, i) -= rates(j, i);
      }
    return m;
  }
};

/// Null vector of the generator. GTH elimination for irreducible chains; SVD
/// null space otherwise, flagged when it is not one-dimensional.
inline PolarizationResult solve_steady_state(const RateModel &model) {
  const RMatrix &q = model.generator;
  const Eigen::Index n = q.rows();
  require(n >= 1, "rate model: no levels");
  PolarizationResult r;
  r.levels = model.levels;

  // off-diagonal rates in row-stochastic orientation: a(i, j) = rate i -> j
  RMatrix a = q.transpose();
  const double scale = std::max(1e-300, q.cwiseAbs().maxCoeff());
  bool ok = n == 1;
  if (q.cwiseAbs().maxCoeff() == 0.0) {
    r.populations.assign(static_cast<std::size_t>(n), 1.0 / static_cast<double>(n));
    r.polarization = PolarizationResult::polarization_of(r.populations);
    r.degenerate = n > 1;
    return r;
  }
  RVector pi(n);
  if (n > 1) {
    ok = true;
    for (Eigen::Index k = n - 1; k > 0; --k) {
      double s = 0.0;
      for (Eigen::Index j = 0; j < k; ++j)
        s += a(k, j);
      if (s <= 1e-14 * scale) {
        ok = false;
        break;
      }
      for (Eigen::Index i = 0; i < k; ++i)
        a(i, k) /= s;
      for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j < k; ++j)
          if (i != j)
            a(i, j) += a(i, k) * a(k, j);
    }
    if (ok) {
      pi[0] = 1.0;
      for (Eigen::Index k = 1; k < n; ++k) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < k; ++i)
          s += pi[i] * a(i, k);
        pi[k] = s;
      }
    }
  } else {
    pi[0] = 1.0;
  }
  if (!ok) {
    Eigen::JacobiSVD<RMatrix> svd(q, Eigen::ComputeFullV);
    const RVector sv = svd.singularValues();
    pi = svd.matrixV().col(n - 1).cwiseAbs();
    r.degenerate = n > 1 && sv[n - 2] <= 1e-12 * scale;
  }
  pi /= pi.sum();
  r.populations.assign(pi.data(), pi.data() + n);
  r.polarization = PolarizationResult::polarization_of(r.populations);
  return r;
}

/// Floquet aggregates for one adjacent pair (m, m + 1) out of m_s = 0.
struct PairAggregates {
  double up_intra = 0.0;   ///< (0, m) -> (0, m + 1)
  double up_inter = 0.0;   ///< (0, m) -> (+-1, m + 1)
  double down_intra = 0.0; ///< (0, m + 1) -> (0, m)
  double down_inter = 0.0; ///< (0, m + 1) -> (+-1, m)
};

struct RateParams {
  double gamma = 2.5;  ///< intra-manifold excitation rate, units of Gamma
  double Gamma = 1.0;  ///< inter-manifold excitation rate
  double k_eq = 1e-5;  ///< pairwise depolarization rate

  void validate() const {
    require(std::isfinite(gamma) && std::isfinite(Gamma) && std::isfinite(k_eq),
            "rates must be finite");
    require(gamma >= 0.0 && Gamma >= 0.0 && k_eq >= 0.0, "rates must be >= 0");
  }
};

/// Pair aggregates ordered from the lowest m_I pair upward.
inline std::vector<PairAggregates> pair_aggregates(const TransitionProbabilityTable &t,
                                                   SpinQuantum spin) {
  require(!t.labels.empty(), "pair_aggregates: table has no basis labels");
  std::vector<PairAggregates> out;
  auto get = [&](BasisLabel a, BasisLabel b) {
    const auto i = find_label(t.labels, a), j = find_label(t.labels, b);
    return i && j ? t.probs(static_cast<Eigen::Index>(*i), static_cast<Eigen::Index>(*j)) : 0.0;
  };
  for (int m2 = -spin.twice; m2 < spin.twice; m2 += 2) {
    PairAggregates p;
    p.up_intra = get({0, m2}, {0, m2 + 2});
    p.up_inter = get({0, m2}, {1, m2 + 2}) + get({0, m2}, {-1, m2 + 2});
    p.down_intra = get({0, m2 + 2}, {0, m2});
    p.down_inter = get({0, m2 + 2}, {1, m2}) + get({0, m2 + 2}, {-1, m2});
    out.push_back(p);
  }
  return out;
}

/// Rate model with up/down rates Gamma P(inter) + gamma P(intra) per adjacent
/// pair and symmetric k_eq between every pair of levels.
inline RateModel build_rate_model(const std::vector<PairAggregates> &pairs, const RateParams &rates) {
  rates.validate();
  const auto n = static_cast<Eigen::Index>(pairs.size() + 1);
  std::vector<int> levels;
  for (Eigen::Index k = 0; k < n; ++k)
    levels.push_back(static_cast<int>(n - 1 - 2 * k));
  // level index 0 is the maximal m_I; pair p joins indices n-1-p (lower) and n-2-p (upper)
  RMatrix r = RMatrix::Constant(n, n, rates.k_eq);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto lo = n - 1 - static_cast<Eigen::Index>(p), hi = lo - 1;
    const auto &g = pairs[p];
    require(g.up_intra >= 0.0 && g.up_inter >= 0.0 && g.down_intra >= 0.0 && g.down_inter >= 0.0,
            "rate model: aggregates must be >= 0");
    r(hi, lo) += rates.Gamma * g.up_inter + rates.gamma * g.up_intra;
    r(lo, hi) += rates.Gamma * g.down_inter + rates.gamma * g.down_intra;
  }
  return RateModel::from_rates(std::move(levels), r);
}

inline PolarizationResult equilibrium_polarization(const std::vector<PairAggregates> &pairs,
                                                   const RateParams &rates) {
  return solve_steady_state(build_rate_model(pairs, rates));
}

/// Equilibrium polarization versus ES drive frequency. Columns: polarization
/// (y), pos_prob, neg_prob, flagged.
inline Spectrum polarization_spectrum(const SpinSystemParams &params, const Vec3 &B0,
                                      const Vec3 &B1, const std::vector<double> &freq_grid,
                                      const RateParams &rates, FloquetConfig cfg = {}) {
  require_ascending(freq_grid, "polarization_spectrum");
  rates.validate();
  const HamiltonianMatrix h0 = assemble_hamiltonian(params, Orbital::ES, B0);
  const CMatrix v = drive_coupling(params, B1);
  const auto spin = params.species.spin;
  cfg.allow_unconverged = true;
  struct Row {
    double pol = 0, pos = 0, neg = 0;
    bool flagged = false;
  };
  auto rows = parallel_map(freq_grid.size(), [&](std::size_t i) {
    const auto t = avg_transition_probabilities(h0.entries, v, freq_grid[i], cfg, h0.labels);
    const auto res = equilibrium_polarization(pair_aggregates(t, spin), rates);
    return Row{res.polarization, aggregate_probability(t, Aggregation::Positive),
               aggregate_probability(t, Aggregation::Negative),
               t.ambiguous || !t.converged || res.degenerate};
  });
  Spectrum s;
  s.x = freq_grid;
  s.x_unit = "freq_MHz";
  s.y_unit = "polarization";
  std::vector<double> pos, neg, flag;
  for (const auto &r : rows) {
    s.y.push_back(r.pol);
    pos.push_back(r.pos);
    neg.push_back(r.neg);
    flag.push_back(r.flagged ? 1.0 : 0.0);
  }
  s.extra = {{"pos_prob", pos}, {"neg_prob", neg}, {"flagged", flag}};
  s.meta["rate_convention"] = "product: rate = Gamma*P_inter + gamma*P_intra";
  s.meta["gamma_over_Gamma"] = std::to_string(rates.Gamma > 0 ? rates.gamma / rates.Gamma : 0.0);
  return s;
}

} // namespace nvspin
