#pragma once

// Shirley-Floquet treatment of a monochromatically driven spin system:
// the photon-number-extended Hamiltonian and long-time-averaged transition
// probabilities between H0 eigenstates.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "nvspin/parallel.hpp"
#include "nvspin/spectrum.hpp"
#include "nvspin/spin_core.hpp"

namespace nvspin {

struct FloquetConfig {
  int n_max = 8;                 ///< photon blocks -n_max..+n_max
  double convergence_tol = 1e-6; ///< max entrywise change between n_max and n_max + 2
  bool escalate = true;          ///< double n_max until converged
  int n_cap = 64;
  bool allow_unconverged = false; ///< return the last table instead of throwing

  void validate() const {
    require(n_max >= 1, "floquet: n_max must be >= 1");
    require(convergence_tol > 0.0, "floquet: convergence tolerance must be > 0");
    require(n_cap >= n_max, "floquet: n_cap must be >= n_max");
  }
};

/// Block-tridiagonal Floquet matrix: diagonal blocks H0 + n f 1, off-diagonal
/// blocks V/2, blocks ordered n = -n_max..+n_max.
inline CMatrix build_floquet_matrix(const CMatrix &h0, const CMatrix &v, double freq, int n_max) {
  if (h0.rows() != h0.cols() || v.rows() != h0.rows() || v.cols() != h0.cols())
    throw DimensionError("floquet: H0 and V dimensions disagree");
  require(freq > 0.0, "floquet: drive frequency must be > 0");
  require(n_max >= 1, "floquet: n_max must be >= 1");
  const Eigen::Index d = h0.rows();
  const Eigen::Index blocks = 2 * n_max + 1;
  CMatrix f = CMatrix::Zero(d * blocks, d * blocks);
  for (Eigen::Index b = 0; b < blocks; ++b) {
    const double n = static_cast<double>(b - n_max);
    f.block(b * d, b * d, d, d) = h0 + n * freq * CMatrix::Identity(d, d);
    if (b + 1 < blocks) {
      f.block(b * d, (b + 1) * d, d, d) = 0.5 * v;
      f.block((b + 1) * d, b * d, d, d) = 0.5 * v.adjoint();
    }
  }
  return f;
}

struct TransitionProbabilityTable {
  RMatrix probs; ///< probs(a, b): averaged probability a -> b, indexed like `labels`
  double drive_freq = 0.0;
  int n_max = 0;
  double max_change = 0.0; ///< |P(n_max) - P(n_max + 2)|_max
  bool converged = false;
  std::vector<BasisLabel> labels;
  std::vector<double> label_overlap; ///< bare-state weight of the dressed state behind each row
  bool ambiguous = false;            ///< any overlap below 0.6

  double operator()(Eigen::Index a, Eigen::Index b) const { return probs(a, b); }
};

// Greedy one-to-one assignment of eigenvectors to bare basis states by
// decreasing overlap. Returns eigen index per bare index and the overlap.
inline std::pair<std::vector<Eigen::Index>, std::vector<double>>
assign_dressed_states(const CMatrix &vectors) {
  const Eigen::Index d = vectors.rows();
  struct Cand {
    double w;
    Eigen::Index bare, eig;
  };
  std::vector<Cand> cands;
  cands.reserve(static_cast<std::size_t>(d * d));
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index k = 0; k < d; ++k)
      cands.push_back({std::norm(vectors(i, k)), i, k});
  std::stable_sort(cands.begin(), cands.end(), [](const Cand &a, const Cand &b) { return a.w > b.w; });
  std::vector<Eigen::Index> eig_of(static_cast<std::size_t>(d), -1);
  std::vector<double> overlap(static_cast<std::size_t>(d), 0.0);
  std::vector<bool> used(static_cast<std::size_t>(d), false);
  for (const auto &c : cands) {
    auto bi = static_cast<std::size_t>(c.bare);
    auto ei = static_cast<std::size_t>(c.eig);
    if (eig_of[bi] >= 0 || used[ei])
      continue;
    eig_of[bi] = c.eig;
    overlap[bi] = c.w;
    used[ei] = true;
  }
  return {eig_of, overlap};
}

namespace detail {

// Shirley average in the H0 eigenbasis for a fixed truncation.
inline RMatrix shirley_average(const RVector &energies, const CMatrix &v_dressed, double freq,
                               int n_max) {
  const Eigen::Index d = energies.size();
  const CMatrix f = build_floquet_matrix(CMatrix(energies.cast<cplx>().asDiagonal()), v_dressed,
                                         freq, n_max);
  const Eigen::Index blocks = 2 * n_max + 1;
  RMatrix weights;
  if (f.imag().cwiseAbs().maxCoeff() <= 1e-14 * std::max(1.0, f.real().cwiseAbs().maxCoeff())) {
    // real symmetric whenever the fields have no y component
    Eigen::SelfAdjointEigenSolver<RMatrix> solver(f.real());
    if (solver.info() != Eigen::Success)
      throw ConvergenceError("floquet: eigensolver failed");
    weights = solver.eigenvectors().cwiseAbs2();
  } else {
    Eigen::SelfAdjointEigenSolver<CMatrix> solver(f);
    if (solver.info() != Eigen::Success)
      throw ConvergenceError("floquet: eigensolver failed");
    weights = solver.eigenvectors().cwiseAbs2();
  }
  const RMatrix &q = weights;
  // start(a, k) = |<a,0|q_k>|^2, finish(b, k) = sum_n |<b,n|q_k>|^2
  RMatrix start = q.block(n_max * d, 0, d, q.cols());
  RMatrix finish = RMatrix::Zero(d, q.cols());
  for (Eigen::Index b = 0; b < blocks; ++b)
    finish += q.block(b * d, 0, d, q.cols());
  return start * finish.transpose();
}

} // namespace detail

/// Long-time-averaged transition probabilities between the eigenstates of H0
/// under V cos(2 pi f t):
///   P(a -> b) = sum_n sum_k |<b,n|q_k>|^2 |<q_k|a,0>|^2.
/// Rows and columns follow the bare basis; each bare state stands for the
/// dressed eigenstate assigned to it by maximum overlap.
inline TransitionProbabilityTable avg_transition_probabilities(const CMatrix &h0, const CMatrix &v,
                                                               double freq, FloquetConfig cfg = {},
                                                               std::vector<BasisLabel> labels = {}) {
  cfg.validate();
  if (h0.rows() != h0.cols() || v.rows() != h0.rows() || v.cols() != h0.cols())
    throw DimensionError("floquet: H0 and V dimensions disagree");
  require(freq > 0.0, "floquet: drive frequency must be > 0");
  const EigenSystem es = eigensolve(h0);
  const auto [eig_of, overlap] = assign_dressed_states(es.vectors);
  const Eigen::Index d = h0.rows();

  // Dressed basis reordered so index i is the eigenstate assigned to bare i.
  CMatrix w(d, d);
  RVector energies(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    w.col(i) = es.vectors.col(eig_of[static_cast<std::size_t>(i)]);
    energies[i] = es.values[eig_of[static_cast<std::size_t>(i)]];
  }
  const CMatrix v_dressed = w.adjoint() * v * w;

  TransitionProbabilityTable out;
  out.drive_freq = freq;
  out.labels = std::move(labels);
  out.label_overlap = overlap;
  out.ambiguous = std::any_of(overlap.begin(), overlap.end(), [](double x) { return x < 0.6; });

  int n = cfg.n_max;
  RMatrix current = detail::shirley_average(energies, v_dressed, freq, n);
  while (true) {
    RMatrix next = detail::shirley_average(energies, v_dressed, freq, n + 2);
    const double change = (next - current).cwiseAbs().maxCoeff();
    if (change < cfg.convergence_tol) {
      out.probs = std::move(current);
      out.n_max = n;
      out.max_change = change;
      out.converged = true;
      return out;
    }
    if (!cfg.escalate || n * 2 > cfg.n_cap) {
      if (!cfg.allow_unconverged)
        throw ConvergenceError("floquet: not converged at n_max = " + std::to_string(n) +
                               " (change " + std::to_string(change) + ")");
      out.probs = std::move(current);
      out.n_max = n;
      out.max_change = change;
      return out;
    }
    n *= 2;
    current = detail::shirley_average(energies, v_dressed, freq, n);
  }
}

enum class Aggregation { Positive, Negative, Custom };

struct LabelPair {
  BasisLabel from, to;
};

// Nuclear-spin-changing aggregates out of the m_s = 0 manifold: "positive"
// sums P((0, m) -> (any m_s, m + 1)), "negative" sums P((0, m) -> (any m_s, m - 1)).
inline double aggregate_probability(const TransitionProbabilityTable &t, Aggregation kind,
                                    const std::vector<LabelPair> &custom = {}) {
  require(!t.labels.empty(), "aggregate_probability: table has no basis labels");
  double sum = 0.0;
  if (kind == Aggregation::Custom) {
    for (const auto &p : custom) {
      const auto a = find_label(t.labels, p.from), b = find_label(t.labels, p.to);
      require(a && b, "aggregate_probability: unknown label in custom pair");
      sum += t.probs(static_cast<Eigen::Index>(*a), static_cast<Eigen::Index>(*b));
    }
    return sum;
  }
  const int step = kind == Aggregation::Positive ? 2 : -2;
  for (std::size_t a = 0; a < t.labels.size(); ++a) {
    if (t.labels[a].ms != 0)
      continue;
    for (std::size_t b = 0; b < t.labels.size(); ++b)
      if (t.labels[b].two_mI == t.labels[a].two_mI + step)
        sum += t.probs(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
  }
  return sum;
}

/// Positive / negative nuclear-flip probability versus drive frequency.
/// y holds the requested aggregate; columns "positive", "negative" and
/// "flagged" (1 where the dressed-state labeling is ambiguous or the
/// truncation did not converge) are always attached.
inline Spectrum probability_spectrum(const SpinSystemParams &params, Orbital orbital, const Vec3 &B0,
                                     const Vec3 &B1, const std::vector<double> &freq_grid,
                                     FloquetConfig cfg = {},
                                     Aggregation aggregation = Aggregation::Positive,
                                     const std::vector<LabelPair> &custom = {}) {
  require_ascending(freq_grid, "probability_spectrum");
  const HamiltonianMatrix h0 = assemble_hamiltonian(params, orbital, B0);
  const CMatrix v = drive_coupling(params, B1);
  struct Row {
    double pos = 0, neg = 0, custom = 0;
    bool flagged = false;
  };
  cfg.allow_unconverged = true;
  auto rows = parallel_map(freq_grid.size(), [&](std::size_t i) {
    const auto t = avg_transition_probabilities(h0.entries, v, freq_grid[i], cfg, h0.labels);
    Row r;
    r.pos = aggregate_probability(t, Aggregation::Positive);
    r.neg = aggregate_probability(t, Aggregation::Negative);
    if (aggregation == Aggregation::Custom)
      r.custom = aggregate_probability(t, Aggregation::Custom, custom);
    r.flagged = t.ambiguous || !t.converged;
    return r;
  });
  Spectrum s;
  s.x = freq_grid;
  s.x_unit = "freq_MHz";
  std::vector<double> pos, neg, flag;
  for (const auto &r : rows) {
    pos.push_back(r.pos);
    neg.push_back(r.neg);
    flag.push_back(r.flagged ? 1.0 : 0.0);
    s.y.push_back(aggregation == Aggregation::Positive   ? r.pos
                  : aggregation == Aggregation::Negative ? r.neg
                                                         : r.custom);
  }
  s.y_unit = aggregation == Aggregation::Positive   ? "pos_prob"
             : aggregation == Aggregation::Negative ? "neg_prob"
                                                    : "custom_prob";
  s.extra = {{"positive", pos}, {"negative", neg}, {"flagged", flag}};
  s.meta["orbital"] = std::string(to_string(orbital));
  s.meta["n_max"] = std::to_string(cfg.n_max);
  return s;
}

} // namespace nvspin
