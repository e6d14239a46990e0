#include <gtest/gtest.h>

#include <random>

#include "nvspin/dynamics.hpp"
#include "nvspin/floquet.hpp"

using namespace nvspin;

namespace {

// Direct-propagation estimate of the averaged probabilities: mean of
// |<e_b|U(t0 + t, t0)|e_a>|^2 over `phases` drive phases t0 and a uniform grid
// of K times spanning `window`. e_i is the H0 eigenvector dominated by bare i.
RMatrix propagation_average(const CMatrix &h0, const CMatrix &v, double f, double window,
                            std::size_t k_steps, int phases) {
  const Eigen::Index d = h0.rows();
  Eigen::SelfAdjointEigenSolver<CMatrix> s(h0);
  CMatrix e(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    Eigen::Index best = 0;
    s.eigenvectors().row(i).cwiseAbs().maxCoeff(&best);
    e.col(i) = s.eigenvectors().col(best);
  }
  const DrivenPropagator prop(h0, v, f);
  const double dt = window / static_cast<double>(k_steps);
  RMatrix acc = RMatrix::Zero(d, d);
  for (int ph = 0; ph < phases; ++ph) {
    const double t0 = prop.period() * ph / phases;
    CMatrix u = CMatrix::Identity(d, d);
    for (std::size_t k = 0; k < k_steps; ++k) {
      u = prop.evolve(t0 + dt * static_cast<double>(k), dt) * u;
      const CMatrix m = e.adjoint() * u * e; // m(b, a) = <e_b|U|e_a>
      acc += m.cwiseAbs2().transpose();
    }
  }
  return acc / static_cast<double>(k_steps * static_cast<std::size_t>(phases));
}

CMatrix diag3(double a, double b, double c) {
  CMatrix h = CMatrix::Zero(3, 3);
  h(0, 0) = a;
  h(1, 1) = b;
  h(2, 2) = c;
  return h;
}

} // namespace

TEST(FloquetOracle, TwoLevelMatchesPropagation) {
  CMatrix h0 = CMatrix::Zero(2, 2), v = CMatrix::Zero(2, 2);
  h0(1, 1) = 10.0;
  v(0, 1) = v(1, 0) = 0.6;
  for (double f : {9.6, 10.0, 10.3}) {
    const auto t = avg_transition_probabilities(h0, v, f);
    ASSERT_TRUE(t.converged);
    const RMatrix ode = propagation_average(h0, v, f, 1500.0, 24000, 4);
    EXPECT_LT((t.probs - ode).cwiseAbs().maxCoeff(), 1e-3) << "f = " << f;
  }
}

TEST(FloquetOracle, ThreeLevelMatchesPropagation) {
  CMatrix h0 = diag3(0.0, 7.0, 15.0);
  h0(0, 2) = cplx(0.2, 0.1);
  h0(2, 0) = std::conj(h0(0, 2));
  CMatrix v = CMatrix::Zero(3, 3);
  v(0, 1) = v(1, 0) = 0.5;
  v(1, 2) = cplx(0.0, 0.4);
  v(2, 1) = cplx(0.0, -0.4);
  for (double f : {7.05, 7.9}) {
    const auto t = avg_transition_probabilities(h0, v, f);
    ASSERT_TRUE(t.converged);
    const RMatrix ode = propagation_average(h0, v, f, 3000.0, 36000, 4);
    EXPECT_LT((t.probs - ode).cwiseAbs().maxCoeff(), 1e-3) << "f = " << f;
  }
}

TEST(Floquet, ResonantTwoLevelAverageIsOneHalf) {
  CMatrix h0 = CMatrix::Zero(2, 2), v = CMatrix::Zero(2, 2);
  h0(1, 1) = 50.0;
  v(0, 1) = v(1, 0) = 0.1;
  // Bloch-Siegert shift moves the resonance by ~ (v/2)^2 / f
  const auto t = avg_transition_probabilities(h0, v, 50.0 - 0.5 * 0.1 * 0.1 / 4 / 50.0);
  EXPECT_NEAR(t(0, 1), 0.5, 1e-3);
}

TEST(FloquetProperty, DoublyStochasticAndSymmetric) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index d = 2 + trial % 4;
    CMatrix h0 = CMatrix::Zero(d, d), v = CMatrix::Zero(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
      h0(i, i) = 6.0 * static_cast<double>(i) + u(rng);
      for (Eigen::Index j = i + 1; j < d; ++j) {
        v(i, j) = cplx(0.5 * u(rng), 0.5 * u(rng));
        v(j, i) = std::conj(v(i, j));
      }
    }
    FloquetConfig cfg;
    cfg.allow_unconverged = true;
    const auto t = avg_transition_probabilities(h0, v, 5.0 + u(rng), cfg);
    EXPECT_TRUE((t.probs.array() >= -1e-12).all());
    for (Eigen::Index i = 0; i < d; ++i) {
      EXPECT_NEAR(t.probs.row(i).sum(), 1.0, 1e-9);
      EXPECT_NEAR(t.probs.col(i).sum(), 1.0, 1e-9);
    }
    EXPECT_LT((t.probs - t.probs.transpose()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(FloquetProperty, EscalationConvergesAndIsStable) {
  CMatrix h0 = diag3(0.0, 4.0, 9.0);
  CMatrix v = CMatrix::Zero(3, 3);
  v(0, 1) = v(1, 0) = 3.0;
  v(1, 2) = v(2, 1) = 2.0;
  FloquetConfig cfg;
  cfg.n_max = 2;
  const auto t = avg_transition_probabilities(h0, v, 4.5, cfg);
  ASSERT_TRUE(t.converged);
  EXPECT_GT(t.n_max, 2);
  EXPECT_LT(t.max_change, cfg.convergence_tol);
  FloquetConfig big;
  big.n_max = 40;
  const auto ref = avg_transition_probabilities(h0, v, 4.5, big);
  EXPECT_LT((t.probs - ref.probs).cwiseAbs().maxCoeff(), 1e-5);

  FloquetConfig strict;
  strict.n_max = 1;
  strict.escalate = false;
  EXPECT_THROW(avg_transition_probabilities(h0, v, 4.5, strict), ConvergenceError);
}

TEST(Floquet, MatrixIsHermitianWithPhotonDiagonal) {
  CMatrix h0 = diag3(0.0, 1.0, 3.0), v = CMatrix::Zero(3, 3);
  v(0, 2) = v(2, 0) = 0.7;
  const CMatrix f = build_floquet_matrix(h0, v, 2.0, 3);
  ASSERT_EQ(f.rows(), 21);
  EXPECT_TRUE(is_hermitian(f));
  EXPECT_DOUBLE_EQ(f(0, 0).real(), -6.0);
  EXPECT_DOUBLE_EQ(f(20, 20).real(), 9.0);
  EXPECT_DOUBLE_EQ(f(0, 5).real(), 0.35);
}

TEST(Floquet, AxialEsAggregatesSeparateSigns) {
  const auto p = SpinSystemParams::defaults(Species::N14);
  const Vec3 b0(0, 0, 50), b1(0, 0, 20.0 / 2.799);
  const auto h0 = assemble_hamiltonian(p, Orbital::ES, b0);
  const CMatrix v = drive_coupling(p, b1);
  FloquetConfig cfg;
  cfg.allow_unconverged = true;
  // positive and negative aggregates peak at different drive frequencies
  double best_pos = 0, f_pos = 0, best_neg = 0, f_neg = 0;
  for (double f = 1200; f <= 1600; f += 4) {
    const auto t = avg_transition_probabilities(h0.entries, v, f, cfg, h0.labels);
    const double pos = aggregate_probability(t, Aggregation::Positive);
    const double neg = aggregate_probability(t, Aggregation::Negative);
    if (pos > best_pos) {
      best_pos = pos;
      f_pos = f;
    }
    if (neg > best_neg) {
      best_neg = neg;
      f_neg = f;
    }
  }
  EXPECT_GT(best_pos, 1e-3);
  EXPECT_GT(best_neg, 1e-3);
  EXPECT_GT(std::abs(f_pos - f_neg), 8.0);
}

TEST(Floquet, RejectsBadInput) {
  CMatrix h0 = CMatrix::Zero(2, 2);
  EXPECT_THROW(avg_transition_probabilities(h0, CMatrix::Zero(3, 3), 1.0), DimensionError);
  EXPECT_THROW(avg_transition_probabilities(h0, CMatrix::Zero(2, 2), 0.0), InvalidArgument);
}
