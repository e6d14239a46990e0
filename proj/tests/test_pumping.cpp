#include <gtest/gtest.h>

#include <random>

#include "nvspin/pumping.hpp"

using namespace nvspin;

namespace {

// Stationary vector by explicit relaxation: the RK4 step matrix of
// dp/dt = Q p, squared until it stops changing, applied to a uniform vector.
RVector rk4_relaxation(const RMatrix &q) {
  const Eigen::Index n = q.rows();
  const double h = 0.5 / std::max(1e-300, q.diagonal().cwiseAbs().maxCoeff());
  const RMatrix a = h * q;
  RMatrix s = RMatrix::Identity(n, n) + a + a * a / 2.0 + a * a * a / 6.0 + a * a * a * a / 24.0;
  for (int k = 0; k < 200; ++k) {
    RMatrix next = s * s;
    // column sums are 1 in exact arithmetic; renormalize so rounding cannot compound
    next.array().rowwise() /= next.colwise().sum().array();
    const double change = (next - s).cwiseAbs().maxCoeff();
    s = std::move(next);
    if (change < 1e-14)
      break;
  }
  RVector p = s * RVector::Constant(n, 1.0 / static_cast<double>(n));
  return p / p.sum();
}

std::vector<int> levels_of(Eigen::Index n) {
  std::vector<int> l;
  for (Eigen::Index k = 0; k < n; ++k)
    l.push_back(static_cast<int>(n - 1 - 2 * k));
  return l;
}

RMatrix random_rates(std::mt19937_64 &rng, Eigen::Index n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RMatrix r(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      r(i, j) = i == j ? 0.0 : std::pow(10.0, -3.0 * u(rng)) * u(rng);
  return r;
}

PairAggregates one_way_up() {
  PairAggregates p;
  p.up_inter = 0.02;
  return p;
}

} // namespace

TEST(RateModelProperty, RandomMatricesGiveProbabilityVectors) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::Index n = 2 + trial % 4;
    const auto model = RateModel::from_rates(levels_of(n), random_rates(rng, n));
    const auto r = solve_steady_state(model);
    double sum = 0.0;
    for (double p : r.populations) {
      EXPECT_GE(p, 0.0);
      sum += p;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_FALSE(r.degenerate);
  }
}

TEST(RateModelOracle, EliminationMatchesOdeRelaxation) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index n = 2 + trial % 4;
    const auto model = RateModel::from_rates(levels_of(n), random_rates(rng, n));
    const auto r = solve_steady_state(model);
    const RVector ode = rk4_relaxation(model.generator);
    for (Eigen::Index k = 0; k < n; ++k)
      EXPECT_NEAR(r.populations[static_cast<std::size_t>(k)], ode[k], 1e-8);
  }
}

TEST(RateModel, GeneratorColumnsSumToZero) {
  std::mt19937_64 rng(5);
  const auto m = RateModel::from_rates(levels_of(3), random_rates(rng, 3));
  EXPECT_LT(m.generator.colwise().sum().cwiseAbs().maxCoeff(), 1e-15);
  RMatrix bad = RMatrix::Zero(3, 3);
  bad(0, 1) = -1.0;
  EXPECT_THROW(RateModel::from_rates(levels_of(3), bad), InvalidArgument);
  EXPECT_THROW(RateModel::from_rates(levels_of(2), bad), DimensionError);
}

TEST(RateModel, OneWayPumpingSaturates) {
  RateParams rates{2.5, 1.0, 1e-5};
  const auto up = equilibrium_polarization({one_way_up(), one_way_up()}, rates);
  EXPECT_GT(up.polarization, 0.99);
  PairAggregates down;
  down.down_inter = 0.02;
  const auto dn = equilibrium_polarization({down, down}, rates);
  EXPECT_LT(dn.polarization, -0.99);
  // spin 1/2: a single pair
  EXPECT_GT(equilibrium_polarization({one_way_up()}, rates).polarization, 0.99);
}

TEST(RateModelProperty, StrongDepolarizationKillsPolarization) {
  double last = 1.0;
  for (double k : {1e-5, 1e-3, 1e-1, 1e1, 1e3, 1e6}) {
    const auto r = equilibrium_polarization({one_way_up(), one_way_up()}, {2.5, 1.0, k});
    EXPECT_LT(r.polarization, last + 1e-15);
    last = r.polarization;
  }
  EXPECT_LT(std::abs(last), 1e-6);
}

TEST(RateModelProperty, PolarizationMonotoneInUpRate) {
  PairAggregates base;
  base.down_inter = 0.01;
  double last = -2.0;
  for (double upr : {0.0, 0.001, 0.005, 0.01, 0.05, 0.2}) {
    PairAggregates p = base;
    p.up_inter = upr;
    const double pol = equilibrium_polarization({p, p}, {2.5, 1.0, 1e-5}).polarization;
    EXPECT_GT(pol, last);
    last = pol;
  }
}

TEST(RateModel, ReducibleChainIsFlagged) {
  RMatrix r = RMatrix::Zero(3, 3);
  r(1, 0) = 1.0; // 0 -> 1 only; level 2 is isolated
  const auto res = solve_steady_state(RateModel::from_rates(levels_of(3), r));
  EXPECT_TRUE(res.degenerate);
  double sum = 0.0;
  for (double p : res.populations)
    sum += p;
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(Pumping, EslacPumpingPolarizesAllSpecies) {
  const OpticalCycleParams cyc;
  for (Species s : {Species::C13, Species::N15, Species::N14}) {
    const auto p = SpinSystemParams::defaults(s);
    PumpOptions o;
    o.trace_stride = 0;
    const auto on = pump_to_steady_state(p, cyc, 509.0, o);
    const auto off = pump_to_steady_state(p, cyc, 65.0, o);
    EXPECT_GE(on.steady.polarization, 0.90) << to_string(s);
    EXPECT_LT(std::abs(off.steady.polarization), 0.05) << to_string(s);
  }
}

TEST(PumpingProperty, SteadyStateIndependentOfStart) {
  const auto p = SpinSystemParams::defaults(Species::N14);
  const OpticalCycleParams cyc;
  PumpOptions o;
  o.trace_stride = 0;
  const auto ref = pump_to_steady_state(p, cyc, 509.0, o);
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> init(9);
    double sum = 0.0;
    for (double &x : init)
      sum += (x = u(rng));
    for (double &x : init)
      x /= sum;
    o.initial = init;
    const auto r = pump_to_steady_state(p, cyc, 509.0, o);
    for (std::size_t k = 0; k < 3; ++k)
      EXPECT_NEAR(r.steady.populations[k], ref.steady.populations[k], 1e-9);
  }
}

TEST(Pumping, CycleMapIsColumnStochastic) {
  const auto cm = build_optical_cycle(SpinSystemParams::defaults(Species::N15), OpticalCycleParams{}, 509.0);
  EXPECT_LT((cm.map.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
  EXPECT_GE(cm.map.minCoeff(), 0.0);
}

TEST(Pumping, PolarizationTraceGrowsFromUniform) {
  const auto p = SpinSystemParams::defaults(Species::N14);
  PumpOptions o;
  o.trace_stride = 5;
  const auto r = pump_to_steady_state(p, OpticalCycleParams{}, 509.0, o);
  ASSERT_GE(r.trace.size(), 3u);
  EXPECT_LT(r.trace.front(), r.trace.back());
  EXPECT_NEAR(r.trace.back(), r.steady.polarization, 1e-6);
}

TEST(Pumping, DarkPassesAndFluorescenceOrdering) {
  const auto p = SpinSystemParams::defaults(Species::N14);
  PumpOptions o;
  o.trace_stride = 0;
  const OpticalCycleParams cyc;
  const auto r = pump_to_steady_state(p, cyc, 509.0, o);
  ASSERT_EQ(r.dark_passes.size(), 3u);
  EXPECT_EQ(r.dark_passes[0], 0.0);
  EXPECT_GT(r.dark_passes[1], 0.0);
  EXPECT_GT(r.dark_passes[2], r.dark_passes[1]);
  const double bright = fluorescence_signal({1, 0, 0}, r.dark_passes, cyc);
  const double mid = fluorescence_signal({0, 1, 0}, r.dark_passes, cyc);
  const double dark = fluorescence_signal({0, 0, 1}, r.dark_passes, cyc);
  EXPECT_DOUBLE_EQ(bright, 1.0);
  EXPECT_GT(bright, mid);
  EXPECT_GT(mid, dark);
  const auto w = fluorescence_weights(r.dark_passes, cyc);
  EXPECT_DOUBLE_EQ(w[1], mid);
}

TEST(Pumping, FlipFlopPeaksAtItsResonance) {
  auto p = SpinSystemParams::defaults(Species::N14);
  p.quad_P_es = 0.0;
  const double b_res = (p.zfs_es - p.A_par_es) / (p.gamma_e + p.species.gamma_n);
  const double at = eslac_flip_flop_probability(p, b_res, 0).probability;
  EXPECT_GT(at, eslac_flip_flop_probability(p, b_res - 5.0, 0).probability);
  EXPECT_GT(at, eslac_flip_flop_probability(p, b_res + 5.0, 0).probability);
  EXPECT_THROW(eslac_flip_flop_probability(p, b_res, 2), InvalidArgument);
}

TEST(Pumping, RejectsBadCycleParameters) {
  OpticalCycleParams c;
  c.singlet_branch_ms0 = 0.9;
  EXPECT_THROW(c.validate(), InvalidArgument);
  OpticalCycleParams d;
  d.nuclear_depol_per_cycle = 1.5;
  EXPECT_THROW(d.validate(), InvalidArgument);
}
