#include <gtest/gtest.h>

#include <random>

#include "nvspin/dynamics.hpp"
#include "nvspin/fitting.hpp"

using namespace nvspin;

namespace {

CMatrix two_level_h0(double f0) {
  CMatrix h = CMatrix::Zero(2, 2);
  h(1, 1) = f0;
  return h;
}

CMatrix sigma_x(double amp) {
  CMatrix v = CMatrix::Zero(2, 2);
  v(0, 1) = v(1, 0) = amp;
  return v;
}

double excited_after(double f0, double amp, double freq, double t, double dt_max = 0.0) {
  CVector psi = CVector::Zero(2);
  psi[0] = 1.0;
  return std::norm(propagate(two_level_h0(f0), sigma_x(amp), freq, psi, t, dt_max)[1]);
}

double unitarity_defect(const CMatrix &u) {
  return (u.adjoint() * u - CMatrix::Identity(u.rows(), u.cols())).cwiseAbs().maxCoeff();
}

} // namespace

TEST(Dynamics, StaticPropagationIsExact) {
  const auto p = SpinSystemParams::defaults(Species::N14);
  const auto h = assemble_hamiltonian(p, Orbital::GS, Vec3(3, 0, 509));
  const DrivenPropagator prop(h.entries, CMatrix::Zero(9, 9), 0.0);
  const CMatrix a = prop.evolve(0.0, 1.234);
  const CMatrix b = unitary_exp(h.entries, 1.234);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(DynamicsProperty, NormConservedOverTenThousandPeriods) {
  const auto p = SpinSystemParams::defaults(Species::N14);
  const auto h = assemble_hamiltonian(p, Orbital::GS, Vec3(0, 0, 509));
  const CMatrix v = drive_coupling(p, Vec3(0.5, 0, 0));
  const double f = 1445.314;
  const DrivenPropagator prop(h.entries, v, f);
  const CMatrix u = prop.evolve(0.0, 1e4 / f);
  EXPECT_LT(unitarity_defect(u), 1e-8);
  CVector psi = CVector::Zero(9);
  psi[3] = 1.0;
  EXPECT_NEAR((u * psi).norm(), 1.0, 1e-8);
}

TEST(DynamicsProperty, PeriodicityComposition) {
  const DrivenPropagator prop(two_level_h0(10.0), sigma_x(0.3), 10.0);
  const double t0 = 0.037, dt = 0.41;
  // U(t0 + dt, t0) from pieces equals the direct evaluation
  const CMatrix whole = prop.evolve(t0, 2 * dt);
  const CMatrix pieces = prop.evolve(t0 + dt, dt) * prop.evolve(t0, dt);
  EXPECT_LT((whole - pieces).cwiseAbs().maxCoeff(), 1e-10);
  // whole-period shifts of the start change nothing; a half-period shift does
  EXPECT_LT((prop.evolve(t0 + 0.3, dt) - prop.evolve(t0, dt)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_GT((prop.evolve(t0 + 0.05, dt) - prop.evolve(t0, dt)).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(DynamicsProperty, MagnusStepIsFourthOrder) {
  const double f0 = 10.0, amp = 4.0, f = 9.0, t = 1.0 / 9.0;
  const DrivenPropagator ref(two_level_h0(f0), sigma_x(amp), f, 1e-5);
  const CMatrix u_ref = ref.evolve(0.0, t);
  auto err = [&](double h) {
    return (DrivenPropagator(two_level_h0(f0), sigma_x(amp), f, h).evolve(0.0, t) - u_ref).norm();
  };
  const double e1 = err(t / 64), e2 = err(t / 128);
  EXPECT_GT(e1 / e2, 12.0);
  EXPECT_LT(e1 / e2, 20.0);
}

TEST(Dynamics, TwoLevelMatchesSquarePulseLineshape) {
  const double f0 = 200.0, amp = 0.4;
  const double t = 1.0 / (2.0 * amp);
  for (double det : {-0.6, -0.3, -0.1, 0.0, 0.05, 0.2, 0.45}) {
    const double got = excited_after(f0, amp, f0 + det, t);
    const double want = square_pulse_lineshape(amp, det, t);
    EXPECT_NEAR(got, want, 0.02 * std::max(want, 0.05)) << "detuning " << det;
  }
  EXPECT_NEAR(excited_after(f0, amp, f0, t), 1.0, 0.02);
}

TEST(DynamicsProperty, DetuningSymmetryInWeakDrive) {
  const double f0 = 500.0, amp = 0.2, t = 2.5;
  for (double det : {0.05, 0.13, 0.3})
    EXPECT_NEAR(excited_after(f0, amp, f0 + det, t), excited_after(f0, amp, f0 - det, t), 2e-3);
}

TEST(Dynamics, EnhancedRabiMatchesPropagation) {
  auto p = SpinSystemParams::defaults(Species::N14);
  p.A_perp_gs = 2.94;
  const double b0z = 509.0, b_rf = 10.0;
  SequenceRunner runner(p, Orbital::GS, Vec3(0, 0, b0z));
  const BasisLabel from{-1, 0}, to{-1, 2};
  const auto [freq, pi_time] = runner.resolve({from, to, 1.0, 0.0}, Vec3(b_rf, 0, 0));
  const double omega_full = 1.0 / (2.0 * pi_time);
  const auto est = enhanced_rabi_frequency(p, b_rf, -1, b0z);
  const double ix = nuclear_ix_element(p.species.spin, 0);
  EXPECT_NEAR(ix * est.enhanced / omega_full, 1.0, 0.05);
  EXPECT_GT(est.enhanced / est.bare, 5.0);

  // the calibrated pi pulse really inverts the pair under lab-frame propagation
  PulseSequence seq;
  seq.rho0 = pure_state(runner.hamiltonian().labels, from);
  seq.segments = {PulseSegment::pulse({from, to, 1.0, 0.0}, Vec3(b_rf, 0, 0)),
                  PulseSegment::readout(Observable::population(to))};
  EXPECT_GT(runner.run(seq), 0.95);
  EXPECT_GT(freq, 0.0);
}

TEST(Dynamics, EnhancedRabiReducesToBareWithoutAPerp) {
  auto p = SpinSystemParams::defaults(Species::N15);
  p.A_perp_gs = 0.0;
  const auto est = enhanced_rabi_frequency(p, 10.0, 1, 509.0);
  EXPECT_DOUBLE_EQ(est.enhanced, est.bare);
  EXPECT_THROW(enhanced_rabi_frequency(p, 10.0, 0), InvalidArgument);
}

TEST(Dynamics, RamseyFringesAtTheDetuning) {
  const auto p = SpinSystemParams::defaults(Species::N14);
  SequenceRunner runner(p, Orbital::GS, Vec3(0, 0, 509));
  const double detuning = 0.002;
  const auto seq = ramsey_sequence(runner, {0, 2}, {-1, 2}, Vec3(0.5, 0, 0), detuning);
  const auto trace = duration_sweep(runner, seq, 1, linspace(0.0, 1500.0, 61));
  const auto fit = fit_sinusoid(trace, false);
  ASSERT_TRUE(fit.converged);
  EXPECT_NEAR(fit.value("freq"), detuning, 2e-5);
  EXPECT_GT(std::abs(fit.value("amplitude")), 0.4);
}

TEST(Dynamics, CoherenceTimeDampsRamseyContrast) {
  const auto p = SpinSystemParams::defaults(Species::N14);
  SequenceOptions opts;
  opts.coherence_time = 200.0;
  SequenceRunner runner(p, Orbital::GS, Vec3(0, 0, 509), opts);
  const auto seq = ramsey_sequence(runner, {0, 2}, {-1, 2}, Vec3(0.5, 0, 0), 0.002);
  const auto trace = duration_sweep(runner, seq, 1, {0.0, 2000.0});
  EXPECT_GT(trace.values[0], 0.95);
  EXPECT_NEAR(trace.values[1], 0.5, 0.01);
}

TEST(Dynamics, ZeroDurationAndStationarity) {
  const auto p = SpinSystemParams::defaults(Species::C13);
  SequenceRunner runner(p, Orbital::GS, Vec3(0, 0, 509));
  PulseSequence seq;
  seq.rho0 = pure_state(runner.hamiltonian().labels, {0, 1});
  seq.segments = {PulseSegment::drive(3.0, Vec3(10, 0, 0), 0.0), PulseSegment::wait(42.0),
                  PulseSegment::readout(Observable::population({0, 1}))};
  EXPECT_NEAR(runner.run(seq), 1.0, 1e-12);
}

TEST(Dynamics, NmrScanDipsAtTheNuclearLine) {
  auto p = SpinSystemParams::defaults(Species::N14);
  p.A_perp_gs = 2.94;
  NmrScanConfig cfg;
  cfg.manifold = 0;
  cfg.nuclear_pops = {1.0, 0.0, 0.0};
  cfg.rf_B1 = Vec3(10, 0, 0);
  const auto lines = gs_nuclear_lines(p, 509.0, 0);
  const double f_up = lines.freq.back();
  SequenceRunner runner(p, Orbital::GS, Vec3(0, 0, 509));
  const auto [freq, pi_time] = runner.resolve({{0, 2}, {0, 0}, 1.0, 0.0}, cfg.rf_B1);
  EXPECT_NEAR(freq, f_up, 1e-9);
  cfg.pulse_len = pi_time;
  const auto s = nmr_frequency_scan(p, Orbital::GS, Vec3(0, 0, 509), cfg, {f_up - 0.2, f_up});
  // y is the drop in <I_z>: a full inversion of the m_I = +1 population gives 1
  EXPECT_GT(s.y[1], 0.9);
  EXPECT_LT(s.y[0], 0.1);
}

TEST(Dynamics, RejectsBadInput) {
  EXPECT_THROW(DrivenPropagator(two_level_h0(1.0), CMatrix::Zero(3, 3), 1.0), DimensionError);
  EXPECT_THROW(propagate(two_level_h0(1.0), sigma_x(0.1), 1.0, CVector::Zero(3), 1.0), DimensionError);
  CVector bad = CVector::Zero(2);
  bad[0] = std::nan("");
  EXPECT_THROW(propagate(two_level_h0(1.0), sigma_x(0.1), 1.0, bad, 1.0), InvalidArgument);
}
