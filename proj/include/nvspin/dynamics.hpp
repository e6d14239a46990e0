#pragma once

// Time-domain propagation under H(t) = H0 + V cos(2 pi f t), pulse sequences,
// analytic square-pulse lineshapes and the hyperfine-enhanced nuclear Rabi
// frequency. Propagators are U = exp(-2 pi i H t) with H in MHz and t in us.

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "nvspin/parallel.hpp"
#include "nvspin/spectrum.hpp"
#include "nvspin/spin_core.hpp"

namespace nvspin {

/// exp(-2 pi i H t) for Hermitian H.
inline CMatrix unitary_exp(const CMatrix &h, double t) {
  Eigen::SelfAdjointEigenSolver<CMatrix> solver(h);
  const RVector &w = solver.eigenvalues();
  CVector phase(w.size());
  for (Eigen::Index k = 0; k < w.size(); ++k)
    phase[k] = std::polar(1.0, -kTwoPi * w[k] * t);
  const CMatrix &v = solver.eigenvectors();
  return v * phase.asDiagonal() * v.adjoint();
}

inline CMatrix matrix_power(CMatrix base, std::uint64_t n) {
  CMatrix out = CMatrix::Identity(base.rows(), base.cols());
  while (n > 0) {
    if (n & 1u)
      out = base * out;
    n >>= 1u;
    if (n > 0)
      base = base * base;
  }
  return out;
}

// Propagator for a monochromatic lab-frame drive. The one-period propagator
// is built once with fourth-order Magnus steps; longer intervals reuse it
// through Floquet periodicity, U(t + T, t0 + T) = U(t, t0). About sqrt(steps)
// intermediate propagators are kept so partial periods start near their end.
class DrivenPropagator {
public:
  // dt_max <= 0 selects the step from the fastest scale in the problem.
  DrivenPropagator(CMatrix h0, CMatrix v, double freq, double dt_max = 0.0,
                   int steps_per_fast_cycle = 6)
      : h0_(std::move(h0)), v_(std::move(v)), freq_(freq) {
    if (h0_.rows() != h0_.cols() || v_.rows() != h0_.rows() || v_.cols() != h0_.cols())
      throw DimensionError("propagator: H0 and V dimensions disagree");
    if (!is_hermitian(h0_, 1e-10) || !is_hermitian(v_, 1e-10))
      throw InvalidArgument("propagator: H0 and V must be Hermitian");
    require(std::isfinite(freq_) && freq_ >= 0.0, "propagator: drive frequency must be >= 0");
    const Eigen::Index d = h0_.rows();
    shift_ = h0_.diagonal().real().mean();
    h0_ -= shift_ * CMatrix::Identity(d, d);
    static_ = freq_ == 0.0 || v_.cwiseAbs().maxCoeff() == 0.0;
    if (static_) {
      h_static_ = freq_ == 0.0 ? CMatrix(h0_ + v_) : h0_;
      return;
    }
    period_ = 1.0 / freq_;
    Eigen::SelfAdjointEigenSolver<CMatrix> s0(h0_, Eigen::EigenvaluesOnly);
    const double spread = s0.eigenvalues().maxCoeff() - s0.eigenvalues().minCoeff();
    const double vnorm = v_.cwiseAbs().rowwise().sum().maxCoeff();
    const double fast = spread + 2.0 * vnorm + freq_;
    double h = 1.0 / (steps_per_fast_cycle * fast);
    if (dt_max > 0.0)
      h = std::min(h, dt_max);
    steps_ = std::max<std::size_t>(8, static_cast<std::size_t>(std::ceil(period_ / h)));
    commutator_ = h0_ * v_ - v_ * h0_;
    // checkpoints U(j stride h, 0) let partial periods march at most `stride_` steps
    stride_ = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(steps_))));
    const double step = period_ / static_cast<double>(steps_);
    CMatrix u = CMatrix::Identity(d, d);
    checkpoints_.push_back(u);
    for (std::size_t i = 0; i < steps_; ++i) {
      u = magnus_step(step * static_cast<double>(i), step) * u;
      if ((i + 1) % stride_ == 0 && i + 1 < steps_)
        checkpoints_.push_back(u);
    }
    u_period_ = u;
  }

  double period() const { return period_; }
  std::size_t steps_per_period() const { return steps_; }
  const CMatrix &period_propagator() const { return u_period_; }

  /// U(t_start + duration, t_start), drive phase referenced to t = 0.
  CMatrix evolve(double t_start, double duration) const {
    require(duration >= 0.0 && std::isfinite(duration), "propagator: duration must be >= 0");
    const cplx global = std::polar(1.0, -kTwoPi * shift_ * duration);
    if (static_)
      return global * unitary_exp(h_static_, duration);
    if (duration == 0.0)
      return CMatrix::Identity(h0_.rows(), h0_.cols());
    const double s = std::fmod(t_start, period_);
    CMatrix u = from_zero(s + duration);
    if (s > 0.0)
      u = u * from_zero(s).adjoint();
    return global * u;
  }

private:
  // Two-point Gauss fourth-order Magnus step from t to t + h.
  CMatrix magnus_step(double t, double h) const {
    static const double c = std::sqrt(3.0) / 6.0;
    const double c1 = std::cos(kTwoPi * freq_ * (t + (0.5 - c) * h));
    const double c2 = std::cos(kTwoPi * freq_ * (t + (0.5 + c) * h));
    // exp(Omega) = exp(-2 pi i K): K = (h/2)(H1 + H2) + i (sqrt3 pi h^2 / 6)[H1, H2]
    const CMatrix k = (0.5 * h) * (2.0 * h0_ + (c1 + c2) * v_) +
                      cplx(0.0, std::sqrt(3.0) * kPi * h * h / 6.0 * (c2 - c1)) * commutator_;
    return unitary_exp(0.5 * (k + k.adjoint()), 1.0);
  }

  CMatrix march(double t0, double length, std::size_t n) const {
    CMatrix u = CMatrix::Identity(h0_.rows(), h0_.cols());
    const double h = length / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      u = magnus_step(t0 + h * static_cast<double>(i), h) * u;
    return u;
  }

  // U(t, 0) for t >= 0.
  CMatrix from_zero(double t) const {
    const double cycles = std::floor(t / period_);
    double rem = t - cycles * period_;
    std::uint64_t n = static_cast<std::uint64_t>(cycles);
    if (rem >= period_) {
      rem -= period_;
      ++n;
    }
    CMatrix u = matrix_power(u_period_, n);
    if (rem > 0.0) {
      const double step = period_ / static_cast<double>(steps_);
      const double span = step * static_cast<double>(stride_);
      const auto c = std::min(checkpoints_.size() - 1, static_cast<std::size_t>(rem / span));
      const double t0 = span * static_cast<double>(c);
      const double left = rem - t0;
      u = checkpoints_[c] * u;
      if (left > 0.0) {
        const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(left / step)));
        u = march(t0, left, k) * u;
      }
    }
    return u;
  }

  CMatrix h0_, v_, h_static_, commutator_, u_period_;
  std::vector<CMatrix> checkpoints_;
  std::size_t stride_ = 1;
  double freq_ = 0.0;
  double shift_ = 0.0;
  double period_ = 0.0;
  std::size_t steps_ = 0;
  bool static_ = false;
};

/// Solves i (dpsi/dt) / 2 pi = (H0 + V cos 2 pi f t) psi from t = 0 to t.
inline CVector propagate(const CMatrix &h0, const CMatrix &v, double freq, const CVector &psi,
                         double t, double dt_max = 0.0) {
  if (psi.size() != h0.rows())
    throw DimensionError("propagate: state dimension mismatch");
  if (!psi.allFinite())
    throw InvalidArgument("propagate: non-finite state");
  CVector out = DrivenPropagator(h0, v, freq, dt_max).evolve(0.0, t) * psi;
  if (!out.allFinite())
    throw ConvergenceError("propagate: state became non-finite");
  return out;
}

/// Square-pulse (Rabi) transition probability
/// Omega^2/(Omega^2 + delta^2) sin^2(pi sqrt(Omega^2 + delta^2) t).
inline double square_pulse_lineshape(double omega, double detuning, double t) {
  const double w2 = omega * omega + detuning * detuning;
  if (w2 == 0.0)
    return 0.0;
  const double s = std::sin(kPi * std::sqrt(w2) * t);
  return omega * omega / w2 * s * s;
}

struct RabiEstimate {
  double enhanced = 0.0; ///< |gamma_eff| B_rf, MHz
  double bare = 0.0;     ///< |gamma_n| B_rf, MHz
};

/// Nuclear Rabi frequency inside an m_s = +-1 manifold including the
/// second-order electron-flip / flip-flop path:
///   gamma_eff = gamma_n - gamma_e A_perp / (Delta + m_s gamma_e B0z).
/// With B0z = 0 the denominator is the bare zero-field splitting. Signs follow
/// the -gamma_n I convention of the Hamiltonian; the magnitude is returned.
inline RabiEstimate enhanced_rabi_frequency(const SpinSystemParams &params, double b_rf,
                                            int manifold, double b0z = 0.0,
                                            Orbital orbital = Orbital::GS) {
  require(manifold == 1 || manifold == -1, "enhanced_rabi_frequency: manifold must be +1 or -1");
  require(b_rf >= 0.0, "enhanced_rabi_frequency: B_rf must be >= 0");
  const double zfs = params.zfs(orbital);
  if (zfs == 0.0)
    throw InvalidArgument("enhanced_rabi_frequency: zero-field splitting is zero");
  const double denom = zfs + manifold * params.gamma_e * b0z;
  if (denom == 0.0)
    throw InvalidArgument("enhanced_rabi_frequency: electron levels degenerate");
  const double a_perp = params.hyperfine(orbital).a_perp;
  const double gamma_eff = params.species.gamma_n - params.gamma_e * a_perp / denom;
  return {std::abs(gamma_eff) * b_rf, std::abs(params.species.gamma_n) * b_rf};
}

/// |<m+1|I_x|m>| for the nuclear transition m -> m+1 (m given as 2m).
inline double nuclear_ix_element(SpinQuantum spin, int two_m_lower) {
  const double s = spin.value(), m = two_m_lower / 2.0;
  return 0.5 * std::sqrt(s * (s + 1) - m * (m + 1));
}

// ---------------------------------------------------------------------------
// Pulse sequences
// ---------------------------------------------------------------------------

struct Observable {
  enum class Kind { Population, ElectronPopulation, NuclearPopulation, NuclearPolarization, Weights };
  Kind kind = Kind::Population;
  BasisLabel label{};          ///< Population
  int ms = 0;                  ///< ElectronPopulation
  int two_mI = 0;              ///< NuclearPopulation
  std::vector<double> weights; ///< Weights, per bare basis index

  static Observable population(BasisLabel l) { return {Kind::Population, l, 0, 0, {}}; }
  static Observable electron(int ms) { return {Kind::ElectronPopulation, {}, ms, 0, {}}; }
  static Observable nuclear(int two_mI) { return {Kind::NuclearPopulation, {}, 0, two_mI, {}}; }
  static Observable polarization() { return {Kind::NuclearPolarization, {}, 0, 0, {}}; }
  static Observable weighted(std::vector<double> w) {
    return {Kind::Weights, {}, 0, 0, std::move(w)};
  }

  double evaluate(const CMatrix &rho, const std::vector<BasisLabel> &labels) const {
    double out = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double p = rho(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)).real();
      switch (kind) {
      case Kind::Population:
        out += labels[i] == label ? p : 0.0;
        break;
      case Kind::ElectronPopulation:
        out += labels[i].ms == ms ? p : 0.0;
        break;
      case Kind::NuclearPopulation:
        out += labels[i].two_mI == two_mI ? p : 0.0;
        break;
      case Kind::NuclearPolarization:
        out += labels[i].mI() * p;
        break;
      case Kind::Weights:
        if (weights.size() != labels.size())
          throw DimensionError("observable: weight vector length mismatch");
        out += weights[i] * p;
        break;
      }
    }
    return out;
  }
};

// Resonant pulse between two labeled eigenstates. The duration is
// rotation / (2 Omega_eff) with Omega_eff = |<f|V|i>| of the lab-frame drive
// amplitude (twice the rotating-frame coupling), so rotation = 1 is a pi pulse.
struct PulseCalibration {
  BasisLabel from{}, to{};
  double rotation = 1.0;
  double detuning = 0.0; ///< MHz added to the resonance frequency
};

struct PulseSegment {
  enum class Kind { Drive, Wait, Readout };
  Kind kind = Kind::Wait;
  double duration = 0.0; ///< us
  double freq = 0.0;     ///< MHz
  Vec3 B1 = Vec3::Zero();
  std::optional<PulseCalibration> calibrate;
  Observable observable;

  static PulseSegment drive(double freq, Vec3 b1, double duration) {
    PulseSegment s;
    s.kind = Kind::Drive;
    s.freq = freq;
    s.B1 = b1;
    s.duration = duration;
    return s;
  }
  static PulseSegment pulse(PulseCalibration cal, Vec3 b1) {
    PulseSegment s;
    s.kind = Kind::Drive;
    s.B1 = b1;
    s.calibrate = cal;
    return s;
  }
  static PulseSegment wait(double duration) {
    PulseSegment s;
    s.duration = duration;
    return s;
  }
  static PulseSegment readout(Observable obs) {
    PulseSegment s;
    s.kind = Kind::Readout;
    s.observable = std::move(obs);
    return s;
  }
};

struct PulseSequence {
  CMatrix rho0; ///< initial density operator in the bare product basis
  std::vector<PulseSegment> segments;

  void validate(Eigen::Index dim) const {
    if (rho0.rows() != dim || rho0.cols() != dim)
      throw DimensionError("pulse sequence: initial state dimension mismatch");
    require(std::abs(rho0.trace() - cplx(1.0)) < 1e-9, "pulse sequence: initial state trace != 1");
    require(is_hermitian(rho0, 1e-10), "pulse sequence: initial state not Hermitian");
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const auto &s = segments[i];
      require(s.duration >= 0.0 && std::isfinite(s.duration), "pulse segment: duration must be >= 0");
      require(s.freq >= 0.0, "pulse segment: drive frequency must be >= 0");
      if (s.kind == PulseSegment::Kind::Readout)
        require(i + 1 == segments.size(), "pulse sequence: only the final segment may be a readout");
    }
  }
};

inline CMatrix pure_state(const std::vector<BasisLabel> &labels, BasisLabel which) {
  const auto idx = find_label(labels, which);
  require(idx.has_value(), "unknown basis label " + which.str());
  const auto d = static_cast<Eigen::Index>(labels.size());
  CMatrix rho = CMatrix::Zero(d, d);
  rho(static_cast<Eigen::Index>(*idx), static_cast<Eigen::Index>(*idx)) = 1.0;
  return rho;
}

// Diagonal state with the given nuclear populations in electron level ms.
inline CMatrix nuclear_mixture(const std::vector<BasisLabel> &labels, int ms,
                               const std::vector<double> &pops_descending_mI) {
  const auto d = static_cast<Eigen::Index>(labels.size());
  CMatrix rho = CMatrix::Zero(d, d);
  std::size_t k = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].ms != ms)
      continue;
    require(k < pops_descending_mI.size(), "nuclear_mixture: too few populations");
    rho(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = pops_descending_mI[k];
    total += pops_descending_mI[k++];
  }
  require(k == pops_descending_mI.size(), "nuclear_mixture: population count mismatch");
  require(total > 0.0, "nuclear_mixture: populations must not all vanish");
  return rho / total;
}

struct SequenceOptions {
  std::optional<double> coherence_time; ///< us; decays coherences during waits
  double dt_max = 0.0;
};

// Runs pulse sequences for one static Hamiltonian, caching one drive
// propagator per (frequency, B1). Safe to share across threads.
class SequenceRunner {
public:
  SequenceRunner(const SpinSystemParams &params, Orbital orbital, const Vec3 &B0,
                 SequenceOptions opts = {})
      : params_(params), h0_(assemble_hamiltonian(params, orbital, B0)),
        eig_(eigensolve(h0_)), opts_(opts) {}

  const HamiltonianMatrix &hamiltonian() const { return h0_; }
  const EigenSystem &eigensystem() const { return eig_; }
  const SpinSystemParams &params() const { return params_; }

  // Eigenstate index dominated by a bare label.
  Eigen::Index eigen_index(BasisLabel label) const {
    const auto bare = find_label(h0_.labels, label);
    require(bare.has_value(), "unknown basis label " + label.str());
    Eigen::Index best = 0;
    eig_.vectors.row(static_cast<Eigen::Index>(*bare)).cwiseAbs2().maxCoeff(&best);
    return best;
  }

  // Frequency and duration a PulseCalibration resolves to.
  std::pair<double, double> resolve(const PulseCalibration &cal, const Vec3 &b1) const {
    const Eigen::Index i = eigen_index(cal.from), f = eigen_index(cal.to);
    const CMatrix v = drive_coupling(params_, b1);
    const double element = std::abs(cplx(eig_.vectors.col(f).adjoint() * v * eig_.vectors.col(i)));
    if (element == 0.0)
      throw InvalidArgument("pulse calibration: drive does not couple " + cal.from.str() + " and " +
                            cal.to.str());
    const double freq = std::abs(eig_.values[f] - eig_.values[i]) + cal.detuning;
    return {freq, cal.rotation / (2.0 * element)};
  }

  CMatrix evolve_state(const PulseSequence &seq, double *elapsed = nullptr) const {
    seq.validate(h0_.dim());
    CMatrix rho = seq.rho0;
    double t = 0.0;
    for (const auto &seg : seq.segments) {
      switch (seg.kind) {
      case PulseSegment::Kind::Readout:
        break;
      case PulseSegment::Kind::Wait:
        rho = free_evolution(rho, seg.duration);
        t += seg.duration;
        break;
      case PulseSegment::Kind::Drive: {
        double freq = seg.freq, dur = seg.duration;
        if (seg.calibrate)
          std::tie(freq, dur) = resolve(*seg.calibrate, seg.B1);
        const CMatrix u = propagator(freq, seg.B1)->evolve(t, dur);
        rho = u * rho * u.adjoint();
        t += dur;
        break;
      }
      }
    }
    if (elapsed)
      *elapsed = t;
    return rho;
  }

  double run(const PulseSequence &seq) const {
    const CMatrix rho = evolve_state(seq);
    return readout_of(seq).evaluate(rho, h0_.labels);
  }

  static Observable readout_of(const PulseSequence &seq) {
    if (seq.segments.empty() || seq.segments.back().kind != PulseSegment::Kind::Readout)
      throw InvalidArgument("pulse sequence: no readout observable specified");
    return seq.segments.back().observable;
  }

private:
  CMatrix free_evolution(const CMatrix &rho, double tau) const {
    const CMatrix &w = eig_.vectors;
    CMatrix r = w.adjoint() * rho * w;
    const double decay = opts_.coherence_time ? std::exp(-tau / *opts_.coherence_time) : 1.0;
    for (Eigen::Index j = 0; j < r.rows(); ++j)
      for (Eigen::Index k = 0; k < r.cols(); ++k)
        if (j != k)
          r(j, k) *= std::polar(decay, -kTwoPi * (eig_.values[j] - eig_.values[k]) * tau);
    return w * r * w.adjoint();
  }

  std::shared_ptr<const DrivenPropagator> propagator(double freq, const Vec3 &b1) const {
    const auto key = std::make_tuple(freq, b1.x(), b1.y(), b1.z());
    {
      std::lock_guard lock(mutex_);
      if (auto it = cache_.find(key); it != cache_.end())
        return it->second;
    }
    auto p = std::make_shared<const DrivenPropagator>(h0_.entries, drive_coupling(params_, b1), freq,
                                                      opts_.dt_max);
    std::lock_guard lock(mutex_);
    return cache_.emplace(key, std::move(p)).first->second;
  }

  SpinSystemParams params_;
  HamiltonianMatrix h0_;
  EigenSystem eig_;
  SequenceOptions opts_;
  mutable std::mutex mutex_;
  mutable std::map<std::tuple<double, double, double, double>,
                   std::shared_ptr<const DrivenPropagator>> cache_;
};

/// Final readout expectation of a pulse sequence.
inline double run_sequence(const SpinSystemParams &params, Orbital orbital, const Vec3 &B0,
                           const PulseSequence &seq, SequenceOptions opts = {}) {
  return SequenceRunner(params, orbital, B0, opts).run(seq);
}

/// Sweeps the duration of one segment, e.g. a Rabi (drive) or Ramsey (wait)
/// scan. Returns the readout observable per duration.
inline TimeTrace duration_sweep(const SequenceRunner &runner, const PulseSequence &seq,
                                std::size_t segment, const std::vector<double> &durations) {
  require(segment < seq.segments.size(), "duration_sweep: segment index out of range");
  require(!seq.segments[segment].calibrate, "duration_sweep: swept segment must not be calibrated");
  require_ascending(durations, "duration_sweep");
  auto values = parallel_map(durations.size(), [&](std::size_t i) {
    PulseSequence s = seq;
    s.segments[segment].duration = durations[i];
    return runner.run(s);
  });
  return {durations, std::move(values)};
}

// Ramsey: pi/2 - wait - pi/2 on a labeled pair, drive detuned by `detuning`.
inline PulseSequence ramsey_sequence(const SequenceRunner &runner, BasisLabel from, BasisLabel to,
                                     const Vec3 &b1, double detuning) {
  PulseSequence seq;
  seq.rho0 = pure_state(runner.hamiltonian().labels, from);
  const auto [freq, half_pi] = runner.resolve({from, to, 0.5, 0.0}, b1);
  seq.segments = {PulseSegment::drive(freq + detuning, b1, half_pi), PulseSegment::wait(0.0),
                  PulseSegment::drive(freq + detuning, b1, half_pi),
                  PulseSegment::readout(Observable::population(to))};
  return seq;
}

struct NmrScanConfig {
  int manifold = 0;                  ///< electron level hosting the RF transitions
  std::vector<double> nuclear_pops;  ///< initial GS m_s = 0 nuclear populations, m_I descending
  Vec3 rf_B1{10.0, 0.0, 0.0};        ///< G
  double pulse_len = 10.0;           ///< us
  Vec3 mw_B1{0.5, 0.0, 0.0};         ///< G, transfer pulses for manifold != 0
  std::optional<Observable> readout; ///< when set, y = (after - before) / before of this observable
};

/// NMR spectrum: for each RF frequency, optionally transfer m_s = 0 -> manifold
/// with a MW pi pulse on the maximal-m_I line, apply the RF square pulse,
/// transfer back, and record the drop in nuclear polarization <I_z>.
inline Spectrum nmr_frequency_scan(const SpinSystemParams &params, Orbital orbital, const Vec3 &B0,
                                   const NmrScanConfig &cfg, const std::vector<double> &freq_grid,
                                   SequenceOptions opts = {}) {
  require_ascending(freq_grid, "nmr_frequency_scan");
  require(cfg.manifold >= -1 && cfg.manifold <= 1, "nmr_frequency_scan: manifold must be -1, 0, +1");
  SequenceRunner runner(params, orbital, B0, opts);
  const auto &labels = runner.hamiltonian().labels;
  std::vector<double> pops = cfg.nuclear_pops;
  if (pops.empty()) {
    pops.assign(static_cast<std::size_t>(params.species.spin.dim()), 0.0);
    pops[0] = 1.0;
  }
  const CMatrix rho0 = nuclear_mixture(labels, 0, pops);
  const int top = params.species.spin.twice;
  const Observable obs = cfg.readout.value_or(Observable::polarization());
  const double before = obs.evaluate(rho0, labels);
  if (cfg.readout)
    require(before != 0.0, "nmr_frequency_scan: reference signal is zero");

  auto values = parallel_map(freq_grid.size(), [&](std::size_t i) {
    PulseSequence seq;
    seq.rho0 = rho0;
    if (cfg.manifold != 0)
      seq.segments.push_back(PulseSegment::pulse({{0, top}, {cfg.manifold, top}, 1.0, 0.0}, cfg.mw_B1));
    seq.segments.push_back(PulseSegment::drive(freq_grid[i], cfg.rf_B1, cfg.pulse_len));
    if (cfg.manifold != 0)
      seq.segments.push_back(PulseSegment::pulse({{cfg.manifold, top}, {0, top}, 1.0, 0.0}, cfg.mw_B1));
    seq.segments.push_back(PulseSegment::readout(obs));
    const double after = runner.run(seq);
    return cfg.readout ? (after - before) / before : before - after;
  });

  Spectrum out;
  out.x = freq_grid;
  out.y = std::move(values);
  out.x_unit = "freq_MHz";
  out.y_unit = cfg.readout ? "relative_change" : "polarization_drop";
  out.meta["manifold"] = std::to_string(cfg.manifold);
  out.meta["pulse_len_us"] = std::to_string(cfg.pulse_len);
  return out;
}

/// Pulsed ESR: a MW square pulse of fixed length from a nuclear mixture in
/// m_s = 0; records the m_s = 0 population left (dips at resonance). With a
/// readout observable, y is its relative change (after - before) / before.
inline Spectrum esr_frequency_scan(const SpinSystemParams &params, const Vec3 &B0,
                                   const std::vector<double> &nuclear_pops, const Vec3 &mw_B1,
                                   double pulse_len, const std::vector<double> &freq_grid,
                                   SequenceOptions opts = {},
                                   const std::optional<Observable> &readout = std::nullopt) {
  require_ascending(freq_grid, "esr_frequency_scan");
  SequenceRunner runner(params, Orbital::GS, B0, opts);
  const auto &labels = runner.hamiltonian().labels;
  const CMatrix rho0 = nuclear_mixture(labels, 0, nuclear_pops);
  const Observable obs = readout.value_or(Observable::electron(0));
  const double before = obs.evaluate(rho0, labels);
  if (readout)
    require(before != 0.0, "esr_frequency_scan: reference signal is zero");
  auto values = parallel_map(freq_grid.size(), [&](std::size_t i) {
    PulseSequence seq;
    seq.rho0 = rho0;
    seq.segments = {PulseSegment::drive(freq_grid[i], mw_B1, pulse_len),
                    PulseSegment::readout(obs)};
    const double after = runner.run(seq);
    return readout ? (after - before) / before : after;
  });
  Spectrum out;
  out.x = freq_grid;
  out.y = std::move(values);
  out.x_unit = "freq_MHz";
  out.y_unit = readout ? "relative_change" : "ms0_population";
  return out;
}

} // namespace nvspin
