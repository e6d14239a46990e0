#pragma once

// Command-line front end. Every subcommand reads one RunConfig (JSON file
// plus --set overrides) and writes CSV or JSON to --output or stdout.
// Exit codes: 0 success, 1 physics or convergence failure, 2 config or usage error.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nvspin/dynamics.hpp"
#include "nvspin/fitting.hpp"
#include "nvspin/floquet.hpp"
#include "nvspin/io.hpp"
#include "nvspin/pumping.hpp"
#include "nvspin/spin_core.hpp"

namespace nvspin::cli {

struct Invocation {
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output;
  bool no_timestamp = false;
  bool dump_config = false;
};

namespace detail {

struct Context {
  Invocation inv;
  RunConfig cfg;
  CsvOptions csv;
  std::ostream &out;
  std::ostream &err;

  std::filesystem::path config_dir() const {
    if (inv.config_path.empty())
      return std::filesystem::current_path();
    return std::filesystem::absolute(inv.config_path).parent_path();
  }
};

// Routes data to the configured file, or to `out` for "-".
inline void emit(Context &ctx, const std::function<void(std::ostream &)> &write) {
  const std::string path = ctx.inv.output.empty() ? ctx.cfg.output_path : ctx.inv.output;
  if (path.empty() || path == "-") {
    write(ctx.out);
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw ConfigError("cannot write output file '" + path + "'");
  write(f);
}

inline void emit_spectrum(Context &ctx, Spectrum s) {
  s.meta["command"] = ctx.inv.command;
  if (!ctx.cfg.description.empty())
    s.meta["description"] = ctx.cfg.description;
  emit(ctx, [&](std::ostream &os) { write_spectrum_csv(os, s, ctx.csv); });
}

inline void maybe_noise(const Context &ctx, Spectrum &s) {
  if (ctx.cfg.noise_sigma > 0.0) {
    add_gaussian_noise(s, ctx.cfg.noise_sigma, ctx.cfg.seed);
    s.meta["noise_sigma"] = format_double(ctx.cfg.noise_sigma);
    s.meta["seed"] = std::to_string(ctx.cfg.seed);
  }
}

inline std::string join_numbers(const std::vector<double> &v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out += (i ? " " : "") + format_double(v[i]);
  return out;
}

inline double axial_field(const RunConfig &c, const char *what) {
  const Vec3 &b = c.field.B0;
  if (b.x() != 0.0 || b.y() != 0.0)
    throw ConfigError(std::string("field.B0_gauss: ") + what + " requires an axial field");
  return b.z();
}

inline PumpOptions pump_options(const RunConfig &c) {
  PumpOptions o;
  o.tol = c.pump.tol;
  o.max_cycles = c.pump.max_cycles;
  o.n_readout_cycles = c.pump.readout_cycles;
  o.trace_stride = c.pump.trace_stride;
  return o;
}

// Fluorescence weight per GS basis state from the ESLAC dark-pass count.
inline Observable fluorescence_readout(const RunConfig &c) {
  const double bz = axial_field(c, "fluorescence readout");
  const auto cm = build_optical_cycle(c.system, c.cycle, bz);
  return Observable::weighted(fluorescence_weights(state_dark_passes(cm, c.pump.readout_cycles), c.cycle));
}

inline std::vector<double> uniform(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_levels(Context &ctx) {
  const auto &c = ctx.cfg;
  const auto h = assemble_hamiltonian(c.system, c.orbital, c.field.B0);
  const auto es = eigensolve(h);
  std::vector<std::vector<std::string>> rows;
  for (Eigen::Index k = 0; k < es.dim(); ++k) {
    const auto [bare, w] = es.dominant(k);
    const auto &l = h.labels[static_cast<std::size_t>(bare)];
    rows.push_back({std::to_string(k), std::to_string(l.ms), format_double(l.mI()),
                    format_double(es.values[k]), format_double(w)});
  }
  std::map<std::string, std::string> meta{{"command", "levels"},
                                          {"orbital", std::string(to_string(c.orbital))},
                                          {"species", std::string(to_string(c.system.species.id))}};
  emit(ctx, [&](std::ostream &os) {
    write_table_csv(os, {"index", "ms", "mI", "energy_MHz", "weight"}, rows, meta, ctx.csv);
  });
  return 0;
}

inline int cmd_eslac(Context &ctx) {
  const auto &c = ctx.cfg;
  const double b = eslac_field(c.system);
  std::vector<std::vector<std::string>> rows{
      {"eslac_field_gauss", format_double(b)},
      {"zfs_es_over_gamma_e_gauss", format_double(c.system.zfs_es / c.system.gamma_e)}};
  for (const int m2 : nuclear_levels(c.system.species.spin)) {
    for (const auto branch : {FlipFlopBranch::Lower, FlipFlopBranch::Upper}) {
      try {
        const auto ff = eslac_flip_flop_probability(c.system, b, m2, c.cycle.es_lifetime, branch);
        const std::string tag = std::string(branch == FlipFlopBranch::Lower ? "lower" : "upper") +
                                "_flip_flop_probability_2mI_" + std::to_string(m2);
        rows.push_back({tag, format_double(ff.probability)});
      } catch (const InvalidArgument &) {
        // no partner level for this m_I
      }
    }
  }
  emit(ctx, [&](std::ostream &os) {
    write_table_csv(os, {"quantity", "value"}, rows, {{"command", "eslac"}}, ctx.csv);
  });
  return 0;
}

inline int cmd_esr(Context &ctx) {
  const auto &c = ctx.cfg;
  const std::size_t dim = static_cast<std::size_t>(c.system.species.spin.dim());
  std::vector<double> pops = c.esr.nuclear_populations;
  std::string source = "config";
  if (c.esr.pumped) {
    pops = pump_to_steady_state(c.system, c.cycle, axial_field(c, "esr.pumped"), pump_options(c))
               .steady.populations;
    source = "pumped";
  } else if (pops.empty()) {
    pops = uniform(dim);
    source = "uniform";
  }
  if (pops.size() != dim)
    throw ConfigError("esr.nuclear_populations: expected " + std::to_string(dim) + " entries");
  std::optional<Observable> readout;
  if (c.esr.readout == Readout::Fluorescence)
    readout = fluorescence_readout(c);
  Spectrum s = esr_frequency_scan(c.system, c.field.B0, pops, c.esr.mw_B1, c.esr.pulse_us,
                                  c.scan.values(), {}, readout);
  s.meta["nuclear_populations"] = join_numbers(pops);
  s.meta["population_source"] = source;
  maybe_noise(ctx, s);
  emit_spectrum(ctx, std::move(s));
  return 0;
}

inline int cmd_nmr(Context &ctx) {
  const auto &c = ctx.cfg;
  NmrScanConfig scan = c.nmr.scan;
  if (c.nmr.readout == Readout::Fluorescence)
    scan.readout = fluorescence_readout(c);
  Spectrum s = nmr_frequency_scan(c.system, c.orbital, c.field.B0, scan, c.scan.values());
  maybe_noise(ctx, s);
  emit_spectrum(ctx, std::move(s));
  return 0;
}

inline int cmd_rabi(Context &ctx) {
  const auto &c = ctx.cfg;
  const auto &r = c.rabi;
  SequenceOptions opts;
  opts.coherence_time = r.coherence_time_us;
  SequenceRunner runner(c.system, c.orbital, c.field.B0, opts);
  const auto &labels = runner.hamiltonian().labels;
  const bool transfer = r.transfer && r.from.ms != 0;
  if (transfer && r.to.ms != r.from.ms)
    throw ConfigError("rabi: with transfer, 'from' and 'to' must share an electron level");
  const BasisLabel start = transfer ? BasisLabel{0, r.from.two_mI} : r.from;

  const auto [resolved, pi_len] = runner.resolve({r.from, r.to, 1.0, 0.0}, r.B1);
  const double freq = r.freq_mhz.value_or(resolved);
  const Observable obs = r.readout == Readout::Fluorescence ? fluorescence_readout(c)
                                                            : Observable::population(r.to);

  PulseSequence seq;
  seq.rho0 = pure_state(labels, start);
  if (transfer)
    seq.segments.push_back(PulseSegment::pulse({start, r.from, 1.0, 0.0}, r.mw_B1));
  seq.segments.push_back(PulseSegment::drive(freq, r.B1, 0.0));
  if (transfer)
    seq.segments.push_back(PulseSegment::pulse({r.from, start, 1.0, 0.0}, r.mw_B1));
  seq.segments.push_back(PulseSegment::readout(obs));

  const TimeTrace trace = duration_sweep(runner, seq, transfer ? 1 : 0, c.sweep.values());
  Spectrum s = trace.to_spectrum(r.readout == Readout::Fluorescence ? "fluorescence" : "population");
  s.meta["drive_freq_mhz"] = format_double(freq);
  s.meta["omega_eff_mhz"] = format_double(1.0 / (2.0 * pi_len));
  s.meta["from"] = r.from.str();
  s.meta["to"] = r.to.str();
  if (r.from.ms != 0 && r.from.ms == r.to.ms) {
    const auto est = enhanced_rabi_frequency(c.system, r.B1.norm(), r.from.ms, c.field.B0.z());
    const int lower = std::min(r.from.two_mI, r.to.two_mI);
    const double ix = nuclear_ix_element(c.system.species.spin, lower);
    s.meta["enhanced_rabi_estimate_mhz"] = format_double(ix * est.enhanced);
    s.meta["bare_rabi_estimate_mhz"] = format_double(ix * est.bare);
  }
  maybe_noise(ctx, s);
  emit_spectrum(ctx, std::move(s));
  return 0;
}

inline int cmd_ramsey(Context &ctx) {
  const auto &c = ctx.cfg;
  const auto &r = c.ramsey;
  SequenceOptions opts;
  opts.coherence_time = r.coherence_time_us;
  SequenceRunner runner(c.system, c.orbital, c.field.B0, opts);
  const PulseSequence seq = ramsey_sequence(runner, r.from, r.to, r.B1, r.detuning_mhz);
  Spectrum s = duration_sweep(runner, seq, 1, c.sweep.values()).to_spectrum("population");
  s.meta["detuning_mhz"] = format_double(r.detuning_mhz);
  s.meta["from"] = r.from.str();
  s.meta["to"] = r.to.str();
  maybe_noise(ctx, s);
  emit_spectrum(ctx, std::move(s));
  return 0;
}

inline int cmd_floquet(Context &ctx) {
  const auto &c = ctx.cfg;
  if (c.floquet.table_freq_mhz) {
    const auto h0 = assemble_hamiltonian(c.system, c.orbital, c.field.B0);
    const auto t = avg_transition_probabilities(h0.entries, drive_coupling(c.system, c.field.B1),
                                                *c.floquet.table_freq_mhz, c.floquet.cfg, h0.labels);
    std::vector<std::string> header{"from"};
    for (const auto &l : t.labels)
      header.push_back(l.str());
    header.push_back("overlap");
    std::vector<std::vector<std::string>> rows;
    for (std::size_t a = 0; a < t.labels.size(); ++a) {
      std::vector<std::string> row{t.labels[a].str()};
      for (std::size_t b = 0; b < t.labels.size(); ++b)
        row.push_back(format_double(t.probs(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b))));
      row.push_back(format_double(t.label_overlap[a]));
      rows.push_back(std::move(row));
    }
    std::map<std::string, std::string> meta{{"command", "floquet-scan"},
                                            {"drive_freq_mhz", format_double(t.drive_freq)},
                                            {"n_max", std::to_string(t.n_max)},
                                            {"converged", t.converged ? "true" : "false"},
                                            {"ambiguous", t.ambiguous ? "true" : "false"}};
    emit(ctx, [&](std::ostream &os) { write_table_csv(os, header, rows, meta, ctx.csv); });
    return 0;
  }
  Spectrum s = probability_spectrum(c.system, c.orbital, c.field.B0, c.field.B1, c.scan.values(),
                                    c.floquet.cfg, c.floquet.aggregation);
  emit_spectrum(ctx, std::move(s));
  return 0;
}

inline int cmd_polarization(Context &ctx) {
  const auto &c = ctx.cfg;
  Spectrum s = polarization_spectrum(c.system, c.field.B0, c.field.B1, c.scan.values(), c.rates(),
                                     c.floquet.cfg);
  emit_spectrum(ctx, std::move(s));
  return 0;
}

inline int cmd_pump(Context &ctx) {
  const auto &c = ctx.cfg;
  const auto res = pump_to_steady_state(c.system, c.cycle, axial_field(c, "pump"), pump_options(c));
  Spectrum s;
  s.x_unit = "cycle";
  s.y_unit = "polarization";
  if (res.trace.empty()) {
    s.x = {static_cast<double>(res.cycles)};
    s.y = {res.steady.polarization};
  } else {
    for (std::size_t k = 0; k < res.trace.size(); ++k) {
      s.x.push_back(static_cast<double>((k + 1) * c.pump.trace_stride));
      s.y.push_back(res.trace[k]);
    }
  }
  s.meta["cycles"] = std::to_string(res.cycles);
  s.meta["polarization"] = format_double(res.steady.polarization);
  s.meta["nuclear_populations"] = join_numbers(res.steady.populations);
  s.meta["dark_passes"] = join_numbers(res.dark_passes);
  s.meta["fluorescence"] =
      format_double(fluorescence_signal(res.steady.populations, res.dark_passes, c.cycle));
  emit_spectrum(ctx, std::move(s));
  return 0;
}

inline int cmd_fit(Context &ctx) {
  const auto &c = ctx.cfg;
  const auto &f = c.fit;
  json report;
  FitResult best;
  if (f.model == "hyperfine") {
    HyperfineOptions opt;
    opt.fit_a_perp = f.fit_a_perp;
    opt.a_perp_fixed = f.a_perp_fixed_mhz;
    opt.second_manifold = f.second_manifold;
    const auto hf = extract_hyperfine(f.lines_ms0_mhz, f.lines_ms1_mhz, f.B0z_gauss,
                                      c.system.species.id, opt, c.system);
    best = hf.best;
    const json lines = {{"lines_ms0_mhz", f.lines_ms0_mhz}, {"lines_ms1_mhz", f.lines_ms1_mhz}};
    report = fit_to_json(best, hash_string(lines.dump()), config_hash(c));
    json branches = json::array();
    for (const auto &b : hf.branches)
      branches.push_back(fit_to_json(b));
    for (auto &b : branches) {
      b.erase("input_hash");
      b.erase("config_hash");
      b.erase("version");
    }
    report["branches"] = branches;
  } else {
    if (f.input_csv.empty())
      throw ConfigError("fit.input_csv: required for model '" + f.model + "'");
    std::filesystem::path p(f.input_csv);
    if (p.is_relative())
      p = ctx.config_dir() / p;
    const std::string text = read_file(p.string());
    std::istringstream in(text);
    const Spectrum spec = read_spectrum_csv(in, p.string());
    if (f.model == "lorentzian") {
      best = fit_lorentzians(spec, f.n_peaks, f.shared_width);
    } else if (f.model == "square_pulse") {
      best = fit_square_pulse(spec, f.pulse_us);
    } else {
      best = fit_sinusoid(TimeTrace::from_spectrum(spec), f.model == "damped_sinusoid", {}, spec.y_err);
    }
    report = fit_to_json(best, hash_string(text), config_hash(c));
    if (f.model == "lorentzian" && best.converged) {
      try {
        json pops = json::array();
        for (const auto &[center, pop] : populations_from_depths(best))
          pops.push_back({{"center", center}, {"population", pop}});
        report["populations"] = pops;
      } catch (const InvalidArgument &) {
        report["populations"] = nullptr;
      }
    }
  }
  emit(ctx, [&](std::ostream &os) { write_fit_json(os, report); });
  if (!best.converged) {
    ctx.err << "nvspin fit: did not converge";
    for (const auto &fl : best.flags)
      ctx.err << " [" << fl << "]";
    ctx.err << "\n";
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Selftest: closed-form behaviors that any build must reproduce.

struct Check {
  std::string name;
  std::function<bool(std::string &)> run;
};

inline bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

inline std::vector<Check> selftest_checks() {
  std::vector<Check> checks;
  auto add = [&](std::string name, std::function<bool(std::string &)> fn) {
    checks.push_back({std::move(name), std::move(fn)});
  };

  add("spin-1 Sz is diag(1,0,-1)", [](std::string &) {
    const auto s = build_spin_operators(SpinQuantum::one());
    const RMatrix want = Eigen::Vector3d(1, 0, -1).asDiagonal();
    return (s.z - want.cast<cplx>()).norm() == 0.0;
  });
  add("spin-1/2 Casimir is 3/4", [](std::string &) {
    const auto s = build_spin_operators(SpinQuantum::half());
    const CMatrix c = s.x * s.x + s.y * s.y + s.z * s.z;
    return (c - 0.75 * CMatrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-15;
  });
  add("spin-1 [Sx,Sy] = i Sz", [](std::string &) {
    const auto s = build_spin_operators(SpinQuantum::one());
    return (s.x * s.y - s.y * s.x - cplx(0, 1) * s.z).cwiseAbs().maxCoeff() < 1e-15;
  });
  add("GS N14 at zero field: {0 x3, 2870 x6}", [](std::string &why) {
    auto p = SpinSystemParams::defaults(Species::N14);
    p.A_par_gs = p.A_perp_gs = p.quad_P_gs = 0.0;
    const auto es = eigensolve(assemble_hamiltonian(p, Orbital::GS, Vec3::Zero()));
    for (Eigen::Index k = 0; k < 9; ++k)
      if (!near(es.values[k], k < 3 ? 0.0 : 2870.0, 1e-9)) {
        why = "eigenvalue " + std::to_string(k) + " = " + format_double(es.values[k]);
        return false;
      }
    return true;
  });
  add("eigensolve diag(3,1,2) -> (1,2,3)", [](std::string &) {
    CMatrix h = CMatrix::Zero(3, 3);
    h(0, 0) = 3;
    h(1, 1) = 1;
    h(2, 2) = 2;
    const auto es = eigensolve(h);
    return near(es.values[0], 1, 1e-14) && near(es.values[1], 2, 1e-14) && near(es.values[2], 3, 1e-14);
  });
  add("eigensolve Pauli-x", [](std::string &) {
    CMatrix h = CMatrix::Zero(2, 2);
    h(0, 1) = h(1, 0) = 1;
    const auto es = eigensolve(h);
    const double r = 1.0 / std::sqrt(2.0);
    return near(es.values[0], -1, 1e-14) && near(es.values[1], 1, 1e-14) &&
           std::abs(es.vectors(0, 0) - r) < 1e-14 && std::abs(es.vectors(1, 0) + r) < 1e-14 &&
           std::abs(es.vectors(0, 1) - r) < 1e-14 && std::abs(es.vectors(1, 1) - r) < 1e-14;
  });
  add("identity coupling gives an empty catalog", [](std::string &) {
    const auto p = SpinSystemParams::defaults(Species::N14);
    const auto es = eigensolve(assemble_hamiltonian(p, Orbital::GS, Vec3(0, 0, 509)));
    return transition_catalog(es, CMatrix::Identity(9, 9)).empty();
  });
  add("ESLAC field without hyperfine is D/gamma_e", [](std::string &why) {
    auto p = SpinSystemParams::defaults(Species::N14);
    p.A_par_es = p.A_perp_es = p.quad_P_es = 0.0;
    const double b = eslac_field(p);
    why = format_double(b);
    return near(b, 1420.0 / 2.799, 1e-6);
  });
  add("doubling gamma_e halves the ESLAC field", [](std::string &) {
    auto p = SpinSystemParams::defaults(Species::N14);
    p.A_par_es = p.A_perp_es = p.quad_P_es = 0.0;
    const double b1 = eslac_field(p);
    p.gamma_e *= 2.0;
    return near(eslac_field(p), 0.5 * b1, 1e-6);
  });
  add("undriven eigenstates are stationary", [](std::string &) {
    const auto p = SpinSystemParams::defaults(Species::N14);
    const auto h = assemble_hamiltonian(p, Orbital::GS, Vec3(0, 0, 509));
    const auto es = eigensolve(h);
    const CVector psi = es.vectors.col(4);
    const CVector out = propagate(h.entries, CMatrix::Zero(9, 9), 1.0, psi, 3.7);
    return std::abs(std::norm(out.dot(psi)) - 1.0) < 1e-10;
  });
  add("square pulse: pi pulse on resonance is 1", [](std::string &) {
    return near(square_pulse_lineshape(0.3, 0.0, 1.0 / 0.6), 1.0, 1e-14);
  });
  add("square pulse: no drive gives 0", [](std::string &) {
    return square_pulse_lineshape(0.0, 0.2, 3.0) == 0.0 && square_pulse_lineshape(0.0, 0.0, 1.0) == 0.0;
  });
  add("enhanced Rabi with A_perp = 0 is gamma_n B", [](std::string &) {
    auto p = SpinSystemParams::defaults(Species::N14);
    p.A_perp_gs = 0.0;
    const auto r = enhanced_rabi_frequency(p, 10.0, -1);
    return near(r.enhanced, std::abs(p.species.gamma_n) * 10.0, 1e-15);
  });
  add("zero-duration sequence leaves the observable", [](std::string &) {
    const auto p = SpinSystemParams::defaults(Species::N14);
    SequenceRunner runner(p, Orbital::GS, Vec3(0, 0, 509));
    PulseSequence seq;
    seq.rho0 = pure_state(runner.hamiltonian().labels, {0, 2});
    seq.segments = {PulseSegment::drive(5.0, Vec3(10, 0, 0), 0.0), PulseSegment::wait(0.0),
                    PulseSegment::readout(Observable::population({0, 2}))};
    return near(runner.run(seq), 1.0, 1e-14);
  });
  add("Floquet with V = 0 replicates H0", [](std::string &) {
    CMatrix h0 = CMatrix::Zero(2, 2);
    h0(0, 0) = -0.5;
    h0(1, 1) = 0.7;
    const CMatrix f = build_floquet_matrix(h0, CMatrix::Zero(2, 2), 3.0, 2);
    Eigen::SelfAdjointEigenSolver<CMatrix> s(f);
    std::vector<double> want;
    for (int n = -2; n <= 2; ++n)
      for (double l : {-0.5, 0.7})
        want.push_back(l + 3.0 * n);
    std::sort(want.begin(), want.end());
    for (std::size_t i = 0; i < want.size(); ++i)
      if (!near(s.eigenvalues()[static_cast<Eigen::Index>(i)], want[i], 1e-12))
        return false;
    return true;
  });
  add("Floquet layout for d = 2, n_max = 1", [](std::string &) {
    CMatrix h0(2, 2), v(2, 2);
    h0 << 1, 0, 0, 2;
    v << 0, 4, 4, 0;
    const CMatrix f = build_floquet_matrix(h0, v, 10.0, 1);
    return f.rows() == 6 && f(0, 0).real() == -9.0 && f(2, 2).real() == 1.0 && f(5, 5).real() == 12.0 &&
           f(0, 3).real() == 2.0 && f(3, 0).real() == 2.0 && f(0, 5).real() == 0.0;
  });
  add("Floquet with V = 0 gives the identity", [](std::string &) {
    const auto p = SpinSystemParams::defaults(Species::N14);
    const auto h = assemble_hamiltonian(p, Orbital::ES, Vec3(0, 0, 50));
    const auto t = avg_transition_probabilities(h.entries, CMatrix::Zero(9, 9), 100.0);
    return (t.probs - RMatrix::Identity(9, 9)).cwiseAbs().maxCoeff() < 1e-12;
  });
  add("resonant two-level average is 1/2", [](std::string &why) {
    CMatrix h0 = CMatrix::Zero(2, 2), v = CMatrix::Zero(2, 2);
    h0(1, 1) = 10.0;
    v(0, 1) = v(1, 0) = 0.2;
    FloquetConfig cfg;
    cfg.n_max = 4;
    const auto t = avg_transition_probabilities(h0, v, 10.0, cfg);
    why = format_double(t(0, 1));
    return near(t(0, 1), 0.5, 2e-3);
  });
  add("flip-flop at resonance is x^2/(2(1+x^2))", [](std::string &why) {
    auto p = SpinSystemParams::defaults(Species::N14);
    p.quad_P_es = 0.0;
    // secular diagonals: (0,0) at 0, (-1,+1) at D - gamma_e B - gamma_n B - A_par
    const double b = (p.zfs_es - p.A_par_es) / (p.gamma_e + p.species.gamma_n);
    const auto ff = eslac_flip_flop_probability(p, b, 0, 0.012);
    const double x = kTwoPi * ff.coupling * 0.012;
    why = format_double(ff.detuning);
    return std::abs(ff.detuning) < 1e-8 && near(ff.probability, 0.5 * x * x / (1 + x * x), 1e-9);
  });
  add("flip-flop far off resonance vanishes", [](std::string &) {
    const auto p = SpinSystemParams::defaults(Species::N14);
    return eslac_flip_flop_probability(p, 0.0, 0, 0.012).probability < 1e-2;
  });
  add("pumping without mixing leaves populations", [](std::string &) {
    auto p = SpinSystemParams::defaults(Species::N14);
    p.A_perp_es = 0.0;
    OpticalCycleParams cyc;
    cyc.nuclear_depol_per_cycle = 0.0;
    PumpOptions o;
    o.initial = std::vector<double>(9, 0.0);
    (*o.initial)[3] = 0.5;
    (*o.initial)[4] = 0.3;
    (*o.initial)[5] = 0.2;
    o.trace_stride = 0;
    const auto r = pump_to_steady_state(p, cyc, 509.0, o);
    return near(r.steady.populations[0], 0.5, 1e-9) && near(r.steady.populations[1], 0.3, 1e-9) &&
           near(r.steady.populations[2], 0.2, 1e-9);
  });
  add("rate model: up-only drive fully polarizes", [](std::string &) {
    PairAggregates up;
    up.up_inter = 1.0;
    const auto r = equilibrium_polarization({up, up}, {0.0, 1.0, 0.0});
    return near(r.polarization, 1.0, 1e-12) && !r.degenerate;
  });
  add("rate model: symmetric drive is unpolarized", [](std::string &) {
    PairAggregates s;
    s.up_inter = s.down_inter = 0.3;
    const auto r = equilibrium_polarization({s, s}, {2.5, 1.0, 1e-5});
    return near(r.polarization, 0.0, 1e-12);
  });
  add("rate model: no rates is flagged and uniform", [](std::string &) {
    const auto r = equilibrium_polarization({PairAggregates{}, PairAggregates{}}, {0.0, 0.0, 0.0});
    return r.degenerate && near(r.populations[0], 1.0 / 3.0, 1e-15);
  });
  add("fluorescence of a bright state is 1", [](std::string &) {
    return near(fluorescence_signal({1.0, 0.0}, {0.0, 2.0}, {}), 1.0, 1e-15);
  });
  add("fluorescence drops with dark passes", [](std::string &) {
    return fluorescence_signal({0.0, 1.0}, {0.0, 2.0}, {}) < fluorescence_signal({1.0, 0.0}, {0.0, 2.0}, {});
  });
  add("Lorentzian fit round trip", [](std::string &why) {
    RVector truth(6);
    truth << 1.0, 4.8, 0.3, 5.1, 0.2, 0.02;
    const auto spec = synthesize(linspace(4.5, 5.5, 201),
                                 [&](double x) { return lorentzian_comb(x, truth, 2, true, nullptr); });
    const auto f = fit_lorentzians(spec, 2, true);
    why = f.converged ? format_double(f.value("center_1")) : "not converged";
    return f.converged && near(f.value("center_1"), 4.8, 1e-6) && near(f.value("center_2"), 5.1, 1e-6);
  });
  add("square pulse fit round trip", [](std::string &why) {
    RVector truth(4);
    truth << 5.0, 0.05, 1.0, 0.0;
    const auto spec = synthesize(linspace(4.8, 5.2, 161),
                                 [&](double x) { return square_pulse_model(x, truth, 10.0, nullptr); });
    const auto f = fit_square_pulse(spec, 10.0);
    why = f.converged ? format_double(f.value("rabi")) : "not converged";
    return f.converged && near(f.value("omega_res"), 5.0, 1e-6) && near(f.value("rabi"), 0.05, 1e-6);
  });
  add("populations from equal depths are equal", [](std::string &) {
    FitResult f;
    f.names = {"baseline", "center_1", "center_2", "depth_1", "depth_2", "width"};
    f.values = {1.0, 5.0, 4.0, 0.2, 0.2, 0.01};
    const auto p = populations_from_depths(f);
    return p.size() == 2 && p[0].first == 4.0 && near(p[0].second, 0.5, 1e-15);
  });
  add("config normalization is idempotent", [](std::string &) {
    const auto a = load_config_text("{}", "<selftest>");
    const auto b = load_config_text(normalized_dump(a), "<selftest>");
    return normalized_dump(a) == normalized_dump(b);
  });
  add("config key B0 suggests B0_gauss", [](std::string &why) {
    try {
      load_config_text("{\"field\": {\"B0\": [0, 0, 509]}}", "<selftest>");
    } catch (const ConfigError &e) {
      why = e.what();
      return why.find("B0_gauss") != std::string::npos;
    }
    return false;
  });
  return checks;
}

inline int cmd_selftest(Context &ctx) {
  int failed = 0;
  for (const auto &c : selftest_checks()) {
    std::string why;
    bool ok = false;
    try {
      ok = c.run(why);
    } catch (const std::exception &e) {
      why = std::string("threw: ") + e.what();
    }
    ctx.out << (ok ? "PASS " : "FAIL ") << c.name;
    if (!ok && !why.empty())
      ctx.out << " (" << why << ")";
    ctx.out << "\n";
    failed += ok ? 0 : 1;
  }
  ctx.out << (failed ? std::to_string(failed) + " check(s) failed" : std::string("all checks passed"))
          << "\n";
  return failed ? 1 : 0;
}

} // namespace detail

inline const std::vector<std::pair<std::string, std::string>> &commands() {
  static const std::vector<std::pair<std::string, std::string>> list{
      {"levels", "eigenvalues of the static Hamiltonian"},
      {"eslac", "excited-state anticrossing field and flip-flop probabilities"},
      {"esr", "pulsed ESR frequency scan"},
      {"nmr", "NMR frequency scan (RF square pulse)"},
      {"rabi", "Rabi nutation versus drive duration"},
      {"ramsey", "Ramsey fringes versus free evolution"},
      {"floquet-scan", "Floquet nuclear-flip probabilities versus drive frequency"},
      {"polarization", "rate-model nuclear polarization versus drive frequency"},
      {"pump", "optical pumping at the ESLAC"},
      {"fit", "fit a spectrum or NMR lines"},
      {"selftest", "run the built-in closed-form checks"}};
  return list;
}

/// Runs one invocation after argument parsing.
inline int run(const Invocation &inv, std::ostream &out, std::ostream &err) {
  try {
    RunConfig cfg = inv.config_path.empty() ? load_config_text("", "<defaults>", inv.overrides)
                                            : load_config(inv.config_path, inv.overrides);
    detail::Context ctx{inv, cfg, {config_hash(cfg), !inv.no_timestamp}, out, err};
    if (inv.dump_config) {
      detail::emit(ctx, [&](std::ostream &os) { os << normalized_dump(cfg); });
      return 0;
    }
    static const std::map<std::string, int (*)(detail::Context &)> table{
        {"levels", detail::cmd_levels},     {"eslac", detail::cmd_eslac},
        {"esr", detail::cmd_esr},           {"nmr", detail::cmd_nmr},
        {"rabi", detail::cmd_rabi},         {"ramsey", detail::cmd_ramsey},
        {"floquet-scan", detail::cmd_floquet}, {"polarization", detail::cmd_polarization},
        {"pump", detail::cmd_pump},         {"fit", detail::cmd_fit},
        {"selftest", detail::cmd_selftest}};
    const auto it = table.find(inv.command);
    if (it == table.end()) {
      err << "nvspin: unknown command '" << inv.command << "'\n";
      return 2;
    }
    return it->second(ctx);
  } catch (const ConfigError &e) {
    err << "nvspin: config error:\n" << e.what() << "\n";
    return 2;
  } catch (const std::exception &e) {
    err << "nvspin " << inv.command << ": " << e.what() << "\n";
    return 1;
  }
}

inline int cli_main(int argc, const char *const *argv, std::ostream &out = std::cout,
                    std::ostream &err = std::cerr) {
  CLI::App app{"NV-center spin simulator"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  Invocation inv;
  for (const auto &[name, help] : commands()) {
    auto *sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", inv.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", inv.overrides, "override a config key, e.g. field.B0_gauss=[0,0,65]");
    sub->add_option("-o,--output", inv.output, "output file ('-' for stdout)")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    sub->add_flag("--no-timestamp", inv.no_timestamp, "omit the generation time header line");
    sub->add_flag("--dump-config", inv.dump_config, "print the normalized configuration and exit");
    sub->callback([&inv, name = name] { inv.command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion &e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError &e) {
    app.exit(e, out, err);
    return 2;
  }
  return run(inv, out, err);
}

} // namespace nvspin::cli
