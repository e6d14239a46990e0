#pragma once

// Run configuration (strict JSON schema with unit-suffixed keys), CSV
// spectra, and key-sorted JSON fit reports.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nvspin/dynamics.hpp"
#include "nvspin/fitting.hpp"
#include "nvspin/floquet.hpp"
#include "nvspin/pumping.hpp"
#include "nvspin/spectrum.hpp"
#include "nvspin/spin_core.hpp"

namespace nvspin {

using json = nlohmann::json;

inline constexpr const char *kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Hashing and number formatting

inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_string(std::string_view data) {
  std::ostringstream os;
  os << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(data);
  return os.str();
}

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  if (!s.empty() && s.front() == '+')
    s.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    return std::nullopt;
  return v;
}

inline std::string read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ConfigError({"cannot open '" + path + "'"});
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// ---------------------------------------------------------------------------
// Key locations

/// Line number of every object key in a JSON document, by dotted path
/// (array elements as [i]).
class KeyLocator {
public:
  explicit KeyLocator(std::string_view text) { scan(text); }
  KeyLocator() = default;

  std::optional<int> line(const std::string &path) const {
    auto it = lines_.find(path);
    if (it == lines_.end())
      return std::nullopt;
    return it->second;
  }

private:
  struct Frame {
    bool object;
    std::string path;
    std::string key;
    int index = 0;
  };

  void scan(std::string_view t) {
    std::vector<Frame> stack;
    int line = 1;
    bool expect_key = false;
    auto child = [&](const Frame &f) {
      if (f.object)
        return f.path.empty() ? f.key : f.path + "." + f.key;
      return f.path + "[" + std::to_string(f.index) + "]";
    };
    for (std::size_t i = 0; i < t.size(); ++i) {
      const char c = t[i];
      if (c == '\n') {
        ++line;
      } else if (c == '"') {
        std::string s;
        for (++i; i < t.size() && t[i] != '"'; ++i) {
          if (t[i] == '\\' && i + 1 < t.size())
            s += t[++i];
          else
            s += t[i];
          if (t[i] == '\n')
            ++line;
        }
        if (expect_key && !stack.empty() && stack.back().object) {
          stack.back().key = s;
          lines_.emplace(child(stack.back()), line);
          expect_key = false;
        }
      } else if (c == '{' || c == '[') {
        const std::string p = stack.empty() ? "" : child(stack.back());
        stack.push_back({c == '{', p, "", 0});
        expect_key = c == '{';
      } else if (c == '}' || c == ']') {
        if (!stack.empty())
          stack.pop_back();
        expect_key = false;
      } else if (c == ',') {
        if (!stack.empty()) {
          if (stack.back().object)
            expect_key = true;
          else
            ++stack.back().index;
        }
      }
    }
  }

  std::map<std::string, int> lines_;
};

inline std::size_t edit_distance(const std::string &a, const std::string &b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j)
    prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const bool same = std::tolower(static_cast<unsigned char>(a[i - 1])) ==
                        std::tolower(static_cast<unsigned char>(b[j - 1]));
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (same ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Known key closest to `bad`: a unit-suffixed form first, then edit distance.
inline std::optional<std::string> suggest_key(const std::string &bad,
                                              const std::vector<std::string> &known) {
  for (const auto &k : known)
    if (k.size() > bad.size() && k.compare(0, bad.size(), bad) == 0 && k[bad.size()] == '_')
      return k;
  std::optional<std::string> best;
  std::size_t best_d = std::max<std::size_t>(2, bad.size() / 3) + 1;
  for (const auto &k : known) {
    const std::size_t d = edit_distance(bad, k);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Schema reader

class SchemaReader {
public:
  SchemaReader(const json &root, const KeyLocator &loc, std::string source)
      : root_(root), loc_(loc), source_(std::move(source)) {}

  class Block {
  public:
    Block(SchemaReader &r, const json *obj, std::string path)
        : r_(r), obj_(obj), path_(std::move(path)) {}

    bool present() const { return obj_ != nullptr; }

    template <class T, class Conv> void get(const std::string &key, T &dst, Conv conv) {
      known_.push_back(key);
      if (!obj_)
        return;
      auto it = obj_->find(key);
      if (it == obj_->end())
        return;
      std::string why;
      if (!conv(*it, dst, why))
        r_.problem(path_ + "." + key, why);
    }

    void number(const std::string &key, double &dst, double lo = -HUGE_VAL, double hi = HUGE_VAL) {
      get(key, dst, [&](const json &j, double &d, std::string &why) {
        if (!j.is_number()) {
          why = "expected a number";
          return false;
        }
        const double v = j.get<double>();
        if (!std::isfinite(v) || v < lo || v > hi) {
          why = "value " + format_double(v) + " outside [" + format_double(lo) + ", " +
                format_double(hi) + "]";
          return false;
        }
        d = v;
        return true;
      });
    }

    void optional_number(const std::string &key, std::optional<double> &dst, double lo = -HUGE_VAL) {
      get(key, dst, [&](const json &j, std::optional<double> &d, std::string &why) {
        if (j.is_null()) {
          d.reset();
          return true;
        }
        if (!j.is_number() || !std::isfinite(j.get<double>()) || j.get<double>() < lo) {
          why = "expected null or a number >= " + format_double(lo);
          return false;
        }
        d = j.get<double>();
        return true;
      });
    }

    template <class I> void integer(const std::string &key, I &dst, long long lo, long long hi) {
      get(key, dst, [&](const json &j, I &d, std::string &why) {
        if (!j.is_number_integer()) {
          why = "expected an integer";
          return false;
        }
        const auto v = j.get<long long>();
        if (v < lo || v > hi) {
          why = "value " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                std::to_string(hi) + "]";
          return false;
        }
        d = static_cast<I>(v);
        return true;
      });
    }

    void boolean(const std::string &key, bool &dst) {
      get(key, dst, [](const json &j, bool &d, std::string &why) {
        if (!j.is_boolean()) {
          why = "expected true or false";
          return false;
        }
        d = j.get<bool>();
        return true;
      });
    }

    void string(const std::string &key, std::string &dst, const std::vector<std::string> &choices = {}) {
      get(key, dst, [&](const json &j, std::string &d, std::string &why) {
        if (!j.is_string()) {
          why = "expected a string";
          return false;
        }
        const auto v = j.get<std::string>();
        if (!choices.empty() && std::find(choices.begin(), choices.end(), v) == choices.end()) {
          why = "'" + v + "' is not one of";
          for (const auto &c : choices)
            why += " " + c;
          return false;
        }
        d = v;
        return true;
      });
    }

    void vec3(const std::string &key, Vec3 &dst) {
      get(key, dst, [](const json &j, Vec3 &d, std::string &why) {
        if (!j.is_array() || j.size() != 3 ||
            !std::all_of(j.begin(), j.end(), [](const json &e) { return e.is_number(); })) {
          why = "expected an array of 3 numbers";
          return false;
        }
        d = Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
        return d.allFinite() || (why = "non-finite component", false);
      });
    }

    void numbers(const std::string &key, std::vector<double> &dst) {
      get(key, dst, [](const json &j, std::vector<double> &d, std::string &why) {
        if (!j.is_array() ||
            !std::all_of(j.begin(), j.end(), [](const json &e) { return e.is_number(); })) {
          why = "expected an array of numbers";
          return false;
        }
        d = j.get<std::vector<double>>();
        return true;
      });
    }

    void label(const std::string &key, BasisLabel &dst);

    /// Reports every key present but never requested.
    void finish() {
      if (!obj_)
        return;
      for (auto it = obj_->begin(); it != obj_->end(); ++it) {
        if (std::find(known_.begin(), known_.end(), it.key()) != known_.end())
          continue;
        std::string msg = "unknown key";
        if (auto s = suggest_key(it.key(), known_))
          msg += " (did you mean \"" + *s + "\"?)";
        r_.problem(path_.empty() ? it.key() : path_ + "." + it.key(), msg);
      }
    }

    const std::string &path() const { return path_; }

  private:
    SchemaReader &r_;
    const json *obj_;
    std::string path_;
    std::vector<std::string> known_;
  };

  Block top() {
    if (!root_.is_object()) {
      problem("", "top level must be a JSON object");
      return Block(*this, nullptr, "");
    }
    return Block(*this, &root_, "");
  }

  Block block(Block &parent, const std::string &name) {
    std::string dummy;
    const json *found = nullptr;
    parent.get(name, dummy, [&](const json &j, std::string &, std::string &why) {
      if (!j.is_object()) {
        why = "expected an object";
        return false;
      }
      found = &j;
      return true;
    });
    return Block(*this, found, parent.path().empty() ? name : parent.path() + "." + name);
  }

  void problem(const std::string &path, const std::string &what) {
    std::string where = source_;
    if (auto l = loc_.line(path))
      where += ":" + std::to_string(*l);
    problems_.push_back(where + ": " + (path.empty() ? "" : "\"" + path + "\": ") + what);
  }

  const std::vector<std::string> &problems() const { return problems_; }

private:
  const json &root_;
  const KeyLocator &loc_;
  std::string source_;
  std::vector<std::string> problems_;
};

/// Accepts "(0,+1)", "0,-1/2", "(-1, 0)".
inline std::optional<BasisLabel> parse_basis_label(std::string s) {
  s.erase(std::remove_if(s.begin(), s.end(), [](char c) { return c == ' ' || c == '(' || c == ')'; }),
          s.end());
  const auto comma = s.find(',');
  if (comma == std::string::npos)
    return std::nullopt;
  auto ms = parse_double(s.substr(0, comma));
  std::string m = s.substr(comma + 1);
  int two_mI = 0;
  if (const auto slash = m.find('/'); slash != std::string::npos) {
    auto num = parse_double(m.substr(0, slash));
    if (!num || m.substr(slash + 1) != "2" || std::fmod(*num, 2.0) == 0.0)
      return std::nullopt;
    two_mI = static_cast<int>(*num);
  } else {
    auto v = parse_double(m);
    if (!v || *v != std::round(*v))
      return std::nullopt;
    two_mI = 2 * static_cast<int>(*v);
  }
  if (!ms || (*ms != -1.0 && *ms != 0.0 && *ms != 1.0))
    return std::nullopt;
  return BasisLabel{static_cast<int>(*ms), two_mI};
}

inline void SchemaReader::Block::label(const std::string &key, BasisLabel &dst) {
  get(key, dst, [](const json &j, BasisLabel &d, std::string &why) {
    if (!j.is_string()) {
      why = "expected a label string such as \"(0,+1)\"";
      return false;
    }
    auto l = parse_basis_label(j.get<std::string>());
    if (!l) {
      why = "cannot parse label '" + j.get<std::string>() + "'";
      return false;
    }
    d = *l;
    return true;
  });
}

// ---------------------------------------------------------------------------
// Run configuration

struct GridConfig {
  double start = 0.0;
  double stop = 1.0;
  std::size_t points = 101;

  std::vector<double> values() const { return linspace(start, stop, points); }
};

enum class Readout { Default, Fluorescence };

struct EsrBlock {
  std::vector<double> nuclear_populations; ///< empty: uniform
  bool pumped = false;                     ///< use ESLAC-pumped populations instead
  Vec3 mw_B1{0.5, 0.0, 0.0};
  double pulse_us = 1.0;
  Readout readout = Readout::Default;
};

struct NmrBlock {
  NmrScanConfig scan;
  Readout readout = Readout::Default;
};

struct RabiBlock {
  BasisLabel from{0, 2}, to{0, 0};
  Vec3 B1{10.0, 0.0, 0.0};
  std::optional<double> freq_mhz; ///< resolved from the eigenvalues when absent
  bool transfer = true;           ///< MW pi pulses into and out of from.ms when it is not 0
  Vec3 mw_B1{0.5, 0.0, 0.0};
  std::optional<double> coherence_time_us;
  Readout readout = Readout::Default;
};

struct RamseyBlock {
  BasisLabel from{0, 2}, to{0, 0};
  Vec3 B1{10.0, 0.0, 0.0};
  double detuning_mhz = 0.002;
  std::optional<double> coherence_time_us;
};

struct FloquetBlock {
  FloquetConfig cfg;
  Aggregation aggregation = Aggregation::Positive;
  std::optional<double> table_freq_mhz;
};

struct PumpBlock {
  double tol = 1e-13;
  std::size_t max_cycles = 2000000;
  std::size_t readout_cycles = 100;
  std::size_t trace_stride = 1;
};

struct FitBlock {
  std::string model = "lorentzian"; ///< lorentzian | square_pulse | sinusoid | damped_sinusoid | hyperfine
  std::string input_csv;
  int n_peaks = 3;
  bool shared_width = true;
  double pulse_us = 10.0;
  std::vector<double> lines_ms0_mhz, lines_ms1_mhz;
  double B0z_gauss = 509.0;
  bool fit_a_perp = true;
  double a_perp_fixed_mhz = 0.0;
  int second_manifold = -1;
};

struct RunConfig {
  std::string description;
  SpinSystemParams system = SpinSystemParams::defaults(Species::N14);
  Orbital orbital = Orbital::GS;
  FieldConfig field{Vec3(0.0, 0.0, 509.0), Vec3::Zero(), 0.0};
  GridConfig scan{4.5, 5.5, 201};
  GridConfig sweep{0.0, 20.0, 101};
  EsrBlock esr;
  NmrBlock nmr;
  RabiBlock rabi;
  RamseyBlock ramsey;
  FloquetBlock floquet;
  double Gamma_per_us = 1.0, gamma_over_Gamma = 2.5, k_eq_over_Gamma = 1e-5;
  OpticalCycleParams cycle;
  PumpBlock pump;
  FitBlock fit;
  double noise_sigma = 0.0;
  std::uint64_t seed = 1;
  std::string output_path = "-";

  RateParams rates() const {
    return {gamma_over_Gamma * Gamma_per_us, Gamma_per_us, k_eq_over_Gamma * Gamma_per_us};
  }
};

inline std::string label_string(BasisLabel l) { return l.str(); }

inline std::string readout_name(Readout r) { return r == Readout::Fluorescence ? "fluorescence" : "default"; }

inline RunConfig parse_config(const json &root, const KeyLocator &loc, const std::string &source) {
  SchemaReader reader(root, loc, source);
  RunConfig c;
  auto top = reader.top();
  top.string("description", c.description);
  top.number("noise_sigma", c.noise_sigma, 0.0);
  top.integer("seed", c.seed, 0, std::numeric_limits<long long>::max());

  std::string orbital = "GS";
  top.string("orbital", orbital, {"GS", "ES"});
  c.orbital = orbital == "ES" ? Orbital::ES : Orbital::GS;

  {
    auto b = reader.block(top, "system");
    std::string species = "N14";
    b.string("species", species, {"N14", "N15", "C13"});
    c.system = SpinSystemParams::defaults(*parse_species(species));
    b.number("zfs_gs_mhz", c.system.zfs_gs, 1e-9);
    b.number("zfs_es_mhz", c.system.zfs_es, 1e-9);
    b.number("gamma_e_mhz_per_gauss", c.system.gamma_e);
    b.number("gamma_n_mhz_per_gauss", c.system.species.gamma_n);
    b.number("a_par_gs_mhz", c.system.A_par_gs);
    b.number("a_perp_gs_mhz", c.system.A_perp_gs);
    b.number("a_par_es_mhz", c.system.A_par_es);
    b.number("a_perp_es_mhz", c.system.A_perp_es);
    b.number("quad_p_gs_mhz", c.system.quad_P_gs);
    b.number("quad_p_es_mhz", c.system.quad_P_es);
    b.finish();
    if (c.system.species.spin.twice == 1 && (c.system.quad_P_gs != 0.0 || c.system.quad_P_es != 0.0))
      reader.problem("system", "quadrupole terms require an I = 1 species");
  }
  {
    auto b = reader.block(top, "field");
    b.vec3("B0_gauss", c.field.B0);
    b.vec3("B1_gauss", c.field.B1);
    b.number("drive_freq_mhz", c.field.drive_freq, 0.0);
    b.finish();
  }
  auto grid = [&](const char *name, GridConfig &g, const char *unit) {
    auto b = reader.block(top, name);
    b.number(std::string("start_") + unit, g.start);
    b.number(std::string("stop_") + unit, g.stop);
    b.integer("points", g.points, 1, 1000000);
    b.finish();
    if (g.points > 1 && !(g.stop > g.start))
      reader.problem(name, "stop must exceed start");
  };
  grid("scan", c.scan, "mhz");
  grid("sweep", c.sweep, "us");

  auto readout = [](SchemaReader::Block &b, Readout &r) {
    std::string s = readout_name(r);
    b.string("readout", s, {"default", "fluorescence"});
    r = s == "fluorescence" ? Readout::Fluorescence : Readout::Default;
  };
  {
    auto b = reader.block(top, "esr");
    b.numbers("nuclear_populations", c.esr.nuclear_populations);
    b.boolean("pumped", c.esr.pumped);
    b.vec3("mw_B1_gauss", c.esr.mw_B1);
    b.number("pulse_us", c.esr.pulse_us, 0.0);
    readout(b, c.esr.readout);
    b.finish();
  }
  {
    auto b = reader.block(top, "nmr");
    b.integer("manifold", c.nmr.scan.manifold, -1, 1);
    b.numbers("nuclear_populations", c.nmr.scan.nuclear_pops);
    b.vec3("rf_B1_gauss", c.nmr.scan.rf_B1);
    b.number("pulse_us", c.nmr.scan.pulse_len, 0.0);
    b.vec3("mw_B1_gauss", c.nmr.scan.mw_B1);
    readout(b, c.nmr.readout);
    b.finish();
  }
  {
    auto b = reader.block(top, "rabi");
    b.label("from", c.rabi.from);
    b.label("to", c.rabi.to);
    b.vec3("B1_gauss", c.rabi.B1);
    b.optional_number("freq_mhz", c.rabi.freq_mhz, 0.0);
    b.boolean("transfer", c.rabi.transfer);
    b.vec3("mw_B1_gauss", c.rabi.mw_B1);
    b.optional_number("coherence_time_us", c.rabi.coherence_time_us, 1e-12);
    readout(b, c.rabi.readout);
    b.finish();
  }
  {
    auto b = reader.block(top, "ramsey");
    b.label("from", c.ramsey.from);
    b.label("to", c.ramsey.to);
    b.vec3("B1_gauss", c.ramsey.B1);
    b.number("detuning_mhz", c.ramsey.detuning_mhz);
    b.optional_number("coherence_time_us", c.ramsey.coherence_time_us, 1e-12);
    b.finish();
  }
  {
    auto b = reader.block(top, "floquet");
    b.integer("n_max", c.floquet.cfg.n_max, 1, 4096);
    b.number("convergence_tol", c.floquet.cfg.convergence_tol, 1e-300);
    b.boolean("escalate", c.floquet.cfg.escalate);
    b.integer("n_cap", c.floquet.cfg.n_cap, 1, 4096);
    std::string agg = c.floquet.aggregation == Aggregation::Negative ? "negative" : "positive";
    b.string("aggregation", agg, {"positive", "negative"});
    c.floquet.aggregation = agg == "negative" ? Aggregation::Negative : Aggregation::Positive;
    b.optional_number("table_freq_mhz", c.floquet.table_freq_mhz, 1e-300);
    b.finish();
    if (c.floquet.cfg.n_cap < c.floquet.cfg.n_max)
      reader.problem("floquet.n_cap", "must be >= n_max");
  }
  {
    auto b = reader.block(top, "rates");
    b.number("Gamma_per_us", c.Gamma_per_us, 0.0);
    b.number("gamma_over_Gamma", c.gamma_over_Gamma, 0.0);
    b.number("k_eq_over_Gamma", c.k_eq_over_Gamma, 0.0);
    b.finish();
  }
  {
    auto b = reader.block(top, "cycle");
    auto &y = c.cycle;
    b.number("excitation_rate_per_us", y.excitation_rate, 1e-300);
    b.number("es_lifetime_us", y.es_lifetime, 1e-300);
    b.number("singlet_branch_ms1", y.singlet_branch_ms1, 0.0, 1.0);
    b.number("singlet_branch_ms0", y.singlet_branch_ms0, 0.0, 1.0);
    b.number("singlet_to_ms0", y.singlet_to_ms0, 0.0, 1.0);
    b.number("fluor_bright_photons", y.fluor_bright, 1e-300);
    b.number("fluor_dark_photons", y.fluor_dark, 0.0);
    b.number("dark_penalty_per_pass", y.dark_penalty_per_pass, 0.0);
    b.number("dark_penalty_cap", y.dark_penalty_cap, 0.0, 1.0);
    b.number("nuclear_depol_per_cycle", y.nuclear_depol_per_cycle, 0.0, 1.0);
    b.finish();
    if (!(y.singlet_branch_ms1 > y.singlet_branch_ms0))
      reader.problem("cycle", "singlet_branch_ms1 must exceed singlet_branch_ms0");
    if (y.fluor_dark > y.fluor_bright)
      reader.problem("cycle", "fluor_dark_photons must not exceed fluor_bright_photons");
  }
  {
    auto b = reader.block(top, "pump");
    b.number("tol", c.pump.tol, 1e-300);
    b.integer("max_cycles", c.pump.max_cycles, 1, 1000000000);
    b.integer("readout_cycles", c.pump.readout_cycles, 1, 100000000);
    b.integer("trace_stride", c.pump.trace_stride, 0, 1000000000);
    b.finish();
  }
  {
    auto b = reader.block(top, "fit");
    b.string("model", c.fit.model,
             {"lorentzian", "square_pulse", "sinusoid", "damped_sinusoid", "hyperfine"});
    b.string("input_csv", c.fit.input_csv);
    b.integer("n_peaks", c.fit.n_peaks, 1, 64);
    b.boolean("shared_width", c.fit.shared_width);
    b.number("pulse_us", c.fit.pulse_us, 1e-300);
    b.numbers("lines_ms0_mhz", c.fit.lines_ms0_mhz);
    b.numbers("lines_ms1_mhz", c.fit.lines_ms1_mhz);
    b.number("B0z_gauss", c.fit.B0z_gauss);
    b.boolean("fit_a_perp", c.fit.fit_a_perp);
    b.number("a_perp_fixed_mhz", c.fit.a_perp_fixed_mhz);
    b.integer("second_manifold", c.fit.second_manifold, -1, 1);
    b.finish();
    if (c.fit.second_manifold == 0)
      reader.problem("fit.second_manifold", "must be +1 or -1");
  }
  {
    auto b = reader.block(top, "output");
    b.string("path", c.output_path);
    b.finish();
  }
  top.finish();
  if (!reader.problems().empty())
    throw ConfigError(reader.problems());
  return c;
}

/// Complete normalized form: every key, defaults filled.
inline json to_json(const RunConfig &c) {
  auto v3 = [](const Vec3 &v) { return json::array({v.x(), v.y(), v.z()}); };
  auto opt = [](const std::optional<double> &o) { return o ? json(*o) : json(nullptr); };
  const auto &s = c.system;
  json j;
  j["description"] = c.description;
  j["orbital"] = std::string(to_string(c.orbital));
  j["seed"] = c.seed;
  j["noise_sigma"] = c.noise_sigma;
  j["system"] = {{"species", std::string(to_string(s.species.id))},
                 {"zfs_gs_mhz", s.zfs_gs},
                 {"zfs_es_mhz", s.zfs_es},
                 {"gamma_e_mhz_per_gauss", s.gamma_e},
                 {"gamma_n_mhz_per_gauss", s.species.gamma_n},
                 {"a_par_gs_mhz", s.A_par_gs},
                 {"a_perp_gs_mhz", s.A_perp_gs},
                 {"a_par_es_mhz", s.A_par_es},
                 {"a_perp_es_mhz", s.A_perp_es},
                 {"quad_p_gs_mhz", s.quad_P_gs},
                 {"quad_p_es_mhz", s.quad_P_es}};
  j["field"] = {{"B0_gauss", v3(c.field.B0)},
                {"B1_gauss", v3(c.field.B1)},
                {"drive_freq_mhz", c.field.drive_freq}};
  j["scan"] = {{"start_mhz", c.scan.start}, {"stop_mhz", c.scan.stop}, {"points", c.scan.points}};
  j["sweep"] = {{"start_us", c.sweep.start}, {"stop_us", c.sweep.stop}, {"points", c.sweep.points}};
  j["esr"] = {{"nuclear_populations", c.esr.nuclear_populations},
              {"pumped", c.esr.pumped},
              {"mw_B1_gauss", v3(c.esr.mw_B1)},
              {"pulse_us", c.esr.pulse_us},
              {"readout", readout_name(c.esr.readout)}};
  j["nmr"] = {{"manifold", c.nmr.scan.manifold},
              {"nuclear_populations", c.nmr.scan.nuclear_pops},
              {"rf_B1_gauss", v3(c.nmr.scan.rf_B1)},
              {"pulse_us", c.nmr.scan.pulse_len},
              {"mw_B1_gauss", v3(c.nmr.scan.mw_B1)},
              {"readout", readout_name(c.nmr.readout)}};
  j["rabi"] = {{"from", label_string(c.rabi.from)},
               {"to", label_string(c.rabi.to)},
               {"B1_gauss", v3(c.rabi.B1)},
               {"freq_mhz", opt(c.rabi.freq_mhz)},
               {"transfer", c.rabi.transfer},
               {"mw_B1_gauss", v3(c.rabi.mw_B1)},
               {"coherence_time_us", opt(c.rabi.coherence_time_us)},
               {"readout", readout_name(c.rabi.readout)}};
  j["ramsey"] = {{"from", label_string(c.ramsey.from)},
                 {"to", label_string(c.ramsey.to)},
                 {"B1_gauss", v3(c.ramsey.B1)},
                 {"detuning_mhz", c.ramsey.detuning_mhz},
                 {"coherence_time_us", opt(c.ramsey.coherence_time_us)}};
  j["floquet"] = {{"n_max", c.floquet.cfg.n_max},
                  {"convergence_tol", c.floquet.cfg.convergence_tol},
                  {"escalate", c.floquet.cfg.escalate},
                  {"n_cap", c.floquet.cfg.n_cap},
                  {"aggregation", c.floquet.aggregation == Aggregation::Negative ? "negative" : "positive"},
                  {"table_freq_mhz", opt(c.floquet.table_freq_mhz)}};
  j["rates"] = {{"Gamma_per_us", c.Gamma_per_us},
                {"gamma_over_Gamma", c.gamma_over_Gamma},
                {"k_eq_over_Gamma", c.k_eq_over_Gamma}};
  const auto &y = c.cycle;
  j["cycle"] = {{"excitation_rate_per_us", y.excitation_rate},
                {"es_lifetime_us", y.es_lifetime},
                {"singlet_branch_ms1", y.singlet_branch_ms1},
                {"singlet_branch_ms0", y.singlet_branch_ms0},
                {"singlet_to_ms0", y.singlet_to_ms0},
                {"fluor_bright_photons", y.fluor_bright},
                {"fluor_dark_photons", y.fluor_dark},
                {"dark_penalty_per_pass", y.dark_penalty_per_pass},
                {"dark_penalty_cap", y.dark_penalty_cap},
                {"nuclear_depol_per_cycle", y.nuclear_depol_per_cycle}};
  j["pump"] = {{"tol", c.pump.tol},
               {"max_cycles", c.pump.max_cycles},
               {"readout_cycles", c.pump.readout_cycles},
               {"trace_stride", c.pump.trace_stride}};
  j["fit"] = {{"model", c.fit.model},
              {"input_csv", c.fit.input_csv},
              {"n_peaks", c.fit.n_peaks},
              {"shared_width", c.fit.shared_width},
              {"pulse_us", c.fit.pulse_us},
              {"lines_ms0_mhz", c.fit.lines_ms0_mhz},
              {"lines_ms1_mhz", c.fit.lines_ms1_mhz},
              {"B0z_gauss", c.fit.B0z_gauss},
              {"fit_a_perp", c.fit.fit_a_perp},
              {"a_perp_fixed_mhz", c.fit.a_perp_fixed_mhz},
              {"second_manifold", c.fit.second_manifold}};
  j["output"] = {{"path", c.output_path}};
  return j;
}

inline std::string normalized_dump(const RunConfig &c) { return to_json(c).dump(2) + "\n"; }

inline std::string config_hash(const RunConfig &c) { return hash_string(to_json(c).dump()); }

/// Applies a "dotted.path=value" override; the value is parsed as JSON and
/// falls back to a plain string.
inline void apply_override(json &root, const std::string &assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError({"--set: expected path=value, got '" + assignment + "'"});
  const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded())
    value = raw;
  json *node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty())
      throw ConfigError({"--set: empty path component in '" + path + "'"});
    if (!node->is_object())
      throw ConfigError({"--set: '" + path + "' descends into a non-object"});
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null())
      *node = json::object();
    start = dot + 1;
  }
}

inline RunConfig load_config_text(const std::string &text, const std::string &source,
                                  const std::vector<std::string> &overrides = {}) {
  json root;
  try {
    root = text.empty() ? json::object() : json::parse(text);
  } catch (const json::parse_error &e) {
    throw ConfigError({source + ": invalid JSON: " + e.what()});
  }
  for (const auto &o : overrides)
    apply_override(root, o);
  return parse_config(root, KeyLocator(text), source);
}

inline RunConfig load_config(const std::string &path, const std::vector<std::string> &overrides = {}) {
  return load_config_text(read_file(path), path, overrides);
}

// ---------------------------------------------------------------------------
// CSV

struct CsvOptions {
  std::string config_hash;
  bool timestamp = true;
};

inline void write_header(std::ostream &os, const std::map<std::string, std::string> &meta,
                         const CsvOptions &opt) {
  os << "# nvspin " << kVersion << "\n";
  if (!opt.config_hash.empty())
    os << "# config_hash: " << opt.config_hash << "\n";
  if (opt.timestamp) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    os << "# generated: " << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << "\n";
  }
  for (const auto &[k, v] : meta)
    os << "# " << k << ": " << v << "\n";
}

/// Columns: x, y, [y_err], extras. '#' lines carry metadata.
inline void write_spectrum_csv(std::ostream &os, const Spectrum &s, const CsvOptions &opt = {}) {
  s.validate();
  write_header(os, s.meta, opt);
  os << s.x_unit << "," << s.y_unit;
  if (s.y_err)
    os << ",y_err";
  for (const auto &[name, col] : s.extra)
    os << "," << name;
  os << "\n";
  for (std::size_t i = 0; i < s.size(); ++i) {
    os << format_double(s.x[i]) << "," << format_double(s.y[i]);
    if (s.y_err)
      os << "," << format_double((*s.y_err)[i]);
    for (const auto &[name, col] : s.extra)
      os << "," << format_double(col[i]);
    os << "\n";
  }
}

/// Quotes a cell when it contains a separator or a quote.
inline std::string csv_cell(const std::string &v) {
  if (v.find_first_of(",\"\n") == std::string::npos)
    return v;
  std::string out = "\"";
  for (char c : v)
    out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline void write_table_csv(std::ostream &os, const std::vector<std::string> &header,
                            const std::vector<std::vector<std::string>> &rows,
                            const std::map<std::string, std::string> &meta, const CsvOptions &opt = {}) {
  write_header(os, meta, opt);
  for (std::size_t i = 0; i < header.size(); ++i)
    os << (i ? "," : "") << csv_cell(header[i]);
  os << "\n";
  for (const auto &r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i)
      os << (i ? "," : "") << csv_cell(r[i]);
    os << "\n";
  }
}

inline std::vector<std::string> split_csv_line(const std::string &line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline Spectrum read_spectrum_csv(std::istream &in, const std::string &source = "<csv>") {
  Spectrum s;
  std::string line;
  std::vector<std::string> header;
  std::vector<std::vector<double>> cols;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r")
      continue;
    if (line[0] == '#') {
      const auto colon = line.find(": ");
      if (colon != std::string::npos && colon > 2)
        s.meta[line.substr(2, colon - 2)] = line.substr(colon + 2);
      continue;
    }
    auto fields = split_csv_line(line);
    if (header.empty()) {
      header = fields;
      if (header.size() < 2)
        throw ConfigError({source + ":" + std::to_string(lineno) + ": need at least two columns"});
      cols.resize(header.size());
      continue;
    }
    if (fields.size() != header.size())
      throw ConfigError({source + ":" + std::to_string(lineno) + ": expected " +
                         std::to_string(header.size()) + " fields"});
    for (std::size_t i = 0; i < fields.size(); ++i) {
      auto v = parse_double(fields[i]);
      if (!v)
        throw ConfigError({source + ":" + std::to_string(lineno) + ": bad number '" + fields[i] + "'"});
      cols[i].push_back(*v);
    }
  }
  if (header.empty())
    throw ConfigError({source + ": no header row"});
  s.x_unit = header[0];
  s.y_unit = header[1];
  s.x = cols[0];
  s.y = cols[1];
  for (std::size_t i = 2; i < header.size(); ++i) {
    if (header[i] == "y_err" && i == 2)
      s.y_err = cols[i];
    else
      s.extra.push_back({header[i], cols[i]});
  }
  // header-owned lines are rewritten by the writer, not carried as metadata
  s.meta.erase("generated");
  s.meta.erase("config_hash");
  try {
    s.validate();
  } catch (const InvalidArgument &e) {
    throw ConfigError({source + ": " + e.what()});
  }
  return s;
}

// ---------------------------------------------------------------------------
// Fit reports

inline json fit_to_json(const FitResult &f, const std::string &input_hash = "",
                        const std::string &cfg_hash = "") {
  json j;
  j["model"] = f.model;
  json params = json::object(), errs = json::object();
  for (std::size_t i = 0; i < f.names.size(); ++i) {
    params[f.names[i]] = f.values[i];
    if (!f.std_errors.empty())
      errs[f.names[i]] = f.std_errors[i];
  }
  j["params"] = params;
  j["std_errors"] = f.std_errors.empty() ? json(nullptr) : errs;
  j["residual_norm"] = f.residual_norm;
  j["converged"] = f.converged;
  j["n_iter"] = f.n_iter;
  j["flags"] = f.flags;
  j["input_hash"] = input_hash;
  j["config_hash"] = cfg_hash;
  j["version"] = kVersion;
  return j;
}

/// nlohmann objects are std::map-backed, so dump() is key-sorted.
inline void write_fit_json(std::ostream &os, const json &j) { os << j.dump(2) << "\n"; }

} // namespace nvspin
