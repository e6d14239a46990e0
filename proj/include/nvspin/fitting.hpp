#pragma once

// Nonlinear least squares for spectra and traces: a bounded
// Levenberg-Marquardt core, Lorentzian combs, square-pulse resonances,
// (damped) sinusoids and hyperfine extraction from NMR line positions.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "nvspin/dynamics.hpp"
#include "nvspin/spectrum.hpp"
#include "nvspin/spin_core.hpp"

namespace nvspin {

struct FitResult {
  std::string model;
  std::vector<std::string> names;
  std::vector<double> values;
  std::vector<double> std_errors; ///< empty unless converged and the covariance exists
  double residual_norm = 0.0;     ///< ||r||, weighted when y_err is given
  bool converged = false;
  int n_iter = 0;
  std::vector<std::string> flags;

  std::optional<std::size_t> index(const std::string &name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end())
      return std::nullopt;
    return static_cast<std::size_t>(it - names.begin());
  }
  double value(const std::string &name) const {
    const auto i = index(name);
    require(i.has_value(), "fit result has no parameter '" + name + "'");
    return values[*i];
  }
  std::optional<double> error(const std::string &name) const {
    const auto i = index(name);
    if (!i || std_errors.empty())
      return std::nullopt;
    return std_errors[*i];
  }
  bool has_flag(const std::string &f) const {
    return std::find(flags.begin(), flags.end(), f) != flags.end();
  }
};

// ---------------------------------------------------------------------------
// Levenberg-Marquardt

struct LmOptions {
  int max_iter = 500;
  double ftol = 1e-15;  ///< relative cost decrease
  double xtol = 1e-13;  ///< relative step
  double gtol = 1e-13;  ///< scaled gradient
  double lambda_init = 1e-3;
  double lambda_up = 10.0;
  double lambda_down = 0.2;
};

/// Residual callback: returns r(p) and fills J = dr/dp when `jac` is non-null.
using ResidualFn = std::function<RVector(const RVector &, RMatrix *)>;

struct LmResult {
  RVector p;
  RVector r;
  RMatrix J;
  double cost = 0.0; ///< r.r
  int n_iter = 0;
  bool converged = false;
};

inline RVector clamp_to(const RVector &p, const RVector &lo, const RVector &hi) {
  return p.cwiseMax(lo).cwiseMin(hi);
}

/// Damped Gauss-Newton with Marquardt diagonal scaling, multiplicative damping
/// and projection onto box bounds.
inline LmResult levenberg_marquardt(const ResidualFn &fn, RVector p0, const RVector &lo,
                                    const RVector &hi, const LmOptions &opt = {}) {
  const Eigen::Index n = p0.size();
  require(lo.size() == n && hi.size() == n, "levenberg_marquardt: bound sizes differ");
  require((lo.array() <= hi.array()).all(), "levenberg_marquardt: lower bound above upper");
  LmResult s;
  s.p = clamp_to(p0, lo, hi);
  s.r = fn(s.p, &s.J);
  require(s.r.allFinite(), "levenberg_marquardt: non-finite residual at the initial point");
  s.cost = s.r.squaredNorm();
  const double cost0 = s.cost;
  RVector diag = s.J.colwise().squaredNorm().transpose();
  double lambda = opt.lambda_init;

  for (s.n_iter = 0; s.n_iter < opt.max_iter; ++s.n_iter) {
    if (s.cost == 0.0) {
      s.converged = true;
      return s;
    }
    diag = diag.cwiseMax(s.J.colwise().squaredNorm().transpose());
    const RVector d = diag.unaryExpr([](double v) { return v > 0.0 ? v : 1.0; });
    const RVector g = s.J.transpose() * s.r;
    const double gscale =
        (g.array().abs() / (d.array().sqrt() * std::sqrt(s.cost))).maxCoeff();
    if (gscale <= opt.gtol) {
      s.converged = true;
      return s;
    }
    const RMatrix a = s.J.transpose() * s.J;
    bool accepted = false;
    while (!accepted) {
      RMatrix m = a;
      m.diagonal() += lambda * d;
      const RVector step = -m.ldlt().solve(g);
      const RVector pn = clamp_to(s.p + step, lo, hi);
      const RVector rn = fn(pn, nullptr);
      const double cn = rn.allFinite() ? rn.squaredNorm() : std::numeric_limits<double>::infinity();
      if (cn < s.cost) {
        const double drop = s.cost - cn;
        const double dx = (pn - s.p).norm();
        s.p = pn;
        s.r = fn(s.p, &s.J);
        const double old = s.cost;
        s.cost = s.r.squaredNorm();
        lambda = std::max(lambda * opt.lambda_down, 1e-15);
        accepted = true;
        if (drop <= opt.ftol * old || dx <= opt.xtol * (s.p.norm() + opt.xtol)) {
          s.converged = true;
          ++s.n_iter;
          return s;
        }
      } else {
        lambda *= opt.lambda_up;
        if (lambda > 1e20) {
          // no decrease along any damped direction: a minimum to working precision,
          // unless the gradient is still large and the cost is above round-off
          s.converged = gscale < 1e-6 || s.cost <= 1e-20 * cost0;
          ++s.n_iter;
          return s;
        }
      }
    }
  }
  return s;
}

/// Fills std_errors from the linearized covariance s2 (J^T J)^-1, with s2 the
/// reduced residual variance unless residuals are already sigma-weighted.
inline void attach_covariance(FitResult &out, const LmResult &lm, bool weighted) {
  out.residual_norm = std::sqrt(lm.cost);
  out.converged = lm.converged;
  out.n_iter = lm.n_iter;
  if (!lm.converged) {
    out.flags.push_back("not_converged");
    return;
  }
  const Eigen::Index m = lm.r.size(), n = lm.p.size();
  if (!weighted && m <= n) {
    out.flags.push_back("zero_dof");
    return;
  }
  Eigen::JacobiSVD<RMatrix> svd(lm.J, Eigen::ComputeThinV);
  const RVector sv = svd.singularValues();
  if (sv.size() < n || sv[n - 1] <= 1e-12 * sv[0]) {
    out.flags.push_back("singular_covariance");
    return;
  }
  const RMatrix v = svd.matrixV();
  const RVector inv2 = sv.cwiseInverse().cwiseAbs2();
  const double s2 = weighted ? 1.0 : lm.cost / static_cast<double>(m - n);
  out.std_errors.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    out.std_errors[static_cast<std::size_t>(i)] =
        std::sqrt(s2 * (v.row(i).cwiseAbs2() * inv2).value());
}

namespace detail {

inline std::vector<double> weights_of(const Spectrum &spec) {
  std::vector<double> w(spec.size(), 1.0);
  if (spec.y_err) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      require((*spec.y_err)[i] > 0.0, "fit: y_err entries must be > 0");
      w[i] = 1.0 / (*spec.y_err)[i];
    }
  }
  return w;
}

inline double median(std::vector<double> v) {
  require(!v.empty(), "median of empty set");
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  double m = *mid;
  if (v.size() % 2 == 0)
    m = 0.5 * (m + *std::max_element(v.begin(), mid));
  return m;
}

inline std::vector<double> smooth(const std::vector<double> &y, int half) {
  std::vector<double> out(y.size());
  const auto n = static_cast<int>(y.size());
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    int c = 0;
    for (int k = std::max(0, i - half); k <= std::min(n - 1, i + half); ++k, ++c)
      s += y[static_cast<std::size_t>(k)];
    out[static_cast<std::size_t>(i)] = s / c;
  }
  return out;
}

// Generic least-squares driver over a model with an analytic Jacobian.
// model(x, p, grad) returns y(x) and writes dy/dp into grad.
using PointModel = std::function<double(double, const RVector &, double *)>;

inline LmResult fit_points(const Spectrum &spec, const PointModel &model, const RVector &p0,
                           const RVector &lo, const RVector &hi, const LmOptions &opt) {
  const auto w = weights_of(spec);
  const auto m = static_cast<Eigen::Index>(spec.size());
  const Eigen::Index n = p0.size();
  ResidualFn fn = [&](const RVector &p, RMatrix *jac) {
    RVector r(m);
    if (jac)
      jac->resize(m, n);
    std::vector<double> grad(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto k = static_cast<std::size_t>(i);
      r[i] = w[k] * (model(spec.x[k], p, grad.data()) - spec.y[k]);
      if (jac)
        for (Eigen::Index j = 0; j < n; ++j)
          (*jac)(i, j) = w[k] * grad[static_cast<std::size_t>(j)];
    }
    return r;
  };
  return levenberg_marquardt(fn, p0, lo, hi, opt);
}

inline double inf() { return std::numeric_limits<double>::infinity(); }

} // namespace detail

// ---------------------------------------------------------------------------
// Lorentzian comb

struct LorentzianInit {
  std::vector<double> centers;
  std::optional<double> width;
  std::optional<double> baseline;
};

/// y = baseline - sum_k depth_k w_k^2 / ((x - x_k)^2 + w_k^2), w_k = w when shared.
/// Parameters: baseline, center_k, depth_k, then width or width_k (k from 1).
inline double lorentzian_comb(double x, const RVector &p, int n_peaks, bool shared, double *grad) {
  double y = p[0];
  if (grad)
    grad[0] = 1.0;
  for (int k = 0; k < n_peaks; ++k) {
    const Eigen::Index ic = 1 + 2 * k, id = 2 + 2 * k;
    const Eigen::Index iw = shared ? 1 + 2 * n_peaks : 1 + 2 * n_peaks + k;
    const double u = x - p[ic], w = p[iw], d = p[id];
    const double den = u * u + w * w;
    const double shape = w * w / den;
    y -= d * shape;
    if (grad) {
      grad[ic] = -d * w * w * 2.0 * u / (den * den);
      grad[id] = -shape;
      const double dw = -d * 2.0 * w * u * u / (den * den);
      if (shared)
        grad[iw] = (k == 0 ? 0.0 : grad[iw]) + dw;
      else
        grad[iw] = dw;
    }
  }
  return y;
}

inline FitResult fit_lorentzians(const Spectrum &spec, int n_peaks, bool shared_width = true,
                                 std::optional<LorentzianInit> init = std::nullopt,
                                 const LmOptions &opt = {}) {
  spec.validate();
  require(n_peaks >= 1, "fit_lorentzians: n_peaks must be >= 1");
  require(spec.size() >= static_cast<std::size_t>(3 * n_peaks + 2),
          "fit_lorentzians: need at least 3 n_peaks + 2 points");
  const double x0 = spec.x.front(), x1 = spec.x.back();
  const double dx = (x1 - x0) / static_cast<double>(spec.size() - 1);

  double baseline = init && init->baseline ? *init->baseline : detail::median(spec.y);
  std::vector<double> centers;
  if (init && !init->centers.empty()) {
    require(init->centers.size() == static_cast<std::size_t>(n_peaks),
            "fit_lorentzians: init has the wrong number of centers");
    centers = init->centers;
  } else {
    // strongest local minima of the smoothed trace, at least 3 samples apart
    const auto ys = detail::smooth(spec.y, 2);
    std::vector<std::pair<double, std::size_t>> cands;
    for (std::size_t i = 0; i < ys.size(); ++i) {
      const bool left = i == 0 || ys[i] <= ys[i - 1];
      const bool right = i + 1 == ys.size() || ys[i] < ys[i + 1];
      if (left && right)
        cands.push_back({baseline - ys[i], i});
    }
    std::sort(cands.begin(), cands.end(), std::greater<>());
    std::vector<std::size_t> picked;
    for (const auto &[depth, i] : cands) {
      if (static_cast<int>(picked.size()) == n_peaks)
        break;
      const bool near = std::any_of(picked.begin(), picked.end(), [&](std::size_t j) {
        return (i > j ? i - j : j - i) < 3;
      });
      if (!near)
        picked.push_back(i);
    }
    for (std::size_t j : picked)
      centers.push_back(spec.x[j]);
    for (int k = static_cast<int>(centers.size()); k < n_peaks; ++k)
      centers.push_back(x0 + (x1 - x0) * (k + 1.0) / (n_peaks + 1.0));
    std::sort(centers.begin(), centers.end());
  }

  double width = 0.0;
  if (init && init->width) {
    width = *init->width;
  } else {
    // half width at half depth around the deepest sample
    const auto it = std::min_element(spec.y.begin(), spec.y.end());
    const auto i0 = static_cast<std::size_t>(it - spec.y.begin());
    const double half = 0.5 * (baseline + *it);
    std::size_t l = i0, r = i0;
    while (l > 0 && spec.y[l] < half)
      --l;
    while (r + 1 < spec.size() && spec.y[r] < half)
      ++r;
    width = std::max(0.5 * (spec.x[r] - spec.x[l]), 2.0 * dx);
    width = std::min(width, (x1 - x0) / (2.0 * n_peaks));
  }

  const int nw = shared_width ? 1 : n_peaks;
  const Eigen::Index np = 1 + 2 * n_peaks + nw;
  RVector p(np), lo(np), hi(np);
  p[0] = baseline;
  lo[0] = -detail::inf();
  hi[0] = detail::inf();
  for (int k = 0; k < n_peaks; ++k) {
    p[1 + 2 * k] = centers[static_cast<std::size_t>(k)];
    lo[1 + 2 * k] = x0;
    hi[1 + 2 * k] = x1;
    const auto at = std::lower_bound(spec.x.begin(), spec.x.end(), centers[static_cast<std::size_t>(k)]);
    const double yk = spec.y[std::min<std::size_t>(static_cast<std::size_t>(at - spec.x.begin()),
                                                   spec.size() - 1)];
    p[2 + 2 * k] = baseline - yk;
    lo[2 + 2 * k] = -detail::inf();
    hi[2 + 2 * k] = detail::inf();
  }
  for (int k = 0; k < nw; ++k) {
    p[1 + 2 * n_peaks + k] = width;
    lo[1 + 2 * n_peaks + k] = 1e-6 * dx;
    hi[1 + 2 * n_peaks + k] = 10.0 * (x1 - x0);
  }

  auto model = [&](double x, const RVector &q, double *g) {
    return lorentzian_comb(x, q, n_peaks, shared_width, g);
  };
  const LmResult lm = detail::fit_points(spec, model, p, lo, hi, opt);

  FitResult out;
  out.model = shared_width ? "lorentzian_comb_shared" : "lorentzian_comb";
  out.names.push_back("baseline");
  for (int k = 1; k <= n_peaks; ++k) {
    out.names.push_back("center_" + std::to_string(k));
    out.names.push_back("depth_" + std::to_string(k));
  }
  if (shared_width)
    out.names.push_back("width");
  else
    for (int k = 1; k <= n_peaks; ++k)
      out.names.push_back("width_" + std::to_string(k));
  out.values.assign(lm.p.data(), lm.p.data() + np);
  attach_covariance(out, lm, spec.y_err.has_value());

  for (int a = 0; a < n_peaks; ++a)
    for (int b = a + 1; b < n_peaks; ++b) {
      const double wa = lm.p[1 + 2 * n_peaks + (shared_width ? 0 : a)];
      const double wb = lm.p[1 + 2 * n_peaks + (shared_width ? 0 : b)];
      if (std::abs(lm.p[1 + 2 * a] - lm.p[1 + 2 * b]) < std::min(wa, wb) / 4.0 &&
          !out.has_flag("merged_peaks"))
        out.flags.push_back("merged_peaks");
    }
  return out;
}

/// Per-peak populations from fitted depths, normalized, in ascending center order.
inline std::vector<std::pair<double, double>> populations_from_depths(const FitResult &fit) {
  std::vector<std::pair<double, double>> out;
  for (int k = 1;; ++k) {
    const auto c = fit.index("center_" + std::to_string(k));
    if (!c)
      break;
    out.push_back({fit.values[*c], std::max(0.0, fit.value("depth_" + std::to_string(k)))});
  }
  double sum = 0.0;
  for (const auto &e : out)
    sum += e.second;
  require(sum > 0.0, "populations_from_depths: no positive depth");
  for (auto &e : out)
    e.second /= sum;
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Square pulse

struct SquarePulseInit {
  std::optional<double> omega_res;
  std::optional<double> rabi;
  std::optional<double> amplitude;
  std::optional<double> baseline;
};

/// amplitude * square_pulse_lineshape(rabi, x - omega_res, t) + baseline.
/// Parameters: omega_res, rabi, amplitude, baseline.
inline double square_pulse_model(double x, const RVector &p, double t, double *grad) {
  const double d = x - p[0], om = p[1], a = p[2];
  const double w2 = om * om + d * d;
  if (w2 <= 0.0) {
    if (grad) {
      // limit W -> 0: L ~ (pi om t)^2
      grad[0] = 0.0;
      grad[1] = 0.0;
      grad[2] = 0.0;
      grad[3] = 1.0;
    }
    return p[3];
  }
  const double w = std::sqrt(w2);
  const double s = std::sin(kPi * w * t), c = std::cos(kPi * w * t);
  const double l = om * om / w2 * s * s;
  if (grad) {
    const double dl_dw = om * om * (2.0 * s * c * kPi * t / w2 - 2.0 * s * s / (w2 * w));
    const double dl_dom = 2.0 * om * s * s / w2 + dl_dw * om / w;
    const double dl_dd = dl_dw * d / w;
    grad[0] = -a * dl_dd;
    grad[1] = a * dl_dom;
    grad[2] = l;
    grad[3] = 1.0;
  }
  return a * l + p[3];
}

inline FitResult fit_square_pulse(const Spectrum &spec, double pulse_len, SquarePulseInit init = {},
                                  const LmOptions &opt = {}) {
  spec.validate();
  require(pulse_len > 0.0, "fit_square_pulse: pulse length must be > 0");
  require(spec.size() >= 6, "fit_square_pulse: need at least 6 points");
  const double x0 = spec.x.front(), x1 = spec.x.back();

  std::vector<double> edges(spec.y.begin(), spec.y.begin() + static_cast<std::ptrdiff_t>(spec.size() / 8 + 1));
  edges.insert(edges.end(), spec.y.end() - static_cast<std::ptrdiff_t>(spec.size() / 8 + 1), spec.y.end());
  const double base = init.baseline.value_or(detail::median(edges));
  std::size_t ipk = 0;
  for (std::size_t i = 1; i < spec.size(); ++i)
    if (std::abs(spec.y[i] - base) > std::abs(spec.y[ipk] - base))
      ipk = i;
  const double res0 = init.omega_res.value_or(spec.x[ipk]);
  const double amp0 = init.amplitude.value_or(spec.y[ipk] - base);

  std::vector<double> rabi_starts;
  if (init.rabi)
    rabi_starts = {*init.rabi};
  else
    for (double f : {0.5, 1.0, 1.5, 0.25, 2.5})
      rabi_starts.push_back(f / (2.0 * pulse_len));

  const RVector lo = (RVector(4) << x0, 1e-12, -detail::inf(), -detail::inf()).finished();
  const RVector hi = (RVector(4) << x1, detail::inf(), detail::inf(), detail::inf()).finished();
  auto model = [&](double x, const RVector &q, double *g) {
    return square_pulse_model(x, q, pulse_len, g);
  };
  std::optional<LmResult> best;
  for (double om0 : rabi_starts) {
    // amplitude scaled so the on-resonance value matches the peak sample
    const double s = std::sin(kPi * om0 * pulse_len);
    const double a0 = std::abs(s) > 0.1 ? amp0 / (s * s) : amp0;
    const RVector p0 = (RVector(4) << res0, om0, a0, base).finished();
    LmResult lm = detail::fit_points(spec, model, p0, lo, hi, opt);
    if (!best || lm.cost < best->cost)
      best = std::move(lm);
  }
  FitResult out;
  out.model = "square_pulse";
  out.names = {"omega_res", "rabi", "amplitude", "baseline"};
  out.values.assign(best->p.data(), best->p.data() + 4);
  attach_covariance(out, *best, spec.y_err.has_value());
  return out;
}

// ---------------------------------------------------------------------------
// Sinusoid

/// A exp(-k t) cos(2 pi f t + phi) + c. Parameters: amplitude, freq, phase,
/// offset[, decay].
inline double sinusoid_model(double t, const RVector &p, bool damped, double *grad) {
  const double a = p[0], f = p[1], ph = p[2];
  const double e = damped ? std::exp(-p[4] * t) : 1.0;
  const double th = kTwoPi * f * t + ph;
  const double c = std::cos(th), s = std::sin(th);
  if (grad) {
    grad[0] = e * c;
    grad[1] = -a * e * s * kTwoPi * t;
    grad[2] = -a * e * s;
    grad[3] = 1.0;
    if (damped)
      grad[4] = -t * a * e * c;
  }
  return a * e * c + p[3];
}

struct SinusoidInit {
  std::optional<double> freq;
  std::optional<double> decay;
};

inline FitResult fit_sinusoid(const TimeTrace &trace, bool damped = false, SinusoidInit init = {},
                              std::optional<std::vector<double>> y_err = std::nullopt,
                              const LmOptions &opt = {}) {
  trace.validate();
  const std::size_t m = trace.times.size();
  require(m >= 8, "fit_sinusoid: need at least 8 samples");
  Spectrum spec = trace.to_spectrum();
  spec.y_err = std::move(y_err);
  spec.validate();
  const double t0 = trace.times.front(), span = trace.times.back() - t0;
  require(span > 0.0, "fit_sinusoid: zero time span");

  // linear detrend, then a zero-padded periodogram up to the mean-sample Nyquist rate
  double tm = 0.0, ym = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    tm += trace.times[i];
    ym += trace.values[i];
  }
  tm /= static_cast<double>(m);
  ym /= static_cast<double>(m);
  double stt = 0.0, sty = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    stt += (trace.times[i] - tm) * (trace.times[i] - tm);
    sty += (trace.times[i] - tm) * (trace.values[i] - ym);
  }
  const double slope = sty / stt;
  std::vector<double> z(m);
  for (std::size_t i = 0; i < m; ++i)
    z[i] = trace.values[i] - ym - slope * (trace.times[i] - tm);

  const double df = 1.0 / (8.0 * span);
  const double fmax = 0.5 * static_cast<double>(m - 1) / span;
  double best_f = 0.0, best_p = -1.0, total = 0.0;
  std::complex<double> best_x;
  std::size_t count = 0;
  for (double f = df; f <= fmax; f += df, ++count) {
    std::complex<double> x = 0.0;
    for (std::size_t i = 0; i < m; ++i)
      x += z[i] * std::polar(1.0, -kTwoPi * f * trace.times[i]);
    const double pw = std::norm(x);
    total += pw;
    if (pw > best_p) {
      best_p = pw;
      best_f = f;
      best_x = x;
    }
  }
  const double mean_p = count > 0 ? total / static_cast<double>(count) : 0.0;
  const bool dominant = best_p > 0.0 && best_p >= 4.0 * mean_p;

  const double f0 = init.freq.value_or(best_f);
  const double a0 = 2.0 * std::abs(best_x) / static_cast<double>(m);
  const double ph0 = std::arg(best_x);
  const Eigen::Index np = damped ? 5 : 4;
  RVector lo = RVector::Constant(np, -detail::inf()), hi = RVector::Constant(np, detail::inf());
  lo[0] = lo[1] = 0.0;
  if (damped)
    lo[4] = 0.0;
  auto model = [&](double t, const RVector &q, double *g) { return sinusoid_model(t, q, damped, g); };

  std::optional<LmResult> best;
  for (double shift : {0.0, -0.4, 0.4}) {
    RVector p0(np);
    p0[0] = std::max(a0, 1e-12);
    p0[1] = std::max(f0 + shift * df, 0.5 * df);
    p0[2] = ph0;
    p0[3] = ym;
    if (damped)
      p0[4] = init.decay.value_or(1.0 / (10.0 * span));
    LmResult lm = detail::fit_points(spec, model, p0, lo, hi, opt);
    if (!best || lm.cost < best->cost)
      best = std::move(lm);
  }
  FitResult out;
  out.model = damped ? "damped_sinusoid" : "sinusoid";
  out.names = {"amplitude", "freq", "phase", "offset"};
  if (damped)
    out.names.push_back("decay");
  RVector p = best->p;
  p[2] = std::remainder(p[2], kTwoPi);
  out.values.assign(p.data(), p.data() + np);
  attach_covariance(out, *best, spec.y_err.has_value());
  if (!dominant && !init.freq) {
    out.flags.push_back("no_dominant_peak");
    out.converged = false;
    out.std_errors.clear();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hyperfine extraction

struct HyperfineOptions {
  bool fit_a_perp = true;
  double a_perp_fixed = 0.0; ///< used when fit_a_perp is false
  double a_perp_init = 1.0;  ///< away from zero, where the gradient vanishes
  double a_perp_max = 5.0;
  int second_manifold = -1;
  std::optional<std::vector<double>> sigma_ms0, sigma_ms1;
  LmOptions lm;
};

struct HyperfineFit {
  FitResult best;                 ///< physical branch when a sign prior exists
  std::vector<FitResult> branches; ///< distinct solutions, ascending residual
};

/// Nuclear lines inside manifold `ms` for the GS model, ascending, with the
/// Hellmann-Feynman gradient of each line w.r.t. (A_par, P, A_perp).
struct ManifoldLines {
  std::vector<double> freq;
  std::vector<std::array<double, 3>> grad;
};

inline ManifoldLines gs_nuclear_lines(const SpinSystemParams &params, double b0z, int ms) {
  const HamiltonianMatrix h = assemble_hamiltonian(params, Orbital::GS, Vec3(0, 0, b0z));
  const EigenSystem es = eigensolve(h);
  const ProductOperators op(params.species.spin);
  const CMatrix dh[3] = {op.Sz * op.Iz, op.Iz * op.Iz, op.Sx * op.Ix + op.Sy * op.Iy};
  const auto spin = params.species.spin;

  // eigen index per bare label by dominant weight
  std::vector<Eigen::Index> eig_of(h.labels.size(), -1);
  for (Eigen::Index k = 0; k < es.dim(); ++k) {
    const auto [bare, w] = es.dominant(k);
    eig_of[static_cast<std::size_t>(bare)] = k;
  }
  struct Line {
    double f;
    std::array<double, 3> g;
  };
  std::vector<Line> lines;
  for (int m2 = spin.twice; m2 - 2 >= -spin.twice; m2 -= 2) {
    const auto a = find_label(h.labels, {ms, m2}), b = find_label(h.labels, {ms, m2 - 2});
    const Eigen::Index ka = eig_of[*a], kb = eig_of[*b];
    if (ka < 0 || kb < 0)
      throw ConvergenceError("hyperfine model: eigenstates do not map onto bare labels");
    const double diff = es.values[ka] - es.values[kb];
    const double sgn = diff >= 0.0 ? 1.0 : -1.0;
    Line l{std::abs(diff), {}};
    for (int j = 0; j < 3; ++j) {
      const double ea = (es.vectors.col(ka).adjoint() * dh[j] * es.vectors.col(ka)).value().real();
      const double eb = (es.vectors.col(kb).adjoint() * dh[j] * es.vectors.col(kb)).value().real();
      l.g[static_cast<std::size_t>(j)] = sgn * (ea - eb);
    }
    lines.push_back(l);
  }
  std::sort(lines.begin(), lines.end(), [](const Line &x, const Line &y) { return x.f < y.f; });
  ManifoldLines out;
  for (const auto &l : lines) {
    out.freq.push_back(l.f);
    out.grad.push_back(l.g);
  }
  return out;
}

/// Fits (A_par, P[, A_perp]) of the GS model to measured NMR line magnitudes
/// in m_s = 0 and in `second_manifold`. Every distinct sign branch is returned.
inline HyperfineFit extract_hyperfine(std::vector<double> lines_ms0, std::vector<double> lines_ms1,
                                      double b0z, Species species, HyperfineOptions opt = {},
                                      std::optional<SpinSystemParams> base = std::nullopt) {
  SpinSystemParams params = base.value_or(SpinSystemParams::defaults(species));
  require(params.species.id == species, "extract_hyperfine: base parameters are for another species");
  require(opt.second_manifold == 1 || opt.second_manifold == -1,
          "extract_hyperfine: second manifold must be +1 or -1");
  const auto spin = params.species.spin;
  const bool quad = spin.twice == 2;
  const std::size_t per_manifold = static_cast<std::size_t>(spin.twice);
  const int n_par = 1 + (quad ? 1 : 0) + (opt.fit_a_perp ? 1 : 0);
  const std::size_t n_lines = lines_ms0.size() + lines_ms1.size();
  if (lines_ms0.size() != per_manifold || lines_ms1.size() != per_manifold)
    throw InvalidArgument("extract_hyperfine: " + std::string(to_string(species)) + " needs " +
                          std::to_string(per_manifold) + " line(s) per manifold, got " +
                          std::to_string(lines_ms0.size()) + " and " +
                          std::to_string(lines_ms1.size()));
  if (n_lines < static_cast<std::size_t>(n_par))
    throw InvalidArgument("extract_hyperfine: underdetermined, " + std::to_string(n_lines) +
                          " lines for " + std::to_string(n_par) +
                          " parameters; fix A_perp (fit_a_perp = false)");
  for (double f : lines_ms0)
    require(std::isfinite(f) && f > 0.0, "extract_hyperfine: line frequencies must be > 0");
  for (double f : lines_ms1)
    require(std::isfinite(f) && f > 0.0, "extract_hyperfine: line frequencies must be > 0");
  const bool weighted = opt.sigma_ms0.has_value() || opt.sigma_ms1.has_value();
  std::vector<double> sig0(per_manifold, 1.0), sig1(per_manifold, 1.0);
  if (weighted) {
    require(opt.sigma_ms0 && opt.sigma_ms1 && opt.sigma_ms0->size() == per_manifold &&
                opt.sigma_ms1->size() == per_manifold,
            "extract_hyperfine: line sigmas must be given for every line");
    sig0 = *opt.sigma_ms0;
    sig1 = *opt.sigma_ms1;
    for (std::size_t i = 0; i < per_manifold; ++i)
      require(sig0[i] > 0.0 && sig1[i] > 0.0, "extract_hyperfine: line sigmas must be > 0");
  }
  // lines are matched in ascending order; sigmas travel with their lines
  auto sort_with = [](std::vector<double> &f, std::vector<double> &s) {
    std::vector<std::size_t> idx(f.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return f[a] < f[b]; });
    std::vector<double> f2, s2;
    for (std::size_t i : idx) {
      f2.push_back(f[i]);
      s2.push_back(s[i]);
    }
    f = f2;
    s = s2;
  };
  sort_with(lines_ms0, sig0);
  sort_with(lines_ms1, sig1);
  std::vector<double> w;
  for (double x : sig0)
    w.push_back(1.0 / x);
  for (double x : sig1)
    w.push_back(1.0 / x);

  // parameter vector: A_par, [P], [A_perp]
  auto unpack = [&](const RVector &p) {
    SpinSystemParams q = params;
    q.A_par_gs = p[0];
    q.quad_P_gs = quad ? p[1] : 0.0;
    q.A_perp_gs = opt.fit_a_perp ? p[quad ? 2 : 1] : opt.a_perp_fixed;
    return q;
  };
  std::vector<int> grad_index = {0};
  if (quad)
    grad_index.push_back(1);
  if (opt.fit_a_perp)
    grad_index.push_back(2);

  const std::vector<double> measured = [&] {
    std::vector<double> v = lines_ms0;
    v.insert(v.end(), lines_ms1.begin(), lines_ms1.end());
    return v;
  }();
  ResidualFn fn = [&](const RVector &p, RMatrix *jac) {
    const SpinSystemParams q = unpack(p);
    RVector r(static_cast<Eigen::Index>(n_lines));
    if (jac)
      jac->resize(static_cast<Eigen::Index>(n_lines), p.size());
    std::size_t row = 0;
    for (int ms : {0, opt.second_manifold}) {
      const ManifoldLines ml = gs_nuclear_lines(q, b0z, ms);
      for (std::size_t i = 0; i < ml.freq.size(); ++i, ++row) {
        const auto ri = static_cast<Eigen::Index>(row);
        r[ri] = w[row] * (ml.freq[i] - measured[row]);
        if (jac)
          for (Eigen::Index j = 0; j < p.size(); ++j)
            (*jac)(ri, j) = w[row] * ml.grad[i][static_cast<std::size_t>(grad_index[static_cast<std::size_t>(j)])];
      }
    }
    return r;
  };

  // first-order starting magnitudes: |P| from the centroid, A_par from the
  // splitting difference between the two manifolds
  const double gnb = params.species.gamma_n * b0z;
  auto mean = [](const std::vector<double> &v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  std::vector<RVector> starts;
  const double ms1 = opt.second_manifold;
  for (double sp : {1.0, -1.0}) {
    for (double sa : {1.0, -1.0}) {
      double a0, p0 = 0.0;
      if (quad) {
        p0 = sp * mean(lines_ms0);
        a0 = (sa * 0.5 * (lines_ms1[1] - lines_ms1[0]) + gnb) / ms1;
      } else {
        if (sp < 0.0)
          continue;
        a0 = (sa * lines_ms1[0] + gnb) / ms1;
      }
      RVector s(n_par);
      s[0] = a0;
      if (quad)
        s[1] = p0;
      if (opt.fit_a_perp)
        s[n_par - 1] = opt.a_perp_init;
      starts.push_back(s);
    }
  }
  RVector lo = RVector::Constant(n_par, -detail::inf()), hi = RVector::Constant(n_par, detail::inf());
  if (opt.fit_a_perp) {
    lo[n_par - 1] = 0.0;
    hi[n_par - 1] = opt.a_perp_max;
  }

  std::vector<std::string> names = {"A_par"};
  if (quad)
    names.push_back("quad_P");
  if (opt.fit_a_perp)
    names.push_back("A_perp");

  HyperfineFit out;
  for (const auto &s : starts) {
    const LmResult lm = levenberg_marquardt(fn, s, lo, hi, opt.lm);
    FitResult fr;
    fr.model = "gs_hyperfine_" + std::string(to_string(species));
    fr.names = names;
    fr.values.assign(lm.p.data(), lm.p.data() + n_par);
    attach_covariance(fr, lm, weighted);
    if (opt.fit_a_perp)
      fr.flags.push_back("a_perp_sign_undetermined");
    const bool dup = std::any_of(out.branches.begin(), out.branches.end(), [&](const FitResult &o) {
      for (int j = 0; j < n_par; ++j)
        if (std::abs(o.values[static_cast<std::size_t>(j)] - fr.values[static_cast<std::size_t>(j)]) > 1e-6)
          return false;
      return true;
    });
    if (!dup)
      out.branches.push_back(std::move(fr));
  }
  std::stable_sort(out.branches.begin(), out.branches.end(),
                   [](const FitResult &a, const FitResult &b) { return a.residual_norm < b.residual_norm; });

  // sign prior only for 14N: negative quadrupole and A_par opposite to gamma_n
  const double tol = 10.0 * std::max(1e-9, out.branches.front().residual_norm);
  std::optional<std::size_t> physical;
  if (quad) {
    for (std::size_t i = 0; i < out.branches.size(); ++i) {
      const auto &b = out.branches[i];
      if (b.value("quad_P") < 0.0 && b.value("A_par") * params.species.gamma_n < 0.0 &&
          b.residual_norm <= tol) {
        physical = i;
        break;
      }
    }
  }
  std::size_t good = 0;
  for (const auto &b : out.branches)
    if (b.residual_norm <= tol)
      ++good;
  out.best = out.branches[physical.value_or(0)];
  if (good > 1)
    out.best.flags.push_back("sign_ambiguous");
  if (quad && !physical)
    out.best.flags.push_back("no_physical_branch");
  if (!quad && good > 1)
    out.best.flags.push_back("sign_branch_unresolved");
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

inline Spectrum synthesize(const std::vector<double> &grid, const std::function<double(double)> &f,
                           std::string x_unit = "x", std::string y_unit = "y") {
  Spectrum s;
  s.x = grid;
  s.x_unit = std::move(x_unit);
  s.y_unit = std::move(y_unit);
  for (double x : grid)
    s.y.push_back(f(x));
  s.validate();
  return s;
}

/// Adds N(0, sigma^2) noise from a seeded mt19937_64 and records sigma as y_err.
inline void add_gaussian_noise(Spectrum &s, double sigma, std::uint64_t seed, bool record_err = true) {
  require(sigma >= 0.0, "add_gaussian_noise: sigma must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double &y : s.y)
    y += sigma * n(rng);
  if (record_err)
    s.y_err = std::vector<double>(s.size(), sigma);
}

} // namespace nvspin
