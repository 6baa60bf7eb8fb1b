#pragma once

// Observables on top of raw traces and marginals: histogram estimation,
// Gaussian-comb fitting of momentum profiles, anomalous-diffusion exponents,
// wavepacket breathing correlation and acceleration-region maps.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fermi/classical.hpp"
#include "fermi/errors.hpp"
#include "fermi/fft.hpp"
#include "fermi/profile.hpp"

namespace fermi {

// ---------------------------------------------------------------------------
// histogram_marginal
// ---------------------------------------------------------------------------

struct AxisSpec {
  double min = 0.0;
  double max = 1.0;
  std::size_t bins = 64;
};

/// Density histogram over bin centers, normalized so the trapezoid integral
/// over the axis equals 1. Out-of-range samples are dropped; dropping all of
/// them is an error.
inline DistributionProfile histogram_marginal(const std::vector<double>& samples,
                                              const AxisSpec& spec) {
  if (samples.empty())
    throw InvalidParameterError("histogram_marginal: no samples");
  if (!(spec.max > spec.min) || spec.bins < 2)
    throw InvalidParameterError("histogram_marginal: bad axis spec");
  const double width = (spec.max - spec.min) / static_cast<double>(spec.bins);
  std::vector<double> counts(spec.bins, 0.0);
  long kept = 0;
  for (double x : samples) {
    if (!std::isfinite(x) || x < spec.min || x > spec.max) continue;
    std::size_t b = static_cast<std::size_t>((x - spec.min) / width);
    if (b >= spec.bins) b = spec.bins - 1;  // x == max lands in the last bin
    counts[b] += 1.0;
    ++kept;
  }
  if (kept == 0)
    throw EmptyHistogramError("histogram_marginal: every sample is outside the axis range");

  DistributionProfile prof;
  prof.axis.resize(spec.bins);
  prof.density.resize(spec.bins);
  for (std::size_t b = 0; b < spec.bins; ++b) {
    prof.axis[b] = spec.min + (static_cast<double>(b) + 0.5) * width;
    prof.density[b] = counts[b] / (static_cast<double>(kept) * width);
  }
  const double integral = trapezoid(prof.axis, prof.density);
  if (integral > 0.0)
    for (double& d : prof.density) d /= integral;
  prof.total = trapezoid(prof.axis, prof.density);
  return prof;
}

// ---------------------------------------------------------------------------
// comb_fit
// ---------------------------------------------------------------------------

/// Fit of the Gaussian-comb model
///   P(p) = N exp(-(p-mu)^2 / 4 envelope^2) sum_n exp(-(p - n spacing - offset)^2 / 4 sigma^2).
/// `spacing_defined` is false when no periodic structure above the noise
/// floor was found; contrast is then 0.
struct CombFit {
  double spacing = std::numeric_limits<double>::quiet_NaN();
  double comb_width = std::numeric_limits<double>::quiet_NaN();     // sigma of one tooth
  double envelope_width = std::numeric_limits<double>::quiet_NaN(); // the model's Delta p
  double contrast = 0.0;   // comb harmonic power / total AC power, in [0,1]
  double offset = std::numeric_limits<double>::quiet_NaN();  // in [-spacing/2, spacing/2)
  double normalization = std::numeric_limits<double>::quiet_NaN();
  bool spacing_defined = false;
};

namespace detail {

/// |sum_i y_i e^{-2 pi i f x_i}| at an arbitrary frequency.
inline double projection_amplitude(const std::vector<double>& x,
                                   const std::vector<double>& y, double f) {
  double re = 0.0, im = 0.0;
  const double w = 2.0 * std::numbers::pi * f;
  for (std::size_t i = 0; i < x.size(); ++i) {
    re += y[i] * std::cos(w * x[i]);
    im -= y[i] * std::sin(w * x[i]);
  }
  return std::hypot(re, im);
}

/// Phase of the same projection.
inline double projection_phase(const std::vector<double>& x,
                               const std::vector<double>& y, double f) {
  double re = 0.0, im = 0.0;
  const double w = 2.0 * std::numbers::pi * f;
  for (std::size_t i = 0; i < x.size(); ++i) {
    re += y[i] * std::cos(w * x[i]);
    im -= y[i] * std::sin(w * x[i]);
  }
  return std::atan2(im, re);
}

/// Golden-section maximization of the projection amplitude over
/// [f0-hw, f0+hw].
inline double refine_frequency(const std::vector<double>& x,
                               const std::vector<double>& y, double f0, double hw) {
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = f0 - hw, b = f0 + hw;
  double c = b - gr * (b - a), d = a + gr * (b - a);
  double fc = projection_amplitude(x, y, c), fd = projection_amplitude(x, y, d);
  for (int i = 0; i < 60; ++i) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - gr * (b - a);
      fc = projection_amplitude(x, y, c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + gr * (b - a);
      fd = projection_amplitude(x, y, d);
    }
  }
  return 0.5 * (a + b);
}

/// Gaussian moving average with standard deviation `sigma` (same-size output).
inline std::vector<double> gaussian_smooth(const std::vector<double>& y, double dx,
                                           double sigma) {
  const long half = std::max<long>(1, static_cast<long>(std::ceil(3.0 * sigma / dx)));
  std::vector<double> kern(static_cast<std::size_t>(2 * half + 1));
  double ksum = 0.0;
  for (long k = -half; k <= half; ++k) {
    const double u = static_cast<double>(k) * dx / sigma;
    kern[static_cast<std::size_t>(k + half)] = std::exp(-0.5 * u * u);
    ksum += kern[static_cast<std::size_t>(k + half)];
  }
  for (double& v : kern) v /= ksum;
  const long n = static_cast<long>(y.size());
  std::vector<double> out(y.size(), 0.0);
  for (long i = 0; i < n; ++i) {
    double acc = 0.0;
    for (long k = -half; k <= half; ++k) {
      long j = i + k;
      if (j < 0) j = 0;
      if (j >= n) j = n - 1;
      acc += kern[static_cast<std::size_t>(k + half)] * y[static_cast<std::size_t>(j)];
    }
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

/// Power spectrum |DFT(y zero-padded to m)|^2 with m the next power of two
/// >= 2 n. Returns only the first m/2+1 (real input symmetry).
inline std::vector<double> power_spectrum(const std::vector<double>& y, std::size_t& m_out) {
  std::size_t m = 1;
  while (m < 2 * y.size()) m <<= 1;
  m_out = m;
  ComplexField buf(m, std::complex<double>(0.0, 0.0));
  for (std::size_t i = 0; i < y.size(); ++i) buf[i] = y[i];
  Fft1d fft(buf.data(), m);
  fft.forward();
  std::vector<double> power(m / 2 + 1);
  for (std::size_t k = 0; k <= m / 2; ++k) power[k] = std::norm(buf[k]);
  return power;
}

}  // namespace detail

/// Spacing from the dominant non-zero autocorrelation peak of the
/// envelope-subtracted profile, refined by matched-filter projection;
/// tooth width from the harmonic amplitude decay; contrast as the fraction
/// of the profile's AC power in the comb harmonics.
inline CombFit comb_fit(const DistributionProfile& profile) {
  profile.validate();
  const std::size_t n = profile.axis.size();
  if (n < 64)
    throw InvalidParameterError("comb_fit: profile needs at least 64 axis points");
  const double dx = profile.axis[1] - profile.axis[0];
  const double span = profile.axis.back() - profile.axis.front();

  CombFit fit;

  // rough envelope at a fixed fraction of the span; its residual carries the
  // oscillatory part used for period detection
  const std::vector<double> env0 = detail::gaussian_smooth(profile.density, dx, 0.02 * span);
  std::vector<double> osc(n);
  double mean = 0.0;
  for (double d : profile.density) mean += d;
  mean /= static_cast<double>(n);
  double p_osc = 0.0, p_ac = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    osc[i] = profile.density[i] - env0[i];
    p_osc += osc[i] * osc[i];
    const double a = profile.density[i] - mean;
    p_ac += a * a;
  }
  if (p_ac <= 0.0 || p_osc < 1e-12 * p_ac) return fit;  // featureless profile

  // autocorrelation of the oscillatory part via the padded power spectrum
  std::size_t m = 0;
  std::vector<double> pw = detail::power_spectrum(osc, m);
  ComplexField acbuf(m, std::complex<double>(0.0, 0.0));
  for (std::size_t k = 0; k <= m / 2; ++k) acbuf[k] = pw[k];
  for (std::size_t k = m / 2 + 1; k < m; ++k) acbuf[k] = pw[m - k];
  Fft1d acfft(acbuf.data(), m);
  acfft.backward();  // unnormalized; only ratios matter
  const std::size_t half = n / 2;
  std::vector<double> R(half);
  const double R0 = acbuf[0].real();
  if (R0 <= 0.0) return fit;
  for (std::size_t l = 0; l < half; ++l) R[l] = acbuf[l].real() / R0;

  // first local minimum, then the global maximum beyond it
  std::size_t i = 1;
  while (i + 1 < half && !(R[i] <= R[i - 1] && R[i] <= R[i + 1])) ++i;
  if (i + 1 >= half) return fit;
  std::size_t j = i;
  for (std::size_t l = i; l < half; ++l)
    if (R[l] > R[j]) j = l;
  if (R[j] < 0.05 || j == 0) return fit;  // no peak above the noise floor

  const double spacing0 = static_cast<double>(j) * dx;

  // envelope matched to the detected period; refined frequency on its residual
  const std::vector<double> env = detail::gaussian_smooth(profile.density, dx, 0.75 * spacing0);
  std::vector<double> y(n);
  for (std::size_t k = 0; k < n; ++k) y[k] = profile.density[k] - env[k];
  const double fstar =
      detail::refine_frequency(profile.axis, y, 1.0 / spacing0, 0.25 / spacing0);
  if (!(fstar > 0.0)) return fit;
  const double spacing = 1.0 / fstar;

  // harmonic amplitudes A_k ~ exp(-sigma^2 (2 pi k / spacing)^2): weighted
  // log-linear fit for the tooth width
  const int kmax = static_cast<int>(std::min(8.0, 0.45 / (fstar * dx)));
  std::vector<double> amps;
  for (int k = 1; k <= kmax; ++k)
    amps.push_back(detail::projection_amplitude(profile.axis, y, k * fstar));
  double sigma = std::numeric_limits<double>::quiet_NaN();
  if (!amps.empty()) {
    double sw = 0.0, sx = 0.0, sl = 0.0, sxx = 0.0, sxl = 0.0;
    for (std::size_t k = 0; k < amps.size(); ++k) {
      if (amps[k] <= amps[0] * 1e-3) continue;
      const double q = 2.0 * std::numbers::pi * static_cast<double>(k + 1) / spacing;
      const double X = q * q;
      const double L = std::log(amps[k]);
      const double W = amps[k] * amps[k];
      sw += W;
      sx += W * X;
      sl += W * L;
      sxx += W * X * X;
      sxl += W * X * L;
    }
    const double denom = sw * sxx - sx * sx;
    if (sw > 0.0 && std::abs(denom) > 0.0) {
      const double slope = (sw * sxl - sx * sl) / denom;
      sigma = std::sqrt(std::max(-slope, 0.0));
    }
  }

  // comb phase -> tooth offset in [-spacing/2, spacing/2)
  const double phase = detail::projection_phase(profile.axis, y, fstar);
  double offset = std::fmod(-phase / (2.0 * std::numbers::pi * fstar), spacing);
  if (offset < 0.0) offset += spacing;
  if (offset >= 0.5 * spacing) offset -= spacing;

  // envelope Gaussian moments (smoothing variance removed); the model
  // exp(-p^2/4 Dp^2) has variance 2 Dp^2
  double esum = 0.0, emu = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    esum += env[k];
    emu += env[k] * profile.axis[k];
  }
  emu /= esum;
  double evar = 0.0;
  for (std::size_t k = 0; k < n; ++k)
    evar += env[k] * (profile.axis[k] - emu) * (profile.axis[k] - emu);
  evar = evar / esum - (0.75 * spacing0) * (0.75 * spacing0);
  const double envelope = std::sqrt(std::max(evar, 1e-12) / 2.0);

  // contrast: comb-line power over total AC power of the raw profile
  std::vector<double> yac(n);
  for (std::size_t k = 0; k < n; ++k) yac[k] = profile.density[k] - mean;
  std::size_t m2 = 0;
  const std::vector<double> pac = detail::power_spectrum(yac, m2);
  const double fres = 1.0 / (static_cast<double>(m2) * dx);
  double total_ac = 0.0;
  for (std::size_t k = 1; k < pac.size(); ++k) total_ac += pac[k];
  const long bw = std::max<long>(
      2, std::lround((1.0 / (2.0 * std::numbers::pi * std::max(envelope, spacing))) / fres));
  double comb_power = 0.0;
  for (int k = 1; k <= kmax; ++k) {
    const long kc = std::lround(static_cast<double>(k) * fstar / fres);
    const long lo = std::max<long>(1, kc - bw);
    const long hi = std::min<long>(static_cast<long>(pac.size()) - 1, kc + bw);
    for (long l = lo; l <= hi; ++l) comb_power += pac[static_cast<std::size_t>(l)];
  }
  const double contrast = std::min(1.0, total_ac > 0.0 ? comb_power / total_ac : 0.0);

  // validity: a comb needs several teeth under the envelope and teeth
  // narrower than the envelope (the model's sigma << Delta p)
  const bool valid = std::isfinite(sigma) && sigma < envelope &&
                     spacing <= 2.0 * std::numbers::sqrt2 * envelope;
  fit.envelope_width = envelope;
  if (!valid) return fit;

  fit.spacing = spacing;
  fit.comb_width = sigma;
  fit.offset = offset;
  fit.contrast = contrast;
  fit.spacing_defined = true;
  // overall scale: peak of the fitted envelope density
  fit.normalization = *std::max_element(env.begin(), env.end());
  return fit;
}

/// Model density for a CombFit (residual reporting and tests).
inline double comb_model_value(const CombFit& fit, double mu_env, double p) {
  if (!fit.spacing_defined) return 0.0;
  const double envelope =
      std::exp(-(p - mu_env) * (p - mu_env) / (4.0 * fit.envelope_width * fit.envelope_width));
  const long n0 = std::lround((p - fit.offset) / fit.spacing);
  double comb = 0.0;
  for (long k = n0 - 2; k <= n0 + 2; ++k) {
    const double d = p - static_cast<double>(k) * fit.spacing - fit.offset;
    comb += std::exp(-d * d / (4.0 * fit.comb_width * fit.comb_width));
  }
  return fit.normalization * envelope * comb;
}

// ---------------------------------------------------------------------------
// diffusion_exponent
// ---------------------------------------------------------------------------

struct DiffusionFit {
  double alpha = 0.0;
  double prefactor = 0.0;
  double t_lo = 0.0;
  double t_hi = 0.0;
  double r_squared = 0.0;
};

/// Least-squares line on (log t, log y) within [t_lo, t_hi]; alpha is the
/// slope. All in-window samples must have t > 0 and y > 0.
inline DiffusionFit diffusion_exponent(const std::vector<double>& times,
                                       const std::vector<double>& values, double t_lo,
                                       double t_hi) {
  if (times.size() != values.size())
    throw InvalidParameterError("diffusion_exponent: size mismatch");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < t_lo || times[i] > t_hi) continue;
    if (!(times[i] > 0.0) || !(values[i] > 0.0))
      throw FitDomainError("diffusion_exponent: non-positive sample inside the fit window");
    lx.push_back(std::log(times[i]));
    ly.push_back(std::log(values[i]));
  }
  if (lx.size() < 10)
    throw FitDomainError("diffusion_exponent: fewer than 10 points in the fit window");

  const double n = static_cast<double>(lx.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sx += lx[i];
    sy += ly[i];
    sxx += lx[i] * lx[i];
    sxy += lx[i] * ly[i];
  }
  const double denom = n * sxx - sx * sx;
  if (denom == 0.0) throw FitDomainError("diffusion_exponent: degenerate time window");
  const double slope = (n * sxy - sx * sy) / denom;
  const double intercept = (sy - slope * sx) / n;

  double ss_res = 0.0, ss_tot = 0.0;
  const double ymean = sy / n;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    const double fitv = intercept + slope * lx[i];
    ss_res += (ly[i] - fitv) * (ly[i] - fitv);
    ss_tot += (ly[i] - ymean) * (ly[i] - ymean);
  }
  DiffusionFit fit;
  fit.alpha = slope;
  fit.prefactor = std::exp(intercept);
  fit.t_lo = t_lo;
  fit.t_hi = t_hi;
  fit.r_squared = ss_tot > 0.0 ? std::max(0.0, 1.0 - ss_res / ss_tot) : 1.0;
  return fit;
}

// ---------------------------------------------------------------------------
// breathing_score
// ---------------------------------------------------------------------------

struct BreathingScore {
  double correlation = 0.0;        // Pearson correlation of detrended residuals
  double period_trend = 0.0;       // slope of zero-crossing interval vs index
  double mean_period = 0.0;        // twice the mean crossing interval
  std::size_t crossings = 0;
  bool defined = false;
};

namespace detail {

/// Subtract the power law fitted on (log t, log y); returns residuals over
/// the t > 0 samples (indices preserved via the mask).
inline std::vector<double> power_law_residual(const std::vector<double>& t,
                                              const std::vector<double>& y,
                                              std::vector<std::size_t>& kept) {
  std::vector<double> lx, ly;
  kept.clear();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] > 0.0 && y[i] > 0.0) {
      lx.push_back(std::log(t[i]));
      ly.push_back(std::log(y[i]));
      kept.push_back(i);
    }
  }
  if (lx.size() < 4) return {};
  const double n = static_cast<double>(lx.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sx += lx[i];
    sy += ly[i];
    sxx += lx[i] * lx[i];
    sxy += lx[i] * ly[i];
  }
  const double denom = n * sxx - sx * sx;
  const double slope = denom != 0.0 ? (n * sxy - sx * sy) / denom : 0.0;
  const double intercept = (sy - slope * sx) / n;
  std::vector<double> res(lx.size());
  for (std::size_t i = 0; i < lx.size(); ++i)
    res[i] = y[kept[i]] - std::exp(intercept + slope * lx[i]);
  return res;
}

}  // namespace detail

/// Detrend both series by their fitted power laws, then correlate the
/// residuals at zero lag; the period trend comes from the spacing of the
/// first residual's zero crossings.
inline BreathingScore breathing_score(const std::vector<double>& times,
                                      const std::vector<double>& var_p_series,
                                      const std::vector<double>& var_z_series) {
  if (times.size() != var_p_series.size() || times.size() != var_z_series.size())
    throw InvalidParameterError("breathing_score: size mismatch");
  if (times.size() < 32)
    throw InvalidParameterError("breathing_score: needs at least 32 samples");

  std::vector<std::size_t> kept_p, kept_z;
  const std::vector<double> rp = detail::power_law_residual(times, var_p_series, kept_p);
  const std::vector<double> rz = detail::power_law_residual(times, var_z_series, kept_z);

  BreathingScore score;
  if (rp.size() != rz.size() || rp.size() < 8 || kept_p != kept_z) return score;

  double mp = 0.0, mz = 0.0;
  for (std::size_t i = 0; i < rp.size(); ++i) {
    mp += rp[i];
    mz += rz[i];
  }
  mp /= static_cast<double>(rp.size());
  mz /= static_cast<double>(rz.size());
  double spp = 0.0, szz = 0.0, spz = 0.0;
  for (std::size_t i = 0; i < rp.size(); ++i) {
    spp += (rp[i] - mp) * (rp[i] - mp);
    szz += (rz[i] - mz) * (rz[i] - mz);
    spz += (rp[i] - mp) * (rz[i] - mz);
  }
  if (spp <= 0.0 || szz <= 0.0) return score;  // degenerate residuals
  score.correlation = spz / std::sqrt(spp * szz);
  score.defined = true;

  // zero-crossing times of the momentum residual, linearly interpolated
  std::vector<double> crossings;
  for (std::size_t i = 0; i + 1 < rp.size(); ++i) {
    const double a = rp[i] - mp, b = rp[i + 1] - mp;
    if ((a <= 0.0 && b > 0.0) || (a >= 0.0 && b < 0.0)) {
      const double ta = times[kept_p[i]], tb = times[kept_p[i + 1]];
      crossings.push_back(ta + (tb - ta) * (0.0 - a) / (b - a));
    }
  }
  score.crossings = crossings.size();
  if (crossings.size() >= 3) {
    std::vector<double> intervals;
    for (std::size_t i = 0; i + 1 < crossings.size(); ++i)
      intervals.push_back(crossings[i + 1] - crossings[i]);
    double si = 0.0;
    for (double v : intervals) si += v;
    score.mean_period = 2.0 * si / static_cast<double>(intervals.size());
    // least-squares slope of interval vs index
    const double n = static_cast<double>(intervals.size());
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < intervals.size(); ++i) {
      const double x = static_cast<double>(i);
      sx += x;
      sy += intervals[i];
      sxx += x * x;
      sxy += x * intervals[i];
    }
    const double denom = n * sxx - sx * sx;
    score.period_trend = denom != 0.0 ? (n * sxy - sx * sy) / denom : 0.0;
  }
  return score;
}

// ---------------------------------------------------------------------------
// acceleration_map
// ---------------------------------------------------------------------------

struct AccelMapPoint {
  double z0 = 0.0;
  double p0 = 0.0;
  double gain = std::numeric_limits<double>::quiet_NaN();  // mean per-bounce energy gain, last window
  bool flagged = false;
  bool valid = false;  // false: below the mirror at t0 or diverged
};

struct AccelMapOptions {
  DynamicsBackend backend = DynamicsBackend::kHardWall;
  AccelFlagRule rule;
  SmoothOptions smooth;
  BounceOptions bounce;
  double t0 = 0.0;
  int workers = 0;
};

/// Probe each (z0, p0) to t_probe and report the accelerating flag plus the
/// mean per-bounce energy gain over the flag window. Deterministic ordering:
/// p0 major, z0 minor.
inline std::vector<AccelMapPoint> acceleration_map(const std::vector<double>& z0_values,
                                                   const std::vector<double>& p0_values,
                                                   const ScaledParams& params,
                                                   double t_probe,
                                                   const AccelMapOptions& opts = {}) {
  params.validate();
  std::vector<AccelMapPoint> points;
  points.reserve(z0_values.size() * p0_values.size());
  for (double p0 : p0_values)
    for (double z0 : z0_values) points.push_back({z0, p0});

  const auto probe = [&](AccelMapPoint& pt) {
    if (pt.z0 < mirror_position(params.lambda, opts.t0)) return;  // below the mirror
    std::vector<double> energies;
    try {
      if (opts.backend == DynamicsBackend::kHardWall) {
        ClassicalState s{pt.z0, pt.p0, opts.t0};
        while (true) {
          double tau;
          const bool on_mirror = std::abs(s.z - mirror_position(params.lambda, s.t)) <=
                                 opts.bounce.on_mirror_tol;
          if (on_mirror && s.p - mirror_velocity(params.lambda, s.t) < 0.0)
            tau = 0.0;
          else
            tau = find_bounce_time(s, params.lambda, opts.bounce);
          if (s.t + tau >= opts.t0 + t_probe) break;
          s = bounce_map_step(s, params.lambda, opts.bounce).state;
          energies.push_back(0.5 * s.p * s.p + s.z);
        }
      } else {
        ClassicalState s{pt.z0, pt.p0, opts.t0};
        double prev_p = s.p;
        const double t_end = opts.t0 + t_probe;
        const double z_ballistic = detail::ballistic_floor(params);
        while (s.t < t_end) {
          const double remaining = t_end - s.t;
          if (opts.smooth.ballistic_jumps && s.z > z_ballistic) {
            const double drop = s.z - z_ballistic;
            const double tau_reenter =
                s.p + std::sqrt(std::max(0.0, s.p * s.p + 2.0 * drop));
            const double jump = std::min(tau_reenter, remaining);
            if (jump > opts.smooth.h) {
              s = free_flight(s, jump);
              prev_p = s.p;
              continue;
            }
          }
          detail::adaptive_step(s, std::min(opts.smooth.h, remaining), params,
                                opts.smooth, 0);
          if (!s.finite()) return;
          if (prev_p <= 0.0 && s.p > 0.0)
            energies.push_back(scaled_hamiltonian_value(s.z, s.p, s.t, params));
          prev_p = s.p;
        }
      }
    } catch (const Error&) {
      return;  // bracketing/integration failure: point stays invalid
    }
    pt.valid = true;
    pt.flagged = opts.rule.flagged(energies);
    const int w = opts.rule.window;
    const int nb = static_cast<int>(energies.size());
    if (nb >= 2) {
      const int lo = std::max(0, nb - 1 - w);
      pt.gain = (energies[static_cast<std::size_t>(nb - 1)] -
                 energies[static_cast<std::size_t>(lo)]) /
                static_cast<double>(nb - 1 - lo);
    }
  };

  int workers = opts.workers > 0
                    ? opts.workers
                    : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  workers = static_cast<int>(
      std::min<std::size_t>(static_cast<std::size_t>(workers), points.size()));
  if (workers <= 1) {
    for (auto& pt : points) probe(pt);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = static_cast<std::size_t>(w); i < points.size();
             i += static_cast<std::size_t>(workers))
          probe(points[i]);
      });
    for (auto& th : pool) th.join();
  }
  return points;
}

}  // namespace fermi
