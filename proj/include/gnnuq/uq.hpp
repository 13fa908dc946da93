#pragma once

// Ensemble uncertainty decomposition and the full metric suite: NLL,
// calibrated NLL, Spearman rank correlation, calibration curves with
// MCA/ECE/MCE, confidence curves with AUCO, coverage, and recalibration.
// All operations are pure.

#include <gnnuq/trainer.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace gnnuq {

struct EnsembleSummary {
  std::vector<double> mu;         // ensemble mean per sample
  std::vector<double> aleatoric;  // mean member variance
  std::vector<double> epistemic;  // member-mean spread (0 for K = 1)
  std::vector<double> total;      // aleatoric + epistemic, exactly
};

// Eq. (6a)/(6b): mu_E = mean of member means; aleatoric = mean of member
// variances; epistemic = unbiased variance of member means, 0 when K = 1.
inline EnsembleSummary ensemble_summary(const PredictionSet& preds) {
  const std::size_t k = preds.mu.size();
  if (k == 0 || preds.var.size() != k)
    throw Error(errc::LengthMismatch,
                "ensemble_summary: needs K >= 1 members with mu and var");
  const std::size_t n = preds.mu[0].size();
  for (std::size_t m = 0; m < k; ++m)
    if (preds.mu[m].size() != n || preds.var[m].size() != n)
      throw Error(errc::LengthMismatch,
                  "ensemble_summary: member " + std::to_string(m) +
                      " has a different length");
  EnsembleSummary out;
  out.mu.resize(n);
  out.aleatoric.resize(n);
  out.epistemic.resize(n);
  out.total.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0, alea = 0.0;
    for (std::size_t m = 0; m < k; ++m) {
      if (!(preds.var[m][i] > 0.0))
        throw Error(errc::NonPositiveVariance,
                    "ensemble_summary: member " + std::to_string(m) +
                        " sample " + std::to_string(i));
      mean += preds.mu[m][i];
      alea += preds.var[m][i];
    }
    mean /= double(k);
    alea /= double(k);
    // Pairwise-difference form of the unbiased variance: algebraically equal
    // to (1/(K-1)) sum (mu_m - mean)^2 but exactly zero when all members
    // coincide, which the centered form cannot guarantee in floating point.
    double epi = 0.0;
    if (k >= 2) {
      for (std::size_t m = 0; m < k; ++m)
        for (std::size_t l = m + 1; l < k; ++l) {
          const double d = preds.mu[m][i] - preds.mu[l][i];
          epi += d * d;
        }
      epi /= double(k) * double(k - 1);
    }
    out.mu[i] = mean;
    out.aleatoric[i] = alea;
    out.epistemic[i] = epi;
    out.total[i] = alea + epi;
  }
  return out;
}

// Eq. (7): the Gaussian NLL of the ensemble-level prediction. Identical to
// the training loss formula on identical inputs by construction.
inline double metric_nll(std::span<const double> mu,
                         std::span<const double> total_var,
                         std::span<const double> y) {
  return nll_loss(mu, total_var, y);
}

namespace detail {

// Wichura's AS241 (PPND16) rational approximation of the standard normal
// inverse CDF; absolute error far below the 1.2e-9 the metrics require.
inline double inverse_normal_cdf(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw Error(errc::DegenerateInput,
                "inverse_normal_cdf: p must lie in (0, 1)");
  static constexpr double a[8] = {
      3.3871328727963666080e0,  1.3314166789178437745e2,
      1.9715909503065514427e3,  1.3731693765509461125e4,
      4.5921953931549871457e4,  6.7265770927008700853e4,
      3.3430575583588128105e4,  2.5090809287301226727e3};
  static constexpr double b[8] = {
      1.0,                      4.2313330701600911252e1,
      6.8718700749205790830e2,  5.3941960214247511077e3,
      2.1213794301586595867e4,  3.9307895800092710610e4,
      2.8729085735721942674e4,  5.2264952788528545610e3};
  static constexpr double c[8] = {
      1.42343711074968357734e0, 4.63033784615654529590e0,
      5.76949722146069140550e0, 3.64784832476320460504e0,
      1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4};
  static constexpr double d[8] = {
      1.0,                      2.05319162663775882187e0,
      1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2,
      5.47593808499534494600e-4, 1.05075007164441684324e-9};
  static constexpr double e[8] = {
      6.65790464350110377720e0, 5.46378491116411436990e0,
      1.78482653991729133580e0, 2.96560571828504891230e-1,
      2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7};
  static constexpr double f[8] = {
      1.0,                      5.99832206555887937690e-1,
      1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5,
      1.42151175831644588870e-7, 2.04426310338993978564e-15};
  auto horner = [](const double (&k)[8], double x) {
    double v = k[7];
    for (int i = 6; i >= 0; --i) v = v * x + k[i];
    return v;
  };
  const double q = p - 0.5;
  if (std::fabs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q * horner(a, r) / horner(b, r);
  }
  double r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double z;
  if (r <= 5.0) {
    r -= 1.6;
    z = horner(c, r) / horner(d, r);
  } else {
    r -= 5.0;
    z = horner(e, r) / horner(f, r);
  }
  return q < 0.0 ? -z : z;
}

inline void require_same_length(std::span<const double> mu,
                                std::span<const double> var,
                                std::span<const double> y, const char* who) {
  if (mu.size() != var.size() || mu.size() != y.size())
    throw Error(errc::LengthMismatch,
                std::string(who) + ": mu, var, y lengths differ");
  if (mu.empty())
    throw Error(errc::EmptyInput, std::string(who) + ": empty input");
}

}  // namespace detail

// Spearman rank correlation with fractional (average) ranks for ties.
// A constant input has no defined ranking spread; that case returns the
// documented undefined marker rather than a number.
inline std::optional<double> spearman(std::span<const double> x,
                                      std::span<const double> y) {
  if (x.size() != y.size())
    throw Error(errc::LengthMismatch, "spearman: lengths differ");
  if (x.size() < 2)
    throw Error(errc::LengthMismatch, "spearman: needs at least 2 points");
  const std::size_t n = x.size();

  auto ranks = [n](std::span<const double> v) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * double(i + j) + 1.0;  // 1-based average rank
      for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
      i = j + 1;
    }
    return r;
  };

  const std::vector<double> rx = ranks(x), ry = ranks(y);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= double(n);
  my /= double(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

struct CalibrationCurve {
  // 101 points: honest endpoints at c=0 (interval of half-width 0, membership
  // inclusive) and c=1 (infinite interval), plus the 99 interior levels.
  std::vector<double> level;
  std::vector<double> empirical;
  double mca = 0.0;  // trapezoid of |EF - c| over the full path
  double ece = 0.0;  // mean |EF - c| over the 99 interior levels
  double mce = 0.0;  // max  |EF - c| over the 99 interior levels
};

inline CalibrationCurve calibration_curve(std::span<const double> mu,
                                          std::span<const double> var,
                                          std::span<const double> y) {
  detail::require_same_length(mu, var, y, "calibration_curve");
  const std::size_t n = mu.size();
  std::vector<double> abs_err(n), sd(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(var[i] > 0.0))
      throw Error(errc::NonPositiveVariance,
                  "calibration_curve: var[" + std::to_string(i) + "]");
    abs_err[i] = std::fabs(mu[i] - y[i]);
    sd[i] = std::sqrt(var[i]);
  }
  auto fraction_within = [&](double z) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (abs_err[i] <= z * sd[i]) ++hits;
    return double(hits) / double(n);
  };

  CalibrationCurve curve;
  curve.level.push_back(0.0);
  curve.empirical.push_back(fraction_within(0.0));
  double ece_sum = 0.0;
  for (int i = 1; i <= 99; ++i) {
    const double c = double(i) / 100.0;
    const double z = detail::inverse_normal_cdf(0.5 * (1.0 + c));
    const double ef = fraction_within(z);
    curve.level.push_back(c);
    curve.empirical.push_back(ef);
    const double gap = std::fabs(ef - c);
    ece_sum += gap;
    curve.mce = std::max(curve.mce, gap);
  }
  curve.level.push_back(1.0);
  curve.empirical.push_back(1.0);
  curve.ece = ece_sum / 99.0;

  double mca = 0.0;
  for (std::size_t i = 0; i + 1 < curve.level.size(); ++i) {
    const double f0 = std::fabs(curve.empirical[i] - curve.level[i]);
    const double f1 = std::fabs(curve.empirical[i + 1] - curve.level[i + 1]);
    mca += (curve.level[i + 1] - curve.level[i]) * 0.5 * (f0 + f1);
  }
  curve.mca = mca;
  return curve;
}

struct ConfidenceCurve {
  // At percentile p the floor(n*p/100) most-uncertain points are dropped
  // (ties broken by original index) and the MAE of the rest is recorded; the
  // oracle drops by largest true absolute error instead.
  std::vector<double> percentile;  // 0..99
  std::vector<double> mae;
  std::vector<double> oracle_mae;
  double auco = 0.0;  // mean gap between the curve and its oracle
};

inline ConfidenceCurve confidence_curve(std::span<const double> mu,
                                        std::span<const double> var,
                                        std::span<const double> y) {
  detail::require_same_length(mu, var, y, "confidence_curve");
  const std::size_t n = mu.size();
  std::vector<double> abs_err(n);
  for (std::size_t i = 0; i < n; ++i) abs_err[i] = std::fabs(mu[i] - y[i]);

  auto drop_order = [n](std::span<const double> key) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return key[a] > key[b];
    });
    return idx;
  };
  auto curve_for = [&](const std::vector<std::size_t>& order) {
    // prefix[k] = sum of |err| over the k first-dropped points
    std::vector<double> prefix(n + 1, 0.0);
    for (std::size_t k = 0; k < n; ++k)
      prefix[k + 1] = prefix[k] + abs_err[order[k]];
    std::vector<double> out(100);
    for (int p = 0; p < 100; ++p) {
      const std::size_t dropped = n * std::size_t(p) / 100;
      out[std::size_t(p)] =
          (prefix[n] - prefix[dropped]) / double(n - dropped);
    }
    return out;
  };

  ConfidenceCurve curve;
  curve.mae = curve_for(drop_order(var));
  curve.oracle_mae = curve_for(drop_order(abs_err));
  curve.percentile.resize(100);
  double gap = 0.0;
  for (int p = 0; p < 100; ++p) {
    curve.percentile[std::size_t(p)] = double(p);
    gap += curve.mae[std::size_t(p)] - curve.oracle_mae[std::size_t(p)];
  }
  curve.auco = gap / 100.0;
  return curve;
}

struct Coverage {
  double within_1sd = 0.0;
  double within_2sd = 0.0;
};

inline Coverage coverage_stats(std::span<const double> mu,
                               std::span<const double> var,
                               std::span<const double> y) {
  detail::require_same_length(mu, var, y, "coverage_stats");
  Coverage cov;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(var[i] > 0.0))
      throw Error(errc::NonPositiveVariance,
                  "coverage_stats: var[" + std::to_string(i) + "]");
    const double err = std::fabs(mu[i] - y[i]);
    const double sd = std::sqrt(var[i]);
    if (err <= sd) cov.within_1sd += 1.0;
    if (err <= 2.0 * sd) cov.within_2sd += 1.0;
  }
  cov.within_1sd /= double(mu.size());
  cov.within_2sd /= double(mu.size());
  return cov;
}

struct CalibrationParams {
  double a = 1.0;
  double b = 0.0;
};

namespace detail {

// Eq. (8a) objective: NLL with variances a*var + b, large barrier outside
// the feasible region (a >= 0, a*var + b > 1e-12 everywhere).
inline double cnll_objective(double a, double b, std::span<const double> mu,
                             std::span<const double> var,
                             std::span<const double> y) {
  if (a < 0.0) return 1e30 * (1.0 - a);
  double total = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double v = a * var[i] + b;
    if (v <= 1e-12) return 1e30 + 1e30 * (1e-12 - v);
    const double r = mu[i] - y[i];
    total += kLog2Pi + std::log(v) + r * r / v;
  }
  return 0.5 * total / double(mu.size());
}

}  // namespace detail

// Eq. (8a)/(8b): fit (a, b) on validation by Nelder-Mead from (1, 0), then
// report the calibrated NLL of the test split under the fitted parameters.
// Deterministic: fixed initial simplex, value tolerance 1e-10, at most 2000
// iterations. Test variances are floored at 1e-12 if the affine map turns a
// test point non-positive.
inline std::pair<CalibrationParams, double> calibrated_nll(
    const EnsembleSummary& val, const EnsembleSummary& test,
    std::span<const double> y_val, std::span<const double> y_test) {
  if (val.mu.empty())
    throw Error(errc::EmptyValidation, "calibrated_nll: empty validation");
  detail::require_same_length(val.mu, val.total, y_val, "calibrated_nll");
  detail::require_same_length(test.mu, test.total, y_test, "calibrated_nll");

  auto f = [&](double a, double b) {
    return detail::cnll_objective(a, b, val.mu, val.total, y_val);
  };

  struct Vertex {
    double a, b, value;
  };
  std::vector<Vertex> simplex = {{1.0, 0.0, f(1.0, 0.0)},
                                 {1.1, 0.0, f(1.1, 0.0)},
                                 {1.0, 0.1, f(1.0, 0.1)}};
  auto by_value = [](const Vertex& l, const Vertex& r) {
    return l.value < r.value;
  };
  for (int iter = 0; iter < 2000; ++iter) {
    std::sort(simplex.begin(), simplex.end(), by_value);
    if (std::fabs(simplex[2].value - simplex[0].value) <= 1e-10) break;
    const double ca = 0.5 * (simplex[0].a + simplex[1].a);
    const double cb = 0.5 * (simplex[0].b + simplex[1].b);
    Vertex& worst = simplex[2];

    const double ra = ca + (ca - worst.a), rb = cb + (cb - worst.b);
    const double rv = f(ra, rb);
    if (rv < simplex[0].value) {
      const double ea = ca + 2.0 * (ca - worst.a);
      const double eb = cb + 2.0 * (cb - worst.b);
      const double ev = f(ea, eb);
      worst = ev < rv ? Vertex{ea, eb, ev} : Vertex{ra, rb, rv};
      continue;
    }
    if (rv < simplex[1].value) {
      worst = {ra, rb, rv};
      continue;
    }
    const double oa = ca + 0.5 * ((rv < worst.value ? ra : worst.a) - ca);
    const double ob = cb + 0.5 * ((rv < worst.value ? rb : worst.b) - cb);
    const double ov = f(oa, ob);
    if (ov < std::min(rv, worst.value)) {
      worst = {oa, ob, ov};
      continue;
    }
    // shrink toward the best vertex
    for (int i = 1; i < 3; ++i) {
      simplex[std::size_t(i)].a =
          simplex[0].a + 0.5 * (simplex[std::size_t(i)].a - simplex[0].a);
      simplex[std::size_t(i)].b =
          simplex[0].b + 0.5 * (simplex[std::size_t(i)].b - simplex[0].b);
      simplex[std::size_t(i)].value =
          f(simplex[std::size_t(i)].a, simplex[std::size_t(i)].b);
    }
  }
  std::sort(simplex.begin(), simplex.end(), by_value);
  CalibrationParams params{std::max(simplex[0].a, 0.0), simplex[0].b};

  std::vector<double> test_var(test.total.size());
  for (std::size_t i = 0; i < test_var.size(); ++i)
    test_var[i] = std::max(params.a * test.total[i] + params.b, 1e-12);
  const double cnll = nll_loss(test.mu, test_var, y_test);
  return {params, cnll};
}

struct RecalibrationResult {
  double a = 1.0;        // multiplies standard deviations
  double pre_mca = 0.0;  // validation MCA at a = 1
  double post_mca = 0.0; // validation MCA at the fitted a
};

// Scales standard deviations by a scalar a chosen to minimize validation
// MCA: a 400-point log grid on [1e-3, 1e3] (with a = 1 always included),
// then golden-section refinement on the bracketing interval. Aleatoric and
// epistemic test variances rescale jointly by a^2, keeping total their sum.
inline std::pair<RecalibrationResult, EnsembleSummary> recalibrate(
    const EnsembleSummary& val, const EnsembleSummary& test,
    std::span<const double> y_val) {
  if (val.mu.empty())
    throw Error(errc::EmptyValidation, "recalibrate: empty validation");
  detail::require_same_length(val.mu, val.total, y_val, "recalibrate");

  auto mca_at = [&](double a) {
    std::vector<double> scaled(val.total.size());
    for (std::size_t i = 0; i < scaled.size(); ++i)
      scaled[i] = a * a * val.total[i];
    return calibration_curve(val.mu, scaled, y_val).mca;
  };

  std::vector<double> grid;
  grid.reserve(401);
  for (int i = 0; i < 400; ++i)
    grid.push_back(std::pow(10.0, -3.0 + 6.0 * double(i) / 399.0));
  grid.push_back(1.0);
  std::sort(grid.begin(), grid.end());

  std::size_t best_idx = 0;
  double best_mca = std::numeric_limits<double>::infinity();
  std::vector<double> grid_mca(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    grid_mca[i] = mca_at(grid[i]);
    if (grid_mca[i] < best_mca) {
      best_mca = grid_mca[i];
      best_idx = i;
    }
  }

  // golden-section refinement in log10(a) between the grid neighbors
  double lo = std::log10(grid[best_idx > 0 ? best_idx - 1 : best_idx]);
  double hi = std::log10(
      grid[best_idx + 1 < grid.size() ? best_idx + 1 : best_idx]);
  const double inv_phi = 0.6180339887498949;
  double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
  double f1 = mca_at(std::pow(10.0, x1)), f2 = mca_at(std::pow(10.0, x2));
  while (hi - lo > 1e-6) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = mca_at(std::pow(10.0, x1));
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = mca_at(std::pow(10.0, x2));
    }
  }
  const double refined = std::pow(10.0, 0.5 * (lo + hi));
  const double refined_mca = mca_at(refined);

  RecalibrationResult result;
  result.pre_mca = grid_mca[std::size_t(
      std::find(grid.begin(), grid.end(), 1.0) - grid.begin())];
  if (refined_mca < best_mca) {
    result.a = refined;
    result.post_mca = refined_mca;
  } else {
    result.a = grid[best_idx];
    result.post_mca = best_mca;
  }

  EnsembleSummary scaled = test;
  const double a2 = result.a * result.a;
  for (std::size_t i = 0; i < scaled.total.size(); ++i) {
    scaled.aleatoric[i] *= a2;
    scaled.epistemic[i] *= a2;
    scaled.total[i] = scaled.aleatoric[i] + scaled.epistemic[i];
  }
  return {result, scaled};
}

// Back-transforms standardized member predictions to original units.
inline PredictionSet rescale_predictions(const PredictionSet& preds,
                                         const TargetScaler& scaler) {
  PredictionSet out = preds;
  for (std::size_t k = 0; k < out.mu.size(); ++k)
    for (std::size_t i = 0; i < out.mu[k].size(); ++i) {
      out.mu[k][i] = scaler.invert_mu(out.mu[k][i]);
      out.var[k][i] = scaler.invert_var(out.var[k][i]);
    }
  return out;
}

// ---------------------------------------------------------------------------
// External formats

inline void write_predictions_csv(const std::string& path,
                                  std::span<const std::size_t> ids,
                                  std::span<const double> y,
                                  const PredictionSet& preds) {
  const std::size_t k = preds.mu.size();
  if (ids.size() != y.size() ||
      (k > 0 && preds.mu[0].size() != ids.size()))
    throw Error(errc::LengthMismatch, "write_predictions_csv: row counts");
  std::ofstream out(path);
  if (!out) throw Error(errc::IoError, "cannot write " + path);
  out << "id,y";
  for (std::size_t m = 0; m < k; ++m)
    out << ",mu_" << m << ",var_" << m;
  out << "\n";
  char cell[40];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i];
    std::snprintf(cell, sizeof cell, ",%.17g", y[i]);
    out << cell;
    for (std::size_t m = 0; m < k; ++m) {
      std::snprintf(cell, sizeof cell, ",%.17g", preds.mu[m][i]);
      out << cell;
      std::snprintf(cell, sizeof cell, ",%.17g", preds.var[m][i]);
      out << cell;
    }
    out << "\n";
  }
  if (!out.flush()) throw Error(errc::IoError, "short write to " + path);
}

struct PredictionsFile {
  std::vector<std::size_t> ids;
  std::vector<double> y;
  PredictionSet preds;
};

inline PredictionsFile read_predictions_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(errc::IoError, "cannot open " + path);
  std::string header;
  if (!std::getline(in, header))
    throw Error(errc::MalformedJson, path + ": missing header");
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  if (cols.size() < 2 || cols[0] != "id" || cols[1] != "y" ||
      (cols.size() - 2) % 2 != 0)
    throw Error(errc::MissingColumn, path + ": expected id,y,mu_k,var_k...");
  const std::size_t k = (cols.size() - 2) / 2;

  PredictionsFile file;
  file.preds.mu.resize(k);
  file.preds.var.resize(k);
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    bool first = true;
    std::size_t id = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        if (first) {
          id = std::stoul(cell);
          first = false;
        } else {
          row.push_back(std::stod(cell));
        }
      } catch (const std::exception&) {
        throw Error(errc::MalformedJson,
                    path + " line " + std::to_string(line_no));
      }
    }
    if (row.size() != 1 + 2 * k)
      throw Error(errc::MalformedJson,
                  path + " line " + std::to_string(line_no) +
                      ": wrong cell count");
    file.ids.push_back(id);
    file.y.push_back(row[0]);
    for (std::size_t m = 0; m < k; ++m) {
      file.preds.mu[m].push_back(row[1 + 2 * m]);
      file.preds.var[m].push_back(row[2 + 2 * m]);
    }
  }
  return file;
}

inline void write_calibration_csv(const std::string& path,
                                  const CalibrationCurve& curve) {
  std::ofstream out(path);
  if (!out) throw Error(errc::IoError, "cannot write " + path);
  out << "level,empirical_fraction\n";
  char line[64];
  for (std::size_t i = 0; i < curve.level.size(); ++i) {
    std::snprintf(line, sizeof line, "%.17g,%.17g\n", curve.level[i],
                  curve.empirical[i]);
    out << line;
  }
  if (!out.flush()) throw Error(errc::IoError, "short write to " + path);
}

inline void write_confidence_csv(const std::string& path,
                                 const ConfidenceCurve& curve) {
  std::ofstream out(path);
  if (!out) throw Error(errc::IoError, "cannot write " + path);
  out << "percentile,mae,oracle_mae\n";
  char line[96];
  for (std::size_t i = 0; i < curve.percentile.size(); ++i) {
    std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g\n",
                  curve.percentile[i], curve.mae[i], curve.oracle_mae[i]);
    out << line;
  }
  if (!out.flush()) throw Error(errc::IoError, "short write to " + path);
}

// The full per-split metric block the CLI writes as report JSON.
struct SplitReport {
  double mae = 0.0;
  double rmse = 0.0;
  double nll = 0.0;
  double cnll = 0.0;
  double a = 1.0;  // cNLL affine parameters fitted on validation
  double b = 0.0;
  std::optional<double> spearman_rho;
  double mca = 0.0;
  double ece = 0.0;
  double mce = 0.0;
  double auco = 0.0;
  double cov1 = 0.0;
  double cov2 = 0.0;
  // present only when recalibration was requested
  std::optional<double> recal_a;    // std-dev scale fitted on validation
  std::optional<double> recal_mca;  // test MCA after recalibration
};

// Evaluates the test split, using the validation split to fit the cNLL
// affine map and (optionally) the recalibration scale.
inline SplitReport evaluate_split(const EnsembleSummary& val,
                                  const EnsembleSummary& test,
                                  std::span<const double> y_val,
                                  std::span<const double> y_test,
                                  bool with_recalibration = true) {
  SplitReport rep;
  const std::size_t n = test.mu.size();
  detail::require_same_length(test.mu, test.total, y_test, "evaluate_split");
  std::vector<double> abs_err(n);
  double se = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    abs_err[i] = std::fabs(test.mu[i] - y_test[i]);
    rep.mae += abs_err[i];
    se += abs_err[i] * abs_err[i];
  }
  rep.mae /= double(n);
  rep.rmse = std::sqrt(se / double(n));
  rep.nll = metric_nll(test.mu, test.total, y_test);

  auto [params, cnll] = calibrated_nll(val, test, y_val, y_test);
  rep.cnll = cnll;
  rep.a = params.a;
  rep.b = params.b;

  rep.spearman_rho = spearman(abs_err, test.total);

  CalibrationCurve cal = calibration_curve(test.mu, test.total, y_test);
  rep.mca = cal.mca;
  rep.ece = cal.ece;
  rep.mce = cal.mce;
  rep.auco = confidence_curve(test.mu, test.total, y_test).auco;

  Coverage cov = coverage_stats(test.mu, test.total, y_test);
  rep.cov1 = cov.within_1sd;
  rep.cov2 = cov.within_2sd;

  if (with_recalibration) {
    auto [recal, scaled_test] = recalibrate(val, test, y_val);
    rep.recal_a = recal.a;
    rep.recal_mca =
        calibration_curve(scaled_test.mu, scaled_test.total, y_test).mca;
  }
  return rep;
}

inline nlohmann::ordered_json report_json(const SplitReport& rep) {
  nlohmann::ordered_json j;
  j["mae"] = rep.mae;
  j["rmse"] = rep.rmse;
  j["nll"] = rep.nll;
  j["cnll"] = rep.cnll;
  j["a"] = rep.a;
  j["b"] = rep.b;
  if (rep.spearman_rho.has_value())
    j["spearman"] = *rep.spearman_rho;
  else
    j["spearman"] = nullptr;
  j["mca"] = rep.mca;
  j["ece"] = rep.ece;
  j["mce"] = rep.mce;
  j["auco"] = rep.auco;
  j["cov1"] = rep.cov1;
  j["cov2"] = rep.cov2;
  if (rep.recal_a.has_value()) j["recal_a"] = *rep.recal_a;
  if (rep.recal_mca.has_value()) j["recal_mca"] = *rep.recal_mca;
  return j;
}

}  // namespace gnnuq
