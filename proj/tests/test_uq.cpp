#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gnnuq/uq.hpp"

using namespace gnnuq;

namespace {

struct HasCode : Catch::Matchers::MatcherGenericBase {
  errc code;
  explicit HasCode(errc c) : code(c) {}
  bool match(const Error& err) const { return err.code() == code; }
  std::string describe() const override {
    return std::string("has error code ") + errc_name(code);
  }
};

double gaussian(SplitMix64& rng) {
  const double u1 = 1.0 - rng.next_double();
  const double u2 = rng.next_double();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// A single-member summary: mu as given, total variance = var, epistemic 0.
EnsembleSummary summary_of(std::vector<double> mu, std::vector<double> var) {
  PredictionSet p;
  p.mu.push_back(std::move(mu));
  p.var.push_back(std::move(var));
  return ensemble_summary(p);
}

// Synthetic regression draws: y ~ N(mu_i, sd_true_i^2), while the summary
// reports sd_report = report_scale * sd_true. report_scale = 1 is perfectly
// calibrated by construction.
struct Synth {
  EnsembleSummary summary;
  std::vector<double> y;
};

Synth make_synth(std::size_t n, double report_scale, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<double> mu(n), var(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    mu[i] = rng.next_uniform(-2.0, 2.0);
    const double sd_true = rng.next_uniform(0.5, 2.0);
    y[i] = mu[i] + sd_true * gaussian(rng);
    const double sd_report = report_scale * sd_true;
    var[i] = sd_report * sd_report;
  }
  Synth out;
  out.summary = summary_of(std::move(mu), std::move(var));
  out.y = std::move(y);
  return out;
}

// O(n^2) rank assignment independent of the implementation under test:
// rank_i = (#j with v_j < v_i) + (ties including self + 1) / 2.
std::vector<double> brute_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t less = 0, eq = 0;
    for (double x : v) {
      if (x < v[i]) ++less;
      if (x == v[i]) ++eq;
    }
    r[i] = double(less) + 0.5 * double(eq + 1);
  }
  return r;
}

std::optional<double> brute_spearman(const std::vector<double>& x,
                                     const std::vector<double>& y) {
  const std::vector<double> rx = brute_ranks(x), ry = brute_ranks(y);
  const double n = double(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("ensemble summary decomposes the two-member worked example") {
  PredictionSet p;
  p.mu = {{0.0}, {2.0}};
  p.var = {{1.0}, {1.0}};
  const EnsembleSummary s = ensemble_summary(p);
  REQUIRE(s.mu.size() == 1);
  REQUIRE(s.mu[0] == 1.0);
  REQUIRE(s.aleatoric[0] == 1.0);
  REQUIRE(s.epistemic[0] == 2.0);
  REQUIRE(s.total[0] == 3.0);
}

TEST_CASE("ensemble summary special cases") {
  SECTION("identical members carry zero epistemic uncertainty") {
    PredictionSet p;
    p.mu = {{1.5, -0.25}, {1.5, -0.25}, {1.5, -0.25}};
    p.var = {{0.7, 2.0}, {0.7, 2.0}, {0.7, 2.0}};
    const EnsembleSummary s = ensemble_summary(p);
    for (std::size_t i = 0; i < 2; ++i) {
      REQUIRE(s.epistemic[i] == 0.0);
      // the mean of three copies of v re-rounds, so ulp-level only
      REQUIRE_THAT(s.aleatoric[i],
                   Catch::Matchers::WithinULP(p.var[0][i], 2));
      REQUIRE(s.total[i] == s.aleatoric[i]);
    }
  }
  SECTION("a single member has zero epistemic by convention") {
    PredictionSet p;
    p.mu = {{0.3, 0.4}};
    p.var = {{1.0, 2.0}};
    const EnsembleSummary s = ensemble_summary(p);
    REQUIRE(s.epistemic[0] == 0.0);
    REQUIRE(s.epistemic[1] == 0.0);
    REQUIRE(s.total[0] == 1.0);
  }
  SECTION("shape errors") {
    PredictionSet empty;
    REQUIRE_THROWS_MATCHES(ensemble_summary(empty), Error,
                           HasCode(errc::LengthMismatch));
    PredictionSet ragged;
    ragged.mu = {{1.0, 2.0}, {1.0}};
    ragged.var = {{1.0, 1.0}, {1.0}};
    REQUIRE_THROWS_MATCHES(ensemble_summary(ragged), Error,
                           HasCode(errc::LengthMismatch));
    PredictionSet unpaired;
    unpaired.mu = {{1.0}};
    unpaired.var = {{1.0}, {1.0}};
    REQUIRE_THROWS_MATCHES(ensemble_summary(unpaired), Error,
                           HasCode(errc::LengthMismatch));
  }
  SECTION("non-positive member variance is rejected") {
    PredictionSet p;
    p.mu = {{0.0}};
    p.var = {{0.0}};
    REQUIRE_THROWS_MATCHES(ensemble_summary(p), Error,
                           HasCode(errc::NonPositiveVariance));
  }
}

TEST_CASE("decomposition identity holds exactly across random ensembles") {
  SplitMix64 rng(404);
  for (std::size_t k : {1u, 2u, 5u, 10u}) {
    PredictionSet p;
    p.mu.resize(k);
    p.var.resize(k);
    for (std::size_t m = 0; m < k; ++m)
      for (std::size_t i = 0; i < 64; ++i) {
        p.mu[m].push_back(rng.next_uniform(-5.0, 5.0));
        p.var[m].push_back(rng.next_uniform(0.01, 4.0));
      }
    const EnsembleSummary s = ensemble_summary(p);
    for (std::size_t i = 0; i < 64; ++i) {
      REQUIRE(s.total[i] == s.aleatoric[i] + s.epistemic[i]);
      REQUIRE(s.aleatoric[i] > 0.0);
      REQUIRE(s.epistemic[i] >= 0.0);
      if (k == 1) REQUIRE(s.epistemic[i] == 0.0);
    }
  }
}

TEST_CASE("metric_nll matches the training loss and its closed forms") {
  SECTION("same formula as nll_loss on identical inputs") {
    SplitMix64 rng(7);
    std::vector<double> mu(40), var(40), y(40);
    for (std::size_t i = 0; i < 40; ++i) {
      mu[i] = rng.next_uniform(-3.0, 3.0);
      var[i] = rng.next_uniform(0.05, 5.0);
      y[i] = rng.next_uniform(-3.0, 3.0);
    }
    REQUIRE(metric_nll(mu, var, y) == nll_loss(mu, var, y));
  }
  SECTION("perfect unit-variance prediction") {
    const std::vector<double> mu{1.0, -2.0}, var{1.0, 1.0}, y{1.0, -2.0};
    REQUIRE_THAT(metric_nll(mu, var, y),
                 Catch::Matchers::WithinAbs(0.91893853320467274178, 1e-12));
  }
  SECTION("doubling the variance at zero error adds half log 2") {
    const std::vector<double> mu{0.5}, y{0.5};
    const std::vector<double> v1{1.3}, v2{2.6};
    REQUIRE_THAT(metric_nll(mu, v2, y) - metric_nll(mu, v1, y),
                 Catch::Matchers::WithinAbs(0.5 * std::log(2.0), 1e-12));
  }
}

TEST_CASE("inverse normal CDF reproduces reference quantiles") {
  // Reference values from an independent AS241 implementation.
  const std::pair<double, double> table[] = {
      {0.5, 0.0},
      {0.975, 1.9599639845400536},
      {0.8413447460685429, 1.0},
      {0.99, 2.3263478740408408},
      {0.999999, 4.753424308817089},
      {1e-9, -5.9978070150076865},
      {0.3, -0.5244005127080407},
      {0.61, 0.27931903444745404},
  };
  for (const auto& [p, z] : table) {
    CAPTURE(p);
    REQUIRE_THAT(detail::inverse_normal_cdf(p),
                 Catch::Matchers::WithinAbs(z, 1e-9));
  }
  SECTION("antisymmetry about the median") {
    for (double p : {0.001, 0.1, 0.25, 0.4, 0.49, 0.86, 0.999}) {
      REQUIRE_THAT(
          detail::inverse_normal_cdf(p) + detail::inverse_normal_cdf(1.0 - p),
          Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
  }
  SECTION("round trip through the forward CDF") {
    for (int i = 1; i < 200; ++i) {
      const double p = double(i) / 200.0;
      const double z = detail::inverse_normal_cdf(p);
      const double back = 0.5 * std::erfc(-z / std::sqrt(2.0));
      REQUIRE_THAT(back, Catch::Matchers::WithinAbs(p, 1e-9));
    }
  }
  SECTION("domain is the open unit interval") {
    for (double p : {0.0, 1.0, -0.5, 1.5}) {
      REQUIRE_THROWS_MATCHES(detail::inverse_normal_cdf(p), Error,
                             HasCode(errc::DegenerateInput));
    }
  }
}

TEST_CASE("spearman hand values") {
  const std::vector<double> up{1.0, 2.0, 3.0, 4.0};
  const std::vector<double> up2{10.0, 20.0, 21.0, 500.0};
  const std::vector<double> down{4.0, 3.0, 2.0, 1.0};
  SECTION("identical ranking gives 1, opposite gives -1") {
    REQUIRE_THAT(*spearman(up, up2), Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(*spearman(up, down), Catch::Matchers::WithinAbs(-1.0, 1e-12));
  }
  SECTION("one swapped pair on three points gives one half") {
    const std::vector<double> m{1.0, 2.0, 3.0}, n{1.0, 3.0, 2.0};
    REQUIRE_THAT(*spearman(m, n), Catch::Matchers::WithinAbs(0.5, 1e-12));
  }
  SECTION("rank correlation only sees order, not scale") {
    std::vector<double> warped(up.size());
    for (std::size_t i = 0; i < up.size(); ++i)
      warped[i] = std::exp(3.0 * up[i]) - 7.0;
    REQUIRE_THAT(*spearman(up, warped), Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  SECTION("constant input has no defined rank correlation") {
    const std::vector<double> flat{2.0, 2.0, 2.0, 2.0};
    REQUIRE_FALSE(spearman(flat, up).has_value());
    REQUIRE_FALSE(spearman(up, flat).has_value());
  }
  SECTION("length errors") {
    const std::vector<double> one{1.0};
    REQUIRE_THROWS_MATCHES(spearman(one, one), Error,
                           HasCode(errc::LengthMismatch));
    REQUIRE_THROWS_MATCHES(spearman(up, one), Error,
                           HasCode(errc::LengthMismatch));
  }
}

TEST_CASE("spearman agrees with a brute-force oracle on vectors with ties") {
  SplitMix64 rng(2024);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 5 + rng.next_index(26);
    std::vector<double> x(n), y(n);
    const bool quantize_x = rng.next_index(2) == 0;
    const bool quantize_y = rng.next_index(2) == 0;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = quantize_x ? double(rng.next_index(4))
                        : rng.next_uniform(-1.0, 1.0);
      y[i] = quantize_y ? double(rng.next_index(4))
                        : rng.next_uniform(-1.0, 1.0);
    }
    const auto expected = brute_spearman(x, y);
    const auto got = spearman(x, y);
    CAPTURE(rep, n);
    REQUIRE(got.has_value() == expected.has_value());
    if (expected.has_value())
      REQUIRE_THAT(*got, Catch::Matchers::WithinAbs(*expected, 1e-12));
  }
}

TEST_CASE("calibration curve is exact on perfect predictions") {
  const std::vector<double> mu{1.0, -2.0, 0.5, 3.0, -1.0, 0.0, 7.0};
  const std::vector<double> var{0.5, 1.0, 2.0, 0.1, 3.0, 0.7, 1.4};
  const CalibrationCurve curve = calibration_curve(mu, var, mu);
  REQUIRE(curve.level.size() == 101);
  REQUIRE(curve.empirical.size() == 101);
  REQUIRE(curve.level.front() == 0.0);
  REQUIRE(curve.level.back() == 1.0);
  for (double ef : curve.empirical) REQUIRE(ef == 1.0);
  // |1 - c| integrates to exactly 1/2 under the trapezoid rule.
  REQUIRE_THAT(curve.mca, Catch::Matchers::WithinAbs(0.5, 1e-12));
  REQUIRE_THAT(curve.ece, Catch::Matchers::WithinAbs(0.5, 1e-12));
  REQUIRE_THAT(curve.mce, Catch::Matchers::WithinAbs(0.99, 1e-12));
}

TEST_CASE("calibration curve on synthetic Gaussian data") {
  const Synth synth = make_synth(100000, 1.0, 99);
  const CalibrationCurve curve =
      calibration_curve(synth.summary.mu, synth.summary.total, synth.y);
  REQUIRE(curve.mca < 0.02);
  REQUIRE(curve.mce >= curve.ece);
  for (std::size_t i = 0; i + 1 < curve.empirical.size(); ++i) {
    REQUIRE(curve.level[i + 1] > curve.level[i]);
    // wider intervals can only gain members
    REQUIRE(curve.empirical[i + 1] >= curve.empirical[i]);
  }
  REQUIRE(curve.empirical.back() == 1.0);
}

TEST_CASE("miscalibrated curves depart from the diagonal on both sides") {
  const Synth narrow = make_synth(20000, 0.5, 5);  // overconfident
  const Synth wide = make_synth(20000, 2.0, 6);    // underconfident
  const CalibrationCurve c_narrow =
      calibration_curve(narrow.summary.mu, narrow.summary.total, narrow.y);
  const CalibrationCurve c_wide =
      calibration_curve(wide.summary.mu, wide.summary.total, wide.y);
  REQUIRE(c_narrow.mca > 0.1);
  REQUIRE(c_wide.mca > 0.1);
  // overconfident: too few points inside each interval; underconfident: too many
  REQUIRE(c_narrow.empirical[50] < 0.45);
  REQUIRE(c_wide.empirical[50] > 0.55);
  REQUIRE(c_narrow.mce >= c_narrow.ece);
  REQUIRE(c_wide.mce >= c_wide.ece);
}

TEST_CASE("calibration curve input validation") {
  const std::vector<double> mu{1.0, 2.0}, y{1.0, 2.0};
  const std::vector<double> bad_var{1.0, 0.0}, short_var{1.0};
  REQUIRE_THROWS_MATCHES(calibration_curve(mu, bad_var, y), Error,
                         HasCode(errc::NonPositiveVariance));
  REQUIRE_THROWS_MATCHES(calibration_curve(mu, short_var, y), Error,
                         HasCode(errc::LengthMismatch));
  REQUIRE_THROWS_MATCHES(calibration_curve({}, {}, {}), Error,
                         HasCode(errc::EmptyInput));
}

TEST_CASE("confidence curve oracle cases") {
  SECTION("uncertainty ordering identical to error ordering gives zero AUCO") {
    std::vector<double> mu(40, 0.0), var(40), y(40);
    SplitMix64 rng(11);
    for (std::size_t i = 0; i < 40; ++i) {
      y[i] = rng.next_uniform(-2.0, 2.0);
      const double err = std::fabs(y[i]);
      var[i] = err * err + 1e-6;  // strictly increasing in |error|
    }
    const ConfidenceCurve curve = confidence_curve(mu, var, y);
    REQUIRE(curve.percentile.size() == 100);
    REQUIRE(curve.mae.size() == 100);
    REQUIRE(curve.oracle_mae.size() == 100);
    for (std::size_t p = 0; p < 100; ++p)
      REQUIRE(curve.mae[p] == curve.oracle_mae[p]);
    REQUIRE(curve.auco == 0.0);
  }
  SECTION("constant errors make every curve flat") {
    std::vector<double> mu(25, 0.0), var(25), y(25, 0.75);
    for (std::size_t i = 0; i < 25; ++i) var[i] = 0.1 + double(i);
    const ConfidenceCurve curve = confidence_curve(mu, var, y);
    for (std::size_t p = 0; p < 100; ++p) {
      REQUIRE(curve.mae[p] == 0.75);
      REQUIRE(curve.oracle_mae[p] == 0.75);
    }
    REQUIRE(curve.auco == 0.0);
  }
  SECTION("anti-correlated uncertainty is worse than the oracle") {
    std::vector<double> mu(30, 0.0), var(30), y(30);
    for (std::size_t i = 0; i < 30; ++i) {
      y[i] = double(i + 1);          // error grows with i
      var[i] = 1.0 / double(i + 1);  // confidence ordering reversed
    }
    const ConfidenceCurve curve = confidence_curve(mu, var, y);
    REQUIRE(curve.auco > 0.0);
    // dropping the "most uncertain" points removes the *smallest* errors,
    // so the retained MAE grows while the oracle's shrinks
    REQUIRE(curve.mae[50] > curve.oracle_mae[50]);
  }
}

TEST_CASE("confidence curve matches a direct implementation") {
  SplitMix64 rng(31);
  std::vector<double> mu(20), var(20), y(20);
  for (std::size_t i = 0; i < 20; ++i) {
    mu[i] = rng.next_uniform(-1.0, 1.0);
    var[i] = rng.next_uniform(0.01, 2.0);
    y[i] = rng.next_uniform(-1.0, 1.0);
  }
  const ConfidenceCurve curve = confidence_curve(mu, var, y);

  auto brute = [&](const std::vector<double>& key) {
    std::vector<std::size_t> order(20);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (key[a] != key[b]) return key[a] > key[b];
      return a < b;
    });
    std::vector<double> out(100);
    for (std::size_t p = 0; p < 100; ++p) {
      const std::size_t dropped = 20 * p / 100;
      std::vector<bool> keep(20, true);
      for (std::size_t k = 0; k < dropped; ++k) keep[order[k]] = false;
      double total = 0.0;
      for (std::size_t i = 0; i < 20; ++i)
        if (keep[i]) total += std::fabs(mu[i] - y[i]);
      out[p] = total / double(20 - dropped);
    }
    return out;
  };
  std::vector<double> abs_err(20);
  for (std::size_t i = 0; i < 20; ++i) abs_err[i] = std::fabs(mu[i] - y[i]);
  const std::vector<double> want_mae = brute(var);
  const std::vector<double> want_oracle = brute(abs_err);
  double want_auco = 0.0;
  for (std::size_t p = 0; p < 100; ++p) {
    REQUIRE_THAT(curve.mae[p],
                 Catch::Matchers::WithinAbs(want_mae[p], 1e-12));
    REQUIRE_THAT(curve.oracle_mae[p],
                 Catch::Matchers::WithinAbs(want_oracle[p], 1e-12));
    want_auco += (want_mae[p] - want_oracle[p]) / 100.0;
  }
  REQUIRE_THAT(curve.auco, Catch::Matchers::WithinAbs(want_auco, 1e-12));
}

TEST_CASE("coverage statistics") {
  SECTION("zero error covers everything") {
    const std::vector<double> mu{1.0, 2.0, 3.0}, var{0.5, 1.0, 2.0};
    const Coverage cov = coverage_stats(mu, var, mu);
    REQUIRE(cov.within_1sd == 1.0);
    REQUIRE(cov.within_2sd == 1.0);
  }
  SECTION("hand-placed errors at half, one-and-a-half, two-and-a-half sigma") {
    const std::vector<double> mu{0.0, 0.0, 0.0}, var{1.0, 1.0, 1.0};
    const std::vector<double> y{0.5, 1.5, 2.5};
    const Coverage cov = coverage_stats(mu, var, y);
    REQUIRE_THAT(cov.within_1sd, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-15));
    REQUIRE_THAT(cov.within_2sd, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-15));
  }
  SECTION("well-calibrated Gaussian data hits the normal quantiles") {
    const Synth synth = make_synth(100000, 1.0, 123);
    const Coverage cov =
        coverage_stats(synth.summary.mu, synth.summary.total, synth.y);
    REQUIRE_THAT(cov.within_1sd, Catch::Matchers::WithinAbs(0.6827, 0.01));
    REQUIRE_THAT(cov.within_2sd, Catch::Matchers::WithinAbs(0.9545, 0.01));
  }
  SECTION("rejects non-positive variance") {
    const std::vector<double> zero{0.0}, neg{-1.0};
    REQUIRE_THROWS_MATCHES(coverage_stats(zero, neg, zero), Error,
                           HasCode(errc::NonPositiveVariance));
  }
}

TEST_CASE("calibrated NLL recovers an underestimated variance scale") {
  // variances reported at a quarter of their true size: Eq. (8b) should find
  // a close to 4 and b close to 0
  const Synth val = make_synth(10000, 0.5, 501);
  const Synth test = make_synth(10000, 0.5, 502);
  const auto [params, cnll] =
      calibrated_nll(val.summary, test.summary, val.y, test.y);
  REQUIRE(params.a >= 3.8);
  REQUIRE(params.a <= 4.2);
  REQUIRE(std::fabs(params.b) < 0.1);
  const double raw_nll = metric_nll(test.summary.mu, test.summary.total, test.y);
  REQUIRE(cnll < raw_nll);
}

TEST_CASE("calibrated NLL leaves calibrated predictions nearly alone") {
  const Synth val = make_synth(10000, 1.0, 77);
  const Synth test = make_synth(10000, 1.0, 78);
  const auto [params, cnll] =
      calibrated_nll(val.summary, test.summary, val.y, test.y);
  REQUIRE(params.a >= 0.9);
  REQUIRE(params.a <= 1.1);
  REQUIRE(std::fabs(params.b) < 0.1);
  REQUIRE(std::isfinite(cnll));
}

TEST_CASE("calibrated validation NLL never exceeds the raw validation NLL") {
  // (a, b) = (1, 0) is always feasible, so the fit cannot do worse than it
  SplitMix64 rng(909);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 50;
    std::vector<double> mu(n), var(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      mu[i] = rng.next_uniform(-2.0, 2.0);
      var[i] = rng.next_uniform(0.05, 3.0);
      y[i] = rng.next_uniform(-3.0, 3.0);
    }
    const EnsembleSummary s = summary_of(mu, var);
    const auto [params, cnll] = calibrated_nll(s, s, y, y);
    const double raw = nll_loss(s.mu, s.total, y);
    CAPTURE(rep, params.a, params.b);
    REQUIRE(cnll <= raw + 1e-9);
    REQUIRE(params.a >= 0.0);
  }
}

TEST_CASE("calibrated NLL input validation") {
  const EnsembleSummary ok = summary_of({0.0, 1.0}, {1.0, 1.0});
  const std::vector<double> y{0.0, 1.0};
  EnsembleSummary empty;
  const std::vector<double> y_short{0.0};
  REQUIRE_THROWS_MATCHES(calibrated_nll(empty, ok, {}, y), Error,
                         HasCode(errc::EmptyValidation));
  REQUIRE_THROWS_MATCHES(calibrated_nll(ok, ok, y_short, y), Error,
                         HasCode(errc::LengthMismatch));
}

TEST_CASE("recalibration shrinks inflated uncertainties") {
  // reported sd is 3x the true sd; the MCA-optimal scale is close to 1/3
  const Synth val = make_synth(5000, 3.0, 61);
  const Synth test = make_synth(5000, 3.0, 62);
  const auto [result, scaled] = recalibrate(val.summary, test.summary, val.y);
  REQUIRE(result.a >= 0.30);
  REQUIRE(result.a <= 0.37);
  REQUIRE(result.post_mca < 0.02);
  REQUIRE(result.post_mca <= result.pre_mca);

  const double a2 = result.a * result.a;
  for (std::size_t i = 0; i < scaled.total.size(); ++i) {
    REQUIRE_THAT(scaled.aleatoric[i],
                 Catch::Matchers::WithinRel(test.summary.aleatoric[i] * a2,
                                            1e-12));
    REQUIRE(scaled.total[i] == scaled.aleatoric[i] + scaled.epistemic[i]);
  }
  const CalibrationCurve after =
      calibration_curve(scaled.mu, scaled.total, test.y);
  const CalibrationCurve before =
      calibration_curve(test.summary.mu, test.summary.total, test.y);
  REQUIRE(after.mca < before.mca);
  REQUIRE(after.mca < 0.03);
}

TEST_CASE("recalibration leaves calibrated data nearly alone") {
  const Synth val = make_synth(5000, 1.0, 71);
  const Synth test = make_synth(100, 1.0, 72);
  const auto [result, scaled] = recalibrate(val.summary, test.summary, val.y);
  REQUIRE(result.a >= 0.9);
  REQUIRE(result.a <= 1.1);
  REQUIRE(result.post_mca <= result.pre_mca);
}

TEST_CASE("recalibration never worsens the fitting split") {
  SplitMix64 rng(84);
  for (double scale : {0.2, 0.6, 1.0, 1.7, 5.0}) {
    const Synth val = make_synth(800, scale, rng.next());
    const Synth test = make_synth(100, scale, rng.next());
    const auto [result, scaled] =
        recalibrate(val.summary, test.summary, val.y);
    CAPTURE(scale);
    REQUIRE(result.post_mca <= result.pre_mca);
    REQUIRE(result.a > 0.0);
  }
  EnsembleSummary empty;
  const Synth any = make_synth(10, 1.0, 1);
  REQUIRE_THROWS_MATCHES(recalibrate(empty, any.summary, {}), Error,
                         HasCode(errc::EmptyValidation));
}

TEST_CASE("recalibration preserves the uncertainty ordering") {
  const Synth val = make_synth(2000, 2.5, 314);
  const Synth test = make_synth(2000, 2.5, 315);
  const auto [result, scaled] = recalibrate(val.summary, test.summary, val.y);
  REQUIRE(result.a != 1.0);

  std::vector<double> abs_err(test.y.size());
  for (std::size_t i = 0; i < test.y.size(); ++i)
    abs_err[i] = std::fabs(test.summary.mu[i] - test.y[i]);
  const auto rho_before = spearman(abs_err, test.summary.total);
  const auto rho_after = spearman(abs_err, scaled.total);
  REQUIRE(rho_before.has_value());
  REQUIRE(rho_after.has_value());
  REQUIRE_THAT(*rho_after, Catch::Matchers::WithinAbs(*rho_before, 1e-12));

  const double auco_before =
      confidence_curve(test.summary.mu, test.summary.total, test.y).auco;
  const double auco_after =
      confidence_curve(scaled.mu, scaled.total, test.y).auco;
  REQUIRE_THAT(auco_after, Catch::Matchers::WithinAbs(auco_before, 1e-12));
}

TEST_CASE("rescale_predictions returns standardized outputs to data units") {
  TargetScaler scaler;
  scaler.mean = 3.0;
  scaler.stdev = 2.0;
  PredictionSet p;
  p.mu = {{0.0, 1.0}, {-1.0, 0.5}};
  p.var = {{1.0, 0.25}, {4.0, 1.0}};
  const PredictionSet out = rescale_predictions(p, scaler);
  REQUIRE(out.mu[0][0] == 3.0);
  REQUIRE(out.mu[0][1] == 5.0);
  REQUIRE(out.mu[1][0] == 1.0);
  REQUIRE(out.var[0][0] == 4.0);
  REQUIRE(out.var[0][1] == 1.0);
  REQUIRE(out.var[1][0] == 16.0);
}

TEST_CASE("predictions CSV round trip") {
  const std::string path = "uq_preds_roundtrip.csv";
  PredictionSet p;
  p.mu = {{1.0 / 3.0, -2.5, 1e-17}, {0.0, 7.25, -1.0 / 7.0}};
  p.var = {{0.1, 2.0, 3.5}, {1.0 / 3.0, 0.7, 1e-12}};
  const std::vector<std::size_t> ids{4, 0, 9};
  const std::vector<double> y{0.5, -1.0 / 3.0, 2.0};
  write_predictions_csv(path, ids, y, p);

  const PredictionsFile file = read_predictions_csv(path);
  REQUIRE(file.ids == ids);
  REQUIRE(file.y == y);
  REQUIRE(file.preds.mu == p.mu);
  REQUIRE(file.preds.var == p.var);

  const std::string text = slurp(path);
  REQUIRE(text.rfind("id,y,mu_0,var_0,mu_1,var_1\n", 0) == 0);
  std::remove(path.c_str());
}

TEST_CASE("predictions CSV error handling") {
  REQUIRE_THROWS_MATCHES(read_predictions_csv("no_such_predictions.csv"),
                         Error, HasCode(errc::IoError));
  const std::string path = "uq_preds_bad.csv";
  {
    std::ofstream out(path);
    out << "smiles,value\n1,2\n";
  }
  REQUIRE_THROWS_MATCHES(read_predictions_csv(path), Error,
                         HasCode(errc::MissingColumn));
  {
    std::ofstream out(path);
    out << "id,y,mu_0,var_0\n0,1.0,not_a_number,1.0\n";
  }
  REQUIRE_THROWS_MATCHES(read_predictions_csv(path), Error,
                         HasCode(errc::MalformedJson));
  {
    std::ofstream out(path);
    out << "id,y,mu_0,var_0\n0,1.0,2.0\n";
  }
  REQUIRE_THROWS_MATCHES(read_predictions_csv(path), Error,
                         HasCode(errc::MalformedJson));
  std::remove(path.c_str());

  PredictionSet p;
  p.mu = {{1.0}};
  p.var = {{1.0}};
  REQUIRE_THROWS_MATCHES(
      write_predictions_csv("x.csv", std::vector<std::size_t>{0, 1},
                            std::vector<double>{0.0}, p),
      Error, HasCode(errc::LengthMismatch));
}

TEST_CASE("curve CSV files") {
  const Synth synth = make_synth(500, 1.0, 3);
  const CalibrationCurve cal =
      calibration_curve(synth.summary.mu, synth.summary.total, synth.y);
  const ConfidenceCurve conf =
      confidence_curve(synth.summary.mu, synth.summary.total, synth.y);

  const std::string cal_path = "uq_cal_curve.csv";
  const std::string conf_path = "uq_conf_curve.csv";
  write_calibration_csv(cal_path, cal);
  write_confidence_csv(conf_path, conf);

  std::istringstream cal_in(slurp(cal_path));
  std::string line;
  REQUIRE(std::getline(cal_in, line));
  REQUIRE(line == "level,empirical_fraction");
  std::size_t cal_rows = 0;
  double first_level = -1.0, first_ef = -1.0;
  while (std::getline(cal_in, line)) {
    if (line.empty()) continue;
    if (cal_rows == 0) std::sscanf(line.c_str(), "%lf,%lf", &first_level, &first_ef);
    ++cal_rows;
  }
  REQUIRE(cal_rows == 101);
  REQUIRE(first_level == 0.0);
  REQUIRE(first_ef == cal.empirical[0]);

  std::istringstream conf_in(slurp(conf_path));
  REQUIRE(std::getline(conf_in, line));
  REQUIRE(line == "percentile,mae,oracle_mae");
  std::size_t conf_rows = 0;
  while (std::getline(conf_in, line)) {
    if (!line.empty()) ++conf_rows;
  }
  REQUIRE(conf_rows == 100);
  std::remove(cal_path.c_str());
  std::remove(conf_path.c_str());
}

TEST_CASE("split evaluation composes the metric suite") {
  const Synth val = make_synth(2000, 1.0, 41);
  const Synth test = make_synth(2000, 1.0, 42);
  const SplitReport rep =
      evaluate_split(val.summary, test.summary, val.y, test.y);

  // mean absolute error of N(0, sd^2) draws with sd in [0.5, 2]: sd*sqrt(2/pi)
  REQUIRE(rep.mae > 0.5);
  REQUIRE(rep.mae < 1.5);
  REQUIRE(rep.rmse >= rep.mae);
  REQUIRE(std::isfinite(rep.nll));
  REQUIRE(rep.cnll <= rep.nll + 0.05);  // test-split estimate, small slack
  REQUIRE(rep.a >= 0.8);
  REQUIRE(rep.a <= 1.2);
  REQUIRE(rep.spearman_rho.has_value());
  REQUIRE(*rep.spearman_rho > 0.2);  // wider sd really does mean larger error
  REQUIRE(rep.mca < 0.03);
  REQUIRE(rep.mce >= rep.ece);
  REQUIRE(rep.auco > 0.0);
  REQUIRE_THAT(rep.cov1, Catch::Matchers::WithinAbs(0.6827, 0.03));
  REQUIRE_THAT(rep.cov2, Catch::Matchers::WithinAbs(0.9545, 0.03));
  REQUIRE(rep.recal_a.has_value());
  REQUIRE(*rep.recal_a >= 0.9);
  REQUIRE(*rep.recal_a <= 1.1);
  REQUIRE(*rep.recal_mca < 0.05);

  const SplitReport bare =
      evaluate_split(val.summary, test.summary, val.y, test.y, false);
  REQUIRE_FALSE(bare.recal_a.has_value());
  REQUIRE_FALSE(bare.recal_mca.has_value());
  REQUIRE(bare.mae == rep.mae);
}

TEST_CASE("report JSON carries every metric field in order") {
  SplitReport rep;
  rep.mae = 1.0;
  rep.rmse = 2.0;
  rep.nll = 3.0;
  rep.cnll = 2.5;
  rep.a = 1.25;
  rep.b = -0.5;
  rep.spearman_rho = 0.75;
  rep.mca = 0.04;
  rep.ece = 0.05;
  rep.mce = 0.09;
  rep.auco = 0.125;
  rep.cov1 = 0.7;
  rep.cov2 = 0.95;
  rep.recal_a = 0.8;
  rep.recal_mca = 0.03;
  const nlohmann::ordered_json j = report_json(rep);
  const std::string want =
      R"({"mae":1.0,"rmse":2.0,"nll":3.0,"cnll":2.5,"a":1.25,"b":-0.5,)"
      R"("spearman":0.75,"mca":0.04,"ece":0.05,"mce":0.09,"auco":0.125,)"
      R"("cov1":0.7,"cov2":0.95,"recal_a":0.8,"recal_mca":0.03})";
  REQUIRE(j.dump() == want);

  rep.spearman_rho = std::nullopt;
  const nlohmann::ordered_json j2 = report_json(rep);
  REQUIRE(j2["spearman"].is_null());

  rep.recal_a = std::nullopt;
  rep.recal_mca = std::nullopt;
  const nlohmann::ordered_json j3 = report_json(rep);
  REQUIRE_FALSE(j3.contains("recal_a"));
  REQUIRE_FALSE(j3.contains("recal_mca"));
}
