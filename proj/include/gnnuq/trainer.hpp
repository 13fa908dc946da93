#pragma once

// Gaussian-NLL training of a single MPNN with Adam, plus MC-dropout
// prediction. One trainer owns one model; concurrency happens one level up,
// where the evolver hands disjoint models to disjoint trainers.

#include <gnnuq/mpnn.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gnnuq {

// One training/evaluation unit: a compiled graph and its standardized target.
struct TrainExample {
  CompiledGraph graph;
  double y = 0.0;
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  bool keep_best_on_val = false;
};

struct TrainHistory {
  std::vector<double> train_loss;  // mean per-example NLL over the epoch
  std::vector<double> val_nll;     // full-validation NLL after the epoch
};

struct TrainResult {
  ModelInstance model;
  TrainHistory history;
  // A non-finite train or validation loss stops the run; the history keeps
  // the offending entry so the abort is visible in artifacts.
  bool diverged = false;
};

// Mean Gaussian negative log-likelihood,
//   (1 / 2|D|) sum_i [ log 2pi + log var_i + (mu_i - y_i)^2 / var_i ].
inline double nll_loss(std::span<const double> mu, std::span<const double> var,
                       std::span<const double> y) {
  if (mu.size() != var.size() || mu.size() != y.size())
    throw Error(errc::LengthMismatch, "nll_loss: mu, var, y lengths differ");
  if (mu.empty())
    throw Error(errc::EmptyInput, "nll_loss: needs at least one point");
  double total = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(var[i] > 0.0))
      throw Error(errc::NonPositiveVariance,
                  "nll_loss: var[" + std::to_string(i) +
                      "] = " + std::to_string(var[i]));
    const double r = mu[i] - y[i];
    total += kLog2Pi + std::log(var[i]) + r * r / var[i];
  }
  return 0.5 * total / static_cast<double>(mu.size());
}

namespace detail {

// nll_loss without the throw-on-bad-variance: divergence during training is
// an in-band condition, reported through TrainResult::diverged rather than
// an exception.
inline double nll_or_nan(std::span<const double> mu,
                         std::span<const double> var,
                         std::span<const double> y) {
  double total = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(var[i] > 0.0) || !std::isfinite(var[i]) || !std::isfinite(mu[i]))
      return std::numeric_limits<double>::quiet_NaN();
    const double r = mu[i] - y[i];
    total += kLog2Pi + std::log(var[i]) + r * r / var[i];
  }
  return 0.5 * total / static_cast<double>(mu.size());
}

// Builds one example's NLL on a fresh tape. When `grad_sum` is non-null the
// backward pass runs and d(loss)/d(weights) is accumulated into it.
inline double example_nll(const ModelInstance& model, const TrainExample& ex,
                          std::vector<Tensor>* grad_sum) {
  Tape t;
  std::vector<int> wid = push_weights(t, model, grad_sum != nullptr);
  ForwardHandles f = build_forward(t, model, ex.graph, wid);
  Tensor target(1, 1);
  target.data[0] = ex.y;
  int resid = t.sub(f.mu, t.constant(std::move(target)));
  int ratio = t.div(t.mul(resid, resid), f.var);
  int loss = t.add_scalar(
      t.mul_scalar(t.add(t.log_(f.var), ratio), 0.5), 0.5 * kLog2Pi);
  const double value = t.value(loss).data[0];
  if (grad_sum != nullptr && std::isfinite(value)) {
    t.backward(loss);
    for (std::size_t k = 0; k < wid.size(); ++k) {
      if (!t.has_grad(wid[k])) continue;
      const Tensor& g = t.grad(wid[k]);
      Tensor& acc = (*grad_sum)[k];
      for (std::size_t i = 0; i < acc.data.size(); ++i)
        acc.data[i] += g.data[i];
    }
  }
  return value;
}

inline double validation_nll(const ModelInstance& model,
                             std::span<const TrainExample> val) {
  std::vector<double> mu(val.size()), var(val.size()), y(val.size());
  for (std::size_t i = 0; i < val.size(); ++i) {
    auto [m, v] = predict_one(model, val[i].graph);
    mu[i] = m;
    var[i] = v;
    y[i] = val[i].y;
  }
  return nll_or_nan(mu, var, y);
}

}  // namespace detail

inline TrainResult train(ModelInstance model,
                         std::span<const TrainExample> train_data,
                         std::span<const TrainExample> val_data,
                         const TrainConfig& cfg) {
  if (!(cfg.learning_rate > 0.0))
    throw std::invalid_argument("train: learning_rate must be > 0");
  if (cfg.batch_size < 1)
    throw std::invalid_argument("train: batch_size must be >= 1");
  if (cfg.epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (train_data.empty())
    throw Error(errc::EmptyInput, "train: empty training split");
  if (val_data.empty())
    throw Error(errc::EmptyValidation, "train: empty validation split");

  TrainResult out{std::move(model), {}, false};
  const std::size_t n_weights = out.model.weights.size();

  // Adam state
  std::vector<Tensor> m1(n_weights), m2(n_weights), grad(n_weights);
  for (std::size_t k = 0; k < n_weights; ++k) {
    const Tensor& w = out.model.weights[k];
    m1[k] = Tensor::zeros(w.rows, w.cols);
    m2[k] = Tensor::zeros(w.rows, w.cols);
    grad[k] = Tensor::zeros(w.rows, w.cols);
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-7;
  constexpr double kClipNorm = 5.0;
  std::int64_t step_count = 0;

  SplitMix64 shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  // The initial weights count as a checkpoint: if no epoch ever improves on
  // them (or the run diverges immediately), best-on-val falls back to them.
  double best_val = std::numeric_limits<double>::infinity();
  std::optional<std::vector<Tensor>> best_weights;
  if (cfg.keep_best_on_val) {
    best_val = detail::validation_nll(out.model, val_data);
    if (std::isfinite(best_val)) best_weights = out.model.weights;
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    fisher_yates(order, shuffle_rng);
    double epoch_loss_total = 0.0;

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double batch_n = static_cast<double>(stop - start);

      for (Tensor& g : grad) std::fill(g.data.begin(), g.data.end(), 0.0);
      for (std::size_t i = start; i < stop; ++i)
        epoch_loss_total +=
            detail::example_nll(out.model, train_data[order[i]], &grad);

      double sq_norm = 0.0;
      for (Tensor& g : grad)
        for (double& v : g.data) {
          v /= batch_n;
          sq_norm += v * v;
        }
      const double norm = std::sqrt(sq_norm);
      if (norm > kClipNorm)
        for (Tensor& g : grad)
          for (double& v : g.data) v *= kClipNorm / norm;

      ++step_count;
      const double c1 = 1.0 - std::pow(kBeta1, double(step_count));
      const double c2 = 1.0 - std::pow(kBeta2, double(step_count));
      for (std::size_t k = 0; k < n_weights; ++k) {
        Tensor& w = out.model.weights[k];
        for (std::size_t i = 0; i < w.data.size(); ++i) {
          const double g = grad[k].data[i];
          m1[k].data[i] = kBeta1 * m1[k].data[i] + (1.0 - kBeta1) * g;
          m2[k].data[i] = kBeta2 * m2[k].data[i] + (1.0 - kBeta2) * g * g;
          const double mhat = m1[k].data[i] / c1;
          const double vhat = m2[k].data[i] / c2;
          w.data[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + kEps);
        }
      }
    }

    const double train_loss =
        epoch_loss_total / static_cast<double>(train_data.size());
    const double val_nll = detail::validation_nll(out.model, val_data);
    out.history.train_loss.push_back(train_loss);
    out.history.val_nll.push_back(val_nll);

    if (!std::isfinite(train_loss) || !std::isfinite(val_nll)) {
      out.diverged = true;
      break;
    }
    if (cfg.keep_best_on_val && val_nll < best_val) {
      best_val = val_nll;
      best_weights = out.model.weights;
    }
  }

  if (cfg.keep_best_on_val && best_weights.has_value())
    out.model.weights = std::move(*best_weights);
  return out;
}

// Per-pass predictions over a dataset; consumed by the uq module exactly
// like a deep ensemble's member predictions.
struct PredictionSet {
  std::vector<std::vector<double>> mu;   // [pass][example]
  std::vector<std::vector<double>> var;  // [pass][example]
};

inline PredictionSet mc_dropout_predict(const ModelInstance& model,
                                        std::span<const TrainExample> data,
                                        double rate, int n_passes,
                                        std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("mc_dropout_predict: rate must be in [0, 1)");
  if (n_passes < 1)
    throw std::invalid_argument("mc_dropout_predict: n_passes must be >= 1");
  PredictionSet out;
  SplitMix64 seeder(seed);
  for (int k = 0; k < n_passes; ++k) {
    SplitMix64 pass_rng(seeder.next());
    MpnnDropout drop{rate, &pass_rng};
    std::vector<double> mu(data.size()), var(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      auto [m, v] = predict_one(model, data[i].graph, &drop);
      mu[i] = m;
      var[i] = v;
    }
    out.mu.push_back(std::move(mu));
    out.var.push_back(std::move(var));
  }
  return out;
}

// Parses, featurizes at each molecule's own size, compiles, and standardizes
// the target. `idx` selects records (a split) from the dataset.
inline std::vector<TrainExample> make_examples(
    const Dataset& data, std::span<const std::size_t> idx,
    const TargetScaler& scaler) {
  std::vector<TrainExample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) {
    const DataRecord& rec = data.records.at(i);
    MolSpec spec = parse_smiles(rec.smiles);
    const auto n = static_cast<std::int64_t>(spec.atoms.size());
    const auto e = static_cast<std::int64_t>(spec.bonds.size()) * 2;
    out.push_back({compile(featurize(spec, n, e)), scaler.apply(rec.y)});
  }
  return out;
}

inline void write_history_csv(const std::string& path,
                              const TrainHistory& history) {
  std::ofstream out(path);
  if (!out) throw Error(errc::IoError, "cannot write " + path);
  out << "epoch,train_loss,val_nll\n";
  char line[96];
  for (std::size_t i = 0; i < history.train_loss.size(); ++i) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", i + 1,
                  history.train_loss[i], history.val_nll[i]);
    out << line;
  }
  if (!out.flush()) throw Error(errc::IoError, "short write to " + path);
}

}  // namespace gnnuq
