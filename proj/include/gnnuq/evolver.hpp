#pragma once

// Aging-evolution architecture search. A coordinator owns the population
// (a FIFO of the last P completed evaluations) and the catalog; up to
// cfg.workers evaluations run concurrently. Parents are sampled from the
// population at dispatch time; insertion, aging, and catalog appends happen
// at completion time in completion order. With workers=1 the whole search is
// bit-deterministic in cfg.seed; with more workers it is reproducible in
// distribution only.

#include <gnnuq/trainer.hpp>

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <deque>
#include <exception>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace gnnuq {

struct SearchConfig {
  int total_evals = 300;
  int population_size = 100;
  int sample_size = 10;
  int workers = 1;
  TrainConfig eval_train;  // epochs=30, keep_best_on_val=false by default
  std::uint64_t seed = 0;
};

struct CatalogRecord {
  std::int64_t eval_id = 0;
  Genome genome;
  double val_nll = 0.0;  // +inf when failed
  bool failed = false;
  double train_seconds = 0.0;
  int worker_id = 0;
  std::optional<std::int64_t> parent_eval_id;  // absent for initial genomes
};

// What one evaluation reports back to the coordinator.
struct EvalResult {
  double val_nll = 0.0;
  double train_seconds = 0.0;
  bool failed = false;
};

using EvalFn = std::function<EvalResult(
    const Genome&, std::uint64_t model_seed, std::uint64_t train_seed)>;
using CatalogSink = std::function<void(const CatalogRecord&)>;

inline nlohmann::ordered_json encode_record(const CatalogRecord& r) {
  nlohmann::ordered_json j;
  j["eval_id"] = r.eval_id;
  j["genome"] = encode_genome(r.genome);
  if (r.failed)
    j["val_nll"] = nullptr;
  else
    j["val_nll"] = r.val_nll;
  j["failed"] = r.failed;
  j["train_seconds"] = r.train_seconds;
  j["worker_id"] = r.worker_id;
  if (r.parent_eval_id.has_value()) j["parent_eval_id"] = *r.parent_eval_id;
  return j;
}

template <typename Json,
          typename = std::enable_if_t<nlohmann::detail::is_basic_json<Json>::value>>
inline CatalogRecord decode_record(const Json& j, const SearchSpace& space) {
  CatalogRecord r;
  try {
    r.eval_id = j.at("eval_id").template get<std::int64_t>();
    r.genome = decode_genome(j.at("genome"), space);
    r.failed = j.at("failed").template get<bool>();
    if (r.failed || j.at("val_nll").is_null()) {
      r.failed = true;
      r.val_nll = std::numeric_limits<double>::infinity();
    } else {
      r.val_nll = j.at("val_nll").template get<double>();
    }
    r.train_seconds = j.at("train_seconds").template get<double>();
    r.worker_id = j.at("worker_id").template get<int>();
    if (j.contains("parent_eval_id"))
      r.parent_eval_id = j.at("parent_eval_id").template get<std::int64_t>();
  } catch (const nlohmann::detail::exception& err) {
    throw Error(errc::MalformedJson,
                std::string("catalog record: ") + err.what());
  }
  return r;
}

inline std::vector<CatalogRecord> read_catalog(const std::string& path,
                                               const SearchSpace& space) {
  std::ifstream in(path);
  if (!in) throw Error(errc::IoError, "cannot open catalog " + path);
  std::vector<CatalogRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw Error(errc::MalformedJson,
                  "catalog line " + std::to_string(line_no));
    CatalogRecord r = decode_record(j, space);
    if (r.eval_id != static_cast<std::int64_t>(records.size()))
      throw Error(errc::MalformedJson,
                  "catalog line " + std::to_string(line_no) +
                      ": eval_ids must be dense from 0");
    records.push_back(std::move(r));
  }
  return records;
}

inline void write_catalog(const std::string& path,
                          std::span<const CatalogRecord> records) {
  std::ofstream out(path);
  if (!out) throw Error(errc::IoError, "cannot write catalog " + path);
  for (const CatalogRecord& r : records) out << encode_record(r).dump() << '\n';
  if (!out.flush()) throw Error(errc::IoError, "short write to " + path);
}

inline std::vector<CatalogRecord> run_search_with(
    const SearchSpace& space, const SearchConfig& cfg, const EvalFn& eval,
    const CatalogSink& sink = {},
    std::span<const CatalogRecord> resume = {}) {
  if (cfg.population_size < 1 || cfg.sample_size < 1 || cfg.workers < 1)
    throw std::invalid_argument("run_search: sizes must be positive");
  if (cfg.sample_size > cfg.population_size)
    throw std::invalid_argument("run_search: sample_size must be <= P");
  if (cfg.population_size > cfg.total_evals)
    throw std::invalid_argument("run_search: P must be <= total_evals");
  if (static_cast<int>(resume.size()) > cfg.total_evals)
    throw std::invalid_argument("run_search: resume longer than total_evals");

  struct Member {
    Genome genome;
    double val_nll;
    std::int64_t eval_id;
  };

  std::vector<CatalogRecord> records(resume.begin(), resume.end());
  std::deque<Member> population;
  for (const CatalogRecord& r : records) {
    population.push_back({r.genome, r.val_nll, r.eval_id});
    if (population.size() > static_cast<std::size_t>(cfg.population_size))
      population.pop_front();
  }

  std::mutex mx;
  int dispatch_next = static_cast<int>(records.size());
  bool aborted = false;
  std::exception_ptr sink_error;
  const double kInf = std::numeric_limits<double>::infinity();

  auto worker = [&](int worker_id) {
    for (;;) {
      Genome genome;
      std::optional<std::int64_t> parent_id;
      std::uint64_t model_seed = 0, train_seed = 0;
      {
        std::lock_guard<std::mutex> lock(mx);
        if (aborted || dispatch_next >= cfg.total_evals) return;
        // The k-th dispatch gets its own stream; with workers=1 the dispatch
        // counter equals the completion eval_id, which is what makes the
        // sequential search bit-deterministic.
        const int k = dispatch_next++;
        SplitMix64 rng(derive_seed(cfg.seed, std::uint64_t(k)));
        if (k < cfg.population_size || population.empty()) {
          genome = space.random_genome(rng);
        } else {
          // sample S members without replacement, take the fittest as parent
          const std::size_t s = std::min(population.size(),
                                         std::size_t(cfg.sample_size));
          std::vector<std::size_t> idx(population.size());
          std::iota(idx.begin(), idx.end(), std::size_t{0});
          const Member* parent = nullptr;
          for (std::size_t i = 0; i < s; ++i) {
            const std::size_t j = i + rng.next_index(idx.size() - i);
            std::swap(idx[i], idx[j]);
            const Member& cand = population[idx[i]];
            if (parent == nullptr || cand.val_nll < parent->val_nll ||
                (cand.val_nll == parent->val_nll &&
                 cand.eval_id < parent->eval_id))
              parent = &cand;
          }
          genome = space.mutate(parent->genome, rng);
          parent_id = parent->eval_id;
        }
        model_seed = rng.next();
        train_seed = rng.next();
      }

      EvalResult result;
      try {
        result = eval(genome, model_seed, train_seed);
      } catch (...) {
        // individual evaluation failures never abort the search
        result = {kInf, 0.0, true};
      }
      if (!std::isfinite(result.val_nll)) result.failed = true;

      {
        std::lock_guard<std::mutex> lock(mx);
        CatalogRecord rec;
        rec.eval_id = static_cast<std::int64_t>(records.size());
        rec.genome = genome;
        rec.failed = result.failed;
        rec.val_nll = result.failed ? kInf : result.val_nll;
        rec.train_seconds = result.train_seconds;
        rec.worker_id = worker_id;
        rec.parent_eval_id = parent_id;
        records.push_back(rec);
        population.push_back({rec.genome, rec.val_nll, rec.eval_id});
        if (population.size() > static_cast<std::size_t>(cfg.population_size))
          population.pop_front();
        if (sink && !aborted) {
          try {
            sink(rec);
          } catch (...) {
            sink_error = std::current_exception();
            aborted = true;
          }
        }
      }
    }
  };

  if (cfg.workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(std::size_t(cfg.workers));
    for (int w = 0; w < cfg.workers; ++w) pool.emplace_back(worker, w);
    for (std::thread& t : pool) t.join();
  }
  if (sink_error) std::rethrow_exception(sink_error);
  return records;
}

// The real search: every evaluation instantiates the genome and trains it
// for cfg.eval_train.epochs, rewarding the final validation NLL.
inline std::vector<CatalogRecord> run_search(
    const SearchSpace& space, std::span<const TrainExample> train_data,
    std::span<const TrainExample> val_data, std::int64_t n_max,
    const SearchConfig& cfg, const CatalogSink& sink = {},
    std::span<const CatalogRecord> resume = {}, bool record_seconds = true) {
  EvalFn fn = [&, n_max, record_seconds](const Genome& g,
                                         std::uint64_t model_seed,
                                         std::uint64_t train_seed) {
    const auto t0 = std::chrono::steady_clock::now();
    ModelInstance model = instantiate(space, g, kNodeFeatureDim,
                                      kEdgeFeatureDim, n_max, model_seed);
    TrainConfig tc = cfg.eval_train;
    tc.seed = train_seed;
    TrainResult r = train(std::move(model), train_data, val_data, tc);
    const double seconds =
        record_seconds
            ? std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                            t0)
                  .count()
            : 0.0;
    const double reward = r.history.val_nll.empty()
                              ? detail::validation_nll(r.model, val_data)
                              : r.history.val_nll.back();
    if (r.diverged || !std::isfinite(reward)) return EvalResult{0.0, seconds, true};
    return EvalResult{reward, seconds, false};
  };
  return run_search_with(space, cfg, fn, sink, resume);
}

// Top-k catalog records by validation NLL: non-finite losses dropped,
// duplicate genomes collapsed to their first occurrence, ties broken toward
// the smaller eval_id.
inline std::vector<CatalogRecord> select_top_k(
    std::span<const CatalogRecord> catalog, int k) {
  if (k < 1) throw std::invalid_argument("select_top_k: k must be >= 1");
  std::vector<CatalogRecord> pool(catalog.begin(), catalog.end());
  std::sort(pool.begin(), pool.end(),
            [](const CatalogRecord& a, const CatalogRecord& b) {
              return a.eval_id < b.eval_id;
            });
  std::set<std::pair<int, std::vector<int>>> seen;
  std::vector<CatalogRecord> unique;
  for (CatalogRecord& r : pool) {
    if (r.failed || !std::isfinite(r.val_nll)) continue;
    if (!seen.insert({r.genome.space_version, r.genome.genes}).second)
      continue;
    unique.push_back(std::move(r));
  }
  if (unique.size() < static_cast<std::size_t>(k))
    throw Error(errc::InsufficientRecords,
                "select_top_k: " + std::to_string(unique.size()) +
                    " usable records, need " + std::to_string(k));
  std::sort(unique.begin(), unique.end(),
            [](const CatalogRecord& a, const CatalogRecord& b) {
              if (a.val_nll != b.val_nll) return a.val_nll < b.val_nll;
              return a.eval_id < b.eval_id;
            });
  unique.resize(std::size_t(k));
  return unique;
}

// k distinct uniform genomes; the paper's random-ensemble baseline.
inline std::vector<Genome> random_baseline(const SearchSpace& space, int k,
                                           std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("random_baseline: k must be >= 1");
  SplitMix64 rng(seed);
  std::set<std::vector<int>> seen;
  std::vector<Genome> out;
  int attempts = 0;
  while (out.size() < static_cast<std::size_t>(k)) {
    if (++attempts > 1000 * k)
      throw std::invalid_argument(
          "random_baseline: space too small for k distinct genomes");
    Genome g = space.random_genome(rng);
    if (!seen.insert(g.genes).second) continue;
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace gnnuq
