// gnnuq: architecture search and uncertainty quantification for molecular
// property regression. Subcommands cover the full pipeline: split, search,
// posttrain, predict, evaluate, baseline, space.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <gnnuq/evolver.hpp>
#include <gnnuq/uq.hpp>

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace fs = std::filesystem;
using namespace gnnuq;

namespace {

// JSON config files mirror the flag names, with subcommand names as nested
// objects: {"search": {"evals": 50}}. Values given on the command line win.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool,
                        std::string) const override {
    return dump_app(app, default_also).dump(2) + "\n";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    nlohmann::json j = nlohmann::json::parse(input, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw CLI::FileError("config file is not a JSON object");
    std::vector<CLI::ConfigItem> out;
    walk(j, {}, out);
    return out;
  }

 private:
  static nlohmann::ordered_json dump_app(const CLI::App* app,
                                         bool default_also) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const CLI::Option* opt : app->get_options({})) {
      if (!opt->get_configurable() || opt->get_lnames().empty()) continue;
      const std::string& name = opt->get_lnames().front();
      if (opt->get_type_size() == 0) {
        if (opt->count() > 0) j[name] = true;
      } else if (opt->count() == 1) {
        j[name] = opt->results().front();
      } else if (opt->count() > 1) {
        j[name] = opt->results();
      } else if (default_also && !opt->get_default_str().empty()) {
        j[name] = opt->get_default_str();
      }
    }
    for (const CLI::App* sub : app->get_subcommands({})) {
      nlohmann::ordered_json block = dump_app(sub, default_also);
      if (!block.empty()) j[sub->get_name()] = std::move(block);
    }
    return j;
  }

  static void walk(const nlohmann::json& j, std::vector<std::string> parents,
                   std::vector<CLI::ConfigItem>& out) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it->is_object()) {
        std::vector<std::string> nested = parents;
        nested.push_back(it.key());
        walk(*it, std::move(nested), out);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = it.key();
      if (it->is_array())
        for (const auto& v : *it) item.inputs.push_back(scalar_to_string(v));
      else
        item.inputs.push_back(scalar_to_string(*it));
      out.push_back(std::move(item));
    }
  }

  static std::string scalar_to_string(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }
};

std::array<std::int64_t, 3> parse_ratios(const std::string& text) {
  std::array<std::int64_t, 3> r{};
  char extra = 0;
  if (std::sscanf(text.c_str(), "%" SCNd64 ":%" SCNd64 ":%" SCNd64 "%c", &r[0],
                  &r[1], &r[2], &extra) != 3)
    throw std::invalid_argument("--ratios must look like 5:2:3, got '" + text +
                                "'");
  for (std::int64_t v : r)
    if (v <= 0)
      throw std::invalid_argument("--ratios parts must be positive, got '" +
                                  text + "'");
  return r;
}

// Options shared by every command that touches a dataset + split pair.
struct DataArgs {
  std::string data;
  std::string smiles_col = "smiles";
  std::string target_col = "y";
  std::string splits;
};

void add_data_options(CLI::App* cmd, DataArgs& a, bool with_splits = true) {
  cmd->add_option("--data", a.data, "dataset CSV")->required();
  cmd->add_option("--smiles-col", a.smiles_col, "SMILES column name")
      ->capture_default_str();
  cmd->add_option("--target-col", a.target_col, "target column name")
      ->capture_default_str();
  if (with_splits)
    cmd->add_option("--splits", a.splits, "split JSON from `gnnuq split`")
        ->required();
}

struct LoadedData {
  Dataset dataset;
  SplitFile split;
  TargetScaler scaler;
  std::vector<TrainExample> train, val;  // targets standardized
};

void check_split_indices(const SplitIndices& idx, std::size_t n,
                         const std::string& path) {
  for (const auto* part : {&idx.train, &idx.val, &idx.test})
    for (std::size_t i : *part)
      if (i >= n)
        throw Error(errc::MalformedJson,
                    "split file '" + path + "' references row " +
                        std::to_string(i) + " but the dataset has " +
                        std::to_string(n) + " usable rows");
}

LoadedData load_inputs(const DataArgs& a) {
  LoadedData out;
  out.dataset = load_dataset(a.data, a.smiles_col, a.target_col);
  if (out.dataset.rejected > 0)
    std::fprintf(stderr, "gnnuq: note: %zu dataset rows rejected\n",
                 out.dataset.rejected);
  out.split = read_split_json(a.splits);
  check_split_indices(out.split.indices, out.dataset.records.size(), a.splits);
  std::vector<double> train_y;
  train_y.reserve(out.split.indices.train.size());
  for (std::size_t i : out.split.indices.train)
    train_y.push_back(out.dataset.records[i].y);
  out.scaler = fit_scaler(train_y);
  out.train = make_examples(out.dataset, out.split.indices.train, out.scaler);
  out.val = make_examples(out.dataset, out.split.indices.val, out.scaler);
  return out;
}

const std::vector<std::size_t>& pick_split(const SplitIndices& idx,
                                           const std::string& name) {
  if (name == "train") return idx.train;
  if (name == "val") return idx.val;
  return idx.test;
}

// Env cap applies unless --workers was typed on the command line itself
// (config-file values still respect the cap; an explicit flag overrides it).
int apply_thread_cap(int workers, int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string_view arg = argv[i];
    if (arg == "--workers" || arg.rfind("--workers=", 0) == 0) return workers;
  }
  const char* env = std::getenv("GNNUQ_THREADS");
  if (env == nullptr || *env == '\0') return workers;
  const int cap = std::atoi(env);
  if (cap >= 1 && cap < workers) return cap;
  return workers;
}

std::vector<fs::path> list_checkpoints(const std::string& dir) {
  if (!fs::is_directory(dir))
    throw Error(errc::IoError, "model directory '" + dir + "' does not exist");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ckpt")
      out.push_back(entry.path());
  if (out.empty())
    throw Error(errc::IoError, "no .ckpt files in '" + dir + "'");
  std::sort(out.begin(), out.end());
  return out;
}

PredictionSet predict_members(std::span<const ModelInstance> models,
                              std::span<const TrainExample> examples) {
  PredictionSet out;
  for (const ModelInstance& m : models) {
    std::vector<double> mu(examples.size()), var(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
      auto [p_mu, p_var] = predict_one(m, examples[i].graph);
      mu[i] = p_mu;
      var[i] = p_var;
    }
    out.mu.push_back(std::move(mu));
    out.var.push_back(std::move(var));
  }
  return out;
}

// Writes predictions in original target units for the chosen split rows.
void write_split_predictions(const std::string& out_path,
                             const LoadedData& data,
                             const std::vector<std::size_t>& rows,
                             const PredictionSet& scaled_preds) {
  const PredictionSet preds =
      rescale_predictions(scaled_preds, data.scaler);
  std::vector<double> y;
  y.reserve(rows.size());
  for (std::size_t i : rows) y.push_back(data.dataset.records[i].y);
  write_predictions_csv(out_path, rows, y, preds);
}

ModelInstance train_member(const SearchSpace& space, const Genome& genome,
                           const LoadedData& data, int epochs, int batch,
                           double lr, bool keep_best, std::uint64_t model_seed,
                           std::uint64_t train_seed, double* out_val_nll) {
  ModelInstance model =
      instantiate(space, genome, kNodeFeatureDim, kEdgeFeatureDim,
                  data.dataset.meta.n_max, model_seed);
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = batch;
  tc.learning_rate = lr;
  tc.keep_best_on_val = keep_best;
  tc.seed = train_seed;
  TrainResult result = train(model, data.train, data.val, tc);
  if (result.diverged)
    std::fprintf(stderr, "gnnuq: warning: training diverged; "
                         "keeping the last finite checkpoint\n");
  if (out_val_nll != nullptr)
    *out_val_nll = result.history.val_nll.empty()
                       ? std::numeric_limits<double>::quiet_NaN()
                       : result.history.val_nll.back();
  return result.model;
}

void cmd_split(const DataArgs& data_args, const std::string& ratios,
               std::uint64_t seed, const std::string& out_path) {
  const Dataset ds =
      load_dataset(data_args.data, data_args.smiles_col, data_args.target_col);
  SplitSpec spec;
  spec.ratios = parse_ratios(ratios);
  spec.seed = seed;
  const SplitIndices idx = split_dataset(ds, spec);
  write_split_json(out_path, spec, idx);
  std::printf("[split] %zu rows -> train %zu / val %zu / test %zu -> %s\n",
              ds.records.size(), idx.train.size(), idx.val.size(),
              idx.test.size(), out_path.c_str());
}

void cmd_search(const DataArgs& data_args, const std::string& catalog_path,
                SearchConfig cfg, bool repro) {
  const SearchSpace space = SearchSpace::standard();

  std::vector<CatalogRecord> resume;
  if (fs::exists(catalog_path)) {
    resume = read_catalog(catalog_path, space);
    for (const CatalogRecord& rec : resume)
      if (rec.genome.space_version != space.version())
        throw Error(errc::VersionMismatch,
                    "catalog '" + catalog_path + "' was built for space v" +
                        std::to_string(rec.genome.space_version) +
                        ", current space is v" +
                        std::to_string(space.version()));
    std::printf("[search] resuming from %zu catalog entries\n", resume.size());
  }
  if (resume.size() >= std::size_t(cfg.total_evals)) {
    std::printf("[search] catalog already holds %zu evals (requested %d); "
                "nothing to do\n",
                resume.size(), cfg.total_evals);
    return;
  }

  const LoadedData data = load_inputs(data_args);

  std::ofstream catalog(catalog_path, std::ios::app);
  if (!catalog)
    throw Error(errc::IoError, "cannot open catalog '" + catalog_path + "'");

  double reward_sum = 0.0;
  std::int64_t reward_n = 0;
  double best = -std::numeric_limits<double>::infinity();
  for (const CatalogRecord& rec : resume)
    if (!rec.failed && std::isfinite(rec.val_nll)) {
      reward_sum += -rec.val_nll;
      best = std::max(best, -rec.val_nll);
      ++reward_n;
    }

  const CatalogSink sink = [&](const CatalogRecord& rec) {
    catalog << encode_record(rec).dump() << '\n';
    if (!catalog.flush())
      throw Error(errc::IoError, "short write to catalog '" + catalog_path +
                                     "'");
    if (!rec.failed && std::isfinite(rec.val_nll)) {
      reward_sum += -rec.val_nll;
      best = std::max(best, -rec.val_nll);
      ++reward_n;
    }
    if ((rec.eval_id + 1) % 10 == 0) {
      if (reward_n > 0)
        std::printf("[search] eval %" PRId64 "/%d  mean reward %.4f  "
                    "best %.4f\n",
                    rec.eval_id + 1, cfg.total_evals,
                    reward_sum / double(reward_n), best);
      else
        std::printf("[search] eval %" PRId64 "/%d  no successful evals yet\n",
                    rec.eval_id + 1, cfg.total_evals);
      std::fflush(stdout);
    }
  };

  run_search(space, data.train, data.val, data.dataset.meta.n_max, cfg, sink,
             resume, /*record_seconds=*/!repro);
  std::printf("[search] done: %d evals in %s\n", cfg.total_evals,
              catalog_path.c_str());
}

void cmd_posttrain(const DataArgs& data_args, const std::string& catalog_path,
                   int top_k, int epochs, int batch, double lr, bool keep_best,
                   std::uint64_t seed, const std::string& out_dir) {
  const SearchSpace space = SearchSpace::standard();
  const std::vector<CatalogRecord> records =
      read_catalog(catalog_path, space);
  const std::vector<CatalogRecord> winners = select_top_k(records, top_k);
  const LoadedData data = load_inputs(data_args);
  fs::create_directories(out_dir);

  for (std::size_t i = 0; i < winners.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "member_%02zu", i);
    const std::string ckpt = (fs::path(out_dir) / (std::string(stem) +
                                                   ".ckpt")).string();
    const std::string hist = (fs::path(out_dir) / (std::string(stem) +
                                                   "_history.csv")).string();
    ModelInstance model = instantiate(
        space, winners[i].genome, kNodeFeatureDim, kEdgeFeatureDim,
        data.dataset.meta.n_max, derive_seed(seed, 2 * i));
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = batch;
    tc.learning_rate = lr;
    tc.keep_best_on_val = keep_best;
    tc.seed = derive_seed(seed, 2 * i + 1);
    const TrainResult result = train(model, data.train, data.val, tc);
    save_checkpoint(ckpt, result.model);
    write_history_csv(hist, result.history);
    const double final_nll = result.history.val_nll.empty()
                                 ? std::numeric_limits<double>::quiet_NaN()
                                 : result.history.val_nll.back();
    std::printf("[posttrain] member %zu/%zu  search eval %" PRId64
                "  val_nll %.4f%s -> %s\n",
                i + 1, winners.size(), winners[i].eval_id, final_nll,
                result.diverged ? " (diverged)" : "", ckpt.c_str());
    std::fflush(stdout);
  }
}

void cmd_predict(const DataArgs& data_args, const std::string& models_dir,
                 const std::string& split_name, const std::string& out_path) {
  const SearchSpace space = SearchSpace::standard();
  const LoadedData data = load_inputs(data_args);
  std::vector<ModelInstance> models;
  for (const fs::path& p : list_checkpoints(models_dir))
    models.push_back(load_checkpoint(p.string(), space));

  const std::vector<std::size_t>& rows =
      pick_split(data.split.indices, split_name);
  const std::vector<TrainExample> examples =
      make_examples(data.dataset, rows, data.scaler);
  const PredictionSet preds = predict_members(models, examples);
  write_split_predictions(out_path, data, rows, preds);
  std::printf("[predict] %zu models x %zu %s rows -> %s\n", models.size(),
              rows.size(), split_name.c_str(), out_path.c_str());
}

void cmd_evaluate(const std::string& preds_path,
                  const std::string& val_preds_path, bool with_recal,
                  const std::string& report_path,
                  std::string calibration_path, std::string confidence_path) {
  const PredictionsFile test_file = read_predictions_csv(preds_path);
  const PredictionsFile val_file = read_predictions_csv(val_preds_path);
  const EnsembleSummary test_summary = ensemble_summary(test_file.preds);
  const EnsembleSummary val_summary = ensemble_summary(val_file.preds);

  const SplitReport report = evaluate_split(val_summary, test_summary,
                                            val_file.y, test_file.y,
                                            with_recal);

  if (calibration_path.empty())
    calibration_path =
        (fs::path(report_path).parent_path() / "calibration.csv").string();
  if (confidence_path.empty())
    confidence_path =
        (fs::path(report_path).parent_path() / "confidence.csv").string();
  write_calibration_csv(
      calibration_path,
      calibration_curve(test_summary.mu, test_summary.total, test_file.y));
  write_confidence_csv(
      confidence_path,
      confidence_curve(test_summary.mu, test_summary.total, test_file.y));

  std::ofstream out(report_path);
  if (!out)
    throw Error(errc::IoError, "cannot write report '" + report_path + "'");
  out << report_json(report).dump(2) << '\n';
  if (!out.flush())
    throw Error(errc::IoError, "short write to report '" + report_path + "'");

  std::printf("[evaluate] mae %.4f  rmse %.4f  nll %.4f  mca %.4f", report.mae,
              report.rmse, report.nll, report.mca);
  if (report.recal_mca.has_value())
    std::printf("  recal_mca %.4f", *report.recal_mca);
  std::printf(" -> %s\n", report_path.c_str());
}

void cmd_baseline_mcdropout(const DataArgs& data_args,
                            const std::string& catalog_path,
                            const std::string& split_name, double rate,
                            int passes, int epochs, int batch, double lr,
                            bool keep_best, std::uint64_t seed,
                            const std::string& out_path) {
  const SearchSpace space = SearchSpace::standard();
  const std::vector<CatalogRecord> records =
      read_catalog(catalog_path, space);
  const Genome best = select_top_k(records, 1).front().genome;
  const LoadedData data = load_inputs(data_args);

  double val_nll = 0.0;
  const ModelInstance model =
      train_member(space, best, data, epochs, batch, lr, keep_best,
                   derive_seed(seed, 0), derive_seed(seed, 1), &val_nll);
  const std::vector<std::size_t>& rows =
      pick_split(data.split.indices, split_name);
  const std::vector<TrainExample> examples =
      make_examples(data.dataset, rows, data.scaler);
  const PredictionSet preds =
      mc_dropout_predict(model, examples, rate, passes, derive_seed(seed, 2));
  write_split_predictions(out_path, data, rows, preds);
  std::printf("[baseline] mcdropout rate %.2f passes %d on %zu %s rows "
              "(val_nll %.4f) -> %s\n",
              rate, passes, rows.size(), split_name.c_str(), val_nll,
              out_path.c_str());
}

void cmd_baseline_random(const DataArgs& data_args,
                         const std::string& split_name, int k, int epochs,
                         int batch, double lr, bool keep_best,
                         std::uint64_t seed, const std::string& out_path) {
  const SearchSpace space = SearchSpace::standard();
  const std::vector<Genome> genomes = random_baseline(space, k, seed);
  const LoadedData data = load_inputs(data_args);

  std::vector<ModelInstance> models;
  for (std::size_t i = 0; i < genomes.size(); ++i) {
    double val_nll = 0.0;
    models.push_back(train_member(space, genomes[i], data, epochs, batch, lr,
                                  keep_best, derive_seed(seed, 2 * i + 10),
                                  derive_seed(seed, 2 * i + 11), &val_nll));
    std::printf("[baseline] random member %zu/%d  val_nll %.4f\n", i + 1, k,
                val_nll);
    std::fflush(stdout);
  }
  const std::vector<std::size_t>& rows =
      pick_split(data.split.indices, split_name);
  const std::vector<TrainExample> examples =
      make_examples(data.dataset, rows, data.scaler);
  const PredictionSet preds = predict_members(models, examples);
  write_split_predictions(out_path, data, rows, preds);
  std::printf("[baseline] random ensemble of %d on %zu %s rows -> %s\n", k,
              rows.size(), split_name.c_str(), out_path.c_str());
}

void cmd_space(bool cardinality) {
  const SearchSpace space = SearchSpace::standard();
  if (cardinality) {
    std::printf("%" PRIu64 "\n", space.cardinality());
    return;
  }
  std::printf("search space v%d: %zu genes, cardinality %" PRIu64 "\n",
              space.version(), space.genes().size(), space.cardinality());
  for (const GeneDesc& g : space.genes()) {
    std::printf("  %-18s", g.name.c_str());
    for (const std::string& opt : g.options) std::printf(" %s", opt.c_str());
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"architecture search with uncertainty quantification for "
               "molecular property regression"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "JSON config file mirroring the flags; explicit flags win");
  app.config_formatter(std::make_shared<JsonConfig>());

  // --- split ---------------------------------------------------------------
  DataArgs split_data;
  std::string split_ratios = "5:2:3";
  std::uint64_t split_seed = 0;
  std::string split_out;
  CLI::App* split_cmd =
      app.add_subcommand("split", "write a seeded train/val/test split JSON");
  split_cmd->configurable();
  add_data_options(split_cmd, split_data, /*with_splits=*/false);
  split_cmd->add_option("--ratios", split_ratios, "train:val:test ratio")
      ->capture_default_str();
  split_cmd->add_option("--seed", split_seed, "shuffle seed")
      ->capture_default_str();
  split_cmd->add_option("--out", split_out, "output split JSON")->required();
  split_cmd->callback(
      [&] { cmd_split(split_data, split_ratios, split_seed, split_out); });

  // --- search --------------------------------------------------------------
  DataArgs search_data;
  std::string search_catalog;
  SearchConfig search_cfg;
  search_cfg.total_evals = 1000;
  bool search_repro = false;
  CLI::App* search_cmd = app.add_subcommand(
      "search", "run aging-evolution architecture search (resumable)");
  search_cmd->configurable();
  add_data_options(search_cmd, search_data);
  search_cmd->add_option("--catalog", search_catalog, "JSONL catalog path")
      ->required();
  search_cmd->add_option("--evals", search_cfg.total_evals,
                         "total evaluations")
      ->capture_default_str();
  search_cmd
      ->add_option("--population", search_cfg.population_size,
                   "population size P")
      ->capture_default_str();
  search_cmd
      ->add_option("--sample", search_cfg.sample_size, "tournament size S")
      ->capture_default_str();
  search_cmd
      ->add_option("--workers", search_cfg.workers,
                   "parallel eval workers (GNNUQ_THREADS caps it)")
      ->capture_default_str();
  search_cmd->add_option("--seed", search_cfg.seed, "search seed")
      ->capture_default_str();
  search_cmd
      ->add_option("--epochs", search_cfg.eval_train.epochs,
                   "epochs per evaluation")
      ->capture_default_str();
  search_cmd
      ->add_option("--batch", search_cfg.eval_train.batch_size, "batch size")
      ->capture_default_str();
  search_cmd
      ->add_option("--lr", search_cfg.eval_train.learning_rate,
                   "learning rate")
      ->capture_default_str();
  search_cmd->add_flag("--repro", search_repro,
                       "record train_seconds as 0 for byte-identical reruns");
  search_cmd->callback([&] {
    search_cfg.workers = apply_thread_cap(search_cfg.workers, argc, argv);
    cmd_search(search_data, search_catalog, search_cfg, search_repro);
  });

  // --- posttrain -----------------------------------------------------------
  DataArgs post_data;
  std::string post_catalog, post_out_dir;
  int post_top_k = 10, post_epochs = 300, post_batch = 128;
  double post_lr = 1e-3;
  bool post_keep_best = true;
  std::uint64_t post_seed = 0;
  CLI::App* post_cmd = app.add_subcommand(
      "posttrain", "train the top-K catalog genomes from scratch");
  post_cmd->configurable();
  add_data_options(post_cmd, post_data);
  post_cmd->add_option("--catalog", post_catalog, "JSONL catalog path")
      ->required();
  post_cmd->add_option("--top-k", post_top_k, "ensemble size K")
      ->capture_default_str();
  post_cmd->add_option("--epochs", post_epochs, "training epochs")
      ->capture_default_str();
  post_cmd->add_option("--batch", post_batch, "batch size")
      ->capture_default_str();
  post_cmd->add_option("--lr", post_lr, "learning rate")
      ->capture_default_str();
  post_cmd->add_flag("--keep-best,!--no-keep-best", post_keep_best,
                     "restore the best-validation epoch (default on)");
  post_cmd->add_option("--seed", post_seed, "training seed")
      ->capture_default_str();
  post_cmd->add_option("--out-dir", post_out_dir, "checkpoint directory")
      ->required();
  post_cmd->callback([&] {
    cmd_posttrain(post_data, post_catalog, post_top_k, post_epochs, post_batch,
                  post_lr, post_keep_best, post_seed, post_out_dir);
  });

  // --- predict ---------------------------------------------------------
  DataArgs pred_data;
  std::string pred_models, pred_split = "test", pred_out;
  CLI::App* pred_cmd = app.add_subcommand(
      "predict", "write per-member predictions for one split");
  pred_cmd->configurable();
  add_data_options(pred_cmd, pred_data);
  pred_cmd->add_option("--models", pred_models, "checkpoint directory")
      ->required();
  pred_cmd->add_option("--split", pred_split, "which split to predict")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  pred_cmd->add_option("--out", pred_out, "output predictions CSV")
      ->required();
  pred_cmd->callback(
      [&] { cmd_predict(pred_data, pred_models, pred_split, pred_out); });

  // --- evaluate --------------------------------------------------------
  std::string eval_preds, eval_val_preds, eval_report;
  std::string eval_cal_csv, eval_conf_csv;
  bool eval_recal = false;
  CLI::App* eval_cmd = app.add_subcommand(
      "evaluate", "compute the UQ metric report from prediction CSVs");
  eval_cmd->configurable();
  eval_cmd->add_option("--preds", eval_preds, "test predictions CSV")
      ->required();
  eval_cmd
      ->add_option("--val-preds", eval_val_preds,
                   "validation predictions CSV (fits cNLL and recalibration)")
      ->required();
  eval_cmd->add_flag("--recalibrate", eval_recal,
                     "also fit the MCA-minimizing scale and report recal_*");
  eval_cmd->add_option("--report", eval_report, "output report JSON")
      ->required();
  eval_cmd->add_option("--calibration-csv", eval_cal_csv,
                       "calibration curve CSV (default: next to the report)");
  eval_cmd->add_option("--confidence-csv", eval_conf_csv,
                       "confidence curve CSV (default: next to the report)");
  eval_cmd->callback([&] {
    cmd_evaluate(eval_preds, eval_val_preds, eval_recal, eval_report,
                 eval_cal_csv, eval_conf_csv);
  });

  // --- baseline --------------------------------------------------------
  DataArgs base_data;
  std::string base_kind, base_catalog, base_split = "test", base_out;
  int base_k = 10, base_passes = 10, base_epochs = 300, base_batch = 128;
  double base_rate = 0.1, base_lr = 1e-3;
  bool base_keep_best = true;
  std::uint64_t base_seed = 0;
  CLI::App* base_cmd = app.add_subcommand(
      "baseline", "MC-dropout or random-ensemble comparison predictions");
  base_cmd->configurable();
  base_cmd->add_option("--kind", base_kind, "baseline kind")
      ->check(CLI::IsMember({"mcdropout", "random"}))
      ->required();
  add_data_options(base_cmd, base_data);
  base_cmd->add_option("--catalog", base_catalog,
                       "JSONL catalog (mcdropout picks its best genome)");
  base_cmd->add_option("--split", base_split, "which split to predict")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  base_cmd->add_option("--k", base_k, "random-ensemble size")
      ->capture_default_str();
  base_cmd->add_option("--rate", base_rate, "dropout rate")
      ->capture_default_str();
  base_cmd->add_option("--passes", base_passes, "dropout forward passes N")
      ->capture_default_str();
  base_cmd->add_option("--epochs", base_epochs, "training epochs")
      ->capture_default_str();
  base_cmd->add_option("--batch", base_batch, "batch size")
      ->capture_default_str();
  base_cmd->add_option("--lr", base_lr, "learning rate")
      ->capture_default_str();
  base_cmd->add_flag("--keep-best,!--no-keep-best", base_keep_best,
                     "restore the best-validation epoch (default on)");
  base_cmd->add_option("--seed", base_seed, "seed")->capture_default_str();
  base_cmd->add_option("--out", base_out, "output predictions CSV")
      ->required();
  base_cmd->callback([&] {
    if (base_kind == "mcdropout") {
      if (base_catalog.empty())
        throw CLI::ValidationError(
            "--catalog is required for --kind mcdropout");
      cmd_baseline_mcdropout(base_data, base_catalog, base_split, base_rate,
                             base_passes, base_epochs, base_batch, base_lr,
                             base_keep_best, base_seed, base_out);
    } else {
      cmd_baseline_random(base_data, base_split, base_k, base_epochs,
                          base_batch, base_lr, base_keep_best, base_seed,
                          base_out);
    }
  });

  // --- space -----------------------------------------------------------
  bool space_cardinality = false;
  CLI::App* space_cmd =
      app.add_subcommand("space", "describe the architecture search space");
  space_cmd->configurable();
  space_cmd->add_flag("--cardinality", space_cardinality,
                      "print only the exact architecture count");
  space_cmd->callback([&] { cmd_space(space_cardinality); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::fprintf(stderr, "gnnuq: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "gnnuq: %s\n", e.what());
    return 1;
  }
  return 0;
}
