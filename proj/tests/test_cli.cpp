// Exercises the gnnuq binary end to end through a shared miniature pipeline:
// split -> search -> posttrain -> predict -> evaluate, plus baselines, the
// JSON config file, and failure exit codes. The binary path comes from the
// build (GNNUQ_BIN_PATH) and can be overridden with the GNNUQ_BIN env var.

#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

std::string cli_binary() {
  if (const char* env = std::getenv("GNNUQ_BIN")) return env;
  return GNNUQ_BIN_PATH;
}

CmdResult run_cli(const std::string& args) {
  const std::string cmd = cli_binary() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) throw std::runtime_error("popen failed: " + cmd);
  CmdResult result;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe) != nullptr) result.output += buf;
  const int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

void must_run(const std::string& args) {
  const CmdResult r = run_cli(args);
  if (r.exit_code != 0)
    throw std::runtime_error("fixture command failed: gnnuq " + args + "\n" +
                             r.output);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const fs::path& path) {
  const std::string text = slurp(path);
  std::size_t n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

// One pipeline, built on first use and shared by every test case below.
struct Fixture {
  fs::path dir;
  fs::path data, split, catalog, models, test_preds, val_preds;

  Fixture() {
    dir = fs::temp_directory_path() /
          ("gnnuq_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    data = dir / "tiny.csv";
    std::ofstream csv(data);
    csv << "smiles,y\n"
           "C,0.5\nCC,1.1\nCCO,2.3\nCCC,1.9\nc1ccccc1,4.2\n"
           "CC(=O)O,3.1\nCCN,2.2\nCO,1.4\nC=O,0.9\nCC=C,1.7\n"
           "C#N,0.8\nCCCl,2.6\nCBr,1.2\nCOC,2.0\nCC(C)C,2.4\n"
           "c1ccncc1,3.8\nCS,1.3\nO,0.2\nC#C,0.6\nCF,1.0\n";
    csv.close();

    split = dir / "split.json";
    catalog = dir / "catalog.jsonl";
    models = dir / "models";
    test_preds = dir / "test_preds.csv";
    val_preds = dir / "val_preds.csv";

    const std::string d = data.string(), s = split.string();
    must_run("split --data " + d + " --out " + s + " --seed 7");
    must_run("search --data " + d + " --splits " + s + " --catalog " +
             catalog.string() +
             " --evals 6 --population 3 --sample 2 --epochs 2 --seed 3 "
             "--repro");
    must_run("posttrain --data " + d + " --splits " + s + " --catalog " +
             catalog.string() + " --top-k 2 --epochs 3 --seed 11 --out-dir " +
             models.string());
    must_run("predict --data " + d + " --splits " + s + " --models " +
             models.string() + " --split test --out " + test_preds.string());
    must_run("predict --data " + d + " --splits " + s + " --models " +
             models.string() + " --split val --out " + val_preds.string());
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("space --cardinality prints the exact architecture count") {
  const auto t0 = std::chrono::steady_clock::now();
  const CmdResult r = run_cli("space --cardinality");
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.output == "12259638116352\n");
  REQUIRE(seconds < 1.0);
}

TEST_CASE("space without flags describes every gene") {
  const CmdResult r = run_cli("space");
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.output.find("22 genes") != std::string::npos);
  REQUIRE(r.output.find("stage3.update") != std::string::npos);
  REQUIRE(r.output.find("gather") != std::string::npos);
}

TEST_CASE("split writes the requested ratio sizes and is idempotent") {
  const Fixture& f = fixture();
  const nlohmann::json j = nlohmann::json::parse(slurp(f.split));
  REQUIRE(j["train"].size() == 10);
  REQUIRE(j["val"].size() == 4);
  REQUIRE(j["test"].size() == 6);

  const fs::path again = f.dir / "split_again.json";
  const CmdResult r = run_cli("split --data " + f.data.string() + " --out " +
                              again.string() + " --seed 7");
  REQUIRE(r.exit_code == 0);
  REQUIRE(slurp(again) == slurp(f.split));

  const fs::path wide = f.dir / "split811.json";
  REQUIRE(run_cli("split --data " + f.data.string() + " --ratios 8:1:1 " +
                  "--out " + wide.string() + " --seed 1")
              .exit_code == 0);
  const nlohmann::json w = nlohmann::json::parse(slurp(wide));
  REQUIRE(w["train"].size() == 16);
  REQUIRE(w["val"].size() == 2);
  REQUIRE(w["test"].size() == 2);

  REQUIRE(run_cli("split --data " + f.data.string() +
                  " --ratios nonsense --out x.json")
              .exit_code != 0);
}

TEST_CASE("search writes one catalog line per eval and resumes") {
  const Fixture& f = fixture();
  REQUIRE(count_lines(f.catalog) == 6);

  // extend the existing catalog in place, then compare against a one-shot run
  const fs::path extended = f.dir / "extended.jsonl";
  fs::copy_file(f.catalog, extended);
  const std::string shared = " --data " + f.data.string() + " --splits " +
                             f.split.string() +
                             " --evals 9 --population 3 --sample 2 "
                             "--epochs 2 --seed 3 --repro";
  const CmdResult resumed =
      run_cli("search --catalog " + extended.string() + shared);
  REQUIRE(resumed.exit_code == 0);
  REQUIRE(resumed.output.find("resuming from 6") != std::string::npos);
  REQUIRE(count_lines(extended) == 9);

  const fs::path oneshot = f.dir / "oneshot.jsonl";
  REQUIRE(run_cli("search --catalog " + oneshot.string() + shared).exit_code ==
          0);
  REQUIRE(slurp(extended) == slurp(oneshot));

  // a second identical invocation is a no-op with exit code 0
  const CmdResult noop =
      run_cli("search --catalog " + oneshot.string() + shared);
  REQUIRE(noop.exit_code == 0);
  REQUIRE(noop.output.find("nothing to do") != std::string::npos);
  REQUIRE(count_lines(oneshot) == 9);
}

TEST_CASE("search prints the running-mean reward every ten evals") {
  const Fixture& f = fixture();
  const fs::path cat10 = f.dir / "cat10.jsonl";
  const CmdResult r = run_cli(
      "search --catalog " + cat10.string() + " --data " + f.data.string() +
      " --splits " + f.split.string() +
      " --evals 10 --population 3 --sample 2 --epochs 2 --seed 3 --repro");
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.output.find("eval 10/10") != std::string::npos);
  REQUIRE(r.output.find("mean reward") != std::string::npos);
}

TEST_CASE("posttrain writes one checkpoint and history per member") {
  const Fixture& f = fixture();
  REQUIRE(fs::exists(f.models / "member_00.ckpt"));
  REQUIRE(fs::exists(f.models / "member_01.ckpt"));
  REQUIRE(fs::exists(f.models / "member_00_history.csv"));
  REQUIRE(fs::exists(f.models / "member_01_history.csv"));
  REQUIRE_FALSE(fs::exists(f.models / "member_02.ckpt"));
  const std::string hist = slurp(f.models / "member_00_history.csv");
  REQUIRE(hist.rfind("epoch,train_loss,val_nll\n", 0) == 0);
}

TEST_CASE("predict writes one mu/var column pair per checkpoint") {
  const Fixture& f = fixture();
  const std::string text = slurp(f.test_preds);
  REQUIRE(text.rfind("id,y,mu_0,var_0,mu_1,var_1\n", 0) == 0);
  REQUIRE(count_lines(f.test_preds) == 1 + 6);  // header + test rows
  REQUIRE(count_lines(f.val_preds) == 1 + 4);
}

TEST_CASE("evaluate writes the report and curve CSVs") {
  const Fixture& f = fixture();
  const fs::path report = f.dir / "report.json";
  const CmdResult r = run_cli("evaluate --preds " + f.test_preds.string() +
                              " --val-preds " + f.val_preds.string() +
                              " --report " + report.string());
  REQUIRE(r.exit_code == 0);
  const nlohmann::json j = nlohmann::json::parse(slurp(report));
  for (const char* key : {"mae", "rmse", "nll", "cnll", "a", "b", "spearman",
                          "mca", "ece", "mce", "auco", "cov1", "cov2"}) {
    CAPTURE(key);
    REQUIRE(j.contains(key));
  }
  REQUIRE_FALSE(j.contains("recal_a"));
  REQUIRE_FALSE(j.contains("recal_mca"));

  REQUIRE(slurp(f.dir / "calibration.csv")
              .rfind("level,empirical_fraction\n", 0) == 0);
  REQUIRE(slurp(f.dir / "confidence.csv")
              .rfind("percentile,mae,oracle_mae\n", 0) == 0);

  const fs::path report2 = f.dir / "report_recal.json";
  REQUIRE(run_cli("evaluate --preds " + f.test_preds.string() +
                  " --val-preds " + f.val_preds.string() + " --recalibrate" +
                  " --report " + report2.string())
              .exit_code == 0);
  const nlohmann::json j2 = nlohmann::json::parse(slurp(report2));
  REQUIRE(j2.contains("recal_a"));
  REQUIRE(j2.contains("recal_mca"));
  REQUIRE(j2["recal_a"].get<double>() > 0.0);
}

TEST_CASE("mcdropout with zero rate collapses to identical members") {
  const Fixture& f = fixture();
  const fs::path out = f.dir / "mcd0.csv";
  const CmdResult r = run_cli(
      "baseline --kind mcdropout --data " + f.data.string() + " --splits " +
      f.split.string() + " --catalog " + f.catalog.string() +
      " --rate 0 --passes 3 --epochs 2 --seed 5 --out " + out.string());
  REQUIRE(r.exit_code == 0);

  std::ifstream in(out);
  std::string line;
  REQUIRE(std::getline(in, line));
  REQUIRE(line == "id,y,mu_0,var_0,mu_1,var_1,mu_2,var_2");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    REQUIRE(cells.size() == 8);
    REQUIRE(cells[2] == cells[4]);  // mu_0 == mu_1 == mu_2, textually
    REQUIRE(cells[2] == cells[6]);
    REQUIRE(cells[3] == cells[5]);  // var columns too
    REQUIRE(cells[3] == cells[7]);
    ++rows;
  }
  REQUIRE(rows == 6);
}

TEST_CASE("random baseline trains the requested ensemble size") {
  const Fixture& f = fixture();
  const fs::path out = f.dir / "random2.csv";
  const CmdResult r = run_cli("baseline --kind random --data " +
                              f.data.string() + " --splits " +
                              f.split.string() +
                              " --k 2 --epochs 2 --seed 5 --out " +
                              out.string());
  REQUIRE(r.exit_code == 0);
  REQUIRE(slurp(out).rfind("id,y,mu_0,var_0,mu_1,var_1\n", 0) == 0);
}

TEST_CASE("JSON config file mirrors flags and flags take precedence") {
  const Fixture& f = fixture();
  const fs::path conf = f.dir / "conf.json";
  {
    std::ofstream out(conf);
    out << R"({"split": {"data": ")" << f.data.string()
        << R"(", "ratios": "8:1:1", "seed": 2, "out": ")"
        << (f.dir / "conf_split.json").string() << R"("}})" << "\n";
  }
  REQUIRE(run_cli("--config " + conf.string() + " split").exit_code == 0);
  const nlohmann::json from_conf =
      nlohmann::json::parse(slurp(f.dir / "conf_split.json"));
  REQUIRE(from_conf["ratios"] == nlohmann::json({8, 1, 1}));
  REQUIRE(from_conf["seed"] == 2);

  // the explicit flag overrides the config value
  const fs::path out2 = f.dir / "conf_split2.json";
  REQUIRE(run_cli("--config " + conf.string() + " split --seed 9 --out " +
                  out2.string())
              .exit_code == 0);
  REQUIRE(nlohmann::json::parse(slurp(out2))["seed"] == 9);
}

TEST_CASE("failures exit nonzero with a diagnostic") {
  const Fixture& f = fixture();
  SECTION("missing dataset") {
    const CmdResult r = run_cli("split --data nope.csv --out x.json");
    REQUIRE(r.exit_code != 0);
    REQUIRE(r.output.find("nope.csv") != std::string::npos);
  }
  SECTION("resume catalog from a different space version") {
    const fs::path bad = f.dir / "bad_version.jsonl";
    {
      std::ofstream out(bad);
      out << R"({"eval_id":0,"genome":{"space_version":99,"genes":)"
          << R"([0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0]},)"
          << R"("val_nll":1.0,"failed":false,"train_seconds":0.0,)"
          << R"("worker_id":0})" << "\n";
    }
    const CmdResult r = run_cli(
        "search --catalog " + bad.string() + " --data " + f.data.string() +
        " --splits " + f.split.string() +
        " --evals 4 --population 2 --sample 2 --epochs 1 --seed 0");
    REQUIRE(r.exit_code != 0);
  }
  SECTION("mcdropout on an empty catalog") {
    const fs::path empty = f.dir / "empty.jsonl";
    std::ofstream(empty).close();
    const CmdResult r = run_cli("baseline --kind mcdropout --data " +
                                f.data.string() + " --splits " +
                                f.split.string() + " --catalog " +
                                empty.string() + " --out m.csv");
    REQUIRE(r.exit_code != 0);
    REQUIRE(r.output.find("InsufficientRecords") != std::string::npos);
  }
  SECTION("evaluate on a malformed predictions file") {
    const fs::path bad = f.dir / "bad_preds.csv";
    {
      std::ofstream out(bad);
      out << "id,y,mu_0,var_0\n0,1.0,oops,1.0\n";
    }
    const CmdResult r =
        run_cli("evaluate --preds " + bad.string() + " --val-preds " +
                f.val_preds.string() + " --report r.json");
    REQUIRE(r.exit_code != 0);
  }
  SECTION("unknown subcommand") {
    REQUIRE(run_cli("frobnicate").exit_code != 0);
  }
}

TEST_CASE("single-worker reruns are byte identical end to end") {
  const Fixture& f = fixture();
  auto rerun = [&](const fs::path& dir) {
    fs::create_directories(dir);
    const std::string d = f.data.string();
    const std::string s = (dir / "split.json").string();
    const std::string cat = (dir / "cat.jsonl").string();
    const std::string m = (dir / "models").string();
    must_run("split --data " + d + " --out " + s + " --seed 4");
    must_run("search --data " + d + " --splits " + s + " --catalog " + cat +
             " --evals 4 --population 2 --sample 2 --epochs 2 --seed 9 "
             "--workers 1 --repro");
    must_run("posttrain --data " + d + " --splits " + s + " --catalog " + cat +
             " --top-k 1 --epochs 2 --seed 13 --out-dir " + m);
    must_run("predict --data " + d + " --splits " + s + " --models " + m +
             " --split test --out " + (dir / "tp.csv").string());
    must_run("predict --data " + d + " --splits " + s + " --models " + m +
             " --split val --out " + (dir / "vp.csv").string());
    must_run("evaluate --preds " + (dir / "tp.csv").string() +
             " --val-preds " + (dir / "vp.csv").string() +
             " --recalibrate --report " + (dir / "report.json").string());
  };
  const fs::path a = f.dir / "rerun_a", b = f.dir / "rerun_b";
  rerun(a);
  rerun(b);
  for (const char* name : {"split.json", "cat.jsonl", "models/member_00.ckpt",
                           "models/member_00_history.csv", "tp.csv", "vp.csv",
                           "report.json", "calibration.csv",
                           "confidence.csv"}) {
    CAPTURE(name);
    REQUIRE(slurp(a / name) == slurp(b / name));
  }
}
