// End-to-end checks of the command-line binary: artifact layout, determinism
// across reruns, config-file precedence, and failure exit codes. Everything
// runs at toy step counts; quality gates live in the acceptance suite.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string output;
};

CliRun run_cli(const std::string& args, const std::string& env = "") {
  std::string cmd = env.empty() ? std::string() : env + " ";
  cmd += LINCIR_CLI_PATH;
  cmd += " ";
  cmd += args;
  cmd += " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CliRun r;
  char buf[4096];
  size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::path("/tmp/lincir_cli_tests") / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing file: " << p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::istringstream ss(slurp(p));
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

// First CSV column of every data row, header skipped. Quoted fields keep
// their quotes stripped.
std::set<std::string> first_column(const fs::path& csv) {
  std::set<std::string> out;
  const auto ls = lines_of(csv);
  for (size_t i = 1; i < ls.size(); ++i) {
    std::string cell;
    if (!ls[i].empty() && ls[i][0] == '"') {
      const size_t close = ls[i].find('"', 1);
      REQUIRE(close != std::string::npos);
      cell = ls[i].substr(1, close - 1);
    } else {
      cell = ls[i].substr(0, ls[i].find(','));
    }
    out.insert(cell);
  }
  return out;
}

// Shared toy world: one cheap pretrain reused by the train/eval/ablate
// cases. Built on first use.
const fs::path& world_dir() {
  static fs::path dir;
  static CliRun built;
  if (dir.empty()) {
    dir = fresh_dir("world");
    built = run_cli("pretrain --out " + dir.string() + " --seed 7 --steps 4 --batch 32");
  }
  REQUIRE_MESSAGE(built.code == 0, built.output);
  return dir;
}

// Shared toy projection checkpoint trained against world_dir().
const fs::path& phi_dir() {
  static fs::path dir;
  static CliRun built;
  if (dir.empty()) {
    const fs::path& world = world_dir();
    dir = fresh_dir("phi");
    built = run_cli("train --corpus " + (world / "corpus.txt").string() + " --encoder-ckpt " +
                    (world / "encoder.lncr").string() + " --benchmark " + world.string() +
                    " --out " + dir.string() +
                    " --steps 2 --batch 8 --eval-every 1 --patience 99 --seed 3");
  }
  REQUIRE_MESSAGE(built.code == 0, built.output);
  return dir;
}

}  // namespace

TEST_CASE("help text lists every subcommand and bad usage fails loudly") {
  CliRun help = run_cli("--help");
  CHECK(help.code == 0);
  for (const char* name : {"pretrain", "train", "eval", "ablate", "analyze-noise"})
    CHECK(help.output.find(name) != std::string::npos);

  CHECK(run_cli("frobnicate").code != 0);
  CHECK(run_cli("ablate --out /tmp/lincir_cli_tests/none").code != 0);  // --table required

  CliRun bad = run_cli("analyze-noise --out /tmp/lincir_cli_tests/badn --n-samples 1");
  CHECK(bad.code == 1);
  CHECK(bad.output.find("error: cli:") != std::string::npos);
}

TEST_CASE("analyze-noise emits the documented table and is seed-deterministic") {
  const fs::path a = fresh_dir("noise_a");
  const fs::path b = fresh_dir("noise_b");
  const std::string args = " --seed 9 --n-samples 2000 --dims 16,32";
  REQUIRE(run_cli("analyze-noise --out " + a.string() + args).code == 0);
  REQUIRE(run_cli("analyze-noise --out " + b.string() + args, "LINCIR_THREADS=3").code == 0);
  CHECK(slurp(a / "noise_stats.csv") == slurp(b / "noise_stats.csv"));

  const auto ls = lines_of(a / "noise_stats.csv");
  REQUIRE(ls.size() == 1 + 7 * 2);
  CHECK(ls[0] == "kind,d,n_samples,mean_norm,std_norm");
  const std::set<std::string> expect{"none",     "student-t", "exponential",    "chi-squared",
                                     "gaussian", "uniform",   "scaled-gaussian"};
  CHECK(first_column(a / "noise_stats.csv") == expect);

  // Spot physics: the zero family has zero norm, the gaussian mean norm at
  // d=16 sits near 4.
  for (size_t i = 1; i < ls.size(); ++i) {
    std::istringstream row(ls[i]);
    std::string kind, d, n, mean, sd;
    std::getline(row, kind, ',');
    std::getline(row, d, ',');
    std::getline(row, n, ',');
    std::getline(row, mean, ',');
    std::getline(row, sd, ',');
    CHECK(n == "2000");
    if (kind == "none") {
      CHECK(std::stod(mean) == 0.0);
      CHECK(std::stod(sd) == 0.0);
    }
    if (kind == "gaussian" && d == "16") CHECK(std::abs(std::stod(mean) - 4.0) < 0.15);
  }

  CHECK(read_json(a / "config.json")["command"] == "analyze-noise");
}

TEST_CASE("pretrain lays out the full benchmark and reruns byte-identically") {
  const fs::path& world = world_dir();

  CHECK(lines_of(world / "corpus.txt").size() == 436);
  CHECK(lines_of(world / "pairs.jsonl").size() == 648);
  CHECK(lines_of(world / "holdout_pairs.jsonl").size() == 72);
  CHECK(lines_of(world / "gallery.jsonl").size() == 288);
  CHECK(lines_of(world / "dev.jsonl").size() == 72);
  CHECK(lines_of(world / "test.jsonl").size() == 72);
  CHECK(fs::exists(world / "vocab.txt"));

  const nlohmann::json m = read_json(world / "metrics.json");
  CHECK(m["command"] == "pretrain");
  CHECK(m["steps"] == 4);
  CHECK(m["pairs"] == 648);
  CHECK(m.contains("final_loss"));
  CHECK(m.contains("final_temperature"));
  CHECK(m.contains("heldout_image_to_text_r1"));

  // Every dev record names two targets and never its own reference.
  for (const std::string& line : lines_of(world / "dev.jsonl")) {
    const nlohmann::json r = nlohmann::json::parse(line);
    CHECK(r["targets"].size() == 2);
    for (const auto& t : r["targets"]) CHECK(t != r["reference_id"]);
  }

  const fs::path again = fresh_dir("world_again");
  REQUIRE(run_cli("pretrain --out " + again.string() + " --seed 7 --steps 4 --batch 32").code == 0);
  CHECK(slurp(world / "encoder.lncr") == slurp(again / "encoder.lncr"));
  CHECK(slurp(world / "metrics.json") == slurp(again / "metrics.json"));

  const fs::path other = fresh_dir("world_seed8");
  REQUIRE(run_cli("pretrain --out " + other.string() + " --seed 8 --steps 4 --batch 32").code == 0);
  CHECK(slurp(world / "encoder.lncr") != slurp(other / "encoder.lncr"));
}

TEST_CASE("train writes history, metrics, and a rerun-stable projection") {
  const fs::path& world = world_dir();
  const fs::path& t1 = phi_dir();

  CHECK(fs::exists(t1 / "phi.lncr"));
  const auto hist = lines_of(t1 / "history.csv");
  REQUIRE(hist.size() >= 3);
  CHECK(hist[0] == "step,loss,val_score");
  CHECK(hist[1].substr(0, 6) == "0,nan,");  // step-0 row has no loss yet

  const nlohmann::json m = read_json(t1 / "metrics.json");
  CHECK(m["command"] == "train");
  CHECK(m["captions_used"] == 432);
  CHECK(m["captions_skipped"] == 4);
  CHECK(m["evaluations"] == hist.size() - 1);

  const fs::path t2 = fresh_dir("phi_again");
  REQUIRE(run_cli("train --corpus " + (world / "corpus.txt").string() + " --encoder-ckpt " +
                  (world / "encoder.lncr").string() + " --benchmark " + world.string() +
                  " --out " + t2.string() +
                  " --steps 2 --batch 8 --eval-every 1 --patience 99 --seed 3")
              .code == 0);
  CHECK(slurp(t1 / "phi.lncr") == slurp(t2 / "phi.lncr"));
  CHECK(slurp(t1 / "history.csv") == slurp(t2 / "history.csv"));

  CliRun stub = run_cli("train --corpus " + (world / "corpus.txt").string() + " --encoder-ckpt " +
                        (world / "encoder.lncr").string() + " --benchmark " + world.string() +
                        " --out " + fresh_dir("phi_p2w").string() +
                        " --steps 2 --batch 8 --supervision pic2word");
  CHECK(stub.code == 1);
  CHECK(stub.output.find("error: trainer: pic2word supervision is not implemented") !=
        std::string::npos);
}

TEST_CASE("eval covers every query mode and the oracle hits the ceiling") {
  const fs::path& world = world_dir();
  const fs::path& phi = phi_dir();
  const std::string base = "eval --encoder-ckpt " + (world / "encoder.lncr").string() +
                           " --benchmark " + world.string() + " --k 3";

  for (const std::string mode : {"composed", "text-only", "image-only", "oracle"}) {
    const fs::path out = fresh_dir("eval_" + mode);
    std::string args = base + " --query-mode " + mode + " --out " + out.string();
    if (mode == "composed") args += " --phi-ckpt " + (phi / "phi.lncr").string();
    CliRun r = run_cli(args);
    REQUIRE_MESSAGE(r.code == 0, r.output);

    const nlohmann::json m = read_json(out / "metrics.json");
    CHECK(m["query_mode"] == mode);
    CHECK(m["n_queries"] == 72);
    for (const char* key : {"r_at_1", "r_at_5", "r_at_10", "map_at_5", "map_at_10"})
      CHECK(m.contains(key));
    if (mode == "oracle") {
      CHECK(m["r_at_1"] == 1.0);
      CHECK(m["modality_gap"].is_null());
      CHECK(m["template"].is_null());
    } else {
      CHECK(m["modality_gap"].is_number());
    }
    if (mode == "composed") CHECK(m["template"] == "a photo of [$] that [cond]");

    const auto res = lines_of(out / "results.csv");
    CHECK(res.size() == 1 + 72 * 3);
    CHECK(res[0] == "query_id,rank,item_id,score");
    CHECK(fs::exists(out / "index.lncr"));
  }

  // Keeping the reference in the candidate set puts it at rank 1 for pure
  // image queries: it scores cosine 1 against itself.
  const fs::path inc = fresh_dir("eval_incref");
  REQUIRE(run_cli(base + " --query-mode image-only --include-reference --out " + inc.string())
              .code == 0);
  std::vector<std::string> refs;
  for (const std::string& line : lines_of(world / "dev.jsonl"))
    refs.push_back(nlohmann::json::parse(line)["reference_id"]);
  const auto res = lines_of(inc / "results.csv");
  for (size_t q = 0; q < refs.size(); ++q) {
    std::istringstream row(res[1 + q * 3]);
    std::string qid, rank, item;
    std::getline(row, qid, ',');
    std::getline(row, rank, ',');
    std::getline(row, item, ',');
    CHECK(rank == "1");
    CHECK(item == refs[q]);
  }

  CHECK(run_cli(base + " --query-mode composed --out " + fresh_dir("eval_nophi").string()).code ==
        1);
  CliRun badmode = run_cli(base + " --query-mode sideways --out " + fresh_dir("eval_bad").string());
  CHECK(badmode.code == 1);
  CHECK(badmode.output.find("error: cli: unknown query mode") != std::string::npos);
}

TEST_CASE("ablate masking sweeps the exact policy set") {
  const fs::path& world = world_dir();
  const fs::path out = fresh_dir("ab_mask");
  CliRun r = run_cli("ablate --table masking --corpus " + (world / "corpus.txt").string() +
                     " --encoder-ckpt " + (world / "encoder.lncr").string() + " --benchmark " +
                     world.string() + " --out " + out.string() +
                     " --steps 1 --batch 8 --eval-every 1 --patience 1 --seed 5");
  REQUIRE_MESSAGE(r.code == 0, r.output);

  const auto ls = lines_of(out / "ablate_masking.csv");
  CHECK(ls[0] == "policy,used,skipped,best_val_r1,map_at_5");
  const std::set<std::string> expect{"all-non-keyword", "random-token", "all-noun", "1-keyword",
                                     "3-keyword",       "5-keyword",   "all-keyword"};
  CHECK(first_column(out / "ablate_masking.csv") == expect);
  for (const std::string& policy : expect)
    CHECK(fs::exists(out / ("history_masking_" + policy + ".csv")));
}

TEST_CASE("ablate supervision reports the unimplemented baseline without failing") {
  const fs::path& world = world_dir();
  const fs::path out = fresh_dir("ab_sup");
  CliRun r = run_cli("ablate --table supervision --corpus " + (world / "pairs.jsonl").string() +
                     " --encoder-ckpt " + (world / "encoder.lncr").string() + " --benchmark " +
                     world.string() + " --out " + out.string() +
                     " --steps 1 --batch 8 --eval-every 1 --patience 1 --seed 5");
  REQUIRE_MESSAGE(r.code == 0, r.output);

  const auto ls = lines_of(out / "ablate_supervision.csv");
  REQUIRE(ls.size() == 4);
  CHECK(ls[0] == "supervision,status,best_val_r1,map_at_5");
  CHECK(first_column(out / "ablate_supervision.csv") ==
        std::set<std::string>{"text-anchored", "image-anchored", "pic2word"});
  bool saw_stub = false;
  for (const auto& line : ls)
    if (line == "pic2word,not implemented,,") saw_stub = true;
  CHECK(saw_stub);
}

TEST_CASE("ablate prompts ranks each template from a fixed checkpoint") {
  const fs::path& world = world_dir();
  const fs::path& phi = phi_dir();
  const fs::path out = fresh_dir("ab_prompts");
  const fs::path tf = out / "two.txt";
  {
    std::ofstream f(tf);
    f << "a photo of [$] that [cond]\n[$] , [cond]\n";
  }
  CliRun r = run_cli("ablate --table prompts --encoder-ckpt " +
                     (world / "encoder.lncr").string() + " --benchmark " + world.string() +
                     " --phi-ckpt " + (phi / "phi.lncr").string() + " --templates-file " +
                     tf.string() + " --out " + out.string());
  REQUIRE_MESSAGE(r.code == 0, r.output);

  const auto ls = lines_of(out / "ablate_prompts.csv");
  REQUIRE(ls.size() == 3);
  CHECK(ls[0] == "template,r_at_1,map_at_5");
  CHECK(ls[1].substr(0, 29) == "\"a photo of [$] that [cond]\",");
  CHECK(ls[2].substr(0, 15) == "\"[$] , [cond]\",");
}

TEST_CASE("config file values lose to explicit flags and beat defaults") {
  const fs::path dir = fresh_dir("cfg");
  const fs::path cfg = dir / "cfg.json";
  {
    std::ofstream f(cfg);
    f << R"({"n-samples": 1234, "dims": "8", "seed": 5})" << "\n";
  }

  const fs::path a = dir / "file_only";
  REQUIRE(run_cli("analyze-noise --config " + cfg.string() + " --out " + a.string()).code == 0);
  nlohmann::json ja = read_json(a / "config.json");
  CHECK(ja["n-samples"] == 1234);
  CHECK(ja["dims"] == "8");
  CHECK(ja["seed"] == 5);

  const fs::path b = dir / "flag_wins";
  REQUIRE(run_cli("analyze-noise --config " + cfg.string() + " --n-samples 999 --out " +
                  b.string())
              .code == 0);
  nlohmann::json jb = read_json(b / "config.json");
  CHECK(jb["n-samples"] == 999);
  CHECK(jb["dims"] == "8");

  {
    std::ofstream f(cfg, std::ios::trunc);
    f << R"({"no-such-flag": 1})" << "\n";
  }
  CliRun bad = run_cli("analyze-noise --config " + cfg.string() + " --out " + dir.string());
  CHECK(bad.code == 1);
  CHECK(bad.output.find("error: cli:") != std::string::npos);
}
