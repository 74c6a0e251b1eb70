#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunOutput {
  int exit_code = -1;
  std::string text;  // stdout and stderr interleaved
};

RunOutput run_cli(const std::string& args) {
  const std::string cmd = std::string(FLIP_BIN) + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  RunOutput out;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0)
    out.text.append(buf.data(), n);
  const int status = ::pclose(pipe);
  out.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return out;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

// Tiny synthetic run configuration so each pipeline stage finishes in well
// under a second.
std::string tiny_config() {
  static const std::string path = [] {
    const std::string p = "/tmp/flip_cli_config.json";
    std::ofstream out(p);
    out << R"({
      "train": {
        "pretrain_epochs": 2, "pretrain_batch": 64, "pretrain_lr": 0.002,
        "k_noise": 5, "lr_grid": [0.003], "finetune_batch": 64,
        "finetune_epochs": 2, "val_fraction": 0.2
      },
      "id_tower": {"d_emb": 4, "dnn_sizes": [8, 6], "cross_depth": 2},
      "encoder": {"d_text": 8, "n_layers": 1, "n_heads": 2, "d_ff": 12, "l_max": 48},
      "objectives": {"icl_dim": 5},
      "synthetic": {"n": 400, "fields": 3, "vocab_size": 5}
    })";
    return p;
  }();
  return path;
}

std::string fresh_run_dir(const std::string& tag) {
  const std::string dir = "/tmp/flip_cli_" + tag;
  fs::remove_all(dir);
  return dir;
}

std::string preprocess_args(const std::string& dir, const std::string& extra = "") {
  return "preprocess --out " + dir + " --seed 17 --config " + tiny_config() + " " + extra;
}

int count_md_data_rows(const std::string& markdown) {
  // Data rows: pipe-led lines after the header and separator.
  int pipes = 0;
  std::istringstream in(markdown);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty() && line[0] == '|') ++pipes;
  return pipes - 2;
}

}  // namespace

TEST_CASE("preprocess builds the run directory and is idempotent") {
  const std::string dir = fresh_run_dir("preprocess");
  RunOutput first = run_cli(preprocess_args(dir));
  CAPTURE(first.text);
  REQUIRE(first.exit_code == 0);
  CHECK(first.text.find("fields=3") != std::string::npos);
  CHECK(first.text.find("samples=400") != std::string::npos);
  CHECK(fs::exists(dir + "/manifest.json"));
  CHECK(fs::exists(dir + "/schema.json"));
  CHECK(fs::exists(dir + "/tokenizer.json"));
  CHECK(fs::exists(dir + "/data/train.tsv"));
  CHECK(fs::exists(dir + "/data/test.tsv"));
  CHECK(fs::exists(dir + "/reports/preprocess.md"));
  CHECK(!fs::exists(dir + "/.lock"));  // released

  RunOutput again = run_cli(preprocess_args(dir));
  CHECK(again.exit_code == 0);
  CHECK(again.text.find("already complete") != std::string::npos);

  RunOutput forced = run_cli(preprocess_args(dir, "--force"));
  CHECK(forced.exit_code == 0);
  CHECK(forced.text.find("fields=3") != std::string::npos);
}

TEST_CASE("same seed produces byte-identical schema files") {
  const std::string a = fresh_run_dir("schema_a");
  const std::string b = fresh_run_dir("schema_b");
  REQUIRE(run_cli(preprocess_args(a)).exit_code == 0);
  REQUIRE(run_cli(preprocess_args(b)).exit_code == 0);
  CHECK(slurp(a + "/schema.json") == slurp(b + "/schema.json"));
  CHECK(slurp(a + "/tokenizer.json") == slurp(b + "/tokenizer.json"));
  CHECK(slurp(a + "/data/train.tsv") == slurp(b + "/data/train.tsv"));
}

TEST_CASE("unknown label rule exits with code 2 and lists the valid rules") {
  const std::string dir = fresh_run_dir("badrule");
  RunOutput out = run_cli("preprocess --out " + dir + " --data /tmp/whatever.tsv " +
                          "--rule netflix");
  CHECK(out.exit_code == 2);
  CHECK(out.text.find("netflix") != std::string::npos);
  CHECK(out.text.find("movielens") != std::string::npos);
  CHECK(out.text.find("bookcrossing") != std::string::npos);
  CHECK(out.text.find("goodreads") != std::string::npos);
}

TEST_CASE("a rating log file flows through the label rule and split") {
  const std::string file = "/tmp/flip_cli_ratings.tsv";
  {
    std::ofstream out(file);
    out << "gender\tgenre\trating\ttimestamp\n";
    // Ratings of exactly 3 are dropped under the movielens rule.
    const char* rows[] = {"M\tAction\t5\t1", "F\tComedy\t3\t2", "M\tDrama\t1\t3",
                          "F\tAction\t4\t4", "M\tComedy\t5\t5", "F\tDrama\t2\t6",
                          "M\tAction\t4\t7", "F\tComedy\t1\t8", "M\tDrama\t5\t9",
                          "F\tAction\t2\t10", "M\tComedy\t4\t11"};
    for (const char* r : rows) out << r << "\n";
  }
  const std::string dir = fresh_run_dir("file");
  RunOutput out = run_cli("preprocess --out " + dir + " --data " + file +
                          " --rule movielens --config " + tiny_config());
  CAPTURE(out.text);
  REQUIRE(out.exit_code == 0);
  // 11 rows minus one rating==3 drop; two declared field columns.
  CHECK(out.text.find("samples=10") != std::string::npos);
  CHECK(out.text.find("fields=2") != std::string::npos);
  const auto manifest = json::parse(slurp(dir + "/manifest.json"));
  CHECK(manifest["source"]["kind"] == "file");
  CHECK(manifest["source"]["rule"] == "movielens");
  std::remove(file.c_str());
}

TEST_CASE("commands name the missing prerequisite command") {
  const std::string dir = fresh_run_dir("noprereq");
  fs::create_directories(dir);
  RunOutput out = run_cli("pretrain --out " + dir);
  CHECK(out.exit_code == 1);
  CHECK(out.text.find("flip preprocess") != std::string::npos);

  REQUIRE(run_cli(preprocess_args(dir)).exit_code == 0);
  out = run_cli("analyze --out " + dir);
  CHECK(out.exit_code == 1);
  CHECK(out.text.find("flip pretrain") != std::string::npos);
  out = run_cli("finetune --out " + dir + " --variant flip");
  CHECK(out.exit_code == 1);
  CHECK(out.text.find("flip pretrain") != std::string::npos);
}

TEST_CASE("the lock file keeps a second command out of the run directory") {
  const std::string dir = fresh_run_dir("locked");
  REQUIRE(run_cli(preprocess_args(dir)).exit_code == 0);
  { std::ofstream lock(dir + "/.lock"); }
  RunOutput out = run_cli("pretrain --out " + dir);
  CHECK(out.exit_code == 1);
  CHECK(out.text.find(".lock") != std::string::npos);
  fs::remove(dir + "/.lock");
  CHECK(run_cli("pretrain --out " + dir).exit_code == 0);
}

TEST_CASE("eval before any training reports chance-level AUC from a fresh init") {
  const std::string dir = fresh_run_dir("eval_untrained");
  REQUIRE(run_cli(preprocess_args(dir)).exit_code == 0);
  RunOutput out = run_cli("eval --out " + dir + " --variant flip");
  CAPTURE(out.text);
  REQUIRE(out.exit_code == 0);
  CHECK(out.text.find("untrained") != std::string::npos);

  // reports/eval_flip.csv: header then one data row, auc in column 5.
  std::istringstream csv(slurp(dir + "/reports/eval_flip.csv"));
  std::string header, row;
  REQUIRE(std::getline(csv, header));
  REQUIRE(std::getline(csv, row));
  CHECK(header == "variant,parameters,split,n,auc,logloss");
  std::istringstream cells(row);
  std::string cell;
  for (int i = 0; i < 5; ++i) REQUIRE(std::getline(cells, cell, ','));
  const double auc = std::stod(cell);
  CHECK(auc > 0.2);  // untrained random towers hover around 0.5
  CHECK(auc < 0.8);
}

TEST_CASE("the full pipeline runs and repeated pretraining is byte-deterministic") {
  const std::string a = fresh_run_dir("pipe_a");
  const std::string b = fresh_run_dir("pipe_b");
  for (const std::string& dir : {a, b}) {
    REQUIRE(run_cli(preprocess_args(dir)).exit_code == 0);
    RunOutput out = run_cli("pretrain --out " + dir);
    CAPTURE(out.text);
    REQUIRE(out.exit_code == 0);
    CHECK(fs::exists(dir + "/checkpoints/pretrain/final/manifest.json"));
    CHECK(fs::exists(dir + "/checkpoints/pretrain/best/manifest.json"));
  }
  // Identical manifests: identical training logs, byte for byte.
  CHECK(slurp(a + "/manifest.json") == slurp(b + "/manifest.json"));
  CHECK(slurp(a + "/metrics.jsonl") == slurp(b + "/metrics.jsonl"));

  RunOutput ft = run_cli("finetune --out " + a + " --variant flip_id");
  CAPTURE(ft.text);
  REQUIRE(ft.exit_code == 0);
  CHECK(fs::exists(a + "/reports/finetune_flip_id.md"));
  CHECK(fs::exists(a + "/checkpoints/finetune_flip_id/manifest.json"));

  RunOutput ev = run_cli("eval --out " + a + " --variant flip_id");
  REQUIRE(ev.exit_code == 0);
  CHECK(ev.text.find("finetuned") != std::string::npos);

  RunOutput an = run_cli("analyze --out " + a);
  CAPTURE(an.text);
  REQUIRE(an.exit_code == 0);
  CHECK(fs::exists(a + "/reports/heatmap.csv"));
  CHECK(fs::exists(a + "/reports/projection.csv"));
  CHECK(fs::exists(a + "/reports/analyze.md"));

  // Scratch finetuning never needs the pretraining stage.
  RunOutput scratch = run_cli("finetune --out " + b + " --variant scratch");
  CAPTURE(scratch.text);
  CHECK(scratch.exit_code == 0);
}

TEST_CASE("explicit flag overrides are recorded verbatim in the manifest") {
  const std::string dir = fresh_run_dir("overrides");
  REQUIRE(run_cli(preprocess_args(dir, "--tau 0.05")).exit_code == 0);
  auto manifest = json::parse(slurp(dir + "/manifest.json"));
  CHECK(manifest["overrides"]["preprocess"]["tau"] == 0.05);
  CHECK(manifest["overrides"]["preprocess"]["seed"] == 17);
  CHECK(manifest["config"]["train"]["tau"] == 0.05);
  CHECK(manifest["config"]["objectives"]["tau"] == 0.05);

  REQUIRE(run_cli("pretrain --out " + dir + " --r-text 0.4").exit_code == 0);
  manifest = json::parse(slurp(dir + "/manifest.json"));
  CHECK(manifest["overrides"]["pretrain"]["r_text"] == 0.4);
  CHECK(manifest["config"]["train"]["r_text"] == 0.4);
}

TEST_CASE("ablate emits the fixed eight-variant table") {
  const std::string dir = fresh_run_dir("ablate");
  REQUIRE(run_cli(preprocess_args(dir)).exit_code == 0);
  RunOutput out = run_cli("ablate --out " + dir);
  CAPTURE(out.text);
  REQUIRE(out.exit_code == 0);

  const std::string table = slurp(dir + "/reports/ablate.md");
  CHECK(count_md_data_rows(table) == 8);
  for (const char* label : {"full", "w/o MLM", "w/o MTM", "w/o ICL", "w/o MLM&MTM",
                            "w/o MLM&MTM&ICL", "token-level masking",
                            "w/o joint reconstruction"})
    CHECK(table.find(label) != std::string::npos);
  CHECK(table.find("AUC") != std::string::npos);
  CHECK(table.find("Logloss") != std::string::npos);

  // CSV mirror: header plus exactly eight rows.
  std::istringstream csv(slurp(dir + "/reports/ablate.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 9);

  RunOutput again = run_cli("ablate --out " + dir);
  CHECK(again.exit_code == 0);
  CHECK(again.text.find("already complete") != std::string::npos);
}
