// End-to-end runs of the command-line tool.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / ("vmamba_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }

  int run(const std::string& args) const {
    const std::string cmd = std::string(VMAMBA_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() +
                            " 2> " + (dir / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string p(const std::string& rel) const { return (dir / rel).string(); }
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("cli: synth, split, train, resume, eval") {
  Workspace w;
  REQUIRE(w.run("synth --count 4 --seed 1 --out " + w.p("data")) == 0);
  CHECK(fs::exists(w.p("data/volumes/AD_0000.nii")));
  REQUIRE(w.run("split --manifest " + w.p("data/manifest.tsv") + " --fraction 0.75 --seed 2 --out " + w.p("split")) ==
          0);
  const std::string train_tsv = slurp(w.p("split/train.tsv"));
  CHECK(train_tsv.rfind("# seed 2\n", 0) == 0);
  CHECK(train_tsv.find("../data/volumes/") != std::string::npos);

  const std::string manifests = " --train " + w.p("split/train.tsv") + " --eval " + w.p("split/test.tsv");
  REQUIRE(w.run("train --profile tiny --epochs 1 --batch-size 3" + manifests + " --out " + w.p("run")) == 0);
  CHECK(fs::exists(w.p("run/checkpoint.bin")));
  CHECK(slurp(w.p("run/history.csv")).rfind("epoch,train_loss,eval_loss,eval_accuracy\n1,", 0) == 0);
  REQUIRE(w.run("train --resume " + w.p("run/checkpoint.bin") + " --epochs 2" + manifests + " --out " + w.p("run")) ==
          0);
  CHECK(slurp(w.p("run/history.csv")).find("\n2,") != std::string::npos);

  const std::string eval_args = "eval --checkpoint " + w.p("run/checkpoint.bin") + " --manifest " +
                                w.p("split/test.tsv") + " --dataset-id synth-A --timestamp 0 --out ";
  REQUIRE(w.run(eval_args + w.p("e1")) == 0);
  REQUIRE(w.run(eval_args + w.p("e2")) == 0);
  const std::string report = slurp(w.p("e1/report.json"));
  CHECK(report == slurp(w.p("e2/report.json")));
  CHECK(report.find("\"timestamp\": \"1970-01-01T00:00:00Z\"") != std::string::npos);
  CHECK(report.find("\"dataset\": \"synth-A\"") != std::string::npos);
  CHECK(slurp(w.p("e1/report.csv")).rfind("label,precision,recall,f1,support\n", 0) == 0);
}

TEST_CASE("cli: exit codes") {
  Workspace w;
  CHECK(w.run("train --bogus") == 1);
  CHECK(w.run("") == 1);
  CHECK(w.run("eval --checkpoint " + w.p("missing.bin") + " --manifest " + w.p("missing.tsv")) == 2);

  {
    std::ofstream cfg(w.p("bad.json"));
    cfg << R"({"model": {}, "optimizer": {}})";
  }
  CHECK(w.run("bench --config " + w.p("bad.json") + " --out " + w.p("b")) == 1);
  CHECK(slurp(w.p("stderr.txt")).find("optimizer") != std::string::npos);

  REQUIRE(w.run("synth --count 2 --dims 16 16 16 --out " + w.p("small")) == 0);
  const std::string small = " --train " + w.p("small/manifest.tsv") + " --eval " + w.p("small/manifest.tsv");
  CHECK(w.run("train --profile tiny --epochs 1" + small + " --out " + w.p("r")) == 1);
  CHECK(slurp(w.p("stderr.txt")).find("--resize") != std::string::npos);

  REQUIRE(w.run("synth --count 4 --out " + w.p("d")) == 0);
  const std::string data = " --train " + w.p("d/manifest.tsv") + " --eval " + w.p("d/manifest.tsv");
  CHECK(w.run("train --profile tiny --epochs 1 --batch-size 4 --lr 1e300" + data + " --out " + w.p("r")) == 3);
  CHECK(slurp(w.p("stderr.txt")).find("diverged") != std::string::npos);
}

TEST_CASE("cli: checks") {
  Workspace w;
  CHECK(w.run("scan-check --trials 10 --max-length 64") == 0);
  CHECK(slurp(w.p("stdout.txt")).find("PASS") != std::string::npos);
  CHECK(w.run("scan-check --trials 3 --tolerance 1e-300") == 1);
  CHECK(slurp(w.p("stdout.txt")).find("FAIL seed=") != std::string::npos);
  CHECK(w.run("grad-check --profile ops --inject-fault relu=1.05") == 1);
  CHECK(slurp(w.p("stdout.txt")).find("relu") != std::string::npos);
  CHECK(w.run("bench --lengths 32 64 --out " + w.p("bench")) == 0);
  CHECK(slurp(w.p("bench/bench.csv")).rfind("mechanism,L,median_seconds\n", 0) == 0);
}
