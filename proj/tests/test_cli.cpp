#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

const std::string kTool = CTN3D_PATH;
const fs::path kWork = CTN_CLI_WORKDIR;
const fs::path kData = CTN_TEST_DATA;

struct Result {
  int code = -1;
  std::string output;
};

Result run(const std::string& args) {
  const std::string cmd = "cd '" + kWork.string() + "' && '" + kTool + "' " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string last_line(const std::string& text) {
  std::string line, last;
  std::istringstream in(text);
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  return last;
}

struct Workdir {
  Workdir() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
  }
};

}  // namespace

TEST_CASE_FIXTURE(Workdir, "usage errors exit with 1") {
  CHECK(run("").code == 1);
  CHECK(run("fly").code == 1);
  CHECK(run("train --bogus").code == 1);
  CHECK(run("train --mechanism caa").code == 1);
  CHECK(run("train --scales 2").code == 1);
  CHECK(run("train --config missing.json").code == 1);
  std::ofstream(kWork / "broken.json") << "{ \"model\": ";
  const Result broken = run("train --config broken.json");
  CHECK(broken.code == 1);
  CHECK(broken.output.find("broken.json") != std::string::npos);
  std::ofstream(kWork / "unknown.json") << R"({"model": {"colour": "blue"}})";
  CHECK(run("train --config unknown.json").code == 1);
  CHECK(run("gradcheck --scope everything").code == 1);
  CHECK(run("--help").code == 0);
}

TEST_CASE_FIXTURE(Workdir, "data errors exit with 2") {
  CHECK(run("classify --checkpoint nowhere.json --cloud x.xyz").code == 2);
  std::ofstream(kWork / "bad.xyz") << "0 0 0\n1 1\n";
  CHECK(run("synth --out d --classes 2 --train-per-class 2 --test-per-class 1 --points 32").code == 0);
  CHECK(run("train --train-manifest d/train.json --test-manifest d/test.json --points 32 --epochs 1 --batch-size 2 --out r").code == 0);
  const Result bad = run("classify --checkpoint r/checkpoint.json --cloud bad.xyz");
  CHECK(bad.code == 2);
  CHECK(bad.output.find("line 2") != std::string::npos);
  CHECK(run("train --train-manifest nope.json --points 32 --epochs 1 --out r2").code == 2);
}

TEST_CASE_FIXTURE(Workdir, "numerical failures exit with 3") {
  const Result r = run("train --points 32 --classes 2 --train-per-class 4 --test-per-class 1 --epochs 4 --batch-size 4 --lr 1e30 --out blowup");
  CHECK(r.code == 3);
  CHECK(r.output.find("epoch") != std::string::npos);
}

TEST_CASE_FIXTURE(Workdir, "synth, train, eval, classify, saliency") {
  REQUIRE(run("synth --out d --classes 3 --train-per-class 6 --test-per-class 3 --points 64 --seed 2").code == 0);
  CHECK(fs::exists(kWork / "d" / "train.json"));
  CHECK(fs::exists(kWork / "d" / "test.json"));
  const std::string common =
      "train --train-manifest d/train.json --test-manifest d/test.json --points 32 --epochs 3 --batch-size 4 "
      "--seed 7 --out ";
  REQUIRE(run(common + "a").code == 0);
  REQUIRE(run(common + "b").code == 0);
  const std::string log_a = read_file(kWork / "a" / "log.csv");
  CHECK(log_a == read_file(kWork / "b" / "log.csv"));
  CHECK(log_a.rfind("epoch,lr,train_loss,train_acc,test_mAcc,test_OA\n", 0) == 0);
  for (const char* f : {"config.json", "checkpoint.json", "metrics.json"}) CHECK(fs::exists(kWork / "a" / f));

  const Result eval = run("eval --checkpoint a/checkpoint.json --manifest d/test.json --out a/eval.json");
  REQUIRE(eval.code == 0);
  std::istringstream row(last_line(log_a));
  std::string cell;
  std::vector<std::string> cells;
  while (std::getline(row, cell, ',')) cells.push_back(cell);
  REQUIRE(cells.size() == 6);
  const double macc = std::stod(cells[4]), oa = std::stod(cells[5]);
  char expect[64];
  std::snprintf(expect, sizeof expect, "mAcc %.4f  OA %.4f", macc, oa);
  CHECK(eval.output.find(expect) != std::string::npos);
  const Result by_config = run("eval --checkpoint a/checkpoint.json --config a/config.json");
  CHECK(by_config.code == 0);
  CHECK(by_config.output.find(expect) != std::string::npos);

  const fs::path cloud = kWork / "d" / "test";
  std::string first;
  for (const auto& e : fs::directory_iterator(cloud)) {
    first = e.path().string();
    break;
  }
  const Result cls = run("classify --checkpoint a/checkpoint.json --cloud '" + first + "' --top-k 2");
  CHECK(cls.code == 0);
  CHECK(cls.output.find("sphere") != std::string::npos);

  const Result sal = run("saliency --checkpoint a/checkpoint.json --cloud '" + first + "' --class cube --out s.xyz");
  CHECK(sal.code == 0);
  std::istringstream scored(read_file(kWork / "s.xyz"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(scored, line)) {
    std::istringstream cols(line);
    double v;
    std::size_t n = 0;
    while (cols >> v) ++n;
    CHECK(n == 7);
    ++rows;
  }
  CHECK(rows > 0);
  CHECK(run("saliency --checkpoint a/checkpoint.json --cloud '" + first + "' --class nothing --out s.xyz").code == 1);
}

TEST_CASE_FIXTURE(Workdir, "bench and gradcheck") {
  const Result bench = run("bench");
  CHECK(bench.code == 0);
  CHECK(bench.output.find("offset") != std::string::npos);
  const Result only = run("bench --scales 3 --mechanism offset --operator sub --pos-enc on");
  CHECK(only.code == 0);
  const Result ops = run("gradcheck --scope ops");
  CHECK(ops.code == 0);
  CHECK(ops.output.find("all passed") != std::string::npos);
}

TEST_CASE_FIXTURE(Workdir, "config file with flag override") {
  std::ofstream(kWork / "run.json") << R"({"model": {"points": 32, "scales": 1}, "train": {"epochs": 1, "batch_size": 4},
    "data": {"classes": 2, "train_per_class": 4, "test_per_class": 2}, "seed": 3, "out": "from_file"})";
  REQUIRE(run("train --config run.json --epochs 2 --out override").code == 0);
  const std::string echoed = read_file(kWork / "override" / "config.json");
  CHECK(echoed.find("\"epochs\": 2") != std::string::npos);
  CHECK(echoed.find("\"scales\": 1") != std::string::npos);
  CHECK(fs::exists(kWork / "override" / "log.csv"));
  CHECK_FALSE(fs::exists(kWork / "from_file"));
}
