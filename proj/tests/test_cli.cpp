#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FCCA_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("help and usage errors") {
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("run --no-such-flag") == 2);
    CHECK(run_cli("run") == 2);
  }

  TEST_CASE("exit codes for config, data and infeasibility errors") {
    TempDir dir("fcca_cli_codes");
    CHECK(run_cli("run --dataset synthetic:boxes:120 --p0 0.3 --out " + dir.str()) == 2);
    CHECK(run_cli("run --set colour=blue --dataset synthetic:boxes:120 --out " + dir.str()) == 2);
    CHECK(run_cli("run --dataset /nonexistent/data.csv --out " + dir.str()) == 3);
    {
      std::ofstream bad(dir.path / "bad.csv");
      bad << "a,b,label\n1,2,x\n3,4,y\n5,6,z\n";
    }
    CHECK(run_cli("fit-target --dataset " + (dir.path / "bad.csv").string() + " --out " + dir.str()) == 3);
    // The bounds leave no point with that confidence.
    CHECK(run_cli("run --dataset synthetic:boxes:120 --folds 2 --p0 1 --p1 1 --out " + dir.str()) == 4);
  }

  TEST_CASE("stage-by-stage chain") {
    TempDir dir("fcca_cli_chain");
    const std::string common = " --dataset synthetic:oblique:150 --set n_estimators=20 --out " + dir.str();
    REQUIRE(run_cli("fit-target" + common) == 0);
    CHECK(fs::exists(dir.path / "model.json"));
    REQUIRE(run_cli("counterfactuals" + common) == 0);
    CHECK(fs::exists(dir.path / "counterfactuals.csv"));
    REQUIRE(run_cli("thresholds" + common) == 0);
    CHECK(fs::exists(dir.path / "thresholds.json"));
    CHECK(fs::exists(dir.path / "heatmap.csv"));
    REQUIRE(run_cli("discretize --q 0.5" + common) == 0);
    CHECK(fs::exists(dir.path / "binarized.csv"));
    CHECK(fs::exists(dir.path / "metrics.json"));
    REQUIRE(run_cli("train-tree --depth 2 --out " + dir.str()) == 0);
    CHECK(fs::exists(dir.path / "tree_optimal.json"));
  }

  TEST_CASE("pipeline subcommands write reports") {
    TempDir dir("fcca_cli_run");
    const std::string common =
        " --dataset synthetic:boxes:150 --folds 2 --set n_estimators=20 --set write_artifacts=false --out ";
    CHECK(run_cli("run --q 0,0.7" + common + (dir.path / "run").string()) == 0);
    CHECK(fs::exists(dir.path / "run/report.json"));
    CHECK(run_cli("sweep-q" + common + (dir.path / "sweep").string()) == 0);
    CHECK(fs::exists(dir.path / "sweep/tradeoff.csv"));
    CHECK(run_cli("gtre" + common + (dir.path / "gtre").string()) == 0);
    CHECK(fs::exists(dir.path / "gtre/report.json"));
  }
}
