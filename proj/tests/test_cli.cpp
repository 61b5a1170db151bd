#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>

#include "support.hpp"

using namespace gem;
using testutil::TempDir;

namespace {

// Runs the CLI with stdout/stderr redirected to files under `tmp`; returns the exit code.
int run_cli(const TempDir& tmp, const std::string& args) {
  const std::string cmd = std::string("'") + GEM_CLI_PATH + "' " + args + " >'" + (tmp / "stdout").string() +
                          "' 2>'" + (tmp / "stderr").string() + "'";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("cli exit codes", "[cli]") {
  TempDir tmp("cli");
  REQUIRE(run_cli(tmp, "synth --noise 0.1 --out " + q(tmp / "set")) == 0);
  CHECK(fs::exists(tmp / "set" / "manifest.json"));
  CHECK(fs::exists(tmp / "set" / "ground_truth.json"));

  CHECK(run_cli(tmp, "validate " + q(tmp / "set")) == 0);
  REQUIRE(run_cli(tmp, "analyze " + q(tmp / "set")) == 0);
  const json a = json::parse(io::read_file(tmp / "stdout"));
  CHECK(a["gem"]["caz_end"] == 7);
  CHECK(a["gem"]["handoff_layer"] == 8);

  CHECK(run_cli(tmp, "analyze --bogus " + q(tmp / "set")) == 2);
  CHECK(run_cli(tmp, "") == 2);
  CHECK(run_cli(tmp, "analyze " + q(tmp / "nope")) == 2);
  CHECK(run_cli(tmp, "--epsilon 2 analyze " + q(tmp / "set")) == 2);
  CHECK(run_cli(tmp, "report " + q(tmp / "set")) == 2);

  // identical classes: valid input, no direction anywhere
  auto set = load_activation_set(tmp / "set");
  set.neg = set.pos;
  write_activation_set(set, tmp / "flat");
  CHECK(run_cli(tmp, "validate " + q(tmp / "flat")) == 0);
  CHECK(run_cli(tmp, "analyze " + q(tmp / "flat")) == 3);

  io::write_file_atomic(tmp / "set" / "pos.bin", "truncated");
  CHECK(run_cli(tmp, "validate " + q(tmp / "set")) == 2);
}

TEST_CASE("cli csv output and study", "[cli]") {
  TempDir tmp("cli_study");
  REQUIRE(run_cli(tmp, "synth --demo-corpus --out " + q(tmp.path())) == 0);
  REQUIRE(run_cli(tmp, "--registry " + q(tmp / "registry.json") + " --workers 2 --out " + q(tmp / "study") +
                           " study " + q(tmp / "corpus")) == 0);
  CHECK(fs::exists(tmp / "study" / "summary.json"));
  REQUIRE(run_cli(tmp, "--format csv analyze " + q(tmp / "corpus" / "synth-mha-small" / "assembly")) == 0);
  const std::string csv = io::read_file(tmp / "stdout");
  CHECK(csv.rfind("layer,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
  CHECK(run_cli(tmp, "report " + q(tmp / "study")) == 0);
  CHECK(fs::exists(tmp / "study" / "figures" / "fig1_eec_histogram.csv"));
}
