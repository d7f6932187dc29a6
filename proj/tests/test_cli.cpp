#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "doctest.h"
#include "draft/cli.hpp"
#include "draft/data.hpp"
#include "draft/train.hpp"
#include "json.hpp"

using namespace draft;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("draft_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

// Silences std::cout and std::cerr for one call.
int quiet(const std::vector<std::string>& args) {
  std::ostringstream sink;
  auto* out = std::cout.rdbuf(sink.rdbuf());
  auto* err = std::cerr.rdbuf(sink.rdbuf());
  const int rc = cli_main(args);
  std::cout.rdbuf(out);
  std::cerr.rdbuf(err);
  return rc;
}

void write_config(const fs::path& p) {
  std::ofstream(p) << "# tiny run\nsource_utts = 16\ntarget_utts = 12\ntest_utts = 6\n"
                      "d_model = 16\nn_heads = 2\nffn_dim = 24\nd_ada = 4\nbatch_size = 8\n"
                      "pretrain_epochs = 1\nadapt_epochs = 1\nfinetune_epochs = 2\n";
}

}  // namespace

TEST_CASE("usage errors exit 2 and help exits 0") {
  const fs::path dir = scratch_dir("usage");
  write_config(dir / "c.cfg");
  CHECK(quiet({"--help"}) == 0);
  CHECK(quiet({"pretrain", "--help"}) == 0);
  CHECK(quiet({}) == 2);
  CHECK(quiet({"no-such-command"}) == 2);
  CHECK(quiet({"gen-corpus", "--out", (dir / "d").string(), "--bogus"}) == 2);
  CHECK(quiet({"gen-corpus", "--out", (dir / "d").string(), "--set", "nonsense_key=1"}) == 2);
  CHECK(quiet({"gen-corpus", "--out", (dir / "d").string(), "--set", "novalue"}) == 2);
  CHECK(quiet({"adapt", "--mode", "sideways", "--init", (dir / "c.cfg").string(), "--data", (dir / "c.cfg").string(),
               "--out", "x"}) == 2);
  CHECK(quiet({"evaluate", "--ckpt", (dir / "missing").string(), "--data", (dir / "c.cfg").string()}) == 2);
}

TEST_CASE("flags override config file values") {
  const fs::path dir = scratch_dir("override");
  write_config(dir / "c.cfg");
  REQUIRE(quiet({"gen-corpus", "--config", (dir / "c.cfg").string(), "--set", "source_utts=3", "--out",
                 (dir / "d").string()}) == 0);
  CHECK(load_manifest((dir / "d" / "source.tsv").string()).rows.size() == 3);
  CHECK(load_manifest((dir / "d" / "target.tsv").string()).rows.size() == 12);
}

TEST_CASE("the full DRAFT pipeline runs through the CLI") {
  const fs::path dir = scratch_dir("pipeline");
  write_config(dir / "c.cfg");
  const std::string cfg = (dir / "c.cfg").string(), data = (dir / "data").string();
  REQUIRE(quiet({"gen-corpus", "--config", cfg, "--out", data}) == 0);
  REQUIRE(quiet({"pretrain", "--objective", "eapc", "--config", cfg, "--data", data + "/source.tsv", "--out",
                 (dir / "ck1").string(), "--metrics", (dir / "m1.jsonl").string()}) == 0);
  REQUIRE(quiet({"adapt", "--mode", "draft", "--init", (dir / "ck1").string(), "--config", cfg, "--data",
                 data + "/target.tsv", "--out", (dir / "ck2").string()}) == 0);
  REQUIRE(quiet({"finetune", "--init", (dir / "ck2").string(), "--mode", "full", "--config", cfg, "--data",
                 data + "/target.tsv", "--out", (dir / "ck3").string()}) == 0);
  REQUIRE(quiet({"evaluate", "--ckpt", (dir / "ck3").string(), "--data", data + "/test.tsv", "--report",
                 (dir / "report.json").string()}) == 0);

  CHECK(load_checkpoint((dir / "ck2").string()).provenance.render() == "{θ_f¹, θ_ada¹, θ_g¹}");
  const auto report = nlohmann::json::parse(std::ifstream(dir / "report.json"));
  CHECK(report.at("ter").get<double>() >= 0.0);
  CHECK(report.at("utterances").size() == 6);
  CHECK(report.at("provenance") == "{θ_f², θ_ada², θ_g′¹}");
  const auto metrics = lines(dir / "m1.jsonl");
  CHECK(metrics.size() == 2);
  CHECK(nlohmann::json::parse(metrics[0]).at("stage") == "pretrain");

  // Runtime failures exit 1.
  CHECK(quiet({"evaluate", "--ckpt", (dir / "ck1").string(), "--data", data + "/test.tsv"}) == 1);
  CHECK(quiet({"adapt", "--mode", "draft", "--init", (dir / "ck3").string(), "--config", cfg, "--set", "d_ada=8",
               "--data", data + "/target.tsv", "--out", (dir / "bad").string()}) == 1);
  CHECK(quiet({"finetune", "--mode", "plus_ra", "--init", (dir / "ck2").string(), "--config", cfg, "--data",
               data + "/target.tsv", "--out", (dir / "bad").string()}) == 1);
  // Finetuning from scratch needs no --init.
  CHECK(quiet({"finetune", "--config", cfg, "--data", data + "/target.tsv", "--out", (dir / "scratch").string()}) == 0);
}

TEST_CASE("sweep writes one result line per value") {
  const fs::path dir = scratch_dir("sweep");
  write_config(dir / "c.cfg");
  const std::string cfg = (dir / "c.cfg").string();
  REQUIRE(quiet({"gen-corpus", "--config", cfg, "--out", (dir / "data").string()}) == 0);
  REQUIRE(quiet({"sweep", "--config", cfg, "--key", "d_ada", "--values", "2,4", "--corpus", (dir / "data").string(),
                 "--out", (dir / "sweep.jsonl").string()}) == 0);
  const auto out = lines(dir / "sweep.jsonl");
  REQUIRE(out.size() == 2);
  CHECK(nlohmann::json::parse(out[1]).at("value") == "4");
  CHECK(nlohmann::json::parse(out[1]).at("pipeline") == "draft");
  // Corpus keys regenerate the corpus per value.
  REQUIRE(quiet({"sweep", "--config", cfg, "--key", "noise", "--values", "0.1", "--pipeline", "scratch", "--out",
                 (dir / "noise.jsonl").string()}) == 0);
  CHECK(lines(dir / "noise.jsonl").size() == 1);
  CHECK(quiet({"sweep", "--config", cfg, "--key", "d_ada", "--values", "2", "--out", (dir / "x.jsonl").string()}) == 2);
}

TEST_CASE("gradcheck subcommand passes") { CHECK(quiet({"gradcheck", "--seeds", "1"}) == 0); }
