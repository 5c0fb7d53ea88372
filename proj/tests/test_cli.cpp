#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "sdir/pipeline.hpp"
#include "test_helpers.hpp"

using namespace sdir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path kSmoke = fs::path(SDIR_SOURCE_DIR) / "configs" / "smoke.ini";

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SDIR_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string with_override(const std::string& text, const std::string& key, const std::string& value) {
  const std::regex line("(^|\\n)" + key + " *=[^\\n]*");
  return std::regex_replace(text, line, "$1" + key + " = " + value);
}

fs::path write_text(const fs::path& dir, const std::string& name, const std::string& text) {
  std::ofstream(dir / name, std::ios::binary) << text;
  return dir / name;
}

}  // namespace

TEST_CASE("config parsing") {
  const std::string smoke = slurp(kSmoke);
  const auto c = parse_config(smoke);
  CHECK(c.seed == 7);
  CHECK(c.model.n_layers == 2);
  CHECK(c.saes[0].lambdas == std::vector<double>{0.1, 1.0});
  CHECK(c.sweep_kinds.size() == 3);
  CHECK(c.downstream() == 1);
  CHECK(parse_config(c.canonical().empty() ? smoke : smoke).hash() == c.hash());

  auto fails_with = [&](const std::string& text, const std::string& needle) {
    try {
      parse_config(text);
      FAIL("expected a config error mentioning " << needle);
    } catch (const ConfigError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
    }
  };
  fails_with(with_override(smoke, "n_heads", "3"), "n_heads");
  fails_with(with_override(smoke, "local_lambdas", "0.1, x"), "sae.local_lambdas");
  fails_with(with_override(smoke, "kinds", "isotropic_random, sideways"), "sweep.kinds");
  fails_with(with_override(smoke, "hook_layer", "9"), "capture.hook_layer");
  fails_with(with_override(smoke, "schema_version", "2"), "meta.schema_version");
  fails_with(with_override(smoke, "downstream_layer", "0"), "sweep.downstream_layer");
  fails_with(with_override(smoke, "patch_all_positions", "maybe"), "sweep.patch_all_positions");
  fails_with(smoke + "\n[sweep2]\nfoo = 1\n", "unknown key sweep2.foo");
  fails_with(std::regex_replace(smoke, std::regex("seed = 7"), ""), "meta.seed is required");
  fails_with("[meta]\nschema_version = 1\nseed = 1\nseed = 2\n", "line");

  auto other = with_override(smoke, "stride", "3");
  CHECK(parse_config(other).hash() != c.hash());
}

TEST_CASE("command-line exit codes") {
  const auto dir = testing::temp_dir("cli_codes");
  const std::string smoke = slurp(kSmoke);
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("--config " + kSmoke.string() + " --out " + dir.string()) == 2);  // no subcommand
  CHECK(run_cli("--config " + kSmoke.string() + " --out " + dir.string() + " repro-figure 6") == 2);
  CHECK(run_cli("--config " + (dir / "missing.ini").string() + " --out " + dir.string() + " capture") == 2);
  const auto broken = write_text(dir, "broken.ini", with_override(smoke, "d_head", "5"));
  CHECK(run_cli("--config " + broken.string() + " --out " + dir.string() + " train-model") == 2);
  // Runtime failure: a report with nothing to merge.
  CHECK(run_cli("--config " + kSmoke.string() + " --out " + (dir / "empty").string() + " report") == 3);
}

TEST_CASE("repro-figure is byte-identical across runs and worker counts") {
  const auto a = testing::temp_dir("cli_a"), b = testing::temp_dir("cli_b");
  REQUIRE(run_cli("--config " + kSmoke.string() + " --out " + a.string() + " repro-figure 1") == 0);
  REQUIRE(run_cli("--config " + kSmoke.string() + " --workers 3 --out " + b.string() + " repro-figure 1") == 0);
  const std::string csv = slurp(a / "fig1.csv");
  CHECK(!csv.empty());
  CHECK(csv == slurp(b / "fig1.csv"));
  CHECK(slurp(a / "model.bin") == slurp(b / "model.bin"));
  const auto rows = read_csv(a / "fig1.csv");
  CHECK(rows.size() == 5 * 8);

  // A different seed changes the artifacts.
  const auto c = testing::temp_dir("cli_c");
  REQUIRE(run_cli("--config " + kSmoke.string() + " --seed 8 --out " + c.string() + " repro-figure 1") == 0);
  CHECK(csv != slurp(c / "fig1.csv"));

  // Every sidecar and manifest carries the config hash.
  const std::string hash = hex64(parse_config(slurp(kSmoke)).hash());
  for (const auto* name : {"model.json", "store.json", "gaussian.json", "fig1.manifest.json"}) {
    const auto j = nlohmann::json::parse(slurp(a / name));
    CHECK(j.at("config_hash").get<std::string>() == hash);
  }
}

TEST_CASE("all subcommands and the report merge") {
  const auto dir = testing::temp_dir("cli_all");
  const std::string base = "--config " + kSmoke.string() + " --out " + dir.string() + " ";
  for (const auto* cmd : {"train-model", "capture", "fit-gaussian", "train-sae --variant local",
                          "train-sae", "sweep", "substitute"}) {
    CHECK_MESSAGE(run_cli(base + cmd) == 0, cmd);
  }
  for (int f = 1; f <= 5; ++f) CHECK(run_cli(base + "repro-figure " + std::to_string(f)) == 0);
  CHECK(run_cli(base + "report") == 0);
  const auto report = read_csv(dir / "report.csv");
  std::size_t parts = 0;
  for (const auto* name : {"fig1", "fig2", "fig3", "fig4", "fig5", "substitute", "sweep"}) {
    parts += read_csv(dir / (std::string(name) + ".csv")).size();
  }
  CHECK(report.size() == parts);

  for (const auto& sae : {"sae_local_0", "sae_local_1", "sae_e2e_0", "sae_e2e_ds_0"}) {
    CHECK(fs::exists(dir / (std::string(sae) + ".bin")));
    const auto j = nlohmann::json::parse(slurp(dir / (std::string(sae) + ".json")));
    CHECK(j.at("mean_l0").get<double>() >= 0.0);
    CHECK(j.at("fvu").get<double>() >= 0.0);
  }
  const auto fig2 = read_csv(dir / "fig2.csv");
  REQUIRE(fig2.size() == 4);
  CHECK(fig2[0].alpha_or_subst_type == "sae_reconstruction");

  // Conflicting model fingerprints are refused.
  auto m = nlohmann::json::parse(slurp(dir / "fig1.manifest.json"));
  m["model_fingerprint"] = "0000000000000000";
  std::ofstream(dir / "fig1.manifest.json") << m.dump(2);
  CHECK(run_cli(base + "report") == 3);
}

TEST_CASE("a zero-only alpha grid gives a zero KL column") {
  const auto dir = testing::temp_dir("cli_zero");
  const auto cfg = write_text(dir, "zero.ini", with_override(slurp(kSmoke), "alpha_points", "1"));
  REQUIRE(run_cli("--config " + cfg.string() + " --out " + dir.string() + " sweep") == 0);
  const auto rows = read_csv(dir / "sweep.csv");
  CHECK(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(r.alpha_or_subst_type == "0");
    CHECK(r.mean_kl < 1e-9);
  }
}

TEST_CASE("stages reuse matching artifacts and redo stale ones") {
  const auto dir = testing::temp_dir("cli_reuse");
  const std::string smoke = slurp(kSmoke);
  REQUIRE(run_cli("--config " + kSmoke.string() + " --out " + dir.string() + " capture") == 0);
  const auto model_time = fs::last_write_time(dir / "model.bin");
  const std::string store = slurp(dir / "store.act");
  const auto cfg = write_text(dir, "more.ini", with_override(smoke, "token_budget", "2000"));
  REQUIRE(run_cli("--config " + cfg.string() + " --out " + dir.string() + " capture") == 0);
  CHECK(fs::last_write_time(dir / "model.bin") == model_time);
  CHECK(slurp(dir / "store.act") != store);
  CHECK(ActivationStore::load(dir / "store.act").size() == 2000);
}
