#include <gtest/gtest.h>
#include <sys/wait.h>

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sadi/data.hpp"
#include "sadi/util.hpp"
#include "sadi/version.hpp"

namespace sadi {
namespace {

namespace fs = std::filesystem;

fs::path test_root() { return fs::temp_directory_path() / "sadi_cli_test"; }

fs::path fresh_dir(const std::string& name) {
  fs::path p = test_root() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::vector<std::string>& args) {
  std::string cmd(SADI_CLI_PATH);
  for (const std::string& a : args) cmd += " \"" + a + "\"";
  cmd += " >/dev/null 2>>\"" + (test_root() / "stderr.log").string() + "\"";
  const int rc = std::system(cmd.c_str());
  if (rc == -1 || !WIFEXITED(rc)) throw std::runtime_error("run_cli: " + cmd);
  return WEXITSTATUS(rc);
}

nlohmann::json base_config() {
  return nlohmann::json{
      {"seed", 5},
      {"model",
       {{"L", 8}, {"K", 3}, {"n_fde", 1}, {"n_gta", 1}, {"d_model", 4}, {"heads", 2}, {"d_emb", 4}, {"T", 4}}},
      {"train",
       {{"epochs", 3},
        {"batch_size", 4},
        {"val_every", 2},
        {"val_samples", 2},
        {"val_pattern", {{"n_features", 1}, {"n_blocks", 1}, {"block_len", 2}}}}},
      {"data",
       {{"synth", {{"K", 3}, {"L", 8}, {"count", 14}, {"rho", 0.7}, {"noise_std", 0.5}}},
        {"n_train", 10},
        {"n_val", 2},
        {"n_test", 2}}},
      {"eval", {{"pattern", {{"n_features", 1}, {"n_blocks", 1}, {"block_len", 2}}}, {"trials", 3}, {"samples", 2}}}};
}

std::string write_config(const fs::path& dir, const nlohmann::json& j) {
  fs::create_directories(dir);
  const std::string p = (dir / "cfg.json").string();
  write_file(p, j.dump(2));
  return p;
}

// One trained checkpoint shared by the read-only tests.
struct Shared {
  std::string config;
  std::string checkpoint;
  std::string synth_csv;
};

const Shared& shared() {
  static Shared s = [] {
    Shared sh;
    fs::path dir = fresh_dir("shared");
    sh.config = write_config(dir, base_config());
    if (run_cli({"synth", "--config", sh.config, "--out", (dir / "s").string()}) != 0)
      throw std::runtime_error("shared synth failed");
    sh.synth_csv = (dir / "s" / "synth.csv").string();
    if (run_cli({"train", "--config", sh.config, "--out", (dir / "t").string()}) != 0)
      throw std::runtime_error("shared train failed");
    sh.checkpoint = (dir / "t" / "model").string();
    return sh;
  }();
  return s;
}

TEST(CliBasicsTest, VersionExitsCleanAndSubcommandIsRequired) {
  fresh_dir("basics");
  EXPECT_EQ(run_cli({"--version"}), 0);
  EXPECT_EQ(run_cli({}), 1);
  EXPECT_EQ(run_cli({"frobnicate"}), 1);
}

TEST(CliSynthTest, DeterministicAndSelfDescribing) {
  fs::path dir = fresh_dir("synth");
  const std::string cfg = write_config(dir, base_config());
  ASSERT_EQ(run_cli({"synth", "--config", cfg, "--out", (dir / "a").string()}), 0);
  ASSERT_EQ(run_cli({"synth", "--config", cfg, "--out", (dir / "b").string()}), 0);
  const std::string a = read_file((dir / "a" / "synth.csv").string());
  EXPECT_EQ(a, read_file((dir / "b" / "synth.csv").string()));

  nlohmann::json manifest = nlohmann::json::parse(read_file((dir / "a" / "synth_manifest.json").string()));
  EXPECT_EQ(manifest.at("command"), "synth");
  EXPECT_EQ(manifest.at("version"), kVersion);
  const std::string hash = manifest.at("config_hash").get<std::string>();
  EXPECT_EQ(a.substr(0, 9 + hash.size()), "# config " + hash);

  Dataset ds = load_csv((dir / "a" / "synth.csv").string());
  EXPECT_EQ(ds.series.values[0].rows, 14 * 8);
  EXPECT_EQ(ds.features(), 3);
}

TEST(CliTrainTest, CheckpointCarriesModelAndStats) {
  const Shared& sh = shared();
  nlohmann::json ck = nlohmann::json::parse(read_file(sh.checkpoint + ".json"));
  EXPECT_TRUE(ck.at("extra").contains("model"));
  EXPECT_TRUE(ck.at("extra").contains("stats"));
  EXPECT_TRUE(ck.at("extra").contains("train"));
  EXPECT_EQ(ck.at("extra").at("model").at("L"), 8);

  fs::path tdir = test_root() / "shared" / "t";
  nlohmann::json manifest = nlohmann::json::parse(read_file((tdir / "train_manifest.json").string()));
  EXPECT_EQ(manifest.at("command"), "train");
  EXPECT_EQ(manifest.at("schedule").at("T"), 4);
  EXPECT_EQ(manifest.at("windows").at("train"), 10);
  const std::string history = read_file((tdir / "history.csv").string());
  const std::string hash = manifest.at("config_hash").get<std::string>();
  EXPECT_EQ(history.substr(0, 9 + hash.size()), "# config " + hash);
  EXPECT_NE(history.find("epoch,train_loss,val_mse"), std::string::npos);
}

TEST(CliEvaluateTest, ByteIdenticalRerunsAndTrialRows) {
  const Shared& sh = shared();
  fs::path dir = fresh_dir("evaluate");
  for (const char* sub : {"a", "b"})
    ASSERT_EQ(run_cli({"evaluate", "--config", sh.config, "--out", (dir / sub).string(), "--checkpoint",
                       sh.checkpoint}),
              0);
  EXPECT_EQ(read_file((dir / "a" / "eval_report.json").string()),
            read_file((dir / "b" / "eval_report.json").string()));
  EXPECT_EQ(read_file((dir / "a" / "eval_trials.csv").string()),
            read_file((dir / "b" / "eval_trials.csv").string()));

  nlohmann::json rep = nlohmann::json::parse(read_file((dir / "a" / "eval_report.json").string()));
  EXPECT_EQ(rep.at("report").at("trials"), 3);
  EXPECT_EQ(rep.at("report").at("mse").size(), 3u);
  EXPECT_TRUE(rep.at("report").contains("mse_ci95"));

  const std::string trials = read_file((dir / "a" / "eval_trials.csv").string());
  EXPECT_NE(trials.find("trial,seed,mse,crps"), std::string::npos);
  EXPECT_EQ(std::count(trials.begin(), trials.end(), '\n'), 5);  // comment + header + 3 rows
}

TEST(CliEvaluateTest, WorkerCountChangesNothingButItsEcho) {
  const Shared& sh = shared();
  fs::path dir = fresh_dir("workers");
  ASSERT_EQ(run_cli({"evaluate", "--config", sh.config, "--out", (dir / "w1").string(), "--checkpoint",
                     sh.checkpoint, "--workers", "1"}),
            0);
  ASSERT_EQ(run_cli({"evaluate", "--config", sh.config, "--out", (dir / "w3").string(), "--checkpoint",
                     sh.checkpoint, "--workers", "3"}),
            0);
  nlohmann::json a = nlohmann::json::parse(read_file((dir / "w1" / "eval_report.json").string()));
  nlohmann::json b = nlohmann::json::parse(read_file((dir / "w3" / "eval_report.json").string()));
  EXPECT_EQ(a.at("report"), b.at("report"));
}

TEST(CliImputeTest, ObservedCellsPassThroughBitExact) {
  const Shared& sh = shared();
  fs::path dir = fresh_dir("impute");

  // 100 rows: 12 full windows plus a 4-row tail that must pass through.
  Dataset full = load_csv(sh.synth_csv);
  const Matrix& fv = full.series.values[0];
  const int rows = 100, K = fv.cols, L = 8;
  Matrix v(rows, K), m(rows, K);
  Rng rng(77);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < K; ++c) {
      m(r, c) = rng.uniform() < 0.15 ? 0.0 : 1.0;
      if (m(r, c) == 1.0) v(r, c) = fv(r, c);
    }
  const std::string input = (dir / "holes.csv").string();
  save_csv(input, v, m, full.feature_names);

  ASSERT_EQ(run_cli({"impute", "--config", sh.config, "--out", (dir / "out").string(), "--checkpoint",
                     sh.checkpoint, input}),
            0);

  Dataset imp = load_csv((dir / "out" / "imputed.csv").string());
  Dataset spr = load_csv((dir / "out" / "spread.csv").string());
  const Matrix& iv = imp.series.values[0];
  const Matrix& im = imp.series.observed[0];
  ASSERT_EQ(iv.rows, rows);
  const int covered = (rows / L) * L;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < K; ++c) {
      if (m(r, c) == 1.0) {
        EXPECT_EQ(std::bit_cast<uint64_t>(iv(r, c)), std::bit_cast<uint64_t>(v(r, c))) << r << "," << c;
        EXPECT_EQ(spr.series.observed[0](r, c), 0.0);
      } else if (r < covered) {
        EXPECT_EQ(im(r, c), 1.0);
        EXPECT_TRUE(std::isfinite(iv(r, c)));
        EXPECT_EQ(spr.series.observed[0](r, c), 1.0);
      } else {
        EXPECT_EQ(im(r, c), 0.0);  // tail hole stays a hole
      }
    }

  // Same command, same bytes.
  ASSERT_EQ(run_cli({"impute", "--config", sh.config, "--out", (dir / "out2").string(), "--checkpoint",
                     sh.checkpoint, input}),
            0);
  EXPECT_EQ(read_file((dir / "out" / "imputed.csv").string()),
            read_file((dir / "out2" / "imputed.csv").string()));
  EXPECT_EQ(read_file((dir / "out" / "spread.csv").string()),
            read_file((dir / "out2" / "spread.csv").string()));
}

TEST(CliAblateTest, EmitsExactlyFourVariantReports) {
  const Shared& sh = shared();
  fs::path dir = fresh_dir("ablate");
  ASSERT_EQ(run_cli({"ablate", "--config", sh.config, "--out", dir.string()}), 0);
  nlohmann::json summary = nlohmann::json::parse(read_file((dir / "ablate_summary.json").string()));
  const auto& variants = summary.at("variants");
  EXPECT_EQ(variants.size(), 4u);
  for (const char* name : {"full", "no_fde", "no_second_block", "no_weighted_comb"}) {
    ASSERT_TRUE(variants.contains(name)) << name;
    nlohmann::json rep =
        nlohmann::json::parse(read_file((dir / ("ablate_" + std::string(name) + "_report.json")).string()));
    EXPECT_EQ(rep.at("variant"), name);
    EXPECT_EQ(rep.at("config").at("model").at("ablation"), name);
    EXPECT_TRUE(rep.at("report").at("mse_mean").is_number());
  }
}

TEST(CliSeedFlagTest, OverrideChangesEvaluationStreams) {
  const Shared& sh = shared();
  fs::path dir = fresh_dir("seedflag");
  ASSERT_EQ(run_cli({"evaluate", "--config", sh.config, "--out", (dir / "a").string(), "--checkpoint",
                     sh.checkpoint, "--seed", "5"}),
            0);
  ASSERT_EQ(run_cli({"evaluate", "--config", sh.config, "--out", (dir / "b").string(), "--checkpoint",
                     sh.checkpoint, "--seed", "6"}),
            0);
  nlohmann::json a = nlohmann::json::parse(read_file((dir / "a" / "eval_report.json").string()));
  nlohmann::json b = nlohmann::json::parse(read_file((dir / "b" / "eval_report.json").string()));
  EXPECT_NE(a.at("report").at("trial_seeds"), b.at("report").at("trial_seeds"));
  EXPECT_EQ(a.at("config").at("seed"), 5);
  EXPECT_EQ(b.at("config").at("seed"), 6);
}

TEST(CliExitCodeTest, UsageDataAndNumericFailuresAreDistinct) {
  const Shared& sh = shared();
  fs::path dir = fresh_dir("exitcodes");

  // Usage problems exit 1.
  EXPECT_EQ(run_cli({"train", "--config", (dir / "missing.json").string(), "--out", dir.string()}), 1);
  EXPECT_EQ(run_cli({"evaluate", "--config", sh.config, "--out", dir.string()}), 1);
  nlohmann::json no_synth = base_config();
  no_synth.erase("data");
  EXPECT_EQ(run_cli({"synth", "--config", write_config(dir / "ns", no_synth), "--out", dir.string()}), 1);

  // Broken inputs exit 2.
  const std::string garbled = (dir / "garbled.json").string();
  write_file(garbled, "not json{");
  EXPECT_EQ(run_cli({"train", "--config", garbled, "--out", dir.string()}), 2);
  nlohmann::json typo = base_config();
  typo["trian"] = typo["train"];
  EXPECT_EQ(run_cli({"train", "--config", write_config(dir / "typo", typo), "--out", dir.string()}), 2);
  EXPECT_EQ(run_cli({"evaluate", "--config", sh.config, "--out", dir.string(), "--checkpoint",
                     (dir / "no_such_model").string()}),
            2);

  // A diverging run exits 3.
  nlohmann::json hot = base_config();
  hot["train"]["lr"] = 1e18;
  EXPECT_EQ(run_cli({"train", "--config", write_config(dir / "hot", hot), "--out", (dir / "hot").string()}), 3);
}

TEST(CliTrainTest, MixedStrategyColdStartNeedsWarmPhase) {
  fs::path dir = fresh_dir("mpb");
  nlohmann::json cold = base_config();
  cold["train"]["strategy"] = "mpb";
  EXPECT_EQ(run_cli({"train", "--config", write_config(dir / "cold", cold), "--out", (dir / "cold").string()}), 1);

  nlohmann::json warm = cold;
  warm["warm_epochs"] = 2;
  warm["train"]["epochs"] = 2;
  ASSERT_EQ(run_cli({"train", "--config", write_config(dir / "warm", warm), "--out", (dir / "warm").string()}), 0);
  EXPECT_TRUE(fs::exists(dir / "warm" / "history_warm.csv"));
  EXPECT_TRUE(fs::exists(dir / "warm" / "model.json"));

  // Fine-tuning an existing random-missing checkpoint needs no warm phase.
  const Shared& sh = shared();
  nlohmann::json ft = base_config();
  ft["train"]["strategy"] = "mpb";
  ft["train"]["epochs"] = 2;
  ASSERT_EQ(run_cli({"train", "--config", write_config(dir / "ft", ft), "--out", (dir / "ft").string(),
                     "--checkpoint", sh.checkpoint}),
            0);
  EXPECT_FALSE(fs::exists(dir / "ft" / "history_warm.csv"));
}

}  // namespace
}  // namespace sadi
