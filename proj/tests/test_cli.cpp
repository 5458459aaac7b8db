#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "scns/cli.hpp"

using namespace scns;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    root_ = fs::temp_directory_path() / (std::string("scns_cli_") + info->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string write_config(const std::string& name, const std::string& text) {
    const auto p = root_ / name;
    std::ofstream(p) << text;
    return p.string();
  }

  int run(std::vector<std::string> args) {
    out_.str("");
    err_.str("");
    return run_cli(args, out_, err_);
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path root_;
  std::ostringstream out_, err_;
};

const char* kSmall =
    "seed = 4\n"
    "[dataset]\nclasses = 5\nper_class = 50\ndim = 8\neval_per_class = 20\n"
    "[sampler]\nvariant = class\nk = 2\n"
    "[model]\nhidden = 16\nteacher_hidden = 24\nteacher_epochs = 3\n"
    "[optimizer]\nepochs = 3\nbatch_size = 32\n";

}  // namespace

TEST_F(CliTest, UnknownCommandPrintsUsageAndExits2) {
  EXPECT_EQ(run({"bogus"}), 2);
  EXPECT_NE(err_.str().find("usage: scns"), std::string::npos);
  EXPECT_EQ(run({}), 2);
}

TEST_F(CliTest, BadOptionExits2) {
  EXPECT_EQ(run({"train", "--nope"}), 2);
  EXPECT_EQ(run({"train", "--M", "3"}), 2);  // theory-only flag
}

TEST_F(CliTest, TheoryCcpRow) {
  const std::string out = (root_ / "o").string();
  ASSERT_EQ(run({"theory-ccp", "--M", "10", "--k", "3", "--trials", "100000", "--out", out}), 0) << err_.str();
  const std::string csv = slurp(root_ / "o" / "theory-ccp-0" / "metrics.csv");
  std::istringstream lines(csv);
  std::string header, row;
  std::getline(lines, header);
  std::getline(lines, row);
  EXPECT_EQ(header, "estimator,M,k_or_b,analytic,mc_mean,mc_ci95,trials");
  EXPECT_EQ(row.rfind("uniform_draws,10,3,18.3333333,", 0), 0u) << row;
  std::vector<std::string> cells;
  std::stringstream rs(row);
  for (std::string c; std::getline(rs, c, ',');) cells.push_back(c);
  ASSERT_EQ(cells.size(), 7u);
  const double mc = std::stod(cells[4]), ci = std::stod(cells[5]);
  EXPECT_LE(mc - ci, 55.0 / 3.0);
  EXPECT_GE(mc + ci, 55.0 / 3.0);
  EXPECT_EQ(cells[6], "100000");
}

TEST_F(CliTest, TheoryCcpBatchedAndUnequal) {
  const std::string out = (root_ / "o").string();
  ASSERT_EQ(run({"theory-ccp", "--M", "4", "--k", "4", "--b", "2", "--probs", "0.5,0.25,0.25", "--trials",
                 "20000", "--out", out}),
            0)
      << err_.str();
  const std::string csv = slurp(root_ / "o" / "theory-ccp-0" / "metrics.csv");
  EXPECT_NE(csv.find("\nbatched,4,2,"), std::string::npos) << csv;
  // inclusion-exclusion: (2 + 4 + 4) - (4/3 + 4/3 + 2) + 1 = 19/3
  EXPECT_NE(csv.find("\nunequal,3,3,6.33333333,"), std::string::npos) << csv;
}

TEST_F(CliTest, SampleAuditPasses) {
  const auto cfg = write_config("c.ini", kSmall);
  ASSERT_EQ(run({"sample-audit", "--config", cfg, "--out", (root_ / "o").string()}), 0) << err_.str();
  EXPECT_NE(out_.str().find("chi-square PASS"), std::string::npos) << out_.str();
  EXPECT_TRUE(fs::exists(root_ / "o" / "sample-audit-4" / "distribution.csv"));
}

TEST_F(CliTest, ConfigErrorsExit1WithKeyAndLine) {
  const auto cfg = write_config("bad.ini", "seed = 1\n[loss]\nalpha = 1.5\n");
  EXPECT_EQ(run({"train", "--config", cfg}), 1);
  EXPECT_NE(err_.str().find("[loss].alpha"), std::string::npos) << err_.str();
  EXPECT_NE(err_.str().find("line 3"), std::string::npos) << err_.str();
  const auto noseed = write_config("noseed.ini", "[loss]\nalpha = 0.5\n");
  EXPECT_EQ(run({"train", "--config", noseed}), 1);
  EXPECT_NE(err_.str().find("seed missing"), std::string::npos);
}

TEST_F(CliTest, TrainLayoutAndSeedOverride) {
  const auto cfg = write_config("c.ini", kSmall);
  ASSERT_EQ(run({"train", "--config", cfg, "--seed", "9", "--out", (root_ / "o").string()}), 0) << err_.str();
  const auto dir = root_ / "o" / "train-9";
  for (const char* f : {"config.resolved", "metrics.csv", "summary.json", "model.ckpt"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_EQ(slurp(dir / "config.resolved").rfind("seed = 9\n", 0), 0u);
  const std::string printed = out_.str();
  EXPECT_EQ(std::count(printed.begin(), printed.end(), '\n'), 1);
  const auto j = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(j["epochs"], 3);
}

TEST_F(CliTest, OutputsAreByteReproducible) {
  std::string cfg_text = kSmall;
  cfg_text += "[loss]\nalpha = 0.9\ngamma_plus = 0.1\nbeta = 0.5\n";
  const auto cfg = write_config("c.ini", cfg_text);
  ASSERT_EQ(run({"kd", "--config", cfg, "--out", (root_ / "a").string()}), 0) << err_.str();
  ASSERT_EQ(run({"kd", "--config", cfg, "--out", (root_ / "b").string()}), 0) << err_.str();
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(root_ / "a" / "kd-4")) {
    const auto other = root_ / "b" / "kd-4" / e.path().filename();
    EXPECT_EQ(slurp(e.path()), slurp(other)) << e.path().filename();
    ++files;
  }
  EXPECT_EQ(files, 5u);  // config, metrics, summary, model, teacher
}

TEST_F(CliTest, KdReusesTeacherCheckpoint) {
  const auto cfg = write_config("c.ini", kSmall);
  ASSERT_EQ(run({"kd", "--config", cfg, "--out", (root_ / "a").string()}), 0) << err_.str();
  std::string with_ckpt = kSmall;
  const auto ckpt = (root_ / "a" / "kd-4" / "teacher.ckpt").string();
  with_ckpt.replace(with_ckpt.find("teacher_epochs = 3\n"), 19, "teacher_epochs = 3\nteacher_checkpoint = " + ckpt + "\n");
  const auto cfg2 = write_config("c2.ini", with_ckpt);
  ASSERT_EQ(run({"kd", "--config", cfg2, "--out", (root_ / "b").string()}), 0) << err_.str();
  EXPECT_EQ(slurp(root_ / "a" / "kd-4" / "metrics.csv"), slurp(root_ / "b" / "kd-4" / "metrics.csv"));
  EXPECT_FALSE(fs::exists(root_ / "b" / "kd-4" / "teacher.ckpt"));
}

TEST_F(CliTest, TheoryMiAndConvergenceRun) {
  std::string text = kSmall;
  text += "[convergence]\nseeds = 2\nthreshold = 0.5\n[loss]\nalpha = 0.5\n";
  const auto cfg = write_config("c.ini", text);
  ASSERT_EQ(run({"theory-mi", "--config", cfg, "--out", (root_ / "o").string()}), 0) << err_.str();
  EXPECT_NE(out_.str().find("bound uniform"), std::string::npos);
  ASSERT_EQ(run({"convergence", "--config", cfg, "--threads", "2", "--out", (root_ / "o").string()}), 0)
      << err_.str();
  const std::string csv = slurp(root_ / "o" / "convergence-4" / "metrics.csv");
  EXPECT_EQ(csv.rfind("variant,seed,epochs_to_threshold\n", 0), 0u);
  EXPECT_TRUE(fs::exists(root_ / "o" / "convergence-4" / "summary.csv"));
}

TEST_F(CliTest, MissingEmbeddingTokensAreListed) {
  const auto vectors = write_config("vec.txt", "2 2\ncat 1 0\ndog 0 1\n");
  std::string text = kSmall;
  text.replace(text.find("[sampler]"), 9,
               "label_embeddings = " + vectors + "\nclass_names = cat|dog|pickup truck|cat|dog\n[sampler]");
  const auto cfg = write_config("c.ini", text);
  EXPECT_EQ(run({"sample-audit", "--config", cfg, "--out", (root_ / "o").string()}), 1);
  EXPECT_NE(err_.str().find("pickup, truck"), std::string::npos) << err_.str();
}
