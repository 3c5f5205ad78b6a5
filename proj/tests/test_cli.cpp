#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hico/cli.hpp"

using namespace hico;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "hico");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "hico_cli_test";
    fs::remove_all(root_);
    fs::create_directories(root_);
    ASSERT_EQ(run({"gen-data", "--seed", "7", "--videos", "9", "--classes", "3", "--frames", "4", "--size", "32",
                   "--out", (root_ / "data").string()})
                  .code,
              0);
    ASSERT_EQ(run({"gen-data", "--preset", "downstream", "--seed", "8", "--videos", "12", "--classes", "3",
                   "--frames", "4", "--size", "32", "--name", "down", "--out", (root_ / "data").string()})
                  .code,
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string path(const std::string& rel) { return (root_ / rel).string(); }
  static std::string train() { return path("data/train.hico"); }
  static std::string down() { return path("data/down.hico"); }

  static Outcome pretrain(const std::string& out, std::vector<std::string> extra = {}, const std::string& epochs = "1") {
    std::vector<std::string> args{"pretrain", "--data", train(), "--epochs", epochs, "--batch", "3", "--out", path(out)};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  }

  static inline fs::path root_;
};

}  // namespace

TEST_F(CliTest, GenDataWritesDatasetManifestAndConfig) {
  EXPECT_TRUE(fs::exists(path("data/train.hico")));
  EXPECT_TRUE(fs::exists(path("data/train.manifest")));
  EXPECT_NE(slurp(path("data/train.config")).find("videos=9"), std::string::npos);
  const VideoDataset ds = read_dataset(train());
  EXPECT_EQ(ds.size(), 9u);
  EXPECT_EQ(ds.image_size, 32u);
}

TEST_F(CliTest, GenDataIsReproducible) {
  ASSERT_EQ(run({"gen-data", "--seed", "7", "--videos", "9", "--classes", "3", "--frames", "4", "--size", "32",
                 "--out", path("again")})
                .code,
            0);
  EXPECT_EQ(slurp(path("again/train.hico")), slurp(train()));
}

TEST_F(CliTest, GenDataRejectsTooFewVideos) {
  const Outcome r = run({"gen-data", "--videos", "2", "--classes", "3", "--out", path("few")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("num_videos < num_classes"), std::string::npos);
}

TEST_F(CliTest, PretrainWritesCheckpointLogAndConfig) {
  ASSERT_EQ(pretrain("p1").code, 0);
  EXPECT_TRUE(fs::exists(path("p1/model.hick")));
  EXPECT_EQ(slurp(path("p1/train.csv")).rfind(TrainLog::kHeader, 0), 0u);
  EXPECT_NE(slurp(path("p1/config.txt")).find("mode=hico"), std::string::npos);
  EXPECT_EQ(load_checkpoint(path("p1/model.hick")).meta.at("epoch"), "1");
}

TEST_F(CliTest, VanillaLogHasOnlyGlobalContrast) {
  ASSERT_EQ(pretrain("pv", {"--mode", "vanilla_cl"}).code, 0);
  std::istringstream csv(slurp(path("pv/train.csv")));
  std::string line;
  std::getline(csv, line);
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 12u);
    EXPECT_EQ(f[5], "0");   // soften
    EXPECT_EQ(f[6], "0");   // ll
    EXPECT_EQ(f[7], "0");   // mm
    EXPECT_NE(f[8], "0");   // gg
    EXPECT_EQ(f[9], "0");   // gl
    EXPECT_EQ(f[10], "0");  // gm
    ++rows;
  }
  EXPECT_GT(rows, 0u);
}

TEST_F(CliTest, DefaultWeightFlagsMatchFlaglessRun) {
  ASSERT_EQ(pretrain("pd1").code, 0);
  ASSERT_EQ(pretrain("pd2", {"--lambda", "0.5", "--alpha", "0.2", "--beta", "0.2", "--tau", "0.5"}).code, 0);
  EXPECT_EQ(slurp(path("pd1/model.hick")), slurp(path("pd2/model.hick")));
  EXPECT_EQ(slurp(path("pd1/train.csv")), slurp(path("pd2/train.csv")));
}

TEST_F(CliTest, ResumeMatchesUninterruptedRun) {
  ASSERT_EQ(pretrain("r2", {}, "2").code, 0);
  ASSERT_EQ(pretrain("r1").code, 0);
  ASSERT_EQ(pretrain("r1b", {"--resume", path("r1/model.hick")}, "2").code, 0);
  EXPECT_EQ(slurp(path("r2/model.hick")), slurp(path("r1b/model.hick")));
}

TEST_F(CliTest, ConfigFileAppliesAndFlagsWin) {
  {
    std::ofstream cfg(path("run.cfg"));
    cfg << "# comment\nepochs=1\nbatch=4\nlabel-rate=0.5\n";
  }
  ASSERT_EQ(run({"pretrain", "--config", path("run.cfg"), "--data", train(), "--batch", "3", "--out", path("pc")}).code,
            0);
  const std::string resolved = slurp(path("pc/config.txt"));
  EXPECT_NE(resolved.find("batch=3\n"), std::string::npos);
  EXPECT_NE(resolved.find("label-rate=0.5\n"), std::string::npos);
  EXPECT_NE(resolved.find("epochs=1\n"), std::string::npos);
}

TEST_F(CliTest, UnknownConfigKeyIsRejected) {
  {
    std::ofstream cfg(path("bad.cfg"));
    cfg << "epochs=1\nlearning_rate=3\n";
  }
  const Outcome r = run({"pretrain", "--config", path("bad.cfg"), "--data", train(), "--out", path("pb")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("learning_rate"), std::string::npos);
}

TEST_F(CliTest, BadValuesAreConfigErrors) {
  EXPECT_EQ(pretrain("e1", {"--mode", "supervised"}).code, 2);
  EXPECT_EQ(pretrain("e2", {"--epochs", "many"}).code, 2);
  EXPECT_EQ(pretrain("e3", {"--label-rate", "1.5"}).code, 2);
  EXPECT_EQ(pretrain("e4", {"--toggles", "gg,xx"}).code, 2);
  EXPECT_EQ(run({"pretrain", "--data", train()}).code, 2);  // no --out
  EXPECT_EQ(run({"pretrain", "--data", path("missing.hico"), "--out", path("e5")}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
}

TEST_F(CliTest, HelpListsFlagsWithDefaults) {
  const Outcome r = run({"finetune", "--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* flag : {"--ckpt", "--scope", "--folds", "--ft-lr", "--seed", "--config"})
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
  EXPECT_NE(r.out.find("[last_3_layers]"), std::string::npos);
}

TEST_F(CliTest, FinetuneRunsFoldsAndEvalReproducesFoldMetrics) {
  ASSERT_EQ(pretrain("ft_src").code, 0);
  const Outcome r = run({"finetune", "--ckpt", path("ft_src/model.hick"), "--data", down(), "--folds", "3",
                         "--ft-epochs", "2", "--out", path("ft")});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"metrics.csv", "summary.json", "config.txt", "fold0.hick", "fold2.hick"})
    EXPECT_TRUE(fs::exists(path("ft") + "/" + f)) << f;
  const auto summary = nlohmann::json::parse(slurp(path("ft/summary.json")));
  EXPECT_EQ(summary["folds"].size(), 3u);
  EXPECT_EQ(summary["source"], "hico");
  // 3 folds x (epochs + 1) rows plus the header.
  const std::string csv = slurp(path("ft/metrics.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 3);

  ASSERT_EQ(run({"eval", "--ckpt", path("ft/fold1.hick"), "--data", down(), "--folds", "3", "--fold", "1", "--out",
                 path("ev")})
                .code,
            0);
  const auto ev = nlohmann::json::parse(slurp(path("ev/summary.json")));
  EXPECT_DOUBLE_EQ(ev["accuracy"].get<double>(), summary["folds"][1]["accuracy"].get<double>());
}

TEST_F(CliTest, LinearProbeScopeAndScratchSource) {
  const Outcome r = run({"finetune", "--ckpt", "scratch", "--data", down(), "--folds", "3", "--fold", "0",
                         "--ft-epochs", "1", "--scope", "linear_probe", "--save-models", "0", "--out", path("lp")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("linear_probe"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("lp/fold0.hick")));
  EXPECT_NE(slurp(path("lp/metrics.csv")).find("\nfold0,scratch,none,0,1,1,"), std::string::npos);
}

TEST_F(CliTest, MissingCheckpointIsConfigError) {
  const Outcome r = run({"finetune", "--ckpt", path("nope.hick"), "--data", down(), "--out", path("m")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("not found"), std::string::npos);
}

TEST_F(CliTest, CorruptCheckpointIsFormatError) {
  ASSERT_EQ(pretrain("cc").code, 0);
  std::string bytes = slurp(path("cc/model.hick"));
  bytes[bytes.size() / 2] ^= 0x5A;
  {
    std::ofstream f(path("cc/bad.hick"), std::ios::binary);
    f << bytes;
  }
  EXPECT_EQ(run({"finetune", "--ckpt", path("cc/bad.hick"), "--data", down(), "--out", path("cc2")}).code, 3);
  {
    std::ofstream f(path("cc/notdata.hico"), std::ios::binary);
    f << "garbage";
  }
  EXPECT_EQ(run({"pretrain", "--data", path("cc/notdata.hico"), "--out", path("cc3")}).code, 3);
}

TEST_F(CliTest, GradcheckTargets) {
  const Outcome p = run({"gradcheck", "--target", "primitives", "--out", path("gc")});
  EXPECT_EQ(p.code, 0) << p.out;
  EXPECT_NE(p.out.find("PASS conv2d 3x3 stride 2"), std::string::npos);
  EXPECT_EQ(p.out.find("FAIL"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("gc/gradcheck.csv")));
  EXPECT_EQ(run({"gradcheck", "--target", "losses"}).code, 0);
  EXPECT_EQ(run({"gradcheck", "--target", "everything"}).code, 2);
}

TEST_F(CliTest, CompareAblateAndSweepWriteTables) {
  const std::vector<std::string> common{"--pretrain-data", train(), "--data",    down(), "--epochs", "1",
                                        "--batch",         "3",     "--folds",   "3",    "--ft-epochs", "1",
                                        "--seeds",         "1,2"};
  auto with = [&](std::vector<std::string> head, const std::string& out) {
    head.insert(head.end(), common.begin(), common.end());
    head.push_back("--out");
    head.push_back(path(out));
    return run(head);
  };

  Outcome c = with({"compare", "--modes", "scratch,vanilla_cl,hico"}, "cmp");
  ASSERT_EQ(c.code, 0) << c.err;
  auto summary = nlohmann::json::parse(slurp(path("cmp/summary.json")));
  EXPECT_EQ(summary.size(), 3u);
  EXPECT_EQ(summary["hico"]["runs"], 2);
  EXPECT_EQ(summary["scratch"]["median_curve"].size(), 2u);

  Outcome a = with({"ablate", "--toggles", "gg;gg,mm;gg,mm,ll"}, "abl");
  ASSERT_EQ(a.code, 0) << a.err;
  summary = nlohmann::json::parse(slurp(path("abl/summary.json")));
  EXPECT_EQ(summary.size(), 3u);
  EXPECT_TRUE(summary.contains("mm,gg"));

  Outcome s = with({"sweep", "--axis", "label_rate", "--values", "0,1"}, "swp");
  ASSERT_EQ(s.code, 0) << s.err;
  summary = nlohmann::json::parse(slurp(path("swp/summary.json")));
  EXPECT_TRUE(summary.contains("label_rate=0"));
  EXPECT_TRUE(summary.contains("label_rate=1"));
  EXPECT_NE(slurp(path("swp/config.txt")).find("axis=label_rate"), std::string::npos);

  EXPECT_EQ(with({"sweep", "--axis", "depth", "--values", "1"}, "bad").code, 2);
}

TEST_F(CliTest, CompareIsDeterministic) {
  const std::vector<std::string> args{"compare", "--modes", "hico", "--pretrain-data", train(), "--data", down(),
                                      "--epochs", "1", "--batch", "3", "--folds", "3", "--ft-epochs", "2",
                                      "--seeds", "3"};
  auto a = args, b = args;
  a.insert(a.end(), {"--out", path("det1")});
  b.insert(b.end(), {"--out", path("det2")});
  ASSERT_EQ(run(a).code, 0);
  ASSERT_EQ(run(b).code, 0);
  EXPECT_EQ(slurp(path("det1/curves.csv")), slurp(path("det2/curves.csv")));
}
