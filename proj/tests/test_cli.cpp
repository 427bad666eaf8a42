#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "halomil/cli.hpp"
#include "halomil/semantics.hpp"
#include "halomil/synthgen.hpp"
#include "test_util.hpp"

namespace halomil {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// CSV with its last column removed (used for the wall-clock seconds column).
std::string drop_last_column(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = test::scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
  }
  std::string at(const std::string& name) const { return (dir / name).string(); }
  void synth(const std::string& name, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"synth", "--sparse", "--T", "10", "--s", "1", "--n", "120",
                                  "--d", "16", "--D", "4", "--seed", "7", "-o", at(name)};
    args.insert(args.end(), extra.begin(), extra.end());
    const auto r = cli(args);
    ASSERT_EQ(r.code, 0) << r.err;
  }
  fs::path dir;
};

TEST_F(Cli, SynthWritesDataAndCertificate) {
  const auto r = cli({"synth", "--sparse", "--T", "10", "--s", "1", "--n", "256", "--seed", "7",
                      "-o", at("bags.hsb")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(json::parse(r.out)["verify_ok"].get<bool>());
  EXPECT_TRUE(fs::exists(at("bags.hsb.cert.json")));
  EXPECT_TRUE(fs::exists(at("bags.hsb.planted.ckpt")));
  EXPECT_EQ(read_hsb(at("bags.hsb")).size(), 256u);
  const auto manifest = json::parse(slurp(at("bags.hsb.manifest.json")));
  EXPECT_EQ(manifest["status"], "ok");
  EXPECT_EQ(manifest["subcommand"], "synth");
  EXPECT_EQ(manifest["seed"], 7);
  EXPECT_FALSE(manifest["finished_at"].is_null());
}

TEST_F(Cli, SynthIsDeterministic) {
  synth("a.hsb");
  synth("b.hsb");
  EXPECT_EQ(slurp(at("a.hsb")), slurp(at("b.hsb")));
  EXPECT_EQ(slurp(at("a.hsb.cert.json")), slurp(at("b.hsb.cert.json")));
  EXPECT_EQ(slurp(at("a.hsb.planted.ckpt")), slurp(at("b.hsb.planted.ckpt")));
}

TEST_F(Cli, UsageErrors) {
  auto r = cli({"synth", "--sparse"});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("E:", 0), 0u);
  r = cli({});
  EXPECT_EQ(r.code, 2);
  r = cli({"synth", "--sparse", "--T", "abc", "-o", at("x.hsb")});
  EXPECT_EQ(r.code, 2);
  r = cli({"synth", "-o", at("x.hsb")});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("E:", 0), 0u);
}

TEST_F(Cli, TrainWritesCheckpointAndLogDeterministically) {
  synth("bags.hsb");
  const std::vector<std::string> base{"train", "--arch", "maxpool", "--data", at("bags.hsb"),
                                      "--epochs", "3", "--D", "8", "--seed", "1", "-o"};
  auto a = base;
  a.push_back(at("a.ckpt"));
  auto b = base;
  b.push_back(at("b.ckpt"));
  const auto ra = cli(a);
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(cli(b).code, 0);
  EXPECT_EQ(slurp(at("a.ckpt")), slurp(at("b.ckpt")));
  const auto log = slurp(at("a.ckpt.log.csv"));
  EXPECT_EQ(log.substr(0, log.find('\n')), "epoch,loss,val_auroc,margin,seconds");
  EXPECT_EQ(drop_last_column(log), drop_last_column(slurp(at("b.ckpt.log.csv"))));
  json header;
  read_checkpoint(at("a.ckpt"), &header);
  EXPECT_EQ(header["extra"]["config"]["epochs"], 3);
  EXPECT_EQ(header["extra"]["config"]["learning_rate"], 2e-4);
}

TEST_F(Cli, ConfigFileAndFlagsCombine) {
  synth("bags.hsb");
  std::ofstream(at("cfg.txt")) << "epochs=2\nlr=0.05\noptimizer=sgd\nD=4\n";
  const auto r = cli({"train", "--arch", "meanpool", "--data", at("bags.hsb"), "--config",
                      at("cfg.txt"), "--lr", "0.01", "-o", at("m.ckpt")});
  ASSERT_EQ(r.code, 0) << r.err;
  json header;
  read_checkpoint(at("m.ckpt"), &header);
  EXPECT_EQ(header["extra"]["config"]["epochs"], 2);
  EXPECT_EQ(header["extra"]["config"]["learning_rate"], 0.01);
  EXPECT_EQ(header["extra"]["config"]["optimizer"], "sgd");
}

TEST_F(Cli, HamiScalingNeedsSemanticProbability) {
  synth("plain.hsb");
  auto r = cli({"train", "--arch", "hami", "--lambda", "1", "--epochs", "1", "--D", "8", "--data",
                at("plain.hsb"), "-o", at("h.ckpt")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("p_sem"), std::string::npos);
  EXPECT_EQ(json::parse(slurp(at("h.ckpt.manifest.json")))["status"], "failed");

  synth("sp.hsb", {"--p-sem"});
  r = cli({"train", "--arch", "hami", "--lambda", "1", "--epochs", "2", "--D", "8", "--data",
           at("sp.hsb"), "-o", at("h.ckpt")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(std::get<HamiParams>(read_checkpoint(at("h.ckpt")).params).lambda, 1.0);

  r = cli({"train", "--arch", "transformer", "--data", at("sp.hsb"), "-o", at("x.ckpt")});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("transformer"), std::string::npos);
}

TEST_F(Cli, EvalReportAndScores) {
  synth("bags.hsb");
  ASSERT_EQ(cli({"train", "--arch", "maxpool", "--data", at("bags.hsb"), "--epochs", "2", "--D",
                 "8", "-o", at("m.ckpt")}).code, 0);
  const auto r = cli({"eval", "--ckpt", at("m.ckpt"), "--data", at("bags.hsb"), "--split", "test",
                      "--scores", at("s.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = json::parse(r.out);
  for (const char* key : {"margins", "gamma", "inv_gamma", "class_ratio", "condition_holds",
                          "eq1_holds", "eq2_holds", "eq3_holds", "cbar_int", "bounds", "auroc",
                          "throughput"}) {
    EXPECT_TRUE(rep.contains(key)) << key;
  }
  const double a = rep["auroc"];
  EXPECT_GE(a, 0.0);
  EXPECT_LE(a, 1.0);
  const auto again = cli({"eval", "--ckpt", at("m.ckpt"), "--data", at("bags.hsb"), "--split",
                          "test", "-o", at("e.json"), "--scores", at("s2.csv")});
  EXPECT_EQ(slurp(at("e.json")), r.out);
  EXPECT_EQ(slurp(at("s.csv")), slurp(at("s2.csv")));
}

TEST_F(Cli, AnalyzeTheoremThreeOnPlantedParameters) {
  synth("bags.hsb", {"--positive-fraction", "1"});
  const std::vector<std::string> args{"analyze", "--theorem", "3", "--data", at("bags.hsb"),
                                      "--ckpt", at("bags.hsb.planted.ckpt"), "--sweep-bags", "40"};
  const auto r = cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto c = json::parse(r.out)["checks"]["theorem3"];
  EXPECT_TRUE(c["assumption_ok"].get<bool>());
  EXPECT_TRUE(c["bound_holds_all"].get<bool>());
  EXPECT_TRUE(c["slope_ok"].get<bool>());
  EXPECT_EQ(cli(args).out, r.out);
}

TEST_F(Cli, AnalyzeBoundCalculators) {
  const auto r = cli({"analyze", "--rademacher", "--R", "1", "--B1", "1", "--B2", "1",
                      "--feature-dim", "4", "--input-dim", "8", "--tokens", "2", "--samples", "16",
                      "--beta", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto b = json::parse(r.out)["bounds"];
  EXPECT_NEAR(b["feat"].get<double>(), 2.0, 1e-12);
  EXPECT_NEAR(b["base"].get<double>(), 2.0 * std::sqrt(2.0), 1e-12);
  EXPECT_EQ(b["eta_max"].get<double>(), 1.0);
  EXPECT_EQ(cli({"analyze"}).code, 1);
}

TEST_F(Cli, AnalyzeTheoremOneAndTwo) {
  synth("sp.hsb", {"--p-sem"});
  ASSERT_EQ(cli({"train", "--arch", "hami", "--lambda", "1", "--epochs", "2", "--D", "8", "--data",
                 at("sp.hsb"), "-o", at("h.ckpt")}).code, 0);
  auto r = cli({"analyze", "--theorem", "1", "--data", at("sp.hsb"), "--ckpt", at("h.ckpt"),
                "--hist", at("hist")});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rep = json::parse(r.out);
  EXPECT_TRUE(rep["gamma"].is_number());
  EXPECT_NEAR(rep["inv_gamma"].get<double>() * rep["gamma"].get<double>(), 1.0, 1e-12);
  EXPECT_TRUE(rep["cbar_int"].is_object());
  const auto& t1 = rep["checks"]["theorem1"];
  EXPECT_LE(t1["identity_error_int"].get<double>(), 1e-3);
  EXPECT_TRUE(fs::exists(at("hist.cbar_int.csv")));

  r = cli({"analyze", "--theorem", "2", "--data", at("sp.hsb"), "--ckpt", at("h.ckpt")});
  ASSERT_EQ(r.code, 0) << r.err;
  rep = json::parse(r.out);
  EXPECT_TRUE(rep["checks"]["theorem2"]["expected_margin_increases"].get<bool>());
}

TEST_F(Cli, ClusterAttachesSemanticProbability) {
  synth("bags.hsb");
  const auto store = read_hsb(at("bags.hsb"));
  RelationRecord rec;
  rec.question_id = "q1";
  rec.samples = {{store[0].id, 0.0}, {store[1].id, std::log(3.0)}};
  rec.relations = {{Relation::Entailment, Relation::Contradiction},
                   {Relation::Contradiction, Relation::Entailment}};
  write_relation_file({rec}, at("rel.json"));
  const auto r = cli({"cluster", "--relations", at("rel.json"), "--data", at("bags.hsb"), "-o",
                      at("bags_sp.hsb")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto out = read_hsb(at("bags_sp.hsb"));
  EXPECT_NEAR(*out[0].p_sem, 0.25, 1e-7);
  EXPECT_NEAR(*out[1].p_sem, 0.75, 1e-7);
  EXPECT_FALSE(out[2].p_sem.has_value());
}

TEST_F(Cli, ConvertRoundTrip) {
  synth("bags.hsb", {"--p-sem"});
  ASSERT_EQ(cli({"convert", "-i", at("bags.hsb"), "-o", at("bags.csv")}).code, 0);
  ASSERT_EQ(cli({"convert", "-i", at("bags.csv"), "-o", at("back.hsb")}).code, 0);
  EXPECT_EQ(slurp(at("bags.hsb")), slurp(at("back.hsb")));
  std::ofstream(at("bad.csv")) << "bag_id,label,split,p_sem,token,h0\n1,5,train,,0,1\n";
  const auto r = cli({"convert", "-i", at("bad.csv"), "-o", at("bad.hsb")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("line 2"), std::string::npos);
}

TEST_F(Cli, BenchReportsThroughput) {
  synth("bags.hsb");
  ASSERT_EQ(cli({"train", "--arch", "maxpool", "--data", at("bags.hsb"), "--epochs", "1", "--D",
                 "4", "-o", at("m.ckpt")}).code, 0);
  const auto r = cli({"bench", "--ckpt", at("m.ckpt"), "--data", at("bags.hsb"), "--threads", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto t = json::parse(r.out)["throughput"];
  EXPECT_GT(t["single_thread"].get<double>(), 0.0);
  EXPECT_EQ(t["threads"], 2);
}

TEST_F(Cli, ThreadEnvironmentOverride) {
  synth("bags.hsb");
  ASSERT_EQ(cli({"train", "--arch", "maxpool", "--data", at("bags.hsb"), "--epochs", "1", "--D",
                 "4", "-o", at("m.ckpt")}).code, 0);
  setenv("HALOMIL_THREADS", "3", 1);
  auto r = cli({"bench", "--ckpt", at("m.ckpt"), "--data", at("bags.hsb"), "--threads", "1"});
  EXPECT_EQ(json::parse(r.out)["throughput"]["threads"], 3);
  setenv("HALOMIL_THREADS", "many", 1);
  r = cli({"bench", "--ckpt", at("m.ckpt"), "--data", at("bags.hsb")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("HALOMIL_THREADS"), std::string::npos);
  unsetenv("HALOMIL_THREADS");
}

}  // namespace
}  // namespace halomil
