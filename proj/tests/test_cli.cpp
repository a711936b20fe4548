#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "gate/cli.hpp"
#include "support.hpp"

using namespace gate;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "gate");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A small synthetic corpus and its graph in a temp directory.
class CliFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = gate::testing::temp_dir("cli");
    auto r = run({"--seed", "7", "synth", "--kb", path("kb.json"), "--corpus", path("corpus.jsonl"), "--dialogues", "12",
                  "--topics", "2", "--titles", "2", "--sentences", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
    r = run({"unify", "--kb", path("kb.json"), "--out", path("graph.json")});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  void TearDown() override { std::filesystem::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  std::vector<std::string> train_args(const std::string& out) const {
    return {"train", "--graph", path("graph.json"), "--corpus", path("corpus.jsonl"), "--out", path(out),
            "--d-in", "16", "--d-hidden", "8", "--heads", "2", "--epochs", "2", "--rollouts", "2"};
  }

  std::filesystem::path dir;
};

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  auto help = run({"--help"});
  EXPECT_EQ(help.code, 0);
  EXPECT_NE(help.out.find("train"), std::string::npos);
  EXPECT_EQ(run({}).code, 1);
  auto missing = run({"train", "--out", "m.json"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("--corpus is required"), std::string::npos);
  EXPECT_NE(missing.err.find("Usage: train"), std::string::npos);
  auto bad = run({"train", "--corpus", "c.jsonl", "--out", "m.json", "--bogus"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("--bogus"), std::string::npos) << bad.err;
  EXPECT_EQ(run({"--precision", "f16", "render-prompt", "--mode", "internal_only"}).code, 1);
  EXPECT_EQ(run({"render-prompt", "--mode", "loud"}).code, 1);
}

TEST(Cli, DataErrorsExitTwo) {
  auto missing = run({"unify", "--kb", "/nonexistent/kb.json"});
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("/nonexistent/kb.json"), std::string::npos);
  EXPECT_EQ(run({"render-prompt"}).code, 2);
}

TEST(Cli, RenderPromptFromInputFileMatchesGolden) {
  auto r = run({"render-prompt", "--input", std::string(GATE_GOLDEN_DIR) + "/prompt_input.json"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, slurp(std::string(GATE_GOLDEN_DIR) + "/with_knowledge.txt"));
  auto io = run({"render-prompt", "--input", std::string(GATE_GOLDEN_DIR) + "/prompt_input.json", "--mode",
                 "internal_only"});
  EXPECT_EQ(io.out, slurp(std::string(GATE_GOLDEN_DIR) + "/internal_only.txt"));
}

TEST_F(CliFixture, SynthIsSeededAndUnifyValidates) {
  auto again = run({"--seed", "7", "synth", "--kb", path("kb2.json"), "--corpus", path("corpus2.jsonl"), "--dialogues",
                    "12", "--topics", "2", "--titles", "2", "--sentences", "3"});
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(slurp(dir / "kb.json"), slurp(dir / "kb2.json"));
  EXPECT_EQ(slurp(dir / "corpus.jsonl"), slurp(dir / "corpus2.jsonl"));
  auto g = graph_from_json(read_json_file(path("graph.json")));
  EXPECT_EQ(g.process_nodes().size(), 6u);
  EXPECT_EQ(g.knowledge_nodes().size(), 12u);
  std::ofstream(path("dup.tsv")) << "a\tr\tb\na\tr\tb\n";
  auto dup = run({"unify", "--kb", path("dup.tsv")});
  EXPECT_EQ(dup.code, 2);
  EXPECT_NE(dup.err.find("line 2"), std::string::npos) << dup.err;
}

TEST_F(CliFixture, TrainIsReproducibleAndTogglesMatter) {
  auto a = run(train_args("a.json"));
  ASSERT_EQ(a.code, 0) << a.err;
  auto b = run(train_args("b.json"));
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  auto args = train_args("c.json");
  args.push_back("--no-walk-loss");
  ASSERT_EQ(run(args).code, 0);
  EXPECT_NE(slurp(dir / "a.json"), slurp(dir / "c.json"));
  auto seeded = train_args("d.json");
  seeded.insert(seeded.begin(), {"--seed", "9"});
  ASSERT_EQ(run(seeded).code, 0);
  EXPECT_NE(slurp(dir / "a.json"), slurp(dir / "d.json"));
  auto all_off = train_args("e.json");
  all_off.insert(all_off.end(), {"--no-walk-loss", "--no-node-loss", "--no-knowledge-loss"});
  EXPECT_EQ(run(all_off).code, 2);
}

TEST_F(CliFixture, ConfigFileAndFlagOverride) {
  std::ofstream(path("gate.toml")) << "seed = 9\n\n[train]\nepochs = 1\nrollouts = 2\n";
  // train arguments minus --epochs, so the file decides unless overridden
  auto args = [&](const std::string& out, const std::string& log) {
    auto a = train_args(out);
    auto it = std::find(a.begin(), a.end(), "--epochs");
    a.erase(it, it + 2);
    a.insert(a.end(), {"--log", path(log)});
    return a;
  };
  auto lines = [&](const std::string& log) {
    auto text = slurp(dir / log);
    return std::count(text.begin(), text.end(), '\n');
  };

  auto a = args("cfg1.json", "cfg1.log");
  a.insert(a.begin(), {"--config", path("gate.toml")});
  auto r = run(a);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines("cfg1.log"), 1);

  a = args("cfg2.json", "cfg2.log");
  a.insert(a.begin(), {"--config", path("gate.toml")});
  a.insert(a.end(), {"--epochs", "2"});
  r = run(a);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines("cfg2.log"), 2);

  auto seeded = train_args("seed9.json");
  seeded.insert(seeded.begin(), {"--seed", "9"});
  ASSERT_EQ(run(seeded).code, 0);
  EXPECT_EQ(slurp(dir / "cfg2.json"), slurp(dir / "seed9.json"));

  ::setenv("GATE_CONFIG", path("gate.toml").c_str(), 1);
  r = run(args("env.json", "env.log"));
  ::unsetenv("GATE_CONFIG");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines("env.log"), 1);
  EXPECT_EQ(slurp(dir / "env.json"), slurp(dir / "cfg1.json"));
}

TEST_F(CliFixture, EvalAndSelect) {
  ASSERT_EQ(run(train_args("m.json")).code, 0);
  auto ev = run({"eval", "--graph", path("graph.json"), "--corpus", path("corpus.jsonl"), "--ckpt", path("m.json"),
                 "--seeds", "1", "2", "--k", "1", "3", "--ranks", path("ranks.csv")});
  ASSERT_EQ(ev.code, 0) << ev.err;
  auto rep = eval_report_from_json(nlohmann::json::parse(ev.out));
  EXPECT_EQ(rep.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(rep.methods.size(), 3u);
  EXPECT_EQ(rep.methods.at("selector").std.at(1), 0.0);
  auto csv = slurp(dir / "ranks.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 2 * 12);

  auto fixed = run({"eval", "--graph", path("graph.json"), "--corpus", path("corpus.jsonl"), "--ckpt", path("m.json"),
                    "--fixed-pool", "2"});
  ASSERT_EQ(fixed.code, 0) << fixed.err;
  EXPECT_DOUBLE_EQ(eval_report_from_json(nlohmann::json::parse(fixed.out)).methods.at("selector").mean_pool_size, 2.0);

  auto sel = run({"select", "--graph", path("graph.json"), "--ckpt", path("m.json"), "--utterance", "tell me more",
                  "--history", "hello there"});
  ASSERT_EQ(sel.code, 0) << sel.err;
  auto j = nlohmann::json::parse(sel.out);
  EXPECT_EQ(j.at("pool").size(), j.at("pool_size").get<std::size_t>());
  auto again = run({"select", "--graph", path("graph.json"), "--ckpt", path("m.json"), "--utterance", "tell me more",
                    "--history", "hello there"});
  EXPECT_EQ(again.out, sel.out);

  auto empty = run({"select", "--graph", path("graph.json"), "--ckpt", path("m.json"), "--utterance", ""});
  EXPECT_EQ(empty.code, 2);
  auto wrong_width = run({"select", "--kb", path("kb.json"), "--ckpt", path("m.json"), "--utterance", "x",
                          "--embeddings", "/nonexistent.jsonl"});
  EXPECT_EQ(wrong_width.code, 2);
}
