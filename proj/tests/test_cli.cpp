#include "doctest.h"

#include <fstream>
#include <sstream>

#include "lorun/cli.hpp"
#include "lorun/config.hpp"
#include "lorun/io.hpp"
#include "lorun/lora.hpp"
#include "lorun/verify.hpp"
#include "scratch.hpp"

using namespace lorun;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

void write(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

const char* kToy =
    "task = cs\n"
    "image_size = 16\n"
    "cs.ratio = 0.25\n"
    "cs.block = 8\n"
    "base_channels = 4\n"
    "depth = 1\n"
    "K = 2\n"
    "gamma = 10\n"
    "seed = 5\n"
    "epochs = 1\n"
    "batch_size = 4\n"
    "learning_rate = 2e-3\n"
    "data = synthetic:count=8,size=16,seed=1\n"
    "test_data = synthetic:count=3,size=16,seed=2\n";

// Mean psnr column of an eval csv, and the reported mean row.
std::pair<double, double> eval_means(const std::string& csv) {
  auto rows = parse_csv(csv);
  double sum = 0;
  int n = 0;
  for (std::size_t i = 1; i + 1 < rows.size(); ++i, ++n) sum += std::stod(rows[i][1]);
  REQUIRE(rows.back()[0] == "mean");
  return {sum / n, std::stod(rows.back()[1])};
}

}  // namespace

TEST_CASE("config parsing") {
  ScratchDir dir("config");
  SUBCASE("unknown keys are rejected") {
    CHECK_THROWS_AS(parse_config("task = cs\nbogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("K = three\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("gamma = 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("image_size = 30\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("algorithm = hqs\ncs.phi_learnable = true\n"), ConfigError);
  }
  SUBCASE("include and override") {
    write(dir / "base.conf", "K = 4\ngamma = 20 # comment\n");
    write(dir / "child.conf", "include base.conf\ngamma = 5\n");
    const RunConfig c = load_config(dir / "child.conf");
    CHECK(c.stages == 4);
    CHECK(c.gamma == 5.0);
    write(dir / "loop.conf", "include loop.conf\n");
    CHECK_THROWS_AS(load_config(dir / "loop.conf"), ConfigError);
  }
  SUBCASE("canonical text round-trips") {
    const RunConfig c = parse_config(kToy);
    CHECK(c.height == 16);
    CHECK(c.width == 16);
    CHECK(to_text(parse_config(to_text(c))) == to_text(c));
    CHECK(to_text(c).find("K = 2") != std::string::npos);
  }
  SUBCASE("the shipped toy config is valid") {
    const RunConfig c = load_config(LORUN_SOURCE_DIR "/configs/toy_cs.conf");
    CHECK(c.stages == 3);
    CHECK(c.image_shape() == Shape{1, 32, 32});
  }
}

TEST_CASE("command line errors") {
  CHECK(cli({"pretrain", "--config", "/nonexistent/x.conf"}).code == kExitConfig);
  CHECK(cli({"nosuch"}).code == kExitConfig);
  CHECK(cli({}).code == kExitConfig);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("train, fine-tune and manage adapters") {
  ScratchDir dir("cli");
  write(dir / "toy.conf", kToy);
  write(dir / "ratio.conf", std::string("include toy.conf\ncs.ratio = 0.5\n"));
  write(dir / "wide.conf", std::string("include toy.conf\nbase_channels = 6\n"));
  write(dir / "frozen.conf", std::string("include toy.conf\nepochs = 0\n"));
  write(dir / "seed.conf", std::string("include toy.conf\nseed = 6\n"));

  auto pre = cli({"pretrain", "--config", dir / "toy.conf", "--out", dir / "bb.ckpt", "--loss-csv", dir / "bb.csv"});
  REQUIRE_MESSAGE(pre.code == 0, pre.err);
  CHECK(pre.out.find("trainable parameters:") != std::string::npos);

  SUBCASE("pretraining is deterministic") {
    REQUIRE(cli({"pretrain", "--config", dir / "toy.conf", "--out", dir / "bb2.ckpt"}).code == 0);
    CHECK(read_file(dir / "bb.ckpt") == read_file(dir / "bb2.ckpt"));
    auto rows = parse_csv(read_file(dir / "bb.csv"));
    CHECK(rows.size() >= 3);
    CHECK(rows[0] == std::vector<std::string>{"step", "loss"});
  }

  SUBCASE("fine-tuning prints the rank table") {
    auto ft = cli({"finetune", "--config", dir / "toy.conf", "--backbone", dir / "bb.ckpt", "--out", dir / "ft.ckpt"});
    REQUIRE_MESSAGE(ft.code == 0, ft.err);
    CHECK(ft.out.find("adapter ranks") != std::string::npos);
    CHECK(ft.out.find("enc0.conv1.weight") != std::string::npos);
    CHECK(load_checkpoint(dir / "ft.ckpt").phase == Phase::Finetune);
  }

  SUBCASE("a backbone from another architecture is refused") {
    auto ft = cli({"finetune", "--config", dir / "wide.conf", "--backbone", dir / "bb.ckpt", "--out", dir / "x.ckpt"});
    CHECK(ft.code == kExitConfig);
    const auto bb = load_checkpoint(dir / "bb.ckpt");
    CHECK(ft.err.find(digest_hex(bb.digest)) != std::string::npos);
    CHECK(ft.err.find(digest_hex(denoiser_digest(load_config(dir / "wide.conf").denoiser()))) != std::string::npos);
  }

  SUBCASE("a backbone pretrained at another sampling ratio can be adapted") {
    auto ft = cli({"finetune", "--config", dir / "ratio.conf", "--backbone", dir / "bb.ckpt", "--out", dir / "r.ckpt"});
    REQUIRE_MESSAGE(ft.code == 0, ft.err);
    auto ev = cli({"eval", "--model", dir / "r.ckpt"});
    CHECK(ev.code == 0);
    CHECK(ev.out.find("measurement 32x4") != std::string::npos);
  }

  SUBCASE("eval reports the arithmetic mean") {
    REQUIRE(cli({"finetune", "--config", dir / "toy.conf", "--backbone", dir / "bb.ckpt", "--out", dir / "ft.ckpt"}).code == 0);
    auto ev = cli({"eval", "--model", dir / "ft.ckpt", "--csv", dir / "ev.csv"});
    REQUIRE_MESSAGE(ev.code == 0, ev.err);
    CHECK(ev.out.find("measurement 16x4") != std::string::npos);
    auto [mean, reported] = eval_means(read_file(dir / "ev.csv"));
    CHECK(reported == doctest::Approx(mean).epsilon(1e-9));
    CHECK(parse_csv(read_file(dir / "ev.csv")).size() == 5);
  }

  SUBCASE("merging keeps the reconstructions") {
    REQUIRE(cli({"finetune", "--config", dir / "toy.conf", "--backbone", dir / "bb.ckpt", "--out", dir / "ft.ckpt"}).code == 0);
    REQUIRE(cli({"lora", "merge", "--model", dir / "ft.ckpt", "--out", dir / "m.ckpt"}).code == 0);
    CHECK(load_checkpoint(dir / "m.ckpt").phase == Phase::Merged);
    REQUIRE(cli({"eval", "--model", dir / "ft.ckpt", "--csv", dir / "a.csv"}).code == 0);
    REQUIRE(cli({"eval", "--model", dir / "m.ckpt", "--csv", dir / "b.csv"}).code == 0);
    CHECK(std::abs(eval_means(read_file(dir / "a.csv")).second - eval_means(read_file(dir / "b.csv")).second) < 1e-4);
  }

  SUBCASE("swapping twice restores the original") {
    REQUIRE(cli({"finetune", "--config", dir / "toy.conf", "--backbone", dir / "bb.ckpt", "--out", dir / "a.ckpt"}).code == 0);
    REQUIRE(cli({"pretrain", "--config", dir / "seed.conf", "--out", dir / "bb6.ckpt"}).code == 0);
    REQUIRE(cli({"finetune", "--config", dir / "seed.conf", "--backbone", dir / "bb6.ckpt", "--out", dir / "b.ckpt"}).code == 0);
    REQUIRE(cli({"lora", "swap", "--model", dir / "a.ckpt", "--adapters", dir / "b.ckpt", "--out", dir / "ab.ckpt"}).code == 0);
    REQUIRE(cli({"lora", "swap", "--model", dir / "ab.ckpt", "--adapters", dir / "a.ckpt", "--out", dir / "aba.ckpt"}).code == 0);
    CHECK_FALSE(read_file(dir / "ab.ckpt") == read_file(dir / "a.ckpt"));
    CHECK(read_file(dir / "aba.ckpt") == read_file(dir / "a.ckpt"));
    const auto ab = load_checkpoint(dir / "ab.ckpt"), a = load_checkpoint(dir / "a.ckpt");
    CHECK(ab.entries.at(names::backbone("out.bias")) == a.entries.at(names::backbone("out.bias")));
  }

  SUBCASE("untrained adapters inspect as zeros") {
    REQUIRE(cli({"finetune", "--config", dir / "frozen.conf", "--backbone", dir / "bb.ckpt", "--out", dir / "z.ckpt"}).code == 0);
    std::filesystem::create_directories(dir.path() / "maps");
    auto ins = cli({"lora", "inspect", "--model", dir / "z.ckpt", "--out-dir", dir / "maps", "--stage", "2"});
    REQUIRE_MESSAGE(ins.code == 0, ins.err);
    int files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir.path() / "maps")) {
      if (e.path().extension() != ".csv") continue;
      ++files;
      CHECK(e.path().filename().string().rfind("stage2.", 0) == 0);
      for (const auto& row : parse_csv(read_file(e.path().string())))
        for (const auto& cell : row) CHECK(std::stod(cell) == 0.0);
    }
    CHECK(files > 0);
    CHECK(cli({"lora", "inspect", "--model", dir / "z.ckpt", "--out-dir", dir / "absent"}).code == kExitConfig);
  }

  SUBCASE("evaluating on the wrong geometry fails cleanly") {
    auto ev = cli({"eval", "--model", dir / "bb.ckpt", "--data", "synthetic:count=1,size=24"});
    CHECK(ev.code == kExitConfig);
    CHECK_FALSE(ev.err.empty());
  }
}

TEST_CASE("verify") {
  ScratchDir dir("verify");
  auto ok = cli({"verify", "--report", dir / "v.jsonl"});
  CHECK(ok.code == 0);
  std::istringstream lines(ok.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    CHECK(line.find("\"pass\":true") != std::string::npos);
    ++n;
  }
  CHECK(n == registered_checks().size());
  CHECK(read_file(dir / "v.jsonl") == ok.out);

  auto bad = cli({"verify", "--inject-fault", "adjoint"});
  CHECK(bad.code == kExitVerifyFailed);
  CHECK(bad.err.find("FAILED") != std::string::npos);
  CHECK(cli({"verify", "--inject-fault", "nothing"}).code == kExitConfig);
}

TEST_CASE("params") {
  ScratchDir dir("params");
  write(dir / "p.conf", "K = 9\ngamma = 10\n");
  auto r = cli({"params", "--config", dir / "p.conf"});
  REQUIRE(r.code == 0);
  const auto rep = param_count(weight_specs(load_config(dir / "p.conf").denoiser()), 9, 10);
  CHECK(r.out.find("lorun total             " + std::to_string(rep.lorun_total)) != std::string::npos);
  CHECK(rep.ratio < 1.0);
  auto k1 = cli({"params", "--config", dir / "p.conf", "--K", "1"});
  CHECK(k1.out.find("K = 1") != std::string::npos);
}

TEST_CASE("cassi measurements are wider by the dispersion") {
  ScratchDir dir("cassi");
  write(dir / "c.conf",
        "task = cassi\nimage_size = 256\ncassi.bands = 28\ncassi.shift = 2\narch = soft_threshold\nK = 1\n"
        "test_data = synthetic:count=1,size=256,channels=28\n");
  auto ev = cli({"eval", "--config", dir / "c.conf"});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(ev.out.find("image 28x256x256, measurement 256x310") != std::string::npos);
}
