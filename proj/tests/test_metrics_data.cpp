#include "doctest.h"

#include <cmath>
#include <fstream>

#include "lorun/data.hpp"
#include "lorun/io.hpp"
#include "lorun/lora.hpp"
#include "lorun/metrics.hpp"
#include "lorun/operators.hpp"
#include "oracles.hpp"
#include "scratch.hpp"

using namespace lorun;

TEST_CASE("psnr") {
  TensorF ref = TensorF::constant({1, 10, 10}, 0.5f);
  TensorD a = TensorD::constant({100}, 0.3), b = TensorD::constant({100}, 0.4);
  CHECK(psnr(a, b) == doctest::Approx(20.0));
  CHECK(std::isinf(psnr(ref, ref)));
  CHECK(psnr(ref, ref) > 0);
  CHECK_THROWS_AS(psnr(a, TensorD({99})), DimensionError);
  CHECK_THROWS_AS(psnr(a, b, 0.0), ContractError);

  CounterRng rng(8);
  for (int t = 0; t < 20; ++t) {
    TensorF x = random_uniform<float>({3, 9, 7}, rng), y = random_uniform<float>({3, 9, 7}, rng);
    std::vector<double> xs(x.data(), x.data() + x.size()), ys(y.data(), y.data() + y.size());
    CHECK(std::abs(psnr(x, y) - oracle::psnr(xs, ys)) < 1e-9);
  }
}

TEST_CASE("psnr drops as the noise grows") {
  SyntheticSpec spec;
  spec.count = 1;
  const TensorF ref = synthesize(spec).front().clean;
  double prev = std::numeric_limits<double>::infinity();
  for (double sigma : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    double mean = 0;
    for (std::uint64_t s = 1; s <= 8; ++s) mean += psnr(add_noise(ref, sigma, s), ref) / 8.0;
    CHECK(mean < prev);
    prev = mean;
  }
}

TEST_CASE("ssim") {
  CounterRng rng(4);
  TensorF x = random_uniform<float>({2, 16, 16}, rng), y = random_uniform<float>({2, 16, 16}, rng);
  CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(x, y) == doctest::Approx(ssim(y, x)).epsilon(1e-12));
  CHECK(ssim(x, y) < 0.5);
  const double c1 = 1e-4;
  CHECK(ssim(TensorD::constant({12, 12}, 1.0), TensorD::constant({12, 12}, 0.0)) == doctest::Approx(c1 / (1 + c1)));
  CHECK_THROWS_AS(ssim(TensorF({1, 8, 8}), TensorF({1, 8, 8})), DimensionError);
  CHECK_THROWS_AS(ssim(TensorF({12}), TensorF({12})), DimensionError);
  const auto w = gaussian_window();
  CHECK(w.sum() == doctest::Approx(1.0));
  CHECK(w(5, 5) == w.maxCoeff());
}

TEST_CASE("tensor files round-trip bit for bit") {
  ScratchDir dir("tensorfile");
  CounterRng rng(2);
  auto f = StoredTensor::from(random_normal<float>({2, 3, 4}, rng));
  auto d = StoredTensor::from(random_normal<double>({5}, rng));
  save_tensor(dir / "f.lrt", f);
  save_tensor(dir / "d.lrt", d);
  CHECK(load_tensor(dir / "f.lrt") == f);
  CHECK(load_tensor(dir / "d.lrt") == d);
  CHECK(load_tensor(dir / "f.lrt").dtype == DType::F32);
  CHECK(encode_tensor(f).size() == 4 + 3 + 3 * 4 + 24 * 4);
}

TEST_CASE("malformed tensor files report the failing offset") {
  std::string bytes = encode_tensor(StoredTensor::from(TensorF({2, 2})));
  try {
    decode_tensor(std::string_view(bytes).substr(0, bytes.size() - 3));
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 4 + 3 + 8);
  }
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_tensor(bad), ParseError);
  bad = bytes;
  bad[5] = 7;  // dtype
  try {
    decode_tensor(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 5);
  }
  CHECK_THROWS_AS(decode_tensor(bytes + "x"), ParseError);
}

TEST_CASE("checkpoints round-trip") {
  ScratchDir dir("ckpt");
  Checkpoint c;
  c.digest = 0x0123456789abcdefULL;
  c.phase = Phase::Finetune;
  c.config = "task = cs\n";
  c.entries["a"] = StoredTensor::from(TensorF({1}, {1.5f}));
  c.entries["b.c"] = StoredTensor::from(TensorD({2, 1}, {-2.0, 3.25}));
  save_checkpoint(dir / "m.ckpt", c);
  CHECK(load_checkpoint(dir / "m.ckpt") == c);
  CHECK(encode_checkpoint(decode_checkpoint(encode_checkpoint(c))) == encode_checkpoint(c));
  std::string bytes = encode_checkpoint(c);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), ParseError);
  bytes[4] = 9;  // schema
  CHECK_THROWS_AS(decode_checkpoint(bytes), ParseError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST_CASE("pgm decoding") {
  std::string p5 = "P5\n# comment\n2 1\n255\n";
  p5 += static_cast<char>(128);
  p5 += static_cast<char>(255);
  TensorF img = decode_pgm(p5);
  CHECK(img.shape() == Shape{1, 1, 2});
  CHECK(img[0] == doctest::Approx(128.0 / 255.0));
  CHECK(img[0] == doctest::Approx(0.50196).epsilon(1e-5));
  CHECK(img[1] == 1.0f);
  TensorF ascii = decode_pgm("P2\n2 2\n4\n0 1\n2 4\n");
  CHECK(ascii[2] == doctest::Approx(0.5));
  std::string wide = "P5 1 1 65535\n";
  wide += static_cast<char>(0x80);
  wide += static_cast<char>(0x00);
  CHECK(decode_pgm(wide)[0] == doctest::Approx(32768.0 / 65535.0));
  CHECK_THROWS_AS(decode_pgm("P6\n1 1\n255\n\x01"), ParseError);
  CHECK_THROWS_AS(decode_pgm("P5\n4 4\n255\n\x01"), ParseError);
  CHECK_THROWS_AS(decode_pgm("P2\n1 1\n3\n9\n"), ParseError);
}

TEST_CASE("pgm encoding clamps and round-trips at 8 bits") {
  TensorF img({1, 2, 3}, {-0.5f, 0.0f, 0.25f, 0.5f, 1.0f, 3.0f});
  TensorF back = decode_pgm(encode_pgm(img));
  CHECK(back.shape() == img.shape());
  CHECK(back[0] == 0.0f);
  CHECK(back[5] == 1.0f);
  CHECK(back[2] == doctest::Approx(64.0 / 255.0));
  CHECK_THROWS_AS(encode_pgm(TensorF({2, 2, 2})), DimensionError);
}

TEST_CASE("numbers and csv") {
  CHECK(format_number(0.5) == "0.5");
  CHECK(format_number(std::numeric_limits<double>::infinity()) == "inf");
  CHECK(format_number(std::nan("")) == "nan");
  CounterRng rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto v = static_cast<float>(rng.normal(0.0, 100.0));
    CHECK(std::strtof(format_number(v).c_str(), nullptr) == v);
  }
  auto rows = parse_csv("a,b\r\n1,,3\nx\n");
  REQUIRE(rows.size() == 3);
  CHECK(rows[1] == std::vector<std::string>{"1", "", "3"});
  CHECK(csv_row({"p", "q"}) == "p,q\n");
}

TEST_CASE("heatmaps") {
  ScratchDir dir("heatmap");
  SUBCASE("constant matrix renders one level") {
    auto lv = heatmap_levels(TensorD::constant({3, 4}, 2.5));
    for (auto v : lv) CHECK(v == lv.front());
    auto spread = heatmap_levels(TensorD({1, 3}, {-1.0, 0.0, 1.0}));
    CHECK(spread == std::vector<std::uint8_t>{0, 128, 255});
  }
  SUBCASE("csv re-parses to the source values") {
    CounterRng rng(6);
    TensorD m = random_normal<float>({3, 2, 2}, rng).cast<double>();
    export_heatmap(m, dir / "m.csv", dir / "m.pgm");
    auto rows = parse_csv(read_file(dir / "m.csv"));
    REQUIRE(rows.size() == 3);
    for (Index i = 0; i < 3; ++i) {
      REQUIRE(rows[static_cast<std::size_t>(i)].size() == 4);
      for (Index j = 0; j < 4; ++j)
        CHECK(std::stof(rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) == static_cast<float>(m[i * 4 + j]));
    }
    TensorF pgm = read_pgm(dir / "m.pgm");
    CHECK(pgm.shape() == Shape{1, 3, 4});
  }
  SUBCASE("zero-init adapter update exports as zeros") {
    auto ad = init_adapter<double>("w", {4, 3, 3, 3}, 1, 5);
    export_heatmap(delta_weight(ad), dir / "z.csv", dir / "z.pgm");
    for (const auto& row : parse_csv(read_file(dir / "z.csv")))
      for (const auto& cell : row) CHECK(std::stod(cell) == 0.0);
    TensorF pgm = read_pgm(dir / "z.pgm");
    CHECK(pgm.vec().cwiseAbs().maxCoeff() == 0.0f);
    CHECK(pgm.shape() == Shape{1, 4, 27});
  }
}

TEST_CASE("synthetic images") {
  auto spec = parse_synthetic("synthetic:count=5,size=12,channels=3,seed=9");
  CHECK(spec.count == 5);
  CHECK(spec.height == 12);
  CHECK(spec.channels == 3);
  auto a = synthesize(spec), b = synthesize(spec);
  REQUIRE(a.size() == 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].clean == b[i].clean);
    CHECK(a[i].clean.shape() == Shape{3, 12, 12});
    CHECK(a[i].clean.vec().minCoeff() >= 0.0f);
    CHECK(a[i].clean.vec().maxCoeff() <= 1.0f);
  }
  CHECK_FALSE(a[0].clean == a[1].clean);
  spec.seed = 10;
  CHECK_FALSE(synthesize(spec)[0].clean == a[0].clean);
  CHECK(parse_synthetic("synthetic:size=8,height=4").height == 4);
  CHECK_THROWS_AS(parse_synthetic("synthetic:count=0"), ConfigError);
  CHECK_THROWS_AS(parse_synthetic("synthetic:colour=2"), ConfigError);
  CHECK(is_synthetic_spec("synthetic:count=1"));
  CHECK_FALSE(is_synthetic_spec("images/"));
}

TEST_CASE("ingest from files and directories") {
  ScratchDir dir("ingest");
  std::filesystem::create_directories(dir.path() / "pgms");
  write_pgm(dir / "pgms/b.pgm", TensorF::constant({1, 4, 4}, 0.2f));
  write_pgm(dir / "pgms/a.pgm", TensorF::constant({1, 4, 4}, 0.8f));
  auto imgs = ingest(dir / "pgms");
  REQUIRE(imgs.size() == 2);
  CHECK(imgs[0].clean[0] == doctest::Approx(204.0 / 255.0));
  CHECK(imgs[0].id.find("a") != std::string::npos);

  CounterRng rng(2);
  TensorF batch = random_uniform<float>({3, 2, 4, 4}, rng);
  save_tensor(dir / "batch.lrt", StoredTensor::from(batch));
  auto many = ingest(dir / "batch.lrt");
  REQUIRE(many.size() == 3);
  CHECK(many[1].clean.shape() == Shape{2, 4, 4});
  CHECK(many[1].clean[0] == batch[32]);
  save_tensor(dir / "plain.lrt", StoredTensor::from(TensorF::constant({4, 5}, 2.0f)));
  auto clamped = ingest(dir / "plain.lrt", Layout::TensorFile);
  CHECK(clamped[0].clean.shape() == Shape{1, 4, 5});
  CHECK(clamped[0].clean[0] == 1.0f);
  CHECK_THROWS_AS(ingest(dir / "nothing"), IoError);
  CHECK(ingest("synthetic:count=2,size=8").size() == 2);
}
