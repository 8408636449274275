#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "nif/cli.hpp"
#include "nif/image.hpp"
#include "nif/serialize.hpp"
#include "test_util.hpp"

using namespace nif;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Small models so the whole pipeline trains in seconds.
json small_overlay() {
  return {{"data", {{"count", 2}, {"image_size", 16}}},
          {"stage1",
           {{"model",
             {{"encoder", {{"res_blocks", 2}}},
              {"renderer", {{"hidden_dim", 32}, {"num_blocks", 1}, {"num_heads", 2}}}}},
            {"train", {{"steps", 3}}}}},
          {"stage2",
           {{"model",
             {{"denoiser",
               {{"hidden_dim", 16},
                {"num_blocks", 2},
                {"num_heads", 2},
                {"bottleneck_dim", 8},
                {"text_refine_blocks", 1},
                {"repa_block_index", 1},
                {"repa_hidden", 8},
                {"teacher_dim", 8},
                {"text_len", 4},
                {"text_dim", 8},
                {"text_vocab", 32},
                {"time_freq_dim", 16}}},
              {"teacher", {{"feature_dim", 8}}}}},
            {"train", {{"steps", 3}}}}},
          {"generate", {{"steps", 3}, {"prompt", "a red circle"}}},
          {"bench", {{"repeats", 1}, {"warmup", 0}}}};
}

// One trained pipeline shared by the tests in this file.
struct Pipeline {
  test::TempDir dir{"cli"};
  fs::path config;
  fs::path out;
  int stage1_code = -1;
  int stage2_code = -1;
  std::string stage1_err;

  Pipeline() {
    config = dir.path / "small.json";
    out = dir.path / "run";
    write_text_file(config, small_overlay().dump(2));
    const CliResult s1 = run({"train-stage1", "-c", config.string(), "-o", out.string()});
    stage1_code = s1.code;
    stage1_err = s1.err;
    stage2_code = run({"train-stage2", "-c", config.string(), "-o", out.string()}).code;
  }

  std::vector<std::string> base(const std::string& cmd) const {
    return {cmd, "-c", config.string(), "-o", out.string()};
  }
};

const Pipeline& pipeline() {
  static const Pipeline p;
  return p;
}

std::vector<std::string> operator+(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("size parsing") {
  CHECK(cli::parse_size("96x160") == std::pair<int64_t, int64_t>{96, 160});
  CHECK(cli::parse_size("512x512") == std::pair<int64_t, int64_t>{512, 512});
  CHECK_THROWS(cli::parse_size("96"));
  CHECK_THROWS(cli::parse_size("0x5"));
  CHECK_THROWS(cli::parse_size("axb"));
}

TEST_CASE("config merging and overrides") {
  const json d = cli::default_config();
  CHECK(d.at("stage1").at("train").at("steps") == 2000);
  CHECK(d.at("stage2").at("train").at("stage") == 2);
  CHECK(d.at("stage1").at("model").at("distill").at("m_cos") == 0.5);

  const json merged = cli::merge_config(d, {{"stage1", {{"train", {{"lr", 1e-3}}}}}});
  CHECK(merged.at("stage1").at("train").at("lr") == 1e-3);
  CHECK(merged.at("stage1").at("train").at("steps") == 2000);
  CHECK_THROWS(cli::merge_config(d, {{"stage1", {{"train", {{"learning_rate", 1e-3}}}}}}));
  CHECK_THROWS(cli::merge_config(d, {{"stage1", 3}}));

  json cfg = d;
  cli::apply_override(cfg, "stage2.model.cfg_drop=0.25");
  CHECK(cfg.at("stage2").at("model").at("cfg_drop") == 0.25);
  cli::apply_override(cfg, "generate.prompt=a green triangle");
  CHECK(cfg.at("generate").at("prompt") == "a green triangle");
  CHECK_THROWS(cli::apply_override(cfg, "generate.colour=red"));
  CHECK_THROWS(cli::apply_override(cfg, "generate.prompt"));

  const cli::RunConfig rc = cli::from_json(d);
  CHECK(cli::to_json(rc) == d);
}

TEST_CASE("exit codes for usage and configuration errors") {
  CHECK(run({}).code == cli::kExitUsage);
  CHECK(run({"paint"}).code == cli::kExitUsage);
  CHECK(run({"--help"}).code == cli::kExitOk);
  CHECK(run({"generate", "--steps", "many"}).code == cli::kExitUsage);

  test::TempDir dir("cli_codes");
  const CliResult unknown = run({"train-stage1", "-o", dir.path.string(), "--set", "stage1.train.speed=3"});
  CHECK(unknown.code == cli::kExitUsage);
  CHECK(unknown.err.find("stage1.train.speed") != std::string::npos);
  CHECK(run({"train-stage1", "-o", dir.path.string(), "--set", "stage1.train.steps=0"}).code == cli::kExitUsage);

  const fs::path bad = dir.path / "bad.json";
  write_text_file(bad, R"({"stage2": {"model": {"guidance": 3}}})");
  CHECK(run({"train-stage2", "-c", bad.string(), "-o", dir.path.string()}).code == cli::kExitUsage);

  const CliResult missing = run({"generate", "-o", (dir.path / "empty").string()});
  CHECK(missing.code == cli::kExitRuntime);
  CHECK(missing.err.find("not found") != std::string::npos);
}

TEST_CASE("training through the command line") {
  const Pipeline& p = pipeline();
  INFO(p.stage1_err);
  REQUIRE(p.stage1_code == cli::kExitOk);
  REQUIRE(p.stage2_code == cli::kExitOk);
  CHECK(fs::exists(p.out / "stage1" / "stage1.ckpt"));
  CHECK(fs::exists(p.out / "stage1" / "stats.json"));
  CHECK(fs::exists(p.out / "stage2" / "stage2.ckpt"));

  std::ifstream in(p.out / "stage1" / "stage1_metrics.jsonl");
  std::string first;
  std::getline(in, first);
  const json line = json::parse(first);
  CHECK(line.at("config") == cli::merge_config(cli::default_config(), small_overlay()));
}

TEST_CASE("config precedence is defaults, file, --set, then flags") {
  const Pipeline& p = pipeline();
  REQUIRE(p.stage2_code == cli::kExitOk);
  test::TempDir dir("cli_prec");
  const auto seed_of = [&](const std::vector<std::string>& extra) {
    const fs::path g = dir.path / std::to_string(extra.size());
    REQUIRE(run(p.base("generate") + extra + std::vector<std::string>{"--output-dir", g.string()}).code == 0);
    return json::parse(read_file(g / "report.json")).at("seed").get<int64_t>();
  };
  CHECK(seed_of({}) == 0);
  CHECK(seed_of({"--set", "generate.seed=6"}) == 6);
  CHECK(seed_of({"--set", "generate.seed=6", "--seed", "7"}) == 7);
}

TEST_CASE("one latent renders at every requested size") {
  const Pipeline& p = pipeline();
  REQUIRE(p.stage2_code == cli::kExitOk);
  test::TempDir dir("cli_gen");
  const CliResult r = run(p.base("generate") + std::vector<std::string>{"--size", "64x64", "--size", "128x128", "--size",
                                                                        "96x160", "--output-dir", dir.path.string()});
  REQUIRE(r.code == cli::kExitOk);
  const json report = json::parse(read_file(dir.path / "report.json"));
  CHECK(report.at("denoiser_tokens") == 16);
  REQUIRE(report.at("renders").size() == 3);
  CHECK(report.at("renders")[1].at("render_tokens") == 128 * 128);
  CHECK(image::read_png(dir.path / "sample_64x64.png").shape() == Shape{3, 64, 64});
  CHECK(image::read_png(dir.path / "sample_128x128.png").shape() == Shape{3, 128, 128});
  CHECK(image::read_png(dir.path / "sample_96x160.png").shape() == Shape{3, 96, 160});

  // A second invocation at another size samples the same latent.
  test::TempDir again("cli_gen2");
  REQUIRE(run(p.base("generate") + std::vector<std::string>{"--size", "128x128", "--output-dir", again.path.string()})
              .code == cli::kExitOk);
  const json report2 = json::parse(read_file(again.path / "report.json"));
  CHECK(report2.at("latent_checksum") == report.at("latent_checksum"));
  CHECK(report2.at("denoiser_tokens") == 16);
  CHECK(read_file(again.path / "sample_128x128.png") == read_file(dir.path / "sample_128x128.png"));

  test::TempDir other("cli_gen3");
  REQUIRE(run(p.base("generate") + std::vector<std::string>{"--seed", "9", "--output-dir", other.path.string()}).code ==
          cli::kExitOk);
  CHECK(json::parse(read_file(other.path / "report.json")).at("latent_checksum") != report.at("latent_checksum"));
}

TEST_CASE("reconstruct renders at the requested scale") {
  const Pipeline& p = pipeline();
  REQUIRE(p.stage1_code == cli::kExitOk);
  test::TempDir dir("cli_rec");
  Rng rng(1);
  const fs::path in = dir.path / "in.png";
  image::write_png(in, rng.uniform_tensor({3, 12, 20}, 0.0, 1.0));
  const fs::path out = dir.path / "out.png";
  const CliResult r = run(p.base("reconstruct") + std::vector<std::string>{"-i", in.string(), "-s", "2", "--output",
                                                                           out.string()});
  REQUIRE(r.code == cli::kExitOk);
  CHECK(image::read_png(out).shape() == Shape{3, 24, 40});

  const CliResult l1 = run(p.base("reconstruct") + std::vector<std::string>{"-i", in.string(), "--ground-truth",
                                                                            in.string(), "--output", out.string()});
  REQUIRE(l1.code == cli::kExitOk);
  CHECK(l1.out.find("L1: ") != std::string::npos);
  CHECK(run(p.base("reconstruct") + std::vector<std::string>{"-i", in.string(), "-s", "2", "--ground-truth",
                                                             in.string(), "--output", out.string()})
            .code == cli::kExitRuntime);
  CHECK(run(p.base("reconstruct") + std::vector<std::string>{"-i", in.string(), "-s", "-1", "--output", out.string()})
            .code == cli::kExitUsage);
}

TEST_CASE("bench scaling reports tokens per size") {
  const Pipeline& p = pipeline();
  REQUIRE(p.stage2_code == cli::kExitOk);
  test::TempDir dir("cli_bench");
  const fs::path js = dir.path / "bench.json";
  const CliResult r = run(p.base("bench-scaling") +
                          std::vector<std::string>{"--sizes", "64x64,128x128,256x256", "--json", js.string()});
  REQUIRE(r.code == cli::kExitOk);
  const json rows = json::parse(read_file(js)).at("rows");
  REQUIRE(rows.size() == 3);
  const int64_t expected[] = {4096, 16384, 65536};
  for (size_t i = 0; i < 3; ++i) {
    CHECK(rows[i].at("render_tokens") == expected[i]);
    CHECK(rows[i].at("denoise_tokens") == 16);
    CHECK(rows[i].at("latent_checksum") == rows[0].at("latent_checksum"));
    CHECK(rows[i].at("render_seconds").get<double>() >= 0.0);
  }
  CHECK(r.out.find("65536") != std::string::npos);

  const CliResult scaled = run(p.base("bench-scaling") + std::vector<std::string>{"--scales", "1,2", "--json", js.string()});
  REQUIRE(scaled.code == cli::kExitOk);
  const json rows2 = json::parse(read_file(js)).at("rows");
  CHECK(rows2[0].at("render_tokens") == 256);
  CHECK(rows2[1].at("render_tokens") == 1024);
}

TEST_CASE("output directory defaults to the environment variable") {
  const Pipeline& p = pipeline();
  REQUIRE(p.stage1_code == cli::kExitOk);
  test::TempDir dir("cli_env");
  REQUIRE(setenv(cli::kOutDirEnv, dir.path.c_str(), 1) == 0);
  const CliResult r = run({"compute-stats", "-c", p.config.string(), "--set",
                           "paths.stage1_checkpoint=" + (p.out / "stage1" / "stage1.ckpt").string()});
  unsetenv(cli::kOutDirEnv);
  REQUIRE(r.code == cli::kExitOk);
  CHECK(fs::exists(dir.path / "stage1" / "stats.json"));
  CHECK(read_file(dir.path / "stage1" / "stats.json") == read_file(p.out / "stage1" / "stats.json"));
}
