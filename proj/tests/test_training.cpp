#include <doctest.h>

#include <fstream>

#include "nif/image.hpp"
#include "nif/ops.hpp"
#include "nif/serialize.hpp"
#include "nif/training.hpp"
#include "test_util.hpp"

using namespace nif;

namespace {

// Fixed list of samples, in the given order.
class ListDataset final : public Dataset {
 public:
  explicit ListDataset(std::vector<Sample> samples) : samples_(std::move(samples)) {}
  int64_t size() const override { return static_cast<int64_t>(samples_.size()); }
  Sample get(int64_t index) const override { return samples_.at(static_cast<size_t>(index)); }

 private:
  std::vector<Sample> samples_;
};

DenoiserConfig tiny_denoiser() {
  DenoiserConfig c;
  c.hidden_dim = 16;
  c.num_blocks = 2;
  c.num_heads = 2;
  c.bottleneck_dim = 8;
  c.text_refine_blocks = 1;
  c.repa_block_index = 1;
  c.repa_hidden = 8;
  c.teacher_dim = 8;
  c.text_len = 4;
  c.text_dim = 8;
  c.text_vocab = 32;
  c.time_freq_dim = 16;
  return c;
}

Stage2Config tiny_stage2() {
  Stage2Config c;
  c.denoiser = tiny_denoiser();
  c.teacher.feature_dim = 8;
  c.ema_decay = 0.9;
  return c;
}

Stage1Config small_stage1() {
  Stage1Config c;
  c.encoder.res_blocks = 2;
  c.renderer.hidden_dim = 32;
  c.renderer.num_blocks = 1;
  c.renderer.num_heads = 2;
  return c;
}

std::vector<Stage2Example> stage2_examples(const Stage2Models& models, Rng& rng) {
  std::vector<Stage2Example> out;
  for (const char* prompt : {"a red circle", "a blue square"}) {
    Stage2Example ex;
    ex.z_norm = rng.normal_tensor({16, 8, 8});
    ex.prompt = prompt;
    ex.teacher = models.teacher->forward(rng.uniform_tensor({3, 8, 8}, 0.0, 1.0));
    out.push_back(std::move(ex));
  }
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<nlohmann::json> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST_CASE("round half to even") {
  CHECK(round_half_even(2.5) == 2);
  CHECK(round_half_even(3.5) == 4);
  CHECK(round_half_even(24.0) == 24);
  CHECK(round_half_even(23.6) == 24);
  CHECK(round_half_even(-0.5) == 0);
}

TEST_CASE("stage-1 batch geometry") {
  Rng rng(1);
  const Tensor img = rng.uniform_tensor({3, 40, 48}, 0.0, 1.0);

  const Stage1Batch same = make_stage1_batch_at(img, 16, 16, 1.0, 5, 7);
  CHECK(same.x_tar.shape() == Shape{3, 16, 16});
  CHECK(test::bit_equal(same.x_in, same.x_tar));
  CHECK(test::bit_equal(same.x_tar, image::crop(img, 5, 7, 16, 16)));

  const Stage1Batch up = make_stage1_batch_at(img, 16, 16, 2.0, 0, 0);
  CHECK(up.x_in.shape() == Shape{3, 16, 16});
  CHECK(up.x_tar.shape() == Shape{3, 32, 32});
  CHECK(up.grid.height == 32);
  CHECK(up.grid.cells[0] == doctest::Approx(1.0 / 16.0));
  CHECK(up.grid.cells[1] == doctest::Approx(1.0 / 16.0));
  CHECK_FALSE(up.upscaled);

  CHECK(make_stage1_batch_at(img, 16, 16, 1.5, 0, 0).x_tar.shape() == Shape{3, 24, 24});
  CHECK(make_stage1_batch_at(img, 16, 16, 1.0, 100, 100).x_tar.shape() == Shape{3, 16, 16});
  CHECK(make_stage1_batch_at(rng.uniform_tensor({3, 20, 20}, 0.0, 1.0), 16, 16, 2.0, 0, 0).upscaled);
  CHECK_THROWS(make_stage1_batch_at(img, 16, 16, 2.5, 0, 0));

  for (int i = 0; i < 50; ++i) {
    const Stage1Batch b = make_stage1_batch(img, 16, 16, rng);
    CHECK((b.r >= 1.0 && b.r < 2.0));
    CHECK(b.x_tar.dim(1) == round_half_even(b.r * 16.0));
    CHECK(b.x_in.shape() == Shape{3, 16, 16});
  }
  Rng a(2), b(2);
  CHECK(test::bit_equal(make_stage1_batch(img, 16, 16, a).x_tar, make_stage1_batch(img, 16, 16, b).x_tar));
}

TEST_CASE("synthetic dataset") {
  const SyntheticDataset d(6, 32, 3);
  CHECK(d.size() == 6);
  const Sample s = d.get(0);
  CHECK(s.image.shape() == Shape{3, 32, 32});
  for (double v : s.image.values()) CHECK((v >= 0.0 && v <= 1.0));
  CHECK(s.prompt.find(" on a ") != std::string::npos);
  CHECK(d.fingerprint() == SyntheticDataset(6, 32, 3).fingerprint());
  CHECK(d.fingerprint() != SyntheticDataset(6, 32, 4).fingerprint());
  DatasetConfig bad;
  bad.source = "web";
  CHECK_THROWS(make_dataset(bad));
}

TEST_CASE("latent statistics match a direct computation and ignore order") {
  const Stage1Models models(small_stage1(), 5);
  const SyntheticDataset d(4, 16, 6);
  const LatentStats s = compute_latent_stats(d, models);
  REQUIRE(s.channels() == 16);

  // Two-pass population statistics per channel.
  std::vector<Tensor> latents;
  for (int64_t i = 0; i < d.size(); ++i) latents.push_back(models.encode(d.get(i).image));
  const int64_t hw = 16 * 16;
  for (int64_t c = 0; c < 16; ++c) {
    double mean = 0.0;
    for (const Tensor& z : latents)
      for (int64_t p = 0; p < hw; ++p) mean += z[c * hw + p];
    mean /= static_cast<double>(4 * hw);
    double var = 0.0;
    for (const Tensor& z : latents)
      for (int64_t p = 0; p < hw; ++p) var += (z[c * hw + p] - mean) * (z[c * hw + p] - mean);
    var /= static_cast<double>(4 * hw);
    CHECK(s.mu[static_cast<size_t>(c)] == doctest::Approx(mean).epsilon(1e-10));
    CHECK(s.sigma[static_cast<size_t>(c)] == doctest::Approx(std::sqrt(var)).epsilon(1e-8));
  }

  std::vector<Sample> reversed;
  for (int64_t i = d.size() - 1; i >= 0; --i) reversed.push_back(d.get(i));
  const LatentStats r = compute_latent_stats(ListDataset(reversed), models);
  for (size_t c = 0; c < 16; ++c) {
    CHECK(std::abs(r.mu[c] - s.mu[c]) < 1e-10);
    CHECK(std::abs(r.sigma[c] - s.sigma[c]) < 1e-10);
  }
  CHECK(compute_latent_stats(d, models, 0.5, 1).count < s.count);
  CHECK_THROWS(compute_latent_stats(d, models, 0.0));
}

TEST_CASE("matching teacher features give zero distillation") {
  Stage1Models models(small_stage1(), 7);
  AdamW opt(models.params, AdamWConfig{});
  Rng rng(8);
  const SyntheticDataset d(1, 32, 9);
  const std::vector<Stage1Batch> batch{make_stage1_batch_at(d.get(0).image, 16, 16, 1.5, 2, 3)};
  // The zero-initialized output projection blocks encoder gradients on
  // the very first update.
  stage1_reconstruction_step(models, opt, batch);
  TeacherFeatures own;
  {
    NoGradGuard guard;
    own.values = models.projection.project(models.encoder.encode(Var(batch[0].x_in)), 4, 4).value();
  }
  const Stage1Losses l = stage1_step(models, opt, batch, rng, &own);
  CHECK(l.mcos == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(l.mdms == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(l.grad_distill_norm == 0.0);
  CHECK(l.total == doctest::Approx(l.rec).epsilon(1e-12));
  CHECK(l.grad_rec_norm > 0.0);
}

TEST_CASE("zero base weight reduces to the reconstruction update") {
  Stage1Config cfg = small_stage1();
  cfg.distill.w_base = 0.0;
  Stage1Models a(cfg, 10), b(cfg, 10);
  AdamW oa(a.params, AdamWConfig{}), ob(b.params, AdamWConfig{});
  const SyntheticDataset d(2, 32, 11);
  for (int step = 0; step < 3; ++step) {
    Rng rng(static_cast<uint64_t>(step));
    const std::vector<Stage1Batch> batch{make_stage1_batch(d.get(step % 2).image, 16, 16, rng)};
    const Stage1Losses l = stage1_step(a, oa, batch, rng);
    CHECK(l.w_adapt == 0.0);
    CHECK(l.total == l.rec);
    CHECK(stage1_reconstruction_step(b, ob, batch) == l.rec);
  }
  CHECK(a.params.checksum() == b.params.checksum());
}

TEST_CASE("adaptive weight stays within its clamp during training") {
  Stage1Models models(small_stage1(), 12);
  AdamW opt(models.params, AdamWConfig{});
  const SyntheticDataset d(2, 32, 13);
  const DistillConfig dc;
  for (int step = 0; step < 5; ++step) {
    Rng rng(static_cast<uint64_t>(100 + step));
    const Stage1Losses l = stage1_step(models, opt, {make_stage1_batch(d.get(step % 2).image, 16, 16, rng)}, rng);
    CHECK(l.w_adapt >= 0.0);
    CHECK(l.w_adapt <= dc.w_base * 1e8);
    CHECK(l.w_adapt == adaptive_weight(l.grad_rec_norm, l.grad_distill_norm, dc));
    CHECK(l.total == doctest::Approx(l.rec + l.w_adapt * l.distill));
    CHECK(l.distill == doctest::Approx(l.mcos + l.mdms));
    CHECK(l.rec == doctest::Approx(l.l1 + 0.1 * l.perceptual));
  }
  CHECK(opt.steps_taken() == 5);
}

TEST_CASE("stage-1 checkpoint roundtrip") {
  test::TempDir dir("s1ckpt");
  Stage1Models models(small_stage1(), 14);
  AdamW opt(models.params, AdamWConfig{});
  Rng rng(15);
  const SyntheticDataset d(1, 32, 16);
  stage1_step(models, opt, {make_stage1_batch(d.get(0).image, 16, 16, rng)}, rng);
  save_stage1(dir.path / "a.ckpt", models, &opt, 1);
  const LoadedStage1 loaded = load_stage1(dir.path / "a.ckpt");
  CHECK(loaded.step == 1);
  CHECK(loaded.models->params.checksum() == models.params.checksum());
  CHECK(nlohmann::json(loaded.models->config) == nlohmann::json(models.config));
  CHECK_FALSE(loaded.optimizer_state.empty());
  const Tensor img = d.get(0).image;
  CHECK(test::bit_equal(loaded.models->render(loaded.models->encode(img), 20, 24),
                        models.render(models.encode(img), 20, 24)));
  CHECK_THROWS(load_stage1(dir.path / "missing.ckpt"));
  CHECK_THROWS(load_stage2(dir.path / "a.ckpt"));
}

TEST_CASE("dropping every prompt trains only the null embedding") {
  Stage2Config cfg = tiny_stage2();
  cfg.cfg_drop = 1.0;
  Stage2Models models(cfg, 17);
  AdamW opt(models.params, AdamWConfig{});
  Rng rng(18);
  const auto batch = stage2_examples(models, rng);
  // Zero-initialized gates block the text path on the first update.
  stage2_step_latents(models, opt, nullptr, batch, rng);
  const Stage2Losses l = stage2_step_latents(models, opt, nullptr, batch, rng);
  CHECK(l.dropped == 2);
  const Var table = models.params.find("text.table");
  CHECK((!table.has_grad() || test::max_abs(table.grad()) == 0.0));
  REQUIRE(models.params.find("text.null").has_grad());
  CHECK(test::max_abs(models.params.find("text.null").grad()) > 0.0);

  cfg.cfg_drop = 0.0;
  Stage2Models kept(cfg, 17);
  AdamW opt2(kept.params, AdamWConfig{});
  stage2_step_latents(kept, opt2, nullptr, batch, rng);
  CHECK(stage2_step_latents(kept, opt2, nullptr, batch, rng).dropped == 0);
  CHECK(test::max_abs(kept.params.find("text.table").grad()) > 0.0);
}

TEST_CASE("stage-2 total combines flow matching and alignment") {
  Stage2Models models(tiny_stage2(), 19);
  AdamW opt(models.params, AdamWConfig{});
  Rng rng(20);
  const auto batch = stage2_examples(models, rng);
  const Stage2Losses l = stage2_step_latents(models, opt, nullptr, batch, rng);
  CHECK(l.total == doctest::Approx(l.fm + 0.5 * l.repa).epsilon(1e-12));
  CHECK((l.repa >= 0.0 && l.repa <= 2.0));
  CHECK(models.params.find("repa.head0.weight").has_grad());

  Stage2Config off = tiny_stage2();
  off.denoiser.repa_weight = 0.0;
  Stage2Models plain(off, 19);
  AdamW opt2(plain.params, AdamWConfig{});
  const Stage2Losses p = stage2_step_latents(plain, opt2, nullptr, batch, rng);
  CHECK(p.total == p.fm);
  CHECK_FALSE(plain.params.find("repa.head0.weight").has_grad());
}

TEST_CASE("ema follows its recurrence during stage-2 steps") {
  Stage2Models models(tiny_stage2(), 21);
  AdamW opt(models.params, AdamWConfig{});
  Ema ema(models.params, 0.9);
  const auto before = models.params.snapshot();
  Rng rng(22);
  stage2_step_latents(models, opt, &ema, stage2_examples(models, rng), rng);
  const auto after = models.params.snapshot();
  for (const auto& [name, w0] : before) {
    const Tensor& w1 = after.at(name);
    const Tensor& e = ema.shadow().at(name);
    for (int64_t i = 0; i < w0.numel(); ++i) CHECK(e[i] == doctest::Approx(0.9 * w0[i] + 0.1 * w1[i]).epsilon(1e-12));
  }
}

TEST_CASE("stage-2 steps leave the stage-1 weights untouched") {
  const Stage1Models stage1(small_stage1(), 23);
  const uint64_t before = stage1.params.checksum();
  const SyntheticDataset d(2, 16, 24);
  const LatentStats stats = compute_latent_stats(d, stage1);
  Stage2Models models(tiny_stage2(), 25);
  AdamW opt(models.params, AdamWConfig{});
  Ema ema(models.params, 0.9);
  for (int step = 0; step < 2; ++step) {
    Rng rng(static_cast<uint64_t>(step));
    const Stage2Losses l = stage2_step(stage1, stats, models, opt, &ema, {d.get(0), d.get(1)}, rng);
    CHECK(std::isfinite(l.total));
  }
  CHECK(stage1.params.checksum() == before);
  for (const auto& [name, p] : stage1.params.entries()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("stage-1 run resumes to identical weights") {
  test::TempDir dir("s1run");
  Stage1Run run;
  run.data.count = 3;
  run.data.image_size = 24;
  run.model = small_stage1();
  run.train.steps = 4;
  run.train.checkpoint_every = 2;
  const nlohmann::json echo = {{"tag", "full"}};
  const auto quiet = [](const std::string&) {};

  const RunPaths full = run_stage1(run, dir.path / "full", std::nullopt, echo, quiet);
  const auto lines = read_lines(full.metrics);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0].at("config") == echo);
  CHECK_FALSE(lines[1].contains("config"));
  for (const char* key : {"L_rec", "L_distill", "w_adapt", "grad_rec_norm", "grad_distill_norm", "step", "lr"})
    CHECK(lines[3].contains(key));
  CHECK(std::filesystem::exists(dir.path / "full" / "stats.json"));
  CHECK(std::filesystem::exists(dir.path / "full" / "checkpoints" / "stage1_step0000002.ckpt"));

  Stage1Run half = run;
  half.train.steps = 2;
  run_stage1(half, dir.path / "part", std::nullopt, echo, quiet);
  const RunPaths resumed = run_stage1(run, dir.path / "part", dir.path / "part" / "stage1.ckpt", echo, quiet);
  CHECK(read_file(resumed.checkpoint) == read_file(full.checkpoint));
  CHECK(read_lines(resumed.metrics).size() == 4);
  CHECK(read_file(dir.path / "part" / "stats.json") == read_file(dir.path / "full" / "stats.json"));

  Stage1Run other = run;
  other.model.omega = 0.2;
  CHECK_THROWS(run_stage1(other, dir.path / "part", dir.path / "part" / "stage1.ckpt", echo, quiet));
}

TEST_CASE("stage-2 run, resume and generation") {
  test::TempDir dir("s2run");
  const auto quiet = [](const std::string&) {};
  Stage1Run s1;
  s1.data.count = 2;
  s1.data.image_size = 16;
  s1.model = small_stage1();
  s1.train.steps = 1;
  const RunPaths p1 = run_stage1(s1, dir.path / "s1", std::nullopt, nullptr, quiet);

  Stage2Run run;
  run.data = s1.data;
  run.model = tiny_stage2();
  run.train.stage = 2;
  run.train.steps = 4;
  run.train.checkpoint_every = 2;
  run.stage1_checkpoint = p1.checkpoint;
  run.stats = dir.path / "s1" / "stats.json";
  const RunPaths full = run_stage2(run, dir.path / "full", std::nullopt, nullptr, quiet);
  CHECK(read_lines(full.metrics).size() == 4);

  Stage2Run half = run;
  half.train.steps = 2;
  run_stage2(half, dir.path / "part", std::nullopt, nullptr, quiet);
  const RunPaths resumed = run_stage2(run, dir.path / "part", dir.path / "part" / "stage2.ckpt", nullptr, quiet);
  CHECK(read_file(resumed.checkpoint) == read_file(full.checkpoint));

  const LoadedStage2 loaded = load_stage2(full.checkpoint);
  CHECK(loaded.step == 4);
  CHECK(loaded.latent_shape == Shape{16, 16, 16});
  CHECK_FALSE(loaded.ema_state.empty());
  const LoadedStage2 ema = load_stage2(full.checkpoint, true);
  CHECK(ema.models->params.checksum() != loaded.models->params.checksum());

  const LatentStats stats = load_stats(run.stats);
  GenerateOptions opts;
  opts.prompt = "a red circle";
  opts.seed = 3;
  opts.steps = 3;
  const GeneratedLatent g = generate_latent(*loaded.models, stats, loaded.latent_shape, opts);
  CHECK(g.latent.shape() == Shape{16, 16, 16});
  CHECK(g.denoiser_tokens == 16);
  CHECK(g.latent.all_finite());
  CHECK(g.checksum == generate_latent(*loaded.models, stats, loaded.latent_shape, opts).checksum);
  opts.seed = 4;
  CHECK(g.checksum != generate_latent(*loaded.models, stats, loaded.latent_shape, opts).checksum);
}

TEST_CASE("config validation") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.stage = 3;
  CHECK_THROWS(t.validate());
  Stage1Config s1;
  s1.encoder.channels = 8;
  CHECK_THROWS(s1.validate());
  s1 = {};
  s1.stats_subsample = 0.0;
  CHECK_THROWS(s1.validate());
  Stage2Config s2 = tiny_stage2();
  s2.teacher.feature_dim = 9;
  CHECK_THROWS(s2.validate());
  s2 = tiny_stage2();
  s2.cfg_drop = 1.5;
  CHECK_THROWS(s2.validate());
  const Stage2Config defaults;
  CHECK(defaults.cfg_drop == 0.1);
  CHECK(defaults.ema_decay == 0.9999);
}
