#include "nif/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "nif/image.hpp"
#include "nif/ops.hpp"
#include "nif/serialize.hpp"

namespace nif {

void log_to_stderr(const std::string& line) { std::cerr << line << '\n'; }

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- datasets

std::string Dataset::fingerprint() const {
  uint64_t h = checksum_bytes(nullptr, 0);
  for (int64_t i = 0; i < size(); ++i) {
    const Sample s = get(i);
    const auto& shape = s.image.shape();
    h = checksum_bytes(shape.data(), shape.size() * sizeof(int64_t), h);
    h = checksum_bytes(s.image.data(), static_cast<size_t>(s.image.numel()) * sizeof(double), h);
    h = checksum_bytes(s.prompt.data(), s.prompt.size(), h);
  }
  return hex64(h);
}

namespace {

struct NamedColor {
  const char* name;
  double rgb[3];
};

constexpr NamedColor kPalette[] = {
    {"red", {0.85, 0.15, 0.15}},   {"green", {0.20, 0.70, 0.25}}, {"blue", {0.15, 0.30, 0.85}},
    {"yellow", {0.95, 0.85, 0.20}}, {"purple", {0.60, 0.25, 0.70}}, {"orange", {0.95, 0.55, 0.10}},
    {"white", {0.95, 0.95, 0.95}},  {"black", {0.08, 0.08, 0.08}},
};
constexpr int64_t kPaletteSize = sizeof(kPalette) / sizeof(kPalette[0]);
constexpr const char* kShapes[] = {"circle", "square", "triangle"};

bool inside(int shape, double x, double y, double cx, double cy, double rad) {
  const double dx = x - cx, dy = y - cy;
  switch (shape) {
    case 0:
      return dx * dx + dy * dy <= rad * rad;
    case 1:
      return std::abs(dx) <= rad * 0.85 && std::abs(dy) <= rad * 0.85;
    default: {
      // Upward triangle inscribed in the circle of radius rad.
      const double top = cy - rad, bottom = cy + rad * 0.5;
      if (y < top || y > bottom) return false;
      const double half = (y - top) / (bottom - top) * rad * 0.866 * 1.0;
      return std::abs(dx) <= half;
    }
  }
}

Sample synth_sample(int64_t size, Rng rng) {
  const int64_t bg = rng.below(kPaletteSize);
  int64_t fg = rng.below(kPaletteSize - 1);
  if (fg >= bg) ++fg;
  const int shape = static_cast<int>(rng.below(3));
  const double s = static_cast<double>(size);
  const double cx = rng.uniform(0.35, 0.65) * s, cy = rng.uniform(0.35, 0.65) * s;
  const double rad = rng.uniform(0.2, 0.32) * s;
  const double shade = rng.uniform(0.55, 0.85);
  Tensor img({3, size, size});
  constexpr int kSuper = 4;
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSuper;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSuper;
          hits += inside(shape, px, py, cx, cy, rad) ? 1 : 0;
        }
      const double cover = static_cast<double>(hits) / (kSuper * kSuper);
      const double g = 1.0 - (1.0 - shade) * (static_cast<double>(y) + 0.5) / s;
      for (int c = 0; c < 3; ++c) {
        const double back = kPalette[bg].rgb[c] * g;
        img[(c * size + y) * size + x] = cover * kPalette[fg].rgb[c] + (1.0 - cover) * back;
      }
    }
  std::string prompt = std::string("a ") + kPalette[fg].name + " " + kShapes[shape] + " on a " + kPalette[bg].name +
                       " background";
  return Sample{std::move(img), std::move(prompt)};
}

}  // namespace

SyntheticDataset::SyntheticDataset(int64_t count, int64_t size, uint64_t seed) {
  if (count < 1) throw std::invalid_argument("synthetic dataset needs at least one image");
  if (size < 8) throw std::invalid_argument("synthetic images must be at least 8x8");
  const Rng root = Rng(seed).fork("synthetic");
  for (int64_t i = 0; i < count; ++i) samples_.push_back(synth_sample(size, root.fork(static_cast<uint64_t>(i))));
}

DirectoryDataset::DirectoryDataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files_.push_back(e.path());
  }
  std::sort(files_.begin(), files_.end());
  if (files_.empty()) throw std::runtime_error("dataset directory contains no PNG images: " + dir.string());
}

Sample DirectoryDataset::get(int64_t index) const {
  const auto& file = files_.at(static_cast<size_t>(index));
  Sample s{image::read_png(file), ""};
  auto side = file;
  side.replace_extension(".txt");
  if (std::filesystem::exists(side)) {
    s.prompt = read_text_file(side);
    while (!s.prompt.empty() && (s.prompt.back() == '\n' || s.prompt.back() == '\r')) s.prompt.pop_back();
  }
  return s;
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"source", c.source}, {"path", c.path}, {"count", c.count}, {"image_size", c.image_size}, {"seed", c.seed}};
}
void from_json(const nlohmann::json& j, DatasetConfig& c) {
  j.at("source").get_to(c.source);
  j.at("path").get_to(c.path);
  j.at("count").get_to(c.count);
  j.at("image_size").get_to(c.image_size);
  j.at("seed").get_to(c.seed);
}

std::unique_ptr<Dataset> make_dataset(const DatasetConfig& cfg) {
  if (cfg.source == "synthetic") return std::make_unique<SyntheticDataset>(cfg.count, cfg.image_size, cfg.seed);
  if (cfg.source == "directory") return std::make_unique<DirectoryDataset>(cfg.path);
  throw std::invalid_argument("unknown dataset source '" + cfg.source + "' (expected synthetic or directory)");
}

// ---------------------------------------------------------------- configs

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw std::invalid_argument("stage must be 1 or 2");
  if (steps < 1) throw std::invalid_argument("steps must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (checkpoint_every < 1) throw std::invalid_argument("checkpoint_every must be positive");
}

AdamWConfig TrainConfig::optimizer() const {
  AdamWConfig c;
  c.lr = lr;
  c.weight_decay = weight_decay;
  c.grad_clip = grad_clip;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"stage", c.stage},   {"steps", c.steps},     {"batch_size", c.batch_size},
       {"seed", c.seed},     {"lr", c.lr},           {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip}, {"checkpoint_every", c.checkpoint_every}};
}
void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("stage").get_to(c.stage);
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("seed").get_to(c.seed);
  j.at("lr").get_to(c.lr);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("grad_clip").get_to(c.grad_clip);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
}

void Stage1Config::validate() const {
  encoder.validate();
  renderer.validate();
  distill.validate();
  if (encoder.channels != renderer.latent_channels) {
    throw std::invalid_argument("encoder channels must equal renderer latent_channels");
  }
  if (omega < 0.0) throw std::invalid_argument("omega must be non-negative");
  if (input_size < 8) throw std::invalid_argument("input_size must be at least 8");
  if (input_size < teacher.patch) throw std::invalid_argument("input_size must be at least the teacher patch size");
  if (!(stats_subsample > 0.0 && stats_subsample <= 1.0)) {
    throw std::invalid_argument("stats_subsample must lie in (0, 1]");
  }
}

void to_json(nlohmann::json& j, const Stage1Config& c) {
  j = {{"encoder", c.encoder},       {"renderer", c.renderer},
       {"distill", c.distill},       {"teacher", c.teacher},
       {"omega", c.omega},           {"perceptual", c.perceptual},
       {"perceptual_seed", c.perceptual_seed}, {"input_size", c.input_size},
       {"stats_subsample", c.stats_subsample}};
}
void from_json(const nlohmann::json& j, Stage1Config& c) {
  j.at("encoder").get_to(c.encoder);
  j.at("renderer").get_to(c.renderer);
  j.at("distill").get_to(c.distill);
  j.at("teacher").get_to(c.teacher);
  j.at("omega").get_to(c.omega);
  j.at("perceptual").get_to(c.perceptual);
  j.at("perceptual_seed").get_to(c.perceptual_seed);
  j.at("input_size").get_to(c.input_size);
  j.at("stats_subsample").get_to(c.stats_subsample);
}

void Stage2Config::validate() const {
  denoiser.validate();
  shift.validate();
  if (teacher.feature_dim != denoiser.teacher_dim) {
    throw std::invalid_argument("stage-2 teacher feature_dim must equal denoiser teacher_dim");
  }
  if (cfg_drop < 0.0 || cfg_drop > 1.0) throw std::invalid_argument("cfg_drop must lie in [0, 1]");
  if (ema_decay < 0.0 || ema_decay >= 1.0) throw std::invalid_argument("ema_decay must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const Stage2Config& c) {
  j = {{"denoiser", c.denoiser}, {"shift", c.shift},       {"teacher", c.teacher},
       {"cfg_drop", c.cfg_drop}, {"ema_decay", c.ema_decay}};
}
void from_json(const nlohmann::json& j, Stage2Config& c) {
  j.at("denoiser").get_to(c.denoiser);
  j.at("shift").get_to(c.shift);
  j.at("teacher").get_to(c.teacher);
  j.at("cfg_drop").get_to(c.cfg_drop);
  j.at("ema_decay").get_to(c.ema_decay);
}

// ----------------------------------------------------------------- stage 1

int64_t round_half_even(double v) { return static_cast<int64_t>(std::nearbyint(v)); }

namespace {

Stage1Batch build_batch(const Tensor& source, int64_t h0, int64_t w0, double r, int64_t ch, int64_t cw,
                        int64_t top, int64_t left, bool upscaled) {
  Stage1Batch b;
  b.r = r;
  b.upscaled = upscaled;
  top = std::clamp<int64_t>(top, 0, source.dim(1) - ch);
  left = std::clamp<int64_t>(left, 0, source.dim(2) - cw);
  b.x_tar = image::crop(source, top, left, ch, cw);
  b.x_in = image::resize_bilinear(b.x_tar, h0, w0);
  b.grid = geometry::make_coord_grid(ch, cw);
  return b;
}

// Upscales the source when it cannot hold a ch x cw crop.
Tensor ensure_covers(const Tensor& image, int64_t ch, int64_t cw, bool& upscaled) {
  const int64_t h = image.dim(1), w = image.dim(2);
  upscaled = h < ch || w < cw;
  if (!upscaled) return image;
  const double f = std::max(static_cast<double>(ch) / static_cast<double>(h),
                            static_cast<double>(cw) / static_cast<double>(w));
  const auto nh = std::max(ch, static_cast<int64_t>(std::ceil(f * static_cast<double>(h))));
  const auto nw = std::max(cw, static_cast<int64_t>(std::ceil(f * static_cast<double>(w))));
  return image::resize_bilinear(image, nh, nw);
}

}  // namespace

Stage1Batch make_stage1_batch(const Tensor& image, int64_t h0, int64_t w0, Rng& rng) {
  if (h0 < 1 || w0 < 1) throw std::invalid_argument("make_stage1_batch: input size must be positive");
  const double r = rng.uniform(1.0, 2.0);
  const int64_t ch = round_half_even(r * static_cast<double>(h0));
  const int64_t cw = round_half_even(r * static_cast<double>(w0));
  bool upscaled = false;
  const Tensor source = ensure_covers(image, ch, cw, upscaled);
  const int64_t top = rng.below(source.dim(1) - ch + 1);
  const int64_t left = rng.below(source.dim(2) - cw + 1);
  return build_batch(source, h0, w0, r, ch, cw, top, left, upscaled);
}

Stage1Batch make_stage1_batch_at(const Tensor& image, int64_t h0, int64_t w0, double r, int64_t top, int64_t left) {
  if (h0 < 1 || w0 < 1) throw std::invalid_argument("make_stage1_batch: input size must be positive");
  if (!(r >= 1.0 && r <= 2.0)) throw std::invalid_argument("make_stage1_batch: scale must lie in [1, 2]");
  const int64_t ch = round_half_even(r * static_cast<double>(h0));
  const int64_t cw = round_half_even(r * static_cast<double>(w0));
  bool upscaled = false;
  const Tensor source = ensure_covers(image, ch, cw, upscaled);
  return build_batch(source, h0, w0, r, ch, cw, top, left, upscaled);
}

Stage1Models::Stage1Models(const Stage1Config& cfg, uint64_t seed)
    : config((cfg.validate(), cfg)),
      encoder(cfg.encoder, params, Rng(seed).fork("encoder")),
      renderer(cfg.renderer, params, Rng(seed).fork("renderer")),
      projection(params, cfg.encoder.channels, cfg.teacher.feature_dim, Rng(seed).fork("projection")),
      teacher(make_teacher(cfg.teacher)),
      perceptual(make_perceptual(cfg.perceptual, cfg.perceptual_seed)) {}

Tensor Stage1Models::encode(const Tensor& image) const {
  NoGradGuard guard;
  return encoder.encode(Var(image)).value();
}

Tensor Stage1Models::render(const Tensor& latent, int64_t height, int64_t width) const {
  NoGradGuard guard;
  return renderer.render(Var(latent), height, width).value();
}

nlohmann::json Stage1Losses::to_json() const {
  return {{"L_rec", rec},         {"L_l1", l1},
          {"L_perceptual", perceptual}, {"L_mcos", mcos},
          {"L_mdms", mdms},       {"L_distill", distill},
          {"grad_rec_norm", grad_rec_norm}, {"grad_distill_norm", grad_distill_norm},
          {"w_adapt", w_adapt},   {"total", total},
          {"grad_norm", grad_norm}};
}

namespace {

double norm_of_grads(const std::vector<Var>& vars) {
  double s = 0.0;
  for (const Var& v : vars)
    if (v.has_grad())
      for (double g : v.grad().values()) s += g * g;
  return std::sqrt(s);
}

struct Stage1Graph {
  Var rec, l1, perceptual, mcos, mdms;
};

Stage1Graph build_stage1_graph(const Stage1Models& m, const std::vector<Stage1Batch>& batch, Rng* rng,
                               const TeacherFeatures* teacher_override) {
  if (batch.empty()) throw std::invalid_argument("stage-1 batch is empty");
  std::vector<Var> rec, l1, perc, mcos, mdms;
  for (const Stage1Batch& b : batch) {
    const Var latent = m.encoder.encode(Var(b.x_in));
    const Var pred = m.renderer.render(latent, b.grid);
    const ReconstructionLoss rl = reconstruction_loss(pred, Var(b.x_tar), m.config.omega, m.perceptual.get());
    rec.push_back(rl.total);
    l1.push_back(rl.l1);
    if (rl.perceptual.defined()) perc.push_back(rl.perceptual);
    if (!rng) continue;
    const TeacherFeatures tf = teacher_override ? *teacher_override : m.teacher->forward(b.x_in);
    const Var student = m.projection.project(latent, tf.grid_height(), tf.grid_width());
    const Var target(tf.values);
    mcos.push_back(margin_cosine_loss(student, target, m.config.distill.m_cos));
    mdms.push_back(distance_matrix_loss(student, target, m.config.distill.k, m.config.distill.m_dist, *rng));
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  auto avg = [inv](const std::vector<Var>& v) { return v.empty() ? Var() : ops::scale(ops::add_n(v), inv); };
  return {avg(rec), avg(l1), avg(perc), avg(mcos), avg(mdms)};
}

}  // namespace

Stage1Losses stage1_step(Stage1Models& models, AdamW& optimizer, const std::vector<Stage1Batch>& batch, Rng& rng,
                         const TeacherFeatures* teacher_override) {
  const Stage1Graph g = build_stage1_graph(models, batch, &rng, teacher_override);
  const Var distill = ops::add(g.mcos, g.mdms);
  const auto last = models.encoder.last_layer_params();

  Stage1Losses out;
  out.rec = g.rec.item();
  out.l1 = g.l1.item();
  out.perceptual = g.perceptual.defined() ? g.perceptual.item() : 0.0;
  out.mcos = g.mcos.item();
  out.mdms = g.mdms.item();
  out.distill = distill.item();

  models.params.zero_grad();
  g.rec.backward();
  out.grad_rec_norm = norm_of_grads(last);
  std::map<std::string, Tensor> rec_grads;
  for (const auto& [name, p] : models.params.entries())
    if (p.has_grad()) rec_grads.emplace(name, p.grad());

  models.params.zero_grad();
  distill.backward();
  out.grad_distill_norm = norm_of_grads(last);
  out.w_adapt = adaptive_weight(out.grad_rec_norm, out.grad_distill_norm, models.config.distill);
  out.total = out.rec + out.w_adapt * out.distill;
  if (!std::isfinite(out.total)) {
    throw std::runtime_error("non-finite stage-1 loss: " + out.to_json().dump());
  }

  for (auto& [name, p] : models.params.entries()) {
    const auto it = rec_grads.find(name);
    if (!p.has_grad()) {
      if (it != rec_grads.end()) p.mutable_grad() = it->second;
      continue;
    }
    Tensor& gd = p.mutable_grad();
    for (int64_t i = 0; i < gd.numel(); ++i) {
      const double rec_part = it != rec_grads.end() ? it->second[i] : 0.0;
      gd[i] = rec_part + out.w_adapt * gd[i];
    }
  }
  out.grad_norm = optimizer.step();
  return out;
}

double stage1_reconstruction_step(Stage1Models& models, AdamW& optimizer, const std::vector<Stage1Batch>& batch) {
  const Stage1Graph g = build_stage1_graph(models, batch, nullptr, nullptr);
  models.params.zero_grad();
  g.rec.backward();
  optimizer.step();
  return g.rec.item();
}

LatentStats compute_latent_stats(const Dataset& data, const Stage1Models& models, double subsample, uint64_t seed) {
  if (data.size() == 0) throw std::invalid_argument("cannot compute latent statistics of an empty dataset");
  if (!(subsample > 0.0 && subsample <= 1.0)) throw std::invalid_argument("subsample must lie in (0, 1]");
  std::vector<int64_t> order;
  if (subsample < 1.0) {
    const auto k = std::max<int64_t>(1, std::llround(subsample * static_cast<double>(data.size())));
    Rng rng = Rng(seed).fork("stats");
    order = sample_positions(data.size(), k, rng);
    std::sort(order.begin(), order.end());
  } else {
    for (int64_t i = 0; i < data.size(); ++i) order.push_back(i);
  }
  LatentStatsAccumulator acc;
  for (int64_t i : order) acc.add(models.encode(data.get(i).image));
  return acc.finish(data.fingerprint() + ":" + hex64(models.params.checksum()));
}

double reconstruction_error(const Dataset& data, const Stage1Models& models) {
  if (data.size() == 0) throw std::invalid_argument("reconstruction_error: empty dataset");
  double total = 0.0;
  for (int64_t i = 0; i < data.size(); ++i) {
    const Tensor img = data.get(i).image;
    total += image::mean_abs_error(models.render(models.encode(img), img.dim(1), img.dim(2)), img);
  }
  return total / static_cast<double>(data.size());
}

// ----------------------------------------------------------------- stage 2

Stage2Models::Stage2Models(const Stage2Config& cfg, uint64_t seed)
    : config((cfg.validate(), cfg)),
      denoiser(cfg.denoiser, params, Rng(seed).fork("denoiser")),
      teacher(make_teacher(cfg.teacher)) {}

nlohmann::json Stage2Losses::to_json() const {
  return {{"L_FM", fm}, {"L_REPA", repa}, {"total", total}, {"t", t}, {"dropped", dropped}, {"grad_norm", grad_norm}};
}

Stage2Losses stage2_step_latents(Stage2Models& models, AdamW& optimizer, Ema* ema,
                                 const std::vector<Stage2Example>& batch, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("stage-2 batch is empty");
  const Denoiser& net = models.denoiser;
  const double repa_weight = models.config.denoiser.repa_weight;
  std::vector<Var> fm_terms, repa_terms;
  Stage2Losses out;
  for (const Stage2Example& ex : batch) {
    const bool drop = rng.uniform() < models.config.cfg_drop;
    const TextCondition cond = drop ? net.text_encoder().null_condition() : net.encode_text(ex.prompt);
    out.dropped += drop ? 1 : 0;
    DenoiserTrace trace;
    const VelocityModel model = [&](const Var& u, double t, const Var& c) { return net.forward(u, t, c, &trace); };
    const FlowLoss fl = flow_matching_loss(model, ex.z_norm, cond.tokens, rng, models.config.shift);
    fm_terms.push_back(fl.loss);
    repa_terms.push_back(repa_loss(net, trace, ex.teacher));
    out.t = fl.sample.t;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  const Var fm = ops::scale(ops::add_n(fm_terms), inv);
  const Var repa = ops::scale(ops::add_n(repa_terms), inv);
  const Var total = repa_weight > 0.0 ? ops::add(fm, ops::scale(repa, repa_weight)) : fm;
  out.fm = fm.item();
  out.repa = repa.item();
  out.total = total.item();
  if (!std::isfinite(out.total)) throw std::runtime_error("non-finite stage-2 loss: " + out.to_json().dump());

  models.params.zero_grad();
  total.backward();
  out.grad_norm = optimizer.step();
  if (ema) ema->update(models.params);
  return out;
}

Stage2Losses stage2_step(const Stage1Models& stage1, const LatentStats& stats, Stage2Models& models,
                         AdamW& optimizer, Ema* ema, const std::vector<Sample>& batch, Rng& rng) {
  std::vector<Stage2Example> examples;
  for (const Sample& s : batch) {
    Stage2Example ex;
    ex.z_norm = normalize_latent(stage1.encode(s.image), stats);
    ex.prompt = s.prompt;
    ex.teacher = models.teacher->forward(s.image);
    examples.push_back(std::move(ex));
  }
  const Stage2Losses out = stage2_step_latents(models, optimizer, ema, examples, rng);
  for (const auto& [name, p] : stage1.params.entries()) {
    if (p.has_grad()) throw std::logic_error("gradient reached frozen stage-1 weight " + name);
  }
  return out;
}

// --------------------------------------------------------- checkpoints

void save_stage1(const std::filesystem::path& path, const Stage1Models& models, const AdamW* optimizer,
                 int64_t step) {
  Checkpoint ck;
  ck.meta = {{"kind", "stage1"}, {"step", step}, {"config", models.config}};
  ck.put_all("model/", models.params.snapshot());
  if (optimizer) ck.put_all("optim/", optimizer->state());
  save_checkpoint(path, ck);
}

LoadedStage1 load_stage1(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("stage-1 checkpoint not found: " + path.string());
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "stage1") throw std::runtime_error(path.string() + " is not a stage-1 checkpoint");
  LoadedStage1 out;
  out.models = std::make_unique<Stage1Models>(ck.meta.at("config").get<Stage1Config>());
  out.models->params.load(ck.with_prefix("model/"));
  out.step = ck.meta.at("step").get<int64_t>();
  out.optimizer_state = ck.with_prefix("optim/");
  return out;
}

void save_stage2(const std::filesystem::path& path, const Stage2Models& models, const AdamW* optimizer,
                 const Ema* ema, int64_t step, const Shape& latent_shape) {
  Checkpoint ck;
  ck.meta = {{"kind", "stage2"},
             {"step", step},
             {"config", models.config},
             {"text_backend", models.denoiser.text_encoder().backend()},
             {"latent_shape", latent_shape}};
  ck.put_all("model/", models.params.snapshot());
  if (optimizer) ck.put_all("optim/", optimizer->state());
  if (ema) ck.put_all("ema/", ema->shadow());
  save_checkpoint(path, ck);
}

LoadedStage2 load_stage2(const std::filesystem::path& path, bool use_ema) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("stage-2 checkpoint not found: " + path.string());
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "stage2") throw std::runtime_error(path.string() + " is not a stage-2 checkpoint");
  LoadedStage2 out;
  auto cfg = ck.meta.at("config").get<Stage2Config>();
  const auto backend = ck.meta.at("text_backend").get<std::string>();
  if (backend != cfg.denoiser.text_backend) throw std::runtime_error("checkpoint text backend mismatch");
  out.models = std::make_unique<Stage2Models>(cfg);
  out.models->params.load(ck.with_prefix("model/"));
  out.step = ck.meta.at("step").get<int64_t>();
  out.latent_shape = ck.meta.at("latent_shape").get<Shape>();
  out.optimizer_state = ck.with_prefix("optim/");
  out.ema_state = ck.with_prefix("ema/");
  if (use_ema) {
    if (out.ema_state.empty()) throw std::runtime_error("checkpoint has no EMA weights");
    out.models->params.load(out.ema_state);
  }
  return out;
}

// ------------------------------------------------------------ run loops

namespace {

using Clock = std::chrono::steady_clock;

std::string step_name(const std::string& prefix, int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_step%07lld.ckpt", static_cast<long long>(step));
  return prefix + buf;
}

// Keeps only metrics lines with step <= last_step.
void truncate_metrics(const std::filesystem::path& path, int64_t last_step) {
  std::string kept;
  if (std::filesystem::exists(path) && last_step > 0) {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (nlohmann::json::parse(line).at("step").get<int64_t>() <= last_step) kept += line + "\n";
    }
  }
  write_text_file(path, kept);
}

class MetricsLog {
 public:
  MetricsLog(const std::filesystem::path& path, nlohmann::json echo) : out_(path, std::ios::app), echo_(echo) {
    if (!out_) throw std::runtime_error("cannot open metrics log " + path.string());
  }
  void write(nlohmann::json line) {
    if (!echo_.is_null()) {
      line["config"] = echo_;
      echo_ = nullptr;
    }
    out_ << line.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
  nlohmann::json echo_;
};

void prepare_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "checkpoints", ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

}  // namespace

RunPaths run_stage1(const Stage1Run& run, const std::filesystem::path& out_dir,
                    const std::optional<std::filesystem::path>& resume, const nlohmann::json& echo,
                    const LogFn& log) {
  run.train.validate();
  run.model.validate();
  prepare_dir(out_dir);
  const auto data = make_dataset(run.data);

  std::unique_ptr<Stage1Models> models;
  std::map<std::string, Tensor> opt_state;
  int64_t start = 0;
  if (resume) {
    LoadedStage1 loaded = load_stage1(*resume);
    if (nlohmann::json(loaded.models->config) != nlohmann::json(run.model)) {
      throw std::runtime_error("resume checkpoint was trained with a different stage-1 model config");
    }
    models = std::move(loaded.models);
    opt_state = std::move(loaded.optimizer_state);
    start = loaded.step;
    log("resuming stage 1 from step " + std::to_string(start));
  } else {
    models = std::make_unique<Stage1Models>(run.model, run.train.seed);
  }
  AdamW opt(models->params, run.train.optimizer());
  if (!opt_state.empty()) opt.load_state(opt_state);

  RunPaths paths{out_dir, out_dir / "stage1.ckpt", out_dir / "stage1_metrics.jsonl"};
  truncate_metrics(paths.metrics, start);
  MetricsLog metrics(paths.metrics, echo);
  const auto t0 = Clock::now();
  const Rng root = Rng(run.train.seed).fork("stage1");
  const int64_t h0 = run.model.input_size;

  for (int64_t step = start + 1; step <= run.train.steps; ++step) {
    Rng rng = root.fork(static_cast<uint64_t>(step));
    std::vector<Stage1Batch> batch;
    for (int64_t b = 0; b < run.train.batch_size; ++b) {
      batch.push_back(make_stage1_batch(data->get(rng.below(data->size())).image, h0, h0, rng));
      if (batch.back().upscaled) log("step " + std::to_string(step) + ": source image upscaled to cover the crop");
    }
    const Stage1Losses l = stage1_step(*models, opt, batch, rng);
    nlohmann::json line = l.to_json();
    line["step"] = step;
    line["lr"] = run.train.lr;
    line["wall_time"] = std::chrono::duration<double>(Clock::now() - t0).count();
    metrics.write(std::move(line));
    if (step % run.train.checkpoint_every == 0) {
      save_stage1(out_dir / "checkpoints" / step_name("stage1", step), *models, &opt, step);
    }
    if (step % 100 == 0 || step == run.train.steps) {
      std::ostringstream os;
      os << "stage1 step " << step << "/" << run.train.steps << " L_rec=" << l.rec << " L_distill=" << l.distill
         << " w_adapt=" << l.w_adapt;
      log(os.str());
    }
  }
  save_stage1(paths.checkpoint, *models, &opt, std::max(start, run.train.steps));
  const LatentStats stats = compute_latent_stats(*data, *models, run.model.stats_subsample, run.train.seed);
  save_stats(out_dir / "stats.json", stats);
  return paths;
}

RunPaths run_stage2(const Stage2Run& run, const std::filesystem::path& out_dir,
                    const std::optional<std::filesystem::path>& resume, const nlohmann::json& echo,
                    const LogFn& log) {
  run.train.validate();
  run.model.validate();
  prepare_dir(out_dir);
  const auto data = make_dataset(run.data);
  auto stage1 = load_stage1(run.stage1_checkpoint).models;
  stage1->params.set_trainable(false);
  const LatentStats stats = load_stats(run.stats);
  if (stats.channels() != run.model.denoiser.latent_channels) {
    throw std::runtime_error("latent statistics have " + std::to_string(stats.channels()) +
                             " channels, denoiser expects " + std::to_string(run.model.denoiser.latent_channels));
  }
  const Shape latent_shape = stage1->encode(data->get(0).image).shape();
  run.model.denoiser.tokens_for(latent_shape[1], latent_shape[2]);

  std::unique_ptr<Stage2Models> models;
  std::map<std::string, Tensor> opt_state, ema_state;
  int64_t start = 0;
  if (resume) {
    LoadedStage2 loaded = load_stage2(*resume);
    if (nlohmann::json(loaded.models->config) != nlohmann::json(run.model)) {
      throw std::runtime_error("resume checkpoint was trained with a different stage-2 model config");
    }
    models = std::move(loaded.models);
    opt_state = std::move(loaded.optimizer_state);
    ema_state = std::move(loaded.ema_state);
    start = loaded.step;
    log("resuming stage 2 from step " + std::to_string(start));
  } else {
    models = std::make_unique<Stage2Models>(run.model, run.train.seed);
  }
  AdamW opt(models->params, run.train.optimizer());
  if (!opt_state.empty()) opt.load_state(opt_state);
  Ema ema(models->params, run.model.ema_decay);
  if (!ema_state.empty()) ema.shadow() = ema_state;

  RunPaths paths{out_dir, out_dir / "stage2.ckpt", out_dir / "stage2_metrics.jsonl"};
  truncate_metrics(paths.metrics, start);
  MetricsLog metrics(paths.metrics, echo);
  const auto t0 = Clock::now();
  const Rng root = Rng(run.train.seed).fork("stage2");

  for (int64_t step = start + 1; step <= run.train.steps; ++step) {
    Rng rng = root.fork(static_cast<uint64_t>(step));
    std::vector<Sample> batch;
    for (int64_t b = 0; b < run.train.batch_size; ++b) {
      batch.push_back(data->get(rng.below(data->size())));
      if (batch.back().image.shape() != data->get(0).image.shape()) {
        throw std::runtime_error("stage-2 training requires all images to share one size");
      }
    }
    const Stage2Losses l = stage2_step(*stage1, stats, *models, opt, &ema, batch, rng);
    nlohmann::json line = l.to_json();
    line["step"] = step;
    line["lr"] = run.train.lr;
    line["wall_time"] = std::chrono::duration<double>(Clock::now() - t0).count();
    metrics.write(std::move(line));
    if (step % run.train.checkpoint_every == 0) {
      save_stage2(out_dir / "checkpoints" / step_name("stage2", step), *models, &opt, &ema, step, latent_shape);
    }
    if (step % 100 == 0 || step == run.train.steps) {
      std::ostringstream os;
      os << "stage2 step " << step << "/" << run.train.steps << " L_FM=" << l.fm << " L_REPA=" << l.repa;
      log(os.str());
    }
  }
  save_stage2(paths.checkpoint, *models, &opt, &ema, std::max(start, run.train.steps), latent_shape);
  return paths;
}

// -------------------------------------------------------------- inference

GeneratedLatent generate_latent(const Stage2Models& models, const LatentStats& stats, const Shape& latent_shape,
                                const GenerateOptions& opts) {
  if (latent_shape.size() != 3) throw std::invalid_argument("latent shape must be [C,H,W]");
  const Denoiser& net = models.denoiser;
  NoGradGuard guard;
  const TextCondition cond = net.encode_text(opts.prompt);
  const TextCondition uncond = net.text_encoder().null_condition();
  const VelocityModel model = [&](const Var& u, double t, const Var& c) { return net.forward(u, t, c); };
  Rng rng = Rng(opts.seed).fork("generate");
  GeneratedLatent out;
  out.z_norm = euler_sample(model, latent_shape, cond.tokens, uncond.null_embedding, {opts.steps, opts.cfg_scale},
                            models.config.shift, rng);
  out.latent = denormalize_latent(out.z_norm, stats);
  out.denoiser_tokens = models.config.denoiser.tokens_for(latent_shape[1], latent_shape[2]);
  out.checksum = checksum(out.latent);
  return out;
}

}  // namespace nif
