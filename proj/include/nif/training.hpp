#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nif/autoencoder.hpp"
#include "nif/denoiser.hpp"
#include "nif/flowmatch.hpp"
#include "nif/geometry.hpp"
#include "nif/guidance.hpp"
#include "nif/optim.hpp"

namespace nif {

using LogFn = std::function<void(const std::string&)>;
void log_to_stderr(const std::string& line);

// ---------------------------------------------------------------- datasets

struct Sample {
  Tensor image;  // [3,H,W] in [0,1]
  std::string prompt;
};

class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual int64_t size() const = 0;
  virtual Sample get(int64_t index) const = 0;
  // Checksum over all images and prompts, as hex.
  std::string fingerprint() const;
};

// Procedural anti-aliased shapes on gradient backgrounds with template
// prompts such as "a red circle on a blue background".
class SyntheticDataset final : public Dataset {
 public:
  SyntheticDataset(int64_t count, int64_t size, uint64_t seed);
  int64_t size() const override { return static_cast<int64_t>(samples_.size()); }
  Sample get(int64_t index) const override { return samples_.at(static_cast<size_t>(index)); }

 private:
  std::vector<Sample> samples_;
};

// PNG files in a directory (sorted by name); an optional `<stem>.txt`
// beside each image holds its prompt.
class DirectoryDataset final : public Dataset {
 public:
  explicit DirectoryDataset(const std::filesystem::path& dir);
  int64_t size() const override { return static_cast<int64_t>(files_.size()); }
  Sample get(int64_t index) const override;

 private:
  std::vector<std::filesystem::path> files_;
};

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | directory
  std::string path;
  int64_t count = 8;
  int64_t image_size = 32;
  uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);
std::unique_ptr<Dataset> make_dataset(const DatasetConfig& cfg);

// ---------------------------------------------------------------- configs

struct TrainConfig {
  int stage = 1;
  int64_t steps = 2000;
  int64_t batch_size = 1;
  uint64_t seed = 0;
  double lr = 2e-4;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int64_t checkpoint_every = 500;

  void validate() const;
  AdamWConfig optimizer() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct Stage1Config {
  EncoderConfig encoder;
  RendererConfig renderer = RendererConfig::toy();
  DistillConfig distill;
  TeacherConfig teacher;
  double omega = 0.1;
  std::string perceptual = "random_conv";
  uint64_t perceptual_seed = 1234;
  int64_t input_size = 16;  // H0 = W0
  double stats_subsample = 1.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const Stage1Config& c);
void from_json(const nlohmann::json& j, Stage1Config& c);

struct Stage2Config {
  DenoiserConfig denoiser;
  TimestepShiftConfig shift;
  TeacherConfig teacher;
  double cfg_drop = 0.1;
  double ema_decay = 0.9999;

  void validate() const;
};

void to_json(nlohmann::json& j, const Stage2Config& c);
void from_json(const nlohmann::json& j, Stage2Config& c);

// ----------------------------------------------------------------- stage 1

struct Stage1Batch {
  Tensor x_in;   // [3,H0,W0]
  Tensor x_tar;  // [3,round(r*H0),round(r*W0)]
  geometry::CoordGrid grid;
  double r = 1.0;
  bool upscaled = false;  // source was smaller than the crop
};

// Round half to even.
int64_t round_half_even(double v);

Stage1Batch make_stage1_batch(const Tensor& image, int64_t h0, int64_t w0, Rng& rng);
// Deterministic variant with the scale and crop origin fixed; the origin
// is clamped into range.
Stage1Batch make_stage1_batch_at(const Tensor& image, int64_t h0, int64_t w0, double r, int64_t top, int64_t left);

// All Stage-1 weights in one parameter set.
struct Stage1Models {
  explicit Stage1Models(const Stage1Config& cfg, uint64_t seed = 0);

  Stage1Config config;
  ParamSet params;
  Encoder encoder;
  Renderer renderer;
  ProjectionBranch projection;
  std::unique_ptr<Teacher> teacher;
  std::unique_ptr<PerceptualLoss> perceptual;

  Tensor encode(const Tensor& image) const;
  Tensor render(const Tensor& latent, int64_t height, int64_t width) const;
};

struct Stage1Losses {
  double rec = 0.0;
  double l1 = 0.0;
  double perceptual = 0.0;
  double mcos = 0.0;
  double mdms = 0.0;
  double distill = 0.0;
  double grad_rec_norm = 0.0;      // at the encoder's last layer
  double grad_distill_norm = 0.0;  // at the encoder's last layer
  double w_adapt = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;  // pre-clip, combined gradient

  nlohmann::json to_json() const;
};

// One optimizer update. teacher_override replaces the teacher's features
// for every batch element when given.
Stage1Losses stage1_step(Stage1Models& models, AdamW& optimizer, const std::vector<Stage1Batch>& batch, Rng& rng,
                         const TeacherFeatures* teacher_override = nullptr);

// Reconstruction-only update used as a reference.
double stage1_reconstruction_step(Stage1Models& models, AdamW& optimizer, const std::vector<Stage1Batch>& batch);

// Per-channel stats of encoder latents over the full images.
LatentStats compute_latent_stats(const Dataset& data, const Stage1Models& models, double subsample = 1.0,
                                 uint64_t seed = 0);

// Mean L1 of scale-1 reconstructions of every image.
double reconstruction_error(const Dataset& data, const Stage1Models& models);

// ----------------------------------------------------------------- stage 2

struct Stage2Models {
  Stage2Models(const Stage2Config& cfg, uint64_t seed = 0);

  Stage2Config config;
  ParamSet params;
  Denoiser denoiser;
  std::unique_ptr<Teacher> teacher;
};

struct Stage2Losses {
  double fm = 0.0;
  double repa = 0.0;
  double total = 0.0;
  double t = 0.0;
  int64_t dropped = 0;
  double grad_norm = 0.0;

  nlohmann::json to_json() const;
};

struct Stage2Example {
  Tensor z_norm;  // normalized latent
  std::string prompt;
  TeacherFeatures teacher;
};

// One update on already-encoded examples.
Stage2Losses stage2_step_latents(Stage2Models& models, AdamW& optimizer, Ema* ema,
                                 const std::vector<Stage2Example>& batch, Rng& rng);

// Encodes images with the frozen Stage-1 encoder, then updates the
// denoiser. Throws std::logic_error if any Stage-1 weight receives a
// gradient.
Stage2Losses stage2_step(const Stage1Models& stage1, const LatentStats& stats, Stage2Models& models,
                         AdamW& optimizer, Ema* ema, const std::vector<Sample>& batch, Rng& rng);

// --------------------------------------------------------- checkpoints

void save_stage1(const std::filesystem::path& path, const Stage1Models& models, const AdamW* optimizer,
                 int64_t step);

struct LoadedStage1 {
  std::unique_ptr<Stage1Models> models;
  int64_t step = 0;
  std::map<std::string, Tensor> optimizer_state;
};
LoadedStage1 load_stage1(const std::filesystem::path& path);

void save_stage2(const std::filesystem::path& path, const Stage2Models& models, const AdamW* optimizer,
                 const Ema* ema, int64_t step, const Shape& latent_shape);

struct LoadedStage2 {
  std::unique_ptr<Stage2Models> models;
  int64_t step = 0;
  Shape latent_shape;
  std::map<std::string, Tensor> optimizer_state;
  std::map<std::string, Tensor> ema_state;
};
// use_ema copies the EMA track into the live weights.
LoadedStage2 load_stage2(const std::filesystem::path& path, bool use_ema = false);

// ------------------------------------------------------------ run loops

struct RunPaths {
  std::filesystem::path out_dir;
  std::filesystem::path checkpoint;  // final checkpoint
  std::filesystem::path metrics;     // JSON lines
};

struct Stage1Run {
  DatasetConfig data;
  Stage1Config model;
  TrainConfig train;
};

struct Stage2Run {
  DatasetConfig data;
  Stage2Config model;
  TrainConfig train;
  std::filesystem::path stage1_checkpoint;
  std::filesystem::path stats;
};

// Runs to train.steps, writing periodic and final checkpoints, the metrics
// log, and (Stage 1) the latent statistics. `resume` restores weights,
// optimizer state and the step counter. `echo` is stored in the first
// metrics line written by this invocation.
RunPaths run_stage1(const Stage1Run& run, const std::filesystem::path& out_dir,
                    const std::optional<std::filesystem::path>& resume, const nlohmann::json& echo,
                    const LogFn& log = log_to_stderr);
RunPaths run_stage2(const Stage2Run& run, const std::filesystem::path& out_dir,
                    const std::optional<std::filesystem::path>& resume, const nlohmann::json& echo,
                    const LogFn& log = log_to_stderr);

// -------------------------------------------------------------- inference

struct GenerateOptions {
  std::string prompt;
  uint64_t seed = 0;
  int steps = 25;
  double cfg_scale = 4.0;
};

struct GeneratedLatent {
  Tensor z_norm;
  Tensor latent;  // denormalized
  int64_t denoiser_tokens = 0;
  uint64_t checksum = 0;
};

GeneratedLatent generate_latent(const Stage2Models& models, const LatentStats& stats, const Shape& latent_shape,
                                const GenerateOptions& opts);

}  // namespace nif
