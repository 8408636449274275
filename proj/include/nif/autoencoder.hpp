#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nif/geometry.hpp"
#include "nif/nn.hpp"
#include "nif/serialize.hpp"

namespace nif {

// EDSR-style encoder without downsampling: the latent has the spatial size
// of the input image.
struct EncoderConfig {
  int64_t channels = 16;
  int64_t res_blocks = 8;

  void validate() const;
};

struct RendererConfig {
  int64_t latent_channels = 16;
  int64_t hidden_dim = 256;
  int64_t num_blocks = 4;
  int64_t num_heads = 4;
  int64_t window = 8;
  int64_t ffn_expansion = 2;

  void validate() const;
  // Width of the per-query input: latent feature, offset, cell, coordinate.
  int64_t token_input_dim() const { return latent_channels + 6; }

  static RendererConfig paper_scale() { return {}; }
  static RendererConfig toy() { return {16, 32, 2, 2, 8, 2}; }
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const RendererConfig& c);
void from_json(const nlohmann::json& j, RendererConfig& c);

class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, ParamSet& params, Rng rng);

  // image [3,H,W] -> latent [C,H,W]
  Var encode(const Var& image) const;
  // Parameters of the final convolution in the forward pass.
  std::vector<Var> last_layer_params() const { return {body_tail_.weight, body_tail_.bias}; }
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  Conv2d head_;
  std::vector<std::pair<Conv2d, Conv2d>> blocks_;
  Conv2d body_tail_;
};

// Coordinate-queried windowed-attention renderer.
class Renderer {
 public:
  struct Block {
    LayerNorm norm1;
    Linear qkv;
    Var rel_bias_table;  // [(2W-1)^2, heads]
    Linear proj;
    LayerNorm norm2;
    Linear ffn_in;  // D -> 2 * expansion * D, split into gate/value halves
    Linear ffn_out;
  };

  Renderer(const RendererConfig& cfg, ParamSet& params, Rng rng);

  // Concatenated per-query input (feature, delta_q, delta_c, q): [H'W', C+6].
  Var token_features(const Var& latent, const geometry::CoordGrid& grid) const;
  // Projected tokens [H'W', D].
  Var build_tokens(const Var& latent, const geometry::CoordGrid& grid) const;
  // One transformer block over the H' x W' token grid, given its partition.
  Var block_forward(size_t index, const Var& tokens, const geometry::WindowPartition& plan) const;
  // latent [C,H,W] -> RGB [3,H',W']
  Var render(const Var& latent, const geometry::CoordGrid& grid) const;
  Var render(const Var& latent, int64_t height, int64_t width) const {
    return render(latent, geometry::make_coord_grid(height, width));
  }

  const RendererConfig& config() const { return cfg_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::vector<Block>& blocks() { return blocks_; }
  const Linear& input_proj() const { return in_proj_; }
  Linear& output_proj() { return out_proj_; }
  const LayerNorm& final_norm() const { return final_norm_; }
  const std::vector<int64_t>& rel_index() const { return rel_index_; }

 private:
  RendererConfig cfg_;
  Linear in_proj_;
  std::vector<Block> blocks_;
  LayerNorm final_norm_;
  Linear out_proj_;
  std::vector<int64_t> rel_index_;
};

// Pluggable perceptual distance between two images.
class PerceptualLoss {
 public:
  virtual ~PerceptualLoss() = default;
  virtual Var operator()(const Var& pred, const Var& target) = 0;
  virtual std::string name() const = 0;
};

// Frozen three-layer random convolution stack; mean squared distance of
// channel-normalized features summed over layers.
class RandomConvPerceptual final : public PerceptualLoss {
 public:
  explicit RandomConvPerceptual(uint64_t seed = 1234, int64_t width = 8);
  Var operator()(const Var& pred, const Var& target) override;
  std::string name() const override { return "random_conv"; }

 private:
  std::vector<Var> features(const Var& img) const;

  ParamSet params_;
  std::vector<Conv2d> layers_;
};

std::unique_ptr<PerceptualLoss> make_perceptual(const std::string& name, uint64_t seed);

struct ReconstructionLoss {
  Var total;
  Var l1;
  Var perceptual;  // undefined when omega == 0 or no perceptual backend
};

// L1 + omega * perceptual(pred, target).
ReconstructionLoss reconstruction_loss(const Var& pred, const Var& target, double omega,
                                       PerceptualLoss* perceptual);

}  // namespace nif
