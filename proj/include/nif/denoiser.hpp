#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nif/guidance.hpp"
#include "nif/nn.hpp"

namespace nif {

struct DenoiserConfig {
  int64_t latent_channels = 16;
  int64_t hidden_dim = 256;
  int64_t num_blocks = 8;
  int64_t num_heads = 4;
  int64_t patch_size = 4;
  int64_t bottleneck_dim = 256;
  int64_t text_refine_blocks = 2;
  int64_t repa_block_index = 4;
  double repa_weight = 0.5;
  int64_t repa_hidden = 256;
  int64_t teacher_dim = 64;
  int64_t text_len = 16;
  int64_t text_dim = 64;
  int64_t text_vocab = 1024;
  std::string text_backend = "stub";
  int64_t time_freq_dim = 256;
  double mlp_ratio = 8.0 / 3.0;
  bool adaln_zero = true;

  void validate() const;
  int64_t head_dim() const { return hidden_dim / num_heads; }
  int64_t patch_dim() const { return latent_channels * patch_size * patch_size; }
  int64_t ffn_dim() const;
  int64_t tokens_for(int64_t latent_h, int64_t latent_w) const;

  static DenoiserConfig toy() { return {}; }
  // Full-size architecture; constructed in tests, never trained here.
  static DenoiserConfig paper_scale();
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

// Pure permutations between [C,H,W] and per-patch rows [N, C*p*p]. Row n
// is patch (n / (W/p), n % (W/p)); columns are ordered (c, dy, dx).
Var patchify(const Var& z, int64_t patch);
Var unpatchify(const Var& rows, int64_t channels, int64_t height, int64_t width, int64_t patch);

// Sinusoidal features [1, dim] of t scaled by 1000.
Tensor timestep_features(double t, int64_t dim);

struct TextCondition {
  Var tokens;          // [L, D_text]
  Var null_embedding;  // [L, D_text], learned
  bool is_null = false;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual TextCondition encode(const std::string& prompt) const = 0;
  virtual TextCondition null_condition() const = 0;
  virtual std::string backend() const = 0;
};

// Hashes whitespace-separated words into a learned embedding table; one
// row per word, zero rows as padding, truncated to L.
class StubTextEncoder final : public TextEncoder {
 public:
  StubTextEncoder(ParamSet& params, int64_t length, int64_t dim, int64_t vocab, Rng& rng);

  TextCondition encode(const std::string& prompt) const override;
  TextCondition null_condition() const override;
  std::string backend() const override { return "stub"; }
  std::vector<int64_t> token_ids(const std::string& prompt) const;

 private:
  int64_t length_;
  int64_t vocab_;
  Var table_;
  Var null_;
};

std::unique_ptr<TextEncoder> make_text_encoder(const DenoiserConfig& cfg, ParamSet& params, Rng& rng);

// Intermediate image tokens captured during a forward pass.
struct DenoiserTrace {
  Var repa_features;  // [N, hidden] after block repa_block_index
  int64_t token_count = 0;
  int64_t grid_h = 0;
  int64_t grid_w = 0;
};

class Denoiser {
 public:
  struct Modulated {
    Linear ada;  // hidden -> k * hidden
  };
  struct TextBlock {
    LayerNorm norm1, norm2;
    Linear ada;
    Linear qkv, proj;
    Linear ffn_in, ffn_out;
  };
  struct ImageBlock {
    LayerNorm norm1, norm2, norm3;
    Linear ada;
    Linear qkv, proj;
    RMSNorm q_norm, k_norm;
    Linear cross_q, cross_kv, cross_proj;
    RMSNorm cross_q_norm, cross_k_norm;
    Linear ffn_in, ffn_out;
  };

  Denoiser(const DenoiserConfig& cfg, ParamSet& params, Rng rng);

  // u: normalized latent [C,H,W]; text: [L, D_text]. Returns a velocity of
  // the same shape as u.
  Var forward(const Var& u, double t, const Var& text, DenoiserTrace* trace = nullptr) const;
  Var operator()(const Var& u, double t, const Var& text) const { return forward(u, t, text); }

  Var embed_patches(const Var& u) const;
  Var timestep_embedding(double t) const;
  Var refine_text(const Var& text, const Var& temb) const;
  Var image_block(size_t index, const Var& x, const Var& text, const Var& temb, int64_t grid_h,
                  int64_t grid_w) const;

  // Two-layer head hidden -> D_t applied to traced block features.
  Var repa_project(const Var& features) const;

  const DenoiserConfig& config() const { return cfg_; }
  const TextEncoder& text_encoder() const { return *text_; }
  TextCondition encode_text(const std::string& prompt) const { return text_->encode(prompt); }
  const std::vector<ImageBlock>& image_blocks() const { return blocks_; }

 private:
  Var self_attention(const Var& x, const Linear& qkv, const Linear& proj, const RMSNorm* qn, const RMSNorm* kn,
                     const std::vector<int64_t>* rows, const std::vector<int64_t>* cols) const;
  Var swiglu(const Var& x, const Linear& in, const Linear& out) const;

  DenoiserConfig cfg_;
  std::unique_ptr<TextEncoder> text_;
  Linear patch_in_, patch_hidden_;
  Linear time_mlp0_, time_mlp1_;
  Linear text_proj_;
  std::vector<TextBlock> text_blocks_;
  std::vector<ImageBlock> blocks_;
  LayerNorm final_norm_;
  Linear final_ada_;
  Linear final_out_;
  Linear repa0_, repa1_;
};

// Mean over positions of 1 - cos(projected_i, teacher_i); both [N, D].
Var repa_alignment_loss(const Var& projected, const Tensor& teacher_rows);

// Teacher features resized bilinearly to the token grid, as [N, D_t] rows.
Tensor teacher_rows_for_grid(const TeacherFeatures& teacher, int64_t grid_h, int64_t grid_w);

// Projects the traced block features and aligns them with the teacher.
Var repa_loss(const Denoiser& model, const DenoiserTrace& trace, const TeacherFeatures& teacher);

}  // namespace nif
