#include "nif/autoencoder.hpp"

#include <stdexcept>

namespace nif {

void EncoderConfig::validate() const {
  if (channels < 1) throw std::invalid_argument("encoder channels must be positive");
  if (res_blocks < 0) throw std::invalid_argument("encoder res_blocks must be non-negative");
}

void RendererConfig::validate() const {
  if (latent_channels < 1) throw std::invalid_argument("renderer latent_channels must be positive");
  if (hidden_dim < 1 || num_heads < 1 || hidden_dim % num_heads != 0) {
    throw std::invalid_argument("renderer hidden_dim must be divisible by num_heads");
  }
  if (num_blocks < 1) throw std::invalid_argument("renderer needs at least one block");
  if (window < 2 || window % 2 != 0) throw std::invalid_argument("renderer window must be even and >= 2");
  if (ffn_expansion < 1) throw std::invalid_argument("renderer ffn_expansion must be positive");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"channels", c.channels}, {"res_blocks", c.res_blocks}};
}
void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("channels").get_to(c.channels);
  j.at("res_blocks").get_to(c.res_blocks);
}
void to_json(nlohmann::json& j, const RendererConfig& c) {
  j = {{"latent_channels", c.latent_channels}, {"hidden_dim", c.hidden_dim}, {"num_blocks", c.num_blocks},
       {"num_heads", c.num_heads}, {"window", c.window}, {"ffn_expansion", c.ffn_expansion}};
}
void from_json(const nlohmann::json& j, RendererConfig& c) {
  j.at("latent_channels").get_to(c.latent_channels);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("num_blocks").get_to(c.num_blocks);
  j.at("num_heads").get_to(c.num_heads);
  j.at("window").get_to(c.window);
  j.at("ffn_expansion").get_to(c.ffn_expansion);
}

// ---------------------------------------------------------------- encoder

Encoder::Encoder(const EncoderConfig& cfg, ParamSet& params, Rng rng) : cfg_(cfg) {
  cfg_.validate();
  head_ = Conv2d(params, "encoder.head", 3, cfg.channels, 3, rng);
  for (int64_t i = 0; i < cfg.res_blocks; ++i) {
    const std::string p = "encoder.block" + std::to_string(i);
    Conv2d a(params, p + ".conv1", cfg.channels, cfg.channels, 3, rng);
    Conv2d b(params, p + ".conv2", cfg.channels, cfg.channels, 3, rng);
    blocks_.emplace_back(a, b);
  }
  body_tail_ = Conv2d(params, "encoder.tail", cfg.channels, cfg.channels, 3, rng);
}

Var Encoder::encode(const Var& image) const {
  const Tensor& x = image.value();
  if (x.rank() != 3 || x.dim(0) != 3) {
    throw std::invalid_argument("encoder expects a 3-channel [3,H,W] image, got " + shape_str(x.shape()));
  }
  if (x.dim(1) < 8 || x.dim(2) < 8) {
    throw std::invalid_argument("encoder input must be at least 8x8, got " + shape_str(x.shape()));
  }
  const Var head = head_(image);
  Var h = head;
  for (const auto& [c1, c2] : blocks_) h = ops::add(h, c2(ops::relu(c1(h))));
  return ops::add(head, body_tail_(h));
}

// --------------------------------------------------------------- renderer

Renderer::Renderer(const RendererConfig& cfg, ParamSet& params, Rng rng) : cfg_(cfg) {
  cfg_.validate();
  const int64_t d = cfg.hidden_dim;
  in_proj_ = Linear(params, "renderer.in_proj", cfg.token_input_dim(), d, rng);
  const int64_t table_rows = (2 * cfg.window - 1) * (2 * cfg.window - 1);
  for (int64_t i = 0; i < cfg.num_blocks; ++i) {
    const std::string p = "renderer.block" + std::to_string(i);
    Block b;
    b.norm1 = LayerNorm(params, p + ".norm1", d);
    b.qkv = Linear(params, p + ".qkv", d, 3 * d, rng);
    b.rel_bias_table = params.add(p + ".rel_bias", rng.normal_tensor({table_rows, cfg.num_heads}, 0.02));
    b.proj = Linear(params, p + ".proj", d, d, rng);
    b.norm2 = LayerNorm(params, p + ".norm2", d);
    b.ffn_in = Linear(params, p + ".ffn_in", d, 2 * cfg.ffn_expansion * d, rng);
    b.ffn_out = Linear(params, p + ".ffn_out", cfg.ffn_expansion * d, d, rng);
    blocks_.push_back(std::move(b));
  }
  final_norm_ = LayerNorm(params, "renderer.final_norm", d);
  out_proj_ = Linear(params, "renderer.out_proj", d, 3, rng);
  out_proj_.zero_init();
  rel_index_ = geometry::relative_position_index(cfg.window);
}

Var Renderer::token_features(const Var& latent, const geometry::CoordGrid& grid) const {
  const Tensor& z = latent.value();
  if (z.rank() != 3 || z.dim(0) != cfg_.latent_channels) {
    throw std::invalid_argument("renderer expects a [" + std::to_string(cfg_.latent_channels) +
                                ",H,W] latent, got " + shape_str(z.shape()));
  }
  if (!z.all_finite()) throw std::invalid_argument("renderer received a non-finite latent");
  const auto qg = geometry::query_geometry(grid, z.dim(1), z.dim(2));
  const int64_t n = grid.size();
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = qg.nearest_flat(i);
  const Var feat = ops::gather_rows(ops::chw_to_rows(latent), idx);
  Tensor geo({n, 6});
  for (int64_t i = 0; i < n; ++i) {
    geo[i * 6 + 0] = qg.delta_q[i * 2];
    geo[i * 6 + 1] = qg.delta_q[i * 2 + 1];
    geo[i * 6 + 2] = qg.delta_c[i * 2];
    geo[i * 6 + 3] = qg.delta_c[i * 2 + 1];
    geo[i * 6 + 4] = grid.coords[i * 2];
    geo[i * 6 + 5] = grid.coords[i * 2 + 1];
  }
  return ops::concat_cols({feat, Var(std::move(geo))});
}

Var Renderer::build_tokens(const Var& latent, const geometry::CoordGrid& grid) const {
  return in_proj_(token_features(latent, grid));
}

Var Renderer::block_forward(size_t index, const Var& tokens, const geometry::WindowPartition& plan) const {
  const Block& b = blocks_.at(index);
  const int64_t d = cfg_.hidden_dim;
  const int64_t t = plan.tokens_per_window();
  if (plan.window != cfg_.window) throw std::invalid_argument("window partition does not match renderer window");

  const Var win = geometry::partition_windows(b.norm1(tokens), plan);
  const Var qkv = b.qkv(win);
  const Shape bshape{plan.num_windows, t, d};
  const Var q = ops::reshape(ops::slice_cols(qkv, 0, d), bshape);
  const Var k = ops::reshape(ops::slice_cols(qkv, d, d), bshape);
  const Var v = ops::reshape(ops::slice_cols(qkv, 2 * d, d), bshape);
  const Var bias = ops::relative_bias(b.rel_bias_table, rel_index_, t);
  const Var attn = ops::attention(q, k, v, static_cast<int>(cfg_.num_heads), bias, &plan.mask);
  const Var out = geometry::reverse_windows(b.proj(ops::reshape(attn, {plan.num_windows * t, d})), plan);
  const Var x = ops::add(tokens, out);

  const int64_t hidden = cfg_.ffn_expansion * d;
  const Var u = b.ffn_in(b.norm2(x));
  const Var gated = ops::mul(ops::gelu(ops::slice_cols(u, 0, hidden)), ops::slice_cols(u, hidden, hidden));
  return ops::add(x, b.ffn_out(gated));
}

Var Renderer::render(const Var& latent, const geometry::CoordGrid& grid) const {
  Var x = build_tokens(latent, grid);
  const auto regular = geometry::plan_windows(grid.height, grid.width, cfg_.window, 0);
  const auto shifted = geometry::plan_windows(grid.height, grid.width, cfg_.window, cfg_.window / 2);
  for (size_t i = 0; i < blocks_.size(); ++i) x = block_forward(i, x, i % 2 == 1 ? shifted : regular);
  const Var rgb = ops::add_scalar(out_proj_(final_norm_(x)), 0.5);
  return ops::rows_to_chw(rgb, grid.height, grid.width);
}

// ------------------------------------------------------------- perceptual

RandomConvPerceptual::RandomConvPerceptual(uint64_t seed, int64_t width) {
  Rng rng(seed);
  layers_.emplace_back(params_, "perceptual.conv0", 3, width, 3, rng);
  layers_.emplace_back(params_, "perceptual.conv1", width, width, 3, rng);
  layers_.emplace_back(params_, "perceptual.conv2", width, width, 3, rng);
  params_.set_trainable(false);
}

std::vector<Var> RandomConvPerceptual::features(const Var& img) const {
  std::vector<Var> out;
  Var h = img;
  for (const Conv2d& c : layers_) {
    h = ops::relu(c(h));
    out.push_back(ops::l2_normalize_rows(ops::chw_to_rows(h)));
  }
  return out;
}

Var RandomConvPerceptual::operator()(const Var& pred, const Var& target) {
  require_same_shape(pred.value(), target.value(), "perceptual loss");
  const auto fp = features(pred);
  std::vector<Var> ft;
  {
    NoGradGuard guard;
    ft = features(target);
  }
  std::vector<Var> terms;
  for (size_t i = 0; i < fp.size(); ++i) terms.push_back(ops::mean(ops::square(ops::sub(fp[i], ft[i]))));
  return ops::add_n(terms);
}

std::unique_ptr<PerceptualLoss> make_perceptual(const std::string& name, uint64_t seed) {
  if (name == "none") return nullptr;
  if (name == "random_conv") return std::make_unique<RandomConvPerceptual>(seed);
  throw std::invalid_argument("unknown perceptual backend '" + name + "' (expected none or random_conv)");
}

ReconstructionLoss reconstruction_loss(const Var& pred, const Var& target, double omega, PerceptualLoss* perceptual) {
  require_same_shape(pred.value(), target.value(), "reconstruction_loss");
  if (omega < 0.0) throw std::invalid_argument("perceptual weight omega must be non-negative");
  ReconstructionLoss out;
  out.l1 = ops::mean(ops::abs(ops::sub(pred, target)));
  out.total = out.l1;
  if (omega > 0.0 && perceptual != nullptr) {
    out.perceptual = (*perceptual)(pred, target);
    out.total = ops::add(out.l1, ops::scale(out.perceptual, omega));
  }
  return out;
}

}  // namespace nif
