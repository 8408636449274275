#include "nif/denoiser.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "nif/image.hpp"
#include "nif/ops.hpp"

namespace nif {

void DenoiserConfig::validate() const {
  if (latent_channels < 1 || hidden_dim < 1 || bottleneck_dim < 1 || patch_size < 1) {
    throw std::invalid_argument("denoiser dimensions must be positive");
  }
  if (num_heads < 1 || hidden_dim % num_heads != 0) {
    throw std::invalid_argument("denoiser hidden_dim must be divisible by num_heads");
  }
  if (head_dim() % 4 != 0) throw std::invalid_argument("denoiser head dimension must be a multiple of 4");
  if (num_blocks < 1) throw std::invalid_argument("denoiser needs at least one image block");
  if (text_refine_blocks < 0) throw std::invalid_argument("text_refine_blocks must be non-negative");
  if (repa_block_index < 0 || repa_block_index >= num_blocks) {
    throw std::invalid_argument("repa_block_index must be < num_blocks");
  }
  if (repa_weight < 0.0) throw std::invalid_argument("repa_weight must be non-negative");
  if (text_len < 1 || text_dim < 1 || text_vocab < 1) throw std::invalid_argument("text dimensions must be positive");
  if (time_freq_dim < 2 || time_freq_dim % 2 != 0) throw std::invalid_argument("time_freq_dim must be even");
  if (!(mlp_ratio > 0.0)) throw std::invalid_argument("mlp_ratio must be positive");
}

int64_t DenoiserConfig::ffn_dim() const {
  return std::max<int64_t>(1, std::llround(mlp_ratio * static_cast<double>(hidden_dim)));
}

int64_t DenoiserConfig::tokens_for(int64_t latent_h, int64_t latent_w) const {
  if (latent_h % patch_size != 0 || latent_w % patch_size != 0) {
    throw std::invalid_argument("latent " + std::to_string(latent_h) + "x" + std::to_string(latent_w) +
                                " is not divisible by patch size " + std::to_string(patch_size));
  }
  return (latent_h / patch_size) * (latent_w / patch_size);
}

DenoiserConfig DenoiserConfig::paper_scale() {
  DenoiserConfig c;
  c.latent_channels = 16;
  c.hidden_dim = 1536;
  c.num_blocks = 16;
  c.num_heads = 24;
  c.patch_size = 16;
  c.bottleneck_dim = 1024;
  c.text_refine_blocks = 4;
  c.repa_block_index = 8;
  c.repa_hidden = 2048;
  c.teacher_dim = 768;
  c.text_len = 128;
  c.text_dim = 2048;
  return c;
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"latent_channels", c.latent_channels},
       {"hidden_dim", c.hidden_dim},
       {"num_blocks", c.num_blocks},
       {"num_heads", c.num_heads},
       {"patch_size", c.patch_size},
       {"bottleneck_dim", c.bottleneck_dim},
       {"text_refine_blocks", c.text_refine_blocks},
       {"repa_block_index", c.repa_block_index},
       {"repa_weight", c.repa_weight},
       {"repa_hidden", c.repa_hidden},
       {"teacher_dim", c.teacher_dim},
       {"text_len", c.text_len},
       {"text_dim", c.text_dim},
       {"text_vocab", c.text_vocab},
       {"text_backend", c.text_backend},
       {"time_freq_dim", c.time_freq_dim},
       {"mlp_ratio", c.mlp_ratio},
       {"adaln_zero", c.adaln_zero}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  j.at("latent_channels").get_to(c.latent_channels);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("num_blocks").get_to(c.num_blocks);
  j.at("num_heads").get_to(c.num_heads);
  j.at("patch_size").get_to(c.patch_size);
  j.at("bottleneck_dim").get_to(c.bottleneck_dim);
  j.at("text_refine_blocks").get_to(c.text_refine_blocks);
  j.at("repa_block_index").get_to(c.repa_block_index);
  j.at("repa_weight").get_to(c.repa_weight);
  j.at("repa_hidden").get_to(c.repa_hidden);
  j.at("teacher_dim").get_to(c.teacher_dim);
  j.at("text_len").get_to(c.text_len);
  j.at("text_dim").get_to(c.text_dim);
  j.at("text_vocab").get_to(c.text_vocab);
  j.at("text_backend").get_to(c.text_backend);
  j.at("time_freq_dim").get_to(c.time_freq_dim);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("adaln_zero").get_to(c.adaln_zero);
}

// ---------------------------------------------------------------- patches

namespace {

std::vector<int64_t> patch_order(int64_t c, int64_t h, int64_t w, int64_t p) {
  const int64_t gw = w / p, n = (h / p) * gw, pd = c * p * p;
  std::vector<int64_t> idx(static_cast<size_t>(n * pd));
  for (int64_t t = 0; t < n; ++t) {
    const int64_t py = t / gw, px = t % gw;
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t dy = 0; dy < p; ++dy)
        for (int64_t dx = 0; dx < p; ++dx) {
          const int64_t col = (ch * p + dy) * p + dx;
          idx[static_cast<size_t>(t * pd + col)] = (ch * h + py * p + dy) * w + px * p + dx;
        }
  }
  return idx;
}

}  // namespace

Var patchify(const Var& z, int64_t patch) {
  if (z.value().rank() != 3) throw std::invalid_argument("patchify expects [C,H,W], got " + shape_str(z.shape()));
  const int64_t c = z.dim(0), h = z.dim(1), w = z.dim(2);
  if (patch < 1 || h % patch != 0 || w % patch != 0) {
    throw std::invalid_argument("latent " + shape_str(z.shape()) + " is not divisible by patch size " +
                                std::to_string(patch));
  }
  const auto idx = patch_order(c, h, w, patch);
  const Var flat = ops::reshape(z, {c * h * w, 1});
  return ops::reshape(ops::gather_rows(flat, idx), {(h / patch) * (w / patch), c * patch * patch});
}

Var unpatchify(const Var& rows, int64_t channels, int64_t height, int64_t width, int64_t patch) {
  if (patch < 1 || height % patch != 0 || width % patch != 0) {
    throw std::invalid_argument("unpatchify: size not divisible by patch");
  }
  const Shape expect{(height / patch) * (width / patch), channels * patch * patch};
  if (rows.shape() != expect) {
    throw std::invalid_argument("unpatchify: expected rows " + shape_str(expect) + ", got " + shape_str(rows.shape()));
  }
  const auto fwd = patch_order(channels, height, width, patch);
  std::vector<int64_t> inv(fwd.size());
  for (size_t i = 0; i < fwd.size(); ++i) inv[static_cast<size_t>(fwd[i])] = static_cast<int64_t>(i);
  const Var flat = ops::reshape(rows, {static_cast<int64_t>(fwd.size()), 1});
  return ops::reshape(ops::gather_rows(flat, inv), {channels, height, width});
}

Tensor timestep_features(double t, int64_t dim) {
  const int64_t half = dim / 2;
  Tensor out(Shape{1, dim});
  for (int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = 1000.0 * t * freq;
    out[i] = std::cos(arg);
    out[half + i] = std::sin(arg);
  }
  return out;
}

// ------------------------------------------------------------------- text

StubTextEncoder::StubTextEncoder(ParamSet& params, int64_t length, int64_t dim, int64_t vocab, Rng& rng)
    : length_(length), vocab_(vocab) {
  table_ = params.add("text.table", rng.normal_tensor({vocab, dim}, 0.02));
  null_ = params.add("text.null", rng.normal_tensor({length, dim}, 0.02));
}

std::vector<int64_t> StubTextEncoder::token_ids(const std::string& prompt) const {
  std::istringstream is(prompt);
  std::vector<int64_t> ids;
  std::string word;
  while (is >> word && static_cast<int64_t>(ids.size()) < length_) {
    ids.push_back(static_cast<int64_t>(checksum_bytes(word.data(), word.size()) % static_cast<uint64_t>(vocab_)));
  }
  return ids;
}

TextCondition StubTextEncoder::encode(const std::string& prompt) const {
  auto ids = token_ids(prompt);
  if (ids.empty()) return null_condition();
  ids.resize(static_cast<size_t>(length_), -1);
  return TextCondition{ops::gather_rows(table_, ids), null_, false};
}

TextCondition StubTextEncoder::null_condition() const { return TextCondition{null_, null_, true}; }

std::unique_ptr<TextEncoder> make_text_encoder(const DenoiserConfig& cfg, ParamSet& params, Rng& rng) {
  if (cfg.text_backend == "stub") {
    return std::make_unique<StubTextEncoder>(params, cfg.text_len, cfg.text_dim, cfg.text_vocab, rng);
  }
  throw std::runtime_error("text backend '" + cfg.text_backend +
                           "' unavailable: only the built-in 'stub' encoder ships with this build");
}

// --------------------------------------------------------------- denoiser

Denoiser::Denoiser(const DenoiserConfig& cfg, ParamSet& params, Rng rng) : cfg_(cfg) {
  cfg_.validate();
  const int64_t d = cfg.hidden_dim, f = cfg.ffn_dim();
  text_ = make_text_encoder(cfg, params, rng);
  patch_in_ = Linear(params, "dit.patch_in", cfg.patch_dim(), cfg.bottleneck_dim, rng);
  patch_hidden_ = Linear(params, "dit.patch_hidden", cfg.bottleneck_dim, d, rng);
  time_mlp0_ = Linear(params, "dit.time0", cfg.time_freq_dim, d, rng);
  time_mlp1_ = Linear(params, "dit.time1", d, d, rng);
  text_proj_ = Linear(params, "dit.text_proj", cfg.text_dim, d, rng);

  auto maybe_zero = [&](Linear& l) {
    if (cfg.adaln_zero) l.zero_init();
  };
  for (int64_t i = 0; i < cfg.text_refine_blocks; ++i) {
    const std::string p = "dit.text" + std::to_string(i);
    TextBlock b;
    b.norm1 = LayerNorm(params, p + ".norm1", d, false);
    b.norm2 = LayerNorm(params, p + ".norm2", d, false);
    b.ada = Linear(params, p + ".ada", d, 6 * d, rng);
    maybe_zero(b.ada);
    b.qkv = Linear(params, p + ".qkv", d, 3 * d, rng);
    b.proj = Linear(params, p + ".proj", d, d, rng);
    b.ffn_in = Linear(params, p + ".ffn_in", d, 2 * f, rng);
    b.ffn_out = Linear(params, p + ".ffn_out", f, d, rng);
    text_blocks_.push_back(std::move(b));
  }
  const int64_t dh = cfg.head_dim();
  for (int64_t i = 0; i < cfg.num_blocks; ++i) {
    const std::string p = "dit.block" + std::to_string(i);
    ImageBlock b;
    b.norm1 = LayerNorm(params, p + ".norm1", d, false);
    b.norm2 = LayerNorm(params, p + ".norm2", d, false);
    b.norm3 = LayerNorm(params, p + ".norm3", d, false);
    b.ada = Linear(params, p + ".ada", d, 9 * d, rng);
    maybe_zero(b.ada);
    b.qkv = Linear(params, p + ".qkv", d, 3 * d, rng);
    b.proj = Linear(params, p + ".proj", d, d, rng);
    b.q_norm = RMSNorm(params, p + ".q_norm", dh);
    b.k_norm = RMSNorm(params, p + ".k_norm", dh);
    b.cross_q = Linear(params, p + ".cross_q", d, d, rng);
    b.cross_kv = Linear(params, p + ".cross_kv", d, 2 * d, rng);
    b.cross_proj = Linear(params, p + ".cross_proj", d, d, rng);
    b.cross_q_norm = RMSNorm(params, p + ".cross_q_norm", dh);
    b.cross_k_norm = RMSNorm(params, p + ".cross_k_norm", dh);
    b.ffn_in = Linear(params, p + ".ffn_in", d, 2 * f, rng);
    b.ffn_out = Linear(params, p + ".ffn_out", f, d, rng);
    blocks_.push_back(std::move(b));
  }
  final_norm_ = LayerNorm(params, "dit.final_norm", d, false);
  final_ada_ = Linear(params, "dit.final_ada", d, 2 * d, rng);
  maybe_zero(final_ada_);
  final_out_ = Linear(params, "dit.final_out", d, cfg.patch_dim(), rng);
  repa0_ = Linear(params, "repa.head0", d, cfg.repa_hidden, rng);
  repa1_ = Linear(params, "repa.head1", cfg.repa_hidden, cfg.teacher_dim, rng);
}

Var Denoiser::embed_patches(const Var& u) const {
  return patch_hidden_(patch_in_(patchify(u, cfg_.patch_size)));
}

Var Denoiser::timestep_embedding(double t) const {
  return time_mlp1_(ops::silu(time_mlp0_(Var(timestep_features(t, cfg_.time_freq_dim)))));
}

namespace {

// Per-head RMS normalization of [N, heads*dh].
Var head_rms(const Var& x, const RMSNorm& norm, int64_t heads) {
  const int64_t n = x.dim(0), d = x.dim(1);
  return ops::reshape(norm(ops::reshape(x, {n * heads, d / heads})), {n, d});
}

Var chunk(const Var& mod, int64_t i, int64_t d) { return ops::slice_cols(mod, i * d, d); }

void require_finite(const Var& x, const std::string& where) {
  if (!x.value().all_finite()) throw std::runtime_error("non-finite activations in " + where);
}

}  // namespace

Var Denoiser::self_attention(const Var& x, const Linear& qkv, const Linear& proj, const RMSNorm* qn,
                             const RMSNorm* kn, const std::vector<int64_t>* rows,
                             const std::vector<int64_t>* cols) const {
  const int64_t n = x.dim(0), d = cfg_.hidden_dim;
  const int heads = static_cast<int>(cfg_.num_heads);
  const Var h = qkv(x);
  Var q = ops::slice_cols(h, 0, d);
  Var k = ops::slice_cols(h, d, d);
  const Var v = ops::slice_cols(h, 2 * d, d);
  if (qn) q = head_rms(q, *qn, heads);
  if (kn) k = head_rms(k, *kn, heads);
  if (rows) {
    q = ops::rope2d(q, heads, *rows, *cols);
    k = ops::rope2d(k, heads, *rows, *cols);
  }
  const Var o = ops::attention(ops::reshape(q, {1, n, d}), ops::reshape(k, {1, n, d}), ops::reshape(v, {1, n, d}),
                               heads);
  return proj(ops::reshape(o, {n, d}));
}

Var Denoiser::swiglu(const Var& x, const Linear& in, const Linear& out) const {
  const int64_t f = cfg_.ffn_dim();
  const Var h = in(x);
  return out(ops::mul(ops::silu(ops::slice_cols(h, 0, f)), ops::slice_cols(h, f, f)));
}

Var Denoiser::refine_text(const Var& text, const Var& temb) const {
  if (text.value().rank() != 2 || text.dim(1) != cfg_.text_dim) {
    throw std::invalid_argument("text condition must be [L," + std::to_string(cfg_.text_dim) + "], got " +
                                shape_str(text.shape()));
  }
  const int64_t d = cfg_.hidden_dim;
  const Var c = ops::silu(temb);
  Var x = text_proj_(text);
  for (size_t i = 0; i < text_blocks_.size(); ++i) {
    const TextBlock& b = text_blocks_[i];
    const Var mod = b.ada(c);
    const Var a = self_attention(ops::modulate(b.norm1(x), chunk(mod, 0, d), chunk(mod, 1, d)), b.qkv, b.proj,
                                 nullptr, nullptr, nullptr, nullptr);
    x = ops::add(x, ops::mul_rowvec(a, chunk(mod, 2, d)));
    const Var m = swiglu(ops::modulate(b.norm2(x), chunk(mod, 3, d), chunk(mod, 4, d)), b.ffn_in, b.ffn_out);
    x = ops::add(x, ops::mul_rowvec(m, chunk(mod, 5, d)));
    require_finite(x, "text block " + std::to_string(i));
  }
  return x;
}

Var Denoiser::image_block(size_t index, const Var& x_in, const Var& text, const Var& temb, int64_t grid_h,
                          int64_t grid_w) const {
  const ImageBlock& b = blocks_.at(index);
  const int64_t d = cfg_.hidden_dim;
  const int heads = static_cast<int>(cfg_.num_heads);
  const int64_t n = x_in.dim(0), l = text.dim(0);
  std::vector<int64_t> rows(static_cast<size_t>(n)), cols(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    rows[static_cast<size_t>(i)] = i / grid_w;
    cols[static_cast<size_t>(i)] = i % grid_w;
  }
  if (grid_h * grid_w != n) throw std::invalid_argument("image block: token grid mismatch");
  const Var mod = b.ada(ops::silu(temb));

  Var x = x_in;
  const Var a = self_attention(ops::modulate(b.norm1(x), chunk(mod, 0, d), chunk(mod, 1, d)), b.qkv, b.proj,
                               &b.q_norm, &b.k_norm, &rows, &cols);
  x = ops::add(x, ops::mul_rowvec(a, chunk(mod, 2, d)));

  const Var xq = ops::modulate(b.norm2(x), chunk(mod, 3, d), chunk(mod, 4, d));
  const Var q = head_rms(b.cross_q(xq), b.cross_q_norm, heads);
  const Var kv = b.cross_kv(text);
  const Var k = head_rms(ops::slice_cols(kv, 0, d), b.cross_k_norm, heads);
  const Var v = ops::slice_cols(kv, d, d);
  const Var o = ops::attention(ops::reshape(q, {1, n, d}), ops::reshape(k, {1, l, d}), ops::reshape(v, {1, l, d}),
                               heads);
  x = ops::add(x, ops::mul_rowvec(b.cross_proj(ops::reshape(o, {n, d})), chunk(mod, 5, d)));

  const Var m = swiglu(ops::modulate(b.norm3(x), chunk(mod, 6, d), chunk(mod, 7, d)), b.ffn_in, b.ffn_out);
  return ops::add(x, ops::mul_rowvec(m, chunk(mod, 8, d)));
}

Var Denoiser::forward(const Var& u, double t, const Var& text, DenoiserTrace* trace) const {
  const Tensor& z = u.value();
  if (z.rank() != 3 || z.dim(0) != cfg_.latent_channels) {
    throw std::invalid_argument("denoiser expects a [" + std::to_string(cfg_.latent_channels) + ",H,W] latent, got " +
                                shape_str(z.shape()));
  }
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("denoiser timestep must lie in [0,1]");
  const int64_t h = z.dim(1), w = z.dim(2);
  const int64_t n = cfg_.tokens_for(h, w);
  const int64_t gh = h / cfg_.patch_size, gw = w / cfg_.patch_size;

  const Var temb = timestep_embedding(t);
  const Var txt = refine_text(text, temb);
  Var x = embed_patches(u);
  for (size_t i = 0; i < blocks_.size(); ++i) {
    x = image_block(i, x, txt, temb, gh, gw);
    require_finite(x, "image block " + std::to_string(i));
    if (trace && static_cast<int64_t>(i) == cfg_.repa_block_index) trace->repa_features = x;
  }
  if (trace) {
    trace->token_count = n;
    trace->grid_h = gh;
    trace->grid_w = gw;
  }
  const int64_t d = cfg_.hidden_dim;
  const Var mod = final_ada_(ops::silu(temb));
  const Var out = final_out_(ops::modulate(final_norm_(x), chunk(mod, 0, d), chunk(mod, 1, d)));
  return unpatchify(out, cfg_.latent_channels, h, w, cfg_.patch_size);
}

Var Denoiser::repa_project(const Var& features) const { return repa1_(ops::silu(repa0_(features))); }

// ------------------------------------------------------------------- REPA

Var repa_alignment_loss(const Var& projected, const Tensor& teacher_rows) {
  if (projected.shape() != teacher_rows.shape()) {
    throw std::invalid_argument("repa: projected features " + shape_str(projected.shape()) +
                                " do not match teacher features " + shape_str(teacher_rows.shape()));
  }
  const Var cos = ops::row_dot(ops::l2_normalize_rows(projected), ops::l2_normalize_rows(Var(teacher_rows)));
  return ops::mean(ops::add_scalar(ops::scale(cos, -1.0), 1.0));
}

Tensor teacher_rows_for_grid(const TeacherFeatures& teacher, int64_t grid_h, int64_t grid_w) {
  Tensor f = teacher.values;
  if (teacher.grid_height() != grid_h || teacher.grid_width() != grid_w) {
    f = image::resize_bilinear(f, grid_h, grid_w, false);
  }
  NoGradGuard guard;
  return ops::chw_to_rows(Var(f)).value();
}

Var repa_loss(const Denoiser& model, const DenoiserTrace& trace, const TeacherFeatures& teacher) {
  if (!trace.repa_features.defined()) throw std::invalid_argument("repa_loss: no traced block features");
  if (teacher.dim() != model.config().teacher_dim) {
    throw std::invalid_argument("repa_loss: teacher width " + std::to_string(teacher.dim()) +
                                " does not match head output " + std::to_string(model.config().teacher_dim));
  }
  return repa_alignment_loss(model.repa_project(trace.repa_features),
                             teacher_rows_for_grid(teacher, trace.grid_h, trace.grid_w));
}

}  // namespace nif
