#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <vector>

#include "nif/autoencoder.hpp"
#include "nif/geometry.hpp"

namespace nif::oracle {

using geometry::WindowPartition;

// Closed form of the pixel-center convention, evaluated independently.
inline double closed_form(int64_t i, int64_t n) { return (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n) - 1.0; }

// O(N^2) oracle for the windowed attention mask. A slot holds the token at
// ((sy + shift) mod Hp, (sx + shift) mod Wp) of the padded grid. Two real
// slots of the same window may attend iff their displacement in the
// original grid equals their displacement in the window, i.e. neither axis
// wrapped between them. Padding slots only see themselves.
inline bool oracle_allowed(const WindowPartition& p, int64_t w, int64_t i, int64_t j) {
  const int64_t wx = p.padded_width / p.window;
  const int64_t by = (w / wx) * p.window, bx = (w % wx) * p.window;
  auto locate = [&](int64_t slot, int64_t& sy, int64_t& sx, int64_t& oy, int64_t& ox) {
    sy = by + slot / p.window;
    sx = bx + slot % p.window;
    oy = (sy + p.shift) % p.padded_height;
    ox = (sx + p.shift) % p.padded_width;
  };
  int64_t syi, sxi, oyi, oxi, syj, sxj, oyj, oxj;
  locate(i, syi, sxi, oyi, oxi);
  locate(j, syj, sxj, oyj, oxj);
  const bool real_i = oyi < p.height && oxi < p.width;
  const bool real_j = oyj < p.height && oxj < p.width;
  if (!real_i || !real_j) return i == j;
  return (oyi - oyj == syi - syj) && (oxi - oxj == sxi - sxj);
}

inline bool mask_matches_oracle(const WindowPartition& p) {
  const int64_t t = p.tokens_per_window();
  for (int64_t w = 0; w < p.num_windows; ++w)
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < t; ++j) {
        const double m = p.mask[(w * t + i) * t + j];
        const bool allowed = oracle_allowed(p, w, i, j);
        if (allowed && m != 0.0) return false;
        if (!allowed && !(std::isinf(m) && m < 0.0)) return false;
      }
  return true;
}

inline void randomize(Var& v, Rng& rng, double sd) { v.mutable_value() = rng.normal_tensor(v.shape(), sd); }

inline void randomize_block(Renderer::Block& b, Rng& rng) {
  for (Var* v : {&b.norm1.gamma, &b.norm1.beta, &b.qkv.weight, &b.qkv.bias, &b.rel_bias_table, &b.proj.weight,
                 &b.proj.bias, &b.norm2.gamma, &b.norm2.beta, &b.ffn_in.weight, &b.ffn_in.bias, &b.ffn_out.weight,
                 &b.ffn_out.bias})
    randomize(*v, rng, 0.3);
}

inline std::vector<double> layer_norm_row(const double* x, int64_t d, const Tensor& g, const Tensor& b) {
  double mu = 0.0, var = 0.0;
  for (int64_t j = 0; j < d; ++j) mu += x[j];
  mu /= static_cast<double>(d);
  for (int64_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
  var /= static_cast<double>(d);
  std::vector<double> y(static_cast<size_t>(d));
  for (int64_t j = 0; j < d; ++j) y[j] = (x[j] - mu) / std::sqrt(var + 1e-6) * g[j] + b[j];
  return y;
}

inline std::vector<double> affine(const std::vector<double>& x, const Tensor& w, const Tensor& b) {
  const int64_t out = w.dim(0), in = w.dim(1);
  std::vector<double> y(static_cast<size_t>(out));
  for (int64_t o = 0; o < out; ++o) {
    double s = b[o];
    for (int64_t i = 0; i < in; ++i) s += w[o * in + i] * x[static_cast<size_t>(i)];
    y[static_cast<size_t>(o)] = s;
  }
  return y;
}

// Single-window renderer block evaluated with plain loops: pre-norm dense
// multi-head attention with relative bias, then the gated FFN.
inline Tensor dense_block_oracle(const Renderer::Block& b, const Tensor& x, int64_t window, int heads) {
  const int64_t n = x.dim(0), d = x.dim(1), dh = d / heads;
  std::vector<std::vector<double>> q(n), k(n), v(n);
  for (int64_t i = 0; i < n; ++i) {
    const auto h = layer_norm_row(x.data() + i * d, d, b.norm1.gamma.value(), b.norm1.beta.value());
    const auto qkv = affine(h, b.qkv.weight.value(), b.qkv.bias.value());
    q[i].assign(qkv.begin(), qkv.begin() + d);
    k[i].assign(qkv.begin() + d, qkv.begin() + 2 * d);
    v[i].assign(qkv.begin() + 2 * d, qkv.end());
  }
  const Tensor& table = b.rel_bias_table.value();
  Tensor out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    std::vector<double> attn(static_cast<size_t>(d), 0.0);
    for (int hd = 0; hd < heads; ++hd) {
      std::vector<double> s(static_cast<size_t>(n));
      double mx = -INFINITY;
      for (int64_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (int64_t e = 0; e < dh; ++e) dot += q[i][hd * dh + e] * k[j][hd * dh + e];
        const int64_t dy = i / window - j / window + window - 1, dx = i % window - j % window + window - 1;
        s[j] = dot / std::sqrt(static_cast<double>(dh)) + table[(dy * (2 * window - 1) + dx) * heads + hd];
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (int64_t j = 0; j < n; ++j)
        for (int64_t e = 0; e < dh; ++e) attn[hd * dh + e] += s[j] / z * v[j][hd * dh + e];
    }
    const auto proj = affine(attn, b.proj.weight.value(), b.proj.bias.value());
    std::vector<double> r(static_cast<size_t>(d));
    for (int64_t e = 0; e < d; ++e) r[e] = x[i * d + e] + proj[e];
    const auto h2 = layer_norm_row(r.data(), d, b.norm2.gamma.value(), b.norm2.beta.value());
    const auto u = affine(h2, b.ffn_in.weight.value(), b.ffn_in.bias.value());
    const int64_t hidden = static_cast<int64_t>(u.size()) / 2;
    std::vector<double> gated(static_cast<size_t>(hidden));
    for (int64_t e = 0; e < hidden; ++e) {
      const double a = u[e];
      gated[e] = 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0))) * u[hidden + e];
    }
    const auto f = affine(gated, b.ffn_out.weight.value(), b.ffn_out.bias.value());
    for (int64_t e = 0; e < d; ++e) out[i * d + e] = r[e] + f[e];
  }
  return out;
}

}  // namespace nif::oracle
