#pragma once

#include <optional>
#include <vector>

#include "nif/autograd.hpp"

// Differentiable tensor operations. Shapes use [rows, cols] for token
// matrices and [C, H, W] for images and latents.
namespace nif::ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// Sum of same-shaped terms.
Var add_n(const std::vector<Var>& terms);

Var relu(const Var& a);
Var gelu(const Var& a);
Var silu(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);

Var reshape(const Var& a, Shape shape);

// x[N,D] op v[D] broadcast over rows.
Var add_rowvec(const Var& x, const Var& v);
Var mul_rowvec(const Var& x, const Var& v);
// x * (1 + scale) + shift with scale/shift of shape [D].
Var modulate(const Var& x, const Var& shift, const Var& scale);

// a[M,K] @ b[K,N]
Var matmul(const Var& a, const Var& b);
// a[M,K] @ b[N,K]^T
Var matmul_nt(const Var& a, const Var& b);
// x[N,in] @ w[out,in]^T + b[out]; bias may be undefined.
Var linear(const Var& x, const Var& w, const Var& b);

Var transpose(const Var& a);
Var slice_cols(const Var& x, int64_t start, int64_t len);
Var concat_cols(const std::vector<Var>& parts);
// out[i] = x[idx[i]], or a zero row where idx[i] < 0.
Var gather_rows(const Var& x, const std::vector<int64_t>& idx);
// Row-wise dot product of two [N,D] matrices -> [N].
Var row_dot(const Var& a, const Var& b);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var rms_norm(const Var& x, const Var& gamma, double eps = 1e-6);
// x / max(||x||, eps) per row.
Var l2_normalize_rows(const Var& x, double eps = 1e-8);

// [C,H,W] <-> [H*W, C]
Var chw_to_rows(const Var& x);
Var rows_to_chw(const Var& x, int64_t height, int64_t width);

// Stride-1 convolution with symmetric zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int pad);
Var adaptive_avg_pool(const Var& x, int64_t out_h, int64_t out_w);

// Multi-head scaled dot-product attention over a batch of independent
// groups. q:[B,Nq,D] k,v:[B,Nk,D]. bias (optional, differentiable) is
// [heads,Nq,Nk] shared across the batch; mask (optional, constant) is
// [B,Nq,Nk] additive. Returns [B,Nq,D].
Var attention(const Var& q, const Var& k, const Var& v, int heads, const Var& bias = Var(),
              const Tensor* mask = nullptr);

// out[h, i, j] = table[index[i*N+j], h]; table is [(2W-1)^2, heads].
Var relative_bias(const Var& table, const std::vector<int64_t>& index, int64_t n);

// Axial 2D rotary encoding on x[N, heads*dh]: the first half of each head
// rotates with rows[i], the second half with cols[i].
Var rope2d(const Var& x, int heads, const std::vector<int64_t>& rows, const std::vector<int64_t>& cols,
           double base = 10000.0);

}  // namespace nif::ops
