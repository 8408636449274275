#include "nif/geometry.hpp"

#include <limits>
#include <stdexcept>
#include <string>

#include "nif/ops.hpp"

namespace nif::geometry {

namespace {

double center(int64_t i, int64_t n) { return static_cast<double>(2 * i + 1) / static_cast<double>(n) - 1.0; }

// Index of the latent cell nearest to output pixel i, computed exactly in
// integers: ceil((2i+1) * n_latent / (2 n_out)) - 1, ties to the lower index.
int64_t nearest_cell(int64_t i, int64_t n_out, int64_t n_latent) {
  const int64_t num = (2 * i + 1) * n_latent;
  const int64_t den = 2 * n_out;
  int64_t k = (num + den - 1) / den - 1;
  if (k < 0) k = 0;
  if (k >= n_latent) k = n_latent - 1;
  return k;
}

}  // namespace

CoordGrid make_coord_grid(int64_t height, int64_t width) {
  if (height < 1 || width < 1) {
    throw std::invalid_argument("coordinate grid dimensions must be positive, got " + std::to_string(height) + "x" +
                                std::to_string(width));
  }
  CoordGrid g;
  g.height = height;
  g.width = width;
  g.coords = Tensor({height, width, 2});
  g.cells = Tensor({height, width, 2});
  const double ch = 2.0 / static_cast<double>(height);
  const double cw = 2.0 / static_cast<double>(width);
  for (int64_t i = 0; i < height; ++i)
    for (int64_t j = 0; j < width; ++j) {
      const int64_t o = (i * width + j) * 2;
      g.coords[o] = center(i, height);
      g.coords[o + 1] = center(j, width);
      g.cells[o] = ch;
      g.cells[o + 1] = cw;
    }
  return g;
}

QueryGeometry query_geometry(const CoordGrid& grid, int64_t latent_height, int64_t latent_width) {
  if (latent_height < 1 || latent_width < 1) {
    throw std::invalid_argument("latent grid dimensions must be positive");
  }
  if (grid.height < 1 || grid.width < 1 || grid.coords.numel() != grid.height * grid.width * 2) {
    throw std::invalid_argument("malformed coordinate grid");
  }
  QueryGeometry qg;
  qg.latent_height = latent_height;
  qg.latent_width = latent_width;
  const int64_t n = grid.size();
  qg.nearest_row.resize(static_cast<size_t>(n));
  qg.nearest_col.resize(static_cast<size_t>(n));
  qg.delta_q = Tensor({grid.height, grid.width, 2});
  qg.delta_c = Tensor({grid.height, grid.width, 2});
  for (int64_t i = 0; i < grid.height; ++i) {
    const int64_t r = nearest_cell(i, grid.height, latent_height);
    for (int64_t j = 0; j < grid.width; ++j) {
      const int64_t c = nearest_cell(j, grid.width, latent_width);
      const int64_t q = i * grid.width + j;
      const double qy = grid.coords[q * 2], qx = grid.coords[q * 2 + 1];
      if (qy < -1.0 || qy > 1.0 || qx < -1.0 || qx > 1.0) {
        throw std::out_of_range("query coordinate outside [-1, 1]^2");
      }
      qg.nearest_row[static_cast<size_t>(q)] = r;
      qg.nearest_col[static_cast<size_t>(q)] = c;
      qg.delta_q[q * 2] = qy - center(r, latent_height);
      qg.delta_q[q * 2 + 1] = qx - center(c, latent_width);
      qg.delta_c[q * 2] = grid.cells[q * 2] * static_cast<double>(latent_height);
      qg.delta_c[q * 2 + 1] = grid.cells[q * 2 + 1] * static_cast<double>(latent_width);
    }
  }
  return qg;
}

WindowPartition plan_windows(int64_t height, int64_t width, int64_t window, int64_t shift) {
  if (height < 1 || width < 1) throw std::invalid_argument("token grid dimensions must be positive");
  if (window < 1) throw std::invalid_argument("window size must be positive");
  if (shift < 0 || shift >= window) {
    throw std::invalid_argument("window shift " + std::to_string(shift) + " outside [0, " + std::to_string(window) +
                                ")");
  }
  WindowPartition p;
  p.height = height;
  p.width = width;
  p.window = window;
  p.shift = shift;
  p.padded_height = (height + window - 1) / window * window;
  p.padded_width = (width + window - 1) / window * window;
  if (window > p.padded_height || window > p.padded_width) {
    throw std::invalid_argument("window larger than padded token grid");
  }
  const int64_t wy = p.padded_height / window, wx = p.padded_width / window;
  const int64_t t = window * window;
  p.num_windows = wy * wx;
  p.gather_index.assign(static_cast<size_t>(p.num_windows * t), -1);
  p.scatter_index.assign(static_cast<size_t>(height * width), -1);

  // Region label on the shifted grid: tokens that wrapped around the seam
  // form their own region, so only spatially contiguous tokens interact.
  auto region = [&](int64_t y, int64_t extent) -> int64_t {
    if (shift == 0) return 0;
    if (y < extent - window) return 0;
    if (y < extent - shift) return 1;
    return 2;
  };
  std::vector<int64_t> label(static_cast<size_t>(p.num_windows * t));

  for (int64_t a = 0; a < wy; ++a)
    for (int64_t b = 0; b < wx; ++b)
      for (int64_t u = 0; u < window; ++u)
        for (int64_t v = 0; v < window; ++v) {
          const int64_t sy = a * window + u, sx = b * window + v;
          const int64_t oy = (sy + shift) % p.padded_height;
          const int64_t ox = (sx + shift) % p.padded_width;
          const int64_t slot = (a * wx + b) * t + u * window + v;
          label[static_cast<size_t>(slot)] = region(sy, p.padded_height) * 3 + region(sx, p.padded_width);
          if (oy < height && ox < width) {
            const int64_t src = oy * width + ox;
            p.gather_index[static_cast<size_t>(slot)] = src;
            p.scatter_index[static_cast<size_t>(src)] = slot;
          }
        }

  const double blocked = -std::numeric_limits<double>::infinity();
  p.mask = Tensor({p.num_windows, t, t}, 0.0);
  for (int64_t w = 0; w < p.num_windows; ++w)
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < t; ++j) {
        const auto si = static_cast<size_t>(w * t + i), sj = static_cast<size_t>(w * t + j);
        const bool real_i = p.gather_index[si] >= 0, real_j = p.gather_index[sj] >= 0;
        bool allowed;
        if (!real_i || !real_j) {
          allowed = (i == j);  // padding only sees itself
        } else {
          allowed = label[si] == label[sj];
        }
        if (!allowed) p.mask[(w * t + i) * t + j] = blocked;
      }
  return p;
}

Var partition_windows(const Var& tokens, const WindowPartition& plan) {
  if (tokens.value().rank() != 2 || tokens.dim(0) != plan.height * plan.width) {
    throw std::invalid_argument("partition_windows: expected [" + std::to_string(plan.height * plan.width) +
                                ", D] tokens, got " + shape_str(tokens.shape()));
  }
  return ops::gather_rows(tokens, plan.gather_index);
}

Var reverse_windows(const Var& windows, const WindowPartition& plan) {
  if (windows.value().rank() != 2 || windows.dim(0) != plan.num_windows * plan.tokens_per_window()) {
    throw std::invalid_argument("reverse_windows: unexpected windowed token shape " + shape_str(windows.shape()));
  }
  return ops::gather_rows(windows, plan.scatter_index);
}

std::vector<int64_t> relative_position_index(int64_t window) {
  const int64_t t = window * window;
  std::vector<int64_t> idx(static_cast<size_t>(t * t));
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < t; ++j) {
      const int64_t dy = i / window - j / window + window - 1;
      const int64_t dx = i % window - j % window + window - 1;
      idx[static_cast<size_t>(i * t + j)] = dy * (2 * window - 1) + dx;
    }
  return idx;
}

}  // namespace nif::geometry
