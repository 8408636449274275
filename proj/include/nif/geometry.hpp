#pragma once

#include <cstdint>
#include <vector>

#include "nif/autograd.hpp"
#include "nif/tensor.hpp"

// Continuous coordinate system over [-1, 1]^2. Axis order is (vertical,
// horizontal) everywhere and grids are stored row-major.
namespace nif::geometry {

// Pixel-center coordinates and cell extents for an output of size
// height x width.
struct CoordGrid {
  int64_t height = 0;
  int64_t width = 0;
  Tensor coords;  // [height, width, 2]
  Tensor cells;   // [height, width, 2]

  int64_t size() const { return height * width; }
};

CoordGrid make_coord_grid(int64_t height, int64_t width);

// Relation of every query in a CoordGrid to a latent grid.
struct QueryGeometry {
  int64_t latent_height = 0;
  int64_t latent_width = 0;
  std::vector<int64_t> nearest_row;  // per query
  std::vector<int64_t> nearest_col;
  Tensor delta_q;  // [H', W', 2], q - q*
  Tensor delta_c;  // [H', W', 2], cell extent in latent-cell units

  // Row-major flat index into the latent grid for query i.
  int64_t nearest_flat(int64_t i) const {
    return nearest_row[static_cast<size_t>(i)] * latent_width + nearest_col[static_cast<size_t>(i)];
  }
};

// Nearest latent center under the same pixel-center convention; ties go to
// the lower index.
QueryGeometry query_geometry(const CoordGrid& grid, int64_t latent_height, int64_t latent_width);

// Window layout for (shifted) windowed attention over an H x W token grid.
// The grid is padded on the bottom/right to a multiple of the window,
// cyclically shifted up/left by `shift`, and cut into window x window tiles.
struct WindowPartition {
  int64_t height = 0;
  int64_t width = 0;
  int64_t padded_height = 0;
  int64_t padded_width = 0;
  int64_t window = 0;
  int64_t shift = 0;
  int64_t num_windows = 0;
  // Source token (row-major in the H x W grid) for every windowed slot, or -1
  // for padding. Length num_windows * window^2.
  std::vector<int64_t> gather_index;
  // Windowed slot holding each source token. Length H * W.
  std::vector<int64_t> scatter_index;
  // Additive mask [num_windows, window^2, window^2]: 0 where attention is
  // allowed, -inf otherwise.
  Tensor mask;

  int64_t tokens_per_window() const { return window * window; }
};

WindowPartition plan_windows(int64_t height, int64_t width, int64_t window, int64_t shift);

// [H*W, D] -> [num_windows * window^2, D]
Var partition_windows(const Var& tokens, const WindowPartition& plan);
// Inverse of partition_windows; padding slots are dropped.
Var reverse_windows(const Var& windows, const WindowPartition& plan);

// Relative-position table row for every (i, j) pair of a window x window
// tile; table has (2*window - 1)^2 rows.
std::vector<int64_t> relative_position_index(int64_t window);

}  // namespace nif::geometry
