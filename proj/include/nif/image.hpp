#pragma once

#include <filesystem>

#include "nif/tensor.hpp"

// Images are [3, H, W] tensors with nominal range [0, 1].
namespace nif::image {

Tensor read_png(const std::filesystem::path& path);
// Values are clamped to [0, 1] and quantized with round(255 * v).
void write_png(const std::filesystem::path& path, const Tensor& img);

// Separable triangle-filter resize of any [C,H,W] tensor. With antialias
// the filter support grows with the downscale factor; at scale 1 the
// result equals the input.
Tensor resize_bilinear(const Tensor& img, int64_t out_h, int64_t out_w, bool antialias = true);

Tensor crop(const Tensor& img, int64_t top, int64_t left, int64_t h, int64_t w);

double mean_abs_error(const Tensor& a, const Tensor& b);

}  // namespace nif::image
