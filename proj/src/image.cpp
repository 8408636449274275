#include "nif/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace nif::image {

namespace {

void require_image(const Tensor& img, const char* what) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw std::invalid_argument(std::string(what) + ": expected a [3,H,W] image, got " + shape_str(img.shape()));
  }
}

struct Tap {
  int64_t first = 0;
  std::vector<double> weights;
};

std::vector<Tap> filter_taps(int64_t in, int64_t out, bool antialias) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double support = (antialias && scale > 1.0) ? scale : 1.0;
  std::vector<Tap> taps(static_cast<size_t>(out));
  for (int64_t o = 0; o < out; ++o) {
    const double c = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const auto lo = static_cast<int64_t>(std::floor(c - support)) + 1;
    const auto hi = static_cast<int64_t>(std::ceil(c + support)) - 1;
    Tap& tap = taps[static_cast<size_t>(o)];
    std::vector<std::pair<int64_t, double>> raw;
    double total = 0.0;
    for (int64_t k = lo; k <= hi; ++k) {
      const double w = std::max(0.0, 1.0 - std::abs(static_cast<double>(k) - c) / support);
      if (w <= 0.0) continue;
      raw.emplace_back(std::clamp<int64_t>(k, 0, in - 1), w);
      total += w;
    }
    if (raw.empty()) {
      raw.emplace_back(std::clamp<int64_t>(std::lround(c), 0, in - 1), 1.0);
      total = 1.0;
    }
    int64_t first = raw.front().first, last = raw.front().first;
    for (auto& [k, w] : raw) {
      first = std::min(first, k);
      last = std::max(last, k);
    }
    tap.first = first;
    tap.weights.assign(static_cast<size_t>(last - first + 1), 0.0);
    for (auto& [k, w] : raw) tap.weights[static_cast<size_t>(k - first)] += w / total;
  }
  return taps;
}

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw std::runtime_error("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " + img.message);
  }
  const int64_t h = img.height, w = img.width;
  Tensor out({3, h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) out[(c * h + y) * w + x] = buf[static_cast<size_t>((y * w + x) * 3 + c)] / 255.0;
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& img) {
  require_image(img, "write_png");
  const int64_t h = img.dim(1), w = img.dim(2);
  std::vector<png_byte> buf(static_cast<size_t>(h * w * 3));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        double v = img[(c * h + y) * w + x];
        if (!std::isfinite(v)) v = 0.0;
        v = std::clamp(v, 0.0, 1.0);
        buf[static_cast<size_t>((y * w + x) * 3 + c)] = static_cast<png_byte>(std::lround(255.0 * v));
      }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(w);
  pi.height = static_cast<png_uint_32>(h);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write PNG " + path.string() + ": " + pi.message);
  }
}

Tensor resize_bilinear(const Tensor& img, int64_t out_h, int64_t out_w, bool antialias) {
  if (img.rank() != 3) throw std::invalid_argument("resize_bilinear: expected [C,H,W], got " + shape_str(img.shape()));
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: target size must be positive");
  const int64_t ch = img.dim(0), h = img.dim(1), w = img.dim(2);
  const auto ty = filter_taps(h, out_h, antialias);
  const auto tx = filter_taps(w, out_w, antialias);
  Tensor rows({ch, h, out_w}, 0.0);
  for (int64_t c = 0; c < ch; ++c)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < out_w; ++x) {
        const Tap& t = tx[static_cast<size_t>(x)];
        double s = 0.0;
        for (size_t k = 0; k < t.weights.size(); ++k) s += t.weights[k] * img[(c * h + y) * w + t.first + static_cast<int64_t>(k)];
        rows[(c * h + y) * out_w + x] = s;
      }
  Tensor out({ch, out_h, out_w}, 0.0);
  for (int64_t c = 0; c < ch; ++c)
    for (int64_t y = 0; y < out_h; ++y) {
      const Tap& t = ty[static_cast<size_t>(y)];
      for (int64_t x = 0; x < out_w; ++x) {
        double s = 0.0;
        for (size_t k = 0; k < t.weights.size(); ++k)
          s += t.weights[k] * rows[(c * h + t.first + static_cast<int64_t>(k)) * out_w + x];
        out[(c * out_h + y) * out_w + x] = s;
      }
    }
  return out;
}

Tensor crop(const Tensor& img, int64_t top, int64_t left, int64_t h, int64_t w) {
  require_image(img, "crop");
  const int64_t ih = img.dim(1), iw = img.dim(2);
  if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > ih || left + w > iw) {
    throw std::out_of_range("crop window outside image");
  }
  Tensor out({3, h, w});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < h; ++y)
      std::copy_n(img.data() + (c * ih + top + y) * iw + left, w, out.data() + (c * h + y) * w);
  return out;
}

double mean_abs_error(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mean_abs_error");
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.numel());
}

}  // namespace nif::image
