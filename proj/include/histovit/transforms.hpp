#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "histovit/error.hpp"
#include "histovit/image_io.hpp"
#include "histovit/rng.hpp"

namespace histovit {

/// Eval-time geometry and normalisation: resize to `resize` x `resize`,
/// centre-crop `crop`, then (x - mean) / std per channel.
struct PreprocessOptions {
  std::size_t resize = 256;
  std::size_t crop = 224;
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};

  /// Same 256:224 ratio for another crop size (toy models use 32 px).
  static PreprocessOptions for_image_size(std::size_t crop) {
    PreprocessOptions o;
    o.crop = crop;
    o.resize = static_cast<std::size_t>(std::lround(static_cast<double>(crop) * 256.0 / 224.0));
    return o;
  }
};

struct AugmentOptions {
  bool random_resized_crop = true;
  double scale_min = 0.8, scale_max = 1.0;
  double aspect_min = 3.0 / 4.0, aspect_max = 4.0 / 3.0;
  double hflip_prob = 0.5;
  double max_rotation_deg = 20.0;
  double brightness = 0.2;  // factors drawn from U[1 - j, 1 + j]
  double contrast = 0.2;
  double saturation = 0.2;

  static AugmentOptions none() {
    AugmentOptions o;
    o.random_resized_crop = false;
    o.hflip_prob = 0.0;
    o.max_rotation_deg = 0.0;
    o.brightness = o.contrast = o.saturation = 0.0;
    return o;
  }
};

/// One concrete draw of the augmentation pipeline.
struct AugmentParams {
  bool crop = false;  // false: resize + centre crop as in eval
  std::size_t top = 0, left = 0, height = 0, width = 0;
  bool hflip = false;
  double angle_deg = 0.0;
  double brightness = 1.0, contrast = 1.0, saturation = 1.0;
};

namespace detail {

struct Taps {
  std::vector<std::size_t> first;
  std::vector<std::vector<double>> weights;
};

// Triangle-filter taps for resampling `in` samples to `out`, widened by the
// downscale factor so minification averages (antialiasing).
inline Taps bilinear_taps(std::size_t in, std::size_t out) {
  Taps taps;
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double filter_scale = std::max(scale, 1.0);
  const double support = filter_scale;
  for (std::size_t i = 0; i < out; ++i) {
    const double center = (static_cast<double>(i) + 0.5) * scale;
    const auto lo = static_cast<std::ptrdiff_t>(std::max(0.0, std::floor(center - support + 0.5)));
    const auto hi = static_cast<std::ptrdiff_t>(std::min(static_cast<double>(in), std::floor(center + support + 0.5)));
    std::vector<double> w;
    double total = 0.0;
    for (std::ptrdiff_t x = lo; x < hi; ++x) {
      const double t = std::abs((static_cast<double>(x) - center + 0.5) / filter_scale);
      const double v = t < 1.0 ? 1.0 - t : 0.0;
      w.push_back(v);
      total += v;
    }
    for (auto& v : w) v /= total;
    taps.first.push_back(static_cast<std::size_t>(lo));
    taps.weights.push_back(std::move(w));
  }
  return taps;
}

// numpy-style "reflect": -1 -> 1, n -> n - 2.
inline std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

template <typename T>
void check_image(const Tensor<T>& im, const char* what) {
  if (im.rank() != 3 || im.dim(0) != 3 || im.dim(1) == 0 || im.dim(2) == 0) {
    throw DimensionError(std::string(what) + ": expected a [3xHxW] image, got " + shape_str(im.shape()));
  }
}

}  // namespace detail

/// Separable bilinear resize with antialiasing on downscale.
inline Image resize_bilinear(const Image& im, std::size_t out_h, std::size_t out_w) {
  detail::check_image(im, "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw ConfigError("resize_bilinear: target size must be positive");
  const std::size_t h = im.dim(1), w = im.dim(2);
  const auto tx = detail::bilinear_taps(w, out_w);
  const auto ty = detail::bilinear_taps(h, out_h);
  Image horiz(Shape{3, h, out_w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < out_w; ++x) {
        double acc = 0.0;
        const auto& wt = tx.weights[x];
        for (std::size_t k = 0; k < wt.size(); ++k) acc += wt[k] * im.at(c, y, tx.first[x] + k);
        horiz.at(c, y, x) = static_cast<float>(acc);
      }
  Image out(Shape{3, out_h, out_w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& wt = ty.weights[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < wt.size(); ++k) acc += wt[k] * horiz.at(c, ty.first[y] + k, x);
        out.at(c, y, x) = static_cast<float>(acc);
      }
    }
  return out;
}

inline Image crop(const Image& im, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  detail::check_image(im, "crop");
  if (top + height > im.dim(1) || left + width > im.dim(2) || height == 0 || width == 0) {
    throw DimensionError("crop: window out of bounds");
  }
  Image out(Shape{3, height, width});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) out.at(c, y, x) = im.at(c, top + y, left + x);
  return out;
}

inline Image center_crop(const Image& im, std::size_t size) {
  detail::check_image(im, "center_crop");
  if (size > im.dim(1) || size > im.dim(2)) throw DimensionError("center_crop: crop larger than image");
  const auto top = static_cast<std::size_t>(std::lround((im.dim(1) - size) / 2.0));
  const auto left = static_cast<std::size_t>(std::lround((im.dim(2) - size) / 2.0));
  return crop(im, top, left, size, size);
}

template <typename T>
Tensor<T> hflip(const Tensor<T>& im) {
  detail::check_image(im, "hflip");
  Tensor<T> out(im.shape());
  const std::size_t h = im.dim(1), w = im.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = im.at(c, y, w - 1 - x);
  return out;
}

template <typename T>
Tensor<T> vflip(const Tensor<T>& im) {
  detail::check_image(im, "vflip");
  Tensor<T> out(im.shape());
  const std::size_t h = im.dim(1), w = im.dim(2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = im.at(c, h - 1 - y, x);
  return out;
}

/// Counter-clockwise rotation about the image centre, bilinear sampling,
/// reflect padding. Works on any channel values (raw or normalised).
template <typename T>
Tensor<T> rotate(const Tensor<T>& im, double angle_deg) {
  detail::check_image(im, "rotate");
  if (angle_deg == 0.0) return im;
  const auto h = static_cast<std::ptrdiff_t>(im.dim(1)), w = static_cast<std::ptrdiff_t>(im.dim(2));
  const double theta = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
  Tensor<T> out(im.shape());
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      // Inverse map; y grows downward, so a visual CCW turn uses +sn here.
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
      const auto xa = static_cast<std::size_t>(detail::reflect_index(x0, w));
      const auto xb = static_cast<std::size_t>(detail::reflect_index(x0 + 1, w));
      const auto ya = static_cast<std::size_t>(detail::reflect_index(y0, h));
      const auto yb = static_cast<std::size_t>(detail::reflect_index(y0 + 1, h));
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1 - ax) * im.at(c, ya, xa) + ax * im.at(c, ya, xb);
        const double bot = (1 - ax) * im.at(c, yb, xa) + ax * im.at(c, yb, xb);
        out.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = static_cast<T>((1 - ay) * top + ay * bot);
      }
    }
  return out;
}

namespace detail {

inline float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

inline void clamp01(Image& im) {
  for (auto& v : im.data()) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace detail

inline Image adjust_brightness(const Image& im, double factor) {
  Image out = im;
  for (auto& v : out.data()) v = static_cast<float>(v * factor);
  detail::clamp01(out);
  return out;
}

/// Blends with the mean grey level of the whole image.
inline Image adjust_contrast(const Image& im, double factor) {
  const std::size_t plane = im.dim(1) * im.dim(2);
  double mean = 0.0;
  for (std::size_t i = 0; i < plane; ++i) mean += detail::luma(im[i], im[plane + i], im[2 * plane + i]);
  mean /= static_cast<double>(plane);
  Image out = im;
  for (auto& v : out.data()) v = static_cast<float>(mean + factor * (v - mean));
  detail::clamp01(out);
  return out;
}

/// Blends each pixel with its own grey level.
inline Image adjust_saturation(const Image& im, double factor) {
  const std::size_t plane = im.dim(1) * im.dim(2);
  Image out = im;
  for (std::size_t i = 0; i < plane; ++i) {
    const float g = detail::luma(im[i], im[plane + i], im[2 * plane + i]);
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = static_cast<float>(g + factor * (im[c * plane + i] - g));
  }
  detail::clamp01(out);
  return out;
}

template <typename T = float>
Tensor<T> normalize(const Image& im, const PreprocessOptions& opt) {
  detail::check_image(im, "normalize");
  const std::size_t plane = im.dim(1) * im.dim(2);
  Tensor<T> out(im.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out[c * plane + i] = (static_cast<T>(im[c * plane + i]) - static_cast<T>(opt.mean[c])) / static_cast<T>(opt.std[c]);
  return out;
}

/// Resize + centre crop, before normalisation.
inline Image eval_geometry(const Image& im, const PreprocessOptions& opt) {
  Image out = center_crop(resize_bilinear(im, opt.resize, opt.resize), opt.crop);
  detail::clamp01(out);
  return out;
}

template <typename T = float>
Tensor<T> preprocess_eval(const Image& im, const PreprocessOptions& opt = {}) {
  return normalize<T>(eval_geometry(im, opt), opt);
}

/// Draws crop window, flip, angle and jitter factors. Draw order is fixed so a
/// stream seed fully determines the result.
inline AugmentParams sample_augment_params(std::size_t height, std::size_t width, const AugmentOptions& opt, Rng& rng) {
  AugmentParams p;
  if (opt.random_resized_crop) {
    const double area = static_cast<double>(height) * static_cast<double>(width);
    for (int attempt = 0; attempt < 10 && !p.crop; ++attempt) {
      const double target = area * rng.uniform(opt.scale_min, opt.scale_max);
      const double aspect = rng.uniform(opt.aspect_min, opt.aspect_max);
      const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
      const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
      if (w == 0 || h == 0 || w > width || h > height) continue;
      p.crop = true;
      p.height = h;
      p.width = w;
      p.top = rng.below(height - h + 1);
      p.left = rng.below(width - w + 1);
    }
    if (!p.crop) {
      // Fallback: largest centred window whose aspect is inside the range.
      const double ratio = static_cast<double>(width) / static_cast<double>(height);
      std::size_t w = width, h = height;
      if (ratio < opt.aspect_min) {
        h = static_cast<std::size_t>(std::lround(static_cast<double>(w) / opt.aspect_min));
      } else if (ratio > opt.aspect_max) {
        w = static_cast<std::size_t>(std::lround(static_cast<double>(h) * opt.aspect_max));
      }
      p.crop = true;
      p.height = std::max<std::size_t>(1, std::min(h, height));
      p.width = std::max<std::size_t>(1, std::min(w, width));
      p.top = (height - p.height) / 2;
      p.left = (width - p.width) / 2;
    }
  }
  p.hflip = opt.hflip_prob > 0.0 && rng.bernoulli(opt.hflip_prob);
  if (opt.max_rotation_deg > 0.0) p.angle_deg = rng.uniform(-opt.max_rotation_deg, opt.max_rotation_deg);
  if (opt.brightness > 0.0) p.brightness = rng.uniform(1.0 - opt.brightness, 1.0 + opt.brightness);
  if (opt.contrast > 0.0) p.contrast = rng.uniform(1.0 - opt.contrast, 1.0 + opt.contrast);
  if (opt.saturation > 0.0) p.saturation = rng.uniform(1.0 - opt.saturation, 1.0 + opt.saturation);
  return p;
}

/// Pixel-space result of applying `p`: [3 x crop x crop] in [0, 1].
inline Image apply_augment_geometry_and_colour(const Image& im, const AugmentParams& p, const PreprocessOptions& pre) {
  Image out = p.crop ? resize_bilinear(crop(im, p.top, p.left, p.height, p.width), pre.crop, pre.crop) : eval_geometry(im, pre);
  if (p.hflip) out = hflip(out);
  if (p.angle_deg != 0.0) out = rotate(out, p.angle_deg);
  if (p.brightness != 1.0) out = adjust_brightness(out, p.brightness);
  if (p.contrast != 1.0) out = adjust_contrast(out, p.contrast);
  if (p.saturation != 1.0) out = adjust_saturation(out, p.saturation);
  detail::clamp01(out);
  return out;
}

template <typename T = float>
Tensor<T> augment_train(const Image& im, Rng& rng, const AugmentOptions& opt = {}, const PreprocessOptions& pre = {}) {
  detail::check_image(im, "augment_train");
  const AugmentParams p = sample_augment_params(im.dim(1), im.dim(2), opt, rng);
  return normalize<T>(apply_augment_geometry_and_colour(im, p, pre), pre);
}

}  // namespace histovit
