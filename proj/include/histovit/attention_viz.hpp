#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "histovit/error.hpp"
#include "histovit/image_io.hpp"
#include "histovit/transforms.hpp"
#include "histovit/vit.hpp"

namespace histovit {

enum class HeadAggregation { mean, max };

inline const char* aggregation_name(HeadAggregation a) { return a == HeadAggregation::mean ? "mean" : "max"; }

/// CLS-token attention over the patch grid, min-max normalised to [0, 1].
struct Heatmap {
  std::size_t grid = 0;
  std::vector<double> values;  // grid x grid, row-major
  std::vector<double> raw;     // before normalisation
  std::size_t layer = 0;
  HeadAggregation aggregation = HeadAggregation::mean;
  bool flat = false;  // all raw scores equal; values are then all 0

  double at(std::size_t r, std::size_t c) const { return values[r * grid + c]; }
  std::size_t argmax() const { return static_cast<std::size_t>(std::max_element(raw.begin(), raw.end()) - raw.begin()); }
};

/// Aggregates the heads of the final layer, keeps the CLS query row without
/// its CLS->CLS entry and lays the patch scores out on the grid.
template <typename T>
Heatmap cls_attention_map(const AttentionWeights<T>& attn, const VitConfig& cfg,
                          HeadAggregation aggregation = HeadAggregation::mean) {
  if (attn.layer + 1 != cfg.depth) {
    throw ContractError("attention map expects the final layer " + std::to_string(cfg.depth - 1) + ", got layer " +
                        std::to_string(attn.layer));
  }
  if (attn.tokens != cfg.sequence_length() || attn.heads != cfg.num_heads ||
      attn.probs.size() != attn.heads * attn.tokens * attn.tokens) {
    throw ContractError("attention weights of " + std::to_string(attn.heads) + " heads x " + std::to_string(attn.tokens) +
                        " tokens do not match the configuration (" + std::to_string(cfg.num_heads) + " x " +
                        std::to_string(cfg.sequence_length()) + ")");
  }
  Heatmap h;
  h.grid = cfg.grid_size();
  h.layer = attn.layer;
  h.aggregation = aggregation;
  const std::size_t n = cfg.num_patches();
  h.raw.assign(n, aggregation == HeadAggregation::mean ? 0.0 : -1.0);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t k = 0; k < attn.heads; ++k) {
      const double v = static_cast<double>(attn.at(k, 0, p + 1));
      h.raw[p] = aggregation == HeadAggregation::mean ? h.raw[p] + v : std::max(h.raw[p], v);
    }
    if (aggregation == HeadAggregation::mean) h.raw[p] /= static_cast<double>(attn.heads);
  }
  const auto [lo, hi] = std::minmax_element(h.raw.begin(), h.raw.end());
  const double range = *hi - *lo;
  h.flat = !(range > 0);
  h.values.resize(n);
  for (std::size_t p = 0; p < n; ++p) h.values[p] = h.flat ? 0.0 : (h.raw[p] - *lo) / range;
  return h;
}

/// Blue -> cyan -> green -> yellow -> red at 0, .25, .5, .75, 1, linear between stops.
inline std::array<float, 3> colour_ramp(double v) {
  static constexpr std::array<std::array<float, 3>, 5> stops{{{0, 0, 1}, {0, 1, 1}, {0, 1, 0}, {1, 1, 0}, {1, 0, 0}}};
  v = std::clamp(v, 0.0, 1.0);
  const double pos = v * 4.0;
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(pos), 3);
  const float f = static_cast<float>(pos - static_cast<double>(i));
  std::array<float, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) out[c] = stops[i][c] + f * (stops[i + 1][c] - stops[i][c]);
  return out;
}

/// Heatmap resized to height x width with the bilinear image resampler.
inline std::vector<float> upsample_heatmap(const Heatmap& h, std::size_t height, std::size_t width) {
  Image g({3, h.grid, h.grid});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h.values.size(); ++i) g[c * h.values.size() + i] = static_cast<float>(h.values[i]);
  const Image up = resize_bilinear(g, height, width);
  std::vector<float> out(height * width);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(up[i], 0.0f, 1.0f);
  return out;
}

/// Side-by-side [3 x H x 2W]: the image on the left, on the right the image
/// blended with the colour-mapped heatmap as (1 - alpha) * image + alpha * colour.
inline Image render_overlay(const Image& image, const Heatmap& heatmap, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("overlay alpha must be in [0, 1], got " + std::to_string(alpha));
  detail::check_image(image, "render_overlay");
  const std::size_t hgt = image.dim(1), wid = image.dim(2);
  const auto up = upsample_heatmap(heatmap, hgt, wid);
  const float a = static_cast<float>(alpha);
  Image out({3, hgt, 2 * wid});
  for (std::size_t y = 0; y < hgt; ++y) {
    for (std::size_t x = 0; x < wid; ++x) {
      const auto col = colour_ramp(up[y * wid + x]);
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = image.at(c, y, x);
        out.at(c, y, x) = v;
        out.at(c, y, wid + x) = (1.0f - a) * v + a * col[c];
      }
    }
  }
  return out;
}

inline void write_heatmap_csv(std::ostream& os, const Heatmap& h) {
  char buf[32];
  for (std::size_t r = 0; r < h.grid; ++r) {
    for (std::size_t c = 0; c < h.grid; ++c) {
      std::snprintf(buf, sizeof buf, "%s%.9g", c ? "," : "", h.at(r, c));
      os << buf;
    }
    os << '\n';
  }
}

struct Explanation {
  Image view;  // the resized, centre-cropped image the model saw, in [0, 1]
  Heatmap heatmap;
  std::vector<double> probabilities;
};

/// Eval-mode forward of one raw image, returning the final-layer CLS heatmap.
template <typename T>
Explanation explain(const VitModel<T>& model, const Image& raw, const PreprocessOptions& pre,
                    HeadAggregation aggregation = HeadAggregation::mean) {
  Explanation e;
  e.view = eval_geometry(raw, pre);
  const Tensor<T> x = normalize<T>(e.view, pre);
  GradTape<T> tape(false);
  ForwardOptions fo;
  fo.keep_attention = true;
  auto out = forward(tape, model, std::span<const Tensor<T>>(&x, 1), fo);
  e.heatmap = cls_attention_map(out.attention.at(0).back(), model.config(), aggregation);
  const auto& logits = out.logits.value();
  double mx = -std::numeric_limits<double>::infinity(), s = 0;
  for (std::size_t c = 0; c < logits.size(); ++c) mx = std::max(mx, static_cast<double>(logits[c]));
  for (std::size_t c = 0; c < logits.size(); ++c) s += std::exp(static_cast<double>(logits[c]) - mx);
  for (std::size_t c = 0; c < logits.size(); ++c) e.probabilities.push_back(std::exp(static_cast<double>(logits[c]) - mx) / s);
  return e;
}

}  // namespace histovit
