#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "histovit/error.hpp"

namespace histovit {

/// Architecture of the ViT encoder plus the classification head. Defaults are
/// ViT-base/16 at 224 px with the 768 -> 512 -> 256 head.
struct VitConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t channels = 3;
  std::size_t embed_dim = 768;
  std::size_t depth = 12;
  std::size_t num_heads = 12;
  std::size_t mlp_ratio = 4;
  std::vector<std::size_t> head_widths{512, 256};
  double head_dropout = 0.2;
  std::size_t num_classes = 2;
  std::size_t unfrozen_blocks = 2;
  double attn_dropout = 0.0;
  double norm_eps = 1e-6;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  std::size_t grid_size() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid_size() * grid_size(); }
  std::size_t sequence_length() const { return num_patches() + 1; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_hidden() const { return embed_dim * mlp_ratio; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("VitConfig: " + m); };
    if (patch_size == 0 || image_size == 0) fail("image_size and patch_size must be positive");
    if (image_size % patch_size != 0) {
      fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " + std::to_string(patch_size));
    }
    if (channels == 0 || embed_dim == 0 || num_heads == 0 || mlp_ratio == 0) fail("dimensions must be positive");
    if (embed_dim % num_heads != 0) {
      fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " + std::to_string(num_heads));
    }
    if (num_classes < 1) fail("num_classes must be at least 1");
    for (std::size_t w : head_widths) {
      if (w == 0) fail("head widths must be positive");
    }
    if (unfrozen_blocks > depth) {
      fail("unfrozen_blocks " + std::to_string(unfrozen_blocks) + " exceeds depth " + std::to_string(depth));
    }
    if (!(head_dropout >= 0.0 && head_dropout < 1.0)) fail("head_dropout must be in [0, 1)");
    if (!(attn_dropout >= 0.0 && attn_dropout < 1.0)) fail("attn_dropout must be in [0, 1)");
    if (!(norm_eps > 0.0) || !(bn_eps > 0.0)) fail("normalisation eps must be positive");
  }

  /// Scaled-down configuration used for desk-scale checks: 32 px images,
  /// 16 px patches, width 16, two blocks of two heads.
  static VitConfig toy(std::size_t num_classes = 3) {
    VitConfig c;
    c.image_size = 32;
    c.patch_size = 16;
    c.embed_dim = 16;
    c.depth = 2;
    c.num_heads = 2;
    c.head_widths = {32, 16};
    c.num_classes = num_classes;
    c.unfrozen_blocks = 2;
    return c;
  }
};

}  // namespace histovit
