#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "histovit/error.hpp"
#include "histovit/ops.hpp"
#include "histovit/rng.hpp"
#include "histovit/tape.hpp"
#include "histovit/tensor.hpp"
#include "histovit/vit_config.hpp"

namespace histovit {

/// Post-softmax attention probabilities of one encoder layer for one image,
/// laid out [heads x tokens x tokens]; row i holds the weights of query i.
template <typename T>
struct AttentionWeights {
  std::size_t layer = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<T> probs;

  T at(std::size_t h, std::size_t i, std::size_t j) const { return probs[(h * tokens + i) * tokens + j]; }
};

/// Tape variables for the weights of one encoder block.
template <typename T>
struct BlockVars {
  Var<T> norm1_w, norm1_b;
  Var<T> q_w, q_b, k_w, k_b, v_w, v_b;
  Var<T> proj_w, proj_b;
  Var<T> norm2_w, norm2_b;
  Var<T> fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Multi-head self-attention over x[S x D]. Per head h with width d_k = D/H:
/// softmax(Q_h K_h^T / sqrt(d_k)) V_h; the heads are concatenated and projected.
/// When `attention` is non-null the probabilities are copied into it.
template <typename T>
Var<T> multi_head_attention(Var<T> x, const BlockVars<T>& w, std::size_t num_heads, double attn_dropout, Mode mode,
                            Rng* rng, AttentionWeights<T>* attention = nullptr) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw DimensionError("multi_head_attention expects [S x D], got " + shape_str(s));
  const std::size_t tokens = s[0], d = s[1];
  if (num_heads == 0 || d % num_heads != 0) {
    throw DimensionError("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
  }
  const std::size_t dk = d / num_heads;
  const T inv_sqrt_dk = T{1} / std::sqrt(static_cast<T>(dk));

  Var<T> q = add_bias(matmul(x, w.q_w), w.q_b);
  Var<T> k = add_bias(matmul(x, w.k_w), w.k_b);
  Var<T> v = add_bias(matmul(x, w.v_w), w.v_b);

  if (attention) {
    attention->heads = num_heads;
    attention->tokens = tokens;
    attention->probs.assign(num_heads * tokens * tokens, T{0});
  }
  std::vector<Var<T>> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    Var<T> qh = slice(q, 1, h * dk, dk);
    Var<T> kh = slice(k, 1, h * dk, dk);
    Var<T> vh = slice(v, 1, h * dk, dk);
    Var<T> probs = softmax_lastdim(scale(matmul(qh, transpose(kh)), inv_sqrt_dk));
    if (attention) {
      const auto src = probs.value().data();
      std::copy(src.begin(), src.end(), attention->probs.begin() + static_cast<std::ptrdiff_t>(h * tokens * tokens));
    }
    if (attn_dropout > 0.0 && mode == Mode::train) {
      if (!rng) throw ContractError("attention dropout in train mode needs an rng");
      probs = dropout(probs, attn_dropout, mode, *rng);
    }
    heads.push_back(matmul(probs, vh));
  }
  Var<T> merged = num_heads == 1 ? heads.front() : concat(heads, 1);
  return add_bias(matmul(merged, w.proj_w), w.proj_b);
}

/// Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x)) with a GELU MLP.
template <typename T>
Var<T> encoder_block(Var<T> x, const BlockVars<T>& w, std::size_t num_heads, T norm_eps, double attn_dropout, Mode mode,
                     Rng* rng, AttentionWeights<T>* attention = nullptr) {
  Var<T> a = multi_head_attention(layer_norm(x, w.norm1_w, w.norm1_b, norm_eps), w, num_heads, attn_dropout, mode, rng,
                                  attention);
  x = add(x, a);
  Var<T> h = layer_norm(x, w.norm2_w, w.norm2_b, norm_eps);
  h = gelu(add_bias(matmul(h, w.fc1_w), w.fc1_b));
  h = add_bias(matmul(h, w.fc2_w), w.fc2_b);
  return add(x, h);
}

/// Splits image[C x H x W] into non-overlapping P x P patches in row-major
/// grid order. Each row of the result is one patch flattened as (c, y, x),
/// matching a [D x C x P x P] convolution kernel reshaped to [D x C*P*P].
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& image, const VitConfig& cfg) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != cfg.channels || s[1] != cfg.image_size || s[2] != cfg.image_size) {
    throw DimensionError("patch_embed: image " + shape_str(s) + " does not match config [" + std::to_string(cfg.channels) +
                         "x" + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "]");
  }
  const std::size_t p = cfg.patch_size, g = cfg.grid_size(), c = cfg.channels, hw = cfg.image_size;
  Tensor<T> out(Shape{g * g, cfg.patch_dim()});
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      T* row = out.data().data() + (gy * g + gx) * cfg.patch_dim();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) *row++ = image[(ch * hw + gy * p + y) * hw + gx * p + x];
    }
  }
  return out;
}

/// Patch tokens [N x D]: each flattened patch mapped through weight[C*P*P x D] + bias[D].
template <typename T>
Var<T> patch_embed(GradTape<T>& tape, const Tensor<T>& image, const VitConfig& cfg, Var<T> weight, Var<T> bias) {
  return add_bias(matmul(tape.constant(extract_patches(image, cfg)), weight), bias);
}

/// ViT encoder and classification head, stored as an ordered list of named
/// tensors. The order and names are the canonical HVWT layout.
template <typename T>
class VitModel {
 public:
  struct BlockIndex {
    std::size_t norm1_w, norm1_b, q_w, q_b, k_w, k_b, v_w, v_b, proj_w, proj_b, norm2_w, norm2_b, fc1_w, fc1_b, fc2_w,
        fc2_b;
  };
  struct HeadLayerIndex {
    std::size_t fc_w, fc_b, bn_w, bn_b, bn_mean, bn_var;
  };

  /// Zero-valued model with the tensor layout implied by `cfg`.
  explicit VitModel(VitConfig cfg) : config_(std::move(cfg)) {
    config_.validate();
    const std::size_t d = config_.embed_dim;
    cls_ = add("cls_token", {d}, false);
    pos_ = add("pos_embed", {config_.sequence_length(), d}, false);
    patch_w_ = add("patch_embed.weight", {config_.patch_dim(), d}, true);
    patch_b_ = add("patch_embed.bias", {d}, false);
    for (std::size_t i = 0; i < config_.depth; ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      BlockIndex b{};
      b.norm1_w = add(p + "norm1.weight", {d}, false);
      b.norm1_b = add(p + "norm1.bias", {d}, false);
      b.q_w = add(p + "attn.query.weight", {d, d}, true);
      b.q_b = add(p + "attn.query.bias", {d}, false);
      b.k_w = add(p + "attn.key.weight", {d, d}, true);
      b.k_b = add(p + "attn.key.bias", {d}, false);
      b.v_w = add(p + "attn.value.weight", {d, d}, true);
      b.v_b = add(p + "attn.value.bias", {d}, false);
      b.proj_w = add(p + "attn.proj.weight", {d, d}, true);
      b.proj_b = add(p + "attn.proj.bias", {d}, false);
      b.norm2_w = add(p + "norm2.weight", {d}, false);
      b.norm2_b = add(p + "norm2.bias", {d}, false);
      b.fc1_w = add(p + "mlp.fc1.weight", {d, config_.mlp_hidden()}, true);
      b.fc1_b = add(p + "mlp.fc1.bias", {config_.mlp_hidden()}, false);
      b.fc2_w = add(p + "mlp.fc2.weight", {config_.mlp_hidden(), d}, true);
      b.fc2_b = add(p + "mlp.fc2.bias", {d}, false);
      blocks_.push_back(b);
    }
    norm_w_ = add("norm.weight", {d}, false);
    norm_b_ = add("norm.bias", {d}, false);
    head_begin_ = params_.size();
    std::size_t in = d;
    for (std::size_t j = 0; j < config_.head_widths.size(); ++j) {
      const std::string p = "head.";
      const std::string n = std::to_string(j + 1);
      const std::size_t out = config_.head_widths[j];
      HeadLayerIndex h{};
      h.fc_w = add(p + "fc" + n + ".weight", {in, out}, true);
      h.fc_b = add(p + "fc" + n + ".bias", {out}, false);
      h.bn_w = add(p + "bn" + n + ".weight", {out}, false);
      h.bn_b = add(p + "bn" + n + ".bias", {out}, false);
      h.bn_mean = add(p + "bn" + n + ".running_mean", {out}, false, true);
      h.bn_var = add(p + "bn" + n + ".running_var", {out}, false, true);
      head_.push_back(h);
      in = out;
    }
    out_w_ = add("head.out.weight", {in, config_.num_classes}, true);
    out_b_ = add("head.out.bias", {config_.num_classes}, false);
    reset_norms();
    apply_freezing(config_.unfrozen_blocks);
  }

  /// Random initialisation: truncated normal (sigma 0.02) weights and
  /// embeddings, zero biases, unit norm scales, BN running var 1.
  static VitModel random(const VitConfig& cfg, std::uint64_t seed) {
    VitModel m(cfg);
    m.initialize(seed);
    return m;
  }

  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!is_weight_like(i)) continue;
      for (auto& v : params_[i].value.data()) v = static_cast<T>(rng.truncated_normal(0.02));
    }
    reset_norms();
  }

  /// Re-initialises only the head (used after loading a backbone checkpoint).
  void initialize_head(std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = head_begin_; i < params_.size(); ++i) {
      auto& p = params_[i];
      p.value.fill(T{0});
      if (is_weight_like(i)) {
        for (auto& v : p.value.data()) v = static_cast<T>(rng.truncated_normal(0.02));
      }
    }
    reset_norms();
  }

  const VitConfig& config() const noexcept { return config_; }

  std::vector<Parameter<T>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }

  Parameter<T>& parameter(const std::string& name) { return params_[index_of(name)]; }
  const Parameter<T>& parameter(const std::string& name) const { return params_[index_of(name)]; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("model has no tensor named '" + name + "'");
    return it->second;
  }

  bool is_head(std::size_t i) const { return i >= head_begin_; }

  /// Trainable set = the last `unfrozen` blocks, the final norm, and the head.
  void apply_freezing(std::size_t unfrozen) {
    if (unfrozen > config_.depth) {
      throw ConfigError("unfrozen_blocks " + std::to_string(unfrozen) + " exceeds depth " + std::to_string(config_.depth));
    }
    config_.unfrozen_blocks = unfrozen;
    const std::string first_open = "blocks." + std::to_string(config_.depth - unfrozen) + ".";
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p.buffer) {
        p.trainable = false;
        continue;
      }
      p.trainable = is_head(i) || i >= norm_w_ || (unfrozen > 0 && i >= params_index_of_block(config_.depth - unfrozen));
    }
  }

  /// Marks every non-buffer tensor trainable (used by gradient checks).
  void set_all_trainable() {
    for (auto& p : params_) p.trainable = !p.buffer;
  }

  std::vector<Parameter<T>*> trainable_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_)
      if (p.trainable && !p.buffer) out.push_back(&p);
    return out;
  }

  std::vector<Parameter<T>*> all_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!p.buffer) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<BlockIndex>& blocks() const noexcept { return blocks_; }
  const std::vector<HeadLayerIndex>& head_layers() const noexcept { return head_; }
  std::size_t cls_index() const noexcept { return cls_; }
  std::size_t pos_index() const noexcept { return pos_; }
  std::size_t patch_weight_index() const noexcept { return patch_w_; }
  std::size_t patch_bias_index() const noexcept { return patch_b_; }
  std::size_t norm_weight_index() const noexcept { return norm_w_; }
  std::size_t norm_bias_index() const noexcept { return norm_b_; }
  std::size_t out_weight_index() const noexcept { return out_w_; }
  std::size_t out_bias_index() const noexcept { return out_b_; }

 private:
  std::size_t add(const std::string& name, Shape shape, bool decay, bool buffer = false) {
    Parameter<T> p;
    p.name = name;
    p.value = Tensor<T>(std::move(shape));
    p.decay = decay;
    p.buffer = buffer;
    p.trainable = !buffer;
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  bool is_weight_like(std::size_t i) const {
    return params_[i].decay || i == cls_ || i == pos_;
  }

  std::size_t params_index_of_block(std::size_t b) const { return blocks_.at(b).norm1_w; }

  void reset_norms() {
    auto ones = [&](std::size_t i) { params_[i].value.fill(T{1}); };
    for (const auto& b : blocks_) {
      ones(b.norm1_w);
      ones(b.norm2_w);
    }
    ones(norm_w_);
    for (const auto& h : head_) {
      ones(h.bn_w);
      params_[h.bn_mean].value.fill(T{0});
      ones(h.bn_var);
    }
  }

  VitConfig config_;
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<BlockIndex> blocks_;
  std::vector<HeadLayerIndex> head_;
  std::size_t cls_ = 0, pos_ = 0, patch_w_ = 0, patch_b_ = 0, norm_w_ = 0, norm_b_ = 0, out_w_ = 0, out_b_ = 0;
  std::size_t head_begin_ = 0;
};

/// Freezes all but the last `unfrozen_blocks` encoder blocks (plus final norm and head).
template <typename T>
VitModel<T>& apply_freezing(VitModel<T>& model, std::size_t unfrozen_blocks) {
  model.apply_freezing(unfrozen_blocks);
  return model;
}

struct ForwardOptions {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;                   // dropout stream; required in train mode when dropout > 0
  std::optional<double> head_dropout;  // overrides VitConfig::head_dropout
  bool keep_attention = false;
};

template <typename T>
struct ForwardOutput {
  Var<T> logits;                                           // [B x num_classes], raw scores
  std::vector<std::vector<AttentionWeights<T>>> attention;  // [image][layer], when requested
};

namespace detail {

template <typename T, typename Model>
ForwardOutput<T> forward_impl(GradTape<T>& tape, Model& model, std::span<const Tensor<T>> images,
                              const ForwardOptions& opt) {
  constexpr bool mutable_model = !std::is_const_v<Model>;
  const VitConfig& cfg = model.config();
  if (images.empty()) throw DimensionError("forward on an empty batch");
  if (opt.mode == Mode::train && !mutable_model) throw ContractError("train-mode forward needs a mutable model");
  const double head_p = opt.head_dropout.value_or(cfg.head_dropout);
  if (opt.mode == Mode::train && (head_p > 0.0 || cfg.attn_dropout > 0.0) && !opt.rng) {
    throw ContractError("train-mode forward with dropout needs an rng");
  }
  auto& params = model.parameters();
  auto P = [&](std::size_t i) -> Var<T> {
    if constexpr (mutable_model) {
      return tape.param(params[i]);
    } else {
      // Read-only inference: reference the weights without gradient tracking.
      return tape.param(const_cast<Parameter<T>&>(params[i]));
    }
  };

  std::vector<BlockVars<T>> blocks;
  for (const auto& b : model.blocks()) {
    blocks.push_back(BlockVars<T>{P(b.norm1_w), P(b.norm1_b), P(b.q_w), P(b.q_b), P(b.k_w), P(b.k_b), P(b.v_w), P(b.v_b),
                                  P(b.proj_w), P(b.proj_b), P(b.norm2_w), P(b.norm2_b), P(b.fc1_w), P(b.fc1_b),
                                  P(b.fc2_w), P(b.fc2_b)});
  }
  const T eps = static_cast<T>(cfg.norm_eps);
  Var<T> cls = reshape(P(model.cls_index()), Shape{1, cfg.embed_dim});

  ForwardOutput<T> out;
  std::vector<Var<T>> features;
  features.reserve(images.size());
  for (const auto& image : images) {
    Var<T> x = patch_embed(tape, image, cfg, P(model.patch_weight_index()), P(model.patch_bias_index()));
    x = add(concat<T>({cls, x}, 0), P(model.pos_index()));
    std::vector<AttentionWeights<T>> attn(opt.keep_attention ? blocks.size() : 0);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      AttentionWeights<T>* keep = nullptr;
      if (opt.keep_attention) {
        attn[l].layer = l;
        keep = &attn[l];
      }
      x = encoder_block(x, blocks[l], cfg.num_heads, eps, cfg.attn_dropout, opt.mode, opt.rng, keep);
    }
    x = layer_norm(x, P(model.norm_weight_index()), P(model.norm_bias_index()), eps);
    features.push_back(slice(x, 0, 0, 1));
    if (opt.keep_attention) out.attention.push_back(std::move(attn));
  }
  Var<T> h = features.size() == 1 ? features.front() : concat(features, 0);
  for (const auto& layer : model.head_layers()) {
    h = add_bias(matmul(h, P(layer.fc_w)), P(layer.fc_b));
    Tensor<T>* rm = const_cast<Tensor<T>*>(&params[layer.bn_mean].value);
    Tensor<T>* rv = const_cast<Tensor<T>*>(&params[layer.bn_var].value);
    BatchNormState<T> bn{rm, rv, static_cast<T>(cfg.bn_momentum), static_cast<T>(cfg.bn_eps)};
    h = batch_norm_1d(h, P(layer.bn_w), P(layer.bn_b), bn, opt.mode);
    h = relu(h);
    if (opt.mode == Mode::train && head_p > 0.0) h = dropout(h, head_p, opt.mode, *opt.rng);
  }
  out.logits = add_bias(matmul(h, P(model.out_weight_index())), P(model.out_bias_index()));
  return out;
}

}  // namespace detail

/// Forward pass over a batch of preprocessed images [C x H x W]. The CLS
/// output of the final norm feeds the head: per hidden width a linear layer,
/// batch norm, ReLU and dropout; then a linear layer to raw logits.
template <typename T>
ForwardOutput<T> forward(GradTape<T>& tape, VitModel<T>& model, std::span<const Tensor<T>> images,
                         const ForwardOptions& opt = {}) {
  return detail::forward_impl(tape, model, images, opt);
}

/// Eval-mode forward on a shared model. Never mutates the model.
template <typename T>
ForwardOutput<T> forward(GradTape<T>& tape, const VitModel<T>& model, std::span<const Tensor<T>> images,
                         const ForwardOptions& opt = {}) {
  if (tape.recording()) throw ContractError("read-only forward requires a non-recording tape");
  return detail::forward_impl(tape, model, images, opt);
}

/// Logits of a single image, eval mode.
template <typename T>
Tensor<T> predict_logits(const VitModel<T>& model, const Tensor<T>& image) {
  GradTape<T> tape(false);
  auto out = forward(tape, model, std::span<const Tensor<T>>(&image, 1));
  return out.logits.value().reshaped(Shape{model.config().num_classes});
}

/// Logits for a batch, eval mode: [B x num_classes].
template <typename T>
Tensor<T> predict_logits(const VitModel<T>& model, std::span<const Tensor<T>> images) {
  GradTape<T> tape(false);
  return forward(tape, model, images).logits.value();
}

}  // namespace histovit
