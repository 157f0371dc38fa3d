#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "attnfool/attention.hpp"
#include "attnfool/random.hpp"

namespace afool {

struct ViTConfig {
  std::size_t image_size = 16;
  std::size_t channels = 3;
  std::size_t patch_size = 4;
  std::size_t d_model = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t num_classes = 4;
  double layernorm_eps = 1e-6;

  std::size_t grid() const { return image_size / patch_size; }
  /// Patch tokens, excluding the class token.
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t seq_len() const { return num_patches() + 1; }
  std::size_t d_head() const { return d_model / heads; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  Shape image_shape() const { return Shape{channels, image_size, image_size}; }

  void validate() const {
    if (image_size == 0 || channels == 0 || patch_size == 0 || d_model == 0 || depth == 0 || heads == 0 ||
        mlp_hidden == 0 || num_classes == 0) {
      throw DimensionError("ViT config sizes must be positive");
    }
    if (image_size % patch_size != 0) throw DimensionError("patch_size must divide image_size");
    if (d_model % heads != 0) throw DimensionError("heads must divide d_model");
    if (!(layernorm_eps > 0.0)) throw DimensionError("layernorm eps must be positive");
  }

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

/// Sequence index of the token covering image-grid cell (grid_row, grid_col).
/// Index 0 is the class token; patch tokens follow in row-major grid order.
inline std::size_t token_index(const ViTConfig& c, std::size_t grid_row, std::size_t grid_col) {
  if (grid_row >= c.grid() || grid_col >= c.grid()) throw IndexError("grid cell outside the token grid");
  return 1 + grid_row * c.grid() + grid_col;
}

/// Token index whose image patch contains pixel (row, col).
inline std::size_t token_for_pixel(const ViTConfig& c, std::size_t row, std::size_t col) {
  return token_index(c, row / c.patch_size, col / c.patch_size);
}

template <class T>
struct BasicLayerNorm {
  T gamma, beta;
};

template <class T>
struct BasicEncoderLayer {
  BasicLayerNorm<T> ln1;
  BasicAttentionParams<T> attn;
  BasicLayerNorm<T> ln2;
  T mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <class T>
struct BasicViTParams {
  T patch_w, patch_b;
  T cls_token;
  T pos_embed;
  std::vector<BasicEncoderLayer<T>> layers;
  BasicLayerNorm<T> final_ln;
  T head_w, head_b;
};

using ViTParams = BasicViTParams<Tensor>;
using BoundViT = BasicViTParams<Var>;

template <class F, class P, class... Rest>
void visit_vit_params(F& f, P& p, Rest&... rest) {
  f(std::string("patch_w"), p.patch_w, rest.patch_w...);
  f(std::string("patch_b"), p.patch_b, rest.patch_b...);
  f(std::string("cls_token"), p.cls_token, rest.cls_token...);
  f(std::string("pos_embed"), p.pos_embed, rest.pos_embed...);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    f(pre + "ln1.gamma", p.layers[l].ln1.gamma, rest.layers[l].ln1.gamma...);
    f(pre + "ln1.beta", p.layers[l].ln1.beta, rest.layers[l].ln1.beta...);
    visit_attention_params(f, pre + "attn.", p.layers[l].attn, rest.layers[l].attn...);
    f(pre + "ln2.gamma", p.layers[l].ln2.gamma, rest.layers[l].ln2.gamma...);
    f(pre + "ln2.beta", p.layers[l].ln2.beta, rest.layers[l].ln2.beta...);
    f(pre + "mlp_w1", p.layers[l].mlp_w1, rest.layers[l].mlp_w1...);
    f(pre + "mlp_b1", p.layers[l].mlp_b1, rest.layers[l].mlp_b1...);
    f(pre + "mlp_w2", p.layers[l].mlp_w2, rest.layers[l].mlp_w2...);
    f(pre + "mlp_b2", p.layers[l].mlp_b2, rest.layers[l].mlp_b2...);
  }
  f(std::string("final_ln.gamma"), p.final_ln.gamma, rest.final_ln.gamma...);
  f(std::string("final_ln.beta"), p.final_ln.beta, rest.final_ln.beta...);
  f(std::string("head_w"), p.head_w, rest.head_w...);
  f(std::string("head_b"), p.head_b, rest.head_b...);
}

/// Empty parameter set with the same layer/head structure as `p`.
template <class U, class T>
BasicViTParams<U> skeleton_like(const BasicViTParams<T>& p) {
  BasicViTParams<U> s;
  s.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) s.layers[l].attn.heads.resize(p.layers[l].attn.heads.size());
  return s;
}

struct ViTModel {
  ViTConfig config;
  ViTParams params;

  std::size_t num_parameters() const {
    std::size_t n = 0;
    auto count = [&n](const std::string&, const Tensor& t) { n += t.numel(); };
    visit_vit_params(count, params);
    return n;
  }
};

/// Expected shape of every named parameter for `c`.
inline ViTParams zero_params(const ViTConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, dh = c.d_head();
  ViTParams p;
  p.patch_w = Tensor(Shape{c.patch_dim(), d});
  p.patch_b = Tensor(Shape{d});
  p.cls_token = Tensor(Shape{d});
  p.pos_embed = Tensor(Shape{c.seq_len(), d});
  p.layers.resize(c.depth);
  for (auto& layer : p.layers) {
    layer.ln1 = {Tensor(Shape{d}, 1.0), Tensor(Shape{d})};
    layer.ln2 = {Tensor(Shape{d}, 1.0), Tensor(Shape{d})};
    for (std::size_t h = 0; h < c.heads; ++h) {
      layer.attn.heads.push_back(HeadParams{Tensor(Shape{d, dh}), Tensor(Shape{d, dh}), Tensor(Shape{d, dh}),
                                            Tensor(Shape{dh}), Tensor(Shape{dh}), Tensor(Shape{dh})});
    }
    layer.attn.w_o = Tensor(Shape{c.heads * dh, d});
    layer.attn.b_o = Tensor(Shape{d});
    layer.mlp_w1 = Tensor(Shape{d, c.mlp_hidden});
    layer.mlp_b1 = Tensor(Shape{c.mlp_hidden});
    layer.mlp_w2 = Tensor(Shape{c.mlp_hidden, d});
    layer.mlp_b2 = Tensor(Shape{d});
  }
  p.final_ln = {Tensor(Shape{d}, 1.0), Tensor(Shape{d})};
  p.head_w = Tensor(Shape{d, c.num_classes});
  p.head_b = Tensor(Shape{c.num_classes});
  return p;
}

/// Random initialization: matrices ~ N(0, 1/fan_in), embeddings ~ N(0, 0.02²),
/// biases zero, layernorm identity.
inline ViTModel init_vit(const ViTConfig& c, std::uint64_t seed) {
  ViTModel m{c, zero_params(c)};
  Rng rng = make_rng(seed, "init");
  auto init = [&rng](const std::string& name, Tensor& t) {
    const bool is_matrix = t.rank() == 2 && name != "pos_embed";
    if (is_matrix) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(t.dim(0)));
      t = random_normal(t.shape(), rng, 0.0, sd);
    } else if (name == "pos_embed" || name == "cls_token") {
      t = random_normal(t.shape(), rng, 0.0, 0.02);
    }
  };
  visit_vit_params(init, m.params);
  return m;
}

inline BoundViT bind(Tape& tape, const ViTParams& p, bool trainable) {
  BoundViT b = skeleton_like<Var>(p);
  Binder binder{&tape, trainable};
  visit_vit_params(binder, p, b);
  return b;
}

/// Flat gather indices turning a C×H×W image into n × (C·p·p) patch rows,
/// rows in token order (row-major over the patch grid), features ordered
/// (channel, row-in-patch, col-in-patch).
inline std::vector<std::size_t> patchify_index(const ViTConfig& c) {
  std::vector<std::size_t> idx;
  idx.reserve(c.num_patches() * c.patch_dim());
  const std::size_t s = c.image_size, ps = c.patch_size;
  for (std::size_t gr = 0; gr < c.grid(); ++gr)
    for (std::size_t gc = 0; gc < c.grid(); ++gc)
      for (std::size_t ch = 0; ch < c.channels; ++ch)
        for (std::size_t r = 0; r < ps; ++r)
          for (std::size_t q = 0; q < ps; ++q) idx.push_back(ch * s * s + (gr * ps + r) * s + gc * ps + q);
  return idx;
}

/// Patch tokens before the class token and positional embeddings are added.
inline Var patch_tokens(Var image, const ViTConfig& c, const BoundViT& p) {
  if (image.shape() != c.image_shape()) {
    throw DimensionError("image " + shape_str(image.shape()) + " does not match config " + shape_str(c.image_shape()));
  }
  Var patches = gather(image, patchify_index(c), Shape{c.num_patches(), c.patch_dim()});
  return add_row(matmul(patches, p.patch_w), p.patch_b);
}

/// (n+1) × d_model input sequence: class token, projected patches, plus positions.
inline Var patch_embed(Var image, const ViTConfig& c, const BoundViT& p) {
  Var tokens = patch_tokens(image, c, p);
  Var cls = reshape(p.cls_token, Shape{1, c.d_model});
  return add(concat({cls, tokens}, 0), p.pos_embed);
}

/// Key interception at layer `layer`, head `head`.
using LayerKeyHook = std::function<Var(Var p_k, std::size_t layer, std::size_t head)>;

struct ForwardOptions {
  bool trainable = false;
  LayerKeyHook key_hook;
};

struct ForwardResult {
  Var logits;
  AttentionTrace trace;
  std::vector<Var> attention_inputs;  // layernormed input of each attention block
  BoundViT params;
};

/// Pre-norm encoder stack; logits come from the final class token.
inline ForwardResult forward(Tape& tape, const ViTModel& model, Var image, const ForwardOptions& opts = {}) {
  const ViTConfig& c = model.config;
  ForwardResult r;
  r.params = bind(tape, model.params, opts.trainable);
  const BoundViT& p = r.params;
  Var x = patch_embed(image, c, p);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    Var h = layernorm(x, layer.ln1.gamma, layer.ln1.beta, c.layernorm_eps);
    r.attention_inputs.push_back(h);
    KeyHook hook;
    if (opts.key_hook) hook = [&opts, l](Var pk, std::size_t head) { return opts.key_hook(pk, l, head); };
    auto [attn_out, layer_trace] = multi_head_self_attention(h, layer.attn, hook);
    r.trace.push_back(std::move(layer_trace));
    x = add(x, attn_out);
    Var h2 = layernorm(x, layer.ln2.gamma, layer.ln2.beta, c.layernorm_eps);
    Var mlp = add_row(matmul(gelu(add_row(matmul(h2, layer.mlp_w1), layer.mlp_b1)), layer.mlp_w2), layer.mlp_b2);
    x = add(x, mlp);
  }
  Var cls = slice(x, 0, 0, 1);
  Var normed = layernorm(cls, p.final_ln.gamma, p.final_ln.beta, c.layernorm_eps);
  r.logits = reshape(add_row(matmul(normed, p.head_w), p.head_b), Shape{c.num_classes});
  return r;
}

inline Tensor predict_logits(const ViTModel& model, const Tensor& image) {
  Tape tape;
  return forward(tape, model, tape.constant(image)).logits.value();
}

inline std::size_t argmax(const Tensor& v) {
  const auto vals = v.values();
  return static_cast<std::size_t>(std::max_element(vals.begin(), vals.end()) - vals.begin());
}

inline std::size_t predict(const ViTModel& model, const Tensor& image) { return argmax(predict_logits(model, image)); }

}  // namespace afool
