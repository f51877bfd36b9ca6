#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "psvit/tensor.hpp"

namespace psvit {

using ParamFn = std::function<void(const std::string& name, Tensor& param)>;

// Post-softmax per-head score matrices, each [N x N]. Kept as tape tensors so
// gradients flow through shared maps back into the producing layer.
struct AttentionMaps {
  std::vector<Tensor> per_head;

  std::size_t head_count() const { return per_head.size(); }
  std::size_t tokens() const { return per_head.empty() ? 0 : per_head[0].rows(); }
};

// Eq: softmax(Q·K^T / sqrt(d_h)) · V; also returns the score matrix.
std::pair<Tensor, Tensor> scaled_dot_product_attention(const Tensor& q, const Tensor& k,
                                                       const Tensor& v);

struct EncoderLayerConfig {
  std::size_t dim = 0;
  std::size_t heads = 1;
  std::size_t mlp_ratio = 4;
  bool share_attention_from_previous = false;

  std::size_t head_dim() const { return dim / heads; }
  void check() const;
};

// Multi-head self-attention. In sharing mode the layer owns no Q/K projection
// parameters; it projects V only and applies the maps handed in.
class MultiHeadAttention {
public:
  MultiHeadAttention(const EncoderLayerConfig& cfg, Rng& rng);

  std::pair<Tensor, AttentionMaps> forward(const Tensor& x,
                                           const AttentionMaps* shared_in = nullptr) const;
  void visit_params(const std::string& prefix, const ParamFn& fn);

  EncoderLayerConfig cfg;
  Tensor wq, bq, wk, bk;  // undefined in sharing mode
  Tensor wv, bv, wo, bo;
};

// Pre-norm transformer layer: x + MHA(LN(x)), then + MLP(LN(.)).
class EncoderLayer {
public:
  EncoderLayer(const EncoderLayerConfig& cfg, Rng& rng);

  std::pair<Tensor, AttentionMaps> forward(const Tensor& x,
                                           const AttentionMaps* shared_in = nullptr) const;
  void visit_params(const std::string& prefix, const ParamFn& fn);

  EncoderLayerConfig cfg;
  MultiHeadAttention attn;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// conv1d (k=3, s=1, p=1) mapping dim_in -> dim_out over the token axis, then
// maxpool1d (k=3, s=2, p=1). N -> floor((N-1)/2) + 1. CLS pools as an
// ordinary position.
class TokenPool1d {
public:
  TokenPool1d(std::size_t dim_in, std::size_t dim_out, Rng& rng);

  Tensor forward(const Tensor& x) const;  // [N x dim_in] -> [N' x dim_out]
  void visit_params(const std::string& prefix, const ParamFn& fn);

  static std::size_t out_tokens(std::size_t n) { return (n - 1) / 2 + 1; }

  std::size_t dim_in, dim_out;
  Tensor w, b;
};

// conv2d k=3, s=2, p=1; halves each spatial axis.
class TokenPool2d {
public:
  TokenPool2d(std::size_t dim_in, std::size_t dim_out, Rng& rng);

  Tensor forward(const Tensor& x) const;  // [H x W x dim_in] -> [H/2 x W/2 x dim_out]
  void visit_params(const std::string& prefix, const ParamFn& fn);

  std::size_t dim_in, dim_out;
  Tensor w, b;
};

struct PatchEmbedConfig {
  std::size_t image_size = 0;  // H = W
  std::size_t patch_size = 0;
  std::size_t in_channels = 1;
  std::size_t embed_dim = 0;
  bool use_cls_token = true;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t token_count() const { return grid() * grid() + (use_cls_token ? 1 : 0); }
  void check() const;
};

// Flattened non-overlapping patches, linear projection, learned positional
// embedding, optional CLS token prepended.
class PatchEmbed {
public:
  PatchEmbed() = default;
  PatchEmbed(const PatchEmbedConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& image) const;  // [H x W x C] -> [N x dim]
  void visit_params(const std::string& prefix, const ParamFn& fn);

  PatchEmbedConfig cfg;
  Tensor w, b, pos;
  Tensor cls;  // undefined when use_cls_token is false
};

enum class HeadMode { cls_token, gap };

class ClassifierHead {
public:
  ClassifierHead() = default;
  ClassifierHead(std::size_t dim, std::size_t num_classes, Rng& rng);

  // gap averages spatial tokens (skips CLS when has_cls).
  Tensor forward(const Tensor& features, HeadMode mode, bool has_cls) const;
  void visit_params(const std::string& prefix, const ParamFn& fn);

  std::size_t dim = 0, num_classes = 0;
  Tensor w, b;
};

// Pearson correlation of two equal-length series; throws NumericError on zero
// variance. Bitwise-identical inputs short-circuit to exactly 1.0.
double pearson_correlation(const std::vector<double>& a, const std::vector<double>& b);

// Per-head Pearson correlation of mean-centered flattened maps.
std::vector<double> attention_correlation(const AttentionMaps& a, const AttentionMaps& b);

// Dense dump: "PSAM", u32 heads, u32 tokens, then heads*N*N f64 little-endian.
struct AttentionMapsDump {
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<double> data;  // row-major per head

  std::vector<double> head_slice(std::size_t h) const;
};

AttentionMapsDump snapshot_maps(const AttentionMaps& maps);
void write_attention_maps(std::ostream& os, const AttentionMapsDump& dump);
AttentionMapsDump read_attention_maps(std::istream& is);
std::vector<double> attention_correlation(const AttentionMapsDump& a, const AttentionMapsDump& b);

}  // namespace psvit
