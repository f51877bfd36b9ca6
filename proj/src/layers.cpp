#include "psvit/layers.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "psvit/errors.hpp"

namespace psvit {

namespace {
constexpr double kInitStd = 0.02;
}

std::pair<Tensor, Tensor> scaled_dot_product_attention(const Tensor& q, const Tensor& k,
                                                       const Tensor& v) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2) {
    throw ContractError("attention: Q, K, V must be 2-D");
  }
  const std::size_t n = q.rows(), dh = q.cols();
  if (dh == 0) throw ContractError("attention: head dim must be positive");
  if (k.rows() != n || k.cols() != dh || v.rows() != n || v.cols() != dh) {
    throw ContractError("attention: Q " + shape_to_string(q.shape()) + ", K " +
                        shape_to_string(k.shape()) + ", V " + shape_to_string(v.shape()) +
                        " must share [N x d_h]");
  }
  Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor scores = softmax(logits, 1);
  return {matmul(scores, v), scores};
}

void EncoderLayerConfig::check() const {
  if (dim == 0 || heads == 0) throw ContractError("encoder layer: dim and heads must be positive");
  if (dim % heads != 0) {
    throw ContractError("encoder layer: dim " + std::to_string(dim) +
                        " not divisible by heads " + std::to_string(heads));
  }
}

MultiHeadAttention::MultiHeadAttention(const EncoderLayerConfig& c, Rng& rng) : cfg(c) {
  cfg.check();
  const std::size_t d = cfg.dim;
  if (!cfg.share_attention_from_previous) {
    wq = Tensor::randn({d, d}, rng, kInitStd, true);
    bq = Tensor::zeros({d}, true);
    wk = Tensor::randn({d, d}, rng, kInitStd, true);
    bk = Tensor::zeros({d}, true);
  }
  wv = Tensor::randn({d, d}, rng, kInitStd, true);
  bv = Tensor::zeros({d}, true);
  wo = Tensor::randn({d, d}, rng, kInitStd, true);
  bo = Tensor::zeros({d}, true);
}

std::pair<Tensor, AttentionMaps> MultiHeadAttention::forward(const Tensor& x,
                                                             const AttentionMaps* shared_in) const {
  if (x.ndim() != 2 || x.cols() != cfg.dim) {
    throw ContractError("attention: input " + shape_to_string(x.shape()) + " does not match dim " +
                        std::to_string(cfg.dim));
  }
  const std::size_t n = x.rows(), dh = cfg.head_dim();
  if (cfg.share_attention_from_previous) {
    if (shared_in == nullptr) {
      throw ContractError("attention: sharing layer requires incoming attention maps");
    }
    if (shared_in->head_count() != cfg.heads || shared_in->tokens() != n) {
      throw ContractError("attention: shared maps are [" + std::to_string(shared_in->head_count()) +
                          " x " + std::to_string(shared_in->tokens()) + "^2], layer needs [" +
                          std::to_string(cfg.heads) + " x " + std::to_string(n) + "^2]");
    }
  } else if (shared_in != nullptr) {
    throw ContractError("attention: independent layer given shared maps");
  }

  Tensor v_all = linear(x, wv, bv);
  std::vector<Tensor> head_outs;
  AttentionMaps maps;
  head_outs.reserve(cfg.heads);
  maps.per_head.reserve(cfg.heads);

  if (cfg.share_attention_from_previous) {
    // Whole attention computation collapses to scores · V per head.
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      Tensor vh = slice_cols(v_all, h * dh, (h + 1) * dh);
      head_outs.push_back(matmul(shared_in->per_head[h], vh));
      maps.per_head.push_back(shared_in->per_head[h]);
    }
  } else {
    Tensor q_all = linear(x, wq, bq);
    Tensor k_all = linear(x, wk, bk);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      Tensor qh = slice_cols(q_all, h * dh, (h + 1) * dh);
      Tensor kh = slice_cols(k_all, h * dh, (h + 1) * dh);
      Tensor vh = slice_cols(v_all, h * dh, (h + 1) * dh);
      auto [oh, sh] = scaled_dot_product_attention(qh, kh, vh);
      head_outs.push_back(oh);
      maps.per_head.push_back(sh);
    }
  }
  Tensor out = linear(concat_cols(head_outs), wo, bo);
  return {out, maps};
}

void MultiHeadAttention::visit_params(const std::string& prefix, const ParamFn& fn) {
  if (!cfg.share_attention_from_previous) {
    fn(prefix + ".wq", wq);
    fn(prefix + ".bq", bq);
    fn(prefix + ".wk", wk);
    fn(prefix + ".bk", bk);
  }
  fn(prefix + ".wv", wv);
  fn(prefix + ".bv", bv);
  fn(prefix + ".wo", wo);
  fn(prefix + ".bo", bo);
}

EncoderLayer::EncoderLayer(const EncoderLayerConfig& c, Rng& rng) : cfg(c), attn(c, rng) {
  const std::size_t d = cfg.dim, hidden = cfg.mlp_ratio * cfg.dim;
  ln1_g = Tensor::full({d}, 1.0, true);
  ln1_b = Tensor::zeros({d}, true);
  ln2_g = Tensor::full({d}, 1.0, true);
  ln2_b = Tensor::zeros({d}, true);
  mlp_w1 = Tensor::randn({d, hidden}, rng, kInitStd, true);
  mlp_b1 = Tensor::zeros({hidden}, true);
  mlp_w2 = Tensor::randn({hidden, d}, rng, kInitStd, true);
  mlp_b2 = Tensor::zeros({d}, true);
}

std::pair<Tensor, AttentionMaps> EncoderLayer::forward(const Tensor& x,
                                                       const AttentionMaps* shared_in) const {
  auto [attn_out, maps] = attn.forward(layer_norm(x, ln1_g, ln1_b), shared_in);
  Tensor h = add(x, attn_out);
  Tensor m = linear(gelu(linear(layer_norm(h, ln2_g, ln2_b), mlp_w1, mlp_b1)), mlp_w2, mlp_b2);
  return {add(h, m), maps};
}

void EncoderLayer::visit_params(const std::string& prefix, const ParamFn& fn) {
  fn(prefix + ".ln1.g", ln1_g);
  fn(prefix + ".ln1.b", ln1_b);
  attn.visit_params(prefix + ".attn", fn);
  fn(prefix + ".ln2.g", ln2_g);
  fn(prefix + ".ln2.b", ln2_b);
  fn(prefix + ".mlp.w1", mlp_w1);
  fn(prefix + ".mlp.b1", mlp_b1);
  fn(prefix + ".mlp.w2", mlp_w2);
  fn(prefix + ".mlp.b2", mlp_b2);
}

TokenPool1d::TokenPool1d(std::size_t din, std::size_t dout, Rng& rng) : dim_in(din), dim_out(dout) {
  if (dout < din) {
    throw ContractError("token pool: dim_out " + std::to_string(dout) +
                        " must be >= dim_in " + std::to_string(din));
  }
  w = Tensor::randn({dout, din, 3}, rng, kInitStd, true);
  b = Tensor::zeros({dout}, true);
}

Tensor TokenPool1d::forward(const Tensor& x) const {
  if (x.ndim() != 2 || x.cols() != dim_in) {
    throw ShapeError("token pool: input " + shape_to_string(x.shape()) + " does not match dim_in " +
                     std::to_string(dim_in));
  }
  if (x.rows() < 2) throw ShapeError("token pool: need at least 2 tokens");
  return maxpool1d(conv1d(x, w, b, 1, 1), 3, 2, 1);
}

void TokenPool1d::visit_params(const std::string& prefix, const ParamFn& fn) {
  fn(prefix + ".w", w);
  fn(prefix + ".b", b);
}

TokenPool2d::TokenPool2d(std::size_t din, std::size_t dout, Rng& rng) : dim_in(din), dim_out(dout) {
  if (dout < din) {
    throw ContractError("token pool: dim_out " + std::to_string(dout) +
                        " must be >= dim_in " + std::to_string(din));
  }
  w = Tensor::randn({dout, din, 3, 3}, rng, kInitStd, true);
  b = Tensor::zeros({dout}, true);
}

Tensor TokenPool2d::forward(const Tensor& x) const {
  if (x.ndim() != 3 || x.shape()[2] != dim_in) {
    throw ShapeError("token pool 2d: input " + shape_to_string(x.shape()) +
                     " does not match dim_in " + std::to_string(dim_in));
  }
  if (x.shape()[0] % 2 != 0 || x.shape()[1] % 2 != 0) {
    throw ShapeError("token pool 2d: spatial extents must be even, got " +
                     shape_to_string(x.shape()));
  }
  return conv2d(x, w, b, 2, 1);
}

void TokenPool2d::visit_params(const std::string& prefix, const ParamFn& fn) {
  fn(prefix + ".w", w);
  fn(prefix + ".b", b);
}

void PatchEmbedConfig::check() const {
  if (image_size == 0 || patch_size == 0 || in_channels == 0 || embed_dim == 0) {
    throw ContractError("patch embed: all extents must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ContractError("patch embed: image size " + std::to_string(image_size) +
                        " not divisible by patch size " + std::to_string(patch_size));
  }
}

PatchEmbed::PatchEmbed(const PatchEmbedConfig& c, Rng& rng) : cfg(c) {
  cfg.check();
  const std::size_t plen = cfg.patch_size * cfg.patch_size * cfg.in_channels;
  w = Tensor::randn({plen, cfg.embed_dim}, rng, kInitStd, true);
  b = Tensor::zeros({cfg.embed_dim}, true);
  pos = Tensor::randn({cfg.token_count(), cfg.embed_dim}, rng, kInitStd, true);
  if (cfg.use_cls_token) cls = Tensor::randn({1, cfg.embed_dim}, rng, kInitStd, true);
}

Tensor PatchEmbed::forward(const Tensor& image) const {
  if (image.ndim() != 3 || image.shape()[0] != cfg.image_size ||
      image.shape()[1] != cfg.image_size || image.shape()[2] != cfg.in_channels) {
    throw ShapeError("patch embed: image " + shape_to_string(image.shape()) + " does not match " +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                     std::to_string(cfg.in_channels));
  }
  Tensor tokens = linear(extract_patches(image, cfg.patch_size), w, b);
  if (cfg.use_cls_token) tokens = concat_rows({cls, tokens});
  return add(tokens, pos);
}

void PatchEmbed::visit_params(const std::string& prefix, const ParamFn& fn) {
  fn(prefix + ".w", w);
  fn(prefix + ".b", b);
  fn(prefix + ".pos", pos);
  if (cfg.use_cls_token) fn(prefix + ".cls", cls);
}

ClassifierHead::ClassifierHead(std::size_t d, std::size_t classes, Rng& rng)
    : dim(d), num_classes(classes) {
  w = Tensor::randn({d, classes}, rng, kInitStd, true);
  b = Tensor::zeros({classes}, true);
}

Tensor ClassifierHead::forward(const Tensor& features, HeadMode mode, bool has_cls) const {
  if (features.ndim() != 2 || features.cols() != dim) {
    throw ContractError("head: features " + shape_to_string(features.shape()) +
                        " do not match dim " + std::to_string(dim));
  }
  Tensor pooled;
  if (mode == HeadMode::cls_token) {
    if (!has_cls) throw ContractError("head: cls_token mode without a CLS token");
    pooled = slice_rows(features, 0, 1);
  } else {
    Tensor spatial = has_cls ? slice_rows(features, 1, features.rows()) : features;
    pooled = mean(spatial, {0});
  }
  return linear(pooled, w, b);
}

void ClassifierHead::visit_params(const std::string& prefix, const ParamFn& fn) {
  fn(prefix + ".w", w);
  fn(prefix + ".b", b);
}

double pearson_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw ContractError("correlation: series length mismatch");
  }
  if (a == b) return 1.0;  // identical series, definitionally 1
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) {
    throw NumericError("correlation undefined for a constant map (zero variance)");
  }
  return cov / (std::sqrt(va) * std::sqrt(vb));
}

std::vector<double> attention_correlation(const AttentionMaps& a, const AttentionMaps& b) {
  if (a.head_count() != b.head_count() || a.tokens() != b.tokens()) {
    throw ContractError("correlation: map geometry mismatch");
  }
  std::vector<double> out;
  out.reserve(a.head_count());
  for (std::size_t h = 0; h < a.head_count(); ++h) {
    out.push_back(pearson_correlation(a.per_head[h].data(), b.per_head[h].data()));
  }
  return out;
}

std::vector<double> AttentionMapsDump::head_slice(std::size_t h) const {
  const std::size_t sz = tokens * tokens;
  return std::vector<double>(data.begin() + h * sz, data.begin() + (h + 1) * sz);
}

AttentionMapsDump snapshot_maps(const AttentionMaps& maps) {
  AttentionMapsDump dump;
  dump.heads = maps.head_count();
  dump.tokens = maps.tokens();
  dump.data.reserve(dump.heads * dump.tokens * dump.tokens);
  for (const auto& m : maps.per_head) {
    dump.data.insert(dump.data.end(), m.data().begin(), m.data().end());
  }
  return dump;
}

namespace {
constexpr char kMapsMagic[4] = {'P', 'S', 'A', 'M'};
}

void write_attention_maps(std::ostream& os, const AttentionMapsDump& dump) {
  os.write(kMapsMagic, 4);
  const std::uint32_t h = static_cast<std::uint32_t>(dump.heads);
  const std::uint32_t n = static_cast<std::uint32_t>(dump.tokens);
  os.write(reinterpret_cast<const char*>(&h), sizeof h);
  os.write(reinterpret_cast<const char*>(&n), sizeof n);
  os.write(reinterpret_cast<const char*>(dump.data.data()),
           static_cast<std::streamsize>(dump.data.size() * sizeof(double)));
  if (!os) throw IoError("IO", "failed writing attention map dump");
}

AttentionMapsDump read_attention_maps(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMapsMagic, 4) != 0) {
    throw IoError("BAD_MAGIC", "not an attention map dump");
  }
  std::uint32_t h = 0, n = 0;
  is.read(reinterpret_cast<char*>(&h), sizeof h);
  is.read(reinterpret_cast<char*>(&n), sizeof n);
  AttentionMapsDump dump;
  dump.heads = h;
  dump.tokens = n;
  dump.data.resize(static_cast<std::size_t>(h) * n * n);
  is.read(reinterpret_cast<char*>(dump.data.data()),
          static_cast<std::streamsize>(dump.data.size() * sizeof(double)));
  if (!is) throw IoError("IO", "truncated attention map dump");
  return dump;
}

std::vector<double> attention_correlation(const AttentionMapsDump& a, const AttentionMapsDump& b) {
  if (a.heads != b.heads || a.tokens != b.tokens) {
    throw ContractError("correlation: map geometry mismatch");
  }
  std::vector<double> out;
  out.reserve(a.heads);
  for (std::size_t h = 0; h < a.heads; ++h) {
    out.push_back(pearson_correlation(a.head_slice(h), b.head_slice(h)));
  }
  return out;
}

}  // namespace psvit
