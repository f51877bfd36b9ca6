#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "grad_check.hpp"
#include "psvit/errors.hpp"
#include "psvit/layers.hpp"

using namespace psvit;
using psvit::test::max_grad_rel_error;

namespace {

// Straight-line multi-head attention written independently of the tape
// engine: plain loops over raw vectors.
std::vector<double> mha_reference(const std::vector<double>& x, std::size_t n, std::size_t dim,
                                  std::size_t heads, const MultiHeadAttention& layer) {
  const std::size_t dh = dim / heads;
  auto project = [&](const Tensor& w, const Tensor& b) {
    std::vector<double> out(n * dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < dim; ++j) {
        double acc = b.data()[j];
        for (std::size_t k = 0; k < dim; ++k) acc += x[i * dim + k] * w.data()[k * dim + j];
        out[i * dim + j] = acc;
      }
    }
    return out;
  };
  const auto q = project(layer.wq, layer.bq);
  const auto k = project(layer.wk, layer.bk);
  const auto v = project(layer.wv, layer.bv);
  std::vector<double> concat(n * dim, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(n, 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < dh; ++t) {
          acc += q[i * dim + h * dh + t] * k[j * dim + h * dh + t];
        }
        logits[j] = acc / std::sqrt(static_cast<double>(dh));
      }
      double mx = logits[0];
      for (double l : logits) mx = std::max(mx, l);
      double denom = 0.0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        denom += l;
      }
      for (double& l : logits) l /= denom;
      for (std::size_t t = 0; t < dh; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += logits[j] * v[j * dim + h * dh + t];
        concat[i * dim + h * dh + t] = acc;
      }
    }
  }
  std::vector<double> y(n * dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      double acc = layer.bo.data()[j];
      for (std::size_t t = 0; t < dim; ++t) acc += concat[i * dim + t] * layer.wo.data()[t * dim + j];
      y[i * dim + j] = acc;
    }
  }
  return y;
}

void zero_all(Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); }

}  // namespace

TEST_CASE("scaled dot-product attention closed forms") {
  SUBCASE("single token") {
    const Tensor q = Tensor::from_data({1, 3}, {0.3, -1.0, 2.0});
    const Tensor v = Tensor::from_data({1, 3}, {5.0, 6.0, 7.0});
    auto [out, scores] = scaled_dot_product_attention(q, q, v);
    CHECK(scores.data() == std::vector<double>{1.0});
    CHECK(out.data() == v.data());
  }
  SUBCASE("zero queries give uniform scores and a column-mean output") {
    Rng rng(4);
    const Tensor q = Tensor::zeros({3, 2});
    const Tensor k = Tensor::randn({3, 2}, rng);
    const Tensor v = Tensor::randn({3, 2}, rng);
    auto [out, scores] = scaled_dot_product_attention(q, k, v);
    for (double s : scores.data()) CHECK(s == doctest::Approx(1.0 / 3).epsilon(1e-14));
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = (v.data()[c] + v.data()[2 + c] + v.data()[4 + c]) / 3.0;
      CHECK(out.data()[c] == doctest::Approx(mean).epsilon(1e-12));
      CHECK(out.data()[2 + c] == doctest::Approx(mean).epsilon(1e-12));
    }
  }
  SUBCASE("N=2 d_h=1 exponential oracle") {
    const Tensor q = Tensor::from_data({2, 1}, {1.0, 0.0});
    const Tensor k = Tensor::from_data({2, 1}, {1.0, 0.0});
    const Tensor v = Tensor::from_data({2, 1}, {2.0, 4.0});
    auto [out, scores] = scaled_dot_product_attention(q, k, v);
    const double e = std::exp(1.0);
    CHECK(scores.data()[0] == doctest::Approx(e / (e + 1)).epsilon(1e-12));
    CHECK(scores.data()[1] == doctest::Approx(1 / (e + 1)).epsilon(1e-12));
    CHECK(out.data()[0] == doctest::Approx((2 * e + 4) / (e + 1)).epsilon(1e-12));
    CHECK(out.data()[0] == doctest::Approx(2.5379).epsilon(1e-4));
    CHECK(out.data()[1] == doctest::Approx(3.0).epsilon(1e-12));
  }
  SUBCASE("contract errors") {
    const Tensor q = Tensor::from_data({2, 1}, {1.0, 0.0});
    const Tensor k3 = Tensor::from_data({3, 1}, {1.0, 0.0, 1.0});
    CHECK_THROWS_AS(scaled_dot_product_attention(q, k3, q), ContractError);
  }
}

TEST_CASE("multi-head attention matches the straight-line reference") {
  EncoderLayerConfig cfg;
  cfg.dim = 4;
  cfg.heads = 2;
  Rng rng(0);
  const MultiHeadAttention layer(cfg, rng);
  Rng xrng(9);
  const Tensor x = Tensor::randn({3, 4}, xrng);
  auto [out, maps] = layer.forward(x);
  const auto ref = mha_reference(x.data(), 3, 4, 2, layer);
  REQUIRE(out.data().size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
  CHECK(maps.head_count() == 2);
  CHECK(maps.tokens() == 3);
}

TEST_CASE("attention maps are row-stochastic with entries in [0,1]") {
  EncoderLayerConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  Rng rng(21);
  const MultiHeadAttention layer(cfg, rng);
  const Tensor x = Tensor::randn({6, 8}, rng, 2.0);
  auto [out, maps] = layer.forward(x);
  for (const auto& m : maps.per_head) {
    for (std::size_t i = 0; i < 6; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        const double s = m.data()[i * 6 + j];
        CHECK(s >= 0.0);
        CHECK(s <= 1.0);
        total += s;
      }
      CHECK(std::abs(total - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("sharing-mode equivalence with copied V and output projections") {
  EncoderLayerConfig basic_cfg;
  basic_cfg.dim = 6;
  basic_cfg.heads = 3;
  EncoderLayerConfig share_cfg = basic_cfg;
  share_cfg.share_attention_from_previous = true;

  Rng rng(14);
  const MultiHeadAttention basic(basic_cfg, rng);
  MultiHeadAttention sharing(share_cfg, rng);
  sharing.wv.data() = basic.wv.data();
  sharing.bv.data() = basic.bv.data();
  sharing.wo.data() = basic.wo.data();
  sharing.bo.data() = basic.bo.data();

  for (int trial = 0; trial < 100; ++trial) {
    Rng xrng(1000 + trial);
    const Tensor x = Tensor::randn({5, 6}, xrng);
    auto [ref_out, maps] = basic.forward(x);
    auto [shared_out, shared_maps] = sharing.forward(x, &maps);
    for (std::size_t i = 0; i < ref_out.data().size(); ++i) {
      CHECK(std::abs(shared_out.data()[i] - ref_out.data()[i]) <= 1e-12);
    }
    // the maps come back unchanged, same storage
    for (std::size_t h = 0; h < maps.head_count(); ++h) {
      CHECK(shared_maps.per_head[h].storage_id() == maps.per_head[h].storage_id());
    }
  }
}

TEST_CASE("sharing with identity maps reduces to the V path") {
  EncoderLayerConfig cfg;
  cfg.dim = 4;
  cfg.heads = 2;
  cfg.share_attention_from_previous = true;
  Rng rng(3);
  const MultiHeadAttention layer(cfg, rng);
  const Tensor x = Tensor::randn({3, 4}, rng);

  AttentionMaps identity;
  for (std::size_t h = 0; h < 2; ++h) {
    identity.per_head.push_back(Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  }
  auto [out, maps] = layer.forward(x, &identity);
  const Tensor expect = linear(linear(x, layer.wv, layer.bv), layer.wo, layer.bo);
  for (std::size_t i = 0; i < out.data().size(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-14));
  }
}

TEST_CASE("sharing-mode contract errors") {
  EncoderLayerConfig cfg;
  cfg.dim = 4;
  cfg.heads = 2;
  cfg.share_attention_from_previous = true;
  Rng rng(6);
  const MultiHeadAttention layer(cfg, rng);
  const Tensor x = Tensor::randn({3, 4}, rng);
  CHECK_THROWS_AS(layer.forward(x), ContractError);

  AttentionMaps wrong;
  wrong.per_head.push_back(Tensor::zeros({4, 4}));
  wrong.per_head.push_back(Tensor::zeros({4, 4}));
  CHECK_THROWS_AS(layer.forward(x, &wrong), ContractError);

  // a sharing layer owns no Q/K parameters
  CHECK_FALSE(layer.wq.defined());
  CHECK_FALSE(layer.wk.defined());
}

TEST_CASE("encoder layer becomes the identity with zeroed branch outputs") {
  EncoderLayerConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  Rng rng(7);
  EncoderLayer layer(cfg, rng);
  zero_all(layer.attn.wo);
  zero_all(layer.attn.bo);
  zero_all(layer.mlp_w2);
  zero_all(layer.mlp_b2);
  const Tensor x = Tensor::randn({5, 8}, rng);
  auto [out, maps] = layer.forward(x);
  CHECK(out.data() == x.data());
  CHECK(out.shape() == x.shape());
}

TEST_CASE("encoder layer output shape is [N x dim] in both modes") {
  EncoderLayerConfig cfg;
  cfg.dim = 8;
  cfg.heads = 4;
  Rng rng(12);
  const EncoderLayer basic(cfg, rng);
  cfg.share_attention_from_previous = true;
  const EncoderLayer sharing(cfg, rng);
  const Tensor x = Tensor::randn({7, 8}, rng);
  auto [y1, maps] = basic.forward(x);
  CHECK(y1.shape() == Shape{7, 8});
  auto [y2, maps2] = sharing.forward(x, &maps);
  CHECK(y2.shape() == Shape{7, 8});
}

TEST_CASE("encoder layer gradient check at dim 8, heads 2, N 5") {
  EncoderLayerConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  Rng rng(19);
  EncoderLayer layer(cfg, rng);
  Tensor x = Tensor::randn({5, 8}, rng, 1.0, true);
  const Tensor r = Tensor::randn({5, 8}, rng);

  std::vector<Tensor*> params{&x};
  layer.visit_params("layer", [&params](const std::string&, Tensor& t) { params.push_back(&t); });
  auto fn = [&] { return psvit::test::project_to_scalar(layer.forward(x).first, r); };
  CHECK(max_grad_rel_error(fn, params) < 1e-4);
}

TEST_CASE("gradients flow through shared maps into the producing layer") {
  EncoderLayerConfig cfg;
  cfg.dim = 6;
  cfg.heads = 2;
  Rng rng(23);
  EncoderLayer first(cfg, rng);
  cfg.share_attention_from_previous = true;
  EncoderLayer second(cfg, rng);
  Tensor x = Tensor::randn({4, 6}, rng, 1.0, true);
  const Tensor r = Tensor::randn({4, 6}, rng);

  std::vector<Tensor*> params{&x};
  first.visit_params("first", [&params](const std::string&, Tensor& t) { params.push_back(&t); });
  second.visit_params("second", [&params](const std::string&, Tensor& t) { params.push_back(&t); });
  auto fn = [&] {
    auto [h, maps] = first.forward(x);
    return psvit::test::project_to_scalar(second.forward(h, &maps).first, r);
  };
  CHECK(max_grad_rel_error(fn, params) < 1e-4);

  // the first layer's Q/K projections must matter to the shared consumer
  fn().backward();
  double qk_grad_mag = 0.0;
  for (double g : first.attn.wq.grad()) qk_grad_mag += std::abs(g);
  CHECK(qk_grad_mag > 0.0);
}

TEST_CASE("token pooling 1d follows the token schedule") {
  Rng rng(2);
  SUBCASE("197 -> 99 -> 50") {
    TokenPool1d pool(4, 4, rng);
    const Tensor x = Tensor::randn({197, 4}, rng);
    const Tensor y = pool.forward(x);
    CHECK(y.shape() == Shape{99, 4});
    const Tensor z = pool.forward(Tensor::randn({99, 4}, rng));
    CHECK(z.rows() == 50);
  }
  SUBCASE("785 -> 393") {
    CHECK(TokenPool1d::out_tokens(785) == 393);
    CHECK(TokenPool1d::out_tokens(393) == 197);
  }
  SUBCASE("dim must not shrink") {
    CHECK_THROWS_AS(TokenPool1d(8, 4, rng), ContractError);
  }
  SUBCASE("too few tokens") {
    TokenPool1d pool(2, 3, rng);
    CHECK_THROWS_AS(pool.forward(Tensor::randn({1, 2}, rng)), ShapeError);
  }
}

TEST_CASE("token pooling 1d values match a direct conv+pool oracle") {
  Rng rng(31);
  TokenPool1d pool(2, 3, rng);
  const Tensor x = Tensor::randn({5, 2}, rng);
  const Tensor y = pool.forward(x);
  REQUIRE(y.shape() == Shape{3, 3});

  // direct oracle: conv k=3 s=1 p=1 then max over windows k=3 s=2 p=1
  std::vector<double> conv(5 * 3, 0.0);
  for (int l = 0; l < 5; ++l) {
    for (int o = 0; o < 3; ++o) {
      double acc = pool.b.data()[o];
      for (int t = 0; t < 3; ++t) {
        const int src = l + t - 1;
        if (src < 0 || src >= 5) continue;
        for (int c = 0; c < 2; ++c) {
          acc += x.data()[src * 2 + c] * pool.w.data()[(o * 2 + c) * 3 + t];
        }
      }
      conv[l * 3 + o] = acc;
    }
  }
  for (int l = 0; l < 3; ++l) {
    for (int o = 0; o < 3; ++o) {
      double best = -1e300;
      for (int t = 0; t < 3; ++t) {
        const int src = 2 * l + t - 1;
        if (src < 0 || src >= 5) continue;
        best = std::max(best, conv[src * 3 + o]);
      }
      CHECK(y.data()[l * 3 + o] == doctest::Approx(best).epsilon(1e-12));
    }
  }
}

TEST_CASE("token pooling 2d") {
  Rng rng(17);
  SUBCASE("28x28 -> 14x14 -> 7x7 and the 75% reduction") {
    TokenPool2d pool(2, 2, rng);
    const Tensor x = Tensor::randn({28, 28, 2}, rng);
    const Tensor y = pool.forward(x);
    CHECK(y.shape() == Shape{14, 14, 2});
    const Tensor z = pool.forward(y);
    CHECK(z.shape() == Shape{7, 7, 2});
    CHECK(28 * 28 == 784);
    CHECK(14 * 14 == 196);  // 75% fewer tokens per step
  }
  SUBCASE("odd extents rejected") {
    TokenPool2d pool(2, 2, rng);
    CHECK_THROWS_AS(pool.forward(Tensor::randn({7, 8, 2}, rng)), ShapeError);
  }
  SUBCASE("2x2 value oracle") {
    TokenPool2d pool(1, 1, rng);
    const Tensor x = Tensor::from_data({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
    const Tensor y = pool.forward(x);
    REQUIRE(y.shape() == Shape{1, 1, 1});
    // k=3 s=2 p=1 on a 2x2 input: tap (ti, tj) reads pixel (ti-1, tj-1), so
    // the in-range taps are the kernel's bottom-right 2x2 block
    const auto& w = pool.w.data();  // [1 x 1 x 3 x 3]
    const double expect = pool.b.data()[0] + 1.0 * w[1 * 3 + 1] + 2.0 * w[1 * 3 + 2] +
                          3.0 * w[2 * 3 + 1] + 4.0 * w[2 * 3 + 2];
    CHECK(y.data()[0] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("patch embedding token counts") {
  Rng rng(40);
  SUBCASE("224/16 with CLS gives 197 tokens") {
    PatchEmbedConfig cfg{224, 16, 3, 192, true};
    CHECK(cfg.token_count() == 197);
    PatchEmbed embed(cfg, rng);
    const Tensor img = Tensor::randn({224, 224, 3}, rng);
    CHECK(embed.forward(img).shape() == Shape{197, 192});
  }
  SUBCASE("224/8 gives 785 tokens") {
    PatchEmbedConfig cfg{224, 8, 3, 64, true};
    CHECK(cfg.token_count() == 785);
  }
  SUBCASE("8x8 toy, patch 2, no CLS gives 16") {
    PatchEmbedConfig cfg{8, 2, 1, 12, false};
    CHECK(cfg.token_count() == 16);
    PatchEmbed embed(cfg, rng);
    CHECK(embed.forward(Tensor::randn({8, 8, 1}, rng)).shape() == Shape{16, 12});
  }
  SUBCASE("indivisible image rejected") {
    PatchEmbedConfig cfg{10, 3, 1, 4, true};
    CHECK_THROWS_AS(cfg.check(), ContractError);
  }
}

TEST_CASE("classifier head") {
  Rng rng(50);
  ClassifierHead head(4, 3, rng);

  SUBCASE("gap over constant features pools to the constant") {
    const Tensor features = Tensor::full({5, 4}, 2.5);
    const Tensor logits = head.forward(features, HeadMode::gap, false);
    for (std::size_t j = 0; j < 3; ++j) {
      double expect = head.b.data()[j];
      for (std::size_t k = 0; k < 4; ++k) expect += 2.5 * head.w.data()[k * 3 + j];
      CHECK(logits.data()[j] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  SUBCASE("cls mode ignores non-CLS tokens") {
    Tensor features = Tensor::randn({5, 4}, rng);
    const Tensor before = head.forward(features, HeadMode::cls_token, true);
    for (std::size_t i = 4; i < 20; ++i) features.data()[i] += 13.0;  // perturb rows 1..4
    const Tensor after = head.forward(features, HeadMode::cls_token, true);
    CHECK(before.data() == after.data());
  }
  SUBCASE("gap hand oracle on 2 tokens") {
    const Tensor features = Tensor::from_data({2, 4}, {1, 1, 1, 1, 3, 3, 3, 3});
    const Tensor logits = head.forward(features, HeadMode::gap, false);
    for (std::size_t j = 0; j < 3; ++j) {
      double expect = head.b.data()[j];
      for (std::size_t k = 0; k < 4; ++k) expect += 2.0 * head.w.data()[k * 3 + j];
      CHECK(logits.data()[j] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  SUBCASE("cls mode without CLS is a contract error") {
    CHECK_THROWS_AS(head.forward(Tensor::randn({2, 4}, rng), HeadMode::cls_token, false),
                    ContractError);
  }
}

TEST_CASE("attention correlation") {
  Rng rng(60);
  AttentionMaps a;
  for (int h = 0; h < 2; ++h) {
    Tensor logits = Tensor::randn({4, 4}, rng);
    a.per_head.push_back(softmax(logits, 1));
  }

  SUBCASE("corr(A, A) is exactly one") {
    const auto c = attention_correlation(a, a);
    for (double v : c) CHECK(v == 1.0);
  }
  SUBCASE("affine invariance for positive scale") {
    AttentionMaps b;
    for (const auto& m : a.per_head) {
      b.per_head.push_back(add(scale(m, 2.5), Tensor::full(m.shape(), 0.3)));
    }
    for (double v : attention_correlation(a, b)) {
      CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("matches the direct covariance formula") {
    AttentionMaps b;
    for (int h = 0; h < 2; ++h) {
      Tensor logits = Tensor::randn({4, 4}, rng);
      b.per_head.push_back(softmax(logits, 1));
    }
    const auto got = attention_correlation(a, b);
    for (std::size_t h = 0; h < 2; ++h) {
      const auto& xs = a.per_head[h].data();
      const auto& ys = b.per_head[h].data();
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      const double n = 16.0;
      for (std::size_t i = 0; i < 16; ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        syy += ys[i] * ys[i];
        sxy += xs[i] * ys[i];
      }
      const double expect = (sxy - sx * sy / n) /
                            (std::sqrt(sxx - sx * sx / n) * std::sqrt(syy - sy * sy / n));
      CHECK(got[h] == doctest::Approx(expect).epsilon(1e-12));
      CHECK(got[h] >= -1.0);
      CHECK(got[h] <= 1.0);
    }
  }
  SUBCASE("constant maps are undefined") {
    AttentionMaps flat;
    flat.per_head.push_back(Tensor::full({4, 4}, 0.25));
    flat.per_head.push_back(Tensor::full({4, 4}, 0.25));
    AttentionMaps other;
    other.per_head.push_back(a.per_head[0]);
    other.per_head.push_back(a.per_head[1]);
    CHECK_THROWS_AS(attention_correlation(flat, other), NumericError);
  }
}

TEST_CASE("attention map dump round trip") {
  Rng rng(70);
  AttentionMaps a;
  a.per_head.push_back(softmax(Tensor::randn({3, 3}, rng), 1));
  const AttentionMapsDump dump = snapshot_maps(a);
  std::stringstream ss;
  write_attention_maps(ss, dump);
  const AttentionMapsDump back = read_attention_maps(ss);
  CHECK(back.heads == 1);
  CHECK(back.tokens == 3);
  CHECK(back.data == dump.data);
  const auto corr = attention_correlation(dump, back);
  CHECK(corr[0] == 1.0);
}
