#include <doctest.h>

#include "grad_check.hpp"
#include "psvit/errors.hpp"
#include "psvit/model.hpp"

using namespace psvit;
using psvit::test::max_grad_rel_error;

namespace {

Genotype tiny_two_stage() {
  Genotype g;
  g.pooling_mode = PoolingMode::one_d;
  g.patch = {8, 4, 1, 6, true};  // 5 tokens
  StageSpec s0;
  s0.tokens = 5;
  s0.dim = 6;
  s0.heads = 2;
  s0.cells = {CellChoice::Basic};
  StageSpec s1;
  s1.tokens = 3;
  s1.dim = 8;
  s1.heads = 2;
  s1.cells = {CellChoice::SharedPair};
  g.stages = {s0, s1};
  g.num_classes = 4;
  return g;
}

}  // namespace

TEST_CASE("model forward shapes and trace") {
  const Genotype toy = preset_genotype("toy");
  const GenotypeModel model(toy, 1);
  Rng rng(2);
  const Tensor img = Tensor::randn({32, 32, 1}, rng);
  std::vector<GenotypeModel::TraceEntry> trace;
  const Tensor logits = model.forward_traced(img, &trace);
  CHECK(logits.shape() == Shape{1, 10});
  CHECK(trace.size() == 12);
  // maps stay within a stage: same token count for every layer of the stage
  for (const auto& t : trace) {
    CHECK(t.maps.tokens() == toy.stages[t.stage].tokens);
    CHECK(t.maps.head_count() == toy.stages[t.stage].heads);
  }
}

TEST_CASE("2-D model forward") {
  const Genotype toy2d = preset_genotype("toy-2d");
  const GenotypeModel model(toy2d, 3);
  Rng rng(4);
  const Tensor img = Tensor::randn({32, 32, 1}, rng);
  const Tensor logits = model.forward(img);
  CHECK(logits.shape() == Shape{1, 10});
}

TEST_CASE("sharing-2 genotype shares maps pairwise") {
  const GenotypeModel model(preset_genotype("toy-sharing2"), 5);
  Rng rng(6);
  std::vector<GenotypeModel::TraceEntry> trace;
  model.forward_traced(Tensor::randn({32, 32, 1}, rng), &trace);
  REQUIRE(trace.size() == 12);
  for (std::size_t i = 0; i < trace.size(); i += 2) {
    CHECK_FALSE(trace[i].shared);
    CHECK(trace[i + 1].shared);
    // the sharing layer hands back the producer's maps unchanged
    for (std::size_t h = 0; h < trace[i].maps.head_count(); ++h) {
      CHECK(trace[i + 1].maps.per_head[h].storage_id() == trace[i].maps.per_head[h].storage_id());
    }
  }
}

TEST_CASE("manual sharing-3 runs reuse one map across three layers") {
  Genotype g = preset_genotype("toy");
  g.stages[0].cells.clear();
  g.stages[0].manual_layers =
      std::vector<LayerSpec>{{false}, {true}, {true}, {false}, {true}, {true}};
  require_valid(g);
  const GenotypeModel model(g, 7);
  Rng rng(8);
  std::vector<GenotypeModel::TraceEntry> trace;
  model.forward_traced(Tensor::randn({32, 32, 1}, rng), &trace);
  CHECK(trace[1].maps.per_head[0].storage_id() == trace[0].maps.per_head[0].storage_id());
  CHECK(trace[2].maps.per_head[0].storage_id() == trace[0].maps.per_head[0].storage_id());
  CHECK(trace[4].maps.per_head[0].storage_id() == trace[3].maps.per_head[0].storage_id());
}

TEST_CASE("stage schedule composes to the reference token counts") {
  // embed + pools must reproduce the schedule exactly for any valid genotype
  for (const char* name : {"toy", "dimension2", "toy-2d"}) {
    const Genotype g = preset_genotype(name);
    std::size_t tokens = [&] {
      PatchEmbedConfig pc = g.patch;
      pc.embed_dim = g.stages[0].dim;
      return pc.token_count();
    }();
    for (std::size_t i = 0; i < g.stages.size(); ++i) {
      CAPTURE(name);
      CHECK(tokens == g.stages[i].tokens);
      if (i + 1 < g.stages.size()) tokens = pooled_tokens(tokens, g.pooling_mode);
    }
  }
}

TEST_CASE("full model gradient check (two stages, sharing on the path)") {
  GenotypeModel model(tiny_two_stage(), 11);
  Rng rng(12);
  const Tensor img = Tensor::randn({8, 8, 1}, rng);
  const std::vector<std::size_t> label{2};

  std::vector<Tensor*> params;
  model.visit_params([&params](const std::string&, Tensor& t) { params.push_back(&t); });
  REQUIRE(params.size() > 20);
  auto fn = [&] { return cross_entropy(model.forward(img), label, 0.0); };
  CHECK(max_grad_rel_error(fn, params) < 1e-4);
}

TEST_CASE("deterministic construction and forward") {
  auto run = [] {
    GenotypeModel model(preset_genotype("toy"), 99);
    Rng rng(1);
    return model.forward(Tensor::randn({32, 32, 1}, rng)).data();
  };
  CHECK(run() == run());
}

TEST_CASE("visit_params hits every tensor exactly once") {
  GenotypeModel model(preset_genotype("toy"), 0);
  std::vector<std::string> names;
  model.visit_params([&names](const std::string& n, Tensor&) { names.push_back(n); });
  std::vector<std::string> sorted = names;
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  CHECK(std::find(names.begin(), names.end(), "embed.cls") != names.end());
  CHECK(std::find(names.begin(), names.end(), "pos1") != names.end());
  CHECK(std::find(names.begin(), names.end(), "head.w") != names.end());
}
