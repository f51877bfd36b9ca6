#include "psvit/model.hpp"

#include "psvit/errors.hpp"

namespace psvit {

GenotypeModel::GenotypeModel(const Genotype& g, std::uint64_t seed) : genotype_(g) {
  require_valid(g);
  // One RNG stream, fixed construction order, so seeds reproduce bit-exactly.
  Rng rng(seed);
  PatchEmbedConfig pc = g.patch;
  pc.embed_dim = g.stages[0].dim;
  embed = PatchEmbed(pc, rng);
  for (std::size_t si = 0; si < g.stages.size(); ++si) {
    const auto& s = g.stages[si];
    StageBlock block;
    for (const auto& layer : s.realized_layers()) {
      EncoderLayerConfig cfg;
      cfg.dim = s.dim;
      cfg.heads = s.heads;
      cfg.share_attention_from_previous = layer.share_from_previous;
      block.layers.emplace_back(cfg, rng);
      block.share_flags.push_back(layer.share_from_previous);
    }
    stages.push_back(std::move(block));
    if (si + 1 < g.stages.size()) {
      const auto& nx = g.stages[si + 1];
      if (g.pooling_mode == PoolingMode::one_d) {
        pools1d.emplace_back(s.dim, nx.dim, rng);
      } else {
        pools2d.emplace_back(s.dim, nx.dim, rng);
      }
      stage_pos.push_back(Tensor::randn({nx.tokens, nx.dim}, rng, 0.02, true));
    }
  }
  final_ln_g = Tensor::full({g.stages.back().dim}, 1.0, true);
  final_ln_b = Tensor::zeros({g.stages.back().dim}, true);
  head = ClassifierHead(g.stages.back().dim, g.num_classes, rng);
}

Tensor GenotypeModel::forward(const Tensor& image) const { return forward_traced(image, nullptr); }

Tensor GenotypeModel::forward_traced(const Tensor& image,
                                     std::vector<TraceEntry>* trace) const {
  Tensor x = embed.forward(image);
  std::size_t grid = genotype_.patch.grid();
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const auto& block = stages[si];
    AttentionMaps prev_maps;
    for (std::size_t li = 0; li < block.layers.size(); ++li) {
      const bool shares = block.share_flags[li];
      auto [out, maps] = block.layers[li].forward(x, shares ? &prev_maps : nullptr);
      x = out;
      prev_maps = maps;
      if (trace) trace->push_back({si, li, shares, maps});
    }
    if (si + 1 < stages.size()) {
      if (genotype_.pooling_mode == PoolingMode::one_d) {
        x = pools1d[si].forward(x);
      } else {
        x = reshape(x, {grid, grid, genotype_.stages[si].dim});
        x = pools2d[si].forward(x);
        grid = x.shape()[0];
        x = reshape(x, {grid * grid, genotype_.stages[si + 1].dim});
      }
      x = add(x, stage_pos[si]);
    }
  }
  x = layer_norm(x, final_ln_g, final_ln_b);
  return head.forward(x, head_mode(), genotype_.patch.use_cls_token);
}

void GenotypeModel::visit_params(const ParamFn& fn) {
  embed.visit_params("embed", fn);
  for (std::size_t si = 0; si < stages.size(); ++si) {
    for (std::size_t li = 0; li < stages[si].layers.size(); ++li) {
      stages[si].layers[li].visit_params("stage" + std::to_string(si) + ".layer" +
                                             std::to_string(li),
                                         fn);
    }
    if (si + 1 < stages.size()) {
      const std::string pool_name = "pool" + std::to_string(si);
      if (genotype_.pooling_mode == PoolingMode::one_d) {
        pools1d[si].visit_params(pool_name, fn);
      } else {
        pools2d[si].visit_params(pool_name, fn);
      }
      fn("pos" + std::to_string(si + 1), stage_pos[si]);
    }
  }
  fn("final_norm.g", final_ln_g);
  fn("final_norm.b", final_ln_b);
  head.visit_params("head", fn);
}

}  // namespace psvit
