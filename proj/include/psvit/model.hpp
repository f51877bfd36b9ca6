#pragma once

#include <vector>

#include "psvit/genotype.hpp"
#include "psvit/layers.hpp"

namespace psvit {

// A standalone network realized from a genotype: patch embedding, stages of
// encoder layers (with per-layer attention sharing), token pooling between
// stages with a re-learned positional embedding per stage, final norm and the
// classification head (CLS token in 1-D mode, GAP in 2-D mode).
class GenotypeModel {
public:
  GenotypeModel(const Genotype& g, std::uint64_t seed);

  Tensor forward(const Tensor& image) const;

  struct TraceEntry {
    std::size_t stage = 0;
    std::size_t layer = 0;  // index within the stage's realized layers
    bool shared = false;
    AttentionMaps maps;
  };
  Tensor forward_traced(const Tensor& image, std::vector<TraceEntry>* trace) const;

  void visit_params(const ParamFn& fn);
  const Genotype& genotype() const { return genotype_; }
  HeadMode head_mode() const {
    return genotype_.pooling_mode == PoolingMode::one_d ? HeadMode::cls_token : HeadMode::gap;
  }

  struct StageBlock {
    std::vector<EncoderLayer> layers;
    std::vector<bool> share_flags;
  };

  Genotype genotype_;
  PatchEmbed embed;
  std::vector<StageBlock> stages;
  std::vector<TokenPool1d> pools1d;
  std::vector<TokenPool2d> pools2d;
  std::vector<Tensor> stage_pos;  // index i belongs to stage i+1
  Tensor final_ln_g, final_ln_b;
  ClassifierHead head;
};

}  // namespace psvit
