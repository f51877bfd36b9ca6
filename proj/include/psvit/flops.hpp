#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psvit/bigint.hpp"
#include "psvit/genotype.hpp"

namespace psvit {

// One costed component. MAC conventions (1 FLOP = 1 multiply-accumulate):
//   independent attention: 4·N·d² projections + N²·d scores + N²·d scores·V
//   sharing attention:     2·N·d² (V, out)    + N²·d scores·V
//   MLP:                   2·r·N·d² (r = mlp_ratio, so 8·N·d² at r = 4)
//   softmax:               N²·heads (independent layers only)
//   layer norm:            5·N·d per norm
//   patch embed:           N_patches·(P²·C)·d
//   pools:                 their convolution MACs
//   head:                  d·num_classes
// Bias multiply-adds are not counted as MACs; biases do count as parameters.
struct CostEntry {
  std::string name;
  std::string kind;  // embed | layer | shared_layer | pool | final_norm | head
  std::size_t stage = SIZE_MAX;
  std::uint64_t attention_macs = 0;
  std::uint64_t mlp_macs = 0;
  std::uint64_t softmax_macs = 0;
  std::uint64_t norm_macs = 0;
  std::uint64_t other_macs = 0;
  std::uint64_t params_attention = 0;
  std::uint64_t params_mlp = 0;
  std::uint64_t params_norm = 0;
  std::uint64_t params_other = 0;

  std::uint64_t total_macs() const {
    return attention_macs + mlp_macs + softmax_macs + norm_macs + other_macs;
  }
  std::uint64_t total_params() const {
    return params_attention + params_mlp + params_norm + params_other;
  }
};

struct FlopsReport {
  std::vector<CostEntry> entries;

  std::uint64_t total_macs() const;
  std::uint64_t total_params() const;
  std::uint64_t attention_macs() const;
  std::uint64_t mlp_macs() const;
  std::uint64_t attention_params() const;
  std::uint64_t mlp_params() const;

  std::string to_json(int indent = 2) const;
  std::string to_table() const;  // aligned text
};

// Deterministic integer cost accounting; throws ValidationError on an invalid
// genotype. include_bias controls whether biases appear in parameter counts.
FlopsReport count_flops(const Genotype& g, bool include_bias = true);

struct ParamBreakdown {
  std::uint64_t attention = 0;
  std::uint64_t mlp = 0;
  std::uint64_t norm = 0;
  std::uint64_t embed = 0;
  std::uint64_t pools = 0;
  std::uint64_t head = 0;

  std::uint64_t total() const { return attention + mlp + norm + embed + pools + head; }
};

ParamBreakdown count_params(const Genotype& g, bool include_bias = true);

// Fraction of a transformer layer's compute spent on attention:
// (4Nd² + 4N²d) / (12Nd² + 4N²d) = (d + N) / (3d + N).
double attention_compute_share(std::uint64_t n_tokens, std::uint64_t dim);

struct SearchSpaceParams {
  std::uint64_t token_choices = 1;   // S_t
  std::uint64_t dim_choices = 1;     // S_f
  std::uint64_t share_choices = 1;   // S_s
  std::uint64_t layers = 0;          // L
};

// Exact (S_t · S_f · S_s)^L.
BigUint search_space_size(const SearchSpaceParams& p);

}  // namespace psvit
