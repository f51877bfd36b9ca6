#pragma once

#include <vector>

#include "psvit/model.hpp"

namespace psvit {

// One supernet slot holding disjoint parameter sets for its three choices:
// a basic layer, a shared pair (second layer reuses the first's maps), and
// identity (no parameters).
struct SupernetCell {
  EncoderLayer basic;
  EncoderLayer pair_first;
  EncoderLayer pair_second;
};

struct SupernetStageSchedule {
  std::size_t tokens = 0;
  std::size_t dim = 0;
  std::size_t heads = 1;
  std::size_t cells = 6;
};

struct SupernetConfig {
  PoolingMode mode = PoolingMode::one_d;
  PatchEmbedConfig patch;  // embed_dim filled from stage 0
  std::vector<SupernetStageSchedule> stages;
  std::size_t num_classes = 10;

  // Desk-scale spaces: 32x32 inputs, dims [16, 24, 32], tokens 65 -> 33 -> 17.
  static SupernetConfig toy();          // 6 cells per stage (3^18 paths)
  static SupernetConfig toy_reduced();  // [2, 1, 1] cells (3^4 = 81 paths)

  std::size_t total_cells() const;
  Genotype genotype_for(const std::vector<CellChoice>& path) const;
  Genotype skeleton() const;  // all-Basic genotype (for validation)

  std::string to_json() const;
  static SupernetConfig from_json(const std::string& text);
};

using Path = std::vector<CellChoice>;

std::string path_to_string(const Path& p);
Path path_from_string(const std::string& s);

// Uniform over the 3 choices, independently per cell.
Path sample_path(std::size_t cells, Rng& rng);

class Supernet {
public:
  Supernet(const SupernetConfig& cfg, std::uint64_t seed);

  Tensor forward(const Path& path, const Tensor& image) const;
  void visit_params(const ParamFn& fn);                         // every parameter
  void visit_path_params(const Path& path, const ParamFn& fn);  // backbone + active path
  // Standalone model with the path's weights copied out of the supernet.
  GenotypeModel extract(const Path& path) const;
  void check_path(const Path& path) const;

  SupernetConfig cfg;
  PatchEmbed embed;
  std::vector<std::vector<SupernetCell>> stage_cells;
  std::vector<TokenPool1d> pools1d;
  std::vector<TokenPool2d> pools2d;
  std::vector<Tensor> stage_pos;
  Tensor final_ln_g, final_ln_b;
  ClassifierHead head;
};

}  // namespace psvit
