#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "psvit/layers.hpp"

namespace psvit {

enum class PoolingMode { one_d, two_d };

std::string to_string(PoolingMode m);
PoolingMode pooling_mode_from_string(const std::string& s);

enum class CellChoice : std::uint8_t { Basic, SharedPair, Identity };

char cell_char(CellChoice c);
CellChoice cell_from_char(char c);

// One realized transformer layer: independent attention or sharing the
// previous layer's maps.
struct LayerSpec {
  bool share_from_previous = false;
};

struct StageSpec {
  std::size_t tokens = 0;  // includes CLS in 1-D mode
  std::size_t dim = 0;
  std::size_t heads = 1;
  std::vector<CellChoice> cells;
  // Manual per-layer share flags (e.g. sharing-3 runs); used instead of cells
  // when present.
  std::optional<std::vector<LayerSpec>> manual_layers;

  bool is_manual() const { return manual_layers.has_value(); }
  std::vector<LayerSpec> realized_layers() const;
};

struct Genotype {
  std::uint32_t version = 1;
  PoolingMode pooling_mode = PoolingMode::one_d;
  PatchEmbedConfig patch;
  std::vector<StageSpec> stages;
  std::size_t num_classes = 10;

  std::size_t realized_depth() const;
  std::string cells_string() const;  // e.g. "BSI|BB|S" (stages separated by '|')
};

struct Violation {
  std::string code;
  std::string message;
};

// Returns every violated rule; empty means valid.
std::vector<Violation> validate(const Genotype& g);
void require_valid(const Genotype& g);  // throws ValidationError listing codes

// Token count after one pooling step in the given mode. For 2-D the count is
// per the halved grid.
std::size_t pooled_tokens(std::size_t tokens, PoolingMode mode);

// JSON (de)serialization per the versioned schema.
std::string genotype_to_json(const Genotype& g, int indent = 2);
Genotype genotype_from_json(const std::string& text);

// Named reference genotypes: DeiT baselines, the two dimension-schedule
// studies, the token-number table rows, uniform sharing-2/-3 variants, and
// the desk-scale toy family.
std::vector<std::string> preset_names();
Genotype preset_genotype(const std::string& name);

}  // namespace psvit
