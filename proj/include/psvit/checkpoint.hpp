#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "psvit/train.hpp"

namespace psvit {

// Framed binary checkpoint: "PSVL" magic, u32 format version, a JSON meta
// blob (kept verbatim so save(load(x)) is byte-identical), named f64 tensors,
// optional optimizer velocities, optional RNG state, iteration counter. All
// integers and floats little-endian.
struct Checkpoint {
  std::uint32_t version = 1;
  std::string meta;  // {"kind":"model","genotype":{...}} or {"kind":"supernet","config":{...}}
  std::vector<std::pair<std::string, Tensor>> params;  // saved in this order
  bool has_optimizer = false;
  double opt_momentum = 0.9;
  double opt_weight_decay = 0.0;
  std::vector<std::pair<std::string, std::vector<double>>> opt_buffers;
  bool has_rng = false;
  std::array<std::uint64_t, 4> rng_state{};
  std::uint64_t iteration = 0;

  std::string kind() const;       // "model" | "supernet"
  Genotype genotype() const;      // model checkpoints
  SupernetConfig supernet() const;  // supernet checkpoints
};

void save_checkpoint(const std::string& file, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& file);

Checkpoint make_checkpoint(GenotypeModel& model, const SgdMomentum* opt = nullptr,
                           const Rng* rng = nullptr, std::uint64_t iteration = 0);
Checkpoint make_checkpoint(Supernet& net, const SgdMomentum* opt = nullptr,
                           const Rng* rng = nullptr, std::uint64_t iteration = 0);

// Rebuilds the structure from meta and loads all parameters, rejecting
// missing names and shape mismatches with named IoErrors.
GenotypeModel model_from_checkpoint(const Checkpoint& ckpt);
Supernet supernet_from_checkpoint(const Checkpoint& ckpt);

std::map<std::string, std::vector<double>> checkpoint_velocities(const Checkpoint& ckpt);

}  // namespace psvit
