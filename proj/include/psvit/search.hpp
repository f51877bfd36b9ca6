#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "psvit/flops.hpp"
#include "psvit/supernet.hpp"

namespace psvit {

struct SearchConfig {
  std::uint64_t flops_budget = 0;
  std::size_t population_size = 50;
  std::size_t max_iterations = 20;
  std::size_t total_samples = 1000;  // hard cap on fitness evaluations (N_s)
  std::size_t topk = 10;
  double mutation_prob = 0.1;   // per cell
  double crossover_rate = 0.5;  // fraction of children bred by single-point crossover
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool last_layer_independent = true;  // repair: final realized layer never shares
  std::size_t resample_attempts = 100;

  void check() const;
};

struct Evaluated {
  Path path;
  double fitness = 0.0;
  std::uint64_t flops = 0;
  std::size_t iteration = 0;  // generation that first evaluated this path
};

struct SearchResult {
  std::vector<Evaluated> topk;     // ranked best-first
  std::vector<Evaluated> archive;  // unique evaluations in evaluation order
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
};

using FitnessFn = std::function<double(const Path&)>;

std::uint64_t path_flops(const SupernetConfig& cfg, const Path& path);

// If the last realized layer would be a sharing layer, its cell becomes Basic.
Path repair_last_layer_independent(Path path);

// Ranking order shared with the exhaustive oracle: fitness desc, then flops
// asc, then path string asc.
bool ranks_before(const Evaluated& a, const Evaluated& b);

// FLOPS-constrained evolution over supernet paths: rejection-sampled initial
// population, then generations of single-point crossover + per-cell mutation
// from the current top-k, with over-budget children resampled (bounded, then
// degraded toward identity until feasible). Fitness values are cached; only
// first evaluations count against total_samples. Throws DomainError
// (INFEASIBLE_BUDGET) when even the all-identity path exceeds the budget.
SearchResult evolutionary_search(const SupernetConfig& cfg, const SearchConfig& search,
                                 const FitnessFn& fitness);

}  // namespace psvit
