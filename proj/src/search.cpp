#include "psvit/search.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <thread>

#include "psvit/errors.hpp"

namespace psvit {

void SearchConfig::check() const {
  if (population_size == 0 || topk == 0) {
    throw ContractError("search: population and topk must be positive");
  }
  if (topk > population_size) throw ContractError("search: topk must not exceed population");
  if (population_size > total_samples) {
    throw ContractError("search: population must not exceed the evaluation cap");
  }
  if (mutation_prob < 0.0 || mutation_prob > 1.0 || crossover_rate < 0.0 ||
      crossover_rate > 1.0) {
    throw ContractError("search: rates must lie in [0, 1]");
  }
  if (workers == 0) throw ContractError("search: worker count must be positive");
}

std::uint64_t path_flops(const SupernetConfig& cfg, const Path& path) {
  return count_flops(cfg.genotype_for(path)).total_macs();
}

Path repair_last_layer_independent(Path path) {
  for (std::size_t i = path.size(); i-- > 0;) {
    if (path[i] == CellChoice::Identity) continue;
    if (path[i] == CellChoice::SharedPair) path[i] = CellChoice::Basic;
    break;
  }
  return path;
}

bool ranks_before(const Evaluated& a, const Evaluated& b) {
  if (a.fitness != b.fitness) return a.fitness > b.fitness;
  if (a.flops != b.flops) return a.flops < b.flops;
  return path_to_string(a.path) < path_to_string(b.path);
}

namespace {

CellChoice random_choice(Rng& rng) {
  switch (rng.next_below(3)) {
    case 0: return CellChoice::Basic;
    case 1: return CellChoice::SharedPair;
    default: return CellChoice::Identity;
  }
}

}  // namespace

SearchResult evolutionary_search(const SupernetConfig& cfg, const SearchConfig& search,
                                 const FitnessFn& fitness) {
  search.check();
  const std::size_t cells = cfg.total_cells();
  const std::uint64_t floor_cost = path_flops(cfg, Path(cells, CellChoice::Identity));
  if (floor_cost > search.flops_budget) {
    throw DomainError("INFEASIBLE_BUDGET",
                      "budget " + std::to_string(search.flops_budget) + " is below the " +
                          std::to_string(floor_cost) + " MACs of the all-identity path");
  }

  Rng rng(search.seed);
  auto repair = [&](Path p) {
    return search.last_layer_independent ? repair_last_layer_independent(std::move(p)) : p;
  };
  auto feasible = [&](const Path& p, std::uint64_t& flops_out) {
    flops_out = path_flops(cfg, p);
    return flops_out <= search.flops_budget;
  };
  // Bounded rejection sampling, then degrade toward identity (always feasible).
  auto sample_under_budget = [&]() {
    Path p;
    std::uint64_t fl = 0;
    for (std::size_t attempt = 0; attempt < search.resample_attempts; ++attempt) {
      p = repair(sample_path(cells, rng));
      if (feasible(p, fl)) return p;
    }
    while (!feasible(p, fl)) {
      std::vector<std::size_t> active;
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] != CellChoice::Identity) active.push_back(i);
      }
      p[active[rng.next_below(active.size())]] = CellChoice::Identity;
      p = repair(p);
    }
    return p;
  };

  SearchResult result;
  std::map<std::string, double> cache;
  auto ranked = [&]() {
    std::vector<Evaluated> r = result.archive;
    std::sort(r.begin(), r.end(), ranks_before);
    return r;
  };

  // Evaluates new paths (cache misses) up to the sample cap; returns false
  // once the cap is exhausted.
  auto evaluate_batch = [&](const std::vector<Path>& batch, std::size_t iteration) {
    std::vector<Path> fresh;
    std::vector<std::string> keys;
    for (const auto& p : batch) {
      const std::string key = path_to_string(p);
      if (cache.count(key) || std::find(keys.begin(), keys.end(), key) != keys.end()) continue;
      if (result.evaluations + fresh.size() >= search.total_samples) break;
      fresh.push_back(p);
      keys.push_back(key);
    }
    std::vector<double> values(fresh.size());
    if (search.workers <= 1 || fresh.size() <= 1) {
      for (std::size_t i = 0; i < fresh.size(); ++i) values[i] = fitness(fresh[i]);
    } else {
      // Deterministic fan-out: fixed slots, archive appended in child order.
      std::vector<std::thread> pool;
      std::atomic<std::size_t> next{0};
      for (std::size_t w = 0; w < std::min(search.workers, fresh.size()); ++w) {
        pool.emplace_back([&] {
          for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= fresh.size()) return;
            values[i] = fitness(fresh[i]);
          }
        });
      }
      for (auto& t : pool) t.join();
    }
    for (std::size_t i = 0; i < fresh.size(); ++i) {
      if (!std::isfinite(values[i])) throw NumericError("search: non-finite fitness");
      cache[keys[i]] = values[i];
      result.archive.push_back({fresh[i], values[i], path_flops(cfg, fresh[i]), iteration});
      ++result.evaluations;
    }
    return result.evaluations < search.total_samples;
  };

  std::vector<Path> population;
  for (std::size_t i = 0; i < search.population_size; ++i) {
    population.push_back(sample_under_budget());
  }
  bool budget_left = evaluate_batch(population, 0);

  for (std::size_t it = 1; it <= search.max_iterations && budget_left; ++it) {
    result.iterations = it;
    const auto r = ranked();
    const std::size_t parent_count = std::min(search.topk, r.size());
    std::vector<Path> children;
    for (std::size_t i = 0; i < search.population_size; ++i) {
      Path child;
      std::uint64_t fl = 0;
      bool ok = false;
      for (std::size_t attempt = 0; attempt < search.resample_attempts && !ok; ++attempt) {
        if (parent_count >= 2 && cells >= 2 && rng.next_double() < search.crossover_rate) {
          const std::size_t a = rng.next_below(parent_count);
          std::size_t b = rng.next_below(parent_count - 1);
          if (b >= a) ++b;
          const std::size_t cut = 1 + rng.next_below(cells - 1);
          child = r[a].path;
          std::copy(r[b].path.begin() + cut, r[b].path.end(), child.begin() + cut);
        } else {
          child = r[rng.next_below(parent_count)].path;
        }
        for (auto& c : child) {
          if (rng.next_double() < search.mutation_prob) c = random_choice(rng);
        }
        child = repair(child);
        ok = feasible(child, fl);
      }
      if (!ok) child = sample_under_budget();
      children.push_back(child);
    }
    budget_left = evaluate_batch(children, it);
    population = std::move(children);
  }

  auto r = ranked();
  if (r.size() > search.topk) r.resize(search.topk);
  result.topk = std::move(r);
  return result;
}

}  // namespace psvit
