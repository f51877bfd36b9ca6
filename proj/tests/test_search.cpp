#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "psvit/errors.hpp"
#include "psvit/search.hpp"

using namespace psvit;

namespace {

// Every path reachable after the last-layer repair, within budget, ranked by
// the documented total order. Independent of the search loop.
std::vector<Evaluated> enumerate_ranked(const SupernetConfig& cfg, std::uint64_t budget,
                                        const FitnessFn& fitness) {
  const std::size_t cells = cfg.total_cells();
  std::vector<Evaluated> all;
  const std::size_t count = static_cast<std::size_t>(std::pow(3, cells));
  for (std::size_t code = 0; code < count; ++code) {
    Path p;
    std::size_t rest = code;
    for (std::size_t i = 0; i < cells; ++i) {
      p.push_back(static_cast<CellChoice>(rest % 3));
      rest /= 3;
    }
    // unreachable under the repair rule: last realized layer would share
    if (repair_last_layer_independent(p) != p) continue;
    const std::uint64_t fl = path_flops(cfg, p);
    if (fl > budget) continue;
    all.push_back({p, fitness(p), fl, 0});
  }
  std::sort(all.begin(), all.end(), ranks_before);
  return all;
}

}  // namespace

TEST_CASE("repair rewrites a trailing shared pair to basic") {
  CHECK(repair_last_layer_independent(path_from_string("BBIS")) == path_from_string("BBIB"));
  CHECK(repair_last_layer_independent(path_from_string("BSII")) == path_from_string("BBII"));
  CHECK(repair_last_layer_independent(path_from_string("SBII")) == path_from_string("SBII"));
  CHECK(repair_last_layer_independent(path_from_string("IIII")) == path_from_string("IIII"));
}

TEST_CASE("evolutionary search finds the exhaustive argmax of a surrogate") {
  const SupernetConfig cfg = SupernetConfig::toy_reduced();
  const std::uint64_t budget = path_flops(cfg, Path(4, CellChoice::Basic));
  const std::uint64_t target = path_flops(cfg, path_from_string("IBSB"));
  auto surrogate = [&](const Path& p) {
    return -std::abs(static_cast<double>(path_flops(cfg, p)) - static_cast<double>(target));
  };

  const auto oracle = enumerate_ranked(cfg, budget, surrogate);
  REQUIRE_FALSE(oracle.empty());

  SearchConfig sc;
  sc.flops_budget = budget;
  sc.seed = 5;
  const SearchResult result = evolutionary_search(cfg, sc, surrogate);
  REQUIRE_FALSE(result.topk.empty());
  CHECK(result.topk[0].path == oracle[0].path);
  CHECK(result.topk[0].fitness == oracle[0].fitness);
}

TEST_CASE("archived paths always satisfy the budget") {
  const SupernetConfig cfg = SupernetConfig::toy_reduced();
  const std::uint64_t budget =
      (path_flops(cfg, Path(4, CellChoice::Basic)) + path_flops(cfg, Path(4, CellChoice::Identity))) / 2;
  SearchConfig sc;
  sc.flops_budget = budget;
  sc.seed = 11;
  auto surrogate = [&](const Path& p) { return static_cast<double>(path_flops(cfg, p)); };
  const SearchResult result = evolutionary_search(cfg, sc, surrogate);
  CHECK_FALSE(result.archive.empty());
  for (const auto& e : result.archive) {
    CHECK(e.flops <= budget);
    CHECK(path_flops(cfg, e.path) == e.flops);
  }
}

TEST_CASE("seeded search is deterministic, single- and multi-threaded") {
  const SupernetConfig cfg = SupernetConfig::toy_reduced();
  SearchConfig sc;
  sc.flops_budget = path_flops(cfg, Path(4, CellChoice::SharedPair));
  sc.seed = 21;
  auto surrogate = [&](const Path& p) {
    return -static_cast<double>(path_flops(cfg, p) % 9973);
  };
  const SearchResult a = evolutionary_search(cfg, sc, surrogate);
  const SearchResult b = evolutionary_search(cfg, sc, surrogate);
  REQUIRE(a.topk.size() == b.topk.size());
  for (std::size_t i = 0; i < a.topk.size(); ++i) {
    CHECK(a.topk[i].path == b.topk[i].path);
    CHECK(a.topk[i].fitness == b.topk[i].fitness);
  }
  SearchConfig threaded = sc;
  threaded.workers = 3;
  const SearchResult c = evolutionary_search(cfg, threaded, surrogate);
  REQUIRE(c.topk.size() == a.topk.size());
  for (std::size_t i = 0; i < a.topk.size(); ++i) CHECK(c.topk[i].path == a.topk[i].path);
  REQUIRE(c.archive.size() == a.archive.size());
  for (std::size_t i = 0; i < a.archive.size(); ++i) CHECK(c.archive[i].path == a.archive[i].path);
}

TEST_CASE("best-so-far fitness is non-decreasing across the archive") {
  const SupernetConfig cfg = SupernetConfig::toy_reduced();
  SearchConfig sc;
  sc.flops_budget = path_flops(cfg, Path(4, CellChoice::SharedPair));
  sc.seed = 33;
  auto surrogate = [&](const Path& p) {
    return std::sin(static_cast<double>(path_flops(cfg, p)));
  };
  const SearchResult result = evolutionary_search(cfg, sc, surrogate);
  double best = -1e300;
  std::size_t last_iteration = 0;
  for (const auto& e : result.archive) {
    CHECK(e.iteration >= last_iteration);  // evaluation order follows generations
    last_iteration = e.iteration;
    best = std::max(best, e.fitness);
  }
  CHECK(best == result.topk[0].fitness);
}

TEST_CASE("evaluation cap and caching") {
  const SupernetConfig cfg = SupernetConfig::toy_reduced();
  SearchConfig sc;
  sc.flops_budget = path_flops(cfg, Path(4, CellChoice::SharedPair));
  sc.seed = 3;
  std::size_t calls = 0;
  auto surrogate = [&](const Path& p) {
    ++calls;
    return -std::abs(static_cast<double>(path_flops(cfg, p)));
  };
  const SearchResult result = evolutionary_search(cfg, sc, surrogate);
  CHECK(result.evaluations == calls);              // cache hits are free
  CHECK(result.evaluations <= sc.total_samples);
  CHECK(result.evaluations <= 81);                 // only unique paths cost samples
  CHECK(result.archive.size() == result.evaluations);
}

TEST_CASE("infeasible budgets are rejected with a stable code") {
  const SupernetConfig cfg = SupernetConfig::toy_reduced();
  SearchConfig sc;
  sc.flops_budget = path_flops(cfg, Path(4, CellChoice::Identity)) - 1;
  auto surrogate = [](const Path&) { return 0.0; };
  CHECK_THROWS_WITH_AS(evolutionary_search(cfg, sc, surrogate),
                       doctest::Contains("INFEASIBLE_BUDGET"), DomainError);
}

TEST_CASE("tight budgets degrade children toward identity instead of stalling") {
  const SupernetConfig cfg = SupernetConfig::toy_reduced();
  SearchConfig sc;
  // only the cheapest few paths fit
  sc.flops_budget = path_flops(cfg, path_from_string("IIIB"));
  sc.seed = 55;
  sc.population_size = 10;
  sc.total_samples = 40;
  sc.topk = 3;
  auto surrogate = [&](const Path& p) { return static_cast<double>(path_flops(cfg, p)); };
  const SearchResult result = evolutionary_search(cfg, sc, surrogate);
  for (const auto& e : result.archive) CHECK(e.flops <= sc.flops_budget);
  CHECK_FALSE(result.topk.empty());
}

TEST_CASE("search config validation") {
  SearchConfig sc;
  sc.topk = 100;
  CHECK_THROWS_AS(sc.check(), ContractError);
  SearchConfig sc2;
  sc2.population_size = 2000;
  CHECK_THROWS_AS(sc2.check(), ContractError);
}
