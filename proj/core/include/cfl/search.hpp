#pragma once

#include <vector>

#include "cfl/arch.hpp"
#include "cfl/latency.hpp"
#include "cfl/predictor.hpp"

namespace cfl {

// Per-worker evolutionary search over (depth, width-ratio) genomes, filtered
// by the latency table and ranked by the accuracy predictor. random_mode
// degenerates to the population-1, mutation-only loop (fresh feasible sample
// per iteration, keep the best).
struct SearchConfig {
  int population = 16;
  int tournament = 4;
  double crossover_rate = 0.9;
  double mutation_rate = 0.1;
  int max_rejection = 1000;
  bool random_mode = false;
};

struct WorkerSpec {
  DeviceProfile profile;
  int quality = 0;
};

// Returns one feasible arch per worker maximizing predicted accuracy across S
// generations. Every returned arch strictly satisfies its worker's latency
// bound; throws InfeasibilityError (with the tightest latency sampled) when
// rejection sampling cannot seed a feasible population.
std::vector<ArchDescriptor> select_submodels(const SupernetConfig& cfg, const SearchConfig& search,
                                             const AccuracyPredictor& predictor, const LatencyTable& table,
                                             const std::vector<WorkerSpec>& workers, int generations,
                                             std::uint64_t seed);

// Single-worker variant used by the orchestrator and the tests.
ArchDescriptor select_submodel(const SupernetConfig& cfg, const SearchConfig& search,
                               const AccuracyPredictor& predictor, const LatencyTable& table,
                               const WorkerSpec& worker, int generations, std::uint64_t seed);

}  // namespace cfl
