#include "cfl/search.hpp"

#include <algorithm>
#include <limits>
#include <optional>

#include "cfl/errors.hpp"

namespace cfl {

namespace {

// Search genome: depth gene per group plus a ratio-index gene per layer slot.
// Fitness and feasibility depend only on widths, so the genetic loop runs on
// genomes and channel indices are materialized once for the winner.
struct Genome {
  std::vector<int> depth;  // per group
  std::vector<int> ratio;  // flattened [g * depth_max + slot]
};

int ratio_count(const SupernetConfig& cfg) { return static_cast<int>(cfg.width_ratios.size()); }

Genome random_genome(const SupernetConfig& cfg, Rng& rng) {
  Genome g;
  g.depth.resize(static_cast<std::size_t>(cfg.groups));
  g.ratio.resize(static_cast<std::size_t>(cfg.groups * cfg.depth_max));
  for (int i = 0; i < cfg.groups; ++i) g.depth[static_cast<std::size_t>(i)] = rng.uniform_int(1, cfg.depth_max);
  for (auto& r : g.ratio) r = rng.uniform_int(0, ratio_count(cfg) - 1);
  return g;
}

ArchDescriptor genome_arch(const SupernetConfig& cfg, const Genome& g, Rng* rng) {
  ArchDescriptor a;
  a.depth = g.depth;
  a.channels.resize(static_cast<std::size_t>(cfg.groups));
  for (int gi = 0; gi < cfg.groups; ++gi) {
    const int d = g.depth[static_cast<std::size_t>(gi)];
    auto& slots = a.channels[static_cast<std::size_t>(gi)];
    slots.resize(static_cast<std::size_t>(d));
    const int wmax = cfg.widths[static_cast<std::size_t>(gi)];
    for (int s = 0; s < d; ++s) {
      const double r = cfg.width_ratios[static_cast<std::size_t>(g.ratio[static_cast<std::size_t>(gi * cfg.depth_max + s)])];
      const int count = cfg.channels_for_ratio(gi, r);
      if (rng != nullptr) {
        slots[static_cast<std::size_t>(s)] = rng->sample_sorted(wmax, count);
      } else {
        std::vector<int> idx(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = i;
        slots[static_cast<std::size_t>(s)] = std::move(idx);
      }
    }
  }
  return a;
}

double genome_latency(const SupernetConfig& cfg, const LatencyTable& table, const Genome& g,
                      const DeviceProfile& profile) {
  return table.lookup(genome_arch(cfg, g, nullptr), profile);
}

double genome_fitness(const SupernetConfig& cfg, const AccuracyPredictor& predictor, const Genome& g,
                      int quality) {
  return predictor.predict(encode_arch(cfg, genome_arch(cfg, g, nullptr), quality));
}

Genome crossover(const SupernetConfig& cfg, const Genome& a, const Genome& b, Rng& rng) {
  const int total = cfg.groups + cfg.groups * cfg.depth_max;
  const int cut = rng.uniform_int(1, total - 1);
  Genome child = a;
  for (int i = 0; i < total; ++i) {
    if (i < cut) continue;
    if (i < cfg.groups) {
      child.depth[static_cast<std::size_t>(i)] = b.depth[static_cast<std::size_t>(i)];
    } else {
      const int j = i - cfg.groups;
      child.ratio[static_cast<std::size_t>(j)] = b.ratio[static_cast<std::size_t>(j)];
    }
  }
  return child;
}

void mutate(const SupernetConfig& cfg, Genome& g, double rate, Rng& rng) {
  for (auto& d : g.depth) {
    if (rng.uniform() < rate) d = rng.uniform_int(1, cfg.depth_max);
  }
  for (auto& r : g.ratio) {
    if (rng.uniform() < rate) r = rng.uniform_int(0, ratio_count(cfg) - 1);
  }
}

// Pull a random gene downward until the genome fits under the bound again.
bool repair(const SupernetConfig& cfg, const LatencyTable& table, const DeviceProfile& profile, Genome& g,
            Rng& rng) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    if (genome_latency(cfg, table, g, profile) < profile.latency_bound_ms) return true;
    std::vector<int> shrinkable;
    for (int gi = 0; gi < cfg.groups; ++gi) {
      if (g.depth[static_cast<std::size_t>(gi)] > 1) shrinkable.push_back(gi);
    }
    const int off = cfg.groups;
    for (int gi = 0; gi < cfg.groups; ++gi) {
      for (int s = 0; s < g.depth[static_cast<std::size_t>(gi)]; ++s) {
        if (g.ratio[static_cast<std::size_t>(gi * cfg.depth_max + s)] > 0) {
          shrinkable.push_back(off + gi * cfg.depth_max + s);
        }
      }
    }
    if (shrinkable.empty()) return false;
    const int pick = shrinkable[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(shrinkable.size()) - 1))];
    if (pick < off) {
      g.depth[static_cast<std::size_t>(pick)] -= 1;
    } else {
      g.ratio[static_cast<std::size_t>(pick - off)] -= 1;
    }
  }
  return genome_latency(cfg, table, g, profile) < profile.latency_bound_ms;
}

struct Scored {
  Genome genome;
  double fitness;
};

}  // namespace

ArchDescriptor select_submodel(const SupernetConfig& cfg, const SearchConfig& search,
                               const AccuracyPredictor& predictor, const LatencyTable& table,
                               const WorkerSpec& worker, int generations, std::uint64_t seed) {
  cfg.validate();
  if (generations < 1) throw ConfigError("search times must be >= 1");
  if (worker.profile.latency_bound_ms <= 0.0) {
    throw ConfigError("latency bound for '" + worker.profile.device_model + "' must be positive");
  }
  Rng rng(seed);

  double tightest = std::numeric_limits<double>::infinity();
  auto sample_feasible = [&](int budget) -> std::optional<Genome> {
    for (int i = 0; i < budget; ++i) {
      Genome g = random_genome(cfg, rng);
      const double lat = genome_latency(cfg, table, g, worker.profile);
      tightest = std::min(tightest, lat);
      if (lat < worker.profile.latency_bound_ms) return g;
    }
    return std::nullopt;
  };

  if (search.random_mode) {
    // Pure random search: one fresh feasible candidate per iteration.
    std::optional<Genome> best;
    double best_fit = -1.0;
    for (int s = 0; s < generations; ++s) {
      auto g = sample_feasible(search.max_rejection);
      if (!g) {
        if (best) break;
        throw InfeasibilityError("no feasible arch for '" + worker.profile.device_model + "' under " +
                                     std::to_string(worker.profile.latency_bound_ms) + " ms",
                                 tightest);
      }
      const double fit = genome_fitness(cfg, predictor, *g, worker.quality);
      if (fit > best_fit) {
        best_fit = fit;
        best = std::move(g);
      }
    }
    return genome_arch(cfg, *best, &rng);
  }

  // Seed the population by rejection sampling; duplicates are fine once at
  // least one feasible genome exists.
  std::vector<Scored> population;
  int attempts_left = search.max_rejection;
  while (static_cast<int>(population.size()) < search.population && attempts_left > 0) {
    const int budget = std::min(attempts_left, 32);
    auto g = sample_feasible(budget);
    attempts_left -= budget;
    if (g) {
      population.push_back({*g, genome_fitness(cfg, predictor, *g, worker.quality)});
    }
  }
  if (population.empty()) {
    throw InfeasibilityError("no feasible arch for '" + worker.profile.device_model + "' under " +
                                 std::to_string(worker.profile.latency_bound_ms) + " ms after " +
                                 std::to_string(search.max_rejection) + " samples",
                             tightest);
  }
  while (static_cast<int>(population.size()) < search.population) {
    population.push_back(population[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(population.size()) - 1))]);
  }

  auto best_of = [&]() {
    std::size_t bi = 0;
    for (std::size_t i = 1; i < population.size(); ++i) {
      if (population[i].fitness > population[bi].fitness) bi = i;
    }
    return bi;
  };

  auto tournament_pick = [&]() -> const Scored& {
    std::size_t bi = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(population.size()) - 1));
    for (int t = 1; t < search.tournament; ++t) {
      const std::size_t c = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(population.size()) - 1));
      if (population[c].fitness > population[bi].fitness) bi = c;
    }
    return population[bi];
  };

  for (int gen = 0; gen < generations; ++gen) {
    std::vector<Scored> next;
    next.reserve(population.size());
    next.push_back(population[best_of()]);  // elitism
    while (static_cast<int>(next.size()) < search.population) {
      const Scored& pa = tournament_pick();
      const Scored& pb = tournament_pick();
      Genome child = rng.uniform() < search.crossover_rate ? crossover(cfg, pa.genome, pb.genome, rng)
                                                           : pa.genome;
      mutate(cfg, child, search.mutation_rate, rng);
      if (!repair(cfg, table, worker.profile, child, rng)) {
        next.push_back(tournament_pick());  // known feasible
        continue;
      }
      next.push_back({child, genome_fitness(cfg, predictor, child, worker.quality)});
    }
    population = std::move(next);
  }

  return genome_arch(cfg, population[best_of()].genome, &rng);
}

std::vector<ArchDescriptor> select_submodels(const SupernetConfig& cfg, const SearchConfig& search,
                                             const AccuracyPredictor& predictor, const LatencyTable& table,
                                             const std::vector<WorkerSpec>& workers, int generations,
                                             std::uint64_t seed) {
  std::vector<ArchDescriptor> out;
  out.reserve(workers.size());
  for (std::size_t k = 0; k < workers.size(); ++k) {
    out.push_back(select_submodel(cfg, search, predictor, table, workers[k], generations,
                                  subseed(seed, {0x73656172ULL, k})));
  }
  return out;
}

}  // namespace cfl
