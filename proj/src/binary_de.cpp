#include "bdefs/binary_de.hpp"

#include <cassert>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

namespace bdefs::de {

void validate(const DeConfig& cfg) {
  if (cfg.pop_size < 4)
    throw std::invalid_argument("DeConfig: pop_size must be >= 4");
  if (cfg.generations < 1)
    throw std::invalid_argument("DeConfig: generations must be >= 1");
  if (!(cfg.crossover_rate > 0.0) || cfg.crossover_rate > 1.0)
    throw std::invalid_argument("DeConfig: crossover_rate must be in (0, 1]");
}

Population init_population(const DeConfig& cfg, std::size_t dim, Rng& rng) {
  validate(cfg);
  if (dim == 0) throw std::invalid_argument("init_population: dimensionality is zero");
  Population pop;
  pop.masks.resize(cfg.pop_size);
  pop.fitness.assign(cfg.pop_size, 0.0);
  for (auto& mask : pop.masks) {
    mask.resize(dim);
    for (auto& bit : mask) bit = static_cast<std::uint8_t>(rng.below(2));
  }
  return pop;
}

BitMask difference_vector(const BitMask& a, const BitMask& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("difference_vector: length mismatch");
  BitMask out(a.size());
  for (std::size_t d = 0; d < a.size(); ++d) out[d] = (a[d] == b[d]) ? 0 : a[d];
  return out;
}

BitMask mutate(const BitMask& diff, const BitMask& donor) {
  if (diff.size() != donor.size())
    throw std::invalid_argument("mutate: length mismatch");
  BitMask out(diff.size());
  for (std::size_t d = 0; d < diff.size(); ++d) out[d] = diff[d] ? 1 : donor[d];
  return out;
}

BitMask crossover(const BitMask& mutant, const BitMask& current, double cr, Rng& rng) {
  if (mutant.size() != current.size())
    throw std::invalid_argument("crossover: length mismatch");
  if (!(cr > 0.0) || cr > 1.0)
    throw std::invalid_argument("crossover: rate must be in (0, 1]");
  const std::size_t forced = rng.below(mutant.size());
  BitMask out(mutant.size());
  for (std::size_t d = 0; d < mutant.size(); ++d) {
    const double gamma = rng.open01();
    out[d] = (gamma <= cr || d == forced) ? mutant[d] : current[d];
  }
  return out;
}

std::array<std::size_t, 3> sample_donors(std::size_t pop_size, std::size_t target,
                                         Rng& rng) {
  assert(pop_size >= 4 && target < pop_size);
  std::vector<std::size_t> candidates;
  candidates.reserve(pop_size - 1);
  for (std::size_t i = 0; i < pop_size; ++i)
    if (i != target) candidates.push_back(i);
  // Partial Fisher-Yates: three swaps are enough.
  std::array<std::size_t, 3> donors{};
  for (std::size_t j = 0; j < 3; ++j) {
    const std::size_t pick = j + rng.below(candidates.size() - j);
    std::swap(candidates[j], candidates[pick]);
    donors[j] = candidates[j];
  }
  return donors;
}

Selection select(const BitMask& current, double current_fitness, const BitMask& trial,
                 const FitnessFn& fitness_fn) {
  if (current.size() != trial.size())
    throw std::invalid_argument("select: length mismatch");
  Selection s;
  const double trial_fitness = fitness_fn(trial);
  s.evaluations_used = 1;
  if (trial_fitness < current_fitness) {
    s.trial_accepted = true;
    s.winner_fitness = trial_fitness;
  } else {
    s.trial_accepted = false;
    s.winner_fitness = current_fitness;
  }
  return s;
}

namespace {

class FitnessCache {
 public:
  explicit FitnessCache(const FitnessFn& fn) : fn_(fn) {}

  double evaluate(const BitMask& mask) {
    std::string key(mask.begin(), mask.end());
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const double value = fn_(mask);
    cache_.emplace(std::move(key), value);
    ++calls_;
    return value;
  }

  std::size_t calls() const { return calls_; }

 private:
  const FitnessFn& fn_;
  std::unordered_map<std::string, double> cache_;
  std::size_t calls_ = 0;
};

void record_generation(RunHistory* history, std::size_t generation, double best_fitness,
                       const BitMask& best_mask, std::size_t evaluations) {
  if (!history) return;
  history->records.push_back({generation, best_fitness, evaluations, best_mask});
}

}  // namespace

DeResult run_from(Population population, const DeConfig& cfg, const FitnessFn& fitness_fn,
                  RunHistory* history_out) {
  validate(cfg);
  if (population.masks.size() != cfg.pop_size)
    throw std::invalid_argument("run_from: population size does not match config");
  const std::size_t dim = population.masks.empty() ? 0 : population.masks.front().size();
  if (dim == 0) throw std::invalid_argument("run_from: dimensionality is zero");

  RunHistory local_history;
  RunHistory* history = history_out ? history_out : &local_history;
  history->records.clear();

  Rng rng(cfg.seed);
  FitnessCache cache(fitness_fn);

  for (std::size_t i = 0; i < population.masks.size(); ++i)
    population.fitness[i] = cache.evaluate(population.masks[i]);

  std::size_t best_index = 0;
  for (std::size_t i = 1; i < population.masks.size(); ++i)
    if (population.fitness[i] < population.fitness[best_index]) best_index = i;
  BitMask best_mask = population.masks[best_index];
  double best_fitness = population.fitness[best_index];
  record_generation(history, 0, best_fitness, best_mask, cache.calls());

  for (std::size_t gen = 1; gen <= cfg.generations; ++gen) {
    // Trials are built against the generation-start snapshot; replacement is
    // deferred so the outcome does not depend on evaluation order.
    const std::vector<BitMask> snapshot = population.masks;
    std::vector<BitMask> trials(cfg.pop_size);
    for (std::size_t k = 0; k < cfg.pop_size; ++k) {
      const auto donors = sample_donors(cfg.pop_size, k, rng);
      const BitMask diff = difference_vector(snapshot[donors[0]], snapshot[donors[1]]);
      const BitMask mutant = mutate(diff, snapshot[donors[2]]);
      trials[k] = crossover(mutant, snapshot[k], cfg.crossover_rate, rng);
    }
    for (std::size_t k = 0; k < cfg.pop_size; ++k) {
      const double trial_fitness = cache.evaluate(trials[k]);
      if (trial_fitness < population.fitness[k]) {
        population.masks[k] = std::move(trials[k]);
        population.fitness[k] = trial_fitness;
        if (trial_fitness < best_fitness) {
          best_fitness = trial_fitness;
          best_mask = population.masks[k];
        }
      }
    }
    population.generation = gen;
    record_generation(history, gen, best_fitness, best_mask, cache.calls());
  }

  DeResult result;
  result.best_mask = std::move(best_mask);
  result.best_fitness = best_fitness;
  result.history = *history;
  return result;
}

DeResult run(const DeConfig& cfg, std::size_t dim, const FitnessFn& fitness_fn,
             RunHistory* history_out) {
  validate(cfg);
  Rng init_rng(cfg.seed);
  Population population = init_population(cfg, dim, init_rng);
  // Continue the generational loop on a derived stream so init and evolution
  // draws do not interleave.
  DeConfig loop_cfg = cfg;
  loop_cfg.seed = cfg.seed ^ 0x9e3779b97f4a7c15ULL;
  return run_from(std::move(population), loop_cfg, fitness_fn, history_out);
}

std::string mask_to_string(const BitMask& mask) {
  std::string s(mask.size(), '0');
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) s[i] = '1';
  return s;
}

BitMask mask_from_string(const std::string& s) {
  BitMask mask(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '0')
      mask[i] = 0;
    else if (s[i] == '1')
      mask[i] = 1;
    else
      throw std::invalid_argument("mask_from_string: character is not '0' or '1'");
  }
  return mask;
}

std::size_t popcount(const BitMask& mask) {
  std::size_t n = 0;
  for (auto b : mask) n += b ? 1 : 0;
  return n;
}

void write_history_csv(const RunHistory& history, std::ostream& out) {
  out << "generation,best_fitness,evaluations\n";
  char buf[64];
  for (const auto& rec : history.records) {
    std::snprintf(buf, sizeof(buf), "%.17g", rec.best_fitness);
    out << rec.generation << ',' << buf << ',' << rec.evaluations << '\n';
  }
}

}  // namespace bdefs::de
