#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "bdefs/rng.hpp"

namespace bdefs::de {

// Fixed-length bit vector encoding a feature subset; bit d selects feature
// column d.
using BitMask = std::vector<std::uint8_t>;

// Must be a pure, deterministic function of the mask (lower is better).
// Results are memoized per bit pattern.
using FitnessFn = std::function<double(const BitMask&)>;

struct DeConfig {
  std::size_t pop_size = 20;
  std::size_t generations = 100;
  double crossover_rate = 1.0;  // in (0, 1]
  std::uint64_t seed = 0;
};

struct GenerationRecord {
  std::size_t generation = 0;   // 0 = initial population
  double best_fitness = 0.0;
  std::size_t evaluations = 0;  // cumulative fitness-function invocations
  BitMask best_mask;
};

struct RunHistory {
  std::vector<GenerationRecord> records;
};

struct Population {
  std::vector<BitMask> masks;
  std::vector<double> fitness;
  std::size_t generation = 0;
};

struct DeResult {
  BitMask best_mask;
  double best_fitness = 0.0;
  RunHistory history;
};

// Validates pop_size >= 4, generations >= 1, crossover_rate in (0, 1].
void validate(const DeConfig& cfg);

// pop_size masks of length dim, each bit an independent fair coin flip.
Population init_population(const DeConfig& cfg, std::size_t dim, Rng& rng);

// 0 where a and b agree, otherwise a's bit.
BitMask difference_vector(const BitMask& a, const BitMask& b);

// 1 where diff is 1, otherwise the donor's bit.
BitMask mutate(const BitMask& diff, const BitMask& donor);

// Takes the mutant bit when gamma <= cr or at the forced dimension, else the
// current bit. The forced dimension is drawn once per call, then one gamma
// per dimension; both are consumed even when cr = 1 so that rng streams stay
// aligned across crossover-rate settings.
BitMask crossover(const BitMask& mutant, const BitMask& current, double cr, Rng& rng);

// Three donor indices, pairwise distinct and distinct from target, via a
// partial shuffle of the remaining indices.
std::array<std::size_t, 3> sample_donors(std::size_t pop_size, std::size_t target,
                                         Rng& rng);

struct Selection {
  bool trial_accepted = false;
  double winner_fitness = 0.0;
  std::size_t evaluations_used = 0;
};

// Trial replaces the incumbent only on strict improvement.
Selection select(const BitMask& current, double current_fitness, const BitMask& trial,
                 const FitnessFn& fitness_fn);

// Full generational loop: difference -> mutate -> crossover -> strict select,
// with donors drawn from the generation-start population. If history_out is
// given it is filled progressively, so completed generations survive a
// fitness-function failure.
DeResult run(const DeConfig& cfg, std::size_t dim, const FitnessFn& fitness_fn,
             RunHistory* history_out = nullptr);

// Same loop starting from a caller-supplied population (fitness entries are
// ignored and recomputed).
DeResult run_from(Population population, const DeConfig& cfg, const FitnessFn& fitness_fn,
                  RunHistory* history_out = nullptr);

std::string mask_to_string(const BitMask& mask);
BitMask mask_from_string(const std::string& s);
std::size_t popcount(const BitMask& mask);

// CSV with columns generation,best_fitness,evaluations.
void write_history_csv(const RunHistory& history, std::ostream& out);

}  // namespace bdefs::de
