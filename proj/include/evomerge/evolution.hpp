// Genetic search over merge weights: population init, crossover, mutation,
// weak-data fitness, tournament selection with elitism, and the two-stage
// (within-group, then across-group) driver.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "evomerge/checkpoint.hpp"
#include "evomerge/merge.hpp"
#include "evomerge/metrics.hpp"
#include "evomerge/model.hpp"
#include "evomerge/rng.hpp"
#include "evomerge/tasks.hpp"

namespace evomerge {

struct Individual {
    WeightVector weights;           // simplex point
    std::optional<double> fitness;  // valid for exactly these weights
};

struct EvolutionConfig {
    int generations = 10;
    int population_size = 20;
    double mutation_prob = 0.1;  // per gene
    double mutation_sigma = 0.1;
    int elitism_count = 2;
    int tournament_size = 3;
    uint64_t seed = 0;

    void validate() const;  // throws DataError
};

struct GenerationRecord {
    std::string stage;  // "stage1" or "stage2"
    std::string group;  // group name; "final" for stage 2
    int generation = 0;
    double best_fitness = 0.0;
    double mean_fitness = 0.0;
    WeightVector best_weights;
    int population_size = 0;
};

// population_size individuals, each drawn uniform in [0,1]^dim then
// simplex-projected.
std::vector<Individual> init_population(int dim, const EvolutionConfig& cfg, RngStream& stream);

// Single-point crossover at a cut drawn uniform in {1..dim-1}, then
// projection; fitness cleared. dim < 2 returns a copy of a.
Individual crossover(const Individual& a, const Individual& b, RngStream& stream);

// Per-gene Gaussian perturbation before projection; exposed separately so the
// displacement distribution is testable.
WeightVector mutate_raw(const WeightVector& w, double prob, double sigma, RngStream& stream);

// mutate_raw followed by projection; fitness cleared.
Individual mutate(const Individual& ind, const EvolutionConfig& cfg, RngStream& stream);

// Merges the experts with w, then scores the merged model on weak data:
// per task with a nonempty weak set, the mean kernel similarity between
// prediction and gold; the result is the unweighted mean over those tasks.
// All weak sets empty is an error (apply the weak-data fallback first).
double evaluate_fitness(const WeightVector& w, const std::vector<TensorMap>& experts,
                        const std::vector<WeakSet>& weak_sets, const Codec& codec,
                        const DeltaKernel& kernel);

// Two independent tournaments of tournament_size drawn without replacement;
// each returns the index of its max-fitness member, ties toward the lower
// population index. Every individual must already carry a fitness.
std::pair<size_t, size_t> select_parents(const std::vector<Individual>& population,
                                         const EvolutionConfig& cfg, RngStream& stream);

struct EvolveResult {
    Individual best;  // best-ever individual
    TensorMap merged;
    std::vector<GenerationRecord> history;  // one record per generation
};

// Runs cfg.generations generations: evaluate, record, carry elitism_count
// best unchanged, refill via mutate(crossover(select_parents())). Fitness
// evaluation may fan out over eval_threads; results are identical to the
// sequential run because all randomness is drawn before dispatch.
EvolveResult evolve(const std::vector<TensorMap>& experts,
                    const std::vector<WeakSet>& weak_sets, const EvolutionConfig& cfg,
                    const Codec& codec, const DeltaKernel& kernel, int eval_threads = 1,
                    const std::string& stage = "stage1", const std::string& group = "all");

struct TwoStageResult {
    TensorMap final_model;
    std::map<std::string, TensorMap> group_models;
    std::map<std::string, Individual> group_weights;
    Individual final_weights;
    std::vector<GenerationRecord> history;  // stage-1 records, then stage-2
};

// Stage 1 evolves weights per group (SC, ABSA, MAST all required); a group
// with one expert skips the search and takes weight 1. Stage 2 evolves the
// three group weights against the union of every group's weak sets.
TwoStageResult evolve_two_stage(
    const std::map<std::string, std::vector<TensorMap>>& experts_by_group,
    const std::map<std::string, std::vector<WeakSet>>& weak_sets_by_group,
    const EvolutionConfig& cfg, const Codec& codec, const DeltaKernel& kernel,
    int eval_threads = 1);

// CSV: stage,group,generation,best_fitness,mean_fitness,best_weights
// (weights semicolon-joined).
void write_history_csv(const std::vector<GenerationRecord>& records,
                       const std::filesystem::path& path);

}  // namespace evomerge
