#include "evomerge/evolution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <numeric>

#include "evomerge/errors.hpp"

namespace evomerge {

namespace {

// Weak set with inputs encoded once, so GA fitness loops skip text parsing.
struct EncodedWeakSet {
    std::string task_id;
    std::vector<EncodedExample> items;
    std::vector<std::string> golds;
};

std::vector<EncodedWeakSet> encode_weak_sets(const std::vector<WeakSet>& weak_sets,
                                             const Codec& codec) {
    std::vector<EncodedWeakSet> encoded;
    encoded.reserve(weak_sets.size());
    bool any_items = false;
    for (const WeakSet& weak : weak_sets) {
        EncodedWeakSet set;
        set.task_id = weak.task_id;
        set.items = encode_batch(weak.items, codec);
        set.golds.reserve(weak.items.size());
        for (const LabeledExample& ex : weak.items) {
            set.golds.push_back(ex.gold);
        }
        any_items = any_items || !set.items.empty();
        encoded.push_back(std::move(set));
    }
    if (!any_items) {
        throw DataError(
            "all weak sets are empty; apply the weak-data fallback (apply_weak_fallback) "
            "before fitness evaluation");
    }
    return encoded;
}

double fitness_encoded(const WeightVector& w, const std::vector<TensorMap>& experts,
                       const std::vector<EncodedWeakSet>& weak_sets, const Codec& codec,
                       const DeltaKernel& kernel) {
    const Model merged = model_from_tensor_map(merge_weighted(experts, w));
    double task_sum = 0.0;
    int task_count = 0;
    for (const EncodedWeakSet& set : weak_sets) {
        if (set.items.empty()) {
            continue;
        }
        double item_sum = 0.0;
        for (size_t i = 0; i < set.items.size(); ++i) {
            item_sum += kernel(predict(merged, codec, set.items[i]), set.golds[i]);
        }
        task_sum += item_sum / static_cast<double>(set.items.size());
        ++task_count;
    }
    return task_sum / static_cast<double>(task_count);
}

void evaluate_population(std::vector<Individual>& population,
                         const std::vector<TensorMap>& experts,
                         const std::vector<EncodedWeakSet>& weak_sets, const Codec& codec,
                         const DeltaKernel& kernel, int eval_threads) {
    std::vector<size_t> pending;
    for (size_t i = 0; i < population.size(); ++i) {
        if (!population[i].fitness) {
            pending.push_back(i);
        }
    }
    if (pending.empty()) {
        return;
    }

    const auto eval_chunk = [&](size_t offset, size_t stride) {
        for (size_t p = offset; p < pending.size(); p += stride) {
            Individual& ind = population[pending[p]];
            ind.fitness = fitness_encoded(ind.weights, experts, weak_sets, codec, kernel);
        }
    };

    const size_t workers =
        std::min<size_t>(std::max(1, eval_threads), pending.size());
    if (workers <= 1) {
        eval_chunk(0, 1);
        return;
    }
    std::vector<std::future<void>> futures;
    futures.reserve(workers - 1);
    for (size_t t = 1; t < workers; ++t) {
        futures.push_back(std::async(std::launch::async, eval_chunk, t, workers));
    }
    eval_chunk(0, workers);
    for (std::future<void>& f : futures) {
        f.get();
    }
}

size_t best_index(const std::vector<Individual>& population) {
    size_t best = 0;
    for (size_t i = 1; i < population.size(); ++i) {
        if (*population[i].fitness > *population[best].fitness) {
            best = i;
        }
    }
    return best;
}

std::string format_double(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

}  // namespace

void EvolutionConfig::validate() const {
    if (generations < 1) {
        throw DataError("generations must be at least 1");
    }
    if (population_size < 4) {
        throw DataError("population_size must be at least 4");
    }
    if (mutation_prob < 0.0 || mutation_prob > 1.0) {
        throw DataError("mutation_prob must lie in [0, 1]");
    }
    if (mutation_sigma < 0.0 || !std::isfinite(mutation_sigma)) {
        throw DataError("mutation_sigma must be non-negative");
    }
    if (elitism_count < 0 || elitism_count >= population_size) {
        throw DataError("elitism_count must lie in [0, population_size)");
    }
    if (tournament_size < 1) {
        throw DataError("tournament_size must be at least 1");
    }
}

std::vector<Individual> init_population(int dim, const EvolutionConfig& cfg, RngStream& stream) {
    cfg.validate();
    if (dim < 1) {
        throw DataError("population dimension must be at least 1");
    }
    std::vector<Individual> population;
    population.reserve(static_cast<size_t>(cfg.population_size));
    for (int i = 0; i < cfg.population_size; ++i) {
        WeightVector raw(static_cast<size_t>(dim));
        for (double& x : raw) {
            x = stream.uniform();
        }
        population.push_back({project_simplex(raw), std::nullopt});
    }
    return population;
}

Individual crossover(const Individual& a, const Individual& b, RngStream& stream) {
    if (a.weights.size() != b.weights.size()) {
        throw DataError("crossover parents have different dimensions");
    }
    const size_t dim = a.weights.size();
    if (dim < 2) {
        return {a.weights, std::nullopt};
    }
    const size_t cut = 1 + stream.below(dim - 1);
    WeightVector raw(dim);
    for (size_t i = 0; i < dim; ++i) {
        raw[i] = i < cut ? a.weights[i] : b.weights[i];
    }
    return {project_simplex(raw), std::nullopt};
}

WeightVector mutate_raw(const WeightVector& w, double prob, double sigma, RngStream& stream) {
    WeightVector raw = w;
    for (double& x : raw) {
        if (stream.uniform() < prob) {
            x += stream.gaussian() * sigma;
        }
    }
    return raw;
}

Individual mutate(const Individual& ind, const EvolutionConfig& cfg, RngStream& stream) {
    return {project_simplex(mutate_raw(ind.weights, cfg.mutation_prob, cfg.mutation_sigma,
                                       stream)),
            std::nullopt};
}

double evaluate_fitness(const WeightVector& w, const std::vector<TensorMap>& experts,
                        const std::vector<WeakSet>& weak_sets, const Codec& codec,
                        const DeltaKernel& kernel) {
    return fitness_encoded(w, experts, encode_weak_sets(weak_sets, codec), codec, kernel);
}

std::pair<size_t, size_t> select_parents(const std::vector<Individual>& population,
                                         const EvolutionConfig& cfg, RngStream& stream) {
    if (population.empty()) {
        throw DataError("cannot select parents from an empty population");
    }
    for (const Individual& ind : population) {
        if (!ind.fitness) {
            throw DataError("population contains unevaluated individuals");
        }
    }
    const size_t n = population.size();
    const size_t k = std::min<size_t>(static_cast<size_t>(cfg.tournament_size), n);

    const auto run_tournament = [&]() {
        std::vector<size_t> indices(n);
        std::iota(indices.begin(), indices.end(), size_t{0});
        // Partial Fisher-Yates: the first k entries are a uniform draw
        // without replacement.
        for (size_t t = 0; t < k; ++t) {
            const size_t j = t + stream.below(n - t);
            std::swap(indices[t], indices[j]);
        }
        size_t winner = indices[0];
        for (size_t t = 1; t < k; ++t) {
            const size_t candidate = indices[t];
            const double cand_fit = *population[candidate].fitness;
            const double win_fit = *population[winner].fitness;
            if (cand_fit > win_fit || (cand_fit == win_fit && candidate < winner)) {
                winner = candidate;
            }
        }
        return winner;
    };

    const size_t first = run_tournament();
    const size_t second = run_tournament();
    return {first, second};
}

EvolveResult evolve(const std::vector<TensorMap>& experts,
                    const std::vector<WeakSet>& weak_sets, const EvolutionConfig& cfg,
                    const Codec& codec, const DeltaKernel& kernel, int eval_threads,
                    const std::string& stage, const std::string& group) {
    cfg.validate();
    if (experts.size() < 2) {
        throw DataError("evolutionary merging needs at least 2 models");
    }
    const std::vector<EncodedWeakSet> encoded = encode_weak_sets(weak_sets, codec);
    const int dim = static_cast<int>(experts.size());

    RngStream init_stream = derive_stream(cfg.seed, "init");
    std::vector<Individual> population = init_population(dim, cfg, init_stream);

    EvolveResult result;
    for (int gen = 0; gen < cfg.generations; ++gen) {
        evaluate_population(population, experts, encoded, codec, kernel, eval_threads);

        const size_t best = best_index(population);
        double sum = 0.0;
        for (const Individual& ind : population) {
            sum += *ind.fitness;
        }
        GenerationRecord record;
        record.stage = stage;
        record.group = group;
        record.generation = gen;
        record.best_fitness = *population[best].fitness;
        record.mean_fitness = sum / static_cast<double>(population.size());
        record.best_weights = population[best].weights;
        record.population_size = static_cast<int>(population.size());
        result.history.push_back(std::move(record));

        if (!result.best.fitness || *population[best].fitness > *result.best.fitness) {
            result.best = population[best];
        }

        if (gen + 1 == cfg.generations) {
            break;
        }

        // Next generation: elites survive unchanged (fitness kept), the rest
        // are tournament offspring. All randomness is drawn here, serially,
        // so parallel fitness evaluation cannot shift any stream.
        std::vector<size_t> ranking(population.size());
        std::iota(ranking.begin(), ranking.end(), size_t{0});
        std::stable_sort(ranking.begin(), ranking.end(), [&](size_t a, size_t b) {
            return *population[a].fitness > *population[b].fitness;
        });

        std::vector<Individual> next;
        next.reserve(population.size());
        for (int e = 0; e < cfg.elitism_count; ++e) {
            next.push_back(population[ranking[static_cast<size_t>(e)]]);
        }
        RngStream select_stream =
            derive_stream(cfg.seed, "select", static_cast<uint64_t>(gen));
        RngStream crossover_stream =
            derive_stream(cfg.seed, "crossover", static_cast<uint64_t>(gen));
        RngStream mutate_stream =
            derive_stream(cfg.seed, "mutate", static_cast<uint64_t>(gen));
        while (next.size() < population.size()) {
            const auto [pa, pb] = select_parents(population, cfg, select_stream);
            Individual child = crossover(population[pa], population[pb], crossover_stream);
            next.push_back(mutate(child, cfg, mutate_stream));
        }
        population = std::move(next);
    }

    result.merged = merge_weighted(experts, result.best.weights);
    return result;
}

TwoStageResult evolve_two_stage(
    const std::map<std::string, std::vector<TensorMap>>& experts_by_group,
    const std::map<std::string, std::vector<WeakSet>>& weak_sets_by_group,
    const EvolutionConfig& cfg, const Codec& codec, const DeltaKernel& kernel,
    int eval_threads) {
    cfg.validate();
    const std::vector<std::string> group_order = {"SC", "ABSA", "MAST"};
    for (const std::string& group : group_order) {
        auto it = experts_by_group.find(group);
        if (it == experts_by_group.end() || it->second.empty()) {
            throw DataError("group '" + group + "' has no experts");
        }
        if (weak_sets_by_group.find(group) == weak_sets_by_group.end()) {
            throw DataError("group '" + group + "' has no weak sets");
        }
    }
    if (experts_by_group.size() != group_order.size()) {
        throw DataError("expert groups must be exactly SC, ABSA, MAST");
    }

    TwoStageResult result;
    std::vector<TensorMap> group_models;
    std::vector<WeakSet> union_weak;
    for (const std::string& group : group_order) {
        const std::vector<TensorMap>& experts = experts_by_group.at(group);
        const std::vector<WeakSet>& weak = weak_sets_by_group.at(group);
        union_weak.insert(union_weak.end(), weak.begin(), weak.end());

        if (experts.size() == 1) {
            result.group_models[group] = experts.front();
            result.group_weights[group] = {WeightVector{1.0}, std::nullopt};
            group_models.push_back(experts.front());
            continue;
        }
        EvolutionConfig sub_cfg = cfg;
        sub_cfg.seed = mix_seed(cfg.seed, "stage1-" + group);
        EvolveResult stage1 =
            evolve(experts, weak, sub_cfg, codec, kernel, eval_threads, "stage1", group);
        result.group_models[group] = stage1.merged;
        result.group_weights[group] = stage1.best;
        group_models.push_back(std::move(stage1.merged));
        result.history.insert(result.history.end(), stage1.history.begin(),
                              stage1.history.end());
    }

    EvolutionConfig final_cfg = cfg;
    final_cfg.seed = mix_seed(cfg.seed, "stage2");
    EvolveResult stage2 = evolve(group_models, union_weak, final_cfg, codec, kernel,
                                 eval_threads, "stage2", "final");
    result.final_model = std::move(stage2.merged);
    result.final_weights = stage2.best;
    result.history.insert(result.history.end(), stage2.history.begin(), stage2.history.end());
    return result;
}

void write_history_csv(const std::vector<GenerationRecord>& records,
                       const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot open '" + path.string() + "' for writing");
    }
    out << "stage,group,generation,best_fitness,mean_fitness,best_weights\n";
    for (const GenerationRecord& record : records) {
        std::string weights;
        for (size_t i = 0; i < record.best_weights.size(); ++i) {
            if (i > 0) {
                weights += ';';
            }
            weights += format_double(record.best_weights[i]);
        }
        out << record.stage << ',' << record.group << ',' << record.generation << ','
            << format_double(record.best_fitness) << ',' << format_double(record.mean_fitness)
            << ',' << weights << '\n';
    }
}

}  // namespace evomerge
