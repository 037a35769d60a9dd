// Weight-space model merging: simplex-constrained weighted sums of
// same-layout tensor collections, within groups and across groups.
#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "evomerge/checkpoint.hpp"

namespace evomerge {

// A point on the probability simplex: non-negative entries summing to 1.
using WeightVector = std::vector<double>;

// Clamps negatives to zero; an all-zero vector maps to the uniform vector;
// anything else is normalized by its sum.
WeightVector project_simplex(const WeightVector& raw);

// Throws DataError unless w is a simplex point (sum within 1e-6 of 1).
void check_simplex(const WeightVector& w);

// Elementwise weighted sum of models sharing one tensor layout. Accumulates
// in f64 over models in input order, then casts to f32. Mismatched layouts
// raise DataError naming the offending tensor.
TensorMap merge_weighted(const std::vector<TensorMap>& models, const WeightVector& w);

// The across-group merge; semantics identical to merge_weighted applied to
// the per-group merged models.
TensorMap merge_groups(const std::vector<TensorMap>& group_models, const WeightVector& w);

// Weights of the one-stage merge equivalent to a two-stage merge: entry (g,t)
// is group_weights[g] * within_group[g][t], concatenated in group order.
WeightVector flatten_two_stage(const std::vector<WeightVector>& within_group,
                               const WeightVector& group_weights);

// Record of one merge: which models were combined with which weights.
// stage is a group name, or "final" for the across-group merge.
struct MergeRecipe {
    std::string stage;
    std::vector<std::pair<std::string, double>> entries;  // (model path, weight)
};

void write_merge_recipe(const MergeRecipe& recipe, const std::filesystem::path& path);
MergeRecipe read_merge_recipe(const std::filesystem::path& path);

}  // namespace evomerge
