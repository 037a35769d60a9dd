#include "evomerge/merge.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

#include "evomerge/errors.hpp"

namespace evomerge {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr double kSimplexTolerance = 1e-6;

}  // namespace

WeightVector project_simplex(const WeightVector& raw) {
    if (raw.empty()) {
        throw DataError("cannot project an empty weight vector");
    }
    WeightVector w(raw.size());
    double sum = 0.0;
    for (size_t i = 0; i < raw.size(); ++i) {
        if (!std::isfinite(raw[i])) {
            throw DataError("weight vector contains a non-finite value");
        }
        w[i] = raw[i] > 0.0 ? raw[i] : 0.0;
        sum += w[i];
    }
    if (sum == 0.0) {
        const double uniform = 1.0 / static_cast<double>(w.size());
        std::fill(w.begin(), w.end(), uniform);
        return w;
    }
    for (double& x : w) {
        x /= sum;
    }
    return w;
}

void check_simplex(const WeightVector& w) {
    if (w.empty()) {
        throw DataError("weight vector is empty");
    }
    double sum = 0.0;
    for (double x : w) {
        if (!std::isfinite(x) || x < 0.0) {
            throw DataError("weight vector entries must be finite and non-negative");
        }
        sum += x;
    }
    if (std::abs(sum - 1.0) > kSimplexTolerance) {
        throw DataError("weight vector does not sum to 1");
    }
}

TensorMap merge_weighted(const std::vector<TensorMap>& models, const WeightVector& w) {
    if (models.empty()) {
        throw DataError("no models to merge");
    }
    if (models.size() != w.size()) {
        throw DataError("weight count does not match model count");
    }
    check_simplex(w);

    const TensorMap& reference = models.front();
    for (size_t t = 1; t < models.size(); ++t) {
        if (models[t].size() != reference.size()) {
            throw DataError("model " + std::to_string(t) + " has " +
                            std::to_string(models[t].size()) + " tensors, expected " +
                            std::to_string(reference.size()));
        }
        for (size_t e = 0; e < reference.size(); ++e) {
            const Tensor& ref = reference.entries()[e];
            const Tensor& other = models[t].entries()[e];
            if (other.name != ref.name) {
                throw DataError("model " + std::to_string(t) + " tensor '" + other.name +
                                "' does not match expected tensor '" + ref.name + "'");
            }
            if (other.shape != ref.shape) {
                throw DataError("tensor '" + ref.name + "' shape mismatch in model " +
                                std::to_string(t));
            }
        }
    }

    TensorMap merged;
    for (size_t e = 0; e < reference.size(); ++e) {
        const Tensor& ref = reference.entries()[e];
        std::vector<double> acc(ref.data.size(), 0.0);
        for (size_t t = 0; t < models.size(); ++t) {
            const std::vector<float>& data = models[t].entries()[e].data;
            for (size_t i = 0; i < data.size(); ++i) {
                acc[i] += w[t] * static_cast<double>(data[i]);
            }
        }
        std::vector<float> out(acc.size());
        for (size_t i = 0; i < acc.size(); ++i) {
            out[i] = static_cast<float>(acc[i]);
        }
        merged.add(ref.name, ref.shape, std::move(out));
    }
    return merged;
}

TensorMap merge_groups(const std::vector<TensorMap>& group_models, const WeightVector& w) {
    return merge_weighted(group_models, w);
}

WeightVector flatten_two_stage(const std::vector<WeightVector>& within_group,
                               const WeightVector& group_weights) {
    if (within_group.size() != group_weights.size()) {
        throw DataError("per-group weight count does not match group weight count");
    }
    WeightVector flat;
    for (size_t g = 0; g < within_group.size(); ++g) {
        for (double wt : within_group[g]) {
            flat.push_back(group_weights[g] * wt);
        }
    }
    return flat;
}

void write_merge_recipe(const MergeRecipe& recipe, const std::filesystem::path& path) {
    ordered_json doc;
    doc["stage"] = recipe.stage;
    doc["entries"] = ordered_json::array();
    for (const auto& [model_path, weight] : recipe.entries) {
        ordered_json entry;
        entry["model"] = model_path;
        entry["weight"] = weight;
        doc["entries"].push_back(std::move(entry));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot open '" + path.string() + "' for writing");
    }
    out << doc.dump(2) << '\n';
}

MergeRecipe read_merge_recipe(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open '" + path.string() + "' for reading");
    }
    ordered_json doc;
    try {
        in >> doc;
        MergeRecipe recipe;
        recipe.stage = doc.at("stage").get<std::string>();
        for (const auto& entry : doc.at("entries")) {
            recipe.entries.emplace_back(entry.at("model").get<std::string>(),
                                        entry.at("weight").get<double>());
        }
        return recipe;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": bad merge recipe: " + std::string(e.what()));
    }
}

}  // namespace evomerge
