#include "evomerge/curriculum.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>

#include "evomerge/errors.hpp"
#include "evomerge/rng.hpp"

namespace evomerge {

namespace {

// Table of fixed ranks for the default registry under the published policy.
const std::map<std::string, int>& published_ranks() {
    static const std::map<std::string, int> ranks = {
        {"SC-2class-sen", 1}, {"SC-2class-doc", 2},  {"SC-3class", 3},
        {"ABSA-ATSA", 4},     {"ABSA-ACSA", 5},      {"SC-5class", 6},
        {"ABSA-TSD", 7},      {"ABSA-ASD", 8},       {"MAST-Hate", 9},
        {"MAST-Offensive", 10}, {"MAST-Irony", 11},  {"ABSA-ASTE", 12},
        {"ABSA-ASQP", 13},    {"MAST-11class", 14},  {"MAST-28class", 15},
    };
    return ranks;
}

bool matches_default_registry(const std::vector<TaskMeta>& registry) {
    const std::vector<TaskMeta> standard = default_registry();
    if (registry.size() != standard.size()) {
        return false;
    }
    for (size_t i = 0; i < registry.size(); ++i) {
        const TaskMeta& a = registry[i];
        const TaskMeta& b = standard[i];
        if (a.task_id != b.task_id || a.group != b.group || a.num_classes != b.num_classes ||
            a.diversity != b.diversity || a.complexity != b.complexity ||
            a.subjectivity != b.subjectivity) {
            return false;
        }
    }
    return true;
}

std::string format_number(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", value);
    return buf;
}

// The query section is the text from the last "### Instruction:" marker on;
// everything before it is the exemplar block.
struct ParsedQuery {
    std::string instruction;
    std::optional<std::string> aspect;
    std::string input_text;
};

ParsedQuery parse_query(const std::string& prompt) {
    static const std::string kInstr = "### Instruction:\n";
    static const std::string kAspect = "\n### Aspect:\n";
    static const std::string kInput = "\n### Input:\n";
    static const std::string kResponse = "\n### Response:\n";

    const size_t instr_pos = prompt.rfind(kInstr);
    if (instr_pos == std::string::npos) {
        throw DataError("prompt has no instruction section");
    }
    const size_t instr_start = instr_pos + kInstr.size();
    const size_t input_pos = prompt.find(kInput, instr_start);
    if (input_pos == std::string::npos) {
        throw DataError("prompt has no input section");
    }
    const size_t response_pos = prompt.find(kResponse, input_pos);
    if (response_pos == std::string::npos ||
        response_pos + kResponse.size() != prompt.size()) {
        throw DataError("prompt does not end with a response section");
    }

    ParsedQuery query;
    const size_t aspect_pos = prompt.find(kAspect, instr_start);
    if (aspect_pos != std::string::npos && aspect_pos < input_pos) {
        query.instruction = prompt.substr(instr_start, aspect_pos - instr_start);
        const size_t aspect_start = aspect_pos + kAspect.size();
        query.aspect = prompt.substr(aspect_start, input_pos - aspect_start);
    } else {
        query.instruction = prompt.substr(instr_start, input_pos - instr_start);
    }
    const size_t input_start = input_pos + kInput.size();
    query.input_text = prompt.substr(input_start, response_pos - input_start);
    return query;
}

const std::string& task_for_query(const ParsedQuery& query, const Codec& codec) {
    auto it = codec.instruction_to_task.find(query.instruction);
    if (it == codec.instruction_to_task.end()) {
        throw DataError("prompt instruction does not match any registered task");
    }
    return it->second;
}

std::string predict_query(const Model& model, const Codec& codec, const ParsedQuery& query,
                          const std::string& task_id) {
    const TaskMeta& meta = codec.meta_for(task_id);
    EncodedExample encoded;
    encoded.task_id = task_id;
    encoded.features =
        encode_features(query.instruction, query.input_text, query.aspect, meta.group);
    encoded.gold_index = 0;  // unused by predict
    return predict(model, codec, encoded);
}

}  // namespace

double difficulty_score(const TaskMeta& meta, const DifficultyWeights& w) {
    return w.w1 * meta.num_classes + w.w2 * meta.diversity + w.w3 * meta.complexity +
           w.w4 * meta.subjectivity;
}

std::string rank_policy_to_string(RankPolicy policy) {
    switch (policy) {
        case RankPolicy::score_ascending: return "score_ascending";
        case RankPolicy::published: return "published";
    }
    throw DataError("unknown ranking policy value");
}

RankPolicy rank_policy_from_string(const std::string& name) {
    if (name == "score_ascending") return RankPolicy::score_ascending;
    if (name == "published") return RankPolicy::published;
    throw DataError("unknown ranking policy '" + name + "'");
}

CurriculumPlan rank_tasks(const std::vector<TaskMeta>& registry, const DifficultyWeights& w,
                          RankPolicy policy) {
    if (registry.empty()) {
        throw DataError("cannot rank an empty registry");
    }
    CurriculumPlan plan;
    plan.policy = policy;

    if (policy == RankPolicy::published) {
        if (!matches_default_registry(registry)) {
            throw DataError("the published ranking is defined only for the default registry");
        }
        plan.entries.resize(registry.size());
        for (const TaskMeta& meta : registry) {
            const int rank = published_ranks().at(meta.task_id);
            plan.entries[static_cast<size_t>(rank - 1)] = {
                meta.task_id, difficulty_score(meta, w), rank};
        }
        return plan;
    }

    std::vector<size_t> order(registry.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::vector<double> scores(registry.size());
    for (size_t i = 0; i < registry.size(); ++i) {
        scores[i] = difficulty_score(registry[i], w);
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    for (size_t pos = 0; pos < order.size(); ++pos) {
        plan.entries.push_back({registry[order[pos]].task_id, scores[order[pos]],
                                static_cast<int>(pos) + 1});
    }
    return plan;
}

void write_plan_csv(const CurriculumPlan& plan, const std::vector<TaskMeta>& registry,
                    const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot open '" + path.string() + "' for writing");
    }
    const std::string policy = rank_policy_to_string(plan.policy);
    out << "task_id,C,V,Z,S,score,rank,policy\n";
    for (const PlanEntry& entry : plan.entries) {
        auto it = std::find_if(registry.begin(), registry.end(), [&](const TaskMeta& meta) {
            return meta.task_id == entry.task_id;
        });
        if (it == registry.end()) {
            throw DataError("plan entry '" + entry.task_id + "' is not in the registry");
        }
        out << entry.task_id << ',' << it->num_classes << ',' << it->diversity << ','
            << it->complexity << ',' << it->subjectivity << ',' << format_number(entry.score)
            << ',' << entry.rank << ',' << policy << '\n';
    }
}

std::string assemble_exemplars(const CurriculumPlan& plan, const TaskSuite& suite, int k,
                               uint64_t seed) {
    if (k < 1) {
        throw DataError("exemplar count must be at least 1");
    }
    std::string block;
    bool first = true;
    for (const PlanEntry& entry : plan.entries) {
        if (!suite.has(entry.task_id)) {
            throw DataError("no dataset for task '" + entry.task_id + "'");
        }
        const TaskDataset& ds = suite.by_id(entry.task_id);
        if (ds.train.size() < static_cast<size_t>(k)) {
            throw DataError("task '" + entry.task_id + "' has " +
                            std::to_string(ds.train.size()) +
                            " training examples, fewer than the requested " +
                            std::to_string(k) + " exemplars");
        }
        std::vector<LabeledExample> shuffled = ds.train;
        RngStream stream = derive_stream(seed, "exemplars-" + entry.task_id);
        stream.shuffle(shuffled);
        for (int i = 0; i < k; ++i) {
            const LabeledExample& ex = shuffled[static_cast<size_t>(i)];
            if (!first) {
                block += "\n---\n";
            }
            first = false;
            block += build_prompt(ex.instruction, ex.input_text, ex.aspect);
            block += ex.gold;
            block += '\n';
        }
    }
    return block;
}

std::string curriculum_prompt(const TaskMeta& meta, const LabeledExample& example,
                              const std::string& exemplar_block) {
    if (exemplar_block.empty()) {
        throw DataError("exemplar block is empty");
    }
    if (example.task_id != meta.task_id) {
        throw DataError("example task '" + example.task_id + "' does not match meta task '" +
                        meta.task_id + "'");
    }
    return build_prompt(example.instruction, example.input_text, example.aspect,
                        exemplar_block);
}

InferenceAdapter make_model_adapter(Model model, Codec codec) {
    return [model = std::move(model), codec = std::move(codec)](const std::string& prompt) {
        const ParsedQuery query = parse_query(prompt);
        return predict_query(model, codec, query, task_for_query(query, codec));
    };
}

InferenceAdapter make_router_adapter(std::map<std::string, Model> experts, Codec codec) {
    return [experts = std::move(experts),
            codec = std::move(codec)](const std::string& prompt) {
        const ParsedQuery query = parse_query(prompt);
        const std::string& task_id = task_for_query(query, codec);
        auto it = experts.find(task_id);
        if (it == experts.end()) {
            throw DataError("no model registered for task '" + task_id + "'");
        }
        return predict_query(it->second, codec, query, task_id);
    };
}

CurriculumEvalResult run_curriculum_eval(const CurriculumPlan& plan, const TaskSuite& suite,
                                         const Codec& codec, const std::string& exemplar_block,
                                         const InferenceAdapter& adapter) {
    CurriculumEvalResult result;
    for (const PlanEntry& entry : plan.entries) {
        try {
            const TaskMeta& meta = codec.meta_for(entry.task_id);
            const TaskDataset& ds = suite.by_id(entry.task_id);
            if (ds.test.empty()) {
                throw DataError("task '" + entry.task_id + "' has an empty test split");
            }
            std::vector<std::string> preds, golds;
            preds.reserve(ds.test.size());
            golds.reserve(ds.test.size());
            for (const LabeledExample& ex : ds.test) {
                const std::string prompt =
                    exemplar_block.empty()
                        ? build_prompt(ex.instruction, ex.input_text, ex.aspect)
                        : curriculum_prompt(meta, ex, exemplar_block);
                preds.push_back(adapter(prompt));
                golds.push_back(ex.gold);
            }
            EvalReport report;
            report.task_id = entry.task_id;
            report.metric = meta.metric;
            report.value = evaluate_metric(meta.metric, preds, golds, meta.label_set);
            report.n = static_cast<int>(ds.test.size());
            result.reports.push_back(std::move(report));
        } catch (const std::exception& e) {
            result.task_errors.emplace(entry.task_id, e.what());
        }
    }
    return result;
}

}  // namespace evomerge
