#include "evomerge/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "evomerge/errors.hpp"
#include "evomerge/rng.hpp"

namespace evomerge {

namespace {

namespace fs = std::filesystem;

const std::vector<std::string> kGroupOrder = {"SC", "ABSA", "MAST"};

std::string format_double(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

std::string trim(const std::string& s) {
    const size_t begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) {
        return "";
    }
    const size_t end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

uint64_t parse_u64(const std::string& value, const std::string& where) {
    try {
        size_t used = 0;
        const uint64_t parsed = std::stoull(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
        return parsed;
    } catch (const std::exception&) {
        throw UsageError(where + ": '" + value + "' is not an unsigned integer");
    }
}

int parse_int(const std::string& value, const std::string& where) {
    try {
        size_t used = 0;
        const int parsed = std::stoi(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
        return parsed;
    } catch (const std::exception&) {
        throw UsageError(where + ": '" + value + "' is not an integer");
    }
}

double parse_double(const std::string& value, const std::string& where) {
    try {
        size_t used = 0;
        const double parsed = std::stod(value, &used);
        if (used != value.size()) {
            throw std::invalid_argument(value);
        }
        return parsed;
    } catch (const std::exception&) {
        throw UsageError(where + ": '" + value + "' is not a number");
    }
}

void apply_config_key(PipelineConfig& config, const std::string& section,
                      const std::string& key, const std::string& value,
                      const std::string& where) {
    if (section == "pipeline") {
        if (key == "master_seed") {
            config.master_seed = parse_u64(value, where);
        } else if (key == "workspace") {
            config.workspace = value;
        } else if (key == "ranking_policy") {
            try {
                config.ranking_policy = rank_policy_from_string(value);
            } catch (const DataError& e) {
                throw UsageError(where + ": " + e.what());
            }
        } else if (key == "exemplars_per_task") {
            config.exemplars_per_task = parse_int(value, where);
        } else if (key == "eval_threads") {
            config.eval_threads = parse_int(value, where);
        } else {
            throw UsageError(where + ": unknown key '" + key + "' in [pipeline]");
        }
    } else if (section == "sft") {
        if (key == "batch_size") {
            config.sft.batch_size = parse_int(value, where);
        } else if (key == "micro_batch_size") {
            config.sft.micro_batch_size = parse_int(value, where);
        } else if (key == "learning_rate") {
            config.sft.learning_rate = parse_double(value, where);
        } else if (key == "max_epochs") {
            config.sft.max_epochs = parse_int(value, where);
        } else if (key == "weight_decay") {
            config.sft.weight_decay = parse_double(value, where);
        } else if (key == "lora_r") {
            config.sft.lora_r = parse_int(value, where);
        } else if (key == "lora_alpha") {
            config.sft.lora_alpha = static_cast<float>(parse_double(value, where));
        } else if (key == "lora_dropout") {
            config.sft.lora_dropout = parse_double(value, where);
        } else if (key == "early_stop_patience") {
            config.sft.early_stop_patience = parse_int(value, where);
        } else {
            throw UsageError(where + ": unknown key '" + key + "' in [sft]");
        }
    } else if (section == "merge") {
        if (key == "generations") {
            config.evolution.generations = parse_int(value, where);
        } else if (key == "population_size") {
            config.evolution.population_size = parse_int(value, where);
        } else if (key == "mutation_prob") {
            config.evolution.mutation_prob = parse_double(value, where);
        } else if (key == "mutation_sigma") {
            config.evolution.mutation_sigma = parse_double(value, where);
        } else if (key == "elitism_count") {
            config.evolution.elitism_count = parse_int(value, where);
        } else if (key == "tournament_size") {
            config.evolution.tournament_size = parse_int(value, where);
        } else {
            throw UsageError(where + ": unknown key '" + key + "' in [merge]");
        }
    } else if (section == "difficulty") {
        if (key == "w1") {
            config.difficulty.w1 = parse_double(value, where);
        } else if (key == "w2") {
            config.difficulty.w2 = parse_double(value, where);
        } else if (key == "w3") {
            config.difficulty.w3 = parse_double(value, where);
        } else if (key == "w4") {
            config.difficulty.w4 = parse_double(value, where);
        } else {
            throw UsageError(where + ": unknown key '" + key + "' in [difficulty]");
        }
    } else if (section == "sizes") {
        if (key == "train") {
            config.sizes.default_size.train = parse_int(value, where);
        } else if (key == "test") {
            config.sizes.default_size.test = parse_int(value, where);
        } else {
            throw UsageError(where + ": unknown key '" + key + "' in [sizes]");
        }
    } else if (section.rfind("sizes.", 0) == 0) {
        const std::string task_id = section.substr(6);
        if (task_id.empty()) {
            throw UsageError(where + ": empty task id in sizes section");
        }
        SizeSpec& spec = config.sizes.per_task
                             .try_emplace(task_id, config.sizes.default_size)
                             .first->second;
        if (key == "train") {
            spec.train = parse_int(value, where);
        } else if (key == "test") {
            spec.test = parse_int(value, where);
        } else {
            throw UsageError(where + ": unknown key '" + key + "' in [" + section + "]");
        }
    } else {
        throw UsageError(where + ": unknown section '" + section + "'");
    }
}

std::vector<TaskMeta> load_workspace_registry(const WorkspacePaths& ws) {
    if (!fs::exists(ws.registry_file())) {
        throw DataError("no registry at '" + ws.registry_file().string() +
                        "'; run gen-tasks first");
    }
    return read_registry_json(ws.registry_file());
}

std::vector<LabeledExample> load_split(const fs::path& path, const std::string& producer) {
    if (!fs::exists(path)) {
        throw DataError("missing '" + path.string() + "'; run " + producer + " first");
    }
    return read_examples_jsonl(path);
}

Model load_model_file(const fs::path& path, const std::string& producer) {
    if (!fs::exists(path)) {
        throw DataError("missing '" + path.string() + "'; run " + producer + " first");
    }
    return model_from_tensor_map(load_checkpoint(path));
}

TaskSuite load_workspace_suite(const WorkspacePaths& ws,
                               const std::vector<TaskMeta>& registry) {
    TaskSuite suite;
    for (const TaskMeta& meta : registry) {
        TaskDataset ds;
        ds.task_id = meta.task_id;
        ds.train = load_split(ws.train_file(meta.task_id), "gen-tasks");
        ds.test = load_split(ws.test_file(meta.task_id), "gen-tasks");
        suite.tasks.push_back(std::move(ds));
    }
    return suite;
}

ModelArch arch_for_codec(const Codec& codec) {
    ModelArch arch;
    arch.output_dim = static_cast<int>(codec.vocab.size());
    return arch;
}

uint64_t expert_seed(uint64_t master_seed, const std::string& task_id) {
    return master_seed ^ fnv1a64(task_id);
}

int resolve_eval_threads(const PipelineConfig& config) {
    if (config.eval_threads > 0) {
        return config.eval_threads;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

struct SideBySideRow {
    std::string task_id;
    std::string metric;
    int n = 0;
    double base = 0.0;
    double expert = 0.0;
    double merged = 0.0;
};

std::vector<SideBySideRow> read_side_by_side(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("missing '" + path.string() + "'; run curriculum first");
    }
    std::vector<SideBySideRow> rows;
    std::string line;
    if (!std::getline(in, line) || line != "task_id,metric,n,base,expert,merged") {
        throw DataError(path.string() + ": unexpected header");
    }
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) {
            fields.push_back(field);
        }
        if (fields.size() != 6) {
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": expected 6 fields");
        }
        SideBySideRow row;
        row.task_id = fields[0];
        row.metric = fields[1];
        row.n = parse_int(fields[2], path.string());
        row.base = std::stod(fields[3]);
        row.expert = std::stod(fields[4]);
        row.merged = std::stod(fields[5]);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

void PipelineConfig::validate() const {
    const auto reject = [](const std::string& message) { throw UsageError(message); };
    if (exemplars_per_task < 1) {
        reject("exemplars_per_task must be at least 1");
    }
    if (eval_threads < 0) {
        reject("eval_threads must be non-negative");
    }
    if (sft.batch_size <= 0 || sft.micro_batch_size <= 0 ||
        sft.batch_size % sft.micro_batch_size != 0) {
        reject("micro_batch_size must be positive and divide batch_size");
    }
    if (!(sft.learning_rate > 0.0) || !std::isfinite(sft.learning_rate)) {
        reject("learning_rate must be positive and finite");
    }
    if (sft.max_epochs <= 0) {
        reject("max_epochs must be positive");
    }
    if (sft.weight_decay < 0.0) {
        reject("weight_decay must be non-negative");
    }
    if (sft.lora_r <= 0) {
        reject("lora_r must be positive");
    }
    if (!(sft.lora_alpha > 0.0f)) {
        reject("lora_alpha must be positive");
    }
    if (sft.lora_dropout < 0.0 || sft.lora_dropout >= 1.0) {
        reject("lora_dropout must lie in [0, 1)");
    }
    if (sft.early_stop_patience < 0) {
        reject("early_stop_patience must be non-negative");
    }
    try {
        evolution.validate();
    } catch (const DataError& e) {
        reject(e.what());
    }
    if (sizes.default_size.train <= 0 || sizes.default_size.test <= 0) {
        reject("dataset sizes must be positive");
    }
    for (const auto& [task_id, spec] : sizes.per_task) {
        if (spec.train <= 0 || spec.test <= 0) {
            reject("dataset sizes for '" + task_id + "' must be positive");
        }
    }
}

PipelineConfig default_pipeline_config() { return PipelineConfig{}; }

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw UsageError("cannot open config file '" + path.string() + "'");
    }
    PipelineConfig config;
    std::string line;
    std::string section;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string text = trim(line);
        if (text.empty() || text[0] == '#' || text[0] == ';') {
            continue;
        }
        const std::string where = path.string() + ":" + std::to_string(line_no);
        if (text.front() == '[') {
            if (text.back() != ']' || text.size() < 3) {
                throw UsageError(where + ": malformed section header");
            }
            section = trim(text.substr(1, text.size() - 2));
            continue;
        }
        const size_t eq = text.find('=');
        if (eq == std::string::npos) {
            throw UsageError(where + ": expected key = value");
        }
        const std::string key = trim(text.substr(0, eq));
        const std::string value = trim(text.substr(eq + 1));
        if (key.empty()) {
            throw UsageError(where + ": empty key");
        }
        if (section.empty()) {
            throw UsageError(where + ": key outside any section");
        }
        apply_config_key(config, section, key, value, where);
    }
    config.validate();
    return config;
}

void run_gen_tasks(const PipelineConfig& config) {
    config.validate();
    const WorkspacePaths ws{config.workspace};
    const std::vector<TaskMeta> registry = default_registry();
    const TaskSuite suite = generate_task_suite(registry, config.sizes, config.master_seed);

    fs::create_directories(ws.datasets());
    write_registry_json(registry, ws.registry_file());
    for (const TaskDataset& ds : suite.tasks) {
        write_examples_jsonl(ds.train, ws.train_file(ds.task_id));
        write_examples_jsonl(ds.test, ws.test_file(ds.task_id));
    }
    std::cerr << "gen-tasks: wrote " << suite.tasks.size() << " tasks under "
              << ws.datasets().string() << "\n";
}

void run_train_experts(const PipelineConfig& config) {
    config.validate();
    const WorkspacePaths ws{config.workspace};
    const std::vector<TaskMeta> registry = load_workspace_registry(ws);
    const Codec codec = build_codec(registry);
    const Model base = init_base(arch_for_codec(codec), config.master_seed);

    fs::create_directories(ws.experts());
    save_checkpoint(model_to_tensor_map(base), ws.base_model_file());

    for (const TaskMeta& meta : registry) {
        const std::vector<LabeledExample> train =
            load_split(ws.train_file(meta.task_id), "gen-tasks");
        TrainConfig train_cfg = config.sft;
        train_cfg.seed = expert_seed(config.master_seed, meta.task_id);
        const TrainedExpert expert = train_expert(base, train, codec, train_cfg);

        save_checkpoint(adapter_to_tensor_map(expert.adapter, base.arch),
                        ws.adapter_file(meta.task_id));
        save_checkpoint(model_to_tensor_map(effective_weights(base, expert.adapter)),
                        ws.expert_file(meta.task_id));

        std::ofstream loss(ws.loss_file(meta.task_id), std::ios::trunc);
        if (!loss) {
            throw DataError("cannot open '" + ws.loss_file(meta.task_id).string() +
                            "' for writing");
        }
        loss << "epoch,mean_loss,train_accuracy\n";
        for (size_t e = 0; e < expert.stats.epoch_losses.size(); ++e) {
            loss << (e + 1) << ',' << format_double(expert.stats.epoch_losses[e]) << ','
                 << format_double(expert.stats.epoch_accuracies[e]) << '\n';
        }
        std::cerr << "train-experts: " << meta.task_id << " epochs="
                  << expert.stats.epochs_run
                  << " loss=" << expert.stats.epoch_losses.back()
                  << " acc=" << expert.stats.epoch_accuracies.back() << "\n";
    }
}

void run_extract_weak(const PipelineConfig& config) {
    config.validate();
    const WorkspacePaths ws{config.workspace};
    const std::vector<TaskMeta> registry = load_workspace_registry(ws);
    const Codec codec = build_codec(registry);

    fs::create_directories(ws.weak());
    std::ofstream summary(ws.weak_summary_file(), std::ios::trunc);
    if (!summary) {
        throw DataError("cannot open '" + ws.weak_summary_file().string() + "' for writing");
    }
    summary << "task_id,weak_count,train_size,fallback\n";

    for (const TaskMeta& meta : registry) {
        const Model expert = load_model_file(ws.expert_file(meta.task_id), "train-experts");
        const std::vector<LabeledExample> train =
            load_split(ws.train_file(meta.task_id), "gen-tasks");
        WeakSet weak = extract_weak_data(expert, codec, meta.task_id, train);
        if (weak.items.empty()) {
            std::cerr << "extract-weak: warning: expert for " << meta.task_id
                      << " has no training errors; using the fallback slice\n";
            weak = apply_weak_fallback(std::move(weak), train);
        }
        write_examples_jsonl(weak.items, ws.weak_file(meta.task_id));
        summary << meta.task_id << ',' << weak.items.size() << ',' << train.size() << ','
                << (weak.is_fallback ? 1 : 0) << '\n';
        std::cerr << "extract-weak: " << meta.task_id << " weak=" << weak.items.size() << "/"
                  << train.size() << (weak.is_fallback ? " (fallback)" : "") << "\n";
    }
}

void run_evolve(const PipelineConfig& config) {
    config.validate();
    const WorkspacePaths ws{config.workspace};
    const std::vector<TaskMeta> registry = load_workspace_registry(ws);
    const Codec codec = build_codec(registry);

    std::map<std::string, std::vector<TensorMap>> experts_by_group;
    std::map<std::string, std::vector<WeakSet>> weak_by_group;
    std::map<std::string, std::vector<std::string>> tasks_by_group;
    for (const TaskMeta& meta : registry) {
        const std::string group = group_to_string(meta.group);
        if (!fs::exists(ws.expert_file(meta.task_id))) {
            throw DataError("missing '" + ws.expert_file(meta.task_id).string() +
                            "'; run train-experts first");
        }
        experts_by_group[group].push_back(load_checkpoint(ws.expert_file(meta.task_id)));
        WeakSet weak;
        weak.task_id = meta.task_id;
        weak.items = load_split(ws.weak_file(meta.task_id), "extract-weak");
        weak_by_group[group].push_back(std::move(weak));
        tasks_by_group[group].push_back(meta.task_id);
    }

    EvolutionConfig evo_cfg = config.evolution;
    evo_cfg.seed = config.master_seed;
    const TwoStageResult result =
        evolve_two_stage(experts_by_group, weak_by_group, evo_cfg, codec, delta_similarity,
                         resolve_eval_threads(config));

    fs::create_directories(ws.merged());
    for (const std::string& group : kGroupOrder) {
        save_checkpoint(result.group_models.at(group), ws.group_model_file(group));
        MergeRecipe recipe;
        recipe.stage = group;
        const std::vector<std::string>& tasks = tasks_by_group.at(group);
        const WeightVector& weights = result.group_weights.at(group).weights;
        for (size_t i = 0; i < tasks.size(); ++i) {
            recipe.entries.emplace_back("experts/" + tasks[i] + ".emcp", weights[i]);
        }
        write_merge_recipe(recipe, ws.recipe_file(group));
    }
    save_checkpoint(result.final_model, ws.final_model_file());
    MergeRecipe final_recipe;
    final_recipe.stage = "final";
    for (size_t g = 0; g < kGroupOrder.size(); ++g) {
        final_recipe.entries.emplace_back("merged/" + kGroupOrder[g] + ".emcp",
                                          result.final_weights.weights[g]);
    }
    write_merge_recipe(final_recipe, ws.recipe_file("final"));
    write_history_csv(result.history, ws.history_file());

    std::cerr << "evolve: final weights";
    for (double w : result.final_weights.weights) {
        std::cerr << ' ' << w;
    }
    if (result.final_weights.fitness) {
        std::cerr << " fitness=" << *result.final_weights.fitness;
    }
    std::cerr << "\n";
}

void run_curriculum(const PipelineConfig& config) {
    config.validate();
    const WorkspacePaths ws{config.workspace};
    const std::vector<TaskMeta> registry = load_workspace_registry(ws);
    const Codec codec = build_codec(registry);
    const TaskSuite suite = load_workspace_suite(ws, registry);

    const CurriculumPlan plan = rank_tasks(registry, config.difficulty, config.ranking_policy);
    const std::string exemplars =
        assemble_exemplars(plan, suite, config.exemplars_per_task, config.master_seed);

    fs::create_directories(ws.curriculum());
    write_plan_csv(plan, registry, ws.plan_file());
    {
        std::ofstream out(ws.exemplars_file(), std::ios::trunc | std::ios::binary);
        if (!out) {
            throw DataError("cannot open '" + ws.exemplars_file().string() + "' for writing");
        }
        out << exemplars;
    }

    const Model base = load_model_file(ws.base_model_file(), "train-experts");
    std::map<std::string, Model> experts;
    for (const TaskMeta& meta : registry) {
        experts.emplace(meta.task_id,
                        load_model_file(ws.expert_file(meta.task_id), "train-experts"));
    }
    const Model final_model = load_model_file(ws.final_model_file(), "evolve");

    const CurriculumEvalResult base_eval = run_curriculum_eval(
        plan, suite, codec, exemplars, make_model_adapter(base, codec));
    const CurriculumEvalResult expert_eval = run_curriculum_eval(
        plan, suite, codec, exemplars, make_router_adapter(experts, codec));
    const CurriculumEvalResult merged_eval = run_curriculum_eval(
        plan, suite, codec, exemplars, make_model_adapter(final_model, codec));

    for (const auto* eval : {&base_eval, &expert_eval, &merged_eval}) {
        for (const auto& [task_id, message] : eval->task_errors) {
            std::cerr << "curriculum: warning: " << task_id << ": " << message << "\n";
        }
    }

    write_eval_reports_csv(base_eval.reports, ws.eval_file("base"));
    write_eval_reports_csv(expert_eval.reports, ws.eval_file("expert"));
    write_eval_reports_csv(merged_eval.reports, ws.eval_file("merged"));

    const auto find_report = [](const std::vector<EvalReport>& reports,
                                const std::string& task_id) -> const EvalReport* {
        for (const EvalReport& report : reports) {
            if (report.task_id == task_id) {
                return &report;
            }
        }
        return nullptr;
    };
    std::ofstream side(ws.eval_side_by_side_file(), std::ios::trunc);
    if (!side) {
        throw DataError("cannot open '" + ws.eval_side_by_side_file().string() +
                        "' for writing");
    }
    side << "task_id,metric,n,base,expert,merged\n";
    for (const PlanEntry& entry : plan.entries) {
        const EvalReport* b = find_report(base_eval.reports, entry.task_id);
        const EvalReport* x = find_report(expert_eval.reports, entry.task_id);
        const EvalReport* m = find_report(merged_eval.reports, entry.task_id);
        if (b == nullptr || x == nullptr || m == nullptr) {
            std::cerr << "curriculum: warning: skipping " << entry.task_id
                      << " in the side-by-side report (missing evaluation)\n";
            continue;
        }
        side << entry.task_id << ',' << metric_to_string(b->metric) << ',' << b->n << ','
             << format_double(b->value) << ',' << format_double(x->value) << ','
             << format_double(m->value) << '\n';
    }
    std::cerr << "curriculum: evaluated " << merged_eval.reports.size() << " tasks\n";
}

void run_report(const PipelineConfig& config) {
    config.validate();
    const WorkspacePaths ws{config.workspace};
    const std::vector<SideBySideRow> rows = read_side_by_side(ws.eval_side_by_side_file());
    if (rows.empty()) {
        throw DataError("no evaluation rows in '" + ws.eval_side_by_side_file().string() + "'");
    }

    fs::create_directories(ws.reports());
    std::ofstream comparison(ws.comparison_file(), std::ios::trunc);
    if (!comparison) {
        throw DataError("cannot open '" + ws.comparison_file().string() + "' for writing");
    }
    comparison << "task_id,metric,base,expert,merged,delta_vs_base,delta_vs_expert\n";
    int merged_at_least_base = 0;
    double base_sum = 0.0, expert_sum = 0.0, merged_sum = 0.0;
    for (const SideBySideRow& row : rows) {
        comparison << row.task_id << ',' << row.metric << ',' << format_double(row.base) << ','
                   << format_double(row.expert) << ',' << format_double(row.merged) << ','
                   << format_double(row.merged - row.base) << ','
                   << format_double(row.merged - row.expert) << '\n';
        if (row.merged >= row.base) {
            ++merged_at_least_base;
        }
        base_sum += row.base;
        expert_sum += row.expert;
        merged_sum += row.merged;
    }

    std::ofstream summary(ws.summary_file(), std::ios::trunc);
    if (!summary) {
        throw DataError("cannot open '" + ws.summary_file().string() + "' for writing");
    }
    const double n = static_cast<double>(rows.size());
    summary << "tasks evaluated: " << rows.size() << "\n";
    summary << "merged >= base: " << merged_at_least_base << " of " << rows.size() << "\n";
    summary << "mean base: " << format_double(base_sum / n) << "\n";
    summary << "mean expert: " << format_double(expert_sum / n) << "\n";
    summary << "mean merged: " << format_double(merged_sum / n) << "\n";
    std::cerr << "report: merged >= base on " << merged_at_least_base << " of " << rows.size()
              << " tasks\n";
}

}  // namespace evomerge
