#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "evomerge/errors.hpp"
#include "evomerge/merge.hpp"
#include "evomerge/pipeline.hpp"

using namespace evomerge;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "missing " << path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    out << content;
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream in(path);
    REQUIRE_MESSAGE(in.good(), "missing " << path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        lines.push_back(line);
    }
    return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) {
        fields.push_back(field);
    }
    return fields;
}

// Small, fast configuration: every task still trains and merges, but on a
// desk-scale budget. The bumped learning rate is what actually moves the toy
// model; the published default targets a much larger network.
PipelineConfig small_config(const fs::path& workspace, uint64_t seed = 42) {
    PipelineConfig cfg = default_pipeline_config();
    cfg.workspace = workspace;
    cfg.master_seed = seed;
    cfg.eval_threads = 1;
    cfg.sizes.default_size = {56, 28};
    cfg.sft.learning_rate = 0.05;
    return cfg;
}

struct TempWorkspace {
    fs::path root;
    explicit TempWorkspace(const std::string& name)
        : root(fs::temp_directory_path() / name) {
        fs::remove_all(root);
    }
    ~TempWorkspace() { fs::remove_all(root); }
};

}  // namespace

TEST_CASE("default configuration carries the published hyperparameters") {
    const PipelineConfig cfg = default_pipeline_config();
    CHECK(cfg.master_seed == 42);
    CHECK(cfg.ranking_policy == RankPolicy::score_ascending);
    CHECK(cfg.exemplars_per_task == 1);
    CHECK(cfg.eval_threads == 0);

    CHECK(cfg.sft.batch_size == 64);
    CHECK(cfg.sft.micro_batch_size == 4);
    CHECK(cfg.sft.learning_rate == 3e-4);
    CHECK(cfg.sft.max_epochs == 10);
    CHECK(cfg.sft.weight_decay == 0.1);
    CHECK(cfg.sft.lora_r == 4);
    CHECK(cfg.sft.lora_alpha == 16.0f);
    CHECK(cfg.sft.lora_dropout == 0.05);
    CHECK(cfg.sft.early_stop_patience == 2);

    CHECK(cfg.evolution.generations == 10);
    CHECK(cfg.evolution.population_size == 20);
    CHECK(cfg.evolution.mutation_prob == 0.1);
    CHECK(cfg.evolution.mutation_sigma == 0.1);
    CHECK(cfg.evolution.elitism_count == 2);
    CHECK(cfg.evolution.tournament_size == 3);

    CHECK(cfg.difficulty.w1 == 1.0);
    CHECK(cfg.difficulty.w2 == 0.5);
    CHECK(cfg.difficulty.w3 == 2.0);
    CHECK(cfg.difficulty.w4 == 5.0);

    CHECK(cfg.sizes.default_size.train == 1000);
    CHECK(cfg.sizes.default_size.test == 200);
    CHECK(cfg.sizes.per_task.empty());

    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("config files parse every section") {
    const fs::path path = fs::temp_directory_path() / "evomerge-config.ini";
    write_file(path,
               "# full configuration\n"
               "[pipeline]\n"
               "master_seed = 7\n"
               "workspace = /tmp/elsewhere\n"
               "ranking_policy = published\n"
               "exemplars_per_task = 2\n"
               "eval_threads = 3\n"
               "\n"
               "; alternate comment style\n"
               "[sft]\n"
               "batch_size = 32\n"
               "micro_batch_size = 8\n"
               "learning_rate = 0.01\n"
               "max_epochs = 4\n"
               "weight_decay = 0.2\n"
               "lora_r = 2\n"
               "lora_alpha = 8\n"
               "lora_dropout = 0.1\n"
               "early_stop_patience = 1\n"
               "\n"
               "[merge]\n"
               "generations = 5\n"
               "population_size = 8\n"
               "mutation_prob = 0.2\n"
               "mutation_sigma = 0.05\n"
               "elitism_count = 1\n"
               "tournament_size = 2\n"
               "\n"
               "[difficulty]\n"
               "w1 = 2.0\n"
               "w2 = 1.0\n"
               "w3 = 3.0\n"
               "w4 = 4.0\n"
               "\n"
               "[sizes]\n"
               "train = 100\n"
               "test = 50\n"
               "\n"
               "[sizes.MAST-28class]\n"
               "train = 120\n"
               "test = 60\n");
    const PipelineConfig cfg = load_pipeline_config(path);
    fs::remove(path);

    CHECK(cfg.master_seed == 7);
    CHECK(cfg.workspace == fs::path("/tmp/elsewhere"));
    CHECK(cfg.ranking_policy == RankPolicy::published);
    CHECK(cfg.exemplars_per_task == 2);
    CHECK(cfg.eval_threads == 3);
    CHECK(cfg.sft.batch_size == 32);
    CHECK(cfg.sft.micro_batch_size == 8);
    CHECK(cfg.sft.learning_rate == 0.01);
    CHECK(cfg.sft.max_epochs == 4);
    CHECK(cfg.sft.weight_decay == 0.2);
    CHECK(cfg.sft.lora_r == 2);
    CHECK(cfg.sft.lora_alpha == 8.0f);
    CHECK(cfg.sft.lora_dropout == 0.1);
    CHECK(cfg.sft.early_stop_patience == 1);
    CHECK(cfg.evolution.generations == 5);
    CHECK(cfg.evolution.population_size == 8);
    CHECK(cfg.evolution.mutation_prob == 0.2);
    CHECK(cfg.evolution.mutation_sigma == 0.05);
    CHECK(cfg.evolution.elitism_count == 1);
    CHECK(cfg.evolution.tournament_size == 2);
    CHECK(cfg.difficulty.w1 == 2.0);
    CHECK(cfg.difficulty.w2 == 1.0);
    CHECK(cfg.difficulty.w3 == 3.0);
    CHECK(cfg.difficulty.w4 == 4.0);
    CHECK(cfg.sizes.default_size.train == 100);
    CHECK(cfg.sizes.default_size.test == 50);
    CHECK(cfg.sizes.resolve("MAST-28class").train == 120);
    CHECK(cfg.sizes.resolve("MAST-28class").test == 60);
    CHECK(cfg.sizes.resolve("SC-3class").train == 100);
}

TEST_CASE("config errors name the file and line") {
    const fs::path path = fs::temp_directory_path() / "evomerge-bad-config.ini";

    SUBCASE("unknown key") {
        write_file(path, "[pipeline]\nmaster_seed = 1\nbogus = 2\n");
        try {
            load_pipeline_config(path);
            FAIL("expected UsageError");
        } catch (const UsageError& e) {
            const std::string what = e.what();
            CHECK(what.find(":3") != std::string::npos);
            CHECK(what.find("bogus") != std::string::npos);
        }
    }
    SUBCASE("unknown section") {
        write_file(path, "[training]\nlr = 1\n");
        CHECK_THROWS_AS(load_pipeline_config(path), UsageError);
    }
    SUBCASE("valueless line") {
        write_file(path, "[pipeline]\nmaster_seed\n");
        CHECK_THROWS_AS(load_pipeline_config(path), UsageError);
    }
    SUBCASE("key before any section") {
        write_file(path, "master_seed = 1\n");
        CHECK_THROWS_AS(load_pipeline_config(path), UsageError);
    }
    SUBCASE("non-numeric value names the offender") {
        write_file(path, "[sft]\nlearning_rate = fast\n");
        try {
            load_pipeline_config(path);
            FAIL("expected UsageError");
        } catch (const UsageError& e) {
            CHECK(std::string(e.what()).find("'fast'") != std::string::npos);
        }
    }
    SUBCASE("values that parse but violate invariants") {
        write_file(path, "[sft]\nbatch_size = 10\nmicro_batch_size = 4\n");
        CHECK_THROWS_AS(load_pipeline_config(path), UsageError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_pipeline_config(fs::temp_directory_path() / "no-such.ini"),
                        UsageError);
    }
    fs::remove(path);
}

TEST_CASE("config validation rejects out-of-range fields") {
    PipelineConfig cfg = default_pipeline_config();
    cfg.exemplars_per_task = 0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);

    cfg = default_pipeline_config();
    cfg.eval_threads = -1;
    CHECK_THROWS_AS(cfg.validate(), UsageError);

    cfg = default_pipeline_config();
    cfg.sft.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), UsageError);

    cfg = default_pipeline_config();
    cfg.evolution.population_size = 2;
    CHECK_THROWS_AS(cfg.validate(), UsageError);

    cfg = default_pipeline_config();
    cfg.sizes.per_task["SC-3class"] = {0, 10};
    CHECK_THROWS_AS(cfg.validate(), UsageError);
}

TEST_CASE("workspace layout is fixed") {
    const WorkspacePaths ws{fs::path("/ws")};
    CHECK(ws.registry_file() == fs::path("/ws/datasets/registry.json"));
    CHECK(ws.train_file("SC-3class") == fs::path("/ws/datasets/SC-3class.train.jsonl"));
    CHECK(ws.test_file("SC-3class") == fs::path("/ws/datasets/SC-3class.test.jsonl"));
    CHECK(ws.base_model_file() == fs::path("/ws/experts/base.emcp"));
    CHECK(ws.adapter_file("ABSA-ASD") == fs::path("/ws/experts/ABSA-ASD.adapter.emcp"));
    CHECK(ws.expert_file("ABSA-ASD") == fs::path("/ws/experts/ABSA-ASD.emcp"));
    CHECK(ws.loss_file("ABSA-ASD") == fs::path("/ws/experts/ABSA-ASD.loss.csv"));
    CHECK(ws.weak_file("MAST-Irony") == fs::path("/ws/weak/MAST-Irony.weak.jsonl"));
    CHECK(ws.weak_summary_file() == fs::path("/ws/weak/summary.csv"));
    CHECK(ws.group_model_file("SC") == fs::path("/ws/merged/SC.emcp"));
    CHECK(ws.final_model_file() == fs::path("/ws/merged/final.emcp"));
    CHECK(ws.history_file() == fs::path("/ws/merged/history.csv"));
    CHECK(ws.recipe_file("final") == fs::path("/ws/merged/recipe.final.json"));
    CHECK(ws.plan_file() == fs::path("/ws/curriculum/plan.csv"));
    CHECK(ws.exemplars_file() == fs::path("/ws/curriculum/exemplars.txt"));
    CHECK(ws.eval_file("base") == fs::path("/ws/curriculum/eval.base.csv"));
    CHECK(ws.eval_side_by_side_file() == fs::path("/ws/curriculum/eval.csv"));
    CHECK(ws.comparison_file() == fs::path("/ws/reports/comparison.csv"));
    CHECK(ws.summary_file() == fs::path("/ws/reports/summary.txt"));
}

TEST_CASE("stages demand the outputs of their predecessors") {
    TempWorkspace tmp("evomerge-pipe-empty");
    const PipelineConfig cfg = small_config(tmp.root);

    const auto check_demands = [](const auto& stage, const PipelineConfig& config,
                                  const std::string& producer) {
        try {
            stage(config);
            FAIL_CHECK("expected DataError naming " << producer);
        } catch (const DataError& e) {
            const std::string what = e.what();
            CHECK_MESSAGE(what.find("run " + producer + " first") != std::string::npos,
                          "producer " << producer << ": " << what);
        }
    };

    check_demands(run_train_experts, cfg, "gen-tasks");
    check_demands(run_extract_weak, cfg, "gen-tasks");
    check_demands(run_evolve, cfg, "gen-tasks");
    check_demands(run_curriculum, cfg, "gen-tasks");
    check_demands(run_report, cfg, "curriculum");

    run_gen_tasks(cfg);
    check_demands(run_extract_weak, cfg, "train-experts");
    check_demands(run_evolve, cfg, "train-experts");
    check_demands(run_curriculum, cfg, "train-experts");

    run_train_experts(cfg);
    check_demands(run_evolve, cfg, "extract-weak");
    check_demands(run_curriculum, cfg, "evolve");
}

TEST_CASE("generated datasets are deterministic and seed-sensitive") {
    TempWorkspace tmp("evomerge-pipe-gen");
    const PipelineConfig cfg = small_config(tmp.root);
    run_gen_tasks(cfg);

    const WorkspacePaths ws{cfg.workspace};
    const auto registry = read_registry_json(ws.registry_file());
    CHECK(registry.size() == 15);
    for (const TaskMeta& meta : registry) {
        CHECK(fs::exists(ws.train_file(meta.task_id)));
        CHECK(fs::exists(ws.test_file(meta.task_id)));
    }
    CHECK(read_examples_jsonl(ws.train_file("SC-3class")).size() == 56);
    CHECK(read_examples_jsonl(ws.test_file("SC-3class")).size() == 28);

    const std::string registry_bytes = read_file(ws.registry_file());
    const std::string train_bytes = read_file(ws.train_file("MAST-Hate"));
    run_gen_tasks(cfg);
    CHECK(read_file(ws.registry_file()) == registry_bytes);
    CHECK(read_file(ws.train_file("MAST-Hate")) == train_bytes);

    TempWorkspace other("evomerge-pipe-gen-b");
    run_gen_tasks(small_config(other.root, 43));
    const WorkspacePaths ws_b{other.root};
    CHECK(read_file(ws_b.train_file("MAST-Hate")) != train_bytes);
    CHECK(read_file(ws_b.registry_file()) == registry_bytes);  // metadata is seed-free
}

TEST_CASE("the six stages compose into a reproducible pipeline") {
    TempWorkspace tmp("evomerge-pipe-e2e");
    const PipelineConfig cfg = small_config(tmp.root);
    const WorkspacePaths ws{cfg.workspace};

    run_gen_tasks(cfg);
    run_train_experts(cfg);
    run_extract_weak(cfg);
    run_evolve(cfg);
    run_curriculum(cfg);
    run_report(cfg);

    const auto registry = read_registry_json(ws.registry_file());

    SUBCASE("training artifacts") {
        CHECK(fs::exists(ws.base_model_file()));
        for (const TaskMeta& meta : registry) {
            CHECK(fs::exists(ws.adapter_file(meta.task_id)));
            CHECK(fs::exists(ws.expert_file(meta.task_id)));
            const auto lines = read_lines(ws.loss_file(meta.task_id));
            REQUIRE(lines.size() >= 2);
            CHECK(lines[0] == "epoch,mean_loss,train_accuracy");
            const auto last = split_csv(lines.back());
            REQUIRE(last.size() == 3);
            CHECK(std::isfinite(std::stod(last[1])));
        }
        // Experts genuinely learn: spot-check a clean task and a many-class
        // task against the chance baseline on their train splits.
        for (const std::string task_id : {"SC-3class", "MAST-11class"}) {
            const Model expert =
                model_from_tensor_map(load_checkpoint(ws.expert_file(task_id)));
            const Codec codec = build_codec(registry);
            const auto train = read_examples_jsonl(ws.train_file(task_id));
            size_t correct = 0;
            for (const LabeledExample& ex : train) {
                correct += predict(expert, codec, encode_example(ex, codec)) == ex.gold;
            }
            const double acc =
                static_cast<double>(correct) / static_cast<double>(train.size());
            CHECK_MESSAGE(acc > 1.0 / codec.meta_for(task_id).label_set.size(), task_id);
        }
    }

    SUBCASE("weak artifacts") {
        const auto lines = read_lines(ws.weak_summary_file());
        REQUIRE(lines.size() == 16);
        CHECK(lines[0] == "task_id,weak_count,train_size,fallback");
        for (size_t i = 1; i < lines.size(); ++i) {
            const auto fields = split_csv(lines[i]);
            REQUIRE(fields.size() == 4);
            const size_t weak_count = static_cast<size_t>(std::stoul(fields[1]));
            CHECK(std::stoi(fields[2]) == 56);
            CHECK((fields[3] == "0" || fields[3] == "1"));
            CHECK(read_examples_jsonl(ws.weak_file(fields[0])).size() == weak_count);
        }
    }

    SUBCASE("merge artifacts") {
        for (const std::string group : {"SC", "ABSA", "MAST"}) {
            CHECK(fs::exists(ws.group_model_file(group)));
        }
        CHECK(fs::exists(ws.final_model_file()));

        const MergeRecipe final_recipe = read_merge_recipe(ws.recipe_file("final"));
        CHECK(final_recipe.stage == "final");
        REQUIRE(final_recipe.entries.size() == 3);
        double sum = 0.0;
        for (const auto& [model, weight] : final_recipe.entries) {
            CHECK(model.rfind("merged/", 0) == 0);
            sum += weight;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

        const MergeRecipe sc = read_merge_recipe(ws.recipe_file("SC"));
        CHECK(sc.entries.size() == 4);  // four SC tasks
        for (const auto& [model, weight] : sc.entries) {
            CHECK(model.rfind("experts/", 0) == 0);
        }

        const auto history = read_lines(ws.history_file());
        REQUIRE(history.size() == 41);  // header + 3 group stages + final, 10 rows each
        CHECK(history[0] == "stage,group,generation,best_fitness,mean_fitness,best_weights");
        std::map<std::string, double> last_best;
        for (size_t i = 1; i < history.size(); ++i) {
            const auto fields = split_csv(history[i]);
            REQUIRE(fields.size() == 6);
            const std::string key = fields[0] + "/" + fields[1];
            const double best = std::stod(fields[3]);
            if (last_best.count(key)) {
                CHECK(best >= last_best[key]);
            }
            last_best[key] = best;
        }
        CHECK(last_best.size() == 4);
    }

    SUBCASE("curriculum and report artifacts") {
        const auto plan_lines = read_lines(ws.plan_file());
        REQUIRE(plan_lines.size() == 16);
        CHECK(plan_lines[0] == "task_id,C,V,Z,S,score,rank,policy");
        CHECK(!read_file(ws.exemplars_file()).empty());

        const auto eval_lines = read_lines(ws.eval_side_by_side_file());
        REQUIRE(eval_lines.size() == 16);
        CHECK(eval_lines[0] == "task_id,metric,n,base,expert,merged");
        for (size_t i = 1; i < eval_lines.size(); ++i) {
            // Rows follow plan order.
            CHECK(split_csv(eval_lines[i])[0] == split_csv(plan_lines[i])[0]);
        }

        const auto cmp_lines = read_lines(ws.comparison_file());
        REQUIRE(cmp_lines.size() == 16);
        CHECK(cmp_lines[0] ==
              "task_id,metric,base,expert,merged,delta_vs_base,delta_vs_expert");
        for (size_t i = 1; i < cmp_lines.size(); ++i) {
            const auto f = split_csv(cmp_lines[i]);
            REQUIRE(f.size() == 7);
            CHECK(std::abs(std::stod(f[5]) - (std::stod(f[4]) - std::stod(f[2]))) < 1e-9);
            CHECK(std::abs(std::stod(f[6]) - (std::stod(f[4]) - std::stod(f[3]))) < 1e-9);
        }

        const auto summary_lines = read_lines(ws.summary_file());
        REQUIRE(summary_lines.size() >= 2);
        CHECK(summary_lines[0] == "tasks evaluated: 15");
        int wins = -1, total = -1;
        REQUIRE(std::sscanf(summary_lines[1].c_str(), "merged >= base: %d of %d", &wins,
                            &total) == 2);
        CHECK(total == 15);
        CHECK(wins >= 0);
        CHECK(wins <= 15);
    }

    SUBCASE("a full rerun reproduces every artifact byte-for-byte") {
        const std::string final_bytes = read_file(ws.final_model_file());
        const std::string eval_bytes = read_file(ws.eval_side_by_side_file());
        const std::string base_bytes = read_file(ws.base_model_file());
        const std::string history_bytes = read_file(ws.history_file());

        run_gen_tasks(cfg);
        run_train_experts(cfg);
        run_extract_weak(cfg);
        run_evolve(cfg);
        run_curriculum(cfg);
        run_report(cfg);

        CHECK(read_file(ws.base_model_file()) == base_bytes);
        CHECK(read_file(ws.final_model_file()) == final_bytes);
        CHECK(read_file(ws.history_file()) == history_bytes);
        CHECK(read_file(ws.eval_side_by_side_file()) == eval_bytes);
    }
}
