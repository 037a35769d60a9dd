#include "evomerge/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "evomerge/errors.hpp"
#include "evomerge/rng.hpp"

namespace evomerge {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr double kClusterNoiseSigma = 0.25;
constexpr double kFlipProb = 0.1;
constexpr int kQuantBound = 99;

// Aspect vocabulary for ABSA tasks; bank b uses entry b.
const std::vector<std::string>& aspect_lexicon() {
    static const std::vector<std::string> names = {
        "food", "service", "ambience", "price", "location", "staff", "quality", "value",
    };
    return names;
}

std::vector<std::string> polarity2() { return {"negative", "positive"}; }
std::vector<std::string> polarity3() { return {"negative", "neutral", "positive"}; }

TaskMeta make_meta(std::string id, TaskGroup group, int c, int v, int z, int s, MetricKind metric,
                   std::vector<std::string> labels) {
    TaskMeta meta;
    meta.task_id = std::move(id);
    meta.group = group;
    meta.num_classes = c;
    meta.diversity = v;
    meta.complexity = z;
    meta.subjectivity = s;
    meta.metric = metric;
    meta.label_set = std::move(labels);
    return meta;
}

void validate_meta(const TaskMeta& meta) {
    if (meta.task_id.empty()) {
        throw DataError("task_id is empty");
    }
    if (meta.num_classes > 0 &&
        meta.num_classes != static_cast<int>(meta.label_set.size())) {
        throw DataError("task '" + meta.task_id +
                                    "': label_set size does not match class count");
    }
    if (meta.subjectivity != 0 && meta.subjectivity != 1) {
        throw DataError("task '" + meta.task_id + "': subjectivity must be 0 or 1");
    }
}

}  // namespace

std::string group_to_string(TaskGroup group) {
    switch (group) {
        case TaskGroup::SC: return "SC";
        case TaskGroup::ABSA: return "ABSA";
        case TaskGroup::MAST: return "MAST";
    }
    throw DataError("unknown task group");
}

TaskGroup group_from_string(const std::string& name) {
    if (name == "SC") return TaskGroup::SC;
    if (name == "ABSA") return TaskGroup::ABSA;
    if (name == "MAST") return TaskGroup::MAST;
    throw DataError("unknown task group '" + name + "'");
}

std::vector<TaskMeta> default_registry() {
    std::vector<TaskMeta> registry;
    registry.reserve(15);

    registry.push_back(make_meta("SC-2class-sen", TaskGroup::SC, 2, 1, 1, 0,
                                 MetricKind::accuracy, polarity2()));
    registry.push_back(make_meta("SC-2class-doc", TaskGroup::SC, 2, 2, 1, 0,
                                 MetricKind::accuracy, polarity2()));
    registry.push_back(make_meta("SC-3class", TaskGroup::SC, 3, 1, 1, 0,
                                 MetricKind::accuracy, polarity3()));
    registry.push_back(make_meta("SC-5class", TaskGroup::SC, 5, 2, 1, 0, MetricKind::accuracy,
                                 {"very negative", "negative", "neutral", "positive",
                                  "very positive"}));

    registry.push_back(make_meta("ABSA-ATSA", TaskGroup::ABSA, 2, 1, 1, 0,
                                 MetricKind::accuracy, polarity2()));
    registry.push_back(make_meta("ABSA-ACSA", TaskGroup::ABSA, 3, 1, 1, 0,
                                 MetricKind::accuracy, polarity3()));
    registry.push_back(make_meta("ABSA-TSD", TaskGroup::ABSA, 2, 1, 2, 0,
                                 MetricKind::micro_f1, polarity2()));
    registry.push_back(make_meta("ABSA-ASD", TaskGroup::ABSA, 3, 1, 2, 0,
                                 MetricKind::micro_f1, polarity3()));
    registry.push_back(make_meta("ABSA-ASTE", TaskGroup::ABSA, 3, 1, 3, 0,
                                 MetricKind::micro_f1, polarity3()));
    registry.push_back(make_meta("ABSA-ASQP", TaskGroup::ABSA, 3, 1, 4, 0,
                                 MetricKind::micro_f1, polarity3()));

    registry.push_back(make_meta("MAST-11class", TaskGroup::MAST, 11, 1, 1, 1,
                                 MetricKind::accuracy,
                                 {"anger", "anticipation", "disgust", "fear", "joy", "love",
                                  "optimism", "pessimism", "sadness", "surprise", "trust"}));
    registry.push_back(make_meta(
        "MAST-28class", TaskGroup::MAST, 28, 1, 1, 1, MetricKind::accuracy,
        {"admiration",    "amusement",   "anger",       "annoyance",   "approval",
         "caring",        "confusion",   "curiosity",   "desire",      "disappointment",
         "disapproval",   "disgust",     "embarrassment", "excitement", "fear",
         "gratitude",     "grief",       "joy",         "love",        "nervousness",
         "optimism",      "pride",       "realization", "relief",      "remorse",
         "sadness",       "surprise",    "neutral"}));
    registry.push_back(make_meta("MAST-Hate", TaskGroup::MAST, 2, 1, 1, 1, MetricKind::macro_f1,
                                 {"non-hate", "hate"}));
    registry.push_back(make_meta("MAST-Offensive", TaskGroup::MAST, 2, 1, 1, 1,
                                 MetricKind::macro_f1, {"non-offensive", "offensive"}));
    registry.push_back(make_meta("MAST-Irony", TaskGroup::MAST, 2, 1, 1, 1, MetricKind::macro_f1,
                                 {"non-irony", "irony"}));
    return registry;
}

std::string task_instruction(const TaskMeta& meta) {
    static const std::map<std::string, std::string> table = {
        {"SC-2class-sen",
         "Classify the overall sentiment of the sentence as negative or positive."},
        {"SC-2class-doc",
         "Classify the overall sentiment of the document as negative or positive."},
        {"SC-3class", "Classify the sentiment of the text as negative, neutral, or positive."},
        {"SC-5class",
         "Rate the sentiment of the text on a five-point scale from very negative to very "
         "positive."},
        {"ABSA-ATSA",
         "Classify the sentiment expressed toward the given aspect term as negative or "
         "positive."},
        {"ABSA-ACSA",
         "Classify the sentiment expressed toward the given aspect category as negative, "
         "neutral, or positive."},
        {"ABSA-TSD", "Detect the sentiment toward the given target as negative or positive."},
        {"ABSA-ASD",
         "Detect the sentiment for the given aspect as negative, neutral, or positive."},
        {"ABSA-ASTE",
         "Extract the sentiment of the opinion about the given aspect as negative, neutral, or "
         "positive."},
        {"ABSA-ASQP",
         "Predict the sentiment polarity of the given aspect quadruple as negative, neutral, "
         "or positive."},
        {"MAST-11class", "Identify which of the eleven emotion labels best matches the text."},
        {"MAST-28class",
         "Identify which of the twenty-eight emotion labels best matches the text."},
        {"MAST-Hate", "Decide whether the text contains hate speech."},
        {"MAST-Offensive", "Decide whether the text is offensive."},
        {"MAST-Irony", "Decide whether the text is ironic."},
    };
    auto it = table.find(meta.task_id);
    if (it != table.end()) {
        return it->second;
    }
    std::string fallback = "Task " + meta.task_id + ": classify the input into one of:";
    for (size_t i = 0; i < meta.label_set.size(); ++i) {
        fallback += (i == 0 ? " " : ", ") + meta.label_set[i];
    }
    fallback += ".";
    return fallback;
}

const TaskDataset& TaskSuite::by_id(const std::string& task_id) const {
    for (const TaskDataset& ds : tasks) {
        if (ds.task_id == task_id) {
            return ds;
        }
    }
    throw DataError("no dataset for task '" + task_id + "'");
}

bool TaskSuite::has(const std::string& task_id) const {
    return std::any_of(tasks.begin(), tasks.end(),
                       [&](const TaskDataset& ds) { return ds.task_id == task_id; });
}

namespace {

struct ClusterModel {
    int banks = 1;
    int classes = 0;
    int variants = 1;
    // centers[(bank * classes + cls) * variants + variant] in feature space
    std::vector<std::vector<double>> centers;
    // nearest_other[bank][cls]: class whose clusters lie closest to cls's
    std::vector<std::vector<int>> nearest_other;

    const std::vector<double>& center(int bank, int cls, int variant) const {
        return centers[(static_cast<size_t>(bank) * classes + cls) * variants + variant];
    }
};

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double sum = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        sum += d * d;
    }
    return sum;
}

ClusterModel build_clusters(const TaskMeta& meta, RngStream& stream) {
    ClusterModel model;
    model.classes = meta.num_classes;
    model.variants = std::max(1, meta.diversity);
    model.banks = meta.group == TaskGroup::ABSA ? std::max(1, meta.complexity) : 1;
    if (model.banks > static_cast<int>(aspect_lexicon().size())) {
        throw DataError("task '" + meta.task_id +
                                    "': complexity exceeds the aspect lexicon size");
    }

    model.centers.reserve(static_cast<size_t>(model.banks) * model.classes * model.variants);
    for (int b = 0; b < model.banks; ++b) {
        for (int c = 0; c < model.classes; ++c) {
            for (int v = 0; v < model.variants; ++v) {
                std::vector<double> center(kFeatureTokens);
                for (double& x : center) {
                    x = stream.uniform(-1.0, 1.0);
                }
                model.centers.push_back(std::move(center));
            }
        }
    }

    model.nearest_other.assign(model.banks, std::vector<int>(model.classes, 0));
    for (int b = 0; b < model.banks; ++b) {
        for (int c = 0; c < model.classes; ++c) {
            double best = std::numeric_limits<double>::infinity();
            int best_class = c;
            for (int other = 0; other < model.classes; ++other) {
                if (other == c) {
                    continue;
                }
                for (int v = 0; v < model.variants; ++v) {
                    for (int w = 0; w < model.variants; ++w) {
                        const double d =
                            squared_distance(model.center(b, c, v), model.center(b, other, w));
                        if (d < best) {
                            best = d;
                            best_class = other;
                        }
                    }
                }
            }
            model.nearest_other[b][c] = best_class;
        }
    }
    return model;
}

std::vector<int> balanced_class_sequence(int n, int classes, RngStream& stream) {
    std::vector<int> seq;
    seq.reserve(static_cast<size_t>(n));
    const int base = n / classes;
    const int rem = n % classes;
    for (int c = 0; c < classes; ++c) {
        const int count = base + (c < rem ? 1 : 0);
        seq.insert(seq.end(), static_cast<size_t>(count), c);
    }
    stream.shuffle(seq);
    return seq;
}

std::string quantize_features(const std::vector<double>& features) {
    std::string text;
    for (size_t i = 0; i < features.size(); ++i) {
        int q = static_cast<int>(std::lround(features[i] * kQuantScale));
        q = std::clamp(q, -kQuantBound, kQuantBound);
        if (i > 0) {
            text += ' ';
        }
        text += std::to_string(q);
    }
    return text;
}

std::vector<LabeledExample> generate_split(const TaskMeta& meta, const ClusterModel& model,
                                           const std::string& instruction, int n,
                                           RngStream& stream, int& flips) {
    std::vector<LabeledExample> split;
    split.reserve(static_cast<size_t>(n));
    const std::vector<int> class_seq = balanced_class_sequence(n, meta.num_classes, stream);
    for (int i = 0; i < n; ++i) {
        const int cls = class_seq[static_cast<size_t>(i)];
        const int bank = model.banks > 1 ? static_cast<int>(stream.below(model.banks)) : 0;
        const int variant =
            model.variants > 1 ? static_cast<int>(stream.below(model.variants)) : 0;

        const std::vector<double>& center = model.center(bank, cls, variant);
        std::vector<double> features(kFeatureTokens);
        for (int d = 0; d < kFeatureTokens; ++d) {
            features[d] = center[d] + stream.gaussian() * kClusterNoiseSigma;
        }

        int gold_class = cls;
        if (meta.subjectivity == 1 && meta.num_classes >= 2) {
            if (stream.uniform() < kFlipProb) {
                gold_class = model.nearest_other[bank][cls];
                ++flips;
            }
        }

        LabeledExample ex;
        ex.task_id = meta.task_id;
        ex.instruction = instruction;
        ex.input_text = quantize_features(features);
        if (meta.group == TaskGroup::ABSA) {
            ex.aspect = aspect_lexicon()[static_cast<size_t>(bank)];
        }
        ex.gold = meta.label_set[static_cast<size_t>(gold_class)];
        split.push_back(std::move(ex));
    }
    return split;
}

}  // namespace

TaskSuite generate_task_suite(const std::vector<TaskMeta>& registry, const SuiteSizes& sizes,
                              uint64_t seed) {
    TaskSuite suite;
    suite.tasks.reserve(registry.size());
    for (const TaskMeta& meta : registry) {
        validate_meta(meta);
        const SizeSpec size = sizes.resolve(meta.task_id);
        if (size.train <= 0 || size.test <= 0) {
            throw DataError("task '" + meta.task_id + "': sizes must be positive");
        }
        if (size.train < meta.num_classes || size.test < meta.num_classes) {
            throw DataError("task '" + meta.task_id +
                                        "': split size too small to cover all classes");
        }

        RngStream stream = derive_stream(seed, "gen-" + meta.task_id);
        const ClusterModel model = build_clusters(meta, stream);
        const std::string instruction = task_instruction(meta);

        TaskDataset ds;
        ds.task_id = meta.task_id;
        ds.train = generate_split(meta, model, instruction, size.train, stream,
                                  ds.stats.train_label_flips);
        ds.test = generate_split(meta, model, instruction, size.test, stream,
                                 ds.stats.test_label_flips);
        suite.tasks.push_back(std::move(ds));
    }
    return suite;
}

std::string build_prompt(const std::string& instruction, const std::string& input_text,
                         const std::optional<std::string>& aspect,
                         const std::optional<std::string>& exemplar_block) {
    if (instruction.empty()) {
        throw DataError("prompt instruction is empty");
    }
    if (input_text.empty()) {
        throw DataError("prompt input text is empty");
    }
    std::string prompt;
    if (exemplar_block) {
        prompt += *exemplar_block;
        prompt += "\n\n";
    }
    prompt += "### Instruction:\n";
    prompt += instruction;
    prompt += '\n';
    if (aspect) {
        prompt += "### Aspect:\n";
        prompt += *aspect;
        prompt += '\n';
    }
    prompt += "### Input:\n";
    prompt += input_text;
    prompt += "\n### Response:\n";
    return prompt;
}

void write_examples_jsonl(const std::vector<LabeledExample>& examples,
                          const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot open '" + path.string() + "' for writing");
    }
    for (const LabeledExample& ex : examples) {
        ordered_json line;
        line["task_id"] = ex.task_id;
        line["instruction"] = ex.instruction;
        line["input"] = ex.input_text;
        line["aspect"] = ex.aspect ? ordered_json(*ex.aspect) : ordered_json(nullptr);
        line["output"] = ex.gold;
        out << line.dump() << '\n';
    }
}

std::vector<LabeledExample> read_examples_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open '" + path.string() + "' for reading");
    }
    std::vector<LabeledExample> examples;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        ordered_json parsed;
        try {
            parsed = ordered_json::parse(line);
            LabeledExample ex;
            ex.task_id = parsed.at("task_id").get<std::string>();
            ex.instruction = parsed.at("instruction").get<std::string>();
            ex.input_text = parsed.at("input").get<std::string>();
            if (!parsed.at("aspect").is_null()) {
                ex.aspect = parsed.at("aspect").get<std::string>();
            }
            ex.gold = parsed.at("output").get<std::string>();
            examples.push_back(std::move(ex));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                                     ": bad example line: " + e.what());
        }
    }
    return examples;
}

void write_registry_json(const std::vector<TaskMeta>& registry,
                         const std::filesystem::path& path) {
    ordered_json doc = ordered_json::array();
    for (const TaskMeta& meta : registry) {
        ordered_json entry;
        entry["task_id"] = meta.task_id;
        entry["group"] = group_to_string(meta.group);
        entry["C"] = meta.num_classes;
        entry["V"] = meta.diversity;
        entry["Z"] = meta.complexity;
        entry["S"] = meta.subjectivity;
        entry["metric"] = metric_to_string(meta.metric);
        entry["label_set"] = meta.label_set;
        doc.push_back(std::move(entry));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot open '" + path.string() + "' for writing");
    }
    out << doc.dump(2) << '\n';
}

std::vector<TaskMeta> read_registry_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open '" + path.string() + "' for reading");
    }
    ordered_json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": bad registry JSON: " + std::string(e.what()));
    }
    std::vector<TaskMeta> registry;
    for (const auto& entry : doc) {
        TaskMeta meta;
        meta.task_id = entry.at("task_id").get<std::string>();
        meta.group = group_from_string(entry.at("group").get<std::string>());
        meta.num_classes = entry.at("C").get<int>();
        meta.diversity = entry.at("V").get<int>();
        meta.complexity = entry.at("Z").get<int>();
        meta.subjectivity = entry.at("S").get<int>();
        meta.metric = metric_from_string(entry.at("metric").get<std::string>());
        meta.label_set = entry.at("label_set").get<std::vector<std::string>>();
        validate_meta(meta);
        registry.push_back(std::move(meta));
    }
    return registry;
}

}  // namespace evomerge
