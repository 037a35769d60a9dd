// Evaluation metrics (accuracy, macro-F1, micro-F1) and the prediction/label
// similarity kernel used by merge-weight fitness.
#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace evomerge {

enum class MetricKind { accuracy, macro_f1, micro_f1 };

std::string metric_to_string(MetricKind kind);
MetricKind metric_from_string(const std::string& name);

struct EvalReport {
    std::string task_id;
    MetricKind metric = MetricKind::accuracy;
    double value = 0.0;  // in [0, 1]
    int n = 0;           // sample count
};

double accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& golds);

// Unweighted mean of per-class F1 over label_set. A class with no predicted
// and no gold instances contributes F1 = 0; precision or recall with a zero
// denominator is 0.
double macro_f1(const std::vector<std::string>& preds, const std::vector<std::string>& golds,
                const std::vector<std::string>& label_set);

// F1 from globally pooled TP/FP/FN counts. Equals accuracy in the
// single-label setting.
double micro_f1(const std::vector<std::string>& preds, const std::vector<std::string>& golds,
                const std::vector<std::string>& label_set);

// Similarity kernel between a prediction and a gold label, in [0, 1].
using DeltaKernel = std::function<double(const std::string&, const std::string&)>;

// Default kernel: exact match.
double delta_similarity(const std::string& pred, const std::string& gold);

// Kernel registry; "exact" is pre-registered.
void register_delta_kernel(const std::string& name, DeltaKernel kernel);
DeltaKernel get_delta_kernel(const std::string& name);

double evaluate_metric(MetricKind kind, const std::vector<std::string>& preds,
                       const std::vector<std::string>& golds,
                       const std::vector<std::string>& label_set);

void write_eval_reports_csv(const std::vector<EvalReport>& reports,
                            const std::filesystem::path& path);

}  // namespace evomerge
