#include "evomerge/metrics.hpp"

#include "evomerge/errors.hpp"

#include <cstdio>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <unordered_map>

namespace evomerge {

namespace {

void check_lengths(const std::vector<std::string>& preds, const std::vector<std::string>& golds) {
    if (preds.size() != golds.size()) {
        throw DataError("preds and golds have different lengths");
    }
    if (preds.empty()) {
        throw DataError("empty prediction list");
    }
}

std::unordered_map<std::string, size_t> label_indices(const std::vector<std::string>& label_set) {
    std::unordered_map<std::string, size_t> index;
    for (size_t i = 0; i < label_set.size(); ++i) {
        index.emplace(label_set[i], i);
    }
    return index;
}

size_t index_of(const std::unordered_map<std::string, size_t>& index, const std::string& label) {
    auto it = index.find(label);
    if (it == index.end()) {
        throw DataError("label '" + label + "' not in label_set");
    }
    return it->second;
}

}  // namespace

std::string metric_to_string(MetricKind kind) {
    switch (kind) {
        case MetricKind::accuracy: return "accuracy";
        case MetricKind::macro_f1: return "macro_f1";
        case MetricKind::micro_f1: return "micro_f1";
    }
    throw DataError("unknown metric kind");
}

MetricKind metric_from_string(const std::string& name) {
    if (name == "accuracy") return MetricKind::accuracy;
    if (name == "macro_f1") return MetricKind::macro_f1;
    if (name == "micro_f1") return MetricKind::micro_f1;
    throw DataError("unknown metric '" + name + "'");
}

double accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& golds) {
    check_lengths(preds, golds);
    size_t correct = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == golds[i]) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double macro_f1(const std::vector<std::string>& preds, const std::vector<std::string>& golds,
                const std::vector<std::string>& label_set) {
    check_lengths(preds, golds);
    if (label_set.empty()) {
        throw DataError("empty label_set");
    }
    const auto index = label_indices(label_set);
    std::vector<long> tp(label_set.size(), 0), fp(label_set.size(), 0), fn(label_set.size(), 0);
    for (size_t i = 0; i < preds.size(); ++i) {
        const size_t p = index_of(index, preds[i]);
        const size_t g = index_of(index, golds[i]);
        if (p == g) {
            ++tp[p];
        } else {
            ++fp[p];
            ++fn[g];
        }
    }
    double sum = 0.0;
    for (size_t c = 0; c < label_set.size(); ++c) {
        const double precision = (tp[c] + fp[c] > 0)
                                     ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c])
                                     : 0.0;
        const double recall = (tp[c] + fn[c] > 0)
                                  ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fn[c])
                                  : 0.0;
        const double f1 =
            (precision + recall > 0.0) ? 2.0 * precision * recall / (precision + recall) : 0.0;
        sum += f1;
    }
    return sum / static_cast<double>(label_set.size());
}

double micro_f1(const std::vector<std::string>& preds, const std::vector<std::string>& golds,
                const std::vector<std::string>& label_set) {
    check_lengths(preds, golds);
    if (label_set.empty()) {
        throw DataError("empty label_set");
    }
    const auto index = label_indices(label_set);
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const size_t p = index_of(index, preds[i]);
        const size_t g = index_of(index, golds[i]);
        if (p == g) {
            ++tp;
        } else {
            ++fp;
            ++fn;
        }
    }
    // F1 straight from pooled counts: 2TP / (2TP + FP + FN). In the
    // single-label setting FP == FN, so this reduces to TP/n and matches
    // accuracy bit-for-bit; routing through P and R would round differently.
    const long denom = 2 * tp + fp + fn;
    return denom > 0 ? 2.0 * static_cast<double>(tp) / static_cast<double>(denom) : 0.0;
}

double delta_similarity(const std::string& pred, const std::string& gold) {
    return pred == gold ? 1.0 : 0.0;
}

namespace {

std::mutex& kernel_mutex() {
    static std::mutex m;
    return m;
}

std::unordered_map<std::string, DeltaKernel>& kernel_registry() {
    static std::unordered_map<std::string, DeltaKernel> registry = {
        {"exact", DeltaKernel(delta_similarity)},
    };
    return registry;
}

}  // namespace

void register_delta_kernel(const std::string& name, DeltaKernel kernel) {
    std::lock_guard<std::mutex> lock(kernel_mutex());
    kernel_registry()[name] = std::move(kernel);
}

DeltaKernel get_delta_kernel(const std::string& name) {
    std::lock_guard<std::mutex> lock(kernel_mutex());
    auto it = kernel_registry().find(name);
    if (it == kernel_registry().end()) {
        throw DataError("no delta kernel named '" + name + "'");
    }
    return it->second;
}

double evaluate_metric(MetricKind kind, const std::vector<std::string>& preds,
                       const std::vector<std::string>& golds,
                       const std::vector<std::string>& label_set) {
    switch (kind) {
        case MetricKind::accuracy: return accuracy(preds, golds);
        case MetricKind::macro_f1: return macro_f1(preds, golds, label_set);
        case MetricKind::micro_f1: return micro_f1(preds, golds, label_set);
    }
    throw DataError("unknown metric kind");
}

void write_eval_reports_csv(const std::vector<EvalReport>& reports,
                            const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot open '" + path.string() + "' for writing");
    }
    out << "task_id,metric,value,n\n";
    char buf[64];
    for (const EvalReport& r : reports) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.value);
        out << r.task_id << ',' << metric_to_string(r.metric) << ',' << buf << ',' << r.n << '\n';
    }
}

}  // namespace evomerge
