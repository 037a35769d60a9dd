// The expert model: a small MLP classifier over encoded prompts, low-rank
// adapters trained on top of a frozen base, and weak-example extraction.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "evomerge/checkpoint.hpp"
#include "evomerge/tasks.hpp"

namespace evomerge {

struct ModelArch {
    int input_dim = 32;
    int hidden_dim = 64;
    int output_dim = 0;  // size of the global label vocabulary
};

// Global label vocabulary shared by all tasks, plus per-task views into it.
// Labels are indexed in first-appearance order over the registry.
struct Codec {
    std::vector<std::string> vocab;
    std::unordered_map<std::string, int> label_to_index;
    std::map<std::string, std::vector<int>> task_labels;     // task_id -> vocab indices
    std::map<std::string, TaskMeta> task_meta;               // task_id -> meta
    std::map<std::string, std::string> instruction_to_task;  // exact instruction -> task_id

    int index_of(const std::string& label) const;
    const std::vector<int>& labels_for(const std::string& task_id) const;
    const TaskMeta& meta_for(const std::string& task_id) const;
};

Codec build_codec(const std::vector<TaskMeta>& registry);

struct EncodedExample {
    std::string task_id;
    std::vector<float> features;  // length == ModelArch::input_dim
    int gold_index = -1;          // global vocab index
};

// Feature layout (32 dims): quantized tokens / 10 in [0,16); instruction hash
// one-hot in [16,21); aspect hash one-hot in [21,29); group one-hot in [29,32).
std::vector<float> encode_features(const std::string& instruction, const std::string& input_text,
                                   const std::optional<std::string>& aspect, TaskGroup group);
EncodedExample encode_example(const LabeledExample& ex, const Codec& codec);
std::vector<EncodedExample> encode_batch(const std::vector<LabeledExample>& examples,
                                         const Codec& codec);

// softmax(W2 * tanh(W1 * x + b1) + b2); weights row-major.
struct Model {
    ModelArch arch;
    std::vector<float> w1;  // hidden x input
    std::vector<float> b1;  // hidden
    std::vector<float> w2;  // output x hidden
    std::vector<float> b2;  // output
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
Model init_base(const ModelArch& arch, uint64_t seed);

TensorMap model_to_tensor_map(const Model& model);
Model model_from_tensor_map(const TensorMap& tensors);

// Low-rank delta for one weight matrix: delta W = (alpha / rank) * B * A.
struct LoraFactors {
    std::vector<float> a;  // rank x in_dim
    std::vector<float> b;  // out_dim x rank, zero at init
};

struct LoraAdapter {
    int rank = 4;
    float alpha = 16.0f;
    float dropout_rate = 0.05f;  // training-time only; not serialized
    LoraFactors w1;              // adapts Model::w1
    LoraFactors w2;              // adapts Model::w2
};

// A ~ N(0, 1/fan_in), B = 0, so the initial adapter is an exact no-op.
LoraAdapter init_adapter(const ModelArch& arch, int rank, float alpha, uint64_t seed);

TensorMap adapter_to_tensor_map(const LoraAdapter& adapter, const ModelArch& arch);
LoraAdapter adapter_from_tensor_map(const TensorMap& tensors, const ModelArch& arch);

// Collapses base + scaled low-rank deltas into a plain model.
Model effective_weights(const Model& base, const LoraAdapter& adapter);

// Class probabilities for one encoded input (softmax with max subtraction;
// internal math in double).
std::vector<double> forward(const Model& model, const std::vector<float>& features);

// -log p[gold] with probabilities floored at 1e-12.
double cross_entropy(const std::vector<double>& probs, int gold_index);

// Argmax over the task's label subset; ties resolve to the earliest label in
// the task's label_set.
std::string predict(const Model& model, const Codec& codec, const EncodedExample& ex);
std::string predict(const Model& model, const Codec& codec, const LabeledExample& ex);

struct TrainConfig {
    int batch_size = 64;        // micro-batches accumulate up to this
    int micro_batch_size = 4;   // must divide batch_size
    double learning_rate = 3e-4;
    int max_epochs = 10;
    double weight_decay = 0.1;  // decoupled, adapter parameters only
    int lora_r = 4;
    float lora_alpha = 16.0f;
    double lora_dropout = 0.05;
    int early_stop_patience = 2;  // epochs without >= 1e-4 train-loss improvement
    uint64_t seed = 0;
};

struct TrainStats {
    int epochs_run = 0;
    std::vector<double> epoch_losses;      // mean train loss per epoch
    std::vector<double> epoch_accuracies;  // train accuracy after each epoch
    bool early_stopped = false;
};

struct TrainedExpert {
    LoraAdapter adapter;
    TrainStats stats;
};

// Gradient descent on the adapter only (the base stays frozen), with
// micro-batch gradient accumulation, decoupled weight decay, dropout on the
// adapter branch, and train-loss early stopping. Bitwise deterministic for a
// fixed (base, data, config). Throws NumericError naming the epoch if the
// loss or parameters go non-finite.
TrainedExpert train_expert(const Model& base, const std::vector<LabeledExample>& train,
                           const Codec& codec, const TrainConfig& config);

// Mean cross-entropy of base+adapter over a batch, without dropout. Backs the
// finite-difference gradient check.
double adapter_loss(const Model& base, const LoraAdapter& adapter,
                    const std::vector<EncodedExample>& batch);

// Analytic d(mean loss)/d(adapter params), same shapes as the adapter.
LoraAdapter adapter_gradients(const Model& base, const LoraAdapter& adapter,
                              const std::vector<EncodedExample>& batch);

// Exactly the training items the expert misclassifies, in dataset order.
// An empty result is legal.
WeakSet extract_weak_data(const Model& expert, const Codec& codec, const std::string& task_id,
                          const std::vector<LabeledExample>& train);

// If weak.items is empty, substitutes the last min(100, n) training items and
// marks the set is_fallback; otherwise returns weak unchanged. Merge-weight
// fitness is a mean over weak items, so an empty set must not reach it.
WeakSet apply_weak_fallback(WeakSet weak, const std::vector<LabeledExample>& train);

}  // namespace evomerge
