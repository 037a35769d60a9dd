#include "evomerge/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include "evomerge/errors.hpp"
#include "evomerge/rng.hpp"

namespace evomerge {

namespace {

// Encoded feature layout.
constexpr int kTokenOffset = 0;
constexpr int kInstructionOffset = kTokenOffset + kFeatureTokens;
constexpr int kInstructionBuckets = 5;
constexpr int kAspectOffset = kInstructionOffset + kInstructionBuckets;
constexpr int kAspectBuckets = 8;
constexpr int kGroupOffset = kAspectOffset + kAspectBuckets;
constexpr int kGroupSlots = 3;
static_assert(kGroupOffset + kGroupSlots == 32, "feature layout must fill the input vector");

constexpr double kProbFloor = 1e-12;

int group_slot(TaskGroup group) {
    switch (group) {
        case TaskGroup::SC: return 0;
        case TaskGroup::ABSA: return 1;
        case TaskGroup::MAST: return 2;
    }
    throw DataError("unknown task group value");
}

void check_arch(const ModelArch& arch) {
    if (arch.input_dim <= 0 || arch.hidden_dim <= 0 || arch.output_dim <= 0) {
        throw DataError("model dimensions must be positive");
    }
}

void check_model_shapes(const Model& model) {
    check_arch(model.arch);
    const auto expect = [&](const std::vector<float>& v, size_t n, const char* what) {
        if (v.size() != n) {
            throw DataError(std::string("model tensor '") + what + "' has wrong size");
        }
    };
    const size_t in = static_cast<size_t>(model.arch.input_dim);
    const size_t hid = static_cast<size_t>(model.arch.hidden_dim);
    const size_t out = static_cast<size_t>(model.arch.output_dim);
    expect(model.w1, hid * in, "w1");
    expect(model.b1, hid, "b1");
    expect(model.w2, out * hid, "w2");
    expect(model.b2, out, "b2");
}

void check_adapter_shapes(const LoraAdapter& adapter, const ModelArch& arch) {
    if (adapter.rank <= 0) {
        throw DataError("adapter rank must be positive");
    }
    if (!(adapter.alpha > 0.0f)) {
        throw DataError("adapter alpha must be positive");
    }
    const size_t r = static_cast<size_t>(adapter.rank);
    if (adapter.w1.a.size() != r * static_cast<size_t>(arch.input_dim) ||
        adapter.w1.b.size() != static_cast<size_t>(arch.hidden_dim) * r ||
        adapter.w2.a.size() != r * static_cast<size_t>(arch.hidden_dim) ||
        adapter.w2.b.size() != static_cast<size_t>(arch.output_dim) * r) {
        throw DataError("adapter factor shapes do not match the model architecture");
    }
}

std::vector<int64_t> tensor_shape(const TensorMap& tensors, const std::string& name) {
    if (!tensors.has(name)) {
        throw DataError("checkpoint is missing tensor '" + name + "'");
    }
    return tensors.at(name).shape;
}

// Accumulated adapter gradients, double precision.
struct GradBuf {
    std::vector<double> a1, b1, a2, b2;

    explicit GradBuf(const LoraAdapter& adapter)
        : a1(adapter.w1.a.size(), 0.0),
          b1(adapter.w1.b.size(), 0.0),
          a2(adapter.w2.a.size(), 0.0),
          b2(adapter.w2.b.size(), 0.0) {}
};

// One forward (and optionally backward) pass of base + adapter. mask1/mask2
// carry inverted-scaled dropout factors for the adapter branch; null means
// no dropout. Gradients, when requested, are summed into grads.
double example_pass(const Model& base, const LoraAdapter& adapter, const EncodedExample& ex,
                    const std::vector<double>* mask1, const std::vector<double>* mask2,
                    GradBuf* grads) {
    const int in = base.arch.input_dim;
    const int hid = base.arch.hidden_dim;
    const int out = base.arch.output_dim;
    const int r = adapter.rank;
    const double scale = static_cast<double>(adapter.alpha) / r;

    if (static_cast<int>(ex.features.size()) != in) {
        throw DataError("encoded feature vector does not match the model input size");
    }
    if (ex.gold_index < 0 || ex.gold_index >= out) {
        throw DataError("gold label index out of vocabulary range");
    }

    std::vector<double> x(in), xd(in);
    for (int i = 0; i < in; ++i) {
        x[i] = ex.features[static_cast<size_t>(i)];
        xd[i] = mask1 ? x[i] * (*mask1)[static_cast<size_t>(i)] : x[i];
    }

    std::vector<double> u1(r, 0.0);
    for (int k = 0; k < r; ++k) {
        double sum = 0.0;
        const size_t row = static_cast<size_t>(k) * in;
        for (int i = 0; i < in; ++i) {
            sum += adapter.w1.a[row + i] * xd[i];
        }
        u1[k] = sum;
    }

    std::vector<double> h(hid), h_pre(hid);
    for (int j = 0; j < hid; ++j) {
        double sum = base.b1[static_cast<size_t>(j)];
        const size_t row = static_cast<size_t>(j) * in;
        for (int i = 0; i < in; ++i) {
            sum += base.w1[row + i] * x[i];
        }
        const size_t brow = static_cast<size_t>(j) * r;
        for (int k = 0; k < r; ++k) {
            sum += scale * adapter.w1.b[brow + k] * u1[k];
        }
        h_pre[j] = sum;
        h[j] = std::tanh(sum);
    }

    std::vector<double> hd(hid);
    for (int j = 0; j < hid; ++j) {
        hd[j] = mask2 ? h[j] * (*mask2)[static_cast<size_t>(j)] : h[j];
    }

    std::vector<double> u2(r, 0.0);
    for (int k = 0; k < r; ++k) {
        double sum = 0.0;
        const size_t row = static_cast<size_t>(k) * hid;
        for (int j = 0; j < hid; ++j) {
            sum += adapter.w2.a[row + j] * hd[j];
        }
        u2[k] = sum;
    }

    std::vector<double> logits(out);
    for (int c = 0; c < out; ++c) {
        double sum = base.b2[static_cast<size_t>(c)];
        const size_t row = static_cast<size_t>(c) * hid;
        for (int j = 0; j < hid; ++j) {
            sum += base.w2[row + j] * h[j];
        }
        const size_t brow = static_cast<size_t>(c) * r;
        for (int k = 0; k < r; ++k) {
            sum += scale * adapter.w2.b[brow + k] * u2[k];
        }
        logits[c] = sum;
    }

    const double max_logit = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    std::vector<double> p(out);
    for (int c = 0; c < out; ++c) {
        p[c] = std::exp(logits[c] - max_logit);
        z += p[c];
    }
    for (int c = 0; c < out; ++c) {
        p[c] /= z;
    }
    const double loss = -std::log(std::max(p[static_cast<size_t>(ex.gold_index)], kProbFloor));

    if (grads == nullptr) {
        return loss;
    }

    std::vector<double> dlogits(p);
    dlogits[static_cast<size_t>(ex.gold_index)] -= 1.0;

    std::vector<double> du2(r, 0.0);
    for (int c = 0; c < out; ++c) {
        const size_t brow = static_cast<size_t>(c) * r;
        for (int k = 0; k < r; ++k) {
            grads->b2[brow + k] += scale * dlogits[static_cast<size_t>(c)] * u2[k];
            du2[k] += scale * adapter.w2.b[brow + k] * dlogits[static_cast<size_t>(c)];
        }
    }
    for (int k = 0; k < r; ++k) {
        const size_t row = static_cast<size_t>(k) * hid;
        for (int j = 0; j < hid; ++j) {
            grads->a2[row + j] += du2[k] * hd[j];
        }
    }

    std::vector<double> dh(hid, 0.0);
    for (int c = 0; c < out; ++c) {
        const size_t row = static_cast<size_t>(c) * hid;
        const double dl = dlogits[static_cast<size_t>(c)];
        for (int j = 0; j < hid; ++j) {
            dh[j] += base.w2[row + j] * dl;
        }
    }
    for (int k = 0; k < r; ++k) {
        const size_t row = static_cast<size_t>(k) * hid;
        for (int j = 0; j < hid; ++j) {
            const double m = mask2 ? (*mask2)[static_cast<size_t>(j)] : 1.0;
            dh[j] += m * adapter.w2.a[row + j] * du2[k];
        }
    }

    std::vector<double> dh_pre(hid);
    for (int j = 0; j < hid; ++j) {
        dh_pre[j] = dh[j] * (1.0 - h[j] * h[j]);
    }

    std::vector<double> du1(r, 0.0);
    for (int j = 0; j < hid; ++j) {
        const size_t brow = static_cast<size_t>(j) * r;
        for (int k = 0; k < r; ++k) {
            grads->b1[brow + k] += scale * dh_pre[j] * u1[k];
            du1[k] += scale * adapter.w1.b[brow + k] * dh_pre[j];
        }
    }
    for (int k = 0; k < r; ++k) {
        const size_t row = static_cast<size_t>(k) * in;
        for (int i = 0; i < in; ++i) {
            grads->a1[row + i] += du1[k] * xd[i];
        }
    }
    return loss;
}

bool all_finite(const std::vector<float>& values) {
    return std::all_of(values.begin(), values.end(),
                       [](float v) { return std::isfinite(v); });
}

void apply_update(std::vector<float>& params, const std::vector<double>& grad_sum,
                  double inv_batch, double lr, double weight_decay) {
    for (size_t i = 0; i < params.size(); ++i) {
        double p = params[i];
        p -= lr * grad_sum[i] * inv_batch;
        p -= lr * weight_decay * p;
        params[i] = static_cast<float>(p);
    }
}

}  // namespace

int Codec::index_of(const std::string& label) const {
    auto it = label_to_index.find(label);
    if (it == label_to_index.end()) {
        throw DataError("label '" + label + "' is not in the vocabulary");
    }
    return it->second;
}

const std::vector<int>& Codec::labels_for(const std::string& task_id) const {
    auto it = task_labels.find(task_id);
    if (it == task_labels.end()) {
        throw DataError("task '" + task_id + "' is not in the codec");
    }
    return it->second;
}

const TaskMeta& Codec::meta_for(const std::string& task_id) const {
    auto it = task_meta.find(task_id);
    if (it == task_meta.end()) {
        throw DataError("task '" + task_id + "' is not in the codec");
    }
    return it->second;
}

Codec build_codec(const std::vector<TaskMeta>& registry) {
    if (registry.empty()) {
        throw DataError("cannot build a codec from an empty registry");
    }
    Codec codec;
    for (const TaskMeta& meta : registry) {
        if (codec.task_meta.count(meta.task_id) > 0) {
            throw DataError("duplicate task id '" + meta.task_id + "' in registry");
        }
        std::vector<int> indices;
        indices.reserve(meta.label_set.size());
        for (const std::string& label : meta.label_set) {
            auto it = codec.label_to_index.find(label);
            if (it == codec.label_to_index.end()) {
                const int idx = static_cast<int>(codec.vocab.size());
                codec.vocab.push_back(label);
                it = codec.label_to_index.emplace(label, idx).first;
            }
            indices.push_back(it->second);
        }
        const std::string instruction = task_instruction(meta);
        auto [pos, inserted] = codec.instruction_to_task.emplace(instruction, meta.task_id);
        if (!inserted) {
            throw DataError("tasks '" + pos->second + "' and '" + meta.task_id +
                            "' share an instruction; instructions must be unique");
        }
        codec.task_labels.emplace(meta.task_id, std::move(indices));
        codec.task_meta.emplace(meta.task_id, meta);
    }
    return codec;
}

std::vector<float> encode_features(const std::string& instruction, const std::string& input_text,
                                   const std::optional<std::string>& aspect, TaskGroup group) {
    std::vector<float> features(32, 0.0f);

    std::istringstream tokens(input_text);
    std::string token;
    int count = 0;
    while (tokens >> token) {
        if (count >= kFeatureTokens) {
            throw DataError("input text has more than " + std::to_string(kFeatureTokens) +
                            " tokens");
        }
        try {
            size_t used = 0;
            const int value = std::stoi(token, &used);
            if (used != token.size()) {
                throw std::invalid_argument(token);
            }
            features[static_cast<size_t>(kTokenOffset + count)] =
                static_cast<float>(value) / kQuantScale;
        } catch (const std::exception&) {
            throw DataError("input token '" + token + "' is not an integer");
        }
        ++count;
    }
    if (count != kFeatureTokens) {
        throw DataError("input text has " + std::to_string(count) + " tokens, expected " +
                        std::to_string(kFeatureTokens));
    }

    const size_t instr_slot = fnv1a64(instruction) % kInstructionBuckets;
    features[kInstructionOffset + instr_slot] = 1.0f;
    if (aspect) {
        const size_t aspect_slot = fnv1a64(*aspect) % kAspectBuckets;
        features[kAspectOffset + aspect_slot] = 1.0f;
    }
    features[static_cast<size_t>(kGroupOffset + group_slot(group))] = 1.0f;
    return features;
}

EncodedExample encode_example(const LabeledExample& ex, const Codec& codec) {
    const TaskMeta& meta = codec.meta_for(ex.task_id);
    EncodedExample encoded;
    encoded.task_id = ex.task_id;
    encoded.features = encode_features(ex.instruction, ex.input_text, ex.aspect, meta.group);
    encoded.gold_index = codec.index_of(ex.gold);
    return encoded;
}

std::vector<EncodedExample> encode_batch(const std::vector<LabeledExample>& examples,
                                         const Codec& codec) {
    std::vector<EncodedExample> encoded;
    encoded.reserve(examples.size());
    for (const LabeledExample& ex : examples) {
        encoded.push_back(encode_example(ex, codec));
    }
    return encoded;
}

Model init_base(const ModelArch& arch, uint64_t seed) {
    check_arch(arch);
    Model model;
    model.arch = arch;
    RngStream stream = derive_stream(seed, "base-init");

    const double bound1 = 1.0 / std::sqrt(static_cast<double>(arch.input_dim));
    model.w1.resize(static_cast<size_t>(arch.hidden_dim) * arch.input_dim);
    for (float& w : model.w1) {
        w = static_cast<float>(stream.uniform(-bound1, bound1));
    }
    model.b1.assign(static_cast<size_t>(arch.hidden_dim), 0.0f);

    const double bound2 = 1.0 / std::sqrt(static_cast<double>(arch.hidden_dim));
    model.w2.resize(static_cast<size_t>(arch.output_dim) * arch.hidden_dim);
    for (float& w : model.w2) {
        w = static_cast<float>(stream.uniform(-bound2, bound2));
    }
    model.b2.assign(static_cast<size_t>(arch.output_dim), 0.0f);
    return model;
}

TensorMap model_to_tensor_map(const Model& model) {
    check_model_shapes(model);
    TensorMap tensors;
    tensors.add("W1", {model.arch.hidden_dim, model.arch.input_dim}, model.w1);
    tensors.add("b1", {model.arch.hidden_dim}, model.b1);
    tensors.add("W2", {model.arch.output_dim, model.arch.hidden_dim}, model.w2);
    tensors.add("b2", {model.arch.output_dim}, model.b2);
    return tensors;
}

Model model_from_tensor_map(const TensorMap& tensors) {
    const auto w1_shape = tensor_shape(tensors, "W1");
    const auto w2_shape = tensor_shape(tensors, "W2");
    if (w1_shape.size() != 2 || w2_shape.size() != 2) {
        throw DataError("weight tensors must be two-dimensional");
    }

    Model model;
    model.arch.hidden_dim = static_cast<int>(w1_shape[0]);
    model.arch.input_dim = static_cast<int>(w1_shape[1]);
    model.arch.output_dim = static_cast<int>(w2_shape[0]);
    if (w2_shape[1] != w1_shape[0]) {
        throw DataError("W2 input size does not match W1 output size");
    }
    if (tensor_shape(tensors, "b1") != std::vector<int64_t>{w1_shape[0]} ||
        tensor_shape(tensors, "b2") != std::vector<int64_t>{w2_shape[0]}) {
        throw DataError("bias shapes do not match weight shapes");
    }
    model.w1 = tensors.at("W1").data;
    model.b1 = tensors.at("b1").data;
    model.w2 = tensors.at("W2").data;
    model.b2 = tensors.at("b2").data;
    check_model_shapes(model);
    return model;
}

LoraAdapter init_adapter(const ModelArch& arch, int rank, float alpha, uint64_t seed) {
    check_arch(arch);
    if (rank <= 0) {
        throw DataError("adapter rank must be positive");
    }
    if (!(alpha > 0.0f)) {
        throw DataError("adapter alpha must be positive");
    }
    LoraAdapter adapter;
    adapter.rank = rank;
    adapter.alpha = alpha;
    RngStream stream = derive_stream(seed, "adapter-init");

    const double std1 = 1.0 / std::sqrt(static_cast<double>(arch.input_dim));
    adapter.w1.a.resize(static_cast<size_t>(rank) * arch.input_dim);
    for (float& v : adapter.w1.a) {
        v = static_cast<float>(stream.gaussian() * std1);
    }
    adapter.w1.b.assign(static_cast<size_t>(arch.hidden_dim) * rank, 0.0f);

    const double std2 = 1.0 / std::sqrt(static_cast<double>(arch.hidden_dim));
    adapter.w2.a.resize(static_cast<size_t>(rank) * arch.hidden_dim);
    for (float& v : adapter.w2.a) {
        v = static_cast<float>(stream.gaussian() * std2);
    }
    adapter.w2.b.assign(static_cast<size_t>(arch.output_dim) * rank, 0.0f);
    return adapter;
}

TensorMap adapter_to_tensor_map(const LoraAdapter& adapter, const ModelArch& arch) {
    check_adapter_shapes(adapter, arch);
    TensorMap tensors;
    tensors.add("lora.W1.A", {adapter.rank, arch.input_dim}, adapter.w1.a);
    tensors.add("lora.W1.B", {arch.hidden_dim, adapter.rank}, adapter.w1.b);
    tensors.add("lora.W2.A", {adapter.rank, arch.hidden_dim}, adapter.w2.a);
    tensors.add("lora.W2.B", {arch.output_dim, adapter.rank}, adapter.w2.b);
    tensors.add("lora.r", {1}, {static_cast<float>(adapter.rank)});
    tensors.add("lora.alpha", {1}, {adapter.alpha});
    return tensors;
}

LoraAdapter adapter_from_tensor_map(const TensorMap& tensors, const ModelArch& arch) {
    for (const char* name : {"lora.W1.A", "lora.W1.B", "lora.W2.A", "lora.W2.B", "lora.r",
                             "lora.alpha"}) {
        if (!tensors.has(name)) {
            throw DataError(std::string("adapter checkpoint is missing tensor '") + name + "'");
        }
    }
    LoraAdapter adapter;
    adapter.rank = static_cast<int>(tensors.at("lora.r").data.at(0));
    adapter.alpha = tensors.at("lora.alpha").data.at(0);
    adapter.w1.a = tensors.at("lora.W1.A").data;
    adapter.w1.b = tensors.at("lora.W1.B").data;
    adapter.w2.a = tensors.at("lora.W2.A").data;
    adapter.w2.b = tensors.at("lora.W2.B").data;
    check_adapter_shapes(adapter, arch);
    if (tensors.at("lora.W1.A").shape != std::vector<int64_t>{adapter.rank, arch.input_dim} ||
        tensors.at("lora.W2.A").shape != std::vector<int64_t>{adapter.rank, arch.hidden_dim}) {
        throw DataError("adapter factor shapes do not match the model architecture");
    }
    return adapter;
}

Model effective_weights(const Model& base, const LoraAdapter& adapter) {
    check_model_shapes(base);
    check_adapter_shapes(adapter, base.arch);
    const int in = base.arch.input_dim;
    const int hid = base.arch.hidden_dim;
    const int out = base.arch.output_dim;
    const int r = adapter.rank;
    const double scale = static_cast<double>(adapter.alpha) / r;

    Model merged = base;
    for (int j = 0; j < hid; ++j) {
        for (int i = 0; i < in; ++i) {
            double delta = 0.0;
            for (int k = 0; k < r; ++k) {
                delta += static_cast<double>(adapter.w1.b[static_cast<size_t>(j) * r + k]) *
                         adapter.w1.a[static_cast<size_t>(k) * in + i];
            }
            const size_t idx = static_cast<size_t>(j) * in + i;
            merged.w1[idx] = static_cast<float>(base.w1[idx] + scale * delta);
        }
    }
    for (int c = 0; c < out; ++c) {
        for (int j = 0; j < hid; ++j) {
            double delta = 0.0;
            for (int k = 0; k < r; ++k) {
                delta += static_cast<double>(adapter.w2.b[static_cast<size_t>(c) * r + k]) *
                         adapter.w2.a[static_cast<size_t>(k) * hid + j];
            }
            const size_t idx = static_cast<size_t>(c) * hid + j;
            merged.w2[idx] = static_cast<float>(base.w2[idx] + scale * delta);
        }
    }
    return merged;
}

std::vector<double> forward(const Model& model, const std::vector<float>& features) {
    check_model_shapes(model);
    const int in = model.arch.input_dim;
    const int hid = model.arch.hidden_dim;
    const int out = model.arch.output_dim;
    if (static_cast<int>(features.size()) != in) {
        throw DataError("encoded feature vector does not match the model input size");
    }

    std::vector<double> h(hid);
    for (int j = 0; j < hid; ++j) {
        double sum = model.b1[static_cast<size_t>(j)];
        const size_t row = static_cast<size_t>(j) * in;
        for (int i = 0; i < in; ++i) {
            sum += model.w1[row + i] * static_cast<double>(features[static_cast<size_t>(i)]);
        }
        h[j] = std::tanh(sum);
    }

    std::vector<double> logits(out);
    for (int c = 0; c < out; ++c) {
        double sum = model.b2[static_cast<size_t>(c)];
        const size_t row = static_cast<size_t>(c) * hid;
        for (int j = 0; j < hid; ++j) {
            sum += model.w2[row + j] * h[j];
        }
        logits[c] = sum;
    }

    const double max_logit = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    std::vector<double> p(out);
    for (int c = 0; c < out; ++c) {
        p[c] = std::exp(logits[c] - max_logit);
        z += p[c];
    }
    for (int c = 0; c < out; ++c) {
        p[c] /= z;
    }
    return p;
}

double cross_entropy(const std::vector<double>& probs, int gold_index) {
    if (gold_index < 0 || gold_index >= static_cast<int>(probs.size())) {
        throw DataError("gold label index out of vocabulary range");
    }
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw DataError("probabilities must be finite and non-negative");
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
        throw DataError("probabilities do not sum to 1");
    }
    return -std::log(std::max(probs[static_cast<size_t>(gold_index)], kProbFloor));
}

std::string predict(const Model& model, const Codec& codec, const EncodedExample& ex) {
    const std::vector<double> probs = forward(model, ex.features);
    const std::vector<int>& allowed = codec.labels_for(ex.task_id);
    if (allowed.empty()) {
        throw DataError("task '" + ex.task_id + "' has no labels");
    }
    int best = -1;
    double best_prob = -1.0;
    for (int idx : allowed) {
        if (idx < 0 || idx >= static_cast<int>(probs.size())) {
            throw DataError("task label index out of vocabulary range");
        }
        // Strict comparison in label_set order keeps ties on the earliest label.
        if (probs[static_cast<size_t>(idx)] > best_prob) {
            best = idx;
            best_prob = probs[static_cast<size_t>(idx)];
        }
    }
    if (best < 0) {
        // Every comparison failed: the probabilities are NaN.
        throw NumericError("model produced non-finite probabilities for task '" + ex.task_id +
                           "'");
    }
    return codec.vocab[static_cast<size_t>(best)];
}

std::string predict(const Model& model, const Codec& codec, const LabeledExample& ex) {
    return predict(model, codec, encode_example(ex, codec));
}

TrainedExpert train_expert(const Model& base, const std::vector<LabeledExample>& train,
                           const Codec& codec, const TrainConfig& config) {
    check_model_shapes(base);
    if (train.empty()) {
        throw DataError("cannot train on an empty dataset");
    }
    if (config.batch_size <= 0 || config.micro_batch_size <= 0 ||
        config.batch_size % config.micro_batch_size != 0) {
        throw DataError("micro_batch_size must be positive and divide batch_size");
    }
    if (!(config.learning_rate > 0.0) || !std::isfinite(config.learning_rate)) {
        throw DataError("learning rate must be positive and finite");
    }
    if (config.max_epochs <= 0) {
        throw DataError("max_epochs must be positive");
    }
    if (config.weight_decay < 0.0 || !std::isfinite(config.weight_decay)) {
        throw DataError("weight decay must be non-negative");
    }
    if (config.lora_dropout < 0.0 || config.lora_dropout >= 1.0) {
        throw DataError("lora_dropout must lie in [0, 1)");
    }
    if (config.early_stop_patience < 0) {
        throw DataError("early_stop_patience must be non-negative");
    }

    const std::vector<EncodedExample> data = encode_batch(train, codec);
    const size_t n = data.size();
    const int in = base.arch.input_dim;
    const int hid = base.arch.hidden_dim;

    TrainedExpert result;
    result.adapter = init_adapter(base.arch, config.lora_r, config.lora_alpha, config.seed);
    result.adapter.dropout_rate = static_cast<float>(config.lora_dropout);
    LoraAdapter& adapter = result.adapter;

    constexpr double kImprovementThreshold = 1e-4;
    const double keep = 1.0 - config.lora_dropout;
    double best_loss = std::numeric_limits<double>::infinity();
    int stale_epochs = 0;

    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) {
            order[i] = i;
        }
        RngStream shuffle_stream =
            derive_stream(config.seed, "shuffle", static_cast<uint64_t>(epoch));
        shuffle_stream.shuffle(order);
        RngStream dropout_stream =
            derive_stream(config.seed, "dropout", static_cast<uint64_t>(epoch));

        double epoch_loss_sum = 0.0;
        for (size_t start = 0; start < n; start += static_cast<size_t>(config.batch_size)) {
            const size_t stop = std::min(n, start + static_cast<size_t>(config.batch_size));
            GradBuf grads(adapter);
            double batch_loss_sum = 0.0;

            // Micro-batches bound peak work per accumulation step; the
            // gradient is identical to a full-batch pass.
            for (size_t micro = start; micro < stop;
                 micro += static_cast<size_t>(config.micro_batch_size)) {
                const size_t micro_stop =
                    std::min(stop, micro + static_cast<size_t>(config.micro_batch_size));
                for (size_t pos = micro; pos < micro_stop; ++pos) {
                    const EncodedExample& ex = data[order[pos]];
                    std::vector<double> mask1, mask2;
                    const std::vector<double>* m1 = nullptr;
                    const std::vector<double>* m2 = nullptr;
                    if (config.lora_dropout > 0.0) {
                        mask1.resize(static_cast<size_t>(in));
                        for (double& m : mask1) {
                            m = dropout_stream.uniform() < config.lora_dropout ? 0.0 : 1.0 / keep;
                        }
                        mask2.resize(static_cast<size_t>(hid));
                        for (double& m : mask2) {
                            m = dropout_stream.uniform() < config.lora_dropout ? 0.0 : 1.0 / keep;
                        }
                        m1 = &mask1;
                        m2 = &mask2;
                    }
                    batch_loss_sum += example_pass(base, adapter, ex, m1, m2, &grads);
                }
            }

            if (!std::isfinite(batch_loss_sum)) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) +
                                   ": non-finite loss");
            }
            epoch_loss_sum += batch_loss_sum;

            const double inv_batch = 1.0 / static_cast<double>(stop - start);
            apply_update(adapter.w1.a, grads.a1, inv_batch, config.learning_rate,
                         config.weight_decay);
            apply_update(adapter.w1.b, grads.b1, inv_batch, config.learning_rate,
                         config.weight_decay);
            apply_update(adapter.w2.a, grads.a2, inv_batch, config.learning_rate,
                         config.weight_decay);
            apply_update(adapter.w2.b, grads.b2, inv_batch, config.learning_rate,
                         config.weight_decay);
            if (!all_finite(adapter.w1.a) || !all_finite(adapter.w1.b) ||
                !all_finite(adapter.w2.a) || !all_finite(adapter.w2.b)) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) +
                                   ": non-finite adapter parameters");
            }
        }

        const double epoch_loss = epoch_loss_sum / static_cast<double>(n);
        result.stats.epoch_losses.push_back(epoch_loss);
        result.stats.epochs_run = epoch + 1;

        const Model snapshot = effective_weights(base, adapter);
        // The adapter factors can stay finite while their scaled product
        // overflows; catch that here rather than in the accuracy pass.
        if (!all_finite(snapshot.w1) || !all_finite(snapshot.w2)) {
            throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) +
                               ": non-finite effective weights");
        }
        size_t correct = 0;
        for (const EncodedExample& ex : data) {
            if (predict(snapshot, codec, ex) ==
                codec.vocab[static_cast<size_t>(ex.gold_index)]) {
                ++correct;
            }
        }
        result.stats.epoch_accuracies.push_back(static_cast<double>(correct) /
                                                static_cast<double>(n));

        if (epoch_loss < best_loss - kImprovementThreshold) {
            stale_epochs = 0;
        } else {
            ++stale_epochs;
        }
        best_loss = std::min(best_loss, epoch_loss);
        if (config.early_stop_patience > 0 && stale_epochs >= config.early_stop_patience &&
            epoch + 1 < config.max_epochs) {
            result.stats.early_stopped = true;
            break;
        }
    }
    return result;
}

double adapter_loss(const Model& base, const LoraAdapter& adapter,
                    const std::vector<EncodedExample>& batch) {
    if (batch.empty()) {
        throw DataError("cannot compute a loss over an empty batch");
    }
    double sum = 0.0;
    for (const EncodedExample& ex : batch) {
        sum += example_pass(base, adapter, ex, nullptr, nullptr, nullptr);
    }
    return sum / static_cast<double>(batch.size());
}

LoraAdapter adapter_gradients(const Model& base, const LoraAdapter& adapter,
                              const std::vector<EncodedExample>& batch) {
    if (batch.empty()) {
        throw DataError("cannot compute gradients over an empty batch");
    }
    GradBuf grads(adapter);
    for (const EncodedExample& ex : batch) {
        example_pass(base, adapter, ex, nullptr, nullptr, &grads);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    LoraAdapter out = adapter;
    for (size_t i = 0; i < out.w1.a.size(); ++i) {
        out.w1.a[i] = static_cast<float>(grads.a1[i] * inv);
    }
    for (size_t i = 0; i < out.w1.b.size(); ++i) {
        out.w1.b[i] = static_cast<float>(grads.b1[i] * inv);
    }
    for (size_t i = 0; i < out.w2.a.size(); ++i) {
        out.w2.a[i] = static_cast<float>(grads.a2[i] * inv);
    }
    for (size_t i = 0; i < out.w2.b.size(); ++i) {
        out.w2.b[i] = static_cast<float>(grads.b2[i] * inv);
    }
    return out;
}

WeakSet extract_weak_data(const Model& expert, const Codec& codec, const std::string& task_id,
                          const std::vector<LabeledExample>& train) {
    if (train.empty()) {
        throw DataError("cannot extract weak data from an empty training set");
    }
    WeakSet weak;
    weak.task_id = task_id;
    for (const LabeledExample& ex : train) {
        if (ex.task_id != task_id) {
            throw DataError("training example for task '" + ex.task_id +
                            "' passed to weak extraction for '" + task_id + "'");
        }
        if (predict(expert, codec, ex) != ex.gold) {
            weak.items.push_back(ex);
        }
    }
    return weak;
}

WeakSet apply_weak_fallback(WeakSet weak, const std::vector<LabeledExample>& train) {
    if (!weak.items.empty()) {
        return weak;
    }
    if (train.empty()) {
        throw DataError("cannot build a fallback weak set from an empty training set");
    }
    const size_t count = std::min<size_t>(100, train.size());
    weak.items.assign(train.end() - static_cast<ptrdiff_t>(count), train.end());
    weak.is_fallback = true;
    return weak;
}

}  // namespace evomerge
