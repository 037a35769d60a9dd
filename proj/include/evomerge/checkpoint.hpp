// Named f32 tensor collections and the "EMCP" v1 checkpoint container.
//
// File layout: 4-byte magic "EMCP", u32 version (LE), u64 manifest length (LE),
// UTF-8 JSON manifest, then the concatenated raw little-endian f32 payload.
// The manifest lists (name, shape, dtype, byte_offset, byte_len) per tensor in
// entry order; offsets are relative to the start of the payload section.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace evomerge {

struct Tensor {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<float> data;  // row-major

    int64_t element_count() const {
        int64_t n = 1;
        for (int64_t d : shape) {
            n *= d;
        }
        return n;
    }
};

// Ordered collection of uniquely named tensors. Entry order is insertion
// order and is preserved by serialization, making checkpoint files
// deterministic.
class TensorMap {
public:
    void add(std::string name, std::vector<int64_t> shape, std::vector<float> data);

    bool has(const std::string& name) const { return index_.count(name) > 0; }
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);

    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const std::vector<Tensor>& entries() const { return entries_; }

    // Re-checks all invariants (shape/data consistency, finiteness). add()
    // enforces them on insertion; this guards against later mutation via at().
    void validate() const;

private:
    std::vector<Tensor> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// Bitwise equality of names, shapes and float payloads (distinguishes -0.0
// from 0.0, unlike operator== on float).
bool bitwise_equal(const TensorMap& a, const TensorMap& b);

class CheckpointError : public std::runtime_error {
public:
    enum class Kind {
        io,
        bad_magic,
        bad_version,
        bad_manifest,
        out_of_bounds,
        non_finite,
        invalid_tensor,
    };

    CheckpointError(Kind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TensorMap& model, const std::filesystem::path& path);
TensorMap load_checkpoint(const std::filesystem::path& path);

}  // namespace evomerge
