#include "evomerge/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace evomerge {

namespace {

using ordered_json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'E', 'M', 'C', 'P'};

void check_tensor(const Tensor& t) {
    if (t.name.empty()) {
        throw CheckpointError(CheckpointError::Kind::invalid_tensor, "tensor name is empty");
    }
    for (int64_t d : t.shape) {
        if (d <= 0) {
            throw CheckpointError(CheckpointError::Kind::invalid_tensor,
                                  "tensor '" + t.name + "' has non-positive dimension");
        }
    }
    if (t.element_count() != static_cast<int64_t>(t.data.size())) {
        throw CheckpointError(CheckpointError::Kind::invalid_tensor,
                              "tensor '" + t.name + "' shape does not match data length");
    }
    for (float v : t.data) {
        if (!std::isfinite(v)) {
            throw CheckpointError(CheckpointError::Kind::non_finite,
                                  "tensor '" + t.name + "' contains NaN or infinity");
        }
    }
}

}  // namespace

void TensorMap::add(std::string name, std::vector<int64_t> shape, std::vector<float> data) {
    Tensor t{std::move(name), std::move(shape), std::move(data)};
    if (index_.count(t.name) > 0) {
        throw CheckpointError(CheckpointError::Kind::invalid_tensor,
                              "duplicate tensor name '" + t.name + "'");
    }
    check_tensor(t);
    index_.emplace(t.name, entries_.size());
    entries_.push_back(std::move(t));
}

const Tensor& TensorMap::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw CheckpointError(CheckpointError::Kind::invalid_tensor,
                              "no tensor named '" + name + "'");
    }
    return entries_[it->second];
}

Tensor& TensorMap::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw CheckpointError(CheckpointError::Kind::invalid_tensor,
                              "no tensor named '" + name + "'");
    }
    return entries_[it->second];
}

void TensorMap::validate() const {
    for (const Tensor& t : entries_) {
        check_tensor(t);
    }
}

bool bitwise_equal(const TensorMap& a, const TensorMap& b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (size_t i = 0; i < a.size(); ++i) {
        const Tensor& ta = a.entries()[i];
        const Tensor& tb = b.entries()[i];
        if (ta.name != tb.name || ta.shape != tb.shape || ta.data.size() != tb.data.size()) {
            return false;
        }
        if (!ta.data.empty() &&
            std::memcmp(ta.data.data(), tb.data.data(), ta.data.size() * sizeof(float)) != 0) {
            return false;
        }
    }
    return true;
}

void save_checkpoint(const TensorMap& model, const std::filesystem::path& path) {
    model.validate();  // refuse to write invalid data; nothing touched on throw

    ordered_json manifest = ordered_json::array();
    uint64_t offset = 0;
    for (const Tensor& t : model.entries()) {
        const uint64_t byte_len = t.data.size() * sizeof(float);
        ordered_json entry;
        entry["name"] = t.name;
        entry["shape"] = t.shape;
        entry["dtype"] = "f32";
        entry["byte_offset"] = offset;
        entry["byte_len"] = byte_len;
        manifest.push_back(std::move(entry));
        offset += byte_len;
    }
    const std::string manifest_bytes = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw CheckpointError(CheckpointError::Kind::io,
                              "cannot open '" + path.string() + "' for writing");
    }
    out.write(kMagic, sizeof(kMagic));
    const uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t manifest_len = manifest_bytes.size();
    out.write(reinterpret_cast<const char*>(&manifest_len), sizeof(manifest_len));
    out.write(manifest_bytes.data(), static_cast<std::streamsize>(manifest_bytes.size()));
    for (const Tensor& t : model.entries()) {
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    out.flush();
    if (!out) {
        throw CheckpointError(CheckpointError::Kind::io,
                              "write failed for '" + path.string() + "'");
    }
}

TensorMap load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError(CheckpointError::Kind::io,
                              "cannot open '" + path.string() + "' for reading");
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw CheckpointError(CheckpointError::Kind::io, "read failed for '" + path.string() + "'");
    }

    constexpr size_t header_size = sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t);
    if (bytes.size() < header_size) {
        throw CheckpointError(CheckpointError::Kind::bad_manifest, "file shorter than header");
    }
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointError(CheckpointError::Kind::bad_magic, "bad magic bytes");
    }
    uint32_t version = 0;
    std::memcpy(&version, bytes.data() + sizeof(kMagic), sizeof(version));
    if (version != kCheckpointVersion) {
        throw CheckpointError(CheckpointError::Kind::bad_version,
                              "unsupported version " + std::to_string(version));
    }
    uint64_t manifest_len = 0;
    std::memcpy(&manifest_len, bytes.data() + sizeof(kMagic) + sizeof(version),
                sizeof(manifest_len));
    if (header_size + manifest_len > bytes.size()) {
        throw CheckpointError(CheckpointError::Kind::bad_manifest,
                              "manifest length exceeds file size");
    }

    ordered_json manifest;
    try {
        manifest = ordered_json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header_size),
                                       bytes.begin() +
                                           static_cast<std::ptrdiff_t>(header_size + manifest_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::bad_manifest,
                              std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!manifest.is_array()) {
        throw CheckpointError(CheckpointError::Kind::bad_manifest, "manifest is not an array");
    }

    const char* payload = bytes.data() + header_size + manifest_len;
    const uint64_t payload_size = bytes.size() - header_size - manifest_len;

    TensorMap result;
    uint64_t expected_offset = 0;
    for (const auto& entry : manifest) {
        std::string name;
        std::vector<int64_t> shape;
        std::string dtype;
        uint64_t byte_offset = 0;
        uint64_t byte_len = 0;
        try {
            name = entry.at("name").get<std::string>();
            shape = entry.at("shape").get<std::vector<int64_t>>();
            dtype = entry.at("dtype").get<std::string>();
            byte_offset = entry.at("byte_offset").get<uint64_t>();
            byte_len = entry.at("byte_len").get<uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw CheckpointError(CheckpointError::Kind::bad_manifest,
                                  std::string("malformed manifest entry: ") + e.what());
        }
        if (dtype != "f32") {
            throw CheckpointError(CheckpointError::Kind::bad_manifest,
                                  "unsupported dtype '" + dtype + "' for tensor '" + name + "'");
        }
        if (byte_offset != expected_offset) {
            throw CheckpointError(CheckpointError::Kind::bad_manifest,
                                  "non-contiguous byte_offset for tensor '" + name + "'");
        }
        if (byte_offset + byte_len > payload_size) {
            throw CheckpointError(CheckpointError::Kind::out_of_bounds,
                                  "byte range of tensor '" + name + "' exceeds payload");
        }
        int64_t elements = 1;
        for (int64_t d : shape) {
            elements *= d;
        }
        if (byte_len != static_cast<uint64_t>(elements) * sizeof(float)) {
            throw CheckpointError(CheckpointError::Kind::bad_manifest,
                                  "byte_len does not match shape for tensor '" + name + "'");
        }
        std::vector<float> data(static_cast<size_t>(elements));
        if (elements > 0) {
            std::memcpy(data.data(), payload + byte_offset, byte_len);
        }
        result.add(std::move(name), std::move(shape), std::move(data));  // validates finiteness
        expected_offset = byte_offset + byte_len;
    }
    if (expected_offset != payload_size) {
        throw CheckpointError(CheckpointError::Kind::bad_manifest,
                              "payload has trailing bytes not covered by the manifest");
    }
    return result;
}

}  // namespace evomerge
