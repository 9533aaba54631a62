#include "physgan/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace physgan {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian; big-endian hosts need byte swaps");

namespace {

constexpr char kMagic[4] = {'P', 'G', 'T', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint: truncated file");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& tensors,
                     CheckpointDtype dtype) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot open for write: " + path);
    os.write(kMagic, 4);
    put<uint32_t>(os, kVersion);
    put<uint64_t>(os, tensors.size());
    uint64_t offset = 0;
    const std::size_t elem = dtype == CheckpointDtype::f64 ? 8 : 4;
    for (const auto& [name, t] : tensors) {
        put<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint32_t>(os, static_cast<uint32_t>(dtype));
        put<uint32_t>(os, static_cast<uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) put<uint64_t>(os, static_cast<uint64_t>(t.dim(i)));
        put<uint64_t>(os, offset);
        offset += static_cast<uint64_t>(t.size()) * elem;
    }
    for (const auto& [name, t] : tensors) {
        (void)name;
        if (dtype == CheckpointDtype::f64) {
            os.write(reinterpret_cast<const char*>(t.values().data()),
                     static_cast<std::streamsize>(t.size() * 8));
        } else {
            std::vector<float> f(t.values().begin(), t.values().end());
            os.write(reinterpret_cast<const char*>(f.data()),
                     static_cast<std::streamsize>(f.size() * 4));
        }
    }
    if (!os) throw IoError("checkpoint: write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("checkpoint: bad magic header in " + path);
    const uint32_t version = get<uint32_t>(is);
    if (version != kVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    const uint64_t count = get<uint64_t>(is);

    struct Entry {
        std::string name;
        Shape shape;
        CheckpointDtype dtype;
        uint64_t offset;
    };
    std::vector<Entry> manifest;
    manifest.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        Entry e;
        const uint32_t name_len = get<uint32_t>(is);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        const uint32_t dt = get<uint32_t>(is);
        if (dt > 1) throw IoError("checkpoint: unknown dtype tag");
        e.dtype = static_cast<CheckpointDtype>(dt);
        const uint32_t ndim = get<uint32_t>(is);
        e.shape.resize(ndim);
        for (uint32_t d = 0; d < ndim; ++d) e.shape[d] = static_cast<int64_t>(get<uint64_t>(is));
        e.offset = get<uint64_t>(is);
        if (!is) throw IoError("checkpoint: truncated manifest in " + path);
        manifest.push_back(std::move(e));
    }
    const std::streampos payload_start = is.tellg();

    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (const Entry& e : manifest) {
        const int64_t n = numel(e.shape);
        std::vector<double> values(n);
        is.seekg(payload_start + static_cast<std::streamoff>(e.offset));
        if (e.dtype == CheckpointDtype::f64) {
            is.read(reinterpret_cast<char*>(values.data()), n * 8);
        } else {
            std::vector<float> f(n);
            is.read(reinterpret_cast<char*>(f.data()), n * 4);
            for (int64_t i = 0; i < n; ++i) values[i] = static_cast<double>(f[i]);
        }
        if (!is) throw IoError("checkpoint: truncated payload in " + path);
        out.emplace_back(e.name, Tensor::from_values(e.shape, std::move(values)));
    }
    return out;
}

const Tensor& checkpoint_entry(const std::vector<std::pair<std::string, Tensor>>& entries,
                               const std::string& name) {
    for (const auto& [n, t] : entries)
        if (n == name) return t;
    throw ContractError("checkpoint: no entry named " + name);
}

}  // namespace physgan
