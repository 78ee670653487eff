#include "mshr/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "mshr/trim.hpp"

namespace mshr {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'H', 'R'};

template <typename T>
void put(std::ofstream& f, T v) {
    // Little-endian layout; this codebase only targets little-endian hosts.
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T get(std::ifstream& f, const char* what) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!f) throw std::runtime_error(std::string("checkpoint truncated reading ") + what);
    return v;
}

}  // namespace

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
    auto violations = check_arch(params, params.config);
    if (!violations.empty()) {
        throw std::invalid_argument("save_checkpoint: " + violations.front());
    }
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open for write: " + tmp.string());
        f.write(kMagic, 4);
        put<uint32_t>(f, kCheckpointVersion);
        const std::string cfg = config_to_json(params.config);
        put<uint64_t>(f, cfg.size());
        f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
        for (const auto& [name, t] : params.tensors) {
            put<uint32_t>(f, static_cast<uint32_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            put<uint8_t>(f, 0);  // dtype f32
            put<uint8_t>(f, static_cast<uint8_t>(t.shape.size()));
            for (int64_t d : t.shape) put<uint64_t>(f, static_cast<uint64_t>(d));
            f.write(reinterpret_cast<const char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        }
        if (!f) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path.string());
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("checkpoint magic mismatch: " + path.string());
    }
    const auto version = get<uint32_t>(f, "version");
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint version mismatch: " + std::to_string(version));
    }
    const auto cfg_len = get<uint64_t>(f, "config length");
    std::string cfg_text(cfg_len, '\0');
    f.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
    if (!f) throw std::runtime_error("checkpoint truncated reading config");

    ParamSet p;
    p.config = config_from_json(cfg_text);
    while (true) {
        uint32_t name_len;
        f.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (f.eof()) break;
        if (!f) throw std::runtime_error("checkpoint truncated reading record header");
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const auto dtype = get<uint8_t>(f, "dtype");
        if (dtype != 0) throw std::runtime_error("unsupported dtype tag in checkpoint");
        const auto ndim = get<uint8_t>(f, "ndim");
        std::vector<int64_t> shape(ndim);
        for (auto& d : shape) d = static_cast<int64_t>(get<uint64_t>(f, "dim"));
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!f) throw std::runtime_error("checkpoint truncated reading tensor " + name);
        p.tensors.emplace(std::move(name), std::move(t));
    }
    auto violations = check_arch(p, p.config);
    if (!violations.empty()) {
        throw std::runtime_error("checkpoint failed arch audit: " + violations.front());
    }
    return p;
}

}  // namespace mshr
