#include "a2dmn/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace a2dmn {

namespace {

template <typename T>
void write_raw(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore<float>& params,
                     const std::string& meta_json) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    f.write("A2DM", 4);
    write_raw<std::uint16_t>(f, kCheckpointVersion);
    write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(params.order.size()));
    for (const auto& name : params.order) {
        const auto& t = params.at(name);
        write_raw<std::uint16_t>(f, static_cast<std::uint16_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_raw<std::uint8_t>(f, static_cast<std::uint8_t>(t->shape.size()));
        for (int d : t->shape) write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(d));
        f.write(reinterpret_cast<const char*>(t->values.data()),
                static_cast<std::streamsize>(t->values.size() * sizeof(float)));
    }
    write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(meta_json.size()));
    f.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

ParamStore<float> load_checkpoint(const std::string& path, std::string* meta_json) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "A2DM", 4) != 0)
        throw std::runtime_error(path + " is not a checkpoint (bad magic)");
    const auto version = read_raw<std::uint16_t>(f);
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const auto count = read_raw<std::uint32_t>(f);
    ParamStore<float> params;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_raw<std::uint16_t>(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const auto rank = read_raw<std::uint8_t>(f);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(read_raw<std::uint32_t>(f));
        auto t = make_tensor<float>(shape, true);
        f.read(reinterpret_cast<char*>(t->values.data()),
               static_cast<std::streamsize>(t->values.size() * sizeof(float)));
        if (!f) throw std::runtime_error("truncated checkpoint: " + path);
        params.add(name, t);
    }
    if (meta_json) {
        meta_json->clear();
        std::uint32_t len = 0;
        f.read(reinterpret_cast<char*>(&len), sizeof(len));
        if (f && len > 0) {
            meta_json->resize(len);
            f.read(meta_json->data(), len);
            if (!f) throw std::runtime_error("truncated checkpoint metadata: " + path);
        }
    }
    return params;
}

}  // namespace a2dmn
