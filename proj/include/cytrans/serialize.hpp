#ifndef CYTRANS_SERIALIZE_HPP
#define CYTRANS_SERIALIZE_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tensor.hpp"

// Flat parameter container: a plain-text header listing (name, dtype, shape,
// byte offset) followed by the raw little-endian float32 payload.
//
//   CYT1
//   <entry count>
//   <name> f32 <ndim> <d0> ... <dk> <offset>
//   ...
//   DATA
//   <payload bytes>
//
// Offsets are relative to the first payload byte. Entries are written in
// insertion order so a container round-trips byte-identically.

namespace cytrans {

struct ArrayEntry {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

class ArrayContainer {
public:
    void put(const std::string& name, const Shape& shape, std::vector<float> data) {
        if ((int64_t)data.size() != numel(shape))
            throw TensorError("container entry '" + name + "' size/shape mismatch");
        if (index_.count(name)) throw TensorError("duplicate container entry '" + name + "'");
        index_[name] = entries_.size();
        entries_.push_back({name, shape, std::move(data)});
    }

    void put_scalar(const std::string& name, float v) { put(name, {1}, {v}); }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const ArrayEntry& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw TensorError("missing container entry '" + name + "'");
        return entries_[it->second];
    }

    float get_scalar(const std::string& name) const {
        const auto& e = get(name);
        if (e.data.size() != 1) throw TensorError("entry '" + name + "' is not a scalar");
        return e.data[0];
    }

    const std::vector<ArrayEntry>& entries() const { return entries_; }

    void save(const std::string& path) const {
        std::string tmp = path + ".tmp";
        {
            std::ofstream os(tmp, std::ios::binary);
            if (!os) throw TensorError("cannot open '" + tmp + "' for writing");
            os << "CYT1\n" << entries_.size() << "\n";
            uint64_t offset = 0;
            for (const auto& e : entries_) {
                os << e.name << " f32 " << e.shape.size();
                for (int d : e.shape) os << " " << d;
                os << " " << offset << "\n";
                offset += e.data.size() * sizeof(float);
            }
            os << "DATA\n";
            for (const auto& e : entries_)
                os.write(reinterpret_cast<const char*>(e.data.data()),
                         (std::streamsize)(e.data.size() * sizeof(float)));
            if (!os) throw TensorError("write failed for '" + tmp + "'");
        }
        if (std::rename(tmp.c_str(), path.c_str()) != 0)
            throw TensorError("cannot rename '" + tmp + "' to '" + path + "'");
    }

    static ArrayContainer load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw TensorError("cannot open '" + path + "'");
        std::string magic;
        is >> magic;
        if (magic != "CYT1") throw TensorError("'" + path + "' is not a parameter container");
        size_t count = 0;
        is >> count;
        struct Meta {
            std::string name;
            Shape shape;
            uint64_t offset;
        };
        std::vector<Meta> metas(count);
        for (auto& m : metas) {
            std::string dtype;
            size_t ndim = 0;
            is >> m.name >> dtype >> ndim;
            if (dtype != "f32") throw TensorError("unsupported dtype '" + dtype + "'");
            m.shape.resize(ndim);
            for (auto& d : m.shape) is >> d;
            is >> m.offset;
        }
        std::string data_tag;
        is >> data_tag;
        if (data_tag != "DATA" || !is) throw TensorError("corrupt container '" + path + "'");
        is.get();  // newline before payload
        const std::streampos payload = is.tellg();
        ArrayContainer c;
        for (const auto& m : metas) {
            std::vector<float> buf((size_t)numel(m.shape));
            is.seekg(payload + (std::streampos)m.offset);
            is.read(reinterpret_cast<char*>(buf.data()),
                    (std::streamsize)(buf.size() * sizeof(float)));
            if (!is) throw TensorError("truncated container '" + path + "'");
            c.put(m.name, m.shape, std::move(buf));
        }
        return c;
    }

private:
    std::vector<ArrayEntry> entries_;
    std::map<std::string, size_t> index_;
};

// Plain-text sidecar, key=value per line (image shape, rng states, ...).
inline void save_kv(const std::string& path, const std::vector<std::pair<std::string, std::string>>& kv) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp);
        if (!os) throw TensorError("cannot open '" + tmp + "' for writing");
        for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw TensorError("cannot rename '" + tmp + "'");
}

inline std::map<std::string, std::string> load_kv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw TensorError("cannot open '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

}  // namespace cytrans

#endif
