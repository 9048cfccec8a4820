#pragma once

// Named tensor store with a flat binary serialization: a JSON header
// (names, shapes, byte offsets) followed by raw little-endian float64
// payloads.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace longvid {

struct WeightStore {
    struct Entry {
        std::vector<size_t> shape;
        std::vector<double> data;
    };
    std::map<std::string, Entry> entries;

    void put(const std::string& name, std::vector<size_t> shape, std::vector<double> data);
    const Entry& get(const std::string& name) const;
    bool has(const std::string& name) const { return entries.count(name) > 0; }

    void save(const std::string& path) const;
    static WeightStore load(const std::string& path);
};

}  // namespace longvid
