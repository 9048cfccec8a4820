#include "longvid/weights.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "longvid/common.hpp"

namespace longvid {

namespace {

// file layout: "LVWB" magic, u32 header length (little-endian), JSON
// header, then the concatenated float64 payloads the header points into
constexpr char kMagic[4] = {'L', 'V', 'W', 'B'};

void write_u32(std::ostream& out, uint32_t v) {
    char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
                 char((v >> 24) & 0xff)};
    out.write(b, 4);
}

uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

}  // namespace

void WeightStore::put(const std::string& name, std::vector<size_t> shape,
                      std::vector<double> data) {
    size_t n = 1;
    for (size_t s : shape) n *= s;
    if (n != data.size()) {
        throw ConfigError("weight store: shape of '" + name + "' does not match data size");
    }
    entries[name] = Entry{std::move(shape), std::move(data)};
}

const WeightStore::Entry& WeightStore::get(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw ConfigError("weight store: missing tensor '" + name + "'");
    return it->second;
}

void WeightStore::save(const std::string& path) const {
    nlohmann::json header;
    header["dtype"] = "float64";
    header["tensors"] = nlohmann::json::object();
    uint64_t offset = 0;
    for (const auto& [name, e] : entries) {
        header["tensors"][name] = {{"shape", e.shape},
                                   {"offset", offset},
                                   {"bytes", e.data.size() * sizeof(double)}};
        offset += e.data.size() * sizeof(double);
    }
    std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("weight store: cannot write '" + path + "'");
    out.write(kMagic, 4);
    write_u32(out, uint32_t(hs.size()));
    out.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& [name, e] : entries) {
        (void)name;
        // doubles are written verbatim; this code targets little-endian hosts
        out.write(reinterpret_cast<const char*>(e.data.data()),
                  std::streamsize(e.data.size() * sizeof(double)));
    }
    if (!out) throw ConfigError("weight store: short write to '" + path + "'");
}

WeightStore WeightStore::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("weight store: cannot read '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw ConfigError("weight store: '" + path + "' is not a weight file");
    }
    uint32_t hlen = read_u32(in);
    std::string hs(hlen, '\0');
    in.read(hs.data(), hlen);
    if (!in) throw ConfigError("weight store: truncated header in '" + path + "'");
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded() || header.value("dtype", "") != "float64") {
        throw ConfigError("weight store: bad header in '" + path + "'");
    }

    std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    WeightStore store;
    for (const auto& [name, meta] : header["tensors"].items()) {
        uint64_t off = meta["offset"].get<uint64_t>();
        uint64_t bytes = meta["bytes"].get<uint64_t>();
        if (off + bytes > payload.size()) {
            throw ConfigError("weight store: tensor '" + name + "' overruns the payload");
        }
        Entry e;
        e.shape = meta["shape"].get<std::vector<size_t>>();
        e.data.resize(bytes / sizeof(double));
        std::memcpy(e.data.data(), payload.data() + off, bytes);
        store.entries[name] = std::move(e);
    }
    return store;
}

}  // namespace longvid
