#include "longvid/frames.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "longvid/common.hpp"

namespace longvid::frames {

namespace {

bool is_ppm_space(uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

[[noreturn]] void fail(const std::string& name, size_t offset, const std::string& what) {
    throw ConfigError(name + ": " + what + " at byte " + std::to_string(offset));
}

// whitespace runs may carry '#' comments that extend to end of line
void skip_space(const uint8_t* data, size_t len, size_t& pos, const std::string& name) {
    bool moved = false;
    while (pos < len) {
        if (is_ppm_space(data[pos])) {
            ++pos;
            moved = true;
        } else if (data[pos] == '#') {
            while (pos < len && data[pos] != '\n') ++pos;
        } else {
            break;
        }
    }
    if (!moved) fail(name, pos, "expected whitespace");
}

size_t parse_number(const uint8_t* data, size_t len, size_t& pos, const std::string& name,
                    const std::string& field) {
    if (pos >= len || data[pos] < '0' || data[pos] > '9') {
        fail(name, pos, "expected " + field);
    }
    size_t value = 0;
    while (pos < len && data[pos] >= '0' && data[pos] <= '9') {
        value = value * 10 + size_t(data[pos] - '0');
        if (value > 1u << 20) fail(name, pos, field + " out of range");
        ++pos;
    }
    return value;
}

}  // namespace

PpmImage parse_ppm(const uint8_t* data, size_t len, const std::string& name) {
    if (len < 2 || data[0] != 'P' || data[1] != '6') {
        fail(name, 0, "expected P6 magic");
    }
    size_t pos = 2;
    skip_space(data, len, pos, name);
    PpmImage img;
    img.width = parse_number(data, len, pos, name, "width");
    skip_space(data, len, pos, name);
    img.height = parse_number(data, len, pos, name, "height");
    skip_space(data, len, pos, name);
    size_t maxval_at = pos;
    size_t maxval = parse_number(data, len, pos, name, "maxval");
    if (maxval != 255) {
        fail(name, maxval_at, "maxval " + std::to_string(maxval) + " unsupported, must be 255");
    }
    if (pos >= len || !is_ppm_space(data[pos])) {
        fail(name, pos, "expected single whitespace before payload");
    }
    ++pos;
    if (img.width == 0 || img.height == 0) fail(name, pos, "zero image dimension");

    size_t need = img.width * img.height * 3;
    if (len - pos < need) {
        fail(name, len,
             "truncated payload, have " + std::to_string(len - pos) + " of " +
                 std::to_string(need) + " bytes");
    }
    if (len - pos > need) {
        fail(name, pos + need, "trailing bytes after payload");
    }
    img.rgb.assign(data + pos, data + len);
    return img;
}

std::vector<uint8_t> render_ppm(const PpmImage& image) {
    if (image.rgb.size() != image.width * image.height * 3) {
        throw ConfigError("render_ppm: pixel buffer does not match dimensions");
    }
    std::string header = "P6\n" + std::to_string(image.width) + " " +
                         std::to_string(image.height) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), image.rgb.begin(), image.rgb.end());
    return out;
}

FrameSet load_frames(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) {
        throw ConfigError("load_frames: " + dir + " is not a directory");
    }
    std::vector<fs::path> paths;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".ppm") {
            paths.push_back(entry.path());
        }
    }
    if (paths.empty()) throw ConfigError("load_frames: no frames in " + dir);
    std::sort(paths.begin(), paths.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });

    FrameSet set;
    std::string first_name;
    for (const auto& path : paths) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("load_frames: cannot open " + path.string());
        std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
        PpmImage img = parse_ppm(bytes.data(), bytes.size(), path.filename().string());
        if (img.width != img.height) {
            throw ConfigError("load_frames: " + path.filename().string() + " is " +
                              std::to_string(img.width) + "x" + std::to_string(img.height) +
                              ", frames must be square");
        }
        if (set.frames.empty()) {
            set.side = img.width;
            first_name = path.filename().string();
        } else if (img.width != set.side) {
            throw ConfigError("load_frames: mixed sizes, " + first_name + " is " +
                              std::to_string(set.side) + "x" + std::to_string(set.side) +
                              " but " + path.filename().string() + " is " +
                              std::to_string(img.width) + "x" + std::to_string(img.height));
        }
        vision::Frame frame;
        frame.pixels = std::move(img.rgb);
        frame.timestamp_index = set.frames.size();
        set.frames.push_back(std::move(frame));
        set.names.push_back(path.filename().string());
    }
    return set;
}

void write_ppm(const std::string& path, const PpmImage& image) {
    auto bytes = render_ppm(image);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("write_ppm: cannot open " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw ConfigError("write_ppm: write failed for " + path);
}

std::vector<vision::Frame> synthesize_frames(size_t count, size_t side, uint64_t seed) {
    Rng g(seed ^ 0xf0a1e5ce5ull);
    std::vector<vision::Frame> frames(count);
    for (size_t f = 0; f < count; ++f) {
        frames[f].pixels.resize(side * side * 3);
        for (auto& px : frames[f].pixels) px = uint8_t(uniform_index(g, 256));
        frames[f].timestamp_index = f;
    }
    return frames;
}

}  // namespace longvid::frames
