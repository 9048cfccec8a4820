#pragma once

// Frame ingestion for the CLI: a strict binary PPM (P6) parser with
// byte-offset error reporting, a directory loader that orders frames
// lexicographically, and seeded noise synthesis for the benchmarks.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "longvid/vision.hpp"

namespace longvid::frames {

struct PpmImage {
    size_t width = 0;
    size_t height = 0;
    std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel
};

// P6 grammar: magic, whitespace (with # comments), width, height,
// maxval 255, one whitespace byte, then raw RGB. Anything else is a
// ConfigError naming `name` and the offending byte offset.
PpmImage parse_ppm(const uint8_t* data, size_t len, const std::string& name);

std::vector<uint8_t> render_ppm(const PpmImage& image);

struct FrameSet {
    std::vector<vision::Frame> frames;
    size_t side = 0;  // frames are required to be square and uniform
    std::vector<std::string> names;
};

// reads every *.ppm in dir, sorted by filename; timestamp_index follows
// the sort order
FrameSet load_frames(const std::string& dir);

void write_ppm(const std::string& path, const PpmImage& image);

// seeded noise frames; benchmark cost paths do not depend on content
std::vector<vision::Frame> synthesize_frames(size_t count, size_t side, uint64_t seed);

}  // namespace longvid::frames
