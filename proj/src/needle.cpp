#include "longvid/needle.hpp"

#include <algorithm>
#include <array>

namespace longvid::needle {

namespace {

constexpr std::array<std::array<int, 3>, 4> kPalette = {{
    {200, 40, 40},   // red
    {40, 200, 40},   // green
    {40, 80, 220},   // blue
    {210, 200, 40},  // yellow
}};

uint8_t jitter(int base, int amplitude, Rng& rng) {
    int v = base;
    if (amplitude > 0) v += int(uniform_index(rng, 2 * size_t(amplitude) + 1)) - amplitude;
    return uint8_t(std::clamp(v, 0, 255));
}

}  // namespace

void NeedleTask::validate() const {
    if (n_frames == 0) throw ConfigError("needle task: need at least one frame");
    if (image_side == 0) throw ConfigError("needle task: zero image side");
    if (marker_side == 0 || marker_side > image_side) {
        throw ConfigError("needle task: marker side " + std::to_string(marker_side) +
                          " does not fit a " + std::to_string(image_side) + "-pixel frame");
    }
    if (n_classes < 2 || n_classes > kPalette.size()) {
        throw ConfigError("needle task: n_classes must be 2.." +
                          std::to_string(kPalette.size()));
    }
}

nlohmann::json NeedleTask::to_json() const {
    return {{"n_frames", n_frames},       {"image_side", image_side},
            {"marker_side", marker_side}, {"n_classes", n_classes},
            {"noise_amplitude", noise_amplitude}, {"dataset_seed", dataset_seed}};
}

NeedleTask NeedleTask::from_json(const nlohmann::json& j) {
    NeedleTask t;
    t.n_frames = j.value("n_frames", t.n_frames);
    t.image_side = j.value("image_side", t.image_side);
    t.marker_side = j.value("marker_side", t.marker_side);
    t.n_classes = j.value("n_classes", t.n_classes);
    t.noise_amplitude = j.value("noise_amplitude", t.noise_amplitude);
    t.dataset_seed = j.value("dataset_seed", t.dataset_seed);
    t.validate();
    return t;
}

NeedleSample make_sample(const NeedleTask& task, Rng& rng) {
    task.validate();
    size_t side = task.image_side;
    size_t m0 = (side - task.marker_side) / 2;
    size_t m1 = m0 + task.marker_side;
    int amp = int(task.noise_amplitude);

    NeedleSample sample;
    sample.marked_frame = uniform_index(rng, task.n_frames);
    sample.frames.resize(task.n_frames);
    for (size_t f = 0; f < task.n_frames; ++f) {
        size_t cls = uniform_index(rng, task.n_classes);
        if (f == sample.marked_frame) sample.label = int(cls);
        const auto& colour = kPalette[cls];
        bool marked = f == sample.marked_frame;

        auto& frame = sample.frames[f];
        frame.timestamp_index = f;
        frame.pixels.resize(side * side * 3);
        for (size_t y = 0; y < side; ++y) {
            for (size_t x = 0; x < side; ++x) {
                bool in_marker = marked && y >= m0 && y < m1 && x >= m0 && x < m1;
                uint8_t* px = &frame.pixels[(y * side + x) * 3];
                for (size_t c = 0; c < 3; ++c) {
                    px[c] = jitter(in_marker ? 255 : colour[c], amp, rng);
                }
            }
        }
    }
    return sample;
}

std::vector<NeedleSample> make_dataset(const NeedleTask& task, size_t count,
                                       uint64_t stream) {
    Rng rng(task.dataset_seed ^ (0xa5a5a5a5a5a5a5a5ull * (stream + 1)));
    std::vector<NeedleSample> out;
    out.reserve(count);
    for (size_t i = 0; i < count; ++i) out.push_back(make_sample(task, rng));
    return out;
}

}  // namespace longvid::needle
