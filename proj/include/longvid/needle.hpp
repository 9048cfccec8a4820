#pragma once

// Synthetic needle-in-a-video task: every frame is a solid colour from a
// small palette (plus pixel jitter), exactly one frame carries a white
// square marker, and the label is the colour class of that marked frame.
// Solving it end-to-end requires the recurrence to carry the marked
// frame's colour across the remaining frames.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "longvid/common.hpp"
#include "longvid/vision.hpp"

namespace longvid::needle {

struct NeedleTask {
    size_t n_frames = 8;
    size_t image_side = 32;
    size_t marker_side = 16;  // centered white square
    size_t n_classes = 4;
    size_t noise_amplitude = 6;  // per-channel uniform pixel jitter
    uint64_t dataset_seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static NeedleTask from_json(const nlohmann::json& j);
};

struct NeedleSample {
    std::vector<vision::Frame> frames;
    int label = 0;
    size_t marked_frame = 0;
};

NeedleSample make_sample(const NeedleTask& task, Rng& rng);

// stream picks independent datasets from the same task seed (train,
// held-out, ...)
std::vector<NeedleSample> make_dataset(const NeedleTask& task, size_t count,
                                       uint64_t stream);

}  // namespace longvid::needle
