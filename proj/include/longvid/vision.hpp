#pragma once

// Toy vision encoder: patch embedding with explicit positional
// embeddings, pre-norm softmax-attention layers with a token-merge step
// between attention and feed-forward (the final layer is dropped), and a
// two-layer connector into the language model width.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "longvid/token_merge.hpp"
#include "longvid/weights.hpp"

namespace longvid::vision {

enum class MergePolicy { always, multi_frame_only };

MergePolicy parse_merge_policy(const std::string& s);
std::string to_string(MergePolicy p);

struct EncoderConfig {
    size_t image_side = 64;
    size_t patch_size = 8;
    size_t d_vis = 64;
    size_t n_layers = 5;   // n_layers - 1 are retained
    size_t n_heads = 4;
    size_t d_llm = 64;
    double keep_ratio = 1.0;
    merge::SortOrder sort_order = merge::SortOrder::ascending;
    MergePolicy merge_policy = MergePolicy::always;
    uint64_t sort_seed = 0;

    size_t n_used() const { return n_layers - 1; }
    size_t patches_per_side() const { return image_side / patch_size; }
    size_t n_patches() const { return patches_per_side() * patches_per_side(); }

    void validate() const;
    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);
};

struct Frame {
    std::vector<uint8_t> pixels;  // image_side * image_side * 3, row-major RGB
    size_t timestamp_index = 0;
};

struct FrameEmbedding {
    merge::FrameTokenSet tokens;  // embeddings in d_llm
    size_t frame_index = 0;
};

struct VisionWeights {
    // patch projection and positions
    std::vector<double> patch_w;  // d_vis x (patch_size^2 * 3)
    std::vector<double> patch_b;  // d_vis
    std::vector<double> cls;      // d_vis
    std::vector<double> pos;      // (n_patches + 1) x d_vis, CLS first

    struct Layer {
        std::vector<double> ln1_g, ln1_b, ln2_g, ln2_b;
        std::vector<double> wq, wk, wv, wo;  // d_vis x d_vis
        std::vector<double> mlp_w1, mlp_b1;  // hidden x d_vis, hidden
        std::vector<double> mlp_w2, mlp_b2;  // d_vis x hidden, d_vis
    };
    std::vector<Layer> layers;

    std::vector<double> conn_w1, conn_b1;  // d_llm x d_vis, d_llm
    std::vector<double> conn_w2, conn_b2;  // d_llm x d_llm, d_llm

    static VisionWeights init(const EncoderConfig& cfg, uint64_t seed);
    void pack(WeightStore& store, const std::string& prefix) const;
    static VisionWeights unpack(const WeightStore& store, const std::string& prefix,
                                const EncoderConfig& cfg);
};

merge::FrameTokenSet patchify(const Frame& frame, const EncoderConfig& cfg,
                              const VisionWeights& w);

struct FrameTrace {
    std::vector<merge::LayerTrace> layers;
};

FrameEmbedding encode_frame(const Frame& frame, const EncoderConfig& cfg,
                            const VisionWeights& w, bool apply_merge = true,
                            FrameTrace* trace = nullptr);

std::vector<FrameEmbedding> encode_video(const std::vector<Frame>& frames,
                                         const EncoderConfig& cfg, const VisionWeights& w,
                                         std::vector<FrameTrace>* traces = nullptr);

}  // namespace longvid::vision
