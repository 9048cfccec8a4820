#pragma once

// Toy end-to-end model: vision encoder with in-network token merging, the
// sandwich prompt, a stack of RWKV blocks and a classification head. Two
// forward paths share one weight struct: a plain inference path built on
// the library pieces, and a tape path for training. Constrained
// parameters are stored raw and materialized on use (shift weights
// through a sigmoid, decay rates through an exponential), so gradient
// steps can never push them outside their domains.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "longvid/autograd.hpp"
#include "longvid/rwkv_block.hpp"
#include "longvid/vision.hpp"

namespace longvid::model {

struct LmConfig {
    vision::EncoderConfig enc;
    size_t d_llm = 64;
    size_t n_blocks = 2;
    size_t ffn_hidden = 256;
    size_t vocab = 256;  // byte-level tokenizer
    size_t n_classes = 4;
    std::string prefix_text = "which color is marked? ";
    std::string suffix_text = " answer:";

    void validate() const;
    nlohmann::json to_json() const;
    static LmConfig from_json(const nlohmann::json& j);

    // toy-train defaults: 32-pixel frames, patch 8, d_vis 32, d_llm 64,
    // two blocks; six encoder layers is the minimum that makes the 0.1
    // keep ratio feasible on a 16-patch grid
    static LmConfig toy_defaults();
};

struct BlockWeights {
    std::vector<double> ln1_g, ln1_b, ln2_g, ln2_b;
    std::vector<double> mu_raw_r, mu_raw_k, mu_raw_v;  // sigmoid -> shift mu
    std::vector<double> mu_cm_raw_k, mu_cm_raw_r;
    std::vector<double> w_raw;  // exp -> decay w
    std::vector<double> u;
    std::vector<double> w_r, w_k, w_v, w_o;  // d x d
    std::vector<double> w_cm_k;              // hidden x d
    std::vector<double> w_cm_v;              // d x hidden
    std::vector<double> w_cm_r;              // d x d
};

struct NamedParam {
    std::string name;
    std::vector<double>* data;
    size_t rows, cols;
};

struct LmWeights {
    vision::VisionWeights vis;
    std::vector<double> embed;  // vocab x d_llm
    std::vector<BlockWeights> blocks;
    std::vector<double> ln_out_g, ln_out_b;
    std::vector<double> head_w;  // n_classes x d_llm
    std::vector<double> head_b;

    static LmWeights init(const LmConfig& cfg, uint64_t seed);
    void pack(WeightStore& store) const;
    static LmWeights unpack(const WeightStore& store, const LmConfig& cfg);

    // every trainable tensor with its canonical name and shape
    std::vector<NamedParam> entries(const LmConfig& cfg);
};

// raw block weights -> validated plain-path parameters
rwkv::BlockParams<double> materialize_block(const BlockWeights& bw, size_t d, size_t hidden);

// library-pieces inference path: encode, sandwich, blocks, head
std::vector<double> plain_logits(const LmConfig& cfg, const LmWeights& w,
                                 const std::vector<vision::Frame>& frames);

struct TapeRun {
    int logits = -1;  // [1, n_classes]
    int loss = -1;    // [1, 1]; only set when a label is given
    std::vector<std::pair<std::string, int>> params;
    std::vector<size_t> tokens_per_frame;
};

// trainable path; label < 0 skips the loss node
TapeRun tape_forward(ad::Tape& tape, const LmConfig& cfg, LmWeights& w,
                     const std::vector<vision::Frame>& frames, int label);

int argmax_class(const std::vector<double>& logits);

}  // namespace longvid::model
