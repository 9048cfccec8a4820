#pragma once

// Sandwich prompt assembly: instruction prefix tokens, then every frame's
// visual tokens, then the suffix tokens, with the layout ranges tracked
// for inspection.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "longvid/vision.hpp"

namespace longvid::prompt {

struct TextTokens {
    std::vector<int> ids;  // byte-level, 0..255
    std::string source_text;
};

TextTokens tokenize_stub(const std::string& text);
std::string detokenize_stub(const std::vector<int>& ids);

struct PromptLayout {
    std::pair<size_t, size_t> prefix_range;  // half-open
    std::pair<size_t, size_t> visual_range;
    std::pair<size_t, size_t> suffix_range;
    std::vector<size_t> frame_boundaries;

    size_t length() const { return suffix_range.second; }
    nlohmann::json to_json() const;
};

struct AssembledPrompt {
    std::vector<std::vector<double>> sequence;  // d_llm vectors
    PromptLayout layout;
};

// embed_table is vocab x d_llm row-major; visual tokens enter already in
// d_llm (post-connector), CLS first within each frame
AssembledPrompt assemble_sandwich(const TextTokens& prefix,
                                  const std::vector<vision::FrameEmbedding>& visual,
                                  const TextTokens& suffix,
                                  const std::vector<double>& embed_table, size_t d_llm);

}  // namespace longvid::prompt
