#include "longvid/prompt.hpp"

#include "longvid/common.hpp"

namespace longvid::prompt {

TextTokens tokenize_stub(const std::string& text) {
    TextTokens t;
    t.source_text = text;
    t.ids.reserve(text.size());
    for (unsigned char c : text) t.ids.push_back(int(c));
    return t;
}

std::string detokenize_stub(const std::vector<int>& ids) {
    std::string s;
    s.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id > 255) {
            throw ConfigError("detokenize: id " + std::to_string(id) + " outside byte range");
        }
        s.push_back(char(static_cast<unsigned char>(id)));
    }
    return s;
}

nlohmann::json PromptLayout::to_json() const {
    return {{"prefix_range", {prefix_range.first, prefix_range.second}},
            {"visual_range", {visual_range.first, visual_range.second}},
            {"suffix_range", {suffix_range.first, suffix_range.second}},
            {"frame_boundaries", frame_boundaries},
            {"length", length()}};
}

AssembledPrompt assemble_sandwich(const TextTokens& prefix,
                                  const std::vector<vision::FrameEmbedding>& visual,
                                  const TextTokens& suffix,
                                  const std::vector<double>& embed_table, size_t d_llm) {
    if (d_llm == 0 || embed_table.size() % d_llm != 0) {
        throw ConfigError("assemble_sandwich: embedding table is not vocab x d_llm");
    }
    size_t vocab = embed_table.size() / d_llm;
    size_t n_visual = 0;
    for (const auto& fe : visual) n_visual += fe.tokens.patches.size() + 1;
    if (n_visual == 0) {
        throw ConfigError("assemble_sandwich: no visual tokens (the sandwich needs a filling)");
    }

    AssembledPrompt out;
    out.sequence.reserve(prefix.ids.size() + n_visual + suffix.ids.size());
    auto embed = [&](int id) {
        if (id < 0 || size_t(id) >= vocab) {
            throw ConfigError("assemble_sandwich: token id " + std::to_string(id) +
                              " outside vocab " + std::to_string(vocab));
        }
        const double* row = &embed_table[size_t(id) * d_llm];
        out.sequence.emplace_back(row, row + d_llm);
    };
    auto push_visual = [&](const std::vector<double>& e) {
        if (e.size() != d_llm) {
            throw ConfigError("assemble_sandwich: visual token width " +
                              std::to_string(e.size()) + " != d_llm " + std::to_string(d_llm));
        }
        out.sequence.push_back(e);
    };

    for (int id : prefix.ids) embed(id);
    out.layout.prefix_range = {0, out.sequence.size()};
    for (const auto& fe : visual) {
        out.layout.frame_boundaries.push_back(out.sequence.size());
        push_visual(fe.tokens.cls.embedding);
        for (const auto& t : fe.tokens.patches) push_visual(t.embedding);
    }
    out.layout.visual_range = {out.layout.prefix_range.second, out.sequence.size()};
    for (int id : suffix.ids) embed(id);
    out.layout.suffix_range = {out.layout.visual_range.second, out.sequence.size()};
    return out;
}

}  // namespace longvid::prompt
