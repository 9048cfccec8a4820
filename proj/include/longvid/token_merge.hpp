#pragma once

// Sorted visual token merge: alternating bipartite partition, cosine
// scoring, best-edge top-r matching, size-weighted merging and a final
// size sort. The CLS token never participates; patch mass (the sum of
// token sizes) is conserved by every layer.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace longvid::merge {

struct MergedToken {
    std::vector<double> embedding;
    size_t size = 1;    // original patches represented
    size_t origin = 0;  // earliest original patch index contained
};

struct FrameTokenSet {
    MergedToken cls;
    std::vector<MergedToken> patches;
    size_t n_original = 0;

    // throws if sizes do not sum to n_original or invariants are broken
    void validate() const;
};

// Indices are positions into the token list handed to
// bipartite_soft_match: even positions form side A, odd positions side B.
// Each pair is (merged-away A member, B target); several A members may
// share one target. unmerged lists every position that is neither a pair
// member nor a target.
struct MergeDecision {
    std::vector<std::pair<size_t, size_t>> pairs;
    std::vector<size_t> unmerged;
};

enum class SortOrder { ascending, descending, random };

SortOrder parse_sort_order(const std::string& s);
std::string to_string(SortOrder order);

std::pair<std::vector<MergedToken>, std::vector<MergedToken>> partition_alternating(
    const std::vector<MergedToken>& tokens);

// score[i][j] = cosine of A[i] and B[j]; zero-norm embeddings score 0
std::vector<std::vector<double>> similarity_scores(const std::vector<MergedToken>& a,
                                                   const std::vector<MergedToken>& b);

MergeDecision bipartite_soft_match(const std::vector<MergedToken>& tokens,
                                   const std::vector<std::vector<double>>& scores, size_t r);

// Collapses each target group to one token: embedding is the size-weighted
// mean accumulated in ascending token-list position order, size the sum,
// origin the minimum. Unmerged tokens pass through in position order.
std::vector<MergedToken> merge_tokens(const MergeDecision& decision,
                                      const std::vector<MergedToken>& tokens);

// ascending/descending by size, ties by origin ascending; random is a
// seeded shuffle
std::vector<MergedToken> sort_by_size(std::vector<MergedToken> tokens, SortOrder order,
                                      uint64_t seed = 0);

struct LayerTrace {
    size_t r = 0;
    std::vector<std::pair<size_t, size_t>> pairs;
    std::vector<size_t> sizes_after;
    std::vector<size_t> origins_after;
};

FrameTokenSet stome_layer(const FrameTokenSet& frame, size_t r, SortOrder order,
                          uint64_t seed = 0, LayerTrace* trace = nullptr);

struct MergeSchedule {
    std::vector<size_t> removals;
    double keep_ratio = 1.0;

    size_t total_removed() const;
};

// Splits n_patches - round(keep_ratio * n_patches) removals over the merge
// layers, remainder to the earliest layers. Throws if some layer would
// have to remove more than half its tokens, proposing the nearest
// feasible ratio.
MergeSchedule plan_schedule(size_t n_patches, size_t n_merge_layers, double keep_ratio);

}  // namespace longvid::merge
