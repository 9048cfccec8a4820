#include "longvid/token_merge.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "longvid/common.hpp"

namespace longvid::merge {

void FrameTokenSet::validate() const {
    if (cls.size != 1) throw ConfigError("frame tokens: CLS size must stay 1");
    size_t total = 0;
    for (const auto& t : patches) {
        if (t.size == 0) throw ConfigError("frame tokens: zero-size patch token");
        total += t.size;
        ensure_finite<double>(t.embedding, "patch embedding");
    }
    if (total != n_original) {
        throw NumericError("frame tokens: sizes sum to " + std::to_string(total) +
                           ", expected " + std::to_string(n_original));
    }
}

SortOrder parse_sort_order(const std::string& s) {
    if (s == "asc" || s == "ascending") return SortOrder::ascending;
    if (s == "desc" || s == "descending") return SortOrder::descending;
    if (s == "random") return SortOrder::random;
    throw ConfigError("unknown sort order '" + s + "' (want asc, desc or random)");
}

std::string to_string(SortOrder order) {
    switch (order) {
        case SortOrder::ascending: return "asc";
        case SortOrder::descending: return "desc";
        case SortOrder::random: return "random";
    }
    return "?";
}

std::pair<std::vector<MergedToken>, std::vector<MergedToken>> partition_alternating(
    const std::vector<MergedToken>& tokens) {
    if (tokens.empty()) throw ConfigError("partition_alternating: no tokens");
    std::vector<MergedToken> a, b;
    for (size_t i = 0; i < tokens.size(); ++i) {
        (i % 2 == 0 ? a : b).push_back(tokens[i]);
    }
    return {std::move(a), std::move(b)};
}

std::vector<std::vector<double>> similarity_scores(const std::vector<MergedToken>& a,
                                                   const std::vector<MergedToken>& b) {
    std::vector<std::vector<double>> scores(a.size(), std::vector<double>(b.size(), 0.0));
    for (size_t i = 0; i < a.size(); ++i) {
        for (size_t j = 0; j < b.size(); ++j) {
            const auto& x = a[i].embedding;
            const auto& y = b[j].embedding;
            if (x.size() != y.size()) {
                throw ConfigError("similarity_scores: embedding dimension mismatch");
            }
            double dot = 0.0, nx = 0.0, ny = 0.0;
            for (size_t c = 0; c < x.size(); ++c) {
                dot += x[c] * y[c];
                nx += x[c] * x[c];
                ny += y[c] * y[c];
            }
            if (nx == 0.0 || ny == 0.0) continue;
            scores[i][j] = dot / (std::sqrt(nx) * std::sqrt(ny));
        }
    }
    return scores;
}

MergeDecision bipartite_soft_match(const std::vector<MergedToken>& tokens,
                                   const std::vector<std::vector<double>>& scores,
                                   size_t r) {
    size_t n = tokens.size();
    size_t n_a = (n + 1) / 2;
    size_t n_b = n / 2;
    if (r > n_b) {
        throw ConfigError("bipartite_soft_match: r=" + std::to_string(r) +
                          " exceeds the merge-target count " + std::to_string(n_b));
    }
    if (scores.size() != n_a) throw ConfigError("bipartite_soft_match: score rows mismatch");

    // best edge per A token, ties to the lowest B index
    std::vector<size_t> best(n_a, 0);
    std::vector<double> best_score(n_a, 0.0);
    for (size_t i = 0; i < n_a; ++i) {
        if (scores[i].size() != n_b) {
            throw ConfigError("bipartite_soft_match: score cols mismatch");
        }
        double s = -std::numeric_limits<double>::infinity();
        size_t arg = 0;
        for (size_t j = 0; j < n_b; ++j) {
            if (scores[i][j] > s) {
                s = scores[i][j];
                arg = j;
            }
        }
        best[i] = arg;
        best_score[i] = s;
    }

    // take the r highest best-edge scores, ties to the lowest A index
    std::vector<size_t> rank(n_a);
    std::iota(rank.begin(), rank.end(), size_t(0));
    std::stable_sort(rank.begin(), rank.end(),
                     [&](size_t x, size_t y) { return best_score[x] > best_score[y]; });

    MergeDecision d;
    std::vector<char> is_src(n, 0), is_dst(n, 0);
    std::vector<size_t> chosen(rank.begin(), rank.begin() + std::min(r, rank.size()));
    std::sort(chosen.begin(), chosen.end());
    for (size_t i : chosen) {
        size_t src = 2 * i;
        size_t dst = 2 * best[i] + 1;
        d.pairs.emplace_back(src, dst);
        is_src[src] = 1;
        is_dst[dst] = 1;
    }
    for (size_t pos = 0; pos < n; ++pos) {
        if (!is_src[pos] && !is_dst[pos]) d.unmerged.push_back(pos);
    }
    return d;
}

std::vector<MergedToken> merge_tokens(const MergeDecision& decision,
                                      const std::vector<MergedToken>& tokens) {
    size_t n = tokens.size();
    std::vector<char> is_src(n, 0);
    std::map<size_t, std::vector<size_t>> groups;  // dst -> member positions
    for (auto [src, dst] : decision.pairs) {
        if (src >= n || dst >= n) throw ConfigError("merge_tokens: pair index out of range");
        is_src[src] = 1;
        groups[dst].push_back(src);
    }
    std::vector<MergedToken> out;
    out.reserve(n - decision.pairs.size());
    for (size_t pos = 0; pos < n; ++pos) {
        if (is_src[pos]) continue;
        auto it = groups.find(pos);
        if (it == groups.end()) {
            out.push_back(tokens[pos]);
            continue;
        }
        std::vector<size_t> members = it->second;
        members.push_back(pos);
        std::sort(members.begin(), members.end());
        MergedToken m;
        m.embedding.assign(tokens[pos].embedding.size(), 0.0);
        m.size = 0;
        m.origin = tokens[members[0]].origin;
        for (size_t mem : members) {
            const auto& t = tokens[mem];
            double wgt = double(t.size);
            for (size_t c = 0; c < m.embedding.size(); ++c) {
                m.embedding[c] += wgt * t.embedding[c];
            }
            m.size += t.size;
            m.origin = std::min(m.origin, t.origin);
        }
        for (auto& c : m.embedding) c /= double(m.size);
        out.push_back(std::move(m));
    }
    return out;
}

std::vector<MergedToken> sort_by_size(std::vector<MergedToken> tokens, SortOrder order,
                                      uint64_t seed) {
    switch (order) {
        case SortOrder::ascending:
            std::stable_sort(tokens.begin(), tokens.end(),
                             [](const MergedToken& x, const MergedToken& y) {
                                 if (x.size != y.size) return x.size < y.size;
                                 return x.origin < y.origin;
                             });
            break;
        case SortOrder::descending:
            std::stable_sort(tokens.begin(), tokens.end(),
                             [](const MergedToken& x, const MergedToken& y) {
                                 if (x.size != y.size) return x.size > y.size;
                                 return x.origin < y.origin;
                             });
            break;
        case SortOrder::random: {
            Rng g(seed);
            std::vector<size_t> idx(tokens.size());
            std::iota(idx.begin(), idx.end(), size_t(0));
            shuffle_indices(idx.begin(), idx.end(), g);
            std::vector<MergedToken> shuffled;
            shuffled.reserve(tokens.size());
            for (size_t i : idx) shuffled.push_back(std::move(tokens[i]));
            tokens = std::move(shuffled);
            break;
        }
    }
    return tokens;
}

FrameTokenSet stome_layer(const FrameTokenSet& frame, size_t r, SortOrder order,
                          uint64_t seed, LayerTrace* trace) {
    if (r > frame.patches.size() / 2) {
        throw ConfigError("stome_layer: r=" + std::to_string(r) + " exceeds half of " +
                          std::to_string(frame.patches.size()) + " patch tokens");
    }
    auto [a, b] = partition_alternating(frame.patches);
    auto scores = similarity_scores(a, b);
    auto decision = bipartite_soft_match(frame.patches, scores, r);
    auto merged = merge_tokens(decision, frame.patches);
    auto sorted = sort_by_size(std::move(merged), order, seed);

    FrameTokenSet out;
    out.cls = frame.cls;
    out.patches = std::move(sorted);
    out.n_original = frame.n_original;
    out.validate();
    if (trace != nullptr) {
        trace->r = r;
        trace->pairs = decision.pairs;
        trace->sizes_after.clear();
        trace->origins_after.clear();
        for (const auto& t : out.patches) {
            trace->sizes_after.push_back(t.size);
            trace->origins_after.push_back(t.origin);
        }
    }
    return out;
}

size_t MergeSchedule::total_removed() const {
    size_t total = 0;
    for (size_t r : removals) total += r;
    return total;
}

namespace {

// base + remainder-to-earliest split of `total` over `layers`
std::vector<size_t> split_removals(size_t total, size_t layers) {
    std::vector<size_t> r(layers, total / layers);
    for (size_t l = 0; l < total % layers; ++l) r[l] += 1;
    return r;
}

// first layer whose removal exceeds half its incoming tokens, or -1
long feasibility_violation(const std::vector<size_t>& removals, size_t n0) {
    size_t n = n0;
    for (size_t l = 0; l < removals.size(); ++l) {
        if (removals[l] > n / 2) return long(l);
        n -= removals[l];
    }
    return -1;
}

}  // namespace

MergeSchedule plan_schedule(size_t n_patches, size_t n_merge_layers, double keep_ratio) {
    if (n_patches == 0) throw ConfigError("plan_schedule: no patches");
    if (n_merge_layers == 0) throw ConfigError("plan_schedule: no merge layers");
    if (!(keep_ratio > 0.0) || keep_ratio > 1.0) {
        throw ConfigError("plan_schedule: keep ratio must be in (0,1], got " +
                          std::to_string(keep_ratio));
    }
    size_t keep = size_t(std::lround(keep_ratio * double(n_patches)));
    size_t total = n_patches - keep;

    MergeSchedule s;
    s.keep_ratio = keep_ratio;
    s.removals = split_removals(total, n_merge_layers);
    long bad = feasibility_violation(s.removals, n_patches);
    if (bad < 0) return s;

    // search upward for the closest keep count whose schedule fits
    for (size_t k = keep + 1; k <= n_patches; ++k) {
        auto alt = split_removals(n_patches - k, n_merge_layers);
        if (feasibility_violation(alt, n_patches) < 0) {
            double proposal = double(k) / double(n_patches);
            throw ConfigError(
                "plan_schedule: infeasible at layer " + std::to_string(bad) +
                " (keep ratio " + std::to_string(keep_ratio) + " over " +
                std::to_string(n_merge_layers) + " layers on " + std::to_string(n_patches) +
                " patches); nearest feasible keep ratio is " + std::to_string(proposal) +
                " (keeps " + std::to_string(k) + ")");
        }
    }
    throw ConfigError("plan_schedule: no feasible schedule for " + std::to_string(n_patches) +
                      " patches over " + std::to_string(n_merge_layers) + " layers");
}

}  // namespace longvid::merge
