#include "longvid/vision.hpp"

#include <algorithm>
#include <cmath>

#include "longvid/common.hpp"

namespace longvid::vision {

using merge::FrameTokenSet;
using merge::MergedToken;

MergePolicy parse_merge_policy(const std::string& s) {
    if (s == "always") return MergePolicy::always;
    if (s == "multi-frame-only" || s == "multi_frame_only") return MergePolicy::multi_frame_only;
    throw ConfigError("unknown merge policy '" + s + "' (want always or multi-frame-only)");
}

std::string to_string(MergePolicy p) {
    return p == MergePolicy::always ? "always" : "multi-frame-only";
}

void EncoderConfig::validate() const {
    if (patch_size == 0 || image_side == 0) throw ConfigError("encoder config: zero geometry");
    if (image_side % patch_size != 0) {
        throw ConfigError("encoder config: image side " + std::to_string(image_side) +
                          " not divisible by patch size " + std::to_string(patch_size));
    }
    if (n_layers < 2) throw ConfigError("encoder config: need at least 2 layers (one is dropped)");
    if (d_vis == 0 || d_llm == 0) throw ConfigError("encoder config: zero width");
    if (n_heads == 0 || d_vis % n_heads != 0) {
        throw ConfigError("encoder config: heads must divide d_vis");
    }
    if (!(keep_ratio > 0.0) || keep_ratio > 1.0) {
        throw ConfigError("encoder config: keep ratio must be in (0,1]");
    }
}

nlohmann::json EncoderConfig::to_json() const {
    return {{"image_side", image_side},
            {"patch_size", patch_size},
            {"d_vis", d_vis},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"d_llm", d_llm},
            {"keep_ratio", keep_ratio},
            {"sort_order", merge::to_string(sort_order)},
            {"merge_policy", to_string(merge_policy)},
            {"sort_seed", sort_seed}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.image_side = j.value("image_side", c.image_side);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.d_vis = j.value("d_vis", c.d_vis);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_llm = j.value("d_llm", c.d_llm);
    c.keep_ratio = j.value("keep_ratio", c.keep_ratio);
    if (j.contains("sort_order")) c.sort_order = merge::parse_sort_order(j["sort_order"]);
    if (j.contains("merge_policy")) c.merge_policy = parse_merge_policy(j["merge_policy"]);
    c.sort_seed = j.value("sort_seed", c.sort_seed);
    c.validate();
    return c;
}

namespace {

std::vector<double> random_matrix(Rng& g, size_t n, double stddev) {
    std::vector<double> m(n);
    for (auto& x : m) x = normal(g, 0.0, stddev);
    return m;
}

void matvec_add(const std::vector<double>& m, const std::vector<double>& x,
                const std::vector<double>& b, size_t rows, size_t cols,
                std::vector<double>& out) {
    out.assign(rows, 0.0);
    for (size_t i = 0; i < rows; ++i) {
        double acc = b.empty() ? 0.0 : b[i];
        const double* row = &m[i * cols];
        for (size_t j = 0; j < cols; ++j) acc += row[j] * x[j];
        out[i] = acc;
    }
}

void layernorm(std::vector<double>& x, const std::vector<double>& g,
               const std::vector<double>& b) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= double(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= double(x.size());
    double inv = 1.0 / std::sqrt(var + 1e-5);
    for (size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean) * inv * g[i] + b[i];
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// bidirectional multi-head softmax attention over the token rows,
// residual added in place
void attention_sublayer(std::vector<std::vector<double>>& rows,
                        const VisionWeights::Layer& lp, size_t d, size_t heads) {
    size_t n = rows.size();
    size_t dh = d / heads;
    std::vector<std::vector<double>> q(n), k(n), v(n);
    std::vector<double> xn;
    for (size_t t = 0; t < n; ++t) {
        xn = rows[t];
        layernorm(xn, lp.ln1_g, lp.ln1_b);
        matvec_add(lp.wq, xn, {}, d, d, q[t]);
        matvec_add(lp.wk, xn, {}, d, d, k[t]);
        matvec_add(lp.wv, xn, {}, d, d, v[t]);
    }
    double scale = 1.0 / std::sqrt(double(dh));
    std::vector<double> mixed(d), scores(n), out;
    for (size_t t = 0; t < n; ++t) {
        std::fill(mixed.begin(), mixed.end(), 0.0);
        for (size_t h = 0; h < heads; ++h) {
            size_t base = h * dh;
            double mx = -std::numeric_limits<double>::infinity();
            for (size_t s = 0; s < n; ++s) {
                double acc = 0.0;
                for (size_t c = 0; c < dh; ++c) acc += q[t][base + c] * k[s][base + c];
                scores[s] = acc * scale;
                mx = std::max(mx, scores[s]);
            }
            double z = 0.0;
            for (size_t s = 0; s < n; ++s) {
                scores[s] = std::exp(scores[s] - mx);
                z += scores[s];
            }
            for (size_t s = 0; s < n; ++s) {
                double wgt = scores[s] / z;
                for (size_t c = 0; c < dh; ++c) mixed[base + c] += wgt * v[s][base + c];
            }
        }
        matvec_add(lp.wo, mixed, {}, d, d, out);
        for (size_t c = 0; c < d; ++c) rows[t][c] += out[c];
    }
}

void mlp_sublayer(std::vector<std::vector<double>>& rows, const VisionWeights::Layer& lp,
                  size_t d) {
    size_t hidden = lp.mlp_b1.size();
    std::vector<double> xn, h, out;
    for (auto& row : rows) {
        xn = row;
        layernorm(xn, lp.ln2_g, lp.ln2_b);
        matvec_add(lp.mlp_w1, xn, lp.mlp_b1, hidden, d, h);
        for (auto& x : h) x = gelu(x);
        matvec_add(lp.mlp_w2, h, lp.mlp_b2, d, hidden, out);
        for (size_t c = 0; c < d; ++c) row[c] += out[c];
    }
}

std::vector<std::vector<double>> gather_rows(const FrameTokenSet& ts) {
    std::vector<std::vector<double>> rows;
    rows.reserve(ts.patches.size() + 1);
    rows.push_back(ts.cls.embedding);
    for (const auto& t : ts.patches) rows.push_back(t.embedding);
    return rows;
}

void scatter_rows(FrameTokenSet& ts, std::vector<std::vector<double>>& rows) {
    ts.cls.embedding = std::move(rows[0]);
    for (size_t i = 0; i < ts.patches.size(); ++i) {
        ts.patches[i].embedding = std::move(rows[i + 1]);
    }
}

}  // namespace

VisionWeights VisionWeights::init(const EncoderConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng g(seed);
    VisionWeights w;
    size_t d = cfg.d_vis;
    size_t pdim = cfg.patch_size * cfg.patch_size * 3;
    size_t hidden = 4 * d;
    double s = 0.02;
    double s_res = 1e-4;

    w.patch_w = random_matrix(g, d * pdim, s);
    w.patch_b.assign(d, 0.0);
    w.cls = random_matrix(g, d, s);
    w.pos = random_matrix(g, (cfg.n_patches() + 1) * d, s);
    w.layers.resize(cfg.n_used());
    for (auto& lp : w.layers) {
        lp.ln1_g.assign(d, 1.0);
        lp.ln1_b.assign(d, 0.0);
        lp.ln2_g.assign(d, 1.0);
        lp.ln2_b.assign(d, 0.0);
        lp.wq = random_matrix(g, d * d, s);
        lp.wk = random_matrix(g, d * d, s);
        lp.wv = random_matrix(g, d * d, s);
        // residual-write matrices start near zero (see LmWeights::init)
        lp.wo = random_matrix(g, d * d, s_res);
        lp.mlp_w1 = random_matrix(g, hidden * d, s);
        lp.mlp_b1.assign(hidden, 0.0);
        lp.mlp_w2 = random_matrix(g, d * hidden, s_res);
        lp.mlp_b2.assign(d, 0.0);
    }
    w.conn_w1 = random_matrix(g, cfg.d_llm * d, s);
    w.conn_b1.assign(cfg.d_llm, 0.0);
    w.conn_w2 = random_matrix(g, cfg.d_llm * cfg.d_llm, s);
    w.conn_b2.assign(cfg.d_llm, 0.0);
    return w;
}

void VisionWeights::pack(WeightStore& store, const std::string& prefix) const {
    size_t d = cls.size();
    size_t pdim = patch_w.size() / d;
    size_t hidden = layers.empty() ? 0 : layers[0].mlp_b1.size();
    size_t d_llm = conn_b1.size();
    store.put(prefix + "patch_w", {d, pdim}, patch_w);
    store.put(prefix + "patch_b", {d}, patch_b);
    store.put(prefix + "cls", {d}, cls);
    store.put(prefix + "pos", {pos.size() / d, d}, pos);
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto& lp = layers[l];
        std::string p = prefix + "layer" + std::to_string(l) + ".";
        store.put(p + "ln1_g", {d}, lp.ln1_g);
        store.put(p + "ln1_b", {d}, lp.ln1_b);
        store.put(p + "ln2_g", {d}, lp.ln2_g);
        store.put(p + "ln2_b", {d}, lp.ln2_b);
        store.put(p + "wq", {d, d}, lp.wq);
        store.put(p + "wk", {d, d}, lp.wk);
        store.put(p + "wv", {d, d}, lp.wv);
        store.put(p + "wo", {d, d}, lp.wo);
        store.put(p + "mlp_w1", {hidden, d}, lp.mlp_w1);
        store.put(p + "mlp_b1", {hidden}, lp.mlp_b1);
        store.put(p + "mlp_w2", {d, hidden}, lp.mlp_w2);
        store.put(p + "mlp_b2", {d}, lp.mlp_b2);
    }
    store.put(prefix + "conn_w1", {d_llm, d}, conn_w1);
    store.put(prefix + "conn_b1", {d_llm}, conn_b1);
    store.put(prefix + "conn_w2", {d_llm, d_llm}, conn_w2);
    store.put(prefix + "conn_b2", {d_llm}, conn_b2);
}

VisionWeights VisionWeights::unpack(const WeightStore& store, const std::string& prefix,
                                    const EncoderConfig& cfg) {
    VisionWeights w;
    w.patch_w = store.get(prefix + "patch_w").data;
    w.patch_b = store.get(prefix + "patch_b").data;
    w.cls = store.get(prefix + "cls").data;
    w.pos = store.get(prefix + "pos").data;
    w.layers.resize(cfg.n_used());
    for (size_t l = 0; l < w.layers.size(); ++l) {
        auto& lp = w.layers[l];
        std::string p = prefix + "layer" + std::to_string(l) + ".";
        lp.ln1_g = store.get(p + "ln1_g").data;
        lp.ln1_b = store.get(p + "ln1_b").data;
        lp.ln2_g = store.get(p + "ln2_g").data;
        lp.ln2_b = store.get(p + "ln2_b").data;
        lp.wq = store.get(p + "wq").data;
        lp.wk = store.get(p + "wk").data;
        lp.wv = store.get(p + "wv").data;
        lp.wo = store.get(p + "wo").data;
        lp.mlp_w1 = store.get(p + "mlp_w1").data;
        lp.mlp_b1 = store.get(p + "mlp_b1").data;
        lp.mlp_w2 = store.get(p + "mlp_w2").data;
        lp.mlp_b2 = store.get(p + "mlp_b2").data;
    }
    w.conn_w1 = store.get(prefix + "conn_w1").data;
    w.conn_b1 = store.get(prefix + "conn_b1").data;
    w.conn_w2 = store.get(prefix + "conn_w2").data;
    w.conn_b2 = store.get(prefix + "conn_b2").data;
    return w;
}

FrameTokenSet patchify(const Frame& frame, const EncoderConfig& cfg, const VisionWeights& w) {
    cfg.validate();
    size_t side = cfg.image_side;
    if (frame.pixels.size() != side * side * 3) {
        throw ConfigError("patchify: frame has " + std::to_string(frame.pixels.size()) +
                          " bytes, config wants " + std::to_string(side * side * 3));
    }
    size_t ps = cfg.patch_size;
    size_t grid = cfg.patches_per_side();
    size_t d = cfg.d_vis;
    size_t pdim = ps * ps * 3;

    FrameTokenSet ts;
    ts.n_original = cfg.n_patches();
    ts.cls.embedding.resize(d);
    ts.cls.size = 1;
    ts.cls.origin = 0;
    for (size_t c = 0; c < d; ++c) ts.cls.embedding[c] = w.cls[c] + w.pos[c];

    std::vector<double> patch(pdim);
    for (size_t py = 0; py < grid; ++py) {
        for (size_t px = 0; px < grid; ++px) {
            size_t idx = py * grid + px;
            size_t at = 0;
            for (size_t y = 0; y < ps; ++y) {
                const uint8_t* row = &frame.pixels[((py * ps + y) * side + px * ps) * 3];
                for (size_t xc = 0; xc < ps * 3; ++xc) {
                    patch[at++] = double(row[xc]) / 255.0 * 2.0 - 1.0;
                }
            }
            MergedToken t;
            t.size = 1;
            t.origin = idx;
            t.embedding.resize(d);
            const double* posrow = &w.pos[(idx + 1) * d];
            for (size_t c = 0; c < d; ++c) {
                double acc = w.patch_b[c];
                const double* wrow = &w.patch_w[c * pdim];
                for (size_t j = 0; j < pdim; ++j) acc += wrow[j] * patch[j];
                t.embedding[c] = acc + posrow[c];
            }
            ts.patches.push_back(std::move(t));
        }
    }
    return ts;
}

FrameEmbedding encode_frame(const Frame& frame, const EncoderConfig& cfg,
                            const VisionWeights& w, bool apply_merge, FrameTrace* trace) {
    FrameTokenSet ts = patchify(frame, cfg, w);
    size_t layers = cfg.n_used();

    merge::MergeSchedule schedule;
    if (apply_merge) {
        schedule = merge::plan_schedule(cfg.n_patches(), layers, cfg.keep_ratio);
    }
    if (trace != nullptr) trace->layers.clear();

    for (size_t l = 0; l < layers; ++l) {
        auto rows = gather_rows(ts);
        attention_sublayer(rows, w.layers[l], cfg.d_vis, cfg.n_heads);
        scatter_rows(ts, rows);
        if (apply_merge) {
            uint64_t seed = cfg.sort_seed ^ (frame.timestamp_index * 0x9e3779b9u + l);
            merge::LayerTrace lt;
            ts = merge::stome_layer(ts, schedule.removals[l], cfg.sort_order, seed,
                                    trace != nullptr ? &lt : nullptr);
            if (trace != nullptr) trace->layers.push_back(std::move(lt));
        }
        rows = gather_rows(ts);
        mlp_sublayer(rows, w.layers[l], cfg.d_vis);
        scatter_rows(ts, rows);
    }

    // two-layer connector into the language model width
    FrameEmbedding out;
    out.frame_index = frame.timestamp_index;
    out.tokens.n_original = ts.n_original;
    auto project = [&](const MergedToken& t) {
        MergedToken p;
        p.size = t.size;
        p.origin = t.origin;
        std::vector<double> h;
        matvec_add(w.conn_w1, t.embedding, w.conn_b1, cfg.d_llm, cfg.d_vis, h);
        for (auto& x : h) x = gelu(x);
        matvec_add(w.conn_w2, h, w.conn_b2, cfg.d_llm, cfg.d_llm, p.embedding);
        return p;
    };
    out.tokens.cls = project(ts.cls);
    out.tokens.cls.size = 1;
    for (const auto& t : ts.patches) out.tokens.patches.push_back(project(t));
    out.tokens.validate();
    ensure_finite<double>(out.tokens.cls.embedding, "encoded CLS token");
    return out;
}

std::vector<FrameEmbedding> encode_video(const std::vector<Frame>& frames,
                                         const EncoderConfig& cfg, const VisionWeights& w,
                                         std::vector<FrameTrace>* traces) {
    if (frames.empty()) throw ConfigError("encode_video: no frames");
    size_t bytes = cfg.image_side * cfg.image_side * 3;
    for (size_t i = 0; i < frames.size(); ++i) {
        if (frames[i].pixels.size() != bytes) {
            throw ConfigError("encode_video: frame " + std::to_string(i) +
                              " geometry differs from the configured " +
                              std::to_string(cfg.image_side) + "x" +
                              std::to_string(cfg.image_side));
        }
    }
    bool apply = cfg.merge_policy == MergePolicy::always || frames.size() > 1;
    if (traces != nullptr) traces->assign(frames.size(), {});
    std::vector<FrameEmbedding> out;
    out.reserve(frames.size());
    for (size_t i = 0; i < frames.size(); ++i) {
        out.push_back(encode_frame(frames[i], cfg, w, apply,
                                   traces != nullptr ? &(*traces)[i] : nullptr));
    }
    return out;
}

}  // namespace longvid::vision
