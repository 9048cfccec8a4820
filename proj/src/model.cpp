#include "longvid/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "longvid/prompt.hpp"
#include "longvid/token_merge.hpp"

namespace longvid::model {

void LmConfig::validate() const {
    enc.validate();
    if (d_llm != enc.d_llm) {
        throw ConfigError("model config: d_llm " + std::to_string(d_llm) +
                          " does not match connector output " + std::to_string(enc.d_llm));
    }
    if (n_blocks == 0 || ffn_hidden == 0) throw ConfigError("model config: zero LM geometry");
    if (vocab < 256) throw ConfigError("model config: vocab must cover the byte tokenizer");
    if (n_classes < 2) throw ConfigError("model config: need at least 2 classes");
}

nlohmann::json LmConfig::to_json() const {
    return {{"encoder", enc.to_json()},     {"d_llm", d_llm},
            {"n_blocks", n_blocks},         {"ffn_hidden", ffn_hidden},
            {"vocab", vocab},               {"n_classes", n_classes},
            {"prefix_text", prefix_text},   {"suffix_text", suffix_text}};
}

LmConfig LmConfig::from_json(const nlohmann::json& j) {
    LmConfig c = toy_defaults();
    if (j.contains("encoder")) c.enc = vision::EncoderConfig::from_json(j["encoder"]);
    c.d_llm = j.value("d_llm", c.d_llm);
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.vocab = j.value("vocab", c.vocab);
    c.n_classes = j.value("n_classes", c.n_classes);
    c.prefix_text = j.value("prefix_text", c.prefix_text);
    c.suffix_text = j.value("suffix_text", c.suffix_text);
    c.validate();
    return c;
}

LmConfig LmConfig::toy_defaults() {
    LmConfig c;
    c.enc.image_side = 32;
    c.enc.patch_size = 8;
    c.enc.d_vis = 32;
    c.enc.n_layers = 6;
    c.enc.n_heads = 4;
    c.enc.d_llm = 64;
    c.enc.keep_ratio = 0.1;
    c.enc.sort_order = merge::SortOrder::ascending;
    c.enc.merge_policy = vision::MergePolicy::always;
    c.d_llm = 64;
    c.n_blocks = 2;
    c.ffn_hidden = 256;
    return c;
}

namespace {

std::vector<double> random_matrix(Rng& g, size_t n, double stddev) {
    std::vector<double> m(n);
    for (auto& x : m) x = normal(g, 0.0, stddev);
    return m;
}

}  // namespace

LmWeights LmWeights::init(const LmConfig& cfg, uint64_t seed) {
    cfg.validate();
    LmWeights w;
    w.vis = vision::VisionWeights::init(cfg.enc, seed);

    Rng g(seed ^ 0x9e3779b97f4a7c15ull);
    size_t d = cfg.d_llm;
    size_t hidden = cfg.ffn_hidden;
    double s = 0.02;
    double s_res = 1e-4;

    w.embed = random_matrix(g, cfg.vocab * d, s);
    w.blocks.resize(cfg.n_blocks);
    for (auto& b : w.blocks) {
        b.ln1_g.assign(d, 1.0);
        b.ln1_b.assign(d, 0.0);
        b.ln2_g.assign(d, 1.0);
        b.ln2_b.assign(d, 0.0);
        b.mu_raw_r.assign(d, 0.0);  // sigmoid(0) = 0.5
        b.mu_raw_k.assign(d, 0.0);
        b.mu_raw_v.assign(d, 0.0);
        b.mu_cm_raw_k.assign(d, 0.0);
        b.mu_cm_raw_r.assign(d, 0.0);
        b.w_raw.resize(d);
        for (size_t c = 0; c < d; ++c) {
            // geometric decay ramp: slow channels (w ~ 0.01) can carry
            // information across the whole toy sequence, fast ones local
            double frac = double(c) / double(d - 1);
            b.w_raw[c] = std::log(0.01) + frac * (std::log(1.5) - std::log(0.01));
        }
        b.u = random_matrix(g, d, 0.2);
        b.w_r = random_matrix(g, d * d, s);
        b.w_k = random_matrix(g, d * d, s);
        b.w_v = random_matrix(g, d * d, s);
        // projections writing into the residual stream start near zero so
        // the untrained network is close to identity and blocks fade in
        b.w_o = random_matrix(g, d * d, s_res);
        b.w_cm_k = random_matrix(g, hidden * d, s);
        b.w_cm_v = random_matrix(g, d * hidden, s_res);
        b.w_cm_r = random_matrix(g, d * d, s);
    }
    w.ln_out_g.assign(d, 1.0);
    w.ln_out_b.assign(d, 0.0);
    w.head_w = random_matrix(g, cfg.n_classes * d, s);
    w.head_b.assign(cfg.n_classes, 0.0);
    return w;
}

void LmWeights::pack(WeightStore& store) const {
    vis.pack(store, "vit.");
    size_t d = ln_out_g.size();
    store.put("lm.embed", {embed.size() / d, d}, embed);
    for (size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        size_t hidden = b.w_cm_k.size() / d;
        std::string p = "lm.block" + std::to_string(i) + ".";
        store.put(p + "ln1_g", {d}, b.ln1_g);
        store.put(p + "ln1_b", {d}, b.ln1_b);
        store.put(p + "ln2_g", {d}, b.ln2_g);
        store.put(p + "ln2_b", {d}, b.ln2_b);
        store.put(p + "mu_raw_r", {d}, b.mu_raw_r);
        store.put(p + "mu_raw_k", {d}, b.mu_raw_k);
        store.put(p + "mu_raw_v", {d}, b.mu_raw_v);
        store.put(p + "mu_cm_raw_k", {d}, b.mu_cm_raw_k);
        store.put(p + "mu_cm_raw_r", {d}, b.mu_cm_raw_r);
        store.put(p + "w_raw", {d}, b.w_raw);
        store.put(p + "u", {d}, b.u);
        store.put(p + "w_r", {d, d}, b.w_r);
        store.put(p + "w_k", {d, d}, b.w_k);
        store.put(p + "w_v", {d, d}, b.w_v);
        store.put(p + "w_o", {d, d}, b.w_o);
        store.put(p + "w_cm_k", {hidden, d}, b.w_cm_k);
        store.put(p + "w_cm_v", {d, hidden}, b.w_cm_v);
        store.put(p + "w_cm_r", {d, d}, b.w_cm_r);
    }
    store.put("lm.ln_out_g", {d}, ln_out_g);
    store.put("lm.ln_out_b", {d}, ln_out_b);
    store.put("lm.head_w", {head_b.size(), d}, head_w);
    store.put("lm.head_b", {head_b.size()}, head_b);
}

LmWeights LmWeights::unpack(const WeightStore& store, const LmConfig& cfg) {
    LmWeights w;
    w.vis = vision::VisionWeights::unpack(store, "vit.", cfg.enc);
    w.embed = store.get("lm.embed").data;
    w.blocks.resize(cfg.n_blocks);
    for (size_t i = 0; i < cfg.n_blocks; ++i) {
        auto& b = w.blocks[i];
        std::string p = "lm.block" + std::to_string(i) + ".";
        b.ln1_g = store.get(p + "ln1_g").data;
        b.ln1_b = store.get(p + "ln1_b").data;
        b.ln2_g = store.get(p + "ln2_g").data;
        b.ln2_b = store.get(p + "ln2_b").data;
        b.mu_raw_r = store.get(p + "mu_raw_r").data;
        b.mu_raw_k = store.get(p + "mu_raw_k").data;
        b.mu_raw_v = store.get(p + "mu_raw_v").data;
        b.mu_cm_raw_k = store.get(p + "mu_cm_raw_k").data;
        b.mu_cm_raw_r = store.get(p + "mu_cm_raw_r").data;
        b.w_raw = store.get(p + "w_raw").data;
        b.u = store.get(p + "u").data;
        b.w_r = store.get(p + "w_r").data;
        b.w_k = store.get(p + "w_k").data;
        b.w_v = store.get(p + "w_v").data;
        b.w_o = store.get(p + "w_o").data;
        b.w_cm_k = store.get(p + "w_cm_k").data;
        b.w_cm_v = store.get(p + "w_cm_v").data;
        b.w_cm_r = store.get(p + "w_cm_r").data;
    }
    w.ln_out_g = store.get("lm.ln_out_g").data;
    w.ln_out_b = store.get("lm.ln_out_b").data;
    w.head_w = store.get("lm.head_w").data;
    w.head_b = store.get("lm.head_b").data;
    return w;
}

std::vector<NamedParam> LmWeights::entries(const LmConfig& cfg) {
    size_t dv = cfg.enc.d_vis;
    size_t pdim = cfg.enc.patch_size * cfg.enc.patch_size * 3;
    size_t vh = 4 * dv;
    size_t d = cfg.d_llm;
    size_t hidden = cfg.ffn_hidden;

    std::vector<NamedParam> out;
    out.push_back({"vit.patch_w", &vis.patch_w, dv, pdim});
    out.push_back({"vit.patch_b", &vis.patch_b, 1, dv});
    out.push_back({"vit.cls", &vis.cls, 1, dv});
    out.push_back({"vit.pos", &vis.pos, cfg.enc.n_patches() + 1, dv});
    for (size_t l = 0; l < vis.layers.size(); ++l) {
        auto& lp = vis.layers[l];
        std::string p = "vit.layer" + std::to_string(l) + ".";
        out.push_back({p + "ln1_g", &lp.ln1_g, 1, dv});
        out.push_back({p + "ln1_b", &lp.ln1_b, 1, dv});
        out.push_back({p + "ln2_g", &lp.ln2_g, 1, dv});
        out.push_back({p + "ln2_b", &lp.ln2_b, 1, dv});
        out.push_back({p + "wq", &lp.wq, dv, dv});
        out.push_back({p + "wk", &lp.wk, dv, dv});
        out.push_back({p + "wv", &lp.wv, dv, dv});
        out.push_back({p + "wo", &lp.wo, dv, dv});
        out.push_back({p + "mlp_w1", &lp.mlp_w1, vh, dv});
        out.push_back({p + "mlp_b1", &lp.mlp_b1, 1, vh});
        out.push_back({p + "mlp_w2", &lp.mlp_w2, dv, vh});
        out.push_back({p + "mlp_b2", &lp.mlp_b2, 1, dv});
    }
    out.push_back({"vit.conn_w1", &vis.conn_w1, d, dv});
    out.push_back({"vit.conn_b1", &vis.conn_b1, 1, d});
    out.push_back({"vit.conn_w2", &vis.conn_w2, d, d});
    out.push_back({"vit.conn_b2", &vis.conn_b2, 1, d});
    out.push_back({"lm.embed", &embed, cfg.vocab, d});
    for (size_t i = 0; i < blocks.size(); ++i) {
        auto& b = blocks[i];
        std::string p = "lm.block" + std::to_string(i) + ".";
        out.push_back({p + "ln1_g", &b.ln1_g, 1, d});
        out.push_back({p + "ln1_b", &b.ln1_b, 1, d});
        out.push_back({p + "ln2_g", &b.ln2_g, 1, d});
        out.push_back({p + "ln2_b", &b.ln2_b, 1, d});
        out.push_back({p + "mu_raw_r", &b.mu_raw_r, 1, d});
        out.push_back({p + "mu_raw_k", &b.mu_raw_k, 1, d});
        out.push_back({p + "mu_raw_v", &b.mu_raw_v, 1, d});
        out.push_back({p + "mu_cm_raw_k", &b.mu_cm_raw_k, 1, d});
        out.push_back({p + "mu_cm_raw_r", &b.mu_cm_raw_r, 1, d});
        out.push_back({p + "w_raw", &b.w_raw, 1, d});
        out.push_back({p + "u", &b.u, 1, d});
        out.push_back({p + "w_r", &b.w_r, d, d});
        out.push_back({p + "w_k", &b.w_k, d, d});
        out.push_back({p + "w_v", &b.w_v, d, d});
        out.push_back({p + "w_o", &b.w_o, d, d});
        out.push_back({p + "w_cm_k", &b.w_cm_k, hidden, d});
        out.push_back({p + "w_cm_v", &b.w_cm_v, d, hidden});
        out.push_back({p + "w_cm_r", &b.w_cm_r, d, d});
    }
    out.push_back({"lm.ln_out_g", &ln_out_g, 1, d});
    out.push_back({"lm.ln_out_b", &ln_out_b, 1, d});
    out.push_back({"lm.head_w", &head_w, cfg.n_classes, d});
    out.push_back({"lm.head_b", &head_b, 1, cfg.n_classes});

    for (const auto& np : out) {
        if (np.data->size() != np.rows * np.cols) {
            throw ConfigError("model weights: " + np.name + " has " +
                              std::to_string(np.data->size()) + " values, expected " +
                              std::to_string(np.rows * np.cols));
        }
    }
    return out;
}

rwkv::BlockParams<double> materialize_block(const BlockWeights& bw, size_t d, size_t hidden) {
    rwkv::BlockParams<double> p;
    p.d = d;
    p.hidden = hidden;
    auto squash = [](const std::vector<double>& raw) {
        std::vector<double> out(raw.size());
        for (size_t i = 0; i < raw.size(); ++i) out[i] = rwkv::detail::sigmoid(raw[i]);
        return out;
    };
    p.shift.mu_r = squash(bw.mu_raw_r);
    p.shift.mu_k = squash(bw.mu_raw_k);
    p.shift.mu_v = squash(bw.mu_raw_v);
    p.mu_cm_k = squash(bw.mu_cm_raw_k);
    p.mu_cm_r = squash(bw.mu_cm_raw_r);
    p.decay.w.resize(bw.w_raw.size());
    for (size_t i = 0; i < bw.w_raw.size(); ++i) p.decay.w[i] = std::exp(bw.w_raw[i]);
    p.decay.u = bw.u;
    p.w_r = bw.w_r;
    p.w_k = bw.w_k;
    p.w_v = bw.w_v;
    p.w_o = bw.w_o;
    p.w_cm_k = bw.w_cm_k;
    p.w_cm_v = bw.w_cm_v;
    p.w_cm_r = bw.w_cm_r;
    p.ln1_g = bw.ln1_g;
    p.ln1_b = bw.ln1_b;
    p.ln2_g = bw.ln2_g;
    p.ln2_b = bw.ln2_b;
    p.validate();
    return p;
}

std::vector<double> plain_logits(const LmConfig& cfg, const LmWeights& w,
                                 const std::vector<vision::Frame>& frames) {
    cfg.validate();
    auto embeddings = vision::encode_video(frames, cfg.enc, w.vis);
    auto assembled = prompt::assemble_sandwich(prompt::tokenize_stub(cfg.prefix_text),
                                               embeddings,
                                               prompt::tokenize_stub(cfg.suffix_text),
                                               w.embed, cfg.d_llm);
    std::vector<std::vector<double>> x = std::move(assembled.sequence);
    size_t d = cfg.d_llm;
    for (const auto& bw : w.blocks) {
        auto bp = materialize_block(bw, d, cfg.ffn_hidden);
        auto res = rwkv::rwkv_block_forward(x, rwkv::WkvState<double>::zero(d), bp);
        x = std::move(res.y);
    }
    std::vector<double> last = x.back();
    rwkv::layernorm_inplace(last, w.ln_out_g, w.ln_out_b);
    std::vector<double> logits(cfg.n_classes);
    for (size_t i = 0; i < cfg.n_classes; ++i) {
        double acc = w.head_b[i];
        const double* row = &w.head_w[i * d];
        for (size_t j = 0; j < d; ++j) acc += row[j] * last[j];
        logits[i] = acc;
    }
    return logits;
}

namespace {

// looks up bound parameter leaves by canonical name
struct ParamIds {
    std::map<std::string, int> ids;

    int operator()(const std::string& name) const {
        auto it = ids.find(name);
        if (it == ids.end()) throw ConfigError("tape_forward: unknown parameter " + name);
        return it->second;
    }
};

int vit_attention(ad::Tape& tape, int x, const ParamIds& pid, const std::string& lp,
                  size_t d, size_t heads) {
    int xn = tape.layernorm(x, pid(lp + "ln1_g"), pid(lp + "ln1_b"));
    int q = tape.matmul_nt(xn, pid(lp + "wq"));
    int k = tape.matmul_nt(xn, pid(lp + "wk"));
    int v = tape.matmul_nt(xn, pid(lp + "wv"));
    size_t dh = d / heads;
    double scale = 1.0 / std::sqrt(double(dh));
    std::vector<int> mixed;
    mixed.reserve(heads);
    for (size_t h = 0; h < heads; ++h) {
        int qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
        int kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
        int vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
        int att = tape.softmax_rows(tape.scale(tape.matmul_nt(qh, kh), scale));
        mixed.push_back(tape.matmul(att, vh));
    }
    return tape.add(x, tape.matmul_nt(tape.concat_cols(mixed), pid(lp + "wo")));
}

int vit_mlp(ad::Tape& tape, int x, const ParamIds& pid, const std::string& lp) {
    int xn = tape.layernorm(x, pid(lp + "ln2_g"), pid(lp + "ln2_b"));
    int h = tape.gelu(tape.add(tape.matmul_nt(xn, pid(lp + "mlp_w1")), pid(lp + "mlp_b1")));
    return tape.add(x, tape.add(tape.matmul_nt(h, pid(lp + "mlp_w2")), pid(lp + "mlp_b2")));
}

// Decides the merge on current values with the library matcher and sorter,
// then applies it as a size-weighted linear combination of rows so the
// gradient flows through the merge. Row 0 is the immune CLS token.
int apply_merge_layer(ad::Tape& tape, int x, std::vector<size_t>& sizes,
                      std::vector<size_t>& origins, size_t r, merge::SortOrder order,
                      uint64_t seed) {
    const ad::Tensor& xv = tape.value(x);
    size_t n = xv.rows - 1;
    std::vector<merge::MergedToken> toks(n);
    for (size_t i = 0; i < n; ++i) {
        toks[i].embedding.assign(xv.data.begin() + long((i + 1) * xv.cols),
                                 xv.data.begin() + long((i + 2) * xv.cols));
        toks[i].size = sizes[i];
        toks[i].origin = origins[i];
    }
    auto [a, b] = merge::partition_alternating(toks);
    auto scores = merge::similarity_scores(a, b);
    auto decision = merge::bipartite_soft_match(toks, scores, r);

    // group the pairs exactly as merge_tokens does
    std::vector<char> is_src(n, 0);
    std::map<size_t, std::vector<size_t>> groups;
    for (auto [src, dst] : decision.pairs) {
        is_src[src] = 1;
        groups[dst].push_back(src);
    }
    struct Slot {
        std::vector<size_t> members;
        size_t size = 0;
        size_t origin = 0;
    };
    std::vector<Slot> slots;
    for (size_t pos = 0; pos < n; ++pos) {
        if (is_src[pos]) continue;
        Slot s;
        auto it = groups.find(pos);
        if (it != groups.end()) s.members = it->second;
        s.members.push_back(pos);
        std::sort(s.members.begin(), s.members.end());
        s.origin = toks[s.members[0]].origin;
        for (size_t m : s.members) {
            s.size += toks[m].size;
            s.origin = std::min(s.origin, toks[m].origin);
        }
        slots.push_back(std::move(s));
    }

    // recover the library sort's permutation by tagging stub tokens with
    // their slot index
    std::vector<merge::MergedToken> stubs(slots.size());
    for (size_t i = 0; i < slots.size(); ++i) {
        stubs[i].embedding = {double(i)};
        stubs[i].size = slots[i].size;
        stubs[i].origin = slots[i].origin;
    }
    auto sorted = merge::sort_by_size(std::move(stubs), order, seed);

    std::vector<std::vector<std::pair<size_t, double>>> combos(slots.size() + 1);
    combos[0] = {{0, 1.0}};
    sizes.assign(slots.size(), 0);
    origins.assign(slots.size(), 0);
    for (size_t j = 0; j < sorted.size(); ++j) {
        const Slot& s = slots[size_t(sorted[j].embedding[0])];
        for (size_t m : s.members) {
            combos[j + 1].emplace_back(m + 1, double(toks[m].size) / double(s.size));
        }
        sizes[j] = s.size;
        origins[j] = s.origin;
    }
    return tape.linear_rows(x, std::move(combos));
}

}  // namespace

TapeRun tape_forward(ad::Tape& tape, const LmConfig& cfg, LmWeights& w,
                     const std::vector<vision::Frame>& frames, int label) {
    cfg.validate();
    if (frames.empty()) throw ConfigError("tape_forward: no frames");
    const auto& ec = cfg.enc;
    size_t side = ec.image_side;
    for (size_t i = 0; i < frames.size(); ++i) {
        if (frames[i].pixels.size() != side * side * 3) {
            throw ConfigError("tape_forward: frame " + std::to_string(i) +
                              " geometry differs from the configured " + std::to_string(side) +
                              "x" + std::to_string(side));
        }
    }

    TapeRun run;
    ParamIds pid;
    for (auto& np : w.entries(cfg)) {
        ad::Tensor t(np.rows, np.cols);
        t.data = *np.data;
        int id = tape.variable(std::move(t));
        pid.ids[np.name] = id;
        run.params.emplace_back(np.name, id);
    }

    bool apply = ec.merge_policy == vision::MergePolicy::always || frames.size() > 1;
    merge::MergeSchedule schedule;
    if (apply) schedule = merge::plan_schedule(ec.n_patches(), ec.n_used(), ec.keep_ratio);

    size_t grid = ec.patches_per_side();
    size_t ps = ec.patch_size;
    size_t pdim = ps * ps * 3;
    size_t n0 = ec.n_patches();

    std::vector<int> parts;
    auto prefix = prompt::tokenize_stub(cfg.prefix_text);
    auto suffix = prompt::tokenize_stub(cfg.suffix_text);
    if (!prefix.ids.empty()) {
        std::vector<size_t> ids(prefix.ids.begin(), prefix.ids.end());
        parts.push_back(tape.gather_rows(pid("lm.embed"), std::move(ids)));
    }

    for (const auto& frame : frames) {
        ad::Tensor pixels(n0, pdim);
        for (size_t py = 0; py < grid; ++py) {
            for (size_t px = 0; px < grid; ++px) {
                size_t at = (py * grid + px) * pdim;
                for (size_t y = 0; y < ps; ++y) {
                    const uint8_t* row = &frame.pixels[((py * ps + y) * side + px * ps) * 3];
                    for (size_t xc = 0; xc < ps * 3; ++xc) {
                        pixels.data[at++] = double(row[xc]) / 255.0 * 2.0 - 1.0;
                    }
                }
            }
        }
        int emb = tape.add(tape.add(tape.matmul_nt(tape.constant(std::move(pixels)),
                                                   pid("vit.patch_w")),
                                    pid("vit.patch_b")),
                           tape.slice_rows(pid("vit.pos"), 1, n0 + 1));
        int cls = tape.add(pid("vit.cls"), tape.slice_rows(pid("vit.pos"), 0, 1));
        int x = tape.concat_rows({cls, emb});

        std::vector<size_t> sizes(n0, 1), origins(n0);
        std::iota(origins.begin(), origins.end(), size_t(0));
        for (size_t l = 0; l < ec.n_used(); ++l) {
            std::string lp = "vit.layer" + std::to_string(l) + ".";
            x = vit_attention(tape, x, pid, lp, ec.d_vis, ec.n_heads);
            if (apply) {
                uint64_t seed = ec.sort_seed ^ (frame.timestamp_index * 0x9e3779b9u + l);
                x = apply_merge_layer(tape, x, sizes, origins, schedule.removals[l],
                                      ec.sort_order, seed);
            }
            x = vit_mlp(tape, x, pid, lp);
        }

        int h = tape.gelu(tape.add(tape.matmul_nt(x, pid("vit.conn_w1")),
                                   pid("vit.conn_b1")));
        int y = tape.add(tape.matmul_nt(h, pid("vit.conn_w2")), pid("vit.conn_b2"));
        run.tokens_per_frame.push_back(tape.value(y).rows);
        parts.push_back(y);
    }

    if (!suffix.ids.empty()) {
        std::vector<size_t> ids(suffix.ids.begin(), suffix.ids.end());
        parts.push_back(tape.gather_rows(pid("lm.embed"), std::move(ids)));
    }
    int x = tape.concat_rows(parts);

    for (size_t i = 0; i < cfg.n_blocks; ++i) {
        std::string bp = "lm.block" + std::to_string(i) + ".";
        int xn = tape.layernorm(x, pid(bp + "ln1_g"), pid(bp + "ln1_b"));
        int xp = tape.shift_rows_down(xn);
        auto lerp = [&](const std::string& mu_name) {
            int mu = tape.sigmoid(pid(bp + mu_name));
            return tape.add(xn, tape.mul(tape.sub(xp, xn), mu));
        };
        int r = tape.matmul_nt(lerp("mu_raw_r"), pid(bp + "w_r"));
        int k = tape.matmul_nt(lerp("mu_raw_k"), pid(bp + "w_k"));
        int v = tape.matmul_nt(lerp("mu_raw_v"), pid(bp + "w_v"));
        int wkv = tape.wkv(k, v, tape.exp(pid(bp + "w_raw")), pid(bp + "u"));
        int gated = tape.mul(tape.sigmoid(r), wkv);
        x = tape.add(x, tape.matmul_nt(gated, pid(bp + "w_o")));

        int xn2 = tape.layernorm(x, pid(bp + "ln2_g"), pid(bp + "ln2_b"));
        int xp2 = tape.shift_rows_down(xn2);
        auto lerp2 = [&](const std::string& mu_name) {
            int mu = tape.sigmoid(pid(bp + mu_name));
            return tape.add(xn2, tape.mul(tape.sub(xp2, xn2), mu));
        };
        int kk = tape.relu_sq(tape.matmul_nt(lerp2("mu_cm_raw_k"), pid(bp + "w_cm_k")));
        int kv = tape.matmul_nt(kk, pid(bp + "w_cm_v"));
        int rr = tape.matmul_nt(lerp2("mu_cm_raw_r"), pid(bp + "w_cm_r"));
        x = tape.add(x, tape.mul(tape.sigmoid(rr), kv));
    }

    size_t total = tape.value(x).rows;
    int last = tape.slice_rows(x, total - 1, total);
    int xn = tape.layernorm(last, pid("lm.ln_out_g"), pid("lm.ln_out_b"));
    run.logits = tape.add(tape.matmul_nt(xn, pid("lm.head_w")), pid("lm.head_b"));
    if (label >= 0) {
        if (size_t(label) >= cfg.n_classes) {
            throw ConfigError("tape_forward: label " + std::to_string(label) +
                              " outside class range");
        }
        run.loss = tape.cross_entropy_logits(run.logits, {label});
    }
    return run;
}

int argmax_class(const std::vector<double>& logits) {
    if (logits.empty()) throw ConfigError("argmax_class: empty logits");
    return int(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

}  // namespace longvid::model
