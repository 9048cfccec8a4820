#include "longvid/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "longvid/frames.hpp"
#include "longvid/prompt.hpp"
#include "longvid/report.hpp"
#include "longvid/rwkv_block.hpp"

namespace longvid::bench {

namespace {

double now_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string fmt(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Memory benchmark

nlohmann::json MemBenchConfig::to_json() const {
    return {{"lm", lm.to_json()},
            {"frame_counts", frame_counts},
            {"matched_d_model", matched_d_model},
            {"matched_layers", matched_layers},
            {"matched_tokens_per_frame", matched_tokens_per_frame},
            {"matched_ratio_at_frames", matched_ratio_at_frames},
            {"bytes_per_scalar", bytes_per_scalar},
            {"seed", seed},
            {"budget_seconds", budget_seconds}};
}

MemBenchConfig MemBenchConfig::from_json(const nlohmann::json& j) {
    MemBenchConfig c;
    if (j.contains("lm")) c.lm = model::LmConfig::from_json(j["lm"]);
    c.frame_counts = j.value("frame_counts", c.frame_counts);
    c.matched_d_model = j.value("matched_d_model", c.matched_d_model);
    c.matched_layers = j.value("matched_layers", c.matched_layers);
    c.matched_tokens_per_frame = j.value("matched_tokens_per_frame", c.matched_tokens_per_frame);
    c.matched_ratio_at_frames = j.value("matched_ratio_at_frames", c.matched_ratio_at_frames);
    c.bytes_per_scalar = j.value("bytes_per_scalar", c.bytes_per_scalar);
    c.seed = j.value("seed", c.seed);
    c.budget_seconds = j.value("budget_seconds", c.budget_seconds);
    return c;
}

PrefillStats streaming_prefill(const model::LmConfig& cfg, const model::LmWeights& w,
                               size_t n_frames, uint64_t seed, AllocLedger& ledger) {
    cfg.validate();
    size_t d = cfg.d_llm;

    std::vector<rwkv::BlockParams<double>> params;
    std::vector<rwkv::WkvState<double>> states;
    for (const auto& bw : w.blocks) {
        params.push_back(model::materialize_block(bw, d, cfg.ffn_hidden));
        states.push_back(rwkv::WkvState<double>::zero(d));
    }

    PrefillStats stats;
    stats.state_bytes = cfg.n_blocks * 5 * d * sizeof(double);
    ledger.acquire(stats.state_bytes);

    auto step_token = [&](const std::vector<double>& emb) {
        LedgerHold activation(ledger, d * sizeof(double));
        std::vector<double> x = emb;
        for (size_t b = 0; b < params.size(); ++b) {
            x = rwkv_block_step(x, states[b], params[b]);
        }
        ++stats.tokens;
    };
    auto step_text = [&](const std::string& text) {
        for (int id : prompt::tokenize_stub(text).ids) {
            std::vector<double> emb(w.embed.begin() + size_t(id) * d,
                                    w.embed.begin() + (size_t(id) + 1) * d);
            step_token(emb);
        }
    };

    step_text(cfg.prefix_text);
    for (size_t f = 0; f < n_frames; ++f) {
        // frames are synthesized, encoded, and discarded one at a time;
        // only the recurrent state persists across the video
        auto frame = frames::synthesize_frames(1, cfg.enc.image_side,
                                               seed ^ (0x5eedf00dull + f));
        frame[0].timestamp_index = f;
        auto fe = vision::encode_frame(frame[0], cfg.enc, w.vis);
        size_t frame_tokens = 1 + fe.tokens.patches.size();
        LedgerHold embeddings(ledger, frame_tokens * d * sizeof(double));
        step_token(fe.tokens.cls.embedding);
        for (const auto& tok : fe.tokens.patches) step_token(tok.embedding);
    }
    step_text(cfg.suffix_text);

    ledger.release(stats.state_bytes);
    stats.peak_bytes = ledger.peak_bytes();
    return stats;
}

double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw ConfigError("linear_fit_r2: need at least two paired points");
    }
    double n = double(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    double denom = n * sxx - sx * sx;
    if (denom == 0.0) throw ConfigError("linear_fit_r2: x values are constant");
    double slope = (n * sxy - sx * sy) / denom;
    double intercept = (sy - slope * sx) / n;
    double ss_res = 0, ss_tot = 0, mean_y = sy / n;
    for (size_t i = 0; i < x.size(); ++i) {
        double e = y[i] - (slope * x[i] + intercept);
        ss_res += e * e;
        ss_tot += (y[i] - mean_y) * (y[i] - mean_y);
    }
    return ss_tot == 0.0 ? 1.0 : 1.0 - ss_res / ss_tot;
}

MemBenchResult run_bench_mem(const MemBenchConfig& cfg, std::ostream* log) {
    if (cfg.frame_counts.empty()) throw ConfigError("bench-mem: no frame counts");
    if (!std::is_sorted(cfg.frame_counts.begin(), cfg.frame_counts.end())) {
        throw ConfigError("bench-mem: frame counts must be ascending");
    }

    auto w = model::LmWeights::init(cfg.lm, cfg.seed);
    attn::MemoryModel toy_baseline{cfg.lm.d_llm, cfg.lm.n_blocks, cfg.bytes_per_scalar,
                                   attn::StateVariant::kv_cache, 0, 0};

    MemBenchResult result;
    double t_start = now_seconds();
    for (size_t f_count : cfg.frame_counts) {
        double t0 = now_seconds();
        AllocLedger ledger;
        auto stats = streaming_prefill(cfg.lm, w, f_count, cfg.seed, ledger);

        MemPoint point;
        point.frames = f_count;
        point.tokens = stats.tokens;
        point.measured_peak_bytes = stats.peak_bytes;
        point.measured_state_bytes = stats.state_bytes;
        point.baseline_toy_floats = attn::kv_cache_floats(toy_baseline, stats.tokens);
        point.seconds = now_seconds() - t0;
        result.points.push_back(point);
        if (log != nullptr) {
            *log << "bench-mem: F=" << f_count << " tokens=" << point.tokens
                 << " peak=" << point.measured_peak_bytes << "B ("
                 << fmt(point.seconds, 2) << "s)\n";
        }
        if (now_seconds() - t_start > cfg.budget_seconds &&
            result.points.size() < cfg.frame_counts.size()) {
            result.complete = false;
            if (log != nullptr) *log << "bench-mem: budget exhausted, partial report\n";
            break;
        }
    }

    size_t peak_min = SIZE_MAX, peak_max = 0;
    std::vector<double> xs, ys;
    for (const auto& p : result.points) {
        peak_min = std::min(peak_min, p.measured_peak_bytes);
        peak_max = std::max(peak_max, p.measured_peak_bytes);
        xs.push_back(double(p.tokens));
        ys.push_back(double(p.baseline_toy_floats));
    }
    result.peak_spread =
        peak_min == 0 ? 0.0 : double(peak_max - peak_min) / double(peak_min);
    result.baseline_r2 = xs.size() >= 2 ? linear_fit_r2(xs, ys) : 0.0;

    attn::MemoryModel matched_base{cfg.matched_d_model, cfg.matched_layers,
                                   cfg.bytes_per_scalar, attn::StateVariant::kv_cache, 0, 0};
    attn::MemoryModel matched_rec{cfg.matched_d_model, cfg.matched_layers,
                                  cfg.bytes_per_scalar, attn::StateVariant::rwkv4_state, 0, 0};
    size_t matched_tokens = cfg.matched_ratio_at_frames * cfg.matched_tokens_per_frame;
    result.matched_ratio = double(attn::kv_cache_floats(matched_base, matched_tokens)) /
                           double(attn::recurrent_state_floats(matched_rec));
    result.crossover_t0 = attn::crossover_t0(matched_base, matched_rec, 34.0);
    return result;
}

nlohmann::json MemBenchResult::to_json(const MemBenchConfig& cfg) const {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : points) {
        pts.push_back({{"frames", p.frames},
                       {"tokens", p.tokens},
                       {"measured_peak_bytes", p.measured_peak_bytes},
                       {"measured_state_bytes", p.measured_state_bytes},
                       {"baseline_analytic_floats", p.baseline_toy_floats},
                       {"baseline_analytic_bytes_at_2", p.baseline_toy_floats * 2},
                       {"baseline_analytic_bytes_at_4", p.baseline_toy_floats * 4},
                       {"point_seconds", p.seconds}});
    }
    nlohmann::json payload = {
        {"points", pts},
        {"complete", complete},
        {"peak_spread", peak_spread},
        {"baseline_r2", baseline_r2},
        {"matched",
         {{"d_model", cfg.matched_d_model},
          {"n_layers", cfg.matched_layers},
          {"tokens_per_frame", cfg.matched_tokens_per_frame},
          {"at_frames", cfg.matched_ratio_at_frames},
          {"ratio", matched_ratio},
          {"crossover_t0", crossover_t0}}}};
    return report::envelope(cfg.to_json(), cfg.seed, std::move(payload));
}

// ---------------------------------------------------------------------------
// Latency benchmark

nlohmann::json LatencyBenchConfig::to_json() const {
    return {{"d_model", d_model},   {"n_layers", n_layers},
            {"heads", heads},       {"hidden", hidden},
            {"prefix_lengths", prefix_lengths},
            {"samples", samples},   {"warmup", warmup},
            {"single_precision", single_precision},
            {"seed", seed}};
}

LatencyBenchConfig LatencyBenchConfig::from_json(const nlohmann::json& j) {
    LatencyBenchConfig c;
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.heads = j.value("heads", c.heads);
    c.hidden = j.value("hidden", c.hidden);
    c.prefix_lengths = j.value("prefix_lengths", c.prefix_lengths);
    c.samples = j.value("samples", c.samples);
    c.warmup = j.value("warmup", c.warmup);
    c.single_precision = j.value("single_precision", c.single_precision);
    c.seed = j.value("seed", c.seed);
    return c;
}

namespace {

double timer_tick() {
    auto a = std::chrono::steady_clock::now();
    auto b = a;
    do {
        b = std::chrono::steady_clock::now();
    } while (b == a);
    return std::chrono::duration<double>(b - a).count();
}

double median(std::vector<double> xs) {
    if (xs.empty()) throw ConfigError("median of empty sample set");
    size_t mid = xs.size() / 2;
    std::nth_element(xs.begin(), xs.begin() + std::ptrdiff_t(mid), xs.end());
    return xs[mid];
}

template <typename S>
std::vector<S> random_vec(Rng& g, size_t n, double stddev) {
    std::vector<S> v(n);
    for (auto& x : v) x = S(normal(g, 0.0, stddev));
    return v;
}

template <typename S>
rwkv::BlockParams<S> random_block(Rng& g, size_t d, size_t hidden) {
    rwkv::BlockParams<S> p;
    p.d = d;
    p.hidden = hidden;
    p.ln1_g.assign(d, S(1));
    p.ln1_b.assign(d, S(0));
    p.ln2_g.assign(d, S(1));
    p.ln2_b.assign(d, S(0));
    p.shift.mu_r.assign(d, S(0.5));
    p.shift.mu_k.assign(d, S(0.5));
    p.shift.mu_v.assign(d, S(0.5));
    p.mu_cm_k.assign(d, S(0.5));
    p.mu_cm_r.assign(d, S(0.5));
    p.decay.w.resize(d);
    for (size_t c = 0; c < d; ++c) {
        p.decay.w[c] = S(std::exp(std::log(0.01) +
                                  double(c) / double(d - 1) * (std::log(1.5) - std::log(0.01))));
    }
    p.decay.u = random_vec<S>(g, d, 0.2);
    p.w_r = random_vec<S>(g, d * d, 0.1);
    p.w_k = random_vec<S>(g, d * d, 0.1);
    p.w_v = random_vec<S>(g, d * d, 0.1);
    p.w_o = random_vec<S>(g, d * d, 0.1);
    p.w_cm_k = random_vec<S>(g, hidden * d, 0.1);
    p.w_cm_v = random_vec<S>(g, d * hidden, 0.1);
    p.w_cm_r = random_vec<S>(g, d * d, 0.1);
    return p;
}

template <typename S>
attn::BaselineBlockParams<S> random_baseline_block(Rng& g, size_t d, size_t heads,
                                                   size_t hidden) {
    attn::BaselineBlockParams<S> p;
    p.d = d;
    p.heads = heads;
    p.hidden = hidden;
    p.ln1_g.assign(d, S(1));
    p.ln1_b.assign(d, S(0));
    p.ln2_g.assign(d, S(1));
    p.ln2_b.assign(d, S(0));
    p.wq = random_vec<S>(g, d * d, 0.1);
    p.wk = random_vec<S>(g, d * d, 0.1);
    p.wv = random_vec<S>(g, d * d, 0.1);
    p.wo = random_vec<S>(g, d * d, 0.1);
    p.mlp_w1 = random_vec<S>(g, hidden * d, 0.1);
    p.mlp_b1.assign(hidden, S(0));
    p.mlp_w2 = random_vec<S>(g, d * hidden, 0.1);
    p.mlp_b2.assign(d, S(0));
    return p;
}

template <typename S>
LatencyBenchResult run_latency(const LatencyBenchConfig& cfg, std::ostream* log) {
    if (cfg.prefix_lengths.empty()) throw ConfigError("bench-latency: no prefix lengths");
    if (!std::is_sorted(cfg.prefix_lengths.begin(), cfg.prefix_lengths.end())) {
        throw ConfigError("bench-latency: prefix lengths must be ascending");
    }
    if (cfg.samples < 100) {
        throw ConfigError("bench-latency: need at least 100 samples per point");
    }

    Rng g(cfg.seed ^ 0x1a7e9cbull);
    LatencyBenchResult result;
    result.timer_tick_seconds = timer_tick();

    // a small pool of token inputs reused across steps; content does not
    // affect the cost path
    std::vector<std::vector<S>> pool;
    for (size_t i = 0; i < 64; ++i) pool.push_back(random_vec<S>(g, cfg.d_model, 1.0));

    std::vector<rwkv::BlockParams<S>> rec_params;
    std::vector<attn::BaselineBlockParams<S>> base_params;
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        rec_params.push_back(random_block<S>(g, cfg.d_model, cfg.hidden));
        base_params.push_back(random_baseline_block<S>(g, cfg.d_model, cfg.heads, cfg.hidden));
    }

    S sink = S(0);
    for (size_t prefix : cfg.prefix_lengths) {
        LatencyPoint point;
        point.prefix = prefix;

        // recurrent: an honest prefill at full length, then timed steps
        std::vector<rwkv::WkvState<S>> rec_state(cfg.n_layers,
                                                 rwkv::WkvState<S>::zero(cfg.d_model));
        for (size_t t = 0; t < prefix; ++t) {
            std::vector<S> x = pool[t % pool.size()];
            for (size_t l = 0; l < cfg.n_layers; ++l) {
                x = rwkv_block_step(x, rec_state[l], rec_params[l]);
            }
            sink += x[0];
        }
        for (size_t i = 0; i < cfg.warmup + cfg.samples; ++i) {
            auto t0 = std::chrono::steady_clock::now();
            std::vector<S> x = pool[i % pool.size()];
            for (size_t l = 0; l < cfg.n_layers; ++l) {
                x = rwkv_block_step(x, rec_state[l], rec_params[l]);
            }
            auto t1 = std::chrono::steady_clock::now();
            sink += x[0];
            if (i >= cfg.warmup) {
                point.recurrent_step_seconds.push_back(
                    std::chrono::duration<double>(t1 - t0).count());
            }
        }

        // baseline: the cache is synthesized at the target length because
        // step cost depends only on its size, never its content
        std::vector<attn::BaselineBlockState<S>> base_state;
        for (size_t l = 0; l < cfg.n_layers; ++l) {
            auto st = attn::BaselineBlockState<S>::zero(cfg.heads);
            size_t dh = cfg.d_model / cfg.heads;
            for (auto& cache : st.head_caches) {
                cache.keys.assign(prefix, std::vector<S>(dh));
                cache.values.assign(prefix, std::vector<S>(dh));
                for (size_t t = 0; t < prefix; ++t) {
                    for (size_t c = 0; c < dh; ++c) {
                        cache.keys[t][c] = S(normal(g, 0.0, 1.0));
                        cache.values[t][c] = S(normal(g, 0.0, 1.0));
                    }
                }
            }
            base_state.push_back(std::move(st));
        }
        for (size_t i = 0; i < cfg.warmup + cfg.samples; ++i) {
            auto t0 = std::chrono::steady_clock::now();
            std::vector<S> x = pool[i % pool.size()];
            for (size_t l = 0; l < cfg.n_layers; ++l) {
                x = attn::baseline_block_step(x, base_state[l], base_params[l]);
            }
            auto t1 = std::chrono::steady_clock::now();
            sink += x[0];
            if (i >= cfg.warmup) {
                point.baseline_step_seconds.push_back(
                    std::chrono::duration<double>(t1 - t0).count());
            }
        }

        point.recurrent_median_seconds = median(point.recurrent_step_seconds);
        point.baseline_median_seconds = median(point.baseline_step_seconds);
        if (point.recurrent_median_seconds < 20.0 * result.timer_tick_seconds) {
            throw ConfigError(
                "bench-latency: timer resolution insufficient for per-token steps; "
                "batch more tokens per measurement");
        }
        result.points.push_back(std::move(point));
        if (log != nullptr) {
            *log << "bench-latency: prefix=" << prefix << " recurrent="
                 << fmt(result.points.back().recurrent_median_seconds * 1e6, 2)
                 << "us baseline="
                 << fmt(result.points.back().baseline_median_seconds * 1e6, 2) << "us\n";
        }
    }
    if (log != nullptr && sink == S(42)) *log << "";  // keep the work observable
    return result;
}

}  // namespace

LatencyBenchResult run_bench_latency(const LatencyBenchConfig& cfg, std::ostream* log) {
    return cfg.single_precision ? run_latency<float>(cfg, log) : run_latency<double>(cfg, log);
}

nlohmann::json LatencyBenchResult::to_json(const LatencyBenchConfig& cfg) const {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : points) {
        pts.push_back({{"prefix", p.prefix},
                       {"recurrent_median_seconds", p.recurrent_median_seconds},
                       {"baseline_median_seconds", p.baseline_median_seconds},
                       {"recurrent_step_seconds", p.recurrent_step_seconds},
                       {"baseline_step_seconds", p.baseline_step_seconds}});
    }
    nlohmann::json payload = {{"points", pts},
                              {"timer_tick_seconds", timer_tick_seconds}};
    return report::envelope(cfg.to_json(), cfg.seed, std::move(payload));
}

// ---------------------------------------------------------------------------
// Ablations

nlohmann::json AblateConfig::to_json() const {
    return {{"lm", lm.to_json()},
            {"task", task.to_json()},
            {"train", train.to_json()},
            {"seed", seed}};
}

AblateConfig AblateConfig::from_json(const nlohmann::json& j) {
    AblateConfig c;
    if (j.contains("lm")) c.lm = model::LmConfig::from_json(j["lm"]);
    if (j.contains("task")) c.task = needle::NeedleTask::from_json(j["task"]);
    if (j.contains("train")) c.train = train::TrainConfig::from_json(j["train"]);
    c.seed = j.value("seed", c.seed);
    return c;
}

namespace {

// one trained run under the given encoder settings; returns (accuracy,
// tokens per frame as actually encoded)
std::pair<double, size_t> ablate_cell(const AblateConfig& cfg, model::LmConfig lm,
                                      std::ostream* log) {
    auto w = model::LmWeights::init(lm, cfg.seed);
    auto probe = frames::synthesize_frames(1, lm.enc.image_side, cfg.seed);
    auto fe = vision::encode_frame(probe[0], lm.enc, w.vis);
    size_t tokens_pf = 1 + fe.tokens.patches.size();

    train::TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    auto res = train::train_needle(lm, w, cfg.task, tc, log);
    return {res.final_accuracy, tokens_pf};
}

}  // namespace

std::string run_ablate(const AblateConfig& cfg, const std::string& axis, std::ostream* log) {
    if (axis == "order") {
        std::vector<std::vector<std::string>> rows;
        for (const char* name : {"ascending", "descending", "random"}) {
            model::LmConfig lm = cfg.lm;
            lm.enc.sort_order = merge::parse_sort_order(name);
            lm.enc.sort_seed = cfg.seed;
            if (log != nullptr) *log << "ablate order=" << name << "\n";
            auto [accuracy, tokens_pf] = ablate_cell(cfg, lm, log);
            rows.push_back({name, fmt(accuracy), std::to_string(tokens_pf)});
        }
        return report::render_csv({"order", "accuracy", "tokens_per_frame"}, rows);
    }
    if (axis == "ratio") {
        std::vector<std::vector<std::string>> rows;
        for (int i = 1; i <= 10; ++i) {
            double rho = double(i) / 10.0;
            model::LmConfig lm = cfg.lm;
            lm.enc.keep_ratio = rho;
            if (log != nullptr) *log << "ablate ratio=" << fmt(rho, 1) << "\n";
            auto [accuracy, tokens_pf] = ablate_cell(cfg, lm, log);
            // the full-scale 384px/16px preset only enters through
            // schedule arithmetic; no training happens at that size
            auto preset = merge::plan_schedule(576, 23, rho);
            size_t preset_tokens = 576 - preset.total_removed() + 1;
            rows.push_back({fmt(rho, 1), std::to_string(tokens_pf),
                            std::to_string(preset_tokens), fmt(accuracy)});
        }
        return report::render_csv(
            {"keep_ratio", "tokens_per_frame", "tokens_per_frame_384p16", "accuracy"}, rows);
    }
    throw ConfigError("ablate: unknown axis " + axis + " (use order or ratio)");
}

}  // namespace longvid::bench
