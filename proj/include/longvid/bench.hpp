#pragma once

// Benchmark drivers behind the CLI: a streaming-prefill memory benchmark
// whose allocation ledger demonstrates the constant-state property, a
// per-token latency benchmark against the quadratic baseline, and the
// token-order / keep-ratio ablations over the needle task.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "longvid/accounting.hpp"
#include "longvid/attention.hpp"
#include "longvid/model.hpp"
#include "longvid/needle.hpp"
#include "longvid/train.hpp"

namespace longvid::bench {

// ---------------------------------------------------------------------------
// Memory: recurrent path measured via the ledger, baseline analytic.

struct MemBenchConfig {
    model::LmConfig lm = model::LmConfig::toy_defaults();
    std::vector<size_t> frame_counts = {64, 256, 1024, 4096};

    // analytic comparison at full-scale model dimensions
    size_t matched_d_model = 1024;
    size_t matched_layers = 24;
    size_t matched_tokens_per_frame = 59;
    size_t matched_ratio_at_frames = 1024;

    size_t bytes_per_scalar = 4;  // 2 and 4 both appear in the report
    uint64_t seed = 0;
    double budget_seconds = 240.0;

    nlohmann::json to_json() const;
    static MemBenchConfig from_json(const nlohmann::json& j);
};

struct MemPoint {
    size_t frames = 0;
    size_t tokens = 0;  // LM tokens actually stepped at toy dimensions
    size_t measured_peak_bytes = 0;
    size_t measured_state_bytes = 0;
    size_t baseline_toy_floats = 0;  // kv cache at the same token count
    double seconds = 0.0;
};

struct MemBenchResult {
    std::vector<MemPoint> points;
    bool complete = true;
    double peak_spread = 0.0;    // (max - min) / min over measured peaks
    double baseline_r2 = 0.0;    // linear fit of toy kv floats vs tokens
    double matched_ratio = 0.0;  // baseline / recurrent floats, matched dims
    size_t crossover_t0 = 0;     // first T where baseline > 34x state

    nlohmann::json to_json(const MemBenchConfig& cfg) const;
};

MemBenchResult run_bench_mem(const MemBenchConfig& cfg, std::ostream* log = nullptr);

// one streaming pass: synthesizes frames one at a time, encodes, and
// steps the recurrent blocks token by token; nothing live scales with
// n_frames, and the ledger proves it
struct PrefillStats {
    size_t tokens = 0;
    size_t peak_bytes = 0;
    size_t state_bytes = 0;
};
PrefillStats streaming_prefill(const model::LmConfig& cfg, const model::LmWeights& w,
                               size_t n_frames, uint64_t seed, AllocLedger& ledger);

// least-squares R^2 of y against x
double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y);

// ---------------------------------------------------------------------------
// Latency: median per-token step time at growing prefix lengths.

struct LatencyBenchConfig {
    size_t d_model = 64;
    size_t n_layers = 2;
    size_t heads = 4;
    size_t hidden = 256;
    std::vector<size_t> prefix_lengths = {1024, 4096, 16384, 32768};
    size_t samples = 128;  // timed steps per point, after warmup
    size_t warmup = 16;
    bool single_precision = false;
    uint64_t seed = 0;

    nlohmann::json to_json() const;
    static LatencyBenchConfig from_json(const nlohmann::json& j);
};

struct LatencyPoint {
    size_t prefix = 0;
    double recurrent_median_seconds = 0.0;
    double baseline_median_seconds = 0.0;
    std::vector<double> recurrent_step_seconds;
    std::vector<double> baseline_step_seconds;
};

struct LatencyBenchResult {
    std::vector<LatencyPoint> points;
    double timer_tick_seconds = 0.0;

    nlohmann::json to_json(const LatencyBenchConfig& cfg) const;
};

LatencyBenchResult run_bench_latency(const LatencyBenchConfig& cfg,
                                     std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// Ablations: token order and keep-ratio sweeps over the needle task.

struct AblateConfig {
    model::LmConfig lm = model::LmConfig::toy_defaults();
    needle::NeedleTask task;
    train::TrainConfig train;  // reduced budget; sweeps train one model per row
    uint64_t seed = 0;

    AblateConfig() {
        train.n_train = 400;
        train.n_held = 100;
        train.epochs = 2;
        train.stop_accuracy = 0.0;
    }

    nlohmann::json to_json() const;
    static AblateConfig from_json(const nlohmann::json& j);
};

// axis is "order" or "ratio"; returns the CSV document
std::string run_ablate(const AblateConfig& cfg, const std::string& axis,
                       std::ostream* log = nullptr);

}  // namespace longvid::bench
