// CLI driver: encode | bench-mem | bench-latency | ablate | toy-train |
// inspect. Exit codes: 0 success, 2 config or validation error, 3
// runtime numerical error.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "longvid/bench.hpp"
#include "longvid/frames.hpp"
#include "longvid/prompt.hpp"
#include "longvid/report.hpp"
#include "longvid/train.hpp"

namespace {

using namespace longvid;

struct SharedFlags {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::string out_path;
    std::string precision = "double";
    std::optional<std::string> order;
    std::optional<double> keep_ratio;
    std::optional<std::string> policy;
    bool trace = false;
};

nlohmann::json load_config(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
}

void apply_encoder_overrides(const SharedFlags& flags, vision::EncoderConfig& enc) {
    if (flags.order) enc.sort_order = merge::parse_sort_order(*flags.order);
    if (flags.keep_ratio) enc.keep_ratio = *flags.keep_ratio;
    if (flags.policy) enc.merge_policy = vision::parse_merge_policy(*flags.policy);
}

void emit(const SharedFlags& flags, const std::string& text) {
    if (flags.out_path.empty()) {
        std::cout << text;
        if (text.empty() || text.back() != '\n') std::cout << "\n";
        return;
    }
    std::ofstream out(flags.out_path, std::ios::binary);
    if (!out) throw ConfigError("cannot open output " + flags.out_path);
    out << text;
    if (!out) throw ConfigError("write failed for " + flags.out_path);
}

void emit_json(const SharedFlags& flags, const nlohmann::json& doc) {
    emit(flags, doc.dump(2) + "\n");
}

int cmd_encode(const SharedFlags& flags, const std::string& frames_dir,
               const std::string& instruction) {
    auto j = load_config(flags.config_path);
    model::LmConfig cfg =
        j.is_object() && !j.empty() ? model::LmConfig::from_json(j) : model::LmConfig();
    apply_encoder_overrides(flags, cfg.enc);
    uint64_t seed = flags.seed.value_or(j.value("seed", 0));
    cfg.validate();

    auto set = frames::load_frames(frames_dir);
    if (set.side != cfg.enc.image_side) {
        throw ConfigError("frames are " + std::to_string(set.side) + "x" +
                          std::to_string(set.side) + " but the config wants " +
                          std::to_string(cfg.enc.image_side));
    }

    auto w = model::LmWeights::init(cfg, seed);
    std::vector<vision::FrameTrace> traces;
    auto embedded =
        vision::encode_video(set.frames, cfg.enc, w.vis, flags.trace ? &traces : nullptr);

    nlohmann::json per_frame = nlohmann::json::array();
    size_t total = 0;
    for (size_t f = 0; f < embedded.size(); ++f) {
        const auto& tokens = embedded[f].tokens;
        nlohmann::json sizes = nlohmann::json::array();
        nlohmann::json origins = nlohmann::json::array();
        for (const auto& t : tokens.patches) {
            sizes.push_back(t.size);
            origins.push_back(t.origin);
        }
        size_t count = 1 + tokens.patches.size();
        total += count;
        per_frame.push_back({{"frame", f},
                             {"file", set.names[f]},
                             {"tokens", count},
                             {"patch_sizes", sizes},
                             {"patch_origins", origins}});
    }

    std::string prefix = instruction.empty() ? cfg.prefix_text : instruction;
    auto assembled = prompt::assemble_sandwich(prompt::tokenize_stub(prefix), embedded,
                                               prompt::tokenize_stub(cfg.suffix_text),
                                               w.embed, cfg.d_llm);

    nlohmann::json payload = {{"per_frame", per_frame},
                              {"total_visual_tokens", total},
                              {"sequence_length", assembled.layout.length()},
                              {"layout", assembled.layout.to_json()}};
    if (flags.trace) {
        nlohmann::json jt = nlohmann::json::array();
        for (size_t f = 0; f < traces.size(); ++f) {
            nlohmann::json layers = nlohmann::json::array();
            for (const auto& layer : traces[f].layers) {
                nlohmann::json pairs = nlohmann::json::array();
                for (const auto& [src, dst] : layer.pairs) {
                    pairs.push_back({{"merged", src}, {"into", dst}});
                }
                layers.push_back({{"r", layer.r},
                                  {"pairs", pairs},
                                  {"sizes_after", layer.sizes_after},
                                  {"origins_after", layer.origins_after}});
            }
            jt.push_back({{"frame", f}, {"layers", layers}});
        }
        payload["trace"] = jt;
    }
    emit_json(flags, report::envelope(cfg.to_json(), seed, std::move(payload)));
    return 0;
}

int cmd_bench_mem(const SharedFlags& flags) {
    auto cfg = bench::MemBenchConfig::from_json(load_config(flags.config_path));
    if (flags.seed) cfg.seed = *flags.seed;
    apply_encoder_overrides(flags, cfg.lm.enc);
    auto result = bench::run_bench_mem(cfg, flags.trace ? &std::cerr : nullptr);
    emit_json(flags, result.to_json(cfg));
    return 0;
}

int cmd_bench_latency(const SharedFlags& flags) {
    auto cfg = bench::LatencyBenchConfig::from_json(load_config(flags.config_path));
    if (flags.seed) cfg.seed = *flags.seed;
    cfg.single_precision = flags.precision == "single";
    auto result = bench::run_bench_latency(cfg, flags.trace ? &std::cerr : nullptr);
    emit_json(flags, result.to_json(cfg));
    return 0;
}

int cmd_ablate(const SharedFlags& flags, const std::string& axis) {
    auto cfg = bench::AblateConfig::from_json(load_config(flags.config_path));
    if (flags.seed) cfg.seed = *flags.seed;
    apply_encoder_overrides(flags, cfg.lm.enc);
    emit(flags, bench::run_ablate(cfg, axis, flags.trace ? &std::cerr : nullptr));
    return 0;
}

int cmd_toy_train(const SharedFlags& flags) {
    auto j = load_config(flags.config_path);
    model::LmConfig lm = j.contains("lm") ? model::LmConfig::from_json(j["lm"])
                                          : model::LmConfig::toy_defaults();
    needle::NeedleTask task =
        j.contains("task") ? needle::NeedleTask::from_json(j["task"]) : needle::NeedleTask();
    train::TrainConfig tc =
        j.contains("train") ? train::TrainConfig::from_json(j["train"]) : train::TrainConfig();
    apply_encoder_overrides(flags, lm.enc);
    if (flags.seed) {
        tc.seed = *flags.seed;
        task.dataset_seed = *flags.seed;
    }

    auto w = model::LmWeights::init(lm, tc.seed);
    auto result = train::train_needle(lm, w, task, tc, &std::cerr);

    nlohmann::json config = {{"lm", lm.to_json()}, {"task", task.to_json()},
                             {"train", tc.to_json()}};
    emit_json(flags, report::envelope(config, tc.seed, result.to_json()));
    return 0;
}

int cmd_inspect(const SharedFlags& flags) {
    auto j = load_config(flags.config_path);
    model::LmConfig cfg =
        j.is_object() && !j.empty() ? model::LmConfig::from_json(j) : model::LmConfig::toy_defaults();
    apply_encoder_overrides(flags, cfg.enc);
    uint64_t seed = flags.seed.value_or(j.value("seed", 0));
    cfg.validate();

    auto schedule =
        merge::plan_schedule(cfg.enc.n_patches(), cfg.enc.n_used(), cfg.enc.keep_ratio);
    size_t tokens_pf = cfg.enc.n_patches() - schedule.total_removed() + 1;

    auto w = model::LmWeights::init(cfg, seed);
    auto frame = frames::synthesize_frames(1, cfg.enc.image_side, seed);
    auto fe = vision::encode_frame(frame[0], cfg.enc, w.vis);
    std::vector<vision::FrameEmbedding> one = {fe};
    auto assembled = prompt::assemble_sandwich(prompt::tokenize_stub(cfg.prefix_text), one,
                                               prompt::tokenize_stub(cfg.suffix_text),
                                               w.embed, cfg.d_llm);

    attn::MemoryModel rec{cfg.d_llm, cfg.n_blocks, 4, attn::StateVariant::rwkv4_state, 0, 0};
    attn::MemoryModel base{cfg.d_llm, cfg.n_blocks, 4, attn::StateVariant::kv_cache, 0, 0};
    nlohmann::json payload = {
        {"merge_schedule",
         {{"removals", schedule.removals}, {"tokens_per_frame", tokens_pf}}},
        {"single_frame_layout", assembled.layout.to_json()},
        {"recurrent_state_floats", attn::recurrent_state_floats(rec)},
        {"kv_cache_floats_per_token", attn::kv_cache_floats(base, 1)},
        {"crossover_t0_at_34x", attn::crossover_t0(base, rec, 34.0)}};
    emit_json(flags, report::envelope(cfg.to_json(), seed, std::move(payload)));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale RWKV video pipeline benchmarks"};
    app.require_subcommand(1);
    app.fallthrough();

    SharedFlags flags;
    app.add_option("--config", flags.config_path, "JSON config file");
    uint64_t seed_arg = 0;
    auto* seed_opt = app.add_option("--seed", seed_arg, "seed override");
    app.add_option("--out", flags.out_path, "output path (default stdout)");
    app.add_option("--precision", flags.precision, "single|double")
        ->check(CLI::IsMember({"single", "double"}));
    std::string order_arg;
    auto* order_opt = app.add_option("--order", order_arg, "asc|desc|random");
    double ratio_arg = 0.0;
    auto* ratio_opt = app.add_option("--keep-ratio", ratio_arg, "keep ratio in (0,1]");
    std::string policy_arg;
    auto* policy_opt =
        app.add_option("--policy", policy_arg, "always|multi-frame-only");
    app.add_flag("--trace", flags.trace, "verbose traces");

    auto* encode = app.add_subcommand("encode", "encode a directory of PPM frames");
    std::string frames_dir;
    encode->add_option("--frames", frames_dir, "directory of *.ppm frames")->required();
    std::string instruction;
    encode->add_option("--instruction", instruction, "prefix text for the layout");

    auto* bench_mem = app.add_subcommand("bench-mem", "memory scaling benchmark");
    auto* bench_latency = app.add_subcommand("bench-latency", "latency scaling benchmark");

    auto* ablate = app.add_subcommand("ablate", "order / ratio sweeps on the needle task");
    std::string axis;
    ablate->add_option("--axis", axis, "order|ratio")->required();

    auto* toy_train = app.add_subcommand("toy-train", "train the toy pipeline end to end");
    auto* inspect = app.add_subcommand("inspect", "dump schedule, layout, and state sizes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 2;
    }

    if (*seed_opt) flags.seed = seed_arg;
    if (*order_opt) flags.order = order_arg;
    if (*ratio_opt) flags.keep_ratio = ratio_arg;
    if (*policy_opt) flags.policy = policy_arg;

    try {
        if (*encode) return cmd_encode(flags, frames_dir, instruction);
        if (*bench_mem) return cmd_bench_mem(flags);
        if (*bench_latency) return cmd_bench_latency(flags);
        if (*ablate) return cmd_ablate(flags, axis);
        if (*toy_train) return cmd_toy_train(flags);
        if (*inspect) return cmd_inspect(flags);
    } catch (const NumericError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
