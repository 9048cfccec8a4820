#pragma once

// End-to-end training on the needle task: Adam over every parameter of
// the toy pipeline, minibatch gradient accumulation, per-epoch held-out
// evaluation, and divergence rollback to the last finite checkpoint.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "json.hpp"
#include "longvid/model.hpp"
#include "longvid/needle.hpp"

namespace longvid::train {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    size_t n_train = 5000;
    size_t n_held = 500;
    size_t epochs = 8;
    size_t batch_size = 8;
    uint64_t seed = 0;  // weight init and epoch shuffling
    AdamConfig adam;
    double grad_clip = 1.0;       // global-norm ceiling; 0 disables
    double lr_floor = 0.1;        // cosine decay to lr * lr_floor; 1 disables
    double stop_accuracy = 0.98;  // early stop; 0 disables

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochStats {
    size_t epoch = 0;
    double mean_loss = 0.0;
    double held_accuracy = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> curve;
    double initial_loss = 0.0;      // probe-set loss before training
    double final_loss = 0.0;        // probe-set loss after training
    double initial_accuracy = 0.0;  // held-out, untrained
    double final_accuracy = 0.0;
    bool diverged = false;
    size_t steps = 0;

    // volatile timings stay under *_seconds keys so reports can be
    // compared with them stripped
    nlohmann::json to_json() const;
};

// one Adam moment pair per parameter tensor, addressed by position
class Adam {
public:
    explicit Adam(const AdamConfig& cfg) : cfg_(cfg) {}

    void step(std::vector<model::NamedParam>& params,
              const std::vector<std::vector<double>>& grads, double lr_scale = 1.0);

private:
    AdamConfig cfg_;
    size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// scales grads in place so their global L2 norm is at most max_norm;
// returns the pre-clip norm. max_norm <= 0 leaves them untouched.
double clip_gradients(std::vector<std::vector<double>>& grads, double max_norm);

double evaluate_accuracy(const model::LmConfig& cfg, const model::LmWeights& w,
                         const std::vector<needle::NeedleSample>& samples);

// trains in place; returns the curve. log, if given, receives one line
// per epoch.
TrainResult train_needle(const model::LmConfig& cfg, model::LmWeights& w,
                         const needle::NeedleTask& task, const TrainConfig& tc,
                         std::ostream* log = nullptr);

}  // namespace longvid::train
