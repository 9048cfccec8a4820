#include "longvid/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>

namespace longvid::train {

nlohmann::json TrainConfig::to_json() const {
    return {{"n_train", n_train},       {"n_held", n_held},
            {"epochs", epochs},         {"batch_size", batch_size},
            {"seed", seed},             {"lr", adam.lr},
            {"beta1", adam.beta1},      {"beta2", adam.beta2},
            {"adam_eps", adam.eps},     {"grad_clip", grad_clip},
            {"lr_floor", lr_floor},     {"stop_accuracy", stop_accuracy}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.n_train = j.value("n_train", c.n_train);
    c.n_held = j.value("n_held", c.n_held);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("adam_eps", c.adam.eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.lr_floor = j.value("lr_floor", c.lr_floor);
    c.stop_accuracy = j.value("stop_accuracy", c.stop_accuracy);
    return c;
}

nlohmann::json TrainResult::to_json() const {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : curve) {
        epochs.push_back({{"epoch", e.epoch},
                          {"mean_loss", e.mean_loss},
                          {"held_accuracy", e.held_accuracy},
                          {"epoch_seconds", e.seconds}});
    }
    return {{"epochs", epochs},
            {"initial_loss", initial_loss},
            {"final_loss", final_loss},
            {"initial_accuracy", initial_accuracy},
            {"final_accuracy", final_accuracy},
            {"diverged", diverged},
            {"steps", steps}};
}

void Adam::step(std::vector<model::NamedParam>& params,
                const std::vector<std::vector<double>>& grads, double lr_scale) {
    if (grads.size() != params.size()) {
        throw ConfigError("adam: gradient count does not match parameter count");
    }
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].data->size(), 0.0);
            v_[i].assign(params[i].data->size(), 0.0);
        }
    }
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& x = *params[i].data;
        const auto& g = grads[i];
        if (g.size() != x.size()) {
            throw ConfigError("adam: gradient size mismatch for " + params[i].name);
        }
        for (size_t e = 0; e < x.size(); ++e) {
            m_[i][e] = cfg_.beta1 * m_[i][e] + (1.0 - cfg_.beta1) * g[e];
            v_[i][e] = cfg_.beta2 * v_[i][e] + (1.0 - cfg_.beta2) * g[e] * g[e];
            double mh = m_[i][e] / bc1;
            double vh = v_[i][e] / bc2;
            x[e] -= lr_scale * cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        }
    }
}

double clip_gradients(std::vector<std::vector<double>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (double v : g) sq += v * v;
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double scale = max_norm / norm;
        for (auto& g : grads)
            for (double& v : g) v *= scale;
    }
    return norm;
}

double evaluate_accuracy(const model::LmConfig& cfg, const model::LmWeights& w,
                         const std::vector<needle::NeedleSample>& samples) {
    if (samples.empty()) throw ConfigError("evaluate_accuracy: no samples");
    size_t hits = 0;
    for (const auto& s : samples) {
        if (model::argmax_class(model::plain_logits(cfg, w, s.frames)) == s.label) ++hits;
    }
    return double(hits) / double(samples.size());
}

namespace {

double probe_loss(const model::LmConfig& cfg, model::LmWeights& w,
                  const std::vector<needle::NeedleSample>& samples, size_t count) {
    count = std::min(count, samples.size());
    double total = 0.0;
    for (size_t i = 0; i < count; ++i) {
        ad::Tape tape;
        tape.grad_enabled = false;
        auto run = model::tape_forward(tape, cfg, w, samples[i].frames, samples[i].label);
        total += tape.value(run.loss).data[0];
    }
    return total / double(count);
}

}  // namespace

TrainResult train_needle(const model::LmConfig& cfg, model::LmWeights& w,
                         const needle::NeedleTask& task, const TrainConfig& tc,
                         std::ostream* log) {
    cfg.validate();
    task.validate();
    if (tc.n_train == 0 || tc.n_held == 0 || tc.batch_size == 0 || tc.epochs == 0) {
        throw ConfigError("train config: zero-sized training setup");
    }
    if (task.image_side != cfg.enc.image_side) {
        throw ConfigError("train: task frames are " + std::to_string(task.image_side) +
                          " pixels, encoder wants " + std::to_string(cfg.enc.image_side));
    }

    auto train_set = needle::make_dataset(task, tc.n_train, 0);
    auto held_set = needle::make_dataset(task, tc.n_held, 1);

    TrainResult result;
    result.initial_loss = probe_loss(cfg, w, train_set, 64);
    result.initial_accuracy = evaluate_accuracy(cfg, w, held_set);
    if (log != nullptr) {
        *log << "untrained: probe loss " << result.initial_loss << ", held-out accuracy "
             << result.initial_accuracy << "\n";
    }

    Adam adam(tc.adam);
    auto entries = w.entries(cfg);
    std::vector<std::vector<double>> grads(entries.size());
    model::LmWeights checkpoint = w;  // last finite state
    model::LmWeights best = w;
    double best_accuracy = result.initial_accuracy;

    Rng shuffler(tc.seed ^ 0xc0ffee5eedull);
    std::vector<size_t> order(train_set.size());

    size_t steps_per_epoch = (train_set.size() + tc.batch_size - 1) / tc.batch_size;
    size_t planned_steps = steps_per_epoch * tc.epochs;

    for (size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        shuffle_indices(order.begin(), order.end(), shuffler);

        double epoch_loss = 0.0;
        size_t seen = 0;
        bool finite = true;

        for (size_t begin = 0; begin < order.size() && finite; begin += tc.batch_size) {
            size_t len = std::min(tc.batch_size, order.size() - begin);
            for (auto& g : grads) g.clear();
            for (size_t i = 0; i < entries.size(); ++i) {
                grads[i].assign(entries[i].data->size(), 0.0);
            }
            double inv = 1.0 / double(len);

            for (size_t j = 0; j < len && finite; ++j) {
                const auto& sample = train_set[order[begin + j]];
                try {
                    ad::Tape tape;
                    auto run = model::tape_forward(tape, cfg, w, sample.frames, sample.label);
                    double loss = tape.value(run.loss).data[0];
                    if (!std::isfinite(loss)) {
                        finite = false;
                        break;
                    }
                    tape.backward(run.loss);
                    for (size_t i = 0; i < run.params.size(); ++i) {
                        const auto& g = tape.grad(run.params[i].second);
                        for (size_t e = 0; e < g.numel(); ++e) grads[i][e] += inv * g.data[e];
                    }
                    epoch_loss += loss;
                    ++seen;
                } catch (const NumericError&) {
                    finite = false;
                }
            }
            if (!finite) break;
            clip_gradients(grads, tc.grad_clip);
            double frac = double(result.steps) / double(planned_steps);
            double lr_scale =
                tc.lr_floor +
                (1.0 - tc.lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
            adam.step(entries, grads, lr_scale);
            ++result.steps;
        }

        if (!finite) {
            w = checkpoint;
            result.diverged = true;
            if (log != nullptr) {
                *log << "epoch " << epoch + 1
                     << ": loss went non-finite, rolled back to the last checkpoint\n";
            }
            break;
        }

        EpochStats stats;
        stats.epoch = epoch + 1;
        stats.mean_loss = epoch_loss / double(seen);
        stats.held_accuracy = evaluate_accuracy(cfg, w, held_set);
        stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                            .count();
        result.curve.push_back(stats);
        checkpoint = w;
        if (stats.held_accuracy > best_accuracy) {
            best_accuracy = stats.held_accuracy;
            best = w;
        }
        if (log != nullptr) {
            *log << "epoch " << stats.epoch << ": mean loss " << stats.mean_loss
                 << ", held-out accuracy " << stats.held_accuracy << " ("
                 << stats.seconds << "s)\n";
        }
        if (tc.stop_accuracy > 0.0 && stats.held_accuracy >= tc.stop_accuracy) break;
    }

    // keep whichever epoch generalized best; a late unstable epoch must
    // not erase an earlier good model
    w = best;
    result.final_accuracy = best_accuracy;
    result.final_loss = probe_loss(cfg, w, train_set, 64);
    return result;
}

}  // namespace longvid::train
