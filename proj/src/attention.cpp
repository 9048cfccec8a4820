#include "longvid/attention.hpp"

namespace longvid::attn {

size_t kv_cache_floats(const MemoryModel& m, size_t tokens) {
    if (m.d_model == 0 || m.n_layers == 0) throw ConfigError("memory model: zero dimensions");
    return 2 * tokens * m.d_model * m.n_layers;
}

size_t recurrent_state_floats(const MemoryModel& m) {
    if (m.d_model == 0 || m.n_layers == 0) throw ConfigError("memory model: zero dimensions");
    switch (m.variant) {
        case StateVariant::rwkv4_state:
            // wkv triple (a, b, p) plus the two token-shift buffers
            return 5 * m.d_model * m.n_layers;
        case StateVariant::rwkv5_state:
            if (m.heads == 0 || m.head_dim == 0 || m.heads * m.head_dim != m.d_model) {
                throw ConfigError("memory model: rwkv5 head geometry inconsistent");
            }
            return (m.heads * m.head_dim * m.head_dim + 2 * m.d_model) * m.n_layers;
        case StateVariant::kv_cache:
            throw ConfigError("memory model: kv-cache variant has no fixed state size");
    }
    throw ConfigError("memory model: unknown variant");
}

size_t crossover_t0(const MemoryModel& baseline, const MemoryModel& recurrent, double ratio) {
    size_t state = recurrent_state_floats(recurrent);
    size_t per_token = 2 * baseline.d_model * baseline.n_layers;
    // smallest T with per_token * T > ratio * state
    auto t0 = size_t(std::floor(ratio * double(state) / double(per_token))) + 1;
    while (double(kv_cache_floats(baseline, t0 - 1)) > ratio * double(state)) t0 -= 1;
    while (double(kv_cache_floats(baseline, t0)) <= ratio * double(state)) t0 += 1;
    return t0;
}

}  // namespace longvid::attn
