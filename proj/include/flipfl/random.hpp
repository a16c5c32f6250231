#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace flipfl {

using Rng = std::mt19937_64;

/// Purpose tags keep independent random streams from colliding even when
/// they share the same (seed, round, client) key.
enum class StreamPurpose : std::uint64_t {
    dataset = 1,
    partition,
    model_init,
    client_sampling,
    local_training,
    attack_scores,
    attack_validation,
    attack_trigger,
    server,
    evaluation,
    crfl_train_noise,
    crfl_test_noise,
    deepsight,
    test_split,
};

/// Deterministic stream keyed by (seed, purpose, keys...). Two calls with the
/// same arguments yield identical sequences regardless of call order.
inline Rng make_stream(std::uint64_t seed, StreamPurpose purpose,
                       std::initializer_list<std::uint64_t> keys = {}) {
    std::vector<std::uint32_t> words;
    words.reserve(4 + 2 * keys.size());
    auto push = [&](std::uint64_t v) {
        words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
        words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(seed);
    push(static_cast<std::uint64_t>(purpose));
    for (auto k : keys) push(k);
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

}  // namespace flipfl
