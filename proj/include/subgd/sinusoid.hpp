#pragma once

// Sinusoid regression tasks: y = a sin(x - b), a ~ U[0.1, 5], b ~ U[0, pi], x ~ U[-5, 5].

#include <cmath>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "subgd/binary_io.hpp"
#include "subgd/nn.hpp"
#include "subgd/rng.hpp"

namespace subgd {

struct SinusoidTask {
    double amplitude = 1.0;
    double phase = 0.0;

    double operator()(double x) const { return amplitude * std::sin(x - phase); }
    friend bool operator==(const SinusoidTask&, const SinusoidTask&) = default;
};

inline constexpr double kAmplitudeMin = 0.1;
inline constexpr double kAmplitudeMax = 5.0;
inline constexpr double kPhaseMax = std::numbers::pi;
inline constexpr double kInputMin = -5.0;
inline constexpr double kInputMax = 5.0;

/// The single configuration used for supervised pre-training.
inline constexpr SinusoidTask kNominalSinusoid{2.5, std::numbers::pi / 2.0};

inline SinusoidTask sample_sinusoid_task(Rng& stream) {
    SinusoidTask t;
    t.amplitude = stream.uniform(kAmplitudeMin, kAmplitudeMax);
    t.phase = stream.uniform(0.0, kPhaseMax);
    return t;
}

inline Batch sample_sinusoid_batch(const SinusoidTask& task, std::size_t size, Rng& stream) {
    Batch b{DenseMatrix(size, 1), DenseMatrix(size, 1)};
    for (std::size_t i = 0; i < size; ++i) {
        const double x = stream.uniform(kInputMin, kInputMax);
        b.inputs(i, 0) = x;
        b.targets(i, 0) = task(x);
    }
    return b;
}

struct SinusoidEpisode {
    SinusoidTask task;
    Batch support;
    Batch query;
};

/// Support and query come from two independent child streams.
inline SinusoidEpisode sample_episode(const SinusoidTask& task, std::size_t support_size, std::size_t query_size,
                                      Rng& stream) {
    if (support_size == 0 || query_size == 0) throw ValidationError("sample_episode: sizes must be >= 1");
    Rng support_stream = stream.split();
    Rng query_stream = stream.split();
    return {task, sample_sinusoid_batch(task, support_size, support_stream),
            sample_sinusoid_batch(task, query_size, query_stream)};
}

inline double episode_mse(const MlpConfig& config, std::span<const double> params, const Batch& batch) {
    return mse_loss_grad(config, params, batch, {});
}

/// CSV with columns task_id,split,x,y.
inline void export_episodes_csv(const fs::path& path, const std::vector<SinusoidEpisode>& episodes) {
    std::string out = "task_id,split,x,y\n";
    char line[128];
    for (std::size_t t = 0; t < episodes.size(); ++t) {
        const auto emit = [&](const char* split, const Batch& b) {
            for (std::size_t i = 0; i < b.size(); ++i) {
                std::snprintf(line, sizeof line, "%zu,%s,%.17g,%.17g\n", t, split, b.inputs(i, 0), b.targets(i, 0));
                out += line;
            }
        };
        emit("support", episodes[t].support);
        emit("query", episodes[t].query);
    }
    write_file_atomic(path, out);
}

} // namespace subgd
