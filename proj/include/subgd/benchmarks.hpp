#pragma once

// Binds the sinusoid and RLC problems to the generic callbacks in meta.hpp:
// task splits, support losses, query scores, meta-training samplers.

#include <memory>
#include <numeric>

#include "subgd/meta.hpp"
#include "subgd/rlc.hpp"
#include "subgd/sinusoid.hpp"

namespace subgd {

enum class Split : std::uint64_t { train = 1, validation = 2, test = 3, nominal = 4 };

inline std::uint64_t split_seed(std::uint64_t seed, Split s) { return derive_seed(seed, static_cast<std::uint64_t>(s)); }

/// Loss over `data` where each call uses the next chunk of a per-epoch
/// permutation, so one pass is `epoch_steps` updates. 0 means full batch.
inline Objective minibatch_mse_objective(const MlpConfig& config, Batch data, std::size_t epoch_steps,
                                         std::uint64_t shuffle_seed) {
    if (epoch_steps == 0 || epoch_steps == 1) {
        auto shared = std::make_shared<const Batch>(std::move(data));
        return [config, shared](std::span<const double> p, std::span<double> g) {
            return mse_loss_grad(config, p, *shared, g);
        };
    }
    struct State {
        Batch data;
        std::vector<std::size_t> order;
        std::size_t chunk = 0;
        std::size_t chunks = 0;
        Rng stream;
        Batch scratch;
    };
    const std::size_t m = data.size();
    auto st = std::make_shared<State>(State{std::move(data), std::vector<std::size_t>(m), 0, std::min(epoch_steps, m),
                                            Rng(shuffle_seed), {}});
    std::iota(st->order.begin(), st->order.end(), std::size_t{0});
    return [config, st](std::span<const double> p, std::span<double> g) {
        if (st->chunk == 0) shuffle(st->order, st->stream);
        const std::size_t m = st->order.size();
        const std::size_t lo = st->chunk * m / st->chunks;
        const std::size_t hi = (st->chunk + 1) * m / st->chunks;
        st->chunk = (st->chunk + 1) % st->chunks;
        Batch& b = st->scratch;
        b.inputs = DenseMatrix(hi - lo, st->data.inputs.cols());
        b.targets = DenseMatrix(hi - lo, st->data.targets.cols());
        for (std::size_t r = lo; r < hi; ++r) {
            for (std::size_t c = 0; c < b.inputs.cols(); ++c) b.inputs(r - lo, c) = st->data.inputs(st->order[r], c);
            for (std::size_t c = 0; c < b.targets.cols(); ++c) b.targets(r - lo, c) = st->data.targets(st->order[r], c);
        }
        return mse_loss_grad(config, p, b, g);
    };
}

// ---------------------------------------------------------------------------

struct SinusoidBenchmark {
    MlpConfig config = sinusoid_mlp_config();
    std::uint64_t seed = 0;
    std::size_t train_tasks = 300;
    std::size_t query_size = 100;      // evaluation query set
    std::size_t collect_samples = 100; // samples per training task when collecting directions
    std::size_t epoch_steps = 0;       // few-shot mini-batching

    SinusoidTask task(Split s, std::size_t i) const {
        Rng r(derive_seed(split_seed(seed, s), i));
        return sample_sinusoid_task(r);
    }

    /// Episode for (task, support size, evaluation seed); identical across calls.
    SinusoidEpisode episode(Split s, std::size_t i, std::size_t support, std::uint64_t eval_seed) const {
        Rng r(derive_seed(derive_seed(split_seed(seed, s) ^ 0x5eed5eed5eed5eedULL, eval_seed), i));
        return sample_episode(task(s, i), support, query_size, r);
    }

    FewShotInstance instance(Split s, std::size_t i, std::size_t support, std::uint64_t eval_seed) const {
        auto ep = std::make_shared<const SinusoidEpisode>(episode(s, i, support, eval_seed));
        const MlpConfig cfg = config;
        return {minibatch_mse_objective(cfg, ep->support, epoch_steps, derive_seed(eval_seed, i)),
                [cfg, ep](std::span<const double> p) { return episode_mse(cfg, p, ep->query); }};
    }

    InstanceFactory factory(Split s) const {
        return [self = *this, s](std::size_t t, std::size_t support, std::uint64_t eval_seed) {
            return self.instance(s, t, support, eval_seed);
        };
    }

    /// Full-batch fine-tuning problem for training task i.
    TrainingTask training_task(std::size_t i) const {
        Rng r(derive_seed(split_seed(seed, Split::train) ^ 0xc011ec7ULL, i));
        auto data = std::make_shared<const Batch>(sample_sinusoid_batch(task(Split::train, i), collect_samples, r));
        const MlpConfig cfg = config;
        return {[cfg, data](std::span<const double> p, std::span<double> g) { return mse_loss_grad(cfg, p, *data, g); },
                {}};
    }

    /// Fresh samples of the nominal task each call.
    StochasticObjective supervised_objective(std::size_t batch) const {
        const MlpConfig cfg = config;
        return [cfg, batch](std::span<const double> p, std::span<double> g, Rng& r) {
            return mse_loss_grad(cfg, p, sample_sinusoid_batch(kNominalSinusoid, batch, r), g);
        };
    }

    /// Random training task with fresh support and query samples.
    TaskSampler meta_sampler(std::size_t support, std::size_t query) const {
        return [self = *this, support, query](Rng& r) {
            const SinusoidTask t = self.task(Split::train, static_cast<std::size_t>(r.below(self.train_tasks)));
            auto ep = std::make_shared<const SinusoidEpisode>(sample_episode(t, support, query, r));
            const MlpConfig cfg = self.config;
            return MetaTask{
                [cfg, ep](std::span<const double> p, std::span<double> g) { return mse_loss_grad(cfg, p, ep->support, g); },
                [cfg, ep](std::span<const double> p, std::span<double> g) { return mse_loss_grad(cfg, p, ep->query, g); }};
        };
    }
};

// ---------------------------------------------------------------------------

/// Callbacks returned by the member functions refer to this object; keep it in place while they are used.
struct RlcBenchmark {
    NeuralSsModel model;
    std::uint64_t seed = 0;
    std::size_t pretrain_batch = 16;
    std::size_t pretrain_length = 256;
    std::size_t meta_window = 50;
    std::vector<RlcDataset> train, validation, test;
    RlcDataset nominal;

    /// Simulates the nominal dataset and every task dataset.
    static RlcBenchmark create(std::uint64_t seed, std::size_t n_train, std::size_t n_validation, std::size_t n_test) {
        RlcBenchmark b;
        b.seed = seed;
        b.nominal = make_task_dataset(kNominalRlc, split_seed(seed, Split::nominal));
        b.train = make_split(seed, Split::train, n_train);
        b.validation = make_split(seed, Split::validation, n_validation);
        b.test = make_split(seed, Split::test, n_test);
        return b;
    }

    static RlcDataset make_task(std::uint64_t seed, Split s, std::size_t i) {
        const std::uint64_t task_seed = derive_seed(split_seed(seed, s), i);
        Rng r(task_seed);
        const RlcParams p = sample_rlc_params(r);
        return make_task_dataset(p, derive_seed(task_seed, 1));
    }

    static std::vector<RlcDataset> make_split(std::uint64_t seed, Split s, std::size_t count) {
        return parallel_map<RlcDataset>(count, [&](std::size_t i) { return make_task(seed, s, i); });
    }

    const std::vector<RlcDataset>& tasks(Split s) const {
        switch (s) {
        case Split::train: return train;
        case Split::validation: return validation;
        case Split::test: return test;
        case Split::nominal: break;
        }
        throw ValidationError("RlcBenchmark: no task list for the nominal split");
    }

    StochasticObjective supervised_objective() const {
        return [this](std::span<const double> p, std::span<double> g, Rng& r) {
            return truncated_fit_loss_grad(model, p, nominal, pretrain_batch, pretrain_length, r, g);
        };
    }

    /// Support and query are two non-overlapping truncated windows of one random trajectory.
    TaskSampler meta_sampler() const {
        return [this](Rng& r) {
            if (train.empty()) throw ValidationError("RlcBenchmark: no training tasks");
            const RlcDataset& d = train[static_cast<std::size_t>(r.below(train.size()))];
            const RlcTrajectory& tr = d.trajectories[static_cast<std::size_t>(r.below(d.trajectories.size()))];
            const std::size_t w = meta_window;
            if (tr.y.size() < 2 * w + 1) throw ValidationError("RlcBenchmark: sequence too short for meta windows");
            std::size_t a = 0, b = 0;
            do {
                a = 1 + static_cast<std::size_t>(r.below(tr.y.size() - w));
                b = 1 + static_cast<std::size_t>(r.below(tr.y.size() - w));
            } while (a < b + w && b < a + w);
            auto sw = std::make_shared<const SequenceWindow>(truncated_window(tr, a, w));
            auto qw = std::make_shared<const SequenceWindow>(truncated_window(tr, b, w));
            const NeuralSsModel& m = model;
            const double ts = d.ts;
            return MetaTask{[&m, sw, ts](std::span<const double> p, std::span<double> g) {
                                return sequence_fit_loss_grad(m, p, std::span(sw.get(), 1), g, ts);
                            },
                            [&m, qw, ts](std::span<const double> p, std::span<double> g) {
                                return sequence_fit_loss_grad(m, p, std::span(qw.get(), 1), g, ts);
                            }};
        };
    }

    /// Fine-tuning problem for training task i: truncated mini-batches from
    /// trajectories 0 and 1, validation by full rollout of trajectory 2.
    TrainingTask training_task(std::size_t i) const {
        const RlcDataset& d = train.at(i);
        auto stream = std::make_shared<Rng>(derive_seed(split_seed(seed, Split::train) ^ 0xc011ec7ULL, i));
        const std::size_t batch = pretrain_batch, length = pretrain_length;
        return {[this, &d, stream, batch, length](std::span<const double> p, std::span<double> g) {
                    const auto w = sample_truncated_windows(d, batch, length, *stream, 2);
                    return sequence_fit_loss_grad(model, p, w, g, d.ts);
                },
                [this, &d](std::span<const double> p) { return rollout_mse(model, p, d.trajectories.back()); }};
    }

    /// Support: first `support` steps of trajectory 0 from the true initial
    /// state. Query: full rollout MSE on the last trajectory.
    FewShotInstance instance(Split s, std::size_t i, std::size_t support) const {
        const RlcDataset& d = tasks(s).at(i);
        auto w = std::make_shared<const SequenceWindow>(prefix_window(d.trajectories.front(), support));
        return {[this, w, ts = d.ts](std::span<const double> p, std::span<double> g) {
                    return sequence_fit_loss_grad(model, p, std::span(w.get(), 1), g, ts);
                },
                [this, &d](std::span<const double> p) { return rollout_mse(model, p, d.trajectories.back()); }};
    }

    /// The data are fixed per task, so the evaluation seed is ignored.
    InstanceFactory factory(Split s) const {
        return [this, s](std::size_t t, std::size_t support, std::uint64_t) { return instance(s, t, support); };
    }
};

} // namespace subgd
