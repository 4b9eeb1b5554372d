#pragma once

// Pre-training (supervised, foMAML, Reptile), per-task fine-tuning for
// direction collection, hyperparameter selection and few-shot evaluation.
// Everything here works on loss callbacks; benchmarks.hpp binds them to the
// sinusoid and RLC problems.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "subgd/optim.hpp"
#include "subgd/parallel.hpp"
#include "subgd/subspace.hpp"

namespace subgd {

/// Loss at params; fills grad when it is non-empty.
using Objective = std::function<double(std::span<const double>, std::span<double>)>;
/// Loss whose mini-batch is drawn from the given stream.
using StochasticObjective = std::function<double(std::span<const double>, std::span<double>, Rng&)>;
/// Query score of a parameter vector (+inf for a failed rollout).
using Evaluator = std::function<double(std::span<const double>)>;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

enum class OptimizerKind { sgd, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw ValidationError("unknown optimizer '" + s + "'");
}

struct FinetuneSpec {
    OptimizerKind optimizer = OptimizerKind::sgd;
    double eta = 1e-3;
    std::size_t steps = 100;
    std::size_t epoch_steps = 0; // 0: full batch; k: one epoch over the support set is k updates (applied by the benchmark's loss)
    bool normalized = false;

    void validate() const {
        if (!(eta > 0.0) || !std::isfinite(eta)) throw ValidationError("FinetuneSpec: eta must be positive");
        if (steps < 1) throw ValidationError("FinetuneSpec: steps must be >= 1");
    }
};

struct FinetuneOutcome {
    ParamVector params;
    std::size_t steps_used = 0;
    bool diverged = false;
};

inline void apply_update(OptState& state, const Preconditioner& p, std::span<const double> grad, OptimizerKind optimizer,
                         double eta, bool normalized = false) {
    if (optimizer == OptimizerKind::sgd) {
        subgd_step(state, p, grad, eta, normalized);
    } else {
        if (!all_finite(grad)) throw ValidationError("apply_update: non-finite gradient");
        adam_step(state, precondition(p, grad), eta);
    }
}

/// Runs spec.steps preconditioned updates from theta0. on_step(k, params) is
/// called after update k. A non-finite loss, gradient or parameter stops the
/// run and marks it diverged.
inline FinetuneOutcome finetune(std::span<const double> theta0, const Preconditioner& p, const Objective& loss,
                                const FinetuneSpec& spec,
                                const std::function<void(std::size_t, const ParamVector&)>& on_step = {}) {
    FinetuneOutcome out;
    OptState state(ParamVector(theta0.begin(), theta0.end()));
    std::vector<double> grad(theta0.size());
    for (std::size_t k = 1; k <= spec.steps; ++k) {
        const double l = loss(state.params, grad);
        if (!std::isfinite(l) || !all_finite(grad)) {
            out.diverged = true;
            break;
        }
        apply_update(state, p, grad, spec.optimizer, spec.eta, spec.normalized);
        if (!all_finite(state.params)) {
            out.diverged = true;
            break;
        }
        out.steps_used = k;
        if (on_step) on_step(k, state.params);
    }
    out.params = std::move(state.params);
    return out;
}

/// Query scores after each checkpoint step count (ascending; 0 allowed).
/// Steps after a divergence score +inf.
inline std::vector<double> finetune_trace(std::span<const double> theta0, const Preconditioner& p, const Objective& loss,
                                          OptimizerKind optimizer, double eta, std::span<const std::size_t> checkpoints,
                                          const Evaluator& query) {
    if (!std::is_sorted(checkpoints.begin(), checkpoints.end()))
        throw ValidationError("finetune_trace: checkpoints must be ascending");
    std::vector<double> scores(checkpoints.size(), kInf);
    if (checkpoints.empty()) return scores;
    std::size_t next = 0;
    while (next < checkpoints.size() && checkpoints[next] == 0) scores[next++] = query(theta0);
    if (next == checkpoints.size()) return scores;
    FinetuneSpec spec{optimizer, eta, checkpoints.back(), 0, false};
    finetune(theta0, p, loss, spec, [&](std::size_t k, const ParamVector& params) {
        while (next < checkpoints.size() && checkpoints[next] == k) scores[next++] = query(params);
    });
    return scores;
}

// ---------------------------------------------------------------------------
// Pre-training

enum class PretrainMethod { supervised, fomaml, reptile };

inline std::string to_string(PretrainMethod m) {
    switch (m) {
    case PretrainMethod::supervised: return "supervised";
    case PretrainMethod::fomaml: return "fomaml";
    case PretrainMethod::reptile: return "reptile";
    }
    return "?";
}

inline PretrainMethod parse_pretrain_method(const std::string& s) {
    if (s == "supervised") return PretrainMethod::supervised;
    if (s == "fomaml") return PretrainMethod::fomaml;
    if (s == "reptile") return PretrainMethod::reptile;
    throw ValidationError("unknown pre-training method '" + s + "'");
}

struct PretrainSpec {
    PretrainMethod method = PretrainMethod::supervised;
    std::size_t iterations = 2000;
    std::size_t meta_batch_size = 25;
    std::size_t inner_steps = 10;
    double inner_lr = 0.005;
    double outer_lr = 1.0; // Adam learning rate for supervised and foMAML, step size for Reptile
    std::size_t support_size = 10;
    std::size_t query_size = 10;
    std::size_t batch_size = 100; // supervised mini-batch (sinusoid samples, or RLC subsequences)

    void validate() const {
        if (iterations < 1 || meta_batch_size < 1 || support_size < 1 || query_size < 1 || batch_size < 1)
            throw ValidationError("PretrainSpec: counts must be positive");
        if (!(inner_lr > 0.0) || !(outer_lr > 0.0)) throw ValidationError("PretrainSpec: rates must be positive");
    }
};

/// Adam on mini-batches drawn from one task.
inline ParamVector pretrain_supervised(ParamVector theta, const StochasticObjective& loss, std::size_t iterations,
                                       double lr, Rng& stream) {
    OptState state(std::move(theta));
    std::vector<double> grad(state.params.size());
    for (std::size_t it = 0; it < iterations; ++it) {
        const double l = loss(state.params, grad, stream);
        if (!std::isfinite(l) || !all_finite(grad))
            throw DivergenceError("pretrain_supervised: non-finite loss at iteration " + std::to_string(it));
        adam_step(state, grad, lr);
    }
    return std::move(state.params);
}

/// One task of a meta-batch: support loss for the inner loop, query loss for the outer update.
struct MetaTask {
    Objective support;
    Objective query;
};

using TaskSampler = std::function<MetaTask(Rng&)>;

namespace detail {

inline ParamVector inner_sgd(ParamVector theta, const Objective& support, std::size_t steps, double lr) {
    std::vector<double> grad(theta.size());
    for (std::size_t s = 0; s < steps; ++s) {
        support(theta, grad);
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
    }
    return theta;
}

} // namespace detail

/// First-order MAML: the outer gradient is the query gradient at the adapted
/// parameters; the outer optimizer is Adam.
inline ParamVector pretrain_fomaml(ParamVector theta, const TaskSampler& sampler, const PretrainSpec& spec, Rng& stream) {
    spec.validate();
    OptState outer(std::move(theta));
    const std::size_t n = outer.params.size();
    for (std::size_t it = 0; it < spec.iterations; ++it) {
        std::vector<Rng> streams;
        for (std::size_t b = 0; b < spec.meta_batch_size; ++b) streams.push_back(stream.split());
        const auto grads = parallel_map<std::vector<double>>(spec.meta_batch_size, [&](std::size_t b) {
            const MetaTask task = sampler(streams[b]);
            const auto adapted = detail::inner_sgd(outer.params, task.support, spec.inner_steps, spec.inner_lr);
            std::vector<double> g(n);
            task.query(adapted, g);
            return g;
        });
        std::vector<double> mean(n, 0.0);
        for (const auto& g : grads)
            for (std::size_t i = 0; i < n; ++i) mean[i] += g[i] / static_cast<double>(grads.size());
        if (!all_finite(mean)) throw DivergenceError("pretrain_fomaml: non-finite meta-gradient at iteration " + std::to_string(it));
        adam_step(outer, mean, spec.outer_lr);
    }
    return std::move(outer.params);
}

/// Reptile: theta <- theta + outer_lr * mean_t(theta_t - theta), with theta_t
/// from inner_steps SGD steps on task t's support loss.
inline ParamVector pretrain_reptile(ParamVector theta, const TaskSampler& sampler, const PretrainSpec& spec, Rng& stream) {
    spec.validate();
    const std::size_t n = theta.size();
    for (std::size_t it = 0; it < spec.iterations; ++it) {
        std::vector<Rng> streams;
        for (std::size_t b = 0; b < spec.meta_batch_size; ++b) streams.push_back(stream.split());
        const auto adapted = parallel_map<ParamVector>(spec.meta_batch_size, [&](std::size_t b) {
            const MetaTask task = sampler(streams[b]);
            return detail::inner_sgd(theta, task.support, spec.inner_steps, spec.inner_lr);
        });
        std::vector<double> mean(n, 0.0);
        for (const auto& a : adapted)
            for (std::size_t i = 0; i < n; ++i) mean[i] += (a[i] - theta[i]) / static_cast<double>(adapted.size());
        for (std::size_t i = 0; i < n; ++i) theta[i] += spec.outer_lr * mean[i];
        if (!all_finite(theta)) throw DivergenceError("pretrain_reptile: non-finite parameters at iteration " + std::to_string(it));
    }
    return theta;
}

// ---------------------------------------------------------------------------
// Direction collection

enum class DirectionMode { global, epoch };

inline std::string to_string(DirectionMode m) { return m == DirectionMode::global ? "global" : "epoch"; }

inline DirectionMode parse_direction_mode(const std::string& s) {
    if (s == "global") return DirectionMode::global;
    if (s == "epoch") return DirectionMode::epoch;
    throw ValidationError("unknown direction mode '" + s + "'");
}

struct CollectSpec {
    OptimizerKind optimizer = OptimizerKind::sgd;
    double eta = 0.01;
    std::size_t max_steps = 1000;
    std::size_t epoch_steps = 4;       // updates per epoch
    double plateau_tolerance = 1e-4;   // stop when loss improved by less than this fraction ...
    std::size_t plateau_window = 10;   // ... over this many steps
    std::size_t patience = 0;          // > 0: early stopping on the validation score, in epochs
};

/// Training-task fine-tuning problem; validation may be empty when the plateau rule is used.
struct TrainingTask {
    Objective train;
    Evaluator validation;
};

struct TrainingRun {
    ParamVector params;
    std::vector<ParamVector> epoch_params; // parameters at the end of each kept epoch
    std::size_t steps = 0;
    bool diverged = false;
};

/// Fine-tunes one training task until the plateau rule (or early stopping) fires.
inline TrainingRun finetune_training_task(std::span<const double> theta0, const TrainingTask& task, const CollectSpec& spec) {
    TrainingRun run;
    OptState state(ParamVector(theta0.begin(), theta0.end()));
    std::vector<double> grad(theta0.size());
    std::vector<double> history;
    const bool early_stopping = spec.patience > 0 && task.validation;
    const std::size_t epoch = std::max<std::size_t>(1, spec.epoch_steps);

    double best = early_stopping ? task.validation(theta0) : kInf;
    ParamVector best_params(theta0.begin(), theta0.end());
    std::size_t best_epochs = 0;
    std::size_t since_best = 0;

    for (std::size_t k = 1; k <= spec.max_steps; ++k) {
        const double l = task.train(state.params, grad);
        if (!std::isfinite(l) || !all_finite(grad)) {
            run.diverged = true;
            return run;
        }
        apply_update(state, IdentityPreconditioner{}, grad, spec.optimizer, spec.eta);
        if (!all_finite(state.params)) {
            run.diverged = true;
            return run;
        }
        history.push_back(l);
        run.steps = k;

        if (k % epoch == 0) {
            run.epoch_params.push_back(state.params);
            if (early_stopping) {
                const double v = task.validation(state.params);
                if (v < best) {
                    best = v;
                    best_params = state.params;
                    best_epochs = run.epoch_params.size();
                    since_best = 0;
                } else if (++since_best >= spec.patience) {
                    break;
                }
            }
        }
        if (!early_stopping && history.size() > spec.plateau_window) {
            const double before = history[history.size() - 1 - spec.plateau_window];
            if (before - l < spec.plateau_tolerance * std::abs(before)) break;
        }
    }
    if (early_stopping) {
        run.params = std::move(best_params);
        run.epoch_params.resize(best_epochs);
    } else {
        run.params = std::move(state.params);
    }
    return run;
}

struct CollectResult {
    DirectionMatrix directions;
    std::vector<std::size_t> steps;   // per task
    std::vector<std::size_t> skipped; // task indices dropped after divergence
};

/// One direction per task (global mode) or one per epoch per task (epoch mode).
inline CollectResult collect_directions(std::span<const double> theta0, std::size_t task_count,
                                        const std::function<TrainingTask(std::size_t)>& make_task,
                                        const CollectSpec& spec, DirectionMode mode) {
    if (task_count == 0) throw ValidationError("collect_directions: need at least one training task");
    const auto runs = parallel_map<TrainingRun>(task_count, [&](std::size_t t) {
        return finetune_training_task(theta0, make_task(t), spec);
    });
    CollectResult out{DirectionMatrix(theta0.size()), {}, {}};
    for (std::size_t t = 0; t < runs.size(); ++t) {
        const auto& run = runs[t];
        out.steps.push_back(run.steps);
        if (run.diverged) {
            std::cerr << "warning: training task " << t << " diverged during fine-tuning; direction skipped\n";
            out.skipped.push_back(t);
            continue;
        }
        if (mode == DirectionMode::global) {
            std::vector<double> d(theta0.size());
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = run.params[i] - theta0[i];
            out.directions.add(std::move(d));
        } else {
            std::span<const double> prev = theta0;
            for (const auto& p : run.epoch_params) {
                std::vector<double> d(theta0.size());
                for (std::size_t i = 0; i < d.size(); ++i) d[i] = p[i] - prev[i];
                out.directions.add(std::move(d));
                prev = p;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Hyperparameter selection and evaluation

/// A support-set loss and a query score for one (task, support size, seed).
struct FewShotInstance {
    Objective support_loss;
    Evaluator query_mse;
};

/// Must be deterministic: every call with the same arguments yields the same episode.
using InstanceFactory = std::function<FewShotInstance(std::size_t task, std::size_t support_size, std::uint64_t seed)>;

struct TuneGrid {
    std::vector<double> etas{1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2};
    std::vector<std::size_t> steps{10, 50, 100, 500, 1000};
};

struct TuneCell {
    double eta = 0.0;
    std::size_t steps = 0;
    double score = kInf;
    std::size_t diverged = 0;
};

struct TuneResult {
    FinetuneSpec best;
    double best_score = kInf;
    std::vector<TuneCell> cells;
};

enum class TuneStatistic { mean, median };

/// Picks the (eta, steps) cell with the lowest mean (or median) query score
/// over the validation tasks. Ties go to fewer steps, then smaller eta.
inline TuneResult tune_hparams(std::span<const double> theta0, const Preconditioner& p, std::size_t task_count,
                               std::size_t support_size, std::uint64_t seed, const InstanceFactory& factory,
                               const TuneGrid& grid, OptimizerKind optimizer = OptimizerKind::sgd,
                               std::size_t epoch_steps = 0, TuneStatistic statistic = TuneStatistic::mean) {
    if (grid.etas.empty() || grid.steps.empty()) throw ValidationError("tune_hparams: empty grid");
    if (task_count == 0) throw ValidationError("tune_hparams: no validation tasks");
    std::vector<std::size_t> checkpoints = grid.steps;
    std::sort(checkpoints.begin(), checkpoints.end());
    checkpoints.erase(std::unique(checkpoints.begin(), checkpoints.end()), checkpoints.end());
    std::vector<double> etas = grid.etas;
    std::sort(etas.begin(), etas.end());

    // scores[task][eta][checkpoint]
    const auto scores = parallel_map<std::vector<std::vector<double>>>(task_count, [&](std::size_t t) {
        std::vector<std::vector<double>> per_eta;
        for (double eta : etas) {
            // Fresh instance per run: support losses may carry mini-batch state.
            const FewShotInstance inst = factory(t, support_size, seed);
            per_eta.push_back(finetune_trace(theta0, p, inst.support_loss, optimizer, eta, checkpoints, inst.query_mse));
        }
        return per_eta;
    });

    TuneResult result;
    bool found = false;
    for (std::size_t c = 0; c < checkpoints.size(); ++c) {
        for (std::size_t e = 0; e < etas.size(); ++e) {
            TuneCell cell{etas[e], checkpoints[c], 0.0, 0};
            std::vector<double> values;
            for (std::size_t t = 0; t < task_count; ++t) {
                const double v = scores[t][e][c];
                if (!std::isfinite(v)) ++cell.diverged;
                values.push_back(v);
            }
            if (statistic == TuneStatistic::mean) {
                double sum = 0.0;
                for (double v : values) sum += v;
                cell.score = sum / static_cast<double>(values.size());
            } else {
                std::sort(values.begin(), values.end());
                const std::size_t m = values.size();
                cell.score = m % 2 ? values[m / 2] : 0.5 * (values[m / 2 - 1] + values[m / 2]);
            }
            if (std::isnan(cell.score)) cell.score = kInf;
            result.cells.push_back(cell);
            if (std::isfinite(cell.score) && cell.score < result.best_score) {
                result.best_score = cell.score;
                result.best = FinetuneSpec{optimizer, cell.eta, cell.steps, epoch_steps, false};
                found = true;
            }
        }
    }
    if (!found) throw DivergenceError("tune_hparams: every grid cell diverged");
    return result;
}

struct MethodSpec {
    std::string label;
    Preconditioner preconditioner;
    FinetuneSpec finetune;
};

struct EvalRecord {
    std::string run_id;
    std::string benchmark;
    std::string method;
    std::size_t task_id = 0;
    std::uint64_t seed = 0;
    std::size_t support_size = 0;
    std::size_t steps_used = 0;
    double mse = kInf;

    friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

/// Fine-tunes from theta0 for every (support size, method, seed, task) and
/// records the query MSE. All methods see the same episode for a given
/// (task, support size, seed). Records come out in that loop order.
inline std::vector<EvalRecord> evaluate_fewshot(std::span<const double> theta0, const std::vector<MethodSpec>& methods,
                                                std::size_t task_count, const std::vector<std::size_t>& support_sizes,
                                                const std::vector<std::uint64_t>& seeds, const InstanceFactory& factory,
                                                const std::string& benchmark, const std::string& run_id) {
    std::vector<EvalRecord> out;
    for (std::size_t support : support_sizes) {
        for (std::uint64_t seed : seeds) {
            const auto per_task = parallel_map<std::vector<EvalRecord>>(task_count, [&](std::size_t t) {
                std::vector<EvalRecord> recs;
                for (const auto& m : methods) {
                    const FewShotInstance inst = factory(t, support, seed);
                    const auto outcome = finetune(theta0, m.preconditioner, inst.support_loss, m.finetune);
                    EvalRecord r{run_id, benchmark, m.label, t, seed, support, outcome.steps_used, kInf};
                    if (!outcome.diverged) r.mse = inst.query_mse(outcome.params);
                    if (std::isnan(r.mse)) r.mse = kInf;
                    recs.push_back(std::move(r));
                }
                return recs;
            });
            for (std::size_t m = 0; m < methods.size(); ++m)
                for (std::size_t t = 0; t < task_count; ++t) out.push_back(per_task[t][m]);
        }
    }
    // Order: support size, seed, method, task.
    return out;
}

} // namespace subgd
