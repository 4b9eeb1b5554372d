#pragma once

// Nonlinear series RLC circuit benchmark.
//
//   dv_C/dt = i_L / C
//   di_L/dt = (v_in - v_C - R i_L) / L(i_L)
//   L(i_L)  = L0 [0.9 (atan(-5|i_L| - 5) / pi + 0.5) + 0.1]
//
// Task parameters are stored in (Ohm, uH, nF) and converted to SI once, at
// simulation entry. Ground truth comes from an adaptive Dormand-Prince 5(4)
// integrator with the input held constant over each sampling interval.
// The learned model is a forward-Euler neural state space
//   x[t+1] = x[t] + Ts f(x[t], u[t]),   y = x[0].

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "subgd/binary_io.hpp"
#include "subgd/nn.hpp"
#include "subgd/rng.hpp"

namespace subgd {

using RlcState = std::array<double, 2>; // (v_C [V], i_L [A])

struct RlcParams {
    double resistance = 3.0;    // Ohm
    double inductance_uh = 50.0; // L0, uH
    double capacitance_nf = 270.0; // nF

    friend bool operator==(const RlcParams&, const RlcParams&) = default;
};

inline constexpr RlcParams kNominalRlc{3.0, 50.0, 270.0};

inline constexpr double kRlcSampleTime = 1e-6;    // s
inline constexpr std::size_t kRlcSequenceLength = 2000;
inline constexpr std::size_t kRlcTrajectories = 3;
inline constexpr double kRlcNoiseStd = 0.1;       // V
inline constexpr double kRlcInputStd = 80.0;      // V
inline constexpr double kRlcInputBandwidth = 80e3; // Hz

/// Parameters in SI units, ready for simulation.
struct RlcSi {
    double resistance;  // Ohm
    double inductance;  // L0, H
    double capacitance; // F
    bool constant_inductance = false; // hold L at L(0) (linearized regime)
};

inline RlcSi to_si(const RlcParams& p) { return {p.resistance, p.inductance_uh * 1e-6, p.capacitance_nf * 1e-9}; }

inline RlcParams from_si(const RlcSi& s) { return {s.resistance, s.inductance * 1e6, s.capacitance * 1e9}; }

inline RlcParams sample_rlc_params(Rng& stream) {
    return {stream.uniform(1.0, 14.0), stream.uniform(20.0, 140.0), stream.uniform(100.0, 800.0)};
}

inline bool in_task_range(const RlcParams& p) {
    return p.resistance >= 1.0 && p.resistance < 14.0 && p.inductance_uh >= 20.0 && p.inductance_uh < 140.0 &&
           p.capacitance_nf >= 100.0 && p.capacitance_nf < 800.0;
}

/// Current-dependent inductance; returned in the units of l0.
inline double inductance(double i_l, double l0) {
    return l0 * (0.9 * (std::atan(-5.0 * std::abs(i_l) - 5.0) / std::numbers::pi + 0.5) + 0.1);
}

inline RlcState rlc_derivative(const RlcState& x, double v_in, const RlcSi& p) {
    const double l = p.constant_inductance ? inductance(0.0, p.inductance) : inductance(x[1], p.inductance);
    return {x[1] / p.capacitance, (-x[0] - p.resistance * x[1] + v_in) / l};
}

struct Rk45Tolerance {
    double absolute = 1e-9;
    double relative = 1e-7;
};

namespace detail {

/// Dormand-Prince 5(4) tableau.
struct DormandPrince {
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                            a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    // Difference between the 5th- and 4th-order weights.
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                            e6 = 22.0 / 525, e7 = -1.0 / 40;
};

inline RlcState add_scaled(const RlcState& x, double h, std::initializer_list<std::pair<double, const RlcState*>> terms) {
    RlcState out = x;
    for (const auto& [c, k] : terms) {
        out[0] += h * c * (*k)[0];
        out[1] += h * c * (*k)[1];
    }
    return out;
}

} // namespace detail

/// Integrates over one interval [0, dt] with the input held at v_in.
/// `step` carries the adaptive step size between calls.
inline RlcState rk45_flow(const RlcSi& p, const RlcState& x0, double v_in, double dt, double& step,
                          const Rk45Tolerance& tol = {}) {
    using D = detail::DormandPrince;
    const auto f = [&](const RlcState& x) { return rlc_derivative(x, v_in, p); };
    RlcState x = x0;
    double t = 0.0;
    double h = step > 0.0 ? std::min(step, dt) : dt / 4.0;
    const double h_min = dt * 1e-12;
    RlcState k1 = f(x);
    while (t < dt) {
        const bool last = t + h >= dt;
        if (last) h = dt - t;
        const RlcState k2 = f(detail::add_scaled(x, h, {{D::a21, &k1}}));
        const RlcState k3 = f(detail::add_scaled(x, h, {{D::a31, &k1}, {D::a32, &k2}}));
        const RlcState k4 = f(detail::add_scaled(x, h, {{D::a41, &k1}, {D::a42, &k2}, {D::a43, &k3}}));
        const RlcState k5 = f(detail::add_scaled(x, h, {{D::a51, &k1}, {D::a52, &k2}, {D::a53, &k3}, {D::a54, &k4}}));
        const RlcState k6 =
            f(detail::add_scaled(x, h, {{D::a61, &k1}, {D::a62, &k2}, {D::a63, &k3}, {D::a64, &k4}, {D::a65, &k5}}));
        const RlcState xn =
            detail::add_scaled(x, h, {{D::b1, &k1}, {D::b3, &k3}, {D::b4, &k4}, {D::b5, &k5}, {D::b6, &k6}});
        const RlcState k7 = f(xn);

        double err = 0.0;
        for (int i = 0; i < 2; ++i) {
            const double e = h * (D::e1 * k1[i] + D::e3 * k3[i] + D::e4 * k4[i] + D::e5 * k5[i] + D::e6 * k6[i] +
                                  D::e7 * k7[i]);
            const double sc = tol.absolute + tol.relative * std::max(std::abs(x[i]), std::abs(xn[i]));
            err += (e / sc) * (e / sc);
        }
        err = std::sqrt(err / 2.0);

        if (!std::isfinite(err)) throw StiffnessError("rk45_flow: non-finite error estimate");
        if (err <= 1.0) {
            t = last ? dt : t + h;
            x = xn;
            k1 = k7; // first-same-as-last
            const double grow = err == 0.0 ? 5.0 : std::min(5.0, 0.9 * std::pow(err, -0.2));
            if (!last) h *= grow;
            else step = std::max(step, h * grow);
            if (!last) step = h;
        } else {
            h *= std::max(0.2, 0.9 * std::pow(err, -0.2));
            if (h < h_min) throw StiffnessError("rk45_flow: step size underflow");
        }
    }
    return x;
}

/// States at the grid points t = 0 .. steps-1; state[0] = x0, input u[k]
/// held over [k Ts, (k+1) Ts).
inline std::vector<RlcState> simulate_rk45(const RlcSi& p, std::span<const double> u, const RlcState& x0, double ts,
                                           std::size_t steps, const Rk45Tolerance& tol = {}) {
    if (steps == 0) return {};
    if (u.size() + 1 < steps) throw DimensionError("simulate_rk45: input shorter than steps - 1");
    std::vector<RlcState> out;
    out.reserve(steps);
    out.push_back(x0);
    double h = 0.0;
    for (std::size_t k = 0; k + 1 < steps; ++k) out.push_back(rk45_flow(p, out.back(), u[k], ts, h, tol));
    return out;
}

/// Biquad coefficients of a 2nd-order Butterworth low-pass (bilinear transform, prewarped).
struct Biquad {
    double b0, b1, b2, a1, a2;
};

inline Biquad butterworth2_lowpass(double cutoff_hz, double sample_hz) {
    const double k = std::tan(std::numbers::pi * cutoff_hz / sample_hz);
    const double norm = 1.0 / (1.0 + std::numbers::sqrt2 * k + k * k);
    const double b0 = k * k * norm;
    return {b0, 2.0 * b0, b0, 2.0 * (k * k - 1.0) * norm, (1.0 - std::numbers::sqrt2 * k + k * k) * norm};
}

/// Gaussian white noise through a 2nd-order Butterworth low-pass at 80 kHz,
/// rescaled to an empirical standard deviation of exactly 80 V.
inline std::vector<double> gen_input_signal(Rng& stream, std::size_t steps, double ts = kRlcSampleTime,
                                            double bandwidth_hz = kRlcInputBandwidth, double target_std = kRlcInputStd) {
    if (steps == 0) throw ValidationError("gen_input_signal: steps must be >= 1");
    const auto bq = butterworth2_lowpass(bandwidth_hz, 1.0 / ts);
    const std::size_t warmup = 256; // discarded filter start-up transient
    std::vector<double> out;
    out.reserve(steps);
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (std::size_t i = 0; i < steps + warmup; ++i) {
        const double x = stream.gaussian();
        const double y = bq.b0 * x + bq.b1 * x1 + bq.b2 * x2 - bq.a1 * y1 - bq.a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        if (i >= warmup) out.push_back(y);
    }
    double mean = 0.0;
    for (double v : out) mean += v;
    mean /= static_cast<double>(steps);
    double var = 0.0;
    for (double v : out) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(steps));
    if (sd > 0.0)
        for (auto& v : out) v *= target_std / sd;
    return out;
}

struct RlcTrajectory {
    std::vector<double> u;       // input voltage, V
    std::vector<double> y;       // noisy observed v_C, V
    std::vector<RlcState> x_true; // clean states
};

struct RlcDataset {
    RlcParams params;
    std::uint64_t seed = 0;
    double ts = kRlcSampleTime;
    double noise_std = kRlcNoiseStd;
    std::vector<RlcTrajectory> trajectories;

    std::size_t length() const { return trajectories.empty() ? 0 : trajectories.front().u.size(); }
};

/// Three independent trajectories from x0 = 0, outputs corrupted by N(0, 0.1^2).
inline RlcDataset make_task_dataset(const RlcParams& p, std::uint64_t seed, std::size_t trajectories = kRlcTrajectories,
                                    std::size_t steps = kRlcSequenceLength) {
    RlcDataset d;
    d.params = p;
    d.seed = seed;
    const RlcSi si = to_si(p);
    Rng stream(seed);
    for (std::size_t k = 0; k < trajectories; ++k) {
        RlcTrajectory tr;
        Rng input_stream = stream.split();
        Rng noise_stream = stream.split();
        tr.u = gen_input_signal(input_stream, steps, d.ts);
        tr.x_true = simulate_rk45(si, tr.u, {0.0, 0.0}, d.ts, steps);
        tr.y.resize(steps);
        for (std::size_t t = 0; t < steps; ++t) tr.y[t] = tr.x_true[t][0] + d.noise_std * noise_stream.gaussian();
        d.trajectories.push_back(std::move(tr));
    }
    return d;
}

inline constexpr char kRlcDatasetMagic[9] = "SUBGDRLC";

/// Header JSON {format, version, R_ohm, L0_uH, C_nF, seed, Ts, length, trajectories, noise_std};
/// then per trajectory: u (length), y (length), x_true (2*length, interleaved v_C, i_L).
inline void save_rlc_dataset(const fs::path& path, const RlcDataset& d) {
    json header = {{"format", "subgd-rlc-dataset"},
                   {"version", 1},
                   {"R_ohm", d.params.resistance},
                   {"L0_uH", d.params.inductance_uh},
                   {"C_nF", d.params.capacitance_nf},
                   {"seed", d.seed},
                   {"Ts", d.ts},
                   {"noise_std", d.noise_std},
                   {"length", d.length()},
                   {"trajectories", d.trajectories.size()}};
    std::vector<std::vector<double>> flat_states;
    std::vector<std::span<const double>> blocks;
    flat_states.reserve(d.trajectories.size());
    for (const auto& tr : d.trajectories) {
        std::vector<double> xs;
        xs.reserve(2 * tr.x_true.size());
        for (const auto& s : tr.x_true) {
            xs.push_back(s[0]);
            xs.push_back(s[1]);
        }
        flat_states.push_back(std::move(xs));
    }
    for (std::size_t k = 0; k < d.trajectories.size(); ++k) {
        blocks.emplace_back(d.trajectories[k].u);
        blocks.emplace_back(d.trajectories[k].y);
        blocks.emplace_back(flat_states[k]);
    }
    write_file_atomic(path, encode_framed(kRlcDatasetMagic, header, blocks));
}

inline RlcDataset load_rlc_dataset(const fs::path& path) {
    ByteReader reader(read_file(path), "RLC dataset '" + path.string() + "'");
    const json header = decode_framed_header(reader, kRlcDatasetMagic);
    try {
        RlcDataset d;
        d.params = {header.at("R_ohm").get<double>(), header.at("L0_uH").get<double>(), header.at("C_nF").get<double>()};
        d.seed = header.at("seed").get<std::uint64_t>();
        d.ts = header.at("Ts").get<double>();
        d.noise_std = header.at("noise_std").get<double>();
        const auto len = header.at("length").get<std::size_t>();
        const auto count = header.at("trajectories").get<std::size_t>();
        for (std::size_t k = 0; k < count; ++k) {
            RlcTrajectory tr;
            tr.u = reader.f64(len);
            tr.y = reader.f64(len);
            const auto xs = reader.f64(2 * len);
            tr.x_true.resize(len);
            for (std::size_t t = 0; t < len; ++t) tr.x_true[t] = {xs[2 * t], xs[2 * t + 1]};
            d.trajectories.push_back(std::move(tr));
        }
        if (reader.remaining() != 0) reader.fail("trailing bytes");
        return d;
    } catch (const json::exception& e) {
        reader.fail(std::string("bad header: ") + e.what());
    }
}

/// CSV with columns trajectory,t,u,y,v_c,i_l.
inline void export_rlc_csv(const fs::path& path, const RlcDataset& d) {
    std::string out = "trajectory,t,u,y,v_c,i_l\n";
    char line[256];
    for (std::size_t k = 0; k < d.trajectories.size(); ++k) {
        const auto& tr = d.trajectories[k];
        for (std::size_t t = 0; t < tr.u.size(); ++t) {
            std::snprintf(line, sizeof line, "%zu,%zu,%.17g,%.17g,%.17g,%.17g\n", k, t, tr.u[t], tr.y[t], tr.x_true[t][0],
                          tr.x_true[t][1]);
            out += line;
        }
    }
    write_file_atomic(path, out);
}

// ---------------------------------------------------------------------------
// Neural state-space model

/// f(x, u) = output_scale * net(input_scale * (x, u)).
/// The default scales make the network see O(1) inputs and predict per-step
/// state increments in units of (100 V, 10 A).
struct NeuralSsModel {
    MlpConfig config = rlc_mlp_config();
    std::array<double, 3> input_scale{1.0 / 100.0, 1.0 / 10.0, 1.0 / 100.0};
    std::array<double, 2> output_scale{100.0 / kRlcSampleTime, 10.0 / kRlcSampleTime};

    static NeuralSsModel unscaled(MlpConfig config = rlc_mlp_config()) {
        return {std::move(config), {1.0, 1.0, 1.0}, {1.0, 1.0}};
    }
};

/// Field evaluation for one network, reusing the layer views and tape.
class NeuralField {
public:
    NeuralField(const NeuralSsModel& model, std::span<const double> params)
        : model_(model), layers_(layer_views(model.config, params)), tape_(model.config) {
        if (model.config.input_dim() != 3 || model.config.output_dim() != 2)
            throw DimensionError("NeuralSsModel: network must map 3 inputs to 2 outputs");
    }

    RlcState operator()(const RlcState& x, double u) { return eval(x, u, tape_); }

    RlcState eval(const RlcState& x, double u, MlpTape& tape) const {
        const double in[3] = {x[0] * model_.input_scale[0], x[1] * model_.input_scale[1], u * model_.input_scale[2]};
        forward_sample(model_.config, layers_, in, tape);
        const auto out = tape.output();
        return {out[0] * model_.output_scale[0], out[1] * model_.output_scale[1]};
    }

    const std::vector<ConstLayerView>& layers() const { return layers_; }

private:
    const NeuralSsModel& model_;
    std::vector<ConstLayerView> layers_;
    MlpTape tape_;
};

struct RolloutResult {
    std::vector<RlcState> states;
    bool diverged = false;
};

/// States beyond this magnitude count as a diverged rollout.
inline constexpr double kRolloutBound = 1e8;

/// Forward Euler over any derivative field: x[t+1] = x[t] + ts f(x[t], u[t]).
/// Returns u.size() states (state[0] = x0), truncated at the first non-finite
/// or out-of-bound state.
template <class Field>
RolloutResult euler_rollout_field(Field&& field, const RlcState& x0, std::span<const double> u, double ts) {
    RolloutResult r;
    r.states.reserve(u.size());
    RlcState x = x0;
    for (std::size_t t = 0; t < u.size(); ++t) {
        if (!(std::isfinite(x[0]) && std::isfinite(x[1])) || std::abs(x[0]) > kRolloutBound ||
            std::abs(x[1]) > kRolloutBound) {
            r.diverged = true;
            break;
        }
        r.states.push_back(x);
        if (t + 1 == u.size()) break;
        const RlcState dx = field(x, u[t]);
        x = {x[0] + ts * dx[0], x[1] + ts * dx[1]};
    }
    return r;
}

inline RolloutResult euler_rollout(const NeuralSsModel& model, std::span<const double> params, const RlcState& x0,
                                   std::span<const double> u, double ts = kRlcSampleTime) {
    NeuralField field(model, params);
    return euler_rollout_field(field, x0, u, ts);
}

/// Euler-consistent field of the true circuit: (Phi(x, u) - x) / ts with Phi the
/// exact one-interval flow. Its Euler rollout reproduces the simulator.
struct OracleField {
    RlcSi params;
    double ts = kRlcSampleTime;
    double step = 0.0;

    RlcState operator()(const RlcState& x, double u) {
        const RlcState next = rk45_flow(params, x, u, ts, step);
        return {(next[0] - x[0]) / ts, (next[1] - x[1]) / ts};
    }
};

/// One scored window of a sequence. The rollout starts at time `origin` with
/// state `x_init` and the squared output error is accumulated for
/// t in [first, last].
struct SequenceWindow {
    std::span<const double> u;
    std::span<const double> y;
    std::size_t origin = 0;
    RlcState x_init{0.0, 0.0};
    std::size_t first = 0;
    std::size_t last = 0;

    std::size_t scored() const { return last - first + 1; }
};

/// Truncated-simulation window: initial state (y[start-1], 0) one step before
/// `start`, scored over [start, start + length - 1].
inline SequenceWindow truncated_window(const RlcTrajectory& tr, std::size_t start, std::size_t length) {
    if (start < 1) throw ValidationError("truncated_window: start must be >= 1");
    if (length == 0 || start + length > tr.y.size())
        throw ValidationError("truncated_window: window exceeds the sequence");
    return {tr.u, tr.y, start - 1, {tr.y[start - 1], 0.0}, start, start + length - 1};
}

/// Prefix window with the true initial state, scored over [0, length - 1].
inline SequenceWindow prefix_window(const RlcTrajectory& tr, std::size_t length, RlcState x0 = {0.0, 0.0}) {
    if (length == 0 || length > tr.y.size()) throw ValidationError("prefix_window: length out of range");
    return {tr.u, tr.y, 0, x0, 0, length - 1};
}

/// Mean squared output error over all windows, with the gradient through the
/// unrolled Euler recursion (backpropagation through time). Returns +inf, and
/// leaves grad zero, when any rollout diverges. grad may be empty.
inline double sequence_fit_loss_grad(const NeuralSsModel& model, std::span<const double> params,
                                     std::span<const SequenceWindow> windows, std::span<double> grad,
                                     double ts = kRlcSampleTime) {
    if (windows.empty()) throw ValidationError("sequence_fit_loss_grad: no windows");
    const bool want_grad = !grad.empty();
    NeuralField field(model, params);
    std::vector<LayerView> grad_layers;
    if (want_grad) {
        if (grad.size() != params.size()) throw DimensionError("sequence_fit_loss_grad: gradient length");
        std::fill(grad.begin(), grad.end(), 0.0);
        grad_layers = layer_views(model.config, grad);
    }

    std::size_t total = 0;
    for (const auto& w : windows) total += w.scored();
    const double scale = 1.0 / static_cast<double>(total);

    std::vector<MlpTape> tapes;
    std::vector<RlcState> states;
    MlpBackwardScratch scratch(model.config);
    double loss = 0.0;

    for (const auto& w : windows) {
        if (w.last >= w.y.size() || w.last >= w.u.size() + 1 || w.first < w.origin)
            throw ValidationError("sequence_fit_loss_grad: window out of range");
        const std::size_t n_steps = w.last - w.origin; // Euler steps from origin to last
        states.assign(n_steps + 1, RlcState{});
        if (want_grad && tapes.size() < n_steps) tapes.resize(n_steps, MlpTape(model.config));
        MlpTape scratch_tape(model.config);

        states[0] = w.x_init;
        for (std::size_t k = 0; k < n_steps; ++k) {
            const RlcState& x = states[k];
            const RlcState dx = field.eval(x, w.u[w.origin + k], want_grad ? tapes[k] : scratch_tape);
            states[k + 1] = {x[0] + ts * dx[0], x[1] + ts * dx[1]};
            if (!std::isfinite(states[k + 1][0]) || !std::isfinite(states[k + 1][1]) ||
                std::abs(states[k + 1][0]) > kRolloutBound || std::abs(states[k + 1][1]) > kRolloutBound) {
                if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);
                return std::numeric_limits<double>::infinity();
            }
        }
        for (std::size_t t = w.first; t <= w.last; ++t) {
            const double e = states[t - w.origin][0] - w.y[t];
            loss += e * e;
        }
        if (!want_grad) continue;

        // Adjoint pass: lambda = dLoss/dx[k].
        RlcState lambda{0.0, 0.0};
        double dout[2];
        double din[3];
        for (std::size_t k = n_steps + 1; k-- > 0;) {
            const std::size_t t = w.origin + k;
            if (t >= w.first) lambda[0] += 2.0 * (states[k][0] - w.y[t]) * scale;
            if (k == 0) break;
            // x[k] = x[k-1] + ts * os * net(is * (x[k-1], u))
            dout[0] = ts * model.output_scale[0] * lambda[0];
            dout[1] = ts * model.output_scale[1] * lambda[1];
            backward_sample(model.config, field.layers(), tapes[k - 1], dout, grad_layers, din, scratch);
            lambda[0] += model.input_scale[0] * din[0];
            lambda[1] += model.input_scale[1] * din[1];
        }
    }
    return loss * scale;
}

/// Full-rollout MSE of the model on one trajectory from x0 (+inf when the rollout diverges).
inline double rollout_mse(const NeuralSsModel& model, std::span<const double> params, const RlcTrajectory& tr,
                          RlcState x0 = {0.0, 0.0}) {
    const SequenceWindow w = prefix_window(tr, tr.y.size(), x0);
    return sequence_fit_loss_grad(model, params, std::span(&w, 1), {});
}

/// Samples `count` truncated windows of `length` steps at random positions.
inline std::vector<SequenceWindow> sample_truncated_windows(const RlcDataset& d, std::size_t count, std::size_t length,
                                                            Rng& stream, std::size_t trajectory_limit = 0) {
    const std::size_t trajs = trajectory_limit == 0 ? d.trajectories.size()
                                                    : std::min(trajectory_limit, d.trajectories.size());
    if (trajs == 0) throw ValidationError("sample_truncated_windows: dataset has no trajectories");
    if (d.length() < length + 1)
        throw ValidationError("sample_truncated_windows: sequence of length " + std::to_string(d.length()) +
                              " is shorter than " + std::to_string(length + 1));
    std::vector<SequenceWindow> out;
    out.reserve(count);
    for (std::size_t b = 0; b < count; ++b) {
        const auto k = static_cast<std::size_t>(stream.below(trajs));
        const auto start = 1 + static_cast<std::size_t>(stream.below(d.length() - length));
        out.push_back(truncated_window(d.trajectories[k], start, length));
    }
    return out;
}

/// Fit loss on a mini-batch of `batch` truncated subsequences of `length` steps.
inline double truncated_fit_loss_grad(const NeuralSsModel& model, std::span<const double> params, const RlcDataset& d,
                                      std::size_t batch, std::size_t length, Rng& stream, std::span<double> grad) {
    const auto windows = sample_truncated_windows(d, batch, length, stream);
    return sequence_fit_loss_grad(model, params, windows, grad, d.ts);
}

} // namespace subgd
