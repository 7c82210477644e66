#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pko/common.hpp"
#include "pko/rng.hpp"

namespace pko {

// ============================================================================
// Plants
// ============================================================================

using Dynamics = std::function<Vec(const Vec& x, const Vec& u, double t)>;
using StateJacobian = std::function<Mat(const Vec& x, const Vec& u)>;

// Coordinate-measured plant: y = x[measured] + v.
struct Plant {
    std::string name;
    int state_dim = 0;
    int input_dim = 0;
    Dynamics dynamics;
    StateJacobian jacobian;  // df/dx
    std::vector<int> measured;
    std::map<std::string, double> parameters;

    int output_dim() const noexcept { return static_cast<int>(measured.size()); }

    Vec output(const Vec& x) const {
        Vec y(output_dim());
        for (int k = 0; k < output_dim(); ++k) y[k] = x[measured[static_cast<std::size_t>(k)]];
        return y;
    }

    Mat output_jacobian() const {
        Mat h = Mat::Zero(output_dim(), state_dim);
        for (int k = 0; k < output_dim(); ++k) h(k, measured[static_cast<std::size_t>(k)]) = 1.0;
        return h;
    }
};

struct VdpParams {
    double mu = 1.0;
};

// Single-link arm. Defaults are the nominal benchmark values.
struct ArmParams {
    double J = 0.5;
    double m = 1.0;
    double l = 0.5;
    double g = 9.81;
    double b_f = 0.2;
    double f_c = 0.5;
    double f_v = 0.3;
    double sgn_smoothing = 0.01;
};

inline void validate(const VdpParams& p) {
    if (!(p.mu > 0.0)) throw InvalidInput("VdP mu must be > 0");
}

inline void validate(const ArmParams& p) {
    if (!(p.J > 0 && p.m > 0 && p.l > 0 && p.g > 0)) throw InvalidInput("arm J, m, l, g must be > 0");
    if (p.f_c < 0 || p.f_v < 0 || p.b_f < 0) throw InvalidInput("arm friction coefficients must be >= 0");
    if (!(p.sgn_smoothing > 0)) throw InvalidInput("arm sgn smoothing must be > 0");
}

inline Vec vdp_dynamics(const Vec& x, double u, const VdpParams& p) {
    Vec dx(2);
    dx << x[1], p.mu * (1.0 - x[0] * x[0]) * x[1] - x[0] + u;
    return dx;
}

inline Mat vdp_jacobian(const Vec& x, const VdpParams& p) {
    Mat j(2, 2);
    j << 0.0, 1.0, -2.0 * p.mu * x[0] * x[1] - 1.0, p.mu * (1.0 - x[0] * x[0]);
    return j;
}

// Friction F(w) = f_c tanh(w / eps_s) + f_v w.
inline double arm_friction(double w, const ArmParams& p) {
    return p.f_c * std::tanh(w / p.sgn_smoothing) + p.f_v * w;
}

inline Vec arm_dynamics(const Vec& x, double tau, const ArmParams& p) {
    const double acc =
        (-p.m * p.g * p.l * std::sin(x[0]) - p.b_f * x[1] - arm_friction(x[1], p) + tau) / p.J;
    Vec dx(2);
    dx << x[1], acc;
    return dx;
}

inline Mat arm_jacobian(const Vec& x, const ArmParams& p) {
    const double t = std::tanh(x[1] / p.sgn_smoothing);
    const double dfric = p.f_c * (1.0 - t * t) / p.sgn_smoothing + p.f_v;
    Mat j(2, 2);
    j << 0.0, 1.0, -p.m * p.g * p.l * std::cos(x[0]) / p.J, -(p.b_f + dfric) / p.J;
    return j;
}

inline Plant make_vdp_plant(const VdpParams& p) {
    validate(p);
    Plant plant;
    plant.name = "vdp";
    plant.state_dim = 2;
    plant.input_dim = 1;
    plant.dynamics = [p](const Vec& x, const Vec& u, double) { return vdp_dynamics(x, u[0], p); };
    plant.jacobian = [p](const Vec& x, const Vec&) { return vdp_jacobian(x, p); };
    plant.measured = {0};
    plant.parameters = {{"mu", p.mu}};
    return plant;
}

inline Plant make_arm_plant(const ArmParams& p) {
    validate(p);
    Plant plant;
    plant.name = "arm";
    plant.state_dim = 2;
    plant.input_dim = 1;
    plant.dynamics = [p](const Vec& x, const Vec& u, double) { return arm_dynamics(x, u[0], p); };
    plant.jacobian = [p](const Vec& x, const Vec&) { return arm_jacobian(x, p); };
    plant.measured = {0};
    plant.parameters = {{"J", p.J},     {"m", p.m},     {"l", p.l},     {"g", p.g},
                        {"b_f", p.b_f}, {"f_c", p.f_c}, {"f_v", p.f_v}, {"sgn_smoothing", p.sgn_smoothing}};
    return plant;
}

// x' = M x (+ B u), measured coordinates given.
inline Plant make_linear_plant(const Mat& m, const Mat& b, std::vector<int> measured) {
    if (m.rows() != m.cols()) throw InvalidInput("linear plant matrix must be square");
    Plant plant;
    plant.name = "linear";
    plant.state_dim = static_cast<int>(m.rows());
    plant.input_dim = static_cast<int>(b.cols());
    plant.dynamics = [m, b](const Vec& x, const Vec& u, double) -> Vec {
        Vec dx = m * x;
        if (b.cols() > 0) dx += b * u;
        return dx;
    };
    plant.jacobian = [m](const Vec&, const Vec&) { return m; };
    plant.measured = std::move(measured);
    return plant;
}

// x1' = a x1, x2' = b (x2 - x1^2). Exactly linear in z = (x1, x2, x1^2).
inline Plant make_exact_lift_plant(double a, double b) {
    Plant plant;
    plant.name = "exact_lift";
    plant.state_dim = 2;
    plant.input_dim = 0;
    plant.dynamics = [a, b](const Vec& x, const Vec&, double) -> Vec {
        Vec dx(2);
        dx << a * x[0], b * (x[1] - x[0] * x[0]);
        return dx;
    };
    plant.jacobian = [a, b](const Vec& x, const Vec&) -> Mat {
        Mat j(2, 2);
        j << a, 0.0, -2.0 * b * x[0], b;
        return j;
    };
    plant.measured = {0};
    plant.parameters = {{"a", a}, {"b", b}};
    return plant;
}

// Lifted matrix of the exact-lift plant on (x1, x2, x1^2).
inline Mat exact_lift_matrix(double a, double b) {
    Mat m(3, 3);
    m << a, 0.0, 0.0, 0.0, b, -b, 0.0, 0.0, 2.0 * a;
    return m;
}

// ============================================================================
// Integration
// ============================================================================

template <typename F>
Vec rk4_step(const F& f, const Vec& x, const Vec& u, double t, double dt) {
    if (!(dt > 0.0)) throw InvalidInput("rk4 step needs dt > 0");
    const Vec k1 = f(x, u, t);
    const Vec k2 = f(x + 0.5 * dt * k1, u, t + 0.5 * dt);
    const Vec k3 = f(x + 0.5 * dt * k2, u, t + 0.5 * dt);
    const Vec k4 = f(x + dt * k3, u, t + dt);
    Vec next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!next.allFinite()) throw IntegrationBlowup(t + dt);
    return next;
}

struct NoiseSpec {
    double variance = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;
};

// Columns are samples; inputs(:, k) is held over [t_k, t_{k+1}).
struct Trace {
    std::vector<double> times;
    Mat states;
    Mat inputs;
    Mat outputs_clean;
    Mat outputs_noisy;

    Index length() const noexcept { return static_cast<Index>(times.size()); }
    double dt() const { return times.size() > 1 ? times[1] - times[0] : 0.0; }
};

inline Index step_count(double duration, double dt) {
    if (!(dt > 0.0) || !(duration > 0.0)) throw InvalidInput("duration and dt must be > 0");
    const double steps = duration / dt;
    const double rounded = std::round(steps);
    if (std::abs(steps - rounded) > 1e-9 * std::max(1.0, steps))
        throw InvalidInput("duration/dt must be a whole number of steps");
    return static_cast<Index>(rounded);
}

// Measurement noise sample for (seed, stream, step, channel).
inline double noise_sample(const NoiseSpec& noise, Index step, Index channel) {
    if (noise.variance <= 0.0) return 0.0;
    return std::sqrt(noise.variance) * rng::normal(noise.seed, noise.stream_id, static_cast<std::uint64_t>(step),
                                                   static_cast<std::uint64_t>(channel));
}

// `inputs` has m rows and at least N+1 columns (one per grid point).
inline Trace simulate_plant(const Plant& plant, const Vec& x0, const Mat& inputs, double duration, double dt,
                            const NoiseSpec& noise) {
    if (x0.size() != plant.state_dim) throw InvalidInput("x0 length does not match plant state_dim");
    if (noise.variance < 0.0) throw InvalidInput("noise variance must be >= 0");
    const Index n_steps = step_count(duration, dt);
    const Index len = n_steps + 1;
    if (inputs.rows() != plant.input_dim || inputs.cols() < len)
        throw InvalidInput("input signal shape does not match plant/grid");

    Trace tr;
    tr.times.resize(static_cast<std::size_t>(len));
    tr.states.resize(plant.state_dim, len);
    tr.inputs = inputs.leftCols(len);
    tr.outputs_clean.resize(plant.output_dim(), len);
    tr.outputs_noisy.resize(plant.output_dim(), len);

    Vec x = x0;
    for (Index k = 0; k < len; ++k) {
        const double t = static_cast<double>(k) * dt;
        tr.times[static_cast<std::size_t>(k)] = t;
        tr.states.col(k) = x;
        const Vec y = plant.output(x);
        tr.outputs_clean.col(k) = y;
        for (Index j = 0; j < y.size(); ++j) tr.outputs_noisy(j, k) = y[j] + noise_sample(noise, k, j);
        if (k + 1 < len) x = rk4_step(plant.dynamics, x, tr.inputs.col(k), t, dt);
    }
    return tr;
}

inline Mat zero_input(int m, double duration, double dt) {
    return Mat::Zero(m, step_count(duration, dt) + 1);
}

// Piecewise-constant torque; each level ~ U[-amplitude, amplitude] held for hold_steps samples.
inline Mat prbs_torque(std::uint64_t seed, double duration, double dt, double amplitude, int hold_steps) {
    if (amplitude < 0.0) throw InvalidInput("prbs amplitude must be >= 0");
    if (hold_steps < 1) throw InvalidInput("prbs hold_steps must be >= 1");
    const Index len = step_count(duration, dt) + 1;
    Mat u(1, len);
    constexpr std::uint64_t kPrbsStream = 0x5052425355ull;
    for (Index k = 0; k < len; ++k) {
        const auto level = static_cast<std::uint64_t>(k / hold_steps);
        u(0, k) = amplitude == 0.0 ? 0.0 : rng::uniform(-amplitude, amplitude, seed, kPrbsStream, level);
    }
    return u;
}

// ============================================================================
// CSV export
// ============================================================================

inline void write_trace_csv(const Trace& tr, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError(path, "cannot open for writing");
    const Index n = tr.states.rows(), m = tr.inputs.rows(), p = tr.outputs_clean.rows();
    out << "t";
    for (Index i = 0; i < n; ++i) out << ",x" << i + 1;
    for (Index i = 0; i < m; ++i) out << ",u" << i + 1;
    for (Index i = 0; i < p; ++i) out << ",y" << i + 1;
    for (Index i = 0; i < p; ++i) out << ",y_noisy" << i + 1;
    out << '\n';
    out.precision(17);
    for (Index k = 0; k < tr.length(); ++k) {
        out << tr.times[static_cast<std::size_t>(k)];
        for (Index i = 0; i < n; ++i) out << ',' << tr.states(i, k);
        for (Index i = 0; i < m; ++i) out << ',' << tr.inputs(i, k);
        for (Index i = 0; i < p; ++i) out << ',' << tr.outputs_clean(i, k);
        for (Index i = 0; i < p; ++i) out << ',' << tr.outputs_noisy(i, k);
        out << '\n';
    }
    if (!out) throw IoError(path, "write failed");
}

}  // namespace pko
