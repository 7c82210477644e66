#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pko/common.hpp"
#include "pko/lifting.hpp"
#include "pko/rng.hpp"
#include "pko/systems.hpp"

namespace pko {

struct TrajectoryDataset {
    std::vector<Trace> traces;
    ObservableDictionary dictionary;
};

struct ResidualCharacterization {
    double rho = 0.0;
    double eta_bar = 0.0;
    double epsilon = 0.0;
    std::vector<std::pair<double, double>> residual_samples;  // (|z|, |Delta|)
};

struct KoopmanModel {
    Mat A;
    Mat B;
    Mat C_o;
    ObservableDictionary dictionary;
    std::vector<int> measured;
    double ridge_lambda = 0.0;
    double dt = 0.0;
    ResidualCharacterization residual;
    // Largest |x_2| seen in training; feeds the arm friction sector bound.
    double omega_max = 0.0;

    int r() const noexcept { return static_cast<int>(A.rows()); }
    int m() const noexcept { return static_cast<int>(B.cols()); }
    int p() const noexcept { return static_cast<int>(C_o.rows()); }
    int n() const noexcept { return dictionary.state_dim(); }
};

struct EdmdOptions {
    // nullopt selects 1e-6 * trace(Gram) / r.
    std::optional<double> ridge_lambda;
    std::vector<int> measured{0};
};

namespace detail {

struct Regression {
    Mat Z;     // r x S lifted states
    Mat U;     // m x S inputs
    Mat Zdot;  // r x S centered-difference derivatives
};

// Interior samples of every trace; u is the mean of the two held inputs
// the centered difference straddles.
inline Regression assemble_regression(const TrajectoryDataset& data) {
    const int r = data.dictionary.total_dim();
    Index total = 0;
    Index m = -1;
    double dt = -1.0;
    for (const auto& tr : data.traces) {
        if (tr.states.rows() != data.dictionary.state_dim())
            throw InvalidInput("trace state dimension does not match dictionary");
        if (m < 0) m = tr.inputs.rows();
        if (tr.inputs.rows() != m) throw InvalidInput("traces disagree on input dimension");
        if (tr.length() < 3) continue;
        if (dt < 0) dt = tr.dt();
        if (std::abs(tr.dt() - dt) > 1e-12 * dt) throw InvalidInput("traces must share dt");
        total += tr.length() - 2;
    }
    if (total == 0) throw InvalidInput("dataset has no interior samples");
    Regression reg;
    reg.Z.resize(r, total);
    reg.U.resize(std::max<Index>(m, 0), total);
    reg.Zdot.resize(r, total);
    Index col = 0;
    for (const auto& tr : data.traces) {
        if (tr.length() < 3) continue;
        Mat lifted(r, tr.length());
        for (Index k = 0; k < tr.length(); ++k) lifted.col(k) = lift(data.dictionary, tr.states.col(k));
        for (Index k = 1; k + 1 < tr.length(); ++k, ++col) {
            reg.Z.col(col) = lifted.col(k);
            reg.Zdot.col(col) = (lifted.col(k + 1) - lifted.col(k - 1)) / (2.0 * dt);
            if (m > 0) reg.U.col(col) = 0.5 * (tr.inputs.col(k - 1) + tr.inputs.col(k));
        }
    }
    return reg;
}

}  // namespace detail

inline double default_ridge(const Mat& gram, int r) { return 1e-6 * gram.trace() / r; }

// Continuous-time EDMD: min sum |zdot - A z - B u|^2 + lambda (|A|_F^2 + |B|_F^2).
inline KoopmanModel fit_edmd(const TrajectoryDataset& data, const EdmdOptions& opts = {}) {
    if (data.traces.empty()) throw InvalidInput("empty dataset");
    const auto reg = detail::assemble_regression(data);
    const int r = data.dictionary.total_dim();
    const auto m = static_cast<int>(reg.U.rows());
    if (reg.Z.cols() < 10 * (r + m))
        throw InvalidInput("need at least 10*(r+m) samples, have " + std::to_string(reg.Z.cols()));

    Mat W(r + m, reg.Z.cols());
    W.topRows(r) = reg.Z;
    if (m > 0) W.bottomRows(m) = reg.U;
    Mat gram = W * W.transpose();
    const double lambda = opts.ridge_lambda.value_or(default_ridge(gram, r));
    if (lambda < 0.0) throw InvalidInput("ridge_lambda must be >= 0");

    const Mat rhs = W * reg.Zdot.transpose();  // (r+m) x r
    Mat theta;
    if (lambda == 0.0) {
        Eigen::SelfAdjointEigenSolver<Mat> es(gram, Eigen::EigenvaluesOnly);
        const double hi = es.eigenvalues().maxCoeff();
        if (!(hi > 0.0) || es.eigenvalues().minCoeff() <= 1e-12 * hi)
            throw SingularSystem("rank-deficient EDMD regression; use ridge_lambda > 0");
        theta = gram.ldlt().solve(rhs);
    } else {
        gram.diagonal().array() += lambda;
        Eigen::LLT<Mat> llt(gram);
        if (llt.info() != Eigen::Success) throw SingularSystem("EDMD normal equations not positive definite");
        theta = llt.solve(rhs);
    }
    KoopmanModel model;
    const Mat ab = theta.transpose();  // r x (r+m)
    model.A = ab.leftCols(r);
    model.B = ab.rightCols(m);
    model.dictionary = data.dictionary;
    model.measured = opts.measured;
    model.C_o = output_matrix(data.dictionary, opts.measured);
    model.ridge_lambda = lambda;
    model.dt = data.traces.front().dt();
    const int n = data.dictionary.state_dim();
    if (n >= 2)
        for (const auto& tr : data.traces) model.omega_max = std::max(model.omega_max, tr.states.row(1).cwiseAbs().maxCoeff());
    return model;
}

// Exact lifting residual DPhi(x) f(x,u) - A Phi(x) - B u.
inline Vec true_residual(const KoopmanModel& model, const Plant& plant, const Vec& x, const Vec& u) {
    if (plant.state_dim != model.n()) throw InvalidInput("plant and model state_dim differ");
    Vec res = lift_jacobian(model.dictionary, x) * plant.dynamics(x, u, 0.0) - model.A * lift(model.dictionary, x);
    if (model.m() > 0) res -= model.B * u;
    return res;
}

struct ResidualBoundOptions {
    int grid_points = 100;
    double weight = 1.0;  // trade-off weight on rho * median|z|
};

// Chooses (rho, eta_bar) on samples (|z_k|, |Delta_k|).
inline ResidualCharacterization fit_residual_envelope(std::vector<std::pair<double, double>> samples,
                                                      const ResidualBoundOptions& opts = {}) {
    if (samples.empty()) throw InvalidInput("empty validation set");
    if (opts.grid_points < 2) throw InvalidInput("residual grid needs >= 2 points");
    ResidualCharacterization rc;
    std::vector<double> norms;
    norms.reserve(samples.size());
    double rho_max = 0.0;
    for (const auto& [zn, dn] : samples) {
        norms.push_back(zn);
        rc.epsilon = std::max(rc.epsilon, dn);
        if (zn > 1e-12) rho_max = std::max(rho_max, dn / zn);
    }
    std::nth_element(norms.begin(), norms.begin() + static_cast<std::ptrdiff_t>(norms.size() / 2), norms.end());
    const double median_z = norms[norms.size() / 2];
    auto eta_of = [&](double rho) {
        double eta = 0.0;
        for (const auto& [zn, dn] : samples) eta = std::max(eta, dn - rho * zn);
        return std::max(eta, 0.0);
    };
    double best_cost = std::numeric_limits<double>::infinity();
    for (int i = 0; i < opts.grid_points; ++i) {
        const double rho = rho_max * static_cast<double>(i) / (opts.grid_points - 1);
        const double eta = eta_of(rho);
        const double cost = eta + opts.weight * rho * median_z;
        if (cost < best_cost) {
            best_cost = cost;
            rc.rho = rho;
            rc.eta_bar = eta;
        }
    }
    for (const auto& [zn, dn] : samples)
        if (dn > rc.rho * zn + rc.eta_bar + 1e-12 * (1.0 + dn))
            throw NumericalFailure("residual envelope does not cover a validation sample");
    rc.residual_samples = std::move(samples);
    return rc;
}

inline ResidualCharacterization estimate_residual_bound(const KoopmanModel& model, const Plant& plant,
                                                        const std::vector<Trace>& validation,
                                                        const ResidualBoundOptions& opts = {}) {
    std::vector<std::pair<double, double>> samples;
    for (const auto& tr : validation)
        for (Index k = 0; k < tr.length(); ++k) {
            const Vec x = tr.states.col(k);
            const Vec u = tr.inputs.col(k);
            samples.emplace_back(lift(model.dictionary, x).norm(), true_residual(model, plant, x, u).norm());
        }
    return fit_residual_envelope(std::move(samples), opts);
}

// Seeded 80/20-style split by whole trajectories: {train, validation} index lists.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_traces(std::size_t count,
                                                                                  double train_fraction,
                                                                                  std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InvalidInput("train_fraction must be in (0,1)");
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    rng::Stream s(seed, 0x53504c4954ull);
    for (std::size_t i = count; i > 1; --i) {
        const auto j = static_cast<std::size_t>(s.bits() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(count)));
    n_train = std::clamp<std::size_t>(n_train, count > 1 ? 1 : 0, count > 1 ? count - 1 : count);
    std::vector<std::size_t> train(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> valid(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(train.begin(), train.end());
    std::sort(valid.begin(), valid.end());
    return {train, valid};
}

// ============================================================================
// JSON
// ============================================================================

inline nlohmann::json matrix_to_json(const Mat& m) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(m.size()));
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) flat.push_back(m(i, j));
    return flat;
}

inline Mat matrix_from_json(const nlohmann::json& j, Index rows, Index cols) {
    const auto flat = j.get<std::vector<double>>();
    if (static_cast<Index>(flat.size()) != rows * cols) throw InvalidInput("matrix JSON has wrong length");
    Mat m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index k = 0; k < cols; ++k) m(i, k) = flat[static_cast<std::size_t>(i * cols + k)];
    return m;
}

inline nlohmann::json model_to_json(const KoopmanModel& model) {
    nlohmann::json j;
    j["state_dim"] = model.n();
    j["r"] = model.r();
    j["m"] = model.m();
    j["p"] = model.p();
    j["A"] = matrix_to_json(model.A);
    j["B"] = matrix_to_json(model.B);
    j["C_o"] = matrix_to_json(model.C_o);
    j["measured"] = model.measured;
    j["dictionary"] = spec_to_json(model.dictionary.spec());
    j["ridge_lambda"] = model.ridge_lambda;
    j["dt"] = model.dt;
    j["rho"] = model.residual.rho;
    j["eta_bar"] = model.residual.eta_bar;
    j["epsilon"] = model.residual.epsilon;
    j["omega_max"] = model.omega_max;
    return j;
}

inline KoopmanModel model_from_json(const nlohmann::json& j) {
    KoopmanModel model;
    model.dictionary = build_dictionary(spec_from_json(j.at("dictionary")));
    const int r = j.at("r").get<int>(), m = j.at("m").get<int>(), p = j.at("p").get<int>();
    if (r != model.dictionary.total_dim()) throw InvalidInput("model r does not match its dictionary");
    if (j.at("state_dim").get<int>() != model.dictionary.state_dim())
        throw InvalidInput("model state_dim does not match its dictionary");
    model.A = matrix_from_json(j.at("A"), r, r);
    model.B = matrix_from_json(j.at("B"), r, m);
    model.C_o = matrix_from_json(j.at("C_o"), p, r);
    model.measured = j.at("measured").get<std::vector<int>>();
    model.ridge_lambda = j.at("ridge_lambda").get<double>();
    model.dt = j.value("dt", 0.0);
    model.residual.rho = j.at("rho").get<double>();
    model.residual.eta_bar = j.at("eta_bar").get<double>();
    model.residual.epsilon = j.at("epsilon").get<double>();
    model.omega_max = j.value("omega_max", 0.0);
    return model;
}

}  // namespace pko
