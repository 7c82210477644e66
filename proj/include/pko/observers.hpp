#pragma once

#include <complex>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "pko/common.hpp"
#include "pko/edmd.hpp"
#include "pko/persidskii.hpp"
#include "pko/riccati.hpp"
#include "pko/systems.hpp"

// All observers consume (u_k, y_k) at t_k and advance their estimate to t_{k+1}.

namespace pko {

inline constexpr double kDivergenceLimit = 1e6;

namespace detail {

inline void check_diverged(const Vec& v, const std::string& who, double t) {
    if (!v.allFinite() || v.cwiseAbs().maxCoeff() > kDivergenceLimit) throw ObserverDiverged(who, t);
}

}  // namespace detail

// ============================================================================
// Persidskii-Koopman observer
// ============================================================================

struct PkoObserver {
    KoopmanModel model;
    Mat K;
    SectorNonlinearity sigma;
    Vec z_hat;
    double t = 0.0;
};

inline PkoObserver make_pko(const KoopmanModel& model, const Mat& K, const SectorNonlinearity& sigma,
                            const Vec& x_hat0) {
    if (K.rows() != model.r() || K.cols() != model.p()) throw InvalidInput("PKO gain must be r x p");
    if (sigma.channel_count() != model.p()) throw InvalidInput("PKO sigma must have p channels");
    if (!sector_check(sigma).pass) throw InvalidInput("PKO sigma fails the sector check");
    return {model, K, sigma, lift(model.dictionary, x_hat0), 0.0};
}

inline Vec pko_rhs(const PkoObserver& obs, const Vec& z, const Vec& u, const Vec& y) {
    Vec dz = obs.model.A * z + obs.K * sector_eval(obs.sigma, y - obs.model.C_o * z);
    if (obs.model.m() > 0) dz += obs.model.B * u;
    return dz;
}

inline void pko_step(PkoObserver& obs, const Vec& u, const Vec& y, double dt) {
    if (y.size() != obs.model.p()) throw InvalidInput("PKO: measurement has wrong length");
    auto f = [&](const Vec& z, const Vec& uu, double) { return pko_rhs(obs, z, uu, y); };
    try {
        obs.z_hat = rk4_step(f, obs.z_hat, u, obs.t, dt);
    } catch (const IntegrationBlowup&) {
        throw ObserverDiverged("PKO", obs.t + dt);
    }
    obs.t += dt;
    detail::check_diverged(obs.z_hat, "PKO", obs.t);
}

inline Vec estimate_state(const Vec& z_hat, int n) {
    if (n > z_hat.size()) throw InvalidInput("estimate_state: n exceeds lifted dimension");
    return z_hat.head(n);
}

inline Vec estimate_state(const PkoObserver& obs) { return estimate_state(obs.z_hat, obs.model.n()); }

// ============================================================================
// Linear Koopman Luenberger observer
// ============================================================================

struct LinKoopDesign {
    std::string method = "riccati";  // riccati | ackermann
    double q = 1.0;                  // Q = q I
    double r = 0.01;                 // R = r I (measurement variance)
    std::vector<std::complex<double>> poles;
};

inline Mat linkoop_gain(const Mat& a, const Mat& c, const LinKoopDesign& design) {
    if (design.method == "ackermann") {
        if (auto mode = undetectable_mode(a, c))
            throw SynthesisInfeasible("(A, C_o) not detectable: unobservable eigenvalue " + std::to_string(mode->real()),
                                      0.0, 0.0);
        return ackermann_observer(a, c, design.poles);
    }
    if (design.method != "riccati") throw InvalidInput("linkoop method must be riccati or ackermann");
    if (!(design.q > 0.0) || !(design.r > 0.0)) throw InvalidInput("linkoop q and r must be > 0");
    const Index r = a.rows(), p = c.rows();
    return kalman_bucy_gain(a, c, design.q * Mat::Identity(r, r), design.r * Mat::Identity(p, p)).L;
}

inline Mat linkoop_gain(const KoopmanModel& model, const LinKoopDesign& design) {
    return linkoop_gain(model.A, model.C_o, design);
}

struct LinKoopObserver {
    KoopmanModel model;
    Mat L;
    Vec z_hat;
    double t = 0.0;
};

inline LinKoopObserver make_linkoop(const KoopmanModel& model, const Mat& L, const Vec& x_hat0) {
    if (L.rows() != model.r() || L.cols() != model.p()) throw InvalidInput("LinKoop gain must be r x p");
    const double abscissa = spectral_abscissa(model.A - L * model.C_o);
    if (!(abscissa < 0.0))
        throw InvalidInput("LinKoop: A - L C_o is not Hurwitz (abscissa " + std::to_string(abscissa) + ")");
    return {model, L, lift(model.dictionary, x_hat0), 0.0};
}

inline void linkoop_step(LinKoopObserver& obs, const Vec& u, const Vec& y, double dt) {
    if (y.size() != obs.model.p()) throw InvalidInput("LinKoop: measurement has wrong length");
    auto f = [&](const Vec& z, const Vec& uu, double) -> Vec {
        Vec dz = obs.model.A * z + obs.L * (y - obs.model.C_o * z);
        if (obs.model.m() > 0) dz += obs.model.B * uu;
        return dz;
    };
    try {
        obs.z_hat = rk4_step(f, obs.z_hat, u, obs.t, dt);
    } catch (const IntegrationBlowup&) {
        throw ObserverDiverged("LinKoop", obs.t + dt);
    }
    obs.t += dt;
    detail::check_diverged(obs.z_hat, "LinKoop", obs.t);
}

inline Vec estimate_state(const LinKoopObserver& obs) { return estimate_state(obs.z_hat, obs.model.n()); }

// ============================================================================
// Continuous-discrete EKF on the original plant
// ============================================================================

struct EkfObserver {
    Plant plant;
    Mat Q;
    Mat R;
    Vec x_hat;
    Mat Pcov;
    double t = 0.0;
};

inline EkfObserver make_ekf(const Plant& plant, const Mat& Q, const Mat& R, const Vec& x_hat0, const Mat& P0) {
    const int n = plant.state_dim, p = plant.output_dim();
    if (Q.rows() != n || Q.cols() != n || P0.rows() != n || P0.cols() != n) throw InvalidInput("EKF: Q, P0 must be n x n");
    if (R.rows() != p || R.cols() != p) throw InvalidInput("EKF: R must be p x p");
    if (x_hat0.size() != n) throw InvalidInput("EKF: x_hat0 must have n entries");
    if (sym_min_eig(symmetrize(Q)) < -1e-12) throw InvalidInput("EKF: Q must be PSD");
    if (!(sym_min_eig(symmetrize(R)) > 0.0)) throw InvalidInput("EKF: R must be positive definite");
    if (sym_min_eig(symmetrize(P0)) < -1e-12) throw InvalidInput("EKF: P0 must be PSD");
    return {plant, symmetrize(Q), symmetrize(R), x_hat0, symmetrize(P0), 0.0};
}

namespace detail {

// Symmetrize and clip negative eigenvalues.
inline Mat psd_project(const Mat& m) {
    Mat s = symmetrize(m);
    Eigen::SelfAdjointEigenSolver<Mat> es(s);
    if (es.eigenvalues().minCoeff() >= 0.0) return s;
    const Vec d = es.eigenvalues().cwiseMax(0.0);
    return symmetrize(es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose());
}

}  // namespace detail

// Measurement update with y_k (Joseph form).
inline void ekf_update(EkfObserver& obs, const Vec& y) {
    const Mat h = obs.plant.output_jacobian();
    const Mat s = symmetrize(h * obs.Pcov * h.transpose() + obs.R);
    Eigen::LLT<Mat> sl(s);
    if (sl.info() != Eigen::Success) throw NumericalFailure("EKF: innovation covariance is singular");
    const Mat gain = sl.solve(h * obs.Pcov).transpose();
    obs.x_hat += gain * (y - obs.plant.output(obs.x_hat));
    const Mat ikh = Mat::Identity(obs.plant.state_dim, obs.plant.state_dim) - gain * h;
    obs.Pcov = detail::psd_project(ikh * obs.Pcov * ikh.transpose() + gain * obs.R * gain.transpose());
}

// Prediction over [t, t + dt]: RK4 on x and on Pdot = F P + P F^T + Q.
inline void ekf_predict(EkfObserver& obs, const Vec& u, double dt) {
    const int n = obs.plant.state_dim;
    Vec xp(n + n * n);
    xp << obs.x_hat, Eigen::Map<const Vec>(obs.Pcov.data(), n * n);
    auto f = [&](const Vec& s, const Vec& uu, double t) -> Vec {
        const Vec x = s.head(n);
        const Mat pc = Eigen::Map<const Mat>(s.data() + n, n, n);
        const Mat fj = obs.plant.jacobian(x, uu);
        const Mat pdot = fj * pc + pc * fj.transpose() + obs.Q;
        Vec out(n + n * n);
        out << obs.plant.dynamics(x, uu, t), Eigen::Map<const Vec>(pdot.data(), n * n);
        return out;
    };
    try {
        xp = rk4_step(f, xp, u, obs.t, dt);
    } catch (const IntegrationBlowup&) {
        throw ObserverDiverged("EKF", obs.t + dt);
    }
    obs.t += dt;
    obs.x_hat = xp.head(n);
    obs.Pcov = detail::psd_project(Eigen::Map<const Mat>(xp.data() + n, n, n));
    detail::check_diverged(obs.x_hat, "EKF", obs.t);
}

inline void ekf_step(EkfObserver& obs, const Vec& u, const Vec& y, double dt) {
    if (y.size() != obs.plant.output_dim()) throw InvalidInput("EKF: measurement has wrong length");
    if (!(dt > 0.0)) throw InvalidInput("EKF: dt must be > 0");
    ekf_update(obs, y);
    ekf_predict(obs, u, dt);
}

inline Vec estimate_state(const EkfObserver& obs) { return obs.x_hat; }

}  // namespace pko
