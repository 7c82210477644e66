#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pko/common.hpp"
#include "pko/edmd.hpp"
#include "pko/riccati.hpp"
#include "pko/sdp.hpp"

namespace pko {

// ============================================================================
// LMI  Xi(P, K~, g) < 0 at fixed Lambda
// ============================================================================

// Variables are packed as x = [diag P (r), vec K~ column-major (r*p), g = gamma^2].
struct LmiProblem {
    int r = 0;
    int p = 0;
    Mat A;
    Mat C_o;
    Vec kappa;
    double rho = 0.0;
    Vec lambda;
    double margin = 0.0;
    double p_min = 1e-6;
    double g_min = 0.0;
    double gain_bound = 0.0;  // > 0: |K_w(i,j)| = |K~(i,j)| / p_i <= gain_bound
    double radius = 1e9;      // bound on |x| handed to the SDP solver

    int num_vars() const noexcept { return r + r * p + 1; }
    int xi_dim() const noexcept { return 2 * r + p; }

    Vec pack(const Vec& pdiag, const Mat& kt, double g) const {
        Vec x(num_vars());
        x.head(r) = pdiag;
        x.segment(r, r * p) = Eigen::Map<const Vec>(kt.data(), r * p);
        x[r + r * p] = g;
        return x;
    }
    Vec pdiag(const Vec& x) const { return x.head(r); }
    Mat k_tilde(const Vec& x) const { return Eigen::Map<const Mat>(x.data() + r, r, p); }
    double g(const Vec& x) const { return x[r + r * p]; }

    Mat xi(const Vec& pd, const Mat& kt, double g) const {
        const Mat pm = pd.asDiagonal();
        const Mat lam = lambda.asDiagonal();
        Mat x = Mat::Zero(xi_dim(), xi_dim());
        x.topLeftCorner(r, r) = pm * A + A.transpose() * pm - kt * C_o - C_o.transpose() * kt.transpose() +
                                rho * Mat::Identity(r, r);
        const Mat pi12 = kt * lam + A.transpose() * C_o.transpose();
        x.block(0, r, r, p) = pi12;
        x.block(r, 0, p, r) = pi12.transpose();
        x.block(r, r, p, p) = -2.0 * (lambda.array() * kappa.array()).matrix().asDiagonal();
        x.block(0, r + p, r, r) = pm;
        x.block(r + p, 0, r, r) = pm;
        x.block(r + p, r + p, r, r) = -g * Mat::Identity(r, r);
        return x;
    }
    Mat xi(const Vec& x) const { return xi(pdiag(x), k_tilde(x), g(x)); }

    // G(x) = -Xi(x) - margin I >= 0, p_i >= p_min, g >= g_min; minimize g.
    sdp::Problem to_sdp() const {
        const int n = num_vars(), d = xi_dim();
        sdp::Problem pb;
        pb.num_vars = n;
        sdp::LmiBlock blk;
        const Mat x0 = xi(Vec::Zero(n));
        blk.F0 = -x0 - margin * Mat::Identity(d, d);
        for (int i = 0; i < n; ++i) {
            const Mat fi = -(xi(Vec::Unit(n, i)) - x0);
            std::vector<sdp::Term> terms;
            for (int c = 0; c < d; ++c)
                for (int rr = 0; rr <= c; ++rr)
                    if (fi(rr, c) != 0.0) terms.push_back({rr, c, fi(rr, c)});
            blk.F.push_back(std::move(terms));
        }
        pb.blocks.push_back(std::move(blk));
        pb.A = Mat::Zero(r + 1, n);
        pb.b = Vec::Zero(r + 1);
        for (int i = 0; i < r; ++i) {
            pb.A(i, i) = -1.0;
            pb.b[i] = -p_min;
        }
        pb.A(r, n - 1) = -1.0;
        pb.b[r] = -g_min;
        if (gain_bound > 0.0) {
            // +-K~(i,j) - gain_bound p_i <= 0
            const int rows = r + 1;
            pb.A.conservativeResize(rows + 2 * r * p, n);
            pb.b.conservativeResize(rows + 2 * r * p);
            pb.A.bottomRows(2 * r * p).setZero();
            pb.b.tail(2 * r * p).setZero();
            for (int j = 0; j < p; ++j)
                for (int i = 0; i < r; ++i) {
                    const int k = rows + 2 * (j * r + i);
                    pb.A(k, r + j * r + i) = 1.0;
                    pb.A(k + 1, r + j * r + i) = -1.0;
                    pb.A(k, i) = pb.A(k + 1, i) = -gain_bound;
                }
        }
        pb.c = Vec::Unit(n, n - 1);
        pb.radius = radius;
        return pb;
    }
};

// Closed-form K~ minimizing the Schur complement of Xi in Loewner order for
// every (P, g): K~* = (2 C^T R_kappa - A^T C^T) Lambda^-1.
inline Mat k_tilde_star(const LmiProblem& lp) {
    const Mat rk = lp.kappa.asDiagonal();
    return (2.0 * lp.C_o.transpose() * rk - lp.A.transpose() * lp.C_o.transpose()) *
           lp.lambda.cwiseInverse().asDiagonal();
}

// The LMI with K~ held fixed: variables [diag P (r), g] on the full Xi.
inline sdp::Problem fixed_gain_sdp(const LmiProblem& lp, const Mat& kt) {
    const auto full = lp.to_sdp();
    const int r = lp.r, n_full = lp.num_vars();
    sdp::Problem pb;
    pb.num_vars = r + 1;
    sdp::LmiBlock blk;
    blk.F0 = sdp::block_value(full.blocks[0], lp.pack(Vec::Zero(r), kt, 0.0));
    for (int k = 0; k < r; ++k) blk.F.push_back(full.blocks[0].F[static_cast<std::size_t>(k)]);
    blk.F.push_back(full.blocks[0].F[static_cast<std::size_t>(n_full - 1)]);
    pb.blocks.push_back(std::move(blk));
    pb.A = Mat::Zero(r + 1, r + 1);
    pb.b = Vec::Zero(r + 1);
    for (int i = 0; i < r; ++i) {
        pb.A(i, i) = -1.0;
        // With K~ fixed the gain bound is a floor on p_i.
        const double floor = lp.gain_bound > 0.0 ? kt.row(i).cwiseAbs().maxCoeff() / lp.gain_bound : 0.0;
        pb.b[i] = -std::max(lp.p_min, floor);
    }
    pb.A(r, r) = -1.0;
    pb.b[r] = -lp.g_min;
    pb.c = Vec::Unit(r + 1, r);
    pb.radius = lp.radius;
    return pb;
}

inline LmiProblem build_lmi(const Mat& a, const Mat& c_o, const Vec& kappa, double rho, const Vec& lambda,
                            double margin, double p_min = 1e-6) {
    const Index r = a.rows(), p = c_o.rows();
    if (a.cols() != r || c_o.cols() != r) throw InvalidInput("build_lmi: A must be r x r and C_o p x r");
    if (kappa.size() != p || lambda.size() != p) throw InvalidInput("build_lmi: kappa and Lambda need p entries");
    if ((kappa.array() <= 0.0).any()) throw InvalidInput("build_lmi: kappa must be > 0");
    if ((lambda.array() <= 0.0).any()) throw InvalidInput("build_lmi: Lambda must be > 0");
    if (!(rho >= 0.0)) throw InvalidInput("build_lmi: rho must be >= 0");
    if (!(margin >= 0.0) || !(p_min > 0.0)) throw InvalidInput("build_lmi: margin >= 0 and p_min > 0 required");
    LmiProblem pb;
    pb.r = static_cast<int>(r);
    pb.p = static_cast<int>(p);
    pb.A = a;
    pb.C_o = c_o;
    pb.kappa = kappa;
    pb.rho = rho;
    pb.lambda = lambda;
    pb.margin = margin;
    pb.p_min = p_min;
    return pb;
}

// ============================================================================
// Certificate
// ============================================================================

struct Certificate {
    int n = 0;
    int r = 0;
    int p = 0;
    // Synthesis runs in coordinates w = T z; T = I is "literal".
    std::string coordinates = "literal";
    Mat T;
    Vec P;  // diagonal, w-coordinates
    Vec Lambda;
    Mat K_tilde;
    Mat K_w;
    Mat K;  // applied to the lifted observer: K = T^-1 K_w
    double gamma = 0.0;
    double gamma_opt = 0.0;  // SDP optimum at Lambda before recentring
    double alpha = 0.0;
    double beta = 1.0;
    double xi_max_eig = 0.0;
    double xi_norm = 0.0;
    double rho = 0.0;      // model residual slope
    double rho_lmi = 0.0;  // slope used in Pi11 (w-coordinates)
    Vec kappa;
    double margin = 0.0;
    double p_min = 1e-6;
    double gain_bound = 0.0;  // 0: unbounded
    std::string dictionary_hash;
    std::string solver_status;
    bool verified = false;
    std::string verification_failure;  // violated quantity when not verified
    int decision_variables = 0;
    int sdp_solves = 0;
    int newton_steps = 0;
    double solve_seconds = 0.0;

    double c() const { return std::sqrt(gamma * gamma * P.maxCoeff() / (alpha * P.minCoeff())); }
    double cond_T() const {
        Eigen::JacobiSVD<Mat> svd(T);
        return svd.singularValues()(0) / svd.singularValues()(svd.singularValues().size() - 1);
    }
    Mat lyapunov_z() const { return T.transpose() * P.asDiagonal() * T; }
};

inline LmiProblem certificate_problem(const Certificate& cert, const Mat& a_w, const Mat& c_w) {
    return build_lmi(a_w, c_w, cert.kappa, cert.rho_lmi, cert.Lambda, cert.margin, cert.p_min);
}

inline std::pair<Mat, Mat> transform_pair(const Mat& t, const Mat& a, const Mat& c) {
    const Mat ti = t.inverse();
    return {t * a * ti, c * ti};
}

inline LmiProblem certificate_problem(const Certificate& cert, const KoopmanModel& model) {
    const auto [aw, cw] = transform_pair(cert.T, model.A, model.C_o);
    return certificate_problem(cert, aw, cw);
}

struct VerificationReport {
    bool pass = true;
    std::string failed_quantity;
    double failed_value = 0.0;
    double xi_max_eig = 0.0;
    double xi_norm = 0.0;
    double p_min_eig = 0.0;
    double pk_residual = 0.0;
};

// Rebuilds Xi from (P, Lambda, K~, gamma) and checks it with a plain symmetric eigensolver.
inline VerificationReport check_certificate(const Certificate& cert, const LmiProblem& pb) {
    VerificationReport rep;
    auto fail = [&](const std::string& q, double v) {
        if (rep.pass) {
            rep.pass = false;
            rep.failed_quantity = q;
            rep.failed_value = v;
        }
    };
    if (cert.P.size() != pb.r || cert.K_tilde.rows() != pb.r || cert.K_tilde.cols() != pb.p ||
        cert.K_w.rows() != pb.r || cert.K_w.cols() != pb.p)
        throw InvalidInput("certificate dimensions do not match the LMI");
    LmiProblem lp = pb;
    lp.lambda = cert.Lambda;
    const Mat x = symmetrize(lp.xi(cert.P, cert.K_tilde, cert.gamma * cert.gamma));
    Eigen::SelfAdjointEigenSolver<Mat> es(x, Eigen::EigenvaluesOnly);
    rep.xi_max_eig = es.eigenvalues().maxCoeff();
    rep.xi_norm = es.eigenvalues().cwiseAbs().maxCoeff();
    rep.p_min_eig = cert.P.minCoeff();
    const double kt_norm = cert.K_tilde.norm();
    rep.pk_residual = (cert.P.asDiagonal() * cert.K_w - cert.K_tilde).norm();
    if (!(rep.xi_max_eig < -1e-8 * rep.xi_norm)) fail("xi_max_eig", rep.xi_max_eig);
    if (!(rep.p_min_eig > 0.0)) fail("P_min", rep.p_min_eig);
    if (!(rep.pk_residual <= 1e-10 * kt_norm)) fail("PK-K_tilde", rep.pk_residual);
    if (!(cert.gamma > 0.0)) fail("gamma", cert.gamma);
    return rep;
}

inline VerificationReport verify_certificate(const Certificate& cert, const LmiProblem& pb) {
    auto rep = check_certificate(cert, pb);
    if (!rep.pass) throw InvalidCertificate(rep.failed_quantity, rep.failed_value);
    return rep;
}

inline double compute_alpha(const Mat& xi) {
    const double a = -sym_max_eig(xi);
    if (!(a > 0.0)) throw InvalidCertificate("alpha", a);
    return a;
}

inline double compute_alpha(const Certificate& cert, const LmiProblem& pb) {
    LmiProblem lp = pb;
    lp.lambda = cert.Lambda;
    return compute_alpha(lp.xi(cert.P, cert.K_tilde, cert.gamma * cert.gamma));
}

// lambda_max of Xi0 + gamma^-2 [P;0][P;0]^T, Xi0 the leading (r+p) block.
inline double schur_reduced_max_eig(const Certificate& cert, const LmiProblem& pb) {
    LmiProblem lp = pb;
    lp.lambda = cert.Lambda;
    const Mat x = lp.xi(cert.P, cert.K_tilde, cert.gamma * cert.gamma);
    const int m = pb.r + pb.p;
    Mat red = x.topLeftCorner(m, m);
    Mat pp = Mat::Zero(m, pb.r);
    pp.topRows(pb.r) = cert.P.asDiagonal();
    red += pp * pp.transpose() / (cert.gamma * cert.gamma);
    return sym_max_eig(red);
}

// ============================================================================
// Synthesis
// ============================================================================

struct SynthesisOptions {
    double lambda_lo = 1e-3;
    double lambda_hi = 1e3;
    int lambda_points = 25;
    int refine_iterations = 12;
    std::optional<double> margin;  // default 1e-7 * |A|
    double p_min = 1e-6;
    std::string coordinates = "auto";  // literal | balanced | auto
    double balance_q = 1e-2;
    double recenter_slack = 0.1;
    int recenter_attempts = 6;  // cap on g grows to at most (1 + 1e5) g*
    // Try other feasible grid multipliers when the gamma-optimal one fails verification.
    bool search_verifiable_lambda = true;
    int cyclic_sweeps = 2;  // p > 1 only
    bool full_sdp = false;  // search K~ numerically instead of using K~*
    // Residual slope in the chosen coordinates; default is the worst case rho * cond(T).
    std::optional<double> rho_override;
    // Cap on |K_w| entries so the sampled observer stays well inside the RK4
    // stability region; with it the closed-form K~ is no longer optimal.
    std::optional<double> gain_bound;
    // Coordinates fixed by the caller (skips the literal/balanced choice).
    std::optional<Mat> transform;
    // false: return a certificate that fails verification, flagged, instead of throwing.
    bool require_verified = true;
};

namespace detail {

struct InnerSolve {
    bool feasible = false;
    double g = std::numeric_limits<double>::infinity();
    double violation = std::numeric_limits<double>::infinity();
    Vec x;
    sdp::Status status = sdp::Status::numerical_failure;
    int steps = 0;
};

inline Vec lmi_start(const LmiProblem& lp) {
    return lp.pack(Vec::Ones(lp.r), Mat::Zero(lp.r, lp.p), 1.0);
}

// Minimize g at fixed Lambda. The default eliminates K~ in closed form;
// `full` searches over K~ as well.
inline InnerSolve solve_inner(const LmiProblem& lp, double rel_gap, bool full = false) {
    sdp::Options o;
    o.rel_gap = rel_gap;
    InnerSolve out;
    Vec x_full;
    if (full) {
        const auto res = sdp::solve(lp.to_sdp(), lmi_start(lp), o);
        out.status = res.status;
        out.steps = res.newton_steps;
        if (res.status == sdp::Status::infeasible) {
            out.violation = res.least_violation;
            return out;
        }
        x_full = res.x;
    } else {
        const Mat kt = k_tilde_star(lp);
        Vec x0(lp.r + 1);
        x0 << Vec::Ones(lp.r), 1.0;
        const auto res = sdp::solve(fixed_gain_sdp(lp, kt), x0, o);
        out.status = res.status;
        out.steps = res.newton_steps;
        if (res.status == sdp::Status::infeasible) {
            out.violation = res.least_violation;
            return out;
        }
        x_full = lp.pack(res.x.head(lp.r), kt, res.x[lp.r]);
    }
    // Any interior point the solver returns is usable; its objective is what we rank by.
    if (sym_max_eig(lp.xi(x_full)) < 0.0 && lp.pdiag(x_full).minCoeff() > 0.0) {
        out.feasible = true;
        out.g = lp.g(x_full);
        out.x = x_full;
        out.violation = 0.0;
    }
    return out;
}

// Maximize t with Xi + t I <= 0 and g <= g_cap at the K~ of x_feasible.
inline Vec recentre(const LmiProblem& lp, const Vec& x_feasible, double g_cap, int& steps) {
    const int r = lp.r;
    const Mat kt = lp.k_tilde(x_feasible);
    auto base = fixed_gain_sdp(lp, kt);
    const int d = lp.xi_dim();
    sdp::Problem pb;
    pb.num_vars = r + 2;
    pb.blocks = base.blocks;
    pb.radius = base.radius;
    pb.blocks[0].F0.diagonal().array() += lp.margin;
    std::vector<sdp::Term> id;
    for (int k = 0; k < d; ++k) id.push_back({k, k, -1.0});
    pb.blocks[0].F.push_back(std::move(id));
    pb.A = Mat::Zero(base.A.rows() + 1, r + 2);
    pb.A.topLeftCorner(base.A.rows(), r + 1) = base.A;
    pb.A(base.A.rows(), r) = 1.0;
    pb.b.resize(base.b.size() + 1);
    pb.b << base.b, g_cap;
    pb.c = -Vec::Unit(r + 2, r + 1);
    Vec x0(r + 2);
    x0 << lp.pdiag(x_feasible), lp.g(x_feasible), 0.0;
    sdp::Options o;
    o.rel_gap = 1e-6;
    const auto res = sdp::solve(pb, x0, o);
    steps += res.newton_steps;
    if (res.status == sdp::Status::infeasible || res.x.size() != r + 2) return x_feasible;
    const Vec x = lp.pack(res.x.head(r), kt, res.x[r]);
    if (!(sym_max_eig(lp.xi(x)) < sym_max_eig(lp.xi(x_feasible)))) return x_feasible;
    return x;
}

inline Mat balancing_transform(const Mat& a, const Mat& c, const Vec& kappa, double q) {
    const Index r = a.rows();
    const Mat rm = (0.5 * kappa.cwiseInverse()).asDiagonal();
    for (double qq : {q, 0.1 * q, 0.01 * q, 10.0 * q}) {
        FilterGain fg;
        try {
            fg = kalman_bucy_gain(a, c, qq * Mat::Identity(r, r), rm);
        } catch (const NumericalFailure&) {
            continue;
        }
        Eigen::LLT<Mat> sl(fg.S);
        if (sl.info() != Eigen::Success) continue;
        const Mat y = sl.solve(Mat::Identity(r, r));
        const Mat m = symmetrize(y - c.transpose() * c);
        Eigen::LLT<Mat> ml(m);
        if (ml.info() == Eigen::Success) return ml.matrixU();
    }
    throw SynthesisInfeasible("no balancing transform: Y - C^T C is not positive definite", 0.0, 0.0);
}

}  // namespace detail

// Literal coordinates when the LMI is feasible there at rho = 0, otherwise the
// Riccati-balanced T. Feasibility does not depend on Lambda, so one probe decides.
inline Mat choose_coordinates(const KoopmanModel& model, const Vec& kappa, double rho,
                              const SynthesisOptions& opts = {}) {
    const int r = model.r(), p = model.p();
    if (opts.coordinates != "auto" && opts.coordinates != "literal" && opts.coordinates != "balanced")
        throw InvalidInput("coordinates must be auto, literal or balanced");
    if (opts.coordinates == "literal") return Mat::Identity(r, r);
    if (opts.coordinates == "auto") {
        const Vec probe = Vec::Constant(p, std::sqrt(opts.lambda_lo * opts.lambda_hi));
        const double margin = opts.margin.value_or(1e-7 * model.A.operatorNorm());
        const auto lp = build_lmi(model.A, model.C_o, kappa, rho, probe, margin, opts.p_min);
        if (detail::solve_inner(lp, 1e-3, opts.full_sdp).feasible) return Mat::Identity(r, r);
    }
    return detail::balancing_transform(model.A, model.C_o, kappa, opts.balance_q);
}

inline Certificate solve_gain(const KoopmanModel& model, const Vec& kappa, double rho,
                              const SynthesisOptions& opts = {}) {
    const auto t_start = std::chrono::steady_clock::now();
    const int r = model.r(), p = model.p();
    if (kappa.size() != p) throw InvalidInput("solve_gain: kappa needs p entries");
    if (!(opts.lambda_lo > 0.0 && opts.lambda_hi > opts.lambda_lo && opts.lambda_points >= 2))
        throw InvalidInput("solve_gain: bad lambda grid");
    Certificate cert;
    cert.n = model.n();
    cert.r = r;
    cert.p = p;
    cert.kappa = kappa;
    cert.rho = rho;
    cert.p_min = opts.p_min;
    if (opts.gain_bound && !(*opts.gain_bound > 0.0)) throw InvalidInput("solve_gain: gain_bound must be > 0");
    cert.gain_bound = opts.gain_bound.value_or(0.0);
    cert.dictionary_hash = dictionary_hash(model.dictionary);
    cert.decision_variables = r + r * p + 1;

    int solves = 0, steps = 0;
    auto make_problem = [&](const Mat& t, const Vec& lam) {
        const auto [aw, cw] = transform_pair(t, model.A, model.C_o);
        Eigen::JacobiSVD<Mat> svd(t);
        const double cond = svd.singularValues()(0) / svd.singularValues()(r - 1);
        const double margin = opts.margin.value_or(1e-7 * aw.operatorNorm());
        const double rho_c = t.isIdentity(0.0) ? rho : opts.rho_override.value_or(rho * cond);
        auto lp = build_lmi(aw, cw, kappa, rho_c, lam, margin, opts.p_min);
        lp.gain_bound = opts.gain_bound.value_or(0.0);
        return lp;
    };
    auto evaluate = [&](const Mat& t, const Vec& lam, double gap) {
        ++solves;
        auto res = detail::solve_inner(make_problem(t, lam), gap, opts.full_sdp);
        steps += res.steps;
        return res;
    };

    Mat t;
    if (opts.transform) {
        t = *opts.transform;
        if (t.rows() != r || t.cols() != r) throw InvalidInput("solve_gain: transform must be r x r");
        cert.coordinates = t.isIdentity(0.0) ? "literal" : "balanced";
    } else {
        t = choose_coordinates(model, kappa, rho, opts);
        cert.coordinates = t.isIdentity(0.0) ? "literal" : "balanced";
        if (opts.coordinates == "auto") ++solves;
    }

    const double llo = std::log(opts.lambda_lo), lhi = std::log(opts.lambda_hi);
    auto grid_value = [&](int i) {
        return std::exp(llo + (lhi - llo) * i / (opts.lambda_points - 1));
    };

    Vec lam = Vec::Constant(p, 1.0);
    detail::InnerSolve best;
    double least_violation = std::numeric_limits<double>::infinity();
    double least_at = 0.0;
    std::vector<std::pair<double, Vec>> candidates;  // (g, Lambda) at feasible grid points
    const int sweeps = p == 1 ? 1 : opts.cyclic_sweeps;
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        for (int j = 0; j < p; ++j) {
            std::vector<double> gvals(static_cast<std::size_t>(opts.lambda_points));
            int best_i = -1;
            double best_g = std::numeric_limits<double>::infinity();
            for (int i = 0; i < opts.lambda_points; ++i) {
                Vec l = lam;
                l[j] = grid_value(i);
                const auto res = evaluate(t, l, 1e-6);
                gvals[static_cast<std::size_t>(i)] = res.g;
                if (!res.feasible && res.violation < least_violation) {
                    least_violation = res.violation;
                    least_at = l[j];
                }
                if (res.feasible) candidates.emplace_back(res.g, l);
                if (res.feasible && res.g < best_g) {
                    best_g = res.g;
                    best_i = i;
                }
            }
            if (best_i < 0) continue;
            // Golden-section refinement on log lambda between the grid neighbours.
            double a = std::log(grid_value(std::max(best_i - 1, 0)));
            double b = std::log(grid_value(std::min(best_i + 1, opts.lambda_points - 1)));
            double best_l = grid_value(best_i);
            auto f = [&](double ll) {
                Vec l = lam;
                l[j] = std::exp(ll);
                const auto res = evaluate(t, l, 1e-6);
                if (res.feasible && res.g < best_g) {
                    best_g = res.g;
                    best_l = std::exp(ll);
                }
                return res.g;
            };
            const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
            double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
            double f1 = f(x1), f2 = f(x2);
            for (int it = 0; it < opts.refine_iterations; ++it) {
                if (f1 <= f2) {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - phi * (b - a);
                    f1 = f(x1);
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + phi * (b - a);
                    f2 = f(x2);
                }
            }
            lam[j] = best_l;
        }
    }

    best = evaluate(t, lam, 1e-9);
    if (!best.feasible) {
        if (!std::isfinite(least_violation)) least_violation = best.violation;
        cert.sdp_solves = solves;
        throw SynthesisInfeasible("LMI infeasible at every Lambda grid point (least violation " +
                                      std::to_string(least_violation) + " at lambda " + std::to_string(least_at) + ")",
                                  least_violation, least_at);
    }
    cert.T = t;

    struct Pick {
        LmiProblem pb;
        Vec x;
        VerificationReport rep;
        double ratio = std::numeric_limits<double>::infinity();
        double g_opt = 0.0;
        sdp::Status status = sdp::Status::numerical_failure;
    };
    auto fill = [&](const LmiProblem& pb, const Vec& x) {
        cert.rho_lmi = pb.rho;
        cert.margin = pb.margin;
        cert.Lambda = pb.lambda;
        cert.P = pb.pdiag(x);
        cert.K_tilde = pb.k_tilde(x);
        cert.K_w = cert.P.cwiseInverse().asDiagonal() * cert.K_tilde;
        cert.K = t.inverse() * cert.K_w;
        cert.gamma = std::sqrt(pb.g(x));
    };
    // Pull the optimum off the boundary so the strict inequality is checkable.
    // When gamma^2 is tiny next to |Xi| the slack on g bounds how far inside
    // the cone the point can go, so the cap is relaxed tenfold while the
    // relative margin lambda_max / |Xi| keeps improving.
    auto certify = [&](const LmiProblem& pb, const detail::InnerSolve& inner) {
        Pick out;
        out.pb = pb;
        out.g_opt = inner.g;
        out.status = inner.status;
        double slack = opts.recenter_slack;
        for (int attempt = 0; attempt <= opts.recenter_attempts; ++attempt) {
            const Vec x = detail::recentre(pb, inner.x, (1.0 + slack) * inner.g, steps);
            ++solves;
            fill(pb, x);
            const auto rep = check_certificate(cert, pb);
            const double ratio = rep.xi_max_eig / rep.xi_norm;
            if (attempt > 0 && !(ratio < out.ratio)) break;
            out.ratio = ratio;
            out.x = x;
            out.rep = rep;
            if (rep.pass) break;
            slack = std::max(10.0 * slack, 1.0);
        }
        return out;
    };

    // The gamma-optimal Lambda first; when it cannot be certified, the other
    // feasible grid points in order of increasing gamma.
    Pick pick = certify(make_problem(t, lam), best);
    if (!pick.rep.pass && opts.search_verifiable_lambda) {
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        for (const auto& cand : candidates) {
            const auto pb = make_problem(t, cand.second);
            const auto inner = evaluate(t, cand.second, 1e-9);
            if (!inner.feasible) continue;
            auto tried = certify(pb, inner);
            if (tried.rep.pass || tried.ratio < pick.ratio) pick = std::move(tried);
            if (pick.rep.pass) break;
        }
    }
    fill(pick.pb, pick.x);
    const auto& rep = pick.rep;
    cert.gamma_opt = std::sqrt(pick.g_opt);
    cert.solver_status = sdp::to_string(pick.status);
    if (!rep.pass && opts.require_verified) throw InvalidCertificate(rep.failed_quantity, rep.failed_value);
    cert.verified = rep.pass;
    cert.verification_failure = rep.failed_quantity;
    cert.xi_max_eig = rep.xi_max_eig;
    cert.xi_norm = rep.xi_norm;
    cert.alpha = compute_alpha(cert, pick.pb);
    cert.beta = std::sqrt(cert.P.maxCoeff() / cert.P.minCoeff());
    cert.sdp_solves = solves;
    cert.newton_steps = steps;
    cert.solve_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return cert;
}

// ============================================================================
// Convergence quantities
// ============================================================================

struct UltimateBoundPrediction {
    double c = 0.0;
    double epsilon = 0.0;
    double bound = 0.0;
    // Same bound expressed for the lifted-state error |z_hat - z| (adds cond(T)).
    double bound_state = 0.0;
    double settle_time = 0.0;
};

inline UltimateBoundPrediction ultimate_bound(double gamma, double alpha, double p_max, double p_min,
                                              double epsilon, double v0 = 0.0, double cond_t = 1.0) {
    if (epsilon < 0.0) throw InvalidInput("epsilon must be >= 0");
    if (!(alpha > 0.0) || !(p_min > 0.0)) throw InvalidCertificate("alpha", alpha);
    UltimateBoundPrediction ub;
    ub.c = std::sqrt(gamma * gamma * p_max / (alpha * p_min));
    ub.epsilon = epsilon;
    ub.bound = ub.c * epsilon;
    ub.bound_state = ub.bound * cond_t;
    if (v0 > 0.0 && epsilon > 0.0) {
        const double arg = v0 * alpha / (gamma * gamma * epsilon * epsilon * p_max);
        ub.settle_time = arg > 1.0 ? (p_max / alpha) * std::log(arg) : 0.0;
    } else if (v0 > 0.0) {
        ub.settle_time = std::numeric_limits<double>::infinity();
    }
    return ub;
}

inline UltimateBoundPrediction ultimate_bound(const Certificate& cert, double epsilon, double v0 = 0.0) {
    return ultimate_bound(cert.gamma, cert.alpha, cert.P.maxCoeff(), cert.P.minCoeff(), epsilon, v0, cert.cond_T());
}

// Exponential envelope |e_z(t)| <= beta exp(-rate t) |e_z(0)| for the lifted error.
struct DecayEnvelope {
    double beta = 1.0;
    double rate = 0.0;
};

inline DecayEnvelope decay_envelope(const Certificate& cert) {
    const Mat pz = cert.lyapunov_z();
    Eigen::SelfAdjointEigenSolver<Mat> es(pz, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
    Eigen::JacobiSVD<Mat> svd(cert.T);
    const double smin = svd.singularValues()(svd.singularValues().size() - 1);
    return {std::sqrt(hi / lo), cert.alpha * smin * smin / (2.0 * hi)};
}

struct DissipationReport {
    int interior = 0;
    int satisfied = 0;
    double fraction = 1.0;
    double tolerance = 0.0;
    double worst_excess = 0.0;
    std::vector<int> violations;
};

// Vdot <= -alpha |e|^2 + gamma^2 |d|^2 + tol on interior samples; e, d in
// certificate coordinates, one column per sample.
inline DissipationReport check_dissipation(const Vec& pdiag, double alpha, double gamma, const Mat& e,
                                           const Mat& d, double dt) {
    if (e.rows() != pdiag.size() || d.rows() != e.rows() || d.cols() != e.cols())
        throw InvalidInput("check_dissipation: grid mismatch");
    if (!(dt > 0.0)) throw InvalidInput("check_dissipation: dt must be > 0");
    const Index n = e.cols();
    Vec v(n);
    for (Index k = 0; k < n; ++k) v[k] = e.col(k).dot(pdiag.cwiseProduct(e.col(k)));
    DissipationReport rep;
    rep.tolerance = n > 0 ? 1e-3 * v.maxCoeff() * dt : 0.0;
    for (Index k = 1; k + 1 < n; ++k) {
        const double vdot = (v[k + 1] - v[k - 1]) / (2.0 * dt);
        const double rhs = -alpha * e.col(k).squaredNorm() + gamma * gamma * d.col(k).squaredNorm();
        const double excess = vdot - rhs - rep.tolerance;
        ++rep.interior;
        if (excess <= 0.0)
            ++rep.satisfied;
        else
            rep.violations.push_back(static_cast<int>(k));
        rep.worst_excess = std::max(rep.worst_excess, excess);
    }
    rep.fraction = rep.interior > 0 ? static_cast<double>(rep.satisfied) / rep.interior : 1.0;
    return rep;
}

inline DissipationReport check_dissipation(const Certificate& cert, const Mat& e_w, const Mat& d_w, double dt) {
    return check_dissipation(cert.P, cert.alpha, cert.gamma, e_w, d_w, dt);
}

// ============================================================================
// JSON
// ============================================================================

inline nlohmann::json certificate_to_json(const Certificate& c, bool with_timing = false) {
    nlohmann::json j;
    j["dims"] = {{"n", c.n}, {"r", c.r}, {"p", c.p}};
    j["coordinates"] = c.coordinates;
    j["T"] = matrix_to_json(c.T);
    j["P"] = to_std(c.P);
    j["Lambda"] = to_std(c.Lambda);
    j["K_tilde"] = matrix_to_json(c.K_tilde);
    j["K_w"] = matrix_to_json(c.K_w);
    j["K"] = matrix_to_json(c.K);
    j["gamma"] = c.gamma;
    j["gamma_opt"] = c.gamma_opt;
    j["alpha"] = c.alpha;
    j["beta"] = c.beta;
    j["c"] = c.c();
    j["xi_max_eig"] = c.xi_max_eig;
    j["xi_norm"] = c.xi_norm;
    j["rho"] = c.rho;
    j["rho_lmi"] = c.rho_lmi;
    j["kappa"] = to_std(c.kappa);
    j["margin"] = c.margin;
    j["p_min"] = c.p_min;
    j["gain_bound"] = c.gain_bound;
    j["dictionary_hash"] = c.dictionary_hash;
    j["solver_status"] = c.solver_status;
    j["verified"] = c.verified;
    j["verification_failure"] = c.verification_failure;
    j["decision_variables"] = c.decision_variables;
    j["sdp_solves"] = c.sdp_solves;
    j["newton_steps"] = c.newton_steps;
    if (with_timing) j["solve_seconds"] = c.solve_seconds;
    return j;
}

inline Certificate certificate_from_json(const nlohmann::json& j) {
    Certificate c;
    c.n = j.at("dims").at("n").get<int>();
    c.r = j.at("dims").at("r").get<int>();
    c.p = j.at("dims").at("p").get<int>();
    c.coordinates = j.at("coordinates").get<std::string>();
    c.T = matrix_from_json(j.at("T"), c.r, c.r);
    c.P = from_std(j.at("P").get<std::vector<double>>());
    c.Lambda = from_std(j.at("Lambda").get<std::vector<double>>());
    c.K_tilde = matrix_from_json(j.at("K_tilde"), c.r, c.p);
    c.K_w = matrix_from_json(j.at("K_w"), c.r, c.p);
    c.K = matrix_from_json(j.at("K"), c.r, c.p);
    c.gamma = j.at("gamma").get<double>();
    c.gamma_opt = j.value("gamma_opt", 0.0);
    c.alpha = j.at("alpha").get<double>();
    c.beta = j.at("beta").get<double>();
    c.xi_max_eig = j.at("xi_max_eig").get<double>();
    c.xi_norm = j.at("xi_norm").get<double>();
    c.rho = j.at("rho").get<double>();
    c.rho_lmi = j.at("rho_lmi").get<double>();
    c.kappa = from_std(j.at("kappa").get<std::vector<double>>());
    c.margin = j.at("margin").get<double>();
    c.p_min = j.at("p_min").get<double>();
    c.gain_bound = j.value("gain_bound", 0.0);
    c.dictionary_hash = j.at("dictionary_hash").get<std::string>();
    c.solver_status = j.at("solver_status").get<std::string>();
    c.verified = j.value("verified", false);
    c.verification_failure = j.value("verification_failure", std::string());
    c.decision_variables = j.at("decision_variables").get<int>();
    c.sdp_solves = j.value("sdp_solves", 0);
    c.newton_steps = j.value("newton_steps", 0);
    c.solve_seconds = j.value("solve_seconds", 0.0);
    if (c.P.size() != c.r || c.Lambda.size() != c.p || c.kappa.size() != c.p)
        throw InvalidInput("certificate JSON has inconsistent dimensions");
    return c;
}

}  // namespace pko
