#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pko/common.hpp"

// Small dense primal barrier method for
//   minimize c^T x  s.t.  F0_b + sum_i x_i F_ib >= 0 (each block b),
//                         A x <= b,  |x| <= radius.
// Sized for a few dozen variables and blocks up to ~50x50.

namespace pko::sdp {

struct Term {
    int row;
    int col;
    double value;  // the entry at (row,col) and, off-diagonal, its mirror
};

struct LmiBlock {
    Mat F0;
    std::vector<std::vector<Term>> F;  // one sparse symmetric matrix per variable
};

struct Problem {
    int num_vars = 0;
    std::vector<LmiBlock> blocks;
    Mat A;  // rows x num_vars
    Vec b;
    Vec c;
    double radius = 1e9;
};

enum class Status { optimal, infeasible, iteration_limit, numerical_failure };

inline std::string to_string(Status s) {
    switch (s) {
        case Status::optimal: return "optimal";
        case Status::infeasible: return "infeasible";
        case Status::iteration_limit: return "iteration_limit";
        case Status::numerical_failure: return "numerical_failure";
    }
    return "?";
}

struct Options {
    double mu = 12.0;
    double rel_gap = 1e-9;
    int max_newton = 800;
    double newton_tol = 1e-9;  // on lambda^2 / 2
};

struct Result {
    Status status = Status::numerical_failure;
    Vec x;
    double objective = 0.0;
    double gap_bound = 0.0;
    double least_violation = 0.0;  // phase-I optimum when infeasible
    int newton_steps = 0;
};

inline Mat block_value(const LmiBlock& blk, const Vec& x) {
    Mat g = blk.F0;
    for (std::size_t i = 0; i < blk.F.size(); ++i) {
        const double xi = x[static_cast<Index>(i)];
        if (xi == 0.0) continue;
        for (const auto& t : blk.F[i]) {
            g(t.row, t.col) += xi * t.value;
            if (t.row != t.col) g(t.col, t.row) += xi * t.value;
        }
    }
    return g;
}

inline void validate(const Problem& pb) {
    if (pb.num_vars <= 0) throw InvalidInput("sdp: no variables");
    if (pb.c.size() != pb.num_vars) throw InvalidInput("sdp: objective length mismatch");
    if (pb.A.rows() != pb.b.size() || (pb.A.rows() > 0 && pb.A.cols() != pb.num_vars))
        throw InvalidInput("sdp: inequality shape mismatch");
    for (const auto& blk : pb.blocks) {
        if (blk.F0.rows() != blk.F0.cols()) throw InvalidInput("sdp: non-square block");
        if (static_cast<int>(blk.F.size()) != pb.num_vars) throw InvalidInput("sdp: block coefficient count mismatch");
        for (const auto& fi : blk.F)
            for (const auto& t : fi)
                if (t.row < 0 || t.col < 0 || t.row >= blk.F0.rows() || t.col >= blk.F0.rows())
                    throw InvalidInput("sdp: term outside block");
    }
    if (!(pb.radius > 0.0)) throw InvalidInput("sdp: radius must be > 0");
}

namespace detail {

// Barrier  t c^T x - sum logdet G_b(x) - sum log(b - A x) - log(R^2 - |x_ball|^2).
struct Barrier {
    const Problem& pb;
    int ball_dims;

    int barrier_degree() const {
        int m = static_cast<int>(pb.A.rows()) + 1;
        for (const auto& blk : pb.blocks) m += static_cast<int>(blk.F0.rows());
        return m;
    }

    // Returns false when x is outside the domain.
    bool value(const Vec& x, double t, double& f) const {
        f = t * pb.c.dot(x);
        for (const auto& blk : pb.blocks) {
            Eigen::LLT<Mat> llt(block_value(blk, x));
            if (llt.info() != Eigen::Success) return false;
            const Vec d = llt.matrixLLT().diagonal();
            if ((d.array() <= 0.0).any()) return false;
            f -= 2.0 * d.array().log().sum();
        }
        if (pb.A.rows() > 0) {
            const Vec s = pb.b - pb.A * x;
            if ((s.array() <= 0.0).any()) return false;
            f -= s.array().log().sum();
        }
        const double q = pb.radius * pb.radius - x.head(ball_dims).squaredNorm();
        if (q <= 0.0) return false;
        f -= std::log(q);
        return std::isfinite(f);
    }

    void derivatives(const Vec& x, double t, Vec& grad, Mat& hess) const {
        const int n = pb.num_vars;
        grad = t * pb.c;
        hess = Mat::Zero(n, n);
        for (const auto& blk : pb.blocks) {
            const Index d = blk.F0.rows();
            Eigen::LLT<Mat> llt(block_value(blk, x));
            const Mat W = llt.solve(Mat::Identity(d, d));
            // S_i = W F_i, stored column-major as columns of `vs`; `vt` holds S_i^T.
            Mat vs = Mat::Zero(d * d, n), vt(d * d, n);
            for (int i = 0; i < n; ++i) {
                Eigen::Map<Mat> s(vs.col(i).data(), d, d);
                for (const auto& term : blk.F[static_cast<std::size_t>(i)]) {
                    s.col(term.col) += term.value * W.col(term.row);
                    if (term.row != term.col) s.col(term.row) += term.value * W.col(term.col);
                }
                grad[i] -= s.trace();
                Eigen::Map<Mat>(vt.col(i).data(), d, d) = s.transpose();
            }
            hess.noalias() += vs.transpose() * vt;
        }
        if (pb.A.rows() > 0) {
            const Vec s = pb.b - pb.A * x;
            const Vec inv = s.cwiseInverse();
            grad += pb.A.transpose() * inv;
            hess.noalias() += pb.A.transpose() * inv.cwiseAbs2().asDiagonal() * pb.A;
        }
        const double q = pb.radius * pb.radius - x.head(ball_dims).squaredNorm();
        Vec xb = Vec::Zero(n);
        xb.head(ball_dims) = x.head(ball_dims);
        grad += 2.0 / q * xb;
        hess += 4.0 / (q * q) * xb * xb.transpose();
        hess.diagonal().head(ball_dims).array() += 2.0 / q;
        hess = symmetrize(hess);
    }
};

// Damped Newton on the barrier at fixed t. Returns false on numerical failure.
inline bool centre(const Barrier& br, Vec& x, double t, const Options& opts, int& steps,
                   const std::function<bool(const Vec&)>& early_exit) {
    Vec grad;
    Mat hess;
    double fx;
    if (!br.value(x, t, fx)) return false;
    for (int it = 0; it < 200; ++it) {
        if (steps >= opts.max_newton) return true;
        br.derivatives(x, t, grad, hess);
        // Jacobi scaling keeps the factorization usable when variables differ in scale by many decades.
        Vec scale = hess.diagonal().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
        Mat hs = scale.asDiagonal() * hess * scale.asDiagonal();
        Eigen::LDLT<Mat> ldlt(hs);
        if (ldlt.info() != Eigen::Success) return false;
        Vec dx = -(scale.asDiagonal() * ldlt.solve(scale.asDiagonal() * grad));
        if (!dx.allFinite()) return false;
        const double dec = -grad.dot(dx);
        ++steps;
        if (dec < 0.0) return false;
        if (dec / 2.0 <= opts.newton_tol) return true;
        double step = 1.0, fn = 0.0;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls, step *= 0.5) {
            const Vec xn = x + step * dx;
            if (br.value(xn, t, fn) && fn <= fx - 0.25 * step * dec) {
                x = xn;
                fx = fn;
                accepted = true;
                break;
            }
        }
        if (!accepted) return dec / 2.0 < 1e-6;  // stalled at roundoff level
        if (early_exit && early_exit(x)) return true;
    }
    return true;
}

struct PathResult {
    bool ok = false;
    bool early = false;
    Vec x;
    double t = 0.0;
    int degree = 0;
};

inline PathResult follow_path(const Problem& pb, int ball_dims, Vec x, double rel_gap, const Options& opts,
                              int& steps, const std::function<bool(const Vec&)>& early_exit,
                              const std::function<bool(const Vec&, double)>& stop_on_bound = {}) {
    Barrier br{pb, ball_dims};
    PathResult pr;
    pr.degree = br.barrier_degree();
    // Initial t balances objective and barrier gradients.
    double t = 1.0;
    {
        Vec g;
        Mat h;
        br.derivatives(x, 0.0, g, h);
        const double cn = pb.c.norm();
        if (cn > 0.0) t = std::clamp(g.norm() / cn, 1e-8, 1e8);
    }
    for (int outer = 0; outer < 100; ++outer) {
        if (!centre(br, x, t, opts, steps, early_exit)) {
            pr.x = x;
            pr.t = t;
            return pr;
        }
        pr.x = x;
        pr.t = t;
        if (early_exit && early_exit(x)) {
            pr.ok = pr.early = true;
            return pr;
        }
        const double gap = pr.degree / t;
        if (stop_on_bound && stop_on_bound(x, gap)) {
            pr.ok = true;
            return pr;
        }
        if (gap <= rel_gap * std::max(1.0, std::abs(pb.c.dot(x))) || steps >= opts.max_newton) {
            pr.ok = steps < opts.max_newton;
            return pr;
        }
        t *= opts.mu;
    }
    return pr;
}

}  // namespace detail

// Phase I: minimize s with every constraint relaxed by s; stops as soon as s < 0.
// True with x strictly feasible; false with the least violation found.
inline bool find_interior(const Problem& pb, Vec& x, double& least_violation, int& steps, const Options& opts) {
    const int n = pb.num_vars;
    Problem aux;
    aux.num_vars = n + 1;
    aux.radius = pb.radius;
    aux.c = Vec::Zero(n + 1);
    aux.c[n] = 1.0;
    double s0 = 0.0;
    for (const auto& blk : pb.blocks) {
        LmiBlock b2{blk.F0, blk.F};
        std::vector<Term> id;
        for (int k = 0; k < blk.F0.rows(); ++k) id.push_back({k, k, 1.0});
        b2.F.push_back(std::move(id));
        aux.blocks.push_back(std::move(b2));
        s0 = std::max(s0, -sym_min_eig(block_value(blk, x)));
    }
    aux.A = Mat::Zero(pb.A.rows(), n + 1);
    if (pb.A.rows() > 0) {
        aux.A.leftCols(n) = pb.A;
        aux.A.col(n).setConstant(-1.0);
        s0 = std::max(s0, (pb.A * x - pb.b).maxCoeff());
    }
    aux.b = pb.b;
    Vec xs(n + 1);
    xs.head(n) = x;
    xs[n] = s0 + 1.0 + 0.1 * std::abs(s0);
    if (x.squaredNorm() >= pb.radius * pb.radius) throw InvalidInput("sdp: starting point outside ball");
    double scale = 1.0;
    for (const auto& blk : pb.blocks) scale = std::max(scale, blk.F0.cwiseAbs().maxCoeff());
    // Stop once strictly feasible, or once the central-path bound proves infeasibility.
    auto feasible = [&](const Vec& v) { return v[n] < -1e-13 * scale; };
    auto infeasible = [&](const Vec& v, double gap) { return v[n] - gap > 0.0; };
    Options o = opts;
    auto pr = detail::follow_path(aux, n, xs, 1e-9, o, steps, feasible, infeasible);
    if (!pr.x.size()) return false;
    x = pr.x.head(n);
    least_violation = pr.x[n];
    return pr.early || feasible(pr.x);
}

inline Result solve(const Problem& pb, Vec x0, const Options& opts = {}) {
    validate(pb);
    if (x0.size() != pb.num_vars) throw InvalidInput("sdp: start point length mismatch");
    Result res;
    double viol = 0.0;
    Vec x = x0;
    if (!find_interior(pb, x, viol, res.newton_steps, opts)) {
        res.status = Status::infeasible;
        res.x = x;
        res.least_violation = std::max(viol, 0.0);
        return res;
    }
    auto pr = detail::follow_path(pb, pb.num_vars, x, opts.rel_gap, opts, res.newton_steps, {});
    res.x = pr.x;
    res.objective = pb.c.dot(pr.x);
    res.gap_bound = pr.t > 0 ? pr.degree / pr.t : 0.0;
    if (pr.ok)
        res.status = Status::optimal;
    else
        res.status = res.newton_steps >= opts.max_newton ? Status::iteration_limit : Status::numerical_failure;
    return res;
}

}  // namespace pko::sdp
