#pragma once

#include <complex>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Eigenvalues>

#include "pko/common.hpp"

namespace pko {

using CMat = Eigen::MatrixXcd;
using CVec = Eigen::VectorXcd;

// Solves A X + X A^T + Q = 0 by complex Schur (Bartels-Stewart).
inline Mat lyapunov(const Mat& a, const Mat& q) {
    const Index n = a.rows();
    if (a.cols() != n || q.rows() != n || q.cols() != n) throw InvalidInput("lyapunov: shape mismatch");
    Eigen::ComplexSchur<CMat> schur(a.cast<std::complex<double>>());
    const CMat& t = schur.matrixT();
    const CMat& u = schur.matrixU();
    const CMat f = u.adjoint() * q.cast<std::complex<double>>() * u;
    CMat y = CMat::Zero(n, n);
    // T y_j + sum_{k>=j} conj(T_jk) y_k = -f_j, solved from the last column.
    for (Index j = n - 1; j >= 0; --j) {
        CVec rhs = -f.col(j);
        for (Index k = j + 1; k < n; ++k) rhs -= std::conj(t(j, k)) * y.col(k);
        CMat m = t.triangularView<Eigen::Upper>();
        m.diagonal().array() += std::conj(t(j, j));
        for (Index i = 0; i < n; ++i)
            if (std::abs(m(i, i)) < 1e-14 * (1.0 + t.cwiseAbs().maxCoeff()))
                throw SingularSystem("lyapunov: A and -A^T share an eigenvalue");
        y.col(j) = m.triangularView<Eigen::Upper>().solve(rhs);
    }
    return symmetrize((u * y * u.adjoint()).real());
}

// Unobservable eigenvalue with Re >= -tol (PBH test), if any.
inline std::optional<std::complex<double>> undetectable_mode(const Mat& a, const Mat& c, double tol = 1e-9) {
    const Index n = a.rows();
    Eigen::EigenSolver<Mat> es(a, false);
    const double scale = std::max(1.0, a.norm() + c.norm());
    for (Index i = 0; i < n; ++i) {
        const std::complex<double> lam = es.eigenvalues()[i];
        if (lam.real() < -tol) continue;
        CMat pbh(n + c.rows(), n);
        pbh.topRows(n) = lam * CMat::Identity(n, n) - a.cast<std::complex<double>>();
        pbh.bottomRows(c.rows()) = c.cast<std::complex<double>>();
        Eigen::JacobiSVD<CMat> svd(pbh);
        if (svd.singularValues()[n - 1] <= 1e-8 * scale) return lam;
    }
    return std::nullopt;
}

namespace detail {

// Stabilizing X of the CARE via the matrix sign function of the Hamiltonian.
inline Mat care_sign(const Mat& a, const Mat& g, const Mat& q) {
    const Index n = a.rows();
    Mat h(2 * n, 2 * n);
    h << a, -g, -q, -a.transpose();
    Mat z = h;
    for (int it = 0; it < 100; ++it) {
        Eigen::PartialPivLU<Mat> lu(z);
        const Mat zi = lu.inverse();
        const double det_scale = std::pow(std::abs(lu.determinant()), -1.0 / static_cast<double>(2 * n));
        const double c = std::isfinite(det_scale) && det_scale > 0.0 ? det_scale : 1.0;
        const Mat zn = 0.5 * (c * z + zi / c);
        const double diff = (zn - z).norm();
        z = zn;
        if (diff <= 1e-12 * z.norm()) break;
    }
    const Mat w11 = z.topLeftCorner(n, n), w12 = z.topRightCorner(n, n);
    const Mat w21 = z.bottomLeftCorner(n, n), w22 = z.bottomRightCorner(n, n);
    Mat lhs(2 * n, n), rhs(2 * n, n);
    lhs << w12, w22 + Mat::Identity(n, n);
    rhs << w11 + Mat::Identity(n, n), w21;
    return symmetrize(lhs.colPivHouseholderQr().solve(-rhs));
}

}  // namespace detail

struct CareResult {
    Mat X;
    int iterations = 0;
    double residual = 0.0;
};

// Control-form CARE  A^T X + X A - X B R^-1 B^T X + Q = 0 by Newton-Kleinman.
inline CareResult care(const Mat& a, const Mat& b, const Mat& q, const Mat& r) {
    const Index n = a.rows();
    if (a.cols() != n || b.rows() != n || q.rows() != n || r.rows() != b.cols())
        throw InvalidInput("care: shape mismatch");
    Eigen::LLT<Mat> rllt(r);
    if (rllt.info() != Eigen::Success) throw InvalidInput("care: R must be positive definite");
    const Mat rinv_bt = rllt.solve(b.transpose());
    const Mat g = b * rinv_bt;

    // Bass seed: K0 = R^-1 B^T Z^-1 with (A + beta I) Z + Z (A + beta I)^T = 2 B R^-1 B^T.
    Mat k;
    {
        const double beta = std::max(0.0, spectral_abscissa(a)) + 1.0 + 0.1 * a.norm();
        const Mat ab = a + beta * Mat::Identity(n, n);
        bool ok = false;
        try {
            const Mat zz = lyapunov(-ab, 2.0 * g);
            Eigen::LLT<Mat> zl(zz);
            if (zl.info() == Eigen::Success) {
                k = rinv_bt * zl.solve(Mat::Identity(n, n));
                ok = k.allFinite() && spectral_abscissa(a - b * k) < 0.0;
            }
        } catch (const SingularSystem&) {
        }
        if (!ok) k = rinv_bt * detail::care_sign(a, g, q);
        if (!k.allFinite() || spectral_abscissa(a - b * k) >= 0.0)
            throw NumericalFailure("care: no stabilizing seed (pair not stabilizable?)");
    }
    CareResult res;
    Mat x_prev = Mat::Zero(n, n);
    double prev_change = std::numeric_limits<double>::infinity();
    for (int it = 1; it <= 100; ++it) {
        const Mat acl = a - b * k;
        const Mat x = lyapunov(acl.transpose(), q + k.transpose() * r * k);
        k = rinv_bt * x;
        res.iterations = it;
        const double change = (x - x_prev).norm();
        x_prev = x;
        const double scale = std::max(1.0, x.norm());
        if (change <= 1e-12 * scale) break;
        // Quadratic convergence has ended at rounding level.
        if (it > 3 && change >= prev_change && change <= 1e-7 * scale) break;
        prev_change = change;
        if (it == 100) throw NumericalFailure("care: Newton-Kleinman did not converge");
    }
    res.X = x_prev;
    res.residual = (a.transpose() * res.X + res.X * a - res.X * g * res.X + q).norm();
    return res;
}

// Filter-form gain L = S C^T R^-1 with A S + S A^T - S C^T R^-1 C S + Q = 0.
struct FilterGain {
    Mat L;
    Mat S;
};

inline FilterGain kalman_bucy_gain(const Mat& a, const Mat& c, const Mat& q, const Mat& r) {
    if (auto mode = undetectable_mode(a, c))
        throw SynthesisInfeasible("(A, C) not detectable: unobservable eigenvalue " + std::to_string(mode->real()) +
                                      (mode->imag() != 0.0 ? " + " + std::to_string(mode->imag()) + "i" : ""),
                                  0.0, 0.0);
    const auto res = care(a.transpose(), c.transpose(), q, r);
    return {res.X * c.transpose() * r.inverse(), res.X};
}

// Real monic polynomial coefficients (highest first) from roots.
inline std::vector<double> poly_from_roots(const std::vector<std::complex<double>>& roots) {
    std::vector<std::complex<double>> c{1.0};
    for (const auto& z : roots) {
        std::vector<std::complex<double>> next(c.size() + 1, 0.0);
        for (std::size_t i = 0; i < c.size(); ++i) {
            next[i] += c[i];
            next[i + 1] -= z * c[i];
        }
        c = std::move(next);
    }
    std::vector<double> out;
    for (const auto& v : c) {
        if (std::abs(v.imag()) > 1e-9 * (1.0 + std::abs(v.real())))
            throw InvalidInput("poles must come in conjugate pairs");
        out.push_back(v.real());
    }
    return out;
}

// Observer gain by Ackermann's formula, p = 1, small n.
inline Mat ackermann_observer(const Mat& a, const Mat& c, const std::vector<std::complex<double>>& poles) {
    const Index n = a.rows();
    if (c.rows() != 1 || c.cols() != n) throw InvalidInput("ackermann: needs a single output row");
    if (n > 4) throw InvalidInput("ackermann: limited to n <= 4");
    if (static_cast<Index>(poles.size()) != n) throw InvalidInput("ackermann: need n poles");
    const auto coef = poly_from_roots(poles);
    Mat obs(n, n);
    Mat ak = Mat::Identity(n, n);
    for (Index i = 0; i < n; ++i) {
        obs.row(i) = c * ak;
        ak = ak * a;
    }
    Eigen::FullPivLU<Mat> lu(obs);
    if (lu.rank() < n) throw InvalidInput("ackermann: pair not observable");
    Mat phi = Mat::Zero(n, n);
    Mat pw = Mat::Identity(n, n);
    for (Index i = n; i >= 0; --i) {
        phi += coef[static_cast<std::size_t>(i)] * pw;
        pw = pw * a;
    }
    return phi * lu.solve(Vec::Unit(n, n - 1));
}

}  // namespace pko
