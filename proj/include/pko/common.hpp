#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace pko {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

// ============================================================================
// Errors
// ============================================================================

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    IoError(const std::string& path, const std::string& what)
        : Error("I/O error on '" + path + "': " + what), path_(path) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

// Non-finite state during fixed-step integration.
class IntegrationBlowup : public Error {
public:
    explicit IntegrationBlowup(double t)
        : Error("integration blow-up at t=" + std::to_string(t)), time_(t) {}
    double time() const noexcept { return time_; }

private:
    double time_;
};

class ObserverDiverged : public Error {
public:
    ObserverDiverged(const std::string& observer, double t)
        : Error(observer + " observer diverged at t=" + std::to_string(t)), time_(t) {}
    double time() const noexcept { return time_; }

private:
    double time_;
};

class SingularSystem : public Error {
public:
    using Error::Error;
};

class NumericalFailure : public Error {
public:
    using Error::Error;
};

class SynthesisInfeasible : public Error {
public:
    SynthesisInfeasible(const std::string& what, double least_violation, double at_lambda)
        : Error(what), least_violation_(least_violation), at_lambda_(at_lambda) {}
    double least_violation() const noexcept { return least_violation_; }
    double at_lambda() const noexcept { return at_lambda_; }

private:
    double least_violation_;
    double at_lambda_;
};

class InvalidCertificate : public Error {
public:
    InvalidCertificate(const std::string& quantity, double value)
        : Error("invalid certificate: " + quantity + " = " + std::to_string(value)),
          quantity_(quantity), value_(value) {}
    const std::string& quantity() const noexcept { return quantity_; }
    double value() const noexcept { return value_; }

private:
    std::string quantity_;
    double value_;
};

// ============================================================================
// Small numeric helpers
// ============================================================================

inline bool all_finite(const Eigen::Ref<const Mat>& m) { return m.allFinite(); }

inline Mat symmetrize(const Mat& m) { return 0.5 * (m + m.transpose()); }

// Largest real part over the spectrum.
inline double spectral_abscissa(const Mat& a) {
    if (a.size() == 0) return -std::numeric_limits<double>::infinity();
    Eigen::EigenSolver<Mat> es(a, false);
    return es.eigenvalues().real().maxCoeff();
}

inline double sym_max_eig(const Mat& s) {
    Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(s), Eigen::EigenvaluesOnly);
    return es.eigenvalues().maxCoeff();
}

inline double sym_min_eig(const Mat& s) {
    Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(s), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

inline std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

inline Vec from_std(const std::vector<double>& v) {
    return Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace pko
