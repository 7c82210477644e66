#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pko/common.hpp"
#include "pko/edmd.hpp"

namespace pko {

// ============================================================================
// Sector nonlinearities
// ============================================================================

enum class SectorKind { tanh_scaled, saturation, deadzone };

inline std::string to_string(SectorKind k) {
    switch (k) {
        case SectorKind::tanh_scaled: return "tanh_scaled";
        case SectorKind::saturation: return "saturation";
        case SectorKind::deadzone: return "deadzone";
    }
    return "?";
}

inline SectorKind sector_kind_from_string(const std::string& s) {
    if (s == "tanh_scaled") return SectorKind::tanh_scaled;
    if (s == "saturation") return SectorKind::saturation;
    if (s == "deadzone") return SectorKind::deadzone;
    throw InvalidInput("unknown sector kind '" + s + "'");
}

struct SectorNonlinearity {
    SectorKind kind = SectorKind::tanh_scaled;
    Vec kappa = Vec::Ones(1);
    double level = 1.0;  // saturation limit or deadzone half-width

    int channel_count() const noexcept { return static_cast<int>(kappa.size()); }
};

inline SectorNonlinearity make_sector(SectorKind kind, Vec kappa, double level = 1.0) {
    if (kappa.size() == 0) throw InvalidInput("sector nonlinearity needs at least one channel");
    if ((kappa.array() <= 0.0).any() || !kappa.allFinite()) throw InvalidInput("kappa must be finite and > 0");
    if (!(level > 0.0) || !std::isfinite(level)) throw InvalidInput("sector level must be finite and > 0");
    return {kind, std::move(kappa), level};
}

inline double sector_channel(const SectorNonlinearity& sigma, int j, double s) {
    const double k = sigma.kappa[j];
    switch (sigma.kind) {
        case SectorKind::tanh_scaled: return k * std::tanh(s);
        case SectorKind::saturation: return k * std::clamp(s, -sigma.level, sigma.level);
        case SectorKind::deadzone: {
            const double a = std::abs(s) - sigma.level;
            return a > 0.0 ? k * std::copysign(a, s) : 0.0;
        }
    }
    return 0.0;
}

inline Vec sector_eval(const SectorNonlinearity& sigma, const Vec& s) {
    if (s.size() != sigma.channel_count()) throw InvalidInput("sector_eval: wrong channel count");
    Vec out(s.size());
    for (Index j = 0; j < s.size(); ++j) out[j] = sector_channel(sigma, static_cast<int>(j), s[j]);
    return out;
}

struct SectorGrid {
    double half_width = 10.0;
    int points = 10001;
};

struct SectorReport {
    bool pass = true;
    double min_margin = std::numeric_limits<double>::infinity();
    double witness = 0.0;  // s at the minimal margin
    int channel = 0;
};

// Checks phi(s) (s - phi(s)/kappa) >= 0 on a uniform grid, per channel.
inline SectorReport sector_check(const std::function<double(int, double)>& phi, const Vec& kappa,
                                 const SectorGrid& grid = {}) {
    if (grid.half_width < 10.0 || grid.points < 10000) throw InvalidInput("sector grid must cover [-10,10] with >= 1e4 points");
    SectorReport rep;
    for (int j = 0; j < kappa.size(); ++j) {
        if (!(kappa[j] > 0.0)) throw InvalidInput("kappa must be > 0");
        for (int i = 0; i < grid.points; ++i) {
            const double s = -grid.half_width + 2.0 * grid.half_width * i / (grid.points - 1);
            const double f = phi(j, s);
            const double margin = f * (s - f / kappa[j]);
            if (margin < rep.min_margin) {
                rep.min_margin = margin;
                rep.witness = s;
                rep.channel = j;
            }
            // Rounding slack relative to the size of the two products.
            const double tol = 1e-12 * (std::abs(f * s) + f * f / kappa[j]);
            if (margin < -tol || !std::isfinite(f)) rep.pass = false;
        }
    }
    return rep;
}

inline SectorReport sector_check(const SectorNonlinearity& sigma, const SectorGrid& grid = {}) {
    return sector_check([&](int j, double s) { return sector_channel(sigma, j, s); }, sigma.kappa, grid);
}

// ============================================================================
// Residual split Delta = Gamma(e) + d, Gamma_j(e) = g_j tanh(e_j)
// ============================================================================

struct ResidualSplit {
    Vec gains;         // g_j in [0, kappa_budget_j]
    Vec kappa_budget;  // sector slope allowed for each Gamma_j
    double d_bound = 0.0;

    double gamma_channel(int j, double e) const { return gains[j] * std::tanh(e); }
    Vec gamma(const Vec& e) const { return gains.cwiseProduct(e.array().tanh().matrix()); }
};

struct SplitSample {
    Vec e;      // error proxy
    Vec delta;  // residual
};

namespace detail {

inline double split_cost(const std::vector<SplitSample>& samples, Index j, double g) {
    double worst = 0.0;
    for (const auto& s : samples) worst = std::max(worst, std::abs(s.delta[j] - g * std::tanh(s.e[j])));
    return worst;
}

}  // namespace detail

// Golden-section search per coordinate (the cost is convex in g_j); the
// trivial split Gamma = 0 is kept whenever the fitted one is not better.
inline ResidualSplit split_residual(const std::vector<SplitSample>& samples, const Vec& kappa_budget) {
    if (samples.empty()) throw InvalidInput("split_residual: empty samples");
    const Index r = kappa_budget.size();
    for (const auto& s : samples)
        if (s.e.size() != r || s.delta.size() != r) throw InvalidInput("split_residual: sample dimension mismatch");
    if ((kappa_budget.array() < 0.0).any()) throw InvalidInput("kappa budget must be >= 0");

    ResidualSplit split;
    split.kappa_budget = kappa_budget;
    split.gains = Vec::Zero(r);
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    for (Index j = 0; j < r; ++j) {
        const double hi_bound = kappa_budget[j];
        if (hi_bound == 0.0) continue;
        double a = 0.0, b = hi_bound;
        double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
        double f1 = detail::split_cost(samples, j, x1), f2 = detail::split_cost(samples, j, x2);
        for (int it = 0; it < 100 && b - a > 1e-12 * (1.0 + hi_bound); ++it) {
            if (f1 <= f2) {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - phi * (b - a);
                f1 = detail::split_cost(samples, j, x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + phi * (b - a);
                f2 = detail::split_cost(samples, j, x2);
            }
        }
        double best_g = 0.0, best_f = detail::split_cost(samples, j, 0.0);
        for (double g : {x1, x2, 0.5 * (a + b), hi_bound}) {
            const double f = detail::split_cost(samples, j, g);
            if (f < best_f) {
                best_f = f;
                best_g = g;
            }
        }
        split.gains[j] = best_g;
    }
    double fitted = 0.0, trivial = 0.0;
    for (const auto& s : samples) {
        fitted = std::max(fitted, (s.delta - split.gamma(s.e)).norm());
        trivial = std::max(trivial, s.delta.norm());
    }
    if (fitted > trivial) {
        split.gains.setZero();
        fitted = trivial;
    }
    split.d_bound = fitted;
    return split;
}

// ============================================================================
// Embedded error model: edot = A0 e - sum_i b_i phi_i(c_i^T e) + dtilde
// ============================================================================

struct PersidskiiChannel {
    enum class Source { correction, residual } source;
    int index;  // correction channel i or lifted coordinate j
    Vec b;
    Vec c;
    double kappa;
};

struct PersidskiiErrorModel {
    Mat A0;
    Mat K;
    Mat C_o;
    SectorNonlinearity sigma;
    ResidualSplit split;
    double disturbance_bound = 0.0;
    std::vector<PersidskiiChannel> channels;

    double phi(const PersidskiiChannel& ch, double s) const {
        return ch.source == PersidskiiChannel::Source::correction ? sector_channel(sigma, ch.index, s)
                                                                  : split.gamma_channel(ch.index, s);
    }

    // Channel-sum form of the error dynamics.
    Vec rhs(const Vec& e, const Vec& dtilde) const {
        Vec out = A0 * e + dtilde;
        for (const auto& ch : channels) out -= ch.b * phi(ch, ch.c.dot(e));
        return out;
    }

    // Direct form A e - K sigma(C_o e) - Gamma(e) + dtilde.
    Vec rhs_direct(const Vec& e, const Vec& dtilde) const {
        Vec out = A0 * e + dtilde;
        if (K.size() > 0) out -= K * sector_eval(sigma, C_o * e);
        if (split.gains.size() > 0) out -= split.gamma(e);
        return out;
    }
};

// noise_std feeds the composite bound through 3 sigma_v.
inline PersidskiiErrorModel embed_error_dynamics(const KoopmanModel& model, const Mat& K,
                                                 const SectorNonlinearity& sigma, const ResidualSplit& split,
                                                 double noise_std = 0.0) {
    const int r = model.r(), p = model.p();
    if (K.rows() != r || K.cols() != p) throw InvalidInput("embed: K must be r x p");
    if (sigma.channel_count() != p) throw InvalidInput("embed: sigma channel count must equal p");
    if (split.gains.size() != r || split.kappa_budget.size() != r) throw InvalidInput("embed: split must have r coordinates");
    if (noise_std < 0.0) throw InvalidInput("noise_std must be >= 0");
    if (!sector_check(sigma).pass) throw InvalidInput("embed: sigma fails the sector check");
    for (int j = 0; j < r; ++j) {
        if (split.gains[j] == 0.0) continue;
        if (split.gains[j] > split.kappa_budget[j] * (1.0 + 1e-12))
            throw InvalidInput("embed: Gamma slope exceeds its sector budget");
        Vec kj(1);
        kj[0] = split.kappa_budget[j];
        const auto rep = sector_check([&](int, double s) { return split.gamma_channel(j, s); }, kj);
        if (!rep.pass) throw InvalidInput("embed: Gamma channel fails the sector check");
    }

    PersidskiiErrorModel em;
    em.A0 = model.A;
    em.K = K;
    em.C_o = model.C_o;
    em.sigma = sigma;
    em.split = split;
    for (int i = 0; i < p; ++i) {
        if (K.col(i).isZero(0.0)) continue;
        em.channels.push_back({PersidskiiChannel::Source::correction, i, K.col(i), model.C_o.row(i).transpose(),
                               sigma.kappa[i]});
    }
    for (int j = 0; j < r; ++j) {
        if (split.gains[j] == 0.0) continue;
        em.channels.push_back({PersidskiiChannel::Source::residual, j, Vec::Unit(r, j), Vec::Unit(r, j),
                               split.kappa_budget[j]});
    }
    const double kappa_max = sigma.kappa.maxCoeff();
    const double k_norm = K.size() > 0 ? K.operatorNorm() : 0.0;
    em.disturbance_bound = split.d_bound + k_norm * kappa_max * 3.0 * noise_std;
    return em;
}

inline nlohmann::json error_model_to_json(const PersidskiiErrorModel& em) {
    nlohmann::json j;
    j["sigma_kind"] = to_string(em.sigma.kind);
    j["sigma_kappa"] = to_std(em.sigma.kappa);
    j["sigma_level"] = em.sigma.level;
    j["split_gains"] = to_std(em.split.gains);
    j["split_kappa_budget"] = to_std(em.split.kappa_budget);
    j["d_bound"] = em.split.d_bound;
    j["disturbance_bound"] = em.disturbance_bound;
    j["channels"] = static_cast<int>(em.channels.size());
    return j;
}

}  // namespace pko
