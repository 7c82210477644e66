#pragma once

#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pko/common.hpp"
#include "pko/rng.hpp"

namespace pko {

// ============================================================================
// Basis entries
// ============================================================================
// Every entry carries what it needs to evaluate its value and gradient in
// closed form. Coordinates are 0-based.

namespace basis {

struct Identity {
    int coord = 0;
    bool operator==(const Identity&) const = default;
};

// prod_k x_k^{exponents[k]}, total degree >= 1
struct Monomial {
    std::vector<int> exponents;
    bool operator==(const Monomial&) const = default;
};

struct Sine {
    int coord = 0;
    double freq = 1.0;
    bool operator==(const Sine&) const = default;
};

struct Cosine {
    int coord = 0;
    double freq = 1.0;
    bool operator==(const Cosine&) const = default;
};

// cos(w^T x + phase)
struct FourierFeature {
    std::vector<double> weights;
    double phase = 0.0;
    bool operator==(const FourierFeature&) const = default;
};

// tanh(scale * x_coord)
struct Tanh {
    int coord = 0;
    double scale = 1.0;
    bool operator==(const Tanh&) const = default;
};

// monomial(x) * trig(freq * x_coord), trig = cos if `cosine` else sin
struct TrigMonomial {
    std::vector<int> exponents;
    int coord = 0;
    double freq = 1.0;
    bool cosine = true;
    bool operator==(const TrigMonomial&) const = default;
};

}  // namespace basis

using BasisEntry = std::variant<basis::Identity, basis::Monomial, basis::Sine, basis::Cosine,
                                basis::FourierFeature, basis::Tanh, basis::TrigMonomial>;

namespace detail {

inline double monomial_value(const std::vector<int>& e, const Vec& x) {
    double v = 1.0;
    for (std::size_t k = 0; k < e.size(); ++k)
        if (e[k] != 0) v *= std::pow(x[static_cast<Index>(k)], e[k]);
    return v;
}

// d/dx_j of the monomial; integer powers keep x_j = 0 well defined.
inline double monomial_partial(const std::vector<int>& e, const Vec& x, std::size_t j) {
    if (e[j] == 0) return 0.0;
    double v = static_cast<double>(e[j]);
    for (std::size_t k = 0; k < e.size(); ++k) {
        const int pw = (k == j) ? e[k] - 1 : e[k];
        if (pw != 0) v *= std::pow(x[static_cast<Index>(k)], pw);
    }
    return v;
}

inline std::string kind_name(const BasisEntry& entry) {
    return std::visit(
        [](const auto& b) -> std::string {
            using T = std::decay_t<decltype(b)>;
            if constexpr (std::is_same_v<T, basis::Identity>) return "identity";
            else if constexpr (std::is_same_v<T, basis::Monomial>) return "monomial";
            else if constexpr (std::is_same_v<T, basis::Sine>) return "sine";
            else if constexpr (std::is_same_v<T, basis::Cosine>) return "cosine";
            else if constexpr (std::is_same_v<T, basis::FourierFeature>) return "fourier_feature";
            else if constexpr (std::is_same_v<T, basis::Tanh>) return "tanh";
            else return "trig_monomial";
        },
        entry);
}

}  // namespace detail

inline double evaluate(const BasisEntry& entry, const Vec& x) {
    return std::visit(
        [&](const auto& b) -> double {
            using T = std::decay_t<decltype(b)>;
            if constexpr (std::is_same_v<T, basis::Identity>) {
                return x[b.coord];
            } else if constexpr (std::is_same_v<T, basis::Monomial>) {
                return detail::monomial_value(b.exponents, x);
            } else if constexpr (std::is_same_v<T, basis::Sine>) {
                return std::sin(b.freq * x[b.coord]);
            } else if constexpr (std::is_same_v<T, basis::Cosine>) {
                return std::cos(b.freq * x[b.coord]);
            } else if constexpr (std::is_same_v<T, basis::FourierFeature>) {
                return std::cos(from_std(b.weights).dot(x) + b.phase);
            } else if constexpr (std::is_same_v<T, basis::Tanh>) {
                return std::tanh(b.scale * x[b.coord]);
            } else {
                const double a = b.freq * x[b.coord];
                return detail::monomial_value(b.exponents, x) * (b.cosine ? std::cos(a) : std::sin(a));
            }
        },
        entry);
}

inline Vec gradient(const BasisEntry& entry, const Vec& x) {
    const auto n = static_cast<std::size_t>(x.size());
    Vec g = Vec::Zero(x.size());
    std::visit(
        [&](const auto& b) {
            using T = std::decay_t<decltype(b)>;
            if constexpr (std::is_same_v<T, basis::Identity>) {
                g[b.coord] = 1.0;
            } else if constexpr (std::is_same_v<T, basis::Monomial>) {
                for (std::size_t j = 0; j < n; ++j)
                    g[static_cast<Index>(j)] = detail::monomial_partial(b.exponents, x, j);
            } else if constexpr (std::is_same_v<T, basis::Sine>) {
                g[b.coord] = b.freq * std::cos(b.freq * x[b.coord]);
            } else if constexpr (std::is_same_v<T, basis::Cosine>) {
                g[b.coord] = -b.freq * std::sin(b.freq * x[b.coord]);
            } else if constexpr (std::is_same_v<T, basis::FourierFeature>) {
                const Vec w = from_std(b.weights);
                g = -std::sin(w.dot(x) + b.phase) * w;
            } else if constexpr (std::is_same_v<T, basis::Tanh>) {
                const double t = std::tanh(b.scale * x[b.coord]);
                g[b.coord] = b.scale * (1.0 - t * t);
            } else {
                const double a = b.freq * x[b.coord];
                const double trig = b.cosine ? std::cos(a) : std::sin(a);
                const double dtrig = b.cosine ? -b.freq * std::sin(a) : b.freq * std::cos(a);
                const double mono = detail::monomial_value(b.exponents, x);
                for (std::size_t j = 0; j < n; ++j)
                    g[static_cast<Index>(j)] = detail::monomial_partial(b.exponents, x, j) * trig;
                g[b.coord] += mono * dtrig;
            }
        },
        entry);
    return g;
}

// ============================================================================
// Dictionary specification (JSON-facing) and the built dictionary
// ============================================================================

struct DictionarySpec {
    std::string preset;              // "vdp15", "arm20", "exact3" or empty for explicit
    int state_dim = 0;               // explicit only
    std::vector<BasisEntry> entries; // explicit only
    // r == n is normally rejected; a handful of identification tests need it.
    bool allow_square = false;
};

class ObservableDictionary {
public:
    int state_dim() const noexcept { return state_dim_; }
    int total_dim() const noexcept { return static_cast<int>(entries_.size()); }
    const std::vector<BasisEntry>& entries() const noexcept { return entries_; }
    const DictionarySpec& spec() const noexcept { return spec_; }

private:
    friend ObservableDictionary build_dictionary(const DictionarySpec& spec);
    int state_dim_ = 0;
    std::vector<BasisEntry> entries_;
    DictionarySpec spec_;
};

namespace detail {

inline void validate_entry(const BasisEntry& entry, int n) {
    auto check_coord = [n](int c) {
        if (c < 0 || c >= n) throw InvalidInput("basis coordinate " + std::to_string(c) + " out of range");
    };
    auto check_exponents = [n](const std::vector<int>& e, bool allow_zero_degree) {
        if (static_cast<int>(e.size()) != n) throw InvalidInput("monomial exponent length must equal state_dim");
        int deg = 0;
        for (int p : e) {
            if (p < 0) throw InvalidInput("negative monomial exponent");
            deg += p;
        }
        if (!allow_zero_degree && deg < 1) throw InvalidInput("monomial total degree must be >= 1");
    };
    auto check_finite = [](double v, const char* what) {
        if (!std::isfinite(v)) throw InvalidInput(std::string("non-finite ") + what);
    };
    std::visit(
        [&](const auto& b) {
            using T = std::decay_t<decltype(b)>;
            if constexpr (std::is_same_v<T, basis::Identity>) {
                check_coord(b.coord);
            } else if constexpr (std::is_same_v<T, basis::Monomial>) {
                check_exponents(b.exponents, false);
            } else if constexpr (std::is_same_v<T, basis::Sine> || std::is_same_v<T, basis::Cosine>) {
                check_coord(b.coord);
                check_finite(b.freq, "frequency");
            } else if constexpr (std::is_same_v<T, basis::FourierFeature>) {
                if (static_cast<int>(b.weights.size()) != n) throw InvalidInput("fourier weight length must equal state_dim");
                for (double w : b.weights) check_finite(w, "fourier weight");
                check_finite(b.phase, "fourier phase");
            } else if constexpr (std::is_same_v<T, basis::Tanh>) {
                check_coord(b.coord);
                check_finite(b.scale, "tanh scale");
            } else {
                check_exponents(b.exponents, true);
                check_coord(b.coord);
                check_finite(b.freq, "frequency");
            }
        },
        entry);
}

inline std::vector<BasisEntry> identity_prefix(int n) {
    std::vector<BasisEntry> out;
    for (int i = 0; i < n; ++i) out.emplace_back(basis::Identity{i});
    return out;
}

// sin(w^T x) written as a Fourier feature; odd in x.
inline BasisEntry odd_feature(std::vector<double> w) {
    return basis::FourierFeature{std::move(w), -std::numbers::pi / 2.0};
}

// Van der Pol: raw state, the four cubic monomials and odd trigonometric terms.
inline std::vector<BasisEntry> preset_vdp15() {
    auto e = identity_prefix(2);
    e.emplace_back(basis::Monomial{{3, 0}});
    e.emplace_back(basis::Monomial{{2, 1}});
    e.emplace_back(basis::Monomial{{1, 2}});
    e.emplace_back(basis::Monomial{{0, 3}});
    e.emplace_back(basis::Sine{0, 1.0});
    e.emplace_back(basis::Sine{1, 1.0});
    e.emplace_back(basis::Sine{0, 2.0});
    e.emplace_back(basis::Sine{1, 2.0});
    e.emplace_back(odd_feature({1.0, 1.0}));
    e.emplace_back(odd_feature({1.0, -1.0}));
    e.emplace_back(basis::Sine{0, 3.0});
    e.emplace_back(basis::Sine{1, 3.0});
    e.emplace_back(odd_feature({2.0, 1.0}));
    return e;
}

constexpr std::uint64_t kArmFeatureSeed = 20;

// Robotic arm: gravity, smoothed Coulomb friction, cubic terms and 9 seeded
// odd Fourier features sin(w^T x) with |w| >= 0.5.
inline std::vector<BasisEntry> preset_arm20() {
    auto e = identity_prefix(2);
    e.emplace_back(basis::Sine{0, 1.0});
    e.emplace_back(basis::Sine{0, 2.0});
    e.emplace_back(basis::TrigMonomial{{0, 1}, 0, 1.0, true});
    e.emplace_back(basis::Tanh{1, 5.0});
    e.emplace_back(basis::Monomial{{0, 3}});
    e.emplace_back(basis::Monomial{{2, 1}});
    e.emplace_back(basis::Monomial{{1, 2}});
    e.emplace_back(basis::Monomial{{3, 0}});
    e.emplace_back(basis::Sine{1, 1.0});
    rng::Stream s(kArmFeatureSeed, 0);
    while (e.size() < 20) {
        std::vector<double> w{0.7 * s.normal(), 0.35 * s.normal()};
        if (std::hypot(w[0], w[1]) < 0.5) continue;
        e.push_back(odd_feature(std::move(w)));
    }
    return e;
}

// z = (x1, x2, x1^2): exact finite lifting of x1' = a x1, x2' = b (x2 - x1^2).
inline std::vector<BasisEntry> preset_exact3() {
    auto e = identity_prefix(2);
    e.emplace_back(basis::Monomial{{2, 0}});
    return e;
}

}  // namespace detail

inline ObservableDictionary build_dictionary(const DictionarySpec& spec) {
    ObservableDictionary d;
    d.spec_ = spec;
    if (!spec.preset.empty()) {
        if (spec.preset == "vdp15") d.entries_ = detail::preset_vdp15();
        else if (spec.preset == "arm20") d.entries_ = detail::preset_arm20();
        else if (spec.preset == "exact3") d.entries_ = detail::preset_exact3();
        else throw InvalidInput("unknown dictionary preset '" + spec.preset + "'");
        d.state_dim_ = 2;
        d.spec_.state_dim = 2;
        d.spec_.entries.clear();
    } else {
        d.state_dim_ = spec.state_dim;
        d.entries_ = spec.entries;
    }
    const int n = d.state_dim_;
    if (n < 1) throw InvalidInput("state_dim must be >= 1");
    const int r = d.total_dim();
    if (r < n || (r == n && !spec.allow_square))
        throw InvalidInput("dictionary needs r > n (r=" + std::to_string(r) + ", n=" + std::to_string(n) + ")");
    for (int i = 0; i < n; ++i) {
        const auto* id = std::get_if<basis::Identity>(&d.entries_[static_cast<std::size_t>(i)]);
        if (id == nullptr || id->coord != i)
            throw InvalidInput("entry " + std::to_string(i) + " must be identity(" + std::to_string(i) + ")");
    }
    for (std::size_t i = 0; i < d.entries_.size(); ++i) {
        detail::validate_entry(d.entries_[i], n);
        for (std::size_t j = 0; j < i; ++j)
            if (d.entries_[i] == d.entries_[j])
                throw InvalidInput("duplicate dictionary entry at " + std::to_string(i));
    }
    return d;
}

inline void require_state(const ObservableDictionary& dict, const Vec& x) {
    if (x.size() != dict.state_dim()) throw InvalidInput("state length does not match state_dim");
    if (!x.allFinite()) throw InvalidInput("non-finite state passed to lift");
}

inline Vec lift(const ObservableDictionary& dict, const Vec& x) {
    require_state(dict, x);
    Vec z(dict.total_dim());
    for (int i = 0; i < dict.total_dim(); ++i)
        z[i] = evaluate(dict.entries()[static_cast<std::size_t>(i)], x);
    return z;
}

// r x n Jacobian of the lifting map.
inline Mat lift_jacobian(const ObservableDictionary& dict, const Vec& x) {
    require_state(dict, x);
    Mat j(dict.total_dim(), dict.state_dim());
    for (int i = 0; i < dict.total_dim(); ++i)
        j.row(i) = gradient(dict.entries()[static_cast<std::size_t>(i)], x).transpose();
    return j;
}

// 0/1 selector onto the identity entries of the measured coordinates.
inline Mat output_matrix(const ObservableDictionary& dict, const std::vector<int>& measured) {
    Mat c = Mat::Zero(static_cast<Index>(measured.size()), dict.total_dim());
    for (std::size_t k = 0; k < measured.size(); ++k) {
        const int idx = measured[k];
        if (idx < 0 || idx >= dict.state_dim())
            throw InvalidInput("measured index " + std::to_string(idx) + " out of range");
        if (c.col(idx).any()) throw InvalidInput("measured index " + std::to_string(idx) + " listed twice");
        c(static_cast<Index>(k), idx) = 1.0;
    }
    return c;
}

// ============================================================================
// JSON
// ============================================================================

inline nlohmann::json entry_to_json(const BasisEntry& entry) {
    using nlohmann::json;
    json j;
    j["kind"] = detail::kind_name(entry);
    std::visit(
        [&](const auto& b) {
            using T = std::decay_t<decltype(b)>;
            if constexpr (std::is_same_v<T, basis::Identity>) {
                j["coord"] = b.coord;
            } else if constexpr (std::is_same_v<T, basis::Monomial>) {
                j["exponents"] = b.exponents;
            } else if constexpr (std::is_same_v<T, basis::Sine> || std::is_same_v<T, basis::Cosine>) {
                j["coord"] = b.coord;
                j["freq"] = b.freq;
            } else if constexpr (std::is_same_v<T, basis::FourierFeature>) {
                j["weights"] = b.weights;
                j["phase"] = b.phase;
            } else if constexpr (std::is_same_v<T, basis::Tanh>) {
                j["coord"] = b.coord;
                j["scale"] = b.scale;
            } else {
                j["exponents"] = b.exponents;
                j["coord"] = b.coord;
                j["freq"] = b.freq;
                j["trig"] = b.cosine ? "cos" : "sin";
            }
        },
        entry);
    return j;
}

inline BasisEntry entry_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "identity") return basis::Identity{j.at("coord").get<int>()};
    if (kind == "monomial") return basis::Monomial{j.at("exponents").get<std::vector<int>>()};
    if (kind == "sine") return basis::Sine{j.at("coord").get<int>(), j.value("freq", 1.0)};
    if (kind == "cosine") return basis::Cosine{j.at("coord").get<int>(), j.value("freq", 1.0)};
    if (kind == "fourier_feature")
        return basis::FourierFeature{j.at("weights").get<std::vector<double>>(), j.value("phase", 0.0)};
    if (kind == "tanh") return basis::Tanh{j.at("coord").get<int>(), j.value("scale", 1.0)};
    if (kind == "trig_monomial") {
        const std::string trig = j.value("trig", std::string("cos"));
        if (trig != "cos" && trig != "sin") throw InvalidInput("trig must be 'cos' or 'sin'");
        return basis::TrigMonomial{j.at("exponents").get<std::vector<int>>(), j.at("coord").get<int>(),
                                   j.value("freq", 1.0), trig == "cos"};
    }
    throw InvalidInput("unknown basis kind '" + kind + "'");
}

inline nlohmann::json spec_to_json(const DictionarySpec& spec) {
    nlohmann::json j;
    if (!spec.preset.empty()) {
        j["preset"] = spec.preset;
        return j;
    }
    j["state_dim"] = spec.state_dim;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : spec.entries) j["entries"].push_back(entry_to_json(e));
    if (spec.allow_square) j["allow_square"] = true;
    return j;
}

inline DictionarySpec spec_from_json(const nlohmann::json& j) {
    DictionarySpec s;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        if (k != "preset" && k != "state_dim" && k != "entries" && k != "allow_square")
            throw ConfigError("unknown dictionary key '" + k + "'");
    }
    if (j.contains("preset")) {
        s.preset = j.at("preset").get<std::string>();
        return s;
    }
    s.state_dim = j.at("state_dim").get<int>();
    for (const auto& e : j.at("entries")) s.entries.push_back(entry_from_json(e));
    s.allow_square = j.value("allow_square", false);
    return s;
}

// FNV-1a over the canonical JSON of the fully expanded entry list.
inline std::string dictionary_hash(const ObservableDictionary& dict) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : dict.entries()) j.push_back(entry_to_json(e));
    const std::string s = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace pko
