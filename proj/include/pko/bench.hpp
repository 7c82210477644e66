#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pko/common.hpp"
#include "pko/edmd.hpp"
#include "pko/lifting.hpp"
#include "pko/observers.hpp"
#include "pko/persidskii.hpp"
#include "pko/rng.hpp"
#include "pko/synthesis.hpp"
#include "pko/systems.hpp"

namespace pko {

inline constexpr int kSchemaVersion = 1;

// ============================================================================
// Configuration
// ============================================================================

struct TrainingSpec {
    int trajectories = 200;
    double duration = 10.0;
    std::vector<double> x0_box{2.5, 2.5};  // x0_i ~ U[-box_i, box_i]
    double prbs_amplitude = 1.0;
    int prbs_hold = 10;
    double train_fraction = 0.8;
    std::optional<double> ridge;
    double residual_weight = 1.0;
    int residual_grid = 100;
};

struct EvaluationSpec {
    std::string input = "zero";  // zero | prbs
    double prbs_amplitude = 1.0;
    int prbs_hold = 10;
    std::vector<double> x0_box{2.5, 2.5};
    double init_offset = 0.5;
};

struct MismatchSpec {
    double mu_factor = 1.15;        // truth mu = factor * nominal
    double friction_spread = 0.3;  // truth f_c, f_v scaled by U[1 - s, 1 + s]
};

struct SynthesisSpec {
    double lambda_lo = 1e-3;
    double lambda_hi = 1e3;
    int lambda_points = 25;
    std::optional<double> margin;
    std::optional<double> gain_bound;  // cap on |K_w| entries
    std::string coordinates = "auto";
    std::string kappa_rule = "fixed";  // fixed | arm_friction
    std::vector<double> kappa{1.0};
    std::string sigma_kind = "tanh_scaled";
    double sigma_level = 1.0;
    double split_kappa_budget = 1.0;
    int pilot_traces = 5;
    // Design at rho = 0 when the measured residual slope is not certifiable.
    bool nominal_fallback = true;
};

struct ObserverSpec {
    std::vector<double> ekf_q_grid{1e-4, 1e-3, 1e-2};
    int ekf_tuning_trials = 5;
    double ekf_p0 = 0.25;
    std::string linkoop_method = "riccati";
    double linkoop_q = 1.0;
};

struct SweepSpec {
    std::vector<double> epsilons{0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5};
    int trials = 50;
    int modes = 3;
    double freq_lo = 0.2;  // rad/s
    double freq_hi = 2.0;
};

struct ExperimentConfig {
    int schema_version = kSchemaVersion;
    std::string benchmark = "vdp";
    std::uint64_t seed = 1;
    int trials = 100;
    double duration = 10.0;
    double dt = 0.02;
    double burn_in = 1.0;
    double noise_variance = 0.01;
    VdpParams vdp;
    ArmParams arm;
    MismatchSpec mismatch;
    DictionarySpec dictionary;
    std::vector<int> measured{0};
    TrainingSpec training;
    EvaluationSpec evaluation;
    SynthesisSpec synthesis;
    ObserverSpec observers;
    SweepSpec sweep;
    int threads = 0;  // 0: hardware concurrency
    int keep_traces = 3;
    bool timing = false;  // wall-clock fields make outputs run-dependent
};

inline ExperimentConfig default_config(const std::string& benchmark) {
    ExperimentConfig c;
    c.benchmark = benchmark;
    if (benchmark == "vdp") {
        c.dictionary.preset = "vdp15";
    } else if (benchmark == "arm") {
        c.dictionary.preset = "arm20";
        c.noise_variance = 0.04;
        c.training.x0_box = {1.5, 1.5};
        c.training.prbs_amplitude = 2.0;
        c.evaluation.input = "prbs";
        c.evaluation.prbs_amplitude = 2.0;
        c.evaluation.x0_box = {1.5, 1.5};
        c.synthesis.kappa_rule = "arm_friction";
    } else {
        throw ConfigError("benchmark must be 'vdp' or 'arm', got '" + benchmark + "'");
    }
    return c;
}

inline void validate(const ExperimentConfig& c) {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (c.schema_version != kSchemaVersion) fail("unsupported schema_version " + std::to_string(c.schema_version));
    if (c.benchmark != "vdp" && c.benchmark != "arm") fail("benchmark must be 'vdp' or 'arm'");
    if (c.trials < 1) fail("trials must be >= 1");
    if (!(c.dt > 0.0) || !(c.duration > 0.0)) fail("duration and dt must be > 0");
    try {
        step_count(c.duration, c.dt);
        step_count(c.training.duration, c.dt);
    } catch (const InvalidInput& e) {
        fail(e.what());
    }
    if (c.burn_in < 0.0 || c.burn_in >= c.duration) fail("burn_in must be in [0, duration)");
    if (c.noise_variance < 0.0) fail("noise_variance must be >= 0");
    if (c.mismatch.mu_factor < 0.5 || c.mismatch.mu_factor > 1.5) fail("mismatch.mu_factor must be in [0.5, 1.5]");
    if (c.mismatch.friction_spread < 0.0 || c.mismatch.friction_spread > 0.9)
        fail("mismatch.friction_spread must be in [0, 0.9]");
    if (c.training.trajectories < 2) fail("training.trajectories must be >= 2");
    if (c.training.x0_box.size() != 2 || c.evaluation.x0_box.size() != 2) fail("x0_box needs 2 entries");
    if (c.training.prbs_hold < 1 || c.evaluation.prbs_hold < 1) fail("prbs_hold must be >= 1");
    if (c.evaluation.input != "zero" && c.evaluation.input != "prbs") fail("evaluation.input must be zero or prbs");
    if (c.evaluation.init_offset < 0.0) fail("evaluation.init_offset must be >= 0");
    if (!(c.synthesis.lambda_lo > 0.0) || !(c.synthesis.lambda_hi > c.synthesis.lambda_lo) || c.synthesis.lambda_points < 2)
        fail("synthesis.lambda_grid must be [lo, hi, n] with 0 < lo < hi and n >= 2");
    if (c.synthesis.margin && !(*c.synthesis.margin > 0.0)) fail("synthesis.margin must be > 0");
    if (c.synthesis.gain_bound && !(*c.synthesis.gain_bound > 0.0)) fail("synthesis.gain_bound must be > 0");
    if (c.synthesis.kappa_rule != "fixed" && c.synthesis.kappa_rule != "arm_friction")
        fail("synthesis.kappa must be a list or \"arm_friction\"");
    if (c.synthesis.kappa_rule == "arm_friction" && c.benchmark != "arm") fail("arm_friction kappa needs the arm benchmark");
    if (c.synthesis.kappa_rule == "fixed" && c.synthesis.kappa.size() != c.measured.size())
        fail("synthesis.kappa needs one entry per measured output");
    if (c.observers.ekf_q_grid.empty()) fail("observers.ekf_q_grid must not be empty");
    for (double q : c.observers.ekf_q_grid)
        if (!(q >= 0.0)) fail("ekf q values must be >= 0");
    if (c.sweep.trials < 1 || c.sweep.modes < 1) fail("sweep.trials and sweep.modes must be >= 1");
    for (std::size_t i = 0; i < c.sweep.epsilons.size(); ++i)
        if (c.sweep.epsilons[i] < 0.0 || (i > 0 && c.sweep.epsilons[i] <= c.sweep.epsilons[i - 1]))
            fail("sweep.epsilons must be non-negative and increasing");
    if (c.keep_traces < 0 || c.threads < 0) fail("keep_traces and threads must be >= 0");
}

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : keys) known = known || it.key() == k;
        if (!known) throw ConfigError("unknown config key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

template <typename T>
void read_opt(const json& j, const char* key, std::optional<T>& out) {
    if (j.contains(key)) out = j.at(key).is_null() ? std::nullopt : std::optional<T>(j.at(key).get<T>());
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::read;
    try {
        detail::reject_unknown(j,
                               {"schema_version", "benchmark", "seed", "trials", "duration", "dt", "burn_in",
                                "noise_variance", "plant", "mismatch", "dictionary", "measured", "training",
                                "evaluation", "synthesis", "observers", "sweep", "threads", "keep_traces", "timing"},
                               "");
        if (!j.contains("schema_version")) throw ConfigError("config needs a schema_version field");
        if (!j.contains("benchmark")) throw ConfigError("config needs a benchmark field");
        ExperimentConfig c = default_config(j.at("benchmark").get<std::string>());
        read(j, "schema_version", c.schema_version);
        read(j, "seed", c.seed);
        read(j, "trials", c.trials);
        read(j, "duration", c.duration);
        read(j, "dt", c.dt);
        read(j, "burn_in", c.burn_in);
        read(j, "noise_variance", c.noise_variance);
        read(j, "measured", c.measured);
        read(j, "threads", c.threads);
        read(j, "keep_traces", c.keep_traces);
        read(j, "timing", c.timing);
        if (j.contains("plant")) {
            const auto& p = j.at("plant");
            if (c.benchmark == "vdp") {
                detail::reject_unknown(p, {"mu"}, "plant");
                read(p, "mu", c.vdp.mu);
            } else {
                detail::reject_unknown(p, {"J", "m", "l", "g", "b_f", "f_c", "f_v", "sgn_smoothing"}, "plant");
                read(p, "J", c.arm.J);
                read(p, "m", c.arm.m);
                read(p, "l", c.arm.l);
                read(p, "g", c.arm.g);
                read(p, "b_f", c.arm.b_f);
                read(p, "f_c", c.arm.f_c);
                read(p, "f_v", c.arm.f_v);
                read(p, "sgn_smoothing", c.arm.sgn_smoothing);
            }
        }
        if (j.contains("mismatch")) {
            const auto& m = j.at("mismatch");
            detail::reject_unknown(m, {"mu_factor", "friction_spread"}, "mismatch");
            read(m, "mu_factor", c.mismatch.mu_factor);
            read(m, "friction_spread", c.mismatch.friction_spread);
        }
        if (j.contains("dictionary")) c.dictionary = spec_from_json(j.at("dictionary"));
        if (j.contains("training")) {
            const auto& t = j.at("training");
            detail::reject_unknown(t,
                                   {"trajectories", "duration", "x0_box", "prbs_amplitude", "prbs_hold",
                                    "train_fraction", "ridge", "residual_weight", "residual_grid"},
                                   "training");
            read(t, "trajectories", c.training.trajectories);
            read(t, "duration", c.training.duration);
            read(t, "x0_box", c.training.x0_box);
            read(t, "prbs_amplitude", c.training.prbs_amplitude);
            read(t, "prbs_hold", c.training.prbs_hold);
            read(t, "train_fraction", c.training.train_fraction);
            detail::read_opt(t, "ridge", c.training.ridge);
            read(t, "residual_weight", c.training.residual_weight);
            read(t, "residual_grid", c.training.residual_grid);
        }
        if (j.contains("evaluation")) {
            const auto& e = j.at("evaluation");
            detail::reject_unknown(e, {"input", "prbs_amplitude", "prbs_hold", "x0_box", "init_offset"}, "evaluation");
            read(e, "input", c.evaluation.input);
            read(e, "prbs_amplitude", c.evaluation.prbs_amplitude);
            read(e, "prbs_hold", c.evaluation.prbs_hold);
            read(e, "x0_box", c.evaluation.x0_box);
            read(e, "init_offset", c.evaluation.init_offset);
        }
        if (j.contains("synthesis")) {
            const auto& s = j.at("synthesis");
            detail::reject_unknown(s,
                                   {"lambda_grid", "margin", "gain_bound", "coordinates", "kappa", "sigma", "sigma_level",
                                    "split_kappa_budget", "pilot_traces", "nominal_fallback"},
                                   "synthesis");
            if (s.contains("lambda_grid")) {
                const auto g = s.at("lambda_grid").get<std::vector<double>>();
                if (g.size() != 3) throw ConfigError("synthesis.lambda_grid must be [lo, hi, n]");
                c.synthesis.lambda_lo = g[0];
                c.synthesis.lambda_hi = g[1];
                c.synthesis.lambda_points = static_cast<int>(g[2]);
            }
            detail::read_opt(s, "margin", c.synthesis.margin);
            detail::read_opt(s, "gain_bound", c.synthesis.gain_bound);
            read(s, "coordinates", c.synthesis.coordinates);
            if (s.contains("kappa")) {
                if (s.at("kappa").is_string()) {
                    c.synthesis.kappa_rule = s.at("kappa").get<std::string>();
                } else {
                    c.synthesis.kappa_rule = "fixed";
                    c.synthesis.kappa = s.at("kappa").get<std::vector<double>>();
                }
            }
            read(s, "sigma", c.synthesis.sigma_kind);
            read(s, "sigma_level", c.synthesis.sigma_level);
            read(s, "split_kappa_budget", c.synthesis.split_kappa_budget);
            read(s, "pilot_traces", c.synthesis.pilot_traces);
            read(s, "nominal_fallback", c.synthesis.nominal_fallback);
        }
        if (j.contains("observers")) {
            const auto& o = j.at("observers");
            detail::reject_unknown(o, {"ekf_q_grid", "ekf_tuning_trials", "ekf_p0", "linkoop_method", "linkoop_q"},
                                   "observers");
            read(o, "ekf_q_grid", c.observers.ekf_q_grid);
            read(o, "ekf_tuning_trials", c.observers.ekf_tuning_trials);
            read(o, "ekf_p0", c.observers.ekf_p0);
            read(o, "linkoop_method", c.observers.linkoop_method);
            read(o, "linkoop_q", c.observers.linkoop_q);
        }
        if (j.contains("sweep")) {
            const auto& s = j.at("sweep");
            detail::reject_unknown(s, {"epsilons", "trials", "modes", "freq_lo", "freq_hi"}, "sweep");
            read(s, "epsilons", c.sweep.epsilons);
            read(s, "trials", c.sweep.trials);
            read(s, "modes", c.sweep.modes);
            read(s, "freq_lo", c.sweep.freq_lo);
            read(s, "freq_hi", c.sweep.freq_hi);
        }
        validate(c);
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config type error: ") + e.what());
    }
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["schema_version"] = c.schema_version;
    j["benchmark"] = c.benchmark;
    j["seed"] = c.seed;
    j["trials"] = c.trials;
    j["duration"] = c.duration;
    j["dt"] = c.dt;
    j["burn_in"] = c.burn_in;
    j["noise_variance"] = c.noise_variance;
    if (c.benchmark == "vdp")
        j["plant"] = {{"mu", c.vdp.mu}};
    else
        j["plant"] = {{"J", c.arm.J},     {"m", c.arm.m},     {"l", c.arm.l},     {"g", c.arm.g},
                      {"b_f", c.arm.b_f}, {"f_c", c.arm.f_c}, {"f_v", c.arm.f_v}, {"sgn_smoothing", c.arm.sgn_smoothing}};
    j["mismatch"] = {{"mu_factor", c.mismatch.mu_factor}, {"friction_spread", c.mismatch.friction_spread}};
    j["dictionary"] = spec_to_json(c.dictionary);
    j["measured"] = c.measured;
    j["training"] = {{"trajectories", c.training.trajectories},
                     {"duration", c.training.duration},
                     {"x0_box", c.training.x0_box},
                     {"prbs_amplitude", c.training.prbs_amplitude},
                     {"prbs_hold", c.training.prbs_hold},
                     {"train_fraction", c.training.train_fraction},
                     {"ridge", c.training.ridge ? nlohmann::json(*c.training.ridge) : nlohmann::json(nullptr)},
                     {"residual_weight", c.training.residual_weight},
                     {"residual_grid", c.training.residual_grid}};
    j["evaluation"] = {{"input", c.evaluation.input},
                       {"prbs_amplitude", c.evaluation.prbs_amplitude},
                       {"prbs_hold", c.evaluation.prbs_hold},
                       {"x0_box", c.evaluation.x0_box},
                       {"init_offset", c.evaluation.init_offset}};
    j["synthesis"] = {{"lambda_grid", {c.synthesis.lambda_lo, c.synthesis.lambda_hi, c.synthesis.lambda_points}},
                      {"margin", c.synthesis.margin ? nlohmann::json(*c.synthesis.margin) : nlohmann::json(nullptr)},
                      {"gain_bound",
                       c.synthesis.gain_bound ? nlohmann::json(*c.synthesis.gain_bound) : nlohmann::json(nullptr)},
                      {"coordinates", c.synthesis.coordinates},
                      {"kappa", c.synthesis.kappa_rule == "fixed" ? nlohmann::json(c.synthesis.kappa)
                                                                  : nlohmann::json(c.synthesis.kappa_rule)},
                      {"sigma", c.synthesis.sigma_kind},
                      {"sigma_level", c.synthesis.sigma_level},
                      {"split_kappa_budget", c.synthesis.split_kappa_budget},
                      {"pilot_traces", c.synthesis.pilot_traces},
                      {"nominal_fallback", c.synthesis.nominal_fallback}};
    j["observers"] = {{"ekf_q_grid", c.observers.ekf_q_grid},
                      {"ekf_tuning_trials", c.observers.ekf_tuning_trials},
                      {"ekf_p0", c.observers.ekf_p0},
                      {"linkoop_method", c.observers.linkoop_method},
                      {"linkoop_q", c.observers.linkoop_q}};
    j["sweep"] = {{"epsilons", c.sweep.epsilons},
                  {"trials", c.sweep.trials},
                  {"modes", c.sweep.modes},
                  {"freq_lo", c.sweep.freq_lo},
                  {"freq_hi", c.sweep.freq_hi}};
    j["threads"] = c.threads;
    j["keep_traces"] = c.keep_traces;
    j["timing"] = c.timing;
    return j;
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path, "cannot open for reading");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
    }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path.string(), "cannot open for writing");
    out << text;
    if (!out) throw IoError(path.string(), "write failed");
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

inline ExperimentConfig load_config(const std::string& path) { return config_from_json(read_json_file(path)); }

// ============================================================================
// Plants and seeds
// ============================================================================

namespace streams {
inline constexpr std::uint64_t train = 0x545241494eull;
inline constexpr std::uint64_t train_input = 0x5452494e50ull;
inline constexpr std::uint64_t trial = 0x545249414cull;
inline constexpr std::uint64_t init = 0x494e4954ull;
inline constexpr std::uint64_t mismatch = 0x4d49534dull;
inline constexpr std::uint64_t input = 0x494e5055ull;
inline constexpr std::uint64_t noise = 0x4e4f4953ull;
inline constexpr std::uint64_t tune = 0x54554e45ull;
inline constexpr std::uint64_t sweep = 0x5357454550ull;
inline constexpr std::uint64_t residual = 0x52455349ull;
}  // namespace streams

inline std::uint64_t trial_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
    return rng::hash(base, stream, index);
}

inline Plant nominal_plant(const ExperimentConfig& c) {
    return c.benchmark == "vdp" ? make_vdp_plant(c.vdp) : make_arm_plant(c.arm);
}

// Truth plant with the configured parameter mismatch for one trial.
inline Plant truth_plant(const ExperimentConfig& c, std::uint64_t seed) {
    if (c.benchmark == "vdp") {
        VdpParams p = c.vdp;
        p.mu *= c.mismatch.mu_factor;
        return make_vdp_plant(p);
    }
    ArmParams p = c.arm;
    const double s = c.mismatch.friction_spread;
    p.f_c *= rng::uniform(1.0 - s, 1.0 + s, seed, streams::mismatch, 0);
    p.f_v *= rng::uniform(1.0 - s, 1.0 + s, seed, streams::mismatch, 1);
    return make_arm_plant(p);
}

inline Vec box_sample(const std::vector<double>& box, std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
    Vec x(static_cast<Index>(box.size()));
    for (std::size_t i = 0; i < box.size(); ++i) x[static_cast<Index>(i)] = rng::uniform(-box[i], box[i], seed, stream, counter, i);
    return x;
}

inline Mat evaluation_input(const ExperimentConfig& c, std::uint64_t seed, double duration) {
    if (c.evaluation.input == "zero") return zero_input(1, duration, c.dt);
    return prbs_torque(rng::hash(seed, streams::input, 0), duration, c.dt, c.evaluation.prbs_amplitude,
                       c.evaluation.prbs_hold);
}

// Initial estimate: x0 plus an offset of fixed magnitude in a seeded direction.
inline Vec initial_estimate(const ExperimentConfig& c, const Vec& x0, std::uint64_t seed) {
    Vec dir(x0.size());
    for (Index i = 0; i < x0.size(); ++i) dir[i] = rng::normal(seed, streams::init, 1, static_cast<std::uint64_t>(i));
    if (dir.norm() == 0.0) dir = Vec::Unit(x0.size(), 0);
    return x0 + c.evaluation.init_offset * dir.normalized();
}

// ============================================================================
// Identification
// ============================================================================

inline std::vector<Trace> training_traces(const ExperimentConfig& c) {
    const Plant plant = nominal_plant(c);
    std::vector<Trace> traces;
    traces.reserve(static_cast<std::size_t>(c.training.trajectories));
    for (int i = 0; i < c.training.trajectories; ++i) {
        const auto idx = static_cast<std::uint64_t>(i);
        const Vec x0 = box_sample(c.training.x0_box, c.seed, streams::train, idx);
        const Mat u = prbs_torque(rng::hash(c.seed, streams::train_input, idx), c.training.duration, c.dt,
                                  c.training.prbs_amplitude, c.training.prbs_hold);
        traces.push_back(simulate_plant(plant, x0, u, c.training.duration, c.dt, {}));
    }
    return traces;
}

inline std::vector<std::pair<double, double>> residual_samples(const KoopmanModel& model, const Plant& plant,
                                                               const std::vector<Trace>& traces, const Mat& t) {
    std::vector<std::pair<double, double>> out;
    for (const auto& tr : traces)
        for (Index k = 0; k < tr.length(); ++k) {
            const Vec x = tr.states.col(k);
            out.emplace_back((t * lift(model.dictionary, x)).norm(),
                             (t * true_residual(model, plant, x, tr.inputs.col(k))).norm());
        }
    return out;
}

struct FitOutput {
    KoopmanModel model;
    Vec kappa;
    Mat T;                                // certificate coordinates w = T z
    ResidualCharacterization residual_w;  // residual envelope in w
    std::vector<Trace> validation;
};

inline Vec sector_kappa(const ExperimentConfig& c, const KoopmanModel& model) {
    if (c.synthesis.kappa_rule == "arm_friction") return Vec::Constant(model.p(), c.arm.f_c + c.arm.f_v * model.omega_max);
    return from_std(c.synthesis.kappa);
}

inline SynthesisOptions synthesis_options(const ExperimentConfig& c) {
    SynthesisOptions o;
    o.lambda_lo = c.synthesis.lambda_lo;
    o.lambda_hi = c.synthesis.lambda_hi;
    o.lambda_points = c.synthesis.lambda_points;
    o.margin = c.synthesis.margin;
    o.gain_bound = c.synthesis.gain_bound;
    o.coordinates = c.synthesis.coordinates;
    o.require_verified = false;
    return o;
}

inline FitOutput fit_pipeline(const ExperimentConfig& c) {
    validate(c);
    const Plant plant = nominal_plant(c);
    auto traces = training_traces(c);
    const auto [train_idx, valid_idx] = split_traces(traces.size(), c.training.train_fraction, c.seed);
    TrajectoryDataset data{{}, build_dictionary(c.dictionary)};
    FitOutput out;
    for (auto i : train_idx) data.traces.push_back(traces[i]);
    for (auto i : valid_idx) out.validation.push_back(traces[i]);
    EdmdOptions eo;
    eo.ridge_lambda = c.training.ridge;
    eo.measured = c.measured;
    out.model = fit_edmd(data, eo);
    ResidualBoundOptions ro;
    ro.weight = c.training.residual_weight;
    ro.grid_points = c.training.residual_grid;
    const Mat eye = Mat::Identity(out.model.r(), out.model.r());
    out.model.residual = fit_residual_envelope(residual_samples(out.model, plant, out.validation, eye), ro);
    out.kappa = sector_kappa(c, out.model);
    out.T = choose_coordinates(out.model, out.kappa, out.model.residual.rho, synthesis_options(c));
    out.residual_w = out.T.isIdentity(0.0)
                         ? out.model.residual
                         : fit_residual_envelope(residual_samples(out.model, plant, out.validation, out.T), ro);
    return out;
}

inline nlohmann::json fit_to_json(const FitOutput& f) {
    auto j = model_to_json(f.model);
    j["kappa"] = to_std(f.kappa);
    j["certificate_coordinates"] = {{"kind", f.T.isIdentity(0.0) ? "literal" : "balanced"},
                                    {"T", matrix_to_json(f.T)},
                                    {"rho", f.residual_w.rho},
                                    {"eta_bar", f.residual_w.eta_bar},
                                    {"epsilon", f.residual_w.epsilon}};
    return j;
}

inline FitOutput fit_from_json(const nlohmann::json& j) {
    FitOutput f;
    f.model = model_from_json(j);
    const int r = f.model.r();
    f.kappa = j.contains("kappa") ? from_std(j.at("kappa").get<std::vector<double>>()) : Vec::Ones(f.model.p());
    if (f.kappa.size() != f.model.p()) throw InvalidInput("model kappa needs p entries");
    if (j.contains("certificate_coordinates")) {
        const auto& cc = j.at("certificate_coordinates");
        f.T = matrix_from_json(cc.at("T"), r, r);
        f.residual_w.rho = cc.at("rho").get<double>();
        f.residual_w.eta_bar = cc.at("eta_bar").get<double>();
        f.residual_w.epsilon = cc.at("epsilon").get<double>();
    } else {
        f.T = Mat::Identity(r, r);
        f.residual_w = f.model.residual;
    }
    return f;
}

// ============================================================================
// Synthesis with the nominal fallback
// ============================================================================

struct SynthesisOutcome {
    Certificate cert;
    bool nominal_fallback = false;
    std::string note;
};

inline SynthesisOutcome synthesize(const FitOutput& fit, const SynthesisOptions& base, bool allow_fallback,
                                   std::optional<double> rho = std::nullopt) {
    SynthesisOptions o = base;
    o.transform = fit.T;
    o.rho_override = rho.value_or(fit.residual_w.rho);
    const double rho_z = rho.value_or(fit.model.residual.rho);
    SynthesisOutcome out;
    try {
        out.cert = solve_gain(fit.model, fit.kappa, rho_z, o);
    } catch (const SynthesisInfeasible& e) {
        if (!allow_fallback) throw;
        out.note = e.what();
        out.nominal_fallback = true;
        o.rho_override = 0.0;
        out.cert = solve_gain(fit.model, fit.kappa, 0.0, o);
    }
    return out;
}

// ============================================================================
// Prepared experiment
// ============================================================================

struct Prepared {
    ExperimentConfig config;
    FitOutput fit;
    SynthesisOutcome synth;
    SectorNonlinearity sigma;
    ResidualSplit split;
    PersidskiiErrorModel error_model;
    Mat L;
    double ekf_q = 0.0;
    std::vector<std::pair<double, double>> ekf_tuning;  // (q, mean EKF RMSE)
};

inline SectorNonlinearity make_sigma(const ExperimentConfig& c, const Vec& kappa) {
    return make_sector(sector_kind_from_string(c.synthesis.sigma_kind), kappa, c.synthesis.sigma_level);
}

inline double rmse(const Mat& truth, const Mat& est, Index first = 0) {
    if (truth.rows() != est.rows() || truth.cols() != est.cols()) throw InvalidInput("rmse: length mismatch");
    if (truth.cols() < 1 || first >= truth.cols()) throw InvalidInput("rmse: no samples");
    const Index n = truth.cols() - first;
    return std::sqrt((truth.rightCols(n) - est.rightCols(n)).colwise().squaredNorm().sum() / static_cast<double>(n));
}

// First sample index with t >= burn_in.
inline Index burn_in_index(const ExperimentConfig& c) { return static_cast<Index>(std::ceil(c.burn_in / c.dt - 1e-9)); }

struct TruthRun {
    std::uint64_t seed = 0;
    Plant plant;
    Trace trace;
    Vec x_hat0;
};

inline TruthRun simulate_truth(const ExperimentConfig& c, std::uint64_t seed) {
    TruthRun run;
    run.seed = seed;
    run.plant = truth_plant(c, seed);
    const Vec x0 = box_sample(c.evaluation.x0_box, seed, streams::init, 0);
    run.trace = simulate_plant(run.plant, x0, evaluation_input(c, seed, c.duration), c.duration, c.dt,
                               {c.noise_variance, seed, streams::noise});
    run.x_hat0 = initial_estimate(c, x0, seed);
    return run;
}

inline double measurement_variance(const ExperimentConfig& c) { return std::max(c.noise_variance, 1e-8); }

// Estimates over the trace grid; columns past a divergence stay NaN.
struct EstimatorRun {
    Mat estimates;
    bool diverged = false;
    double diverged_at = std::numeric_limits<double>::quiet_NaN();
};

template <typename Step, typename Estimate>
EstimatorRun run_estimator(const Trace& tr, int n, Step&& step, Estimate&& estimate) {
    EstimatorRun out;
    out.estimates = Mat::Constant(n, tr.length(), std::numeric_limits<double>::quiet_NaN());
    const double dt = tr.dt();
    try {
        for (Index k = 0; k < tr.length(); ++k) {
            out.estimates.col(k) = estimate();
            if (k + 1 < tr.length()) step(tr.inputs.col(k), tr.outputs_noisy.col(k), dt);
        }
    } catch (const ObserverDiverged& e) {
        out.diverged = true;
        out.diverged_at = e.time();
    } catch (const NumericalFailure&) {
        out.diverged = true;
        out.diverged_at = 0.0;
    }
    return out;
}

inline EstimatorRun run_ekf(const ExperimentConfig& c, const Plant& nominal, const Trace& tr, const Vec& x_hat0, double q) {
    const int n = nominal.state_dim;
    auto ekf = make_ekf(nominal, q * Mat::Identity(n, n),
                        measurement_variance(c) * Mat::Identity(nominal.output_dim(), nominal.output_dim()), x_hat0,
                        c.observers.ekf_p0 * Mat::Identity(n, n));
    return run_estimator(
        tr, n, [&](const Vec& u, const Vec& y, double dt) { ekf_step(ekf, u, y, dt); },
        [&] { return estimate_state(ekf); });
}

inline double mean_finite(const std::vector<double>& v) {
    double s = 0.0;
    int n = 0;
    for (double x : v)
        if (std::isfinite(x)) {
            s += x;
            ++n;
        }
    return n > 0 ? s / n : std::numeric_limits<double>::infinity();
}

inline Prepared prepare(const ExperimentConfig& c) {
    Prepared prep;
    prep.config = c;
    prep.fit = fit_pipeline(c);
    prep.synth = synthesize(prep.fit, synthesis_options(c), c.synthesis.nominal_fallback);
    prep.sigma = make_sigma(c, prep.fit.kappa);
    const auto& model = prep.fit.model;
    const Plant nominal = nominal_plant(c);

    // Pilot closed-loop runs on clean validation outputs give (e, Delta) samples for the split.
    std::vector<SplitSample> samples;
    const auto pilots = std::min<std::size_t>(prep.fit.validation.size(), static_cast<std::size_t>(std::max(1, c.synthesis.pilot_traces)));
    for (std::size_t i = 0; i < pilots; ++i) {
        const auto& tr = prep.fit.validation[i];
        auto obs = make_pko(model, prep.synth.cert.K, prep.sigma, initial_estimate(c, tr.states.col(0), i));
        try {
            for (Index k = 0; k < tr.length(); ++k) {
                const Vec x = tr.states.col(k);
                samples.push_back({obs.z_hat - lift(model.dictionary, x), true_residual(model, nominal, x, tr.inputs.col(k))});
                if (k + 1 < tr.length()) pko_step(obs, tr.inputs.col(k), tr.outputs_clean.col(k), tr.dt());
            }
        } catch (const ObserverDiverged&) {
        }
    }
    prep.split = split_residual(samples, Vec::Constant(model.r(), c.synthesis.split_kappa_budget));
    prep.error_model = embed_error_dynamics(model, prep.synth.cert.K, prep.sigma, prep.split, std::sqrt(c.noise_variance));

    LinKoopDesign ld;
    ld.method = c.observers.linkoop_method;
    ld.q = c.observers.linkoop_q;
    ld.r = measurement_variance(c);
    prep.L = linkoop_gain(model, ld);

    // EKF process noise chosen by RMSE on tuning trials disjoint from the evaluation seeds.
    double best = std::numeric_limits<double>::infinity();
    prep.ekf_q = c.observers.ekf_q_grid.front();
    for (double q : c.observers.ekf_q_grid) {
        std::vector<double> vals;
        for (int i = 0; i < c.observers.ekf_tuning_trials; ++i) {
            const auto run = simulate_truth(c, trial_seed(c.seed, streams::tune, static_cast<std::uint64_t>(i)));
            const auto est = run_ekf(c, nominal, run.trace, run.x_hat0, q);
            vals.push_back(est.diverged ? std::numeric_limits<double>::infinity()
                                        : rmse(run.trace.states, est.estimates, burn_in_index(c)));
        }
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(std::max<std::size_t>(vals.size(), 1));
        prep.ekf_tuning.emplace_back(q, mean);
        if (mean < best) {
            best = mean;
            prep.ekf_q = q;
        }
    }
    return prep;
}

// ============================================================================
// Trials
// ============================================================================

inline const std::array<std::string, 3> kObserverNames{"PKO", "LinKoop", "EKF"};

struct ObserverResult {
    double rmse = std::numeric_limits<double>::infinity();
    double rmse_measured = std::numeric_limits<double>::infinity();
    double max_err = std::numeric_limits<double>::infinity();
    bool diverged = false;
    double diverged_at = std::numeric_limits<double>::quiet_NaN();
};

struct TrialResult {
    int index = 0;
    std::uint64_t seed = 0;
    std::array<ObserverResult, 3> observers;
    DissipationReport dissipation;  // PKO, certificate coordinates
    // Retained only on request.
    Trace truth;
    std::array<Mat, 3> estimates;

    bool any_diverged() const {
        return std::any_of(observers.begin(), observers.end(), [](const ObserverResult& o) { return o.diverged; });
    }
};

inline ObserverResult score(const ExperimentConfig& c, const Mat& truth, const EstimatorRun& run,
                            const std::vector<int>& measured) {
    ObserverResult r;
    r.diverged = run.diverged;
    r.diverged_at = run.diverged_at;
    if (run.diverged) return r;
    const Index first = burn_in_index(c);
    r.rmse = rmse(truth, run.estimates, first);
    Mat tm(static_cast<Index>(measured.size()), truth.cols()), em(tm.rows(), tm.cols());
    for (std::size_t i = 0; i < measured.size(); ++i) {
        tm.row(static_cast<Index>(i)) = truth.row(measured[i]);
        em.row(static_cast<Index>(i)) = run.estimates.row(measured[i]);
    }
    r.rmse_measured = rmse(tm, em, first);
    const Index n = truth.cols() - first;
    r.max_err = (truth.rightCols(n) - run.estimates.rightCols(n)).colwise().norm().maxCoeff();
    return r;
}

inline TrialResult run_trial(const Prepared& prep, int index, bool keep = false) {
    const auto& c = prep.config;
    const auto& model = prep.fit.model;
    const auto& cert = prep.synth.cert;
    TrialResult res;
    res.index = index;
    res.seed = trial_seed(c.seed, streams::trial, static_cast<std::uint64_t>(index));
    const auto run = simulate_truth(c, res.seed);
    const Trace& tr = run.trace;
    const int n = model.n();

    auto pko = make_pko(model, cert.K, prep.sigma, run.x_hat0);
    Mat z_hat(model.r(), tr.length());
    z_hat.setConstant(std::numeric_limits<double>::quiet_NaN());
    Index k_pko = 0;
    const auto pko_run = run_estimator(
        tr, n,
        [&](const Vec& u, const Vec& y, double dt) { pko_step(pko, u, y, dt); },
        [&] {
            z_hat.col(k_pko++) = pko.z_hat;
            return estimate_state(pko);
        });

    auto lin = make_linkoop(model, prep.L, run.x_hat0);
    const auto lin_run = run_estimator(
        tr, n, [&](const Vec& u, const Vec& y, double dt) { linkoop_step(lin, u, y, dt); },
        [&] { return estimate_state(lin); });

    const auto ekf_run = run_ekf(c, nominal_plant(c), tr, run.x_hat0, prep.ekf_q);

    res.observers[0] = score(c, tr.states, pko_run, model.measured);
    res.observers[1] = score(c, tr.states, lin_run, model.measured);
    res.observers[2] = score(c, tr.states, ekf_run, model.measured);

    // Dissipation check: e = z_hat - z, dtilde = K (sigma(C e) - sigma(C e - v)) - Delta, both mapped by T.
    if (!pko_run.diverged) {
        Mat e_w(model.r(), tr.length()), d_w(model.r(), tr.length());
        for (Index k = 0; k < tr.length(); ++k) {
            const Vec x = tr.states.col(k);
            const Vec e = z_hat.col(k) - lift(model.dictionary, x);
            const Vec v = tr.outputs_noisy.col(k) - tr.outputs_clean.col(k);
            const Vec ce = model.C_o * e;
            const Vec d = cert.K * (sector_eval(prep.sigma, ce) - sector_eval(prep.sigma, ce - v)) -
                          true_residual(model, run.plant, x, tr.inputs.col(k));
            e_w.col(k) = cert.T * e;
            d_w.col(k) = cert.T * d;
        }
        res.dissipation = check_dissipation(cert, e_w, d_w, tr.dt());
    } else {
        res.dissipation.fraction = 0.0;
    }
    if (keep) {
        res.truth = tr;
        res.estimates = {pko_run.estimates, lin_run.estimates, ekf_run.estimates};
    }
    return res;
}

inline int resolve_threads(int requested, int jobs) {
    int t = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
    return std::clamp(t, 1, std::max(1, jobs));
}

// Runs f(i) for i in [0, count) on a worker pool; results are stored by index.
template <typename R, typename F>
std::vector<R> parallel_map(int count, int threads, F&& f) {
    std::vector<R> out(static_cast<std::size_t>(count));
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
    auto worker = [&] {
        for (int i = next++; i < count; i = next++) {
            try {
                out[static_cast<std::size_t>(i)] = f(i);
            } catch (...) {
                errors[static_cast<std::size_t>(i)] = std::current_exception();
            }
        }
    };
    const int nt = resolve_threads(threads, count);
    if (nt == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

// ============================================================================
// Summary
// ============================================================================

struct ObserverSummary {
    std::string name;
    double rmse_mean = 0.0;
    double rmse_std = 0.0;
    double rmse_measured_mean = 0.0;
    double rmse_measured_std = 0.0;
    double improvement = 0.0;  // vs EKF, on means
    int diverged = 0;
};

struct SummaryTable {
    int trials = 0;
    int divergent_trials = 0;
    std::array<ObserverSummary, 3> rows;
};

// Mean and sample standard deviation of the finite entries.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    std::vector<double> f;
    for (double x : v)
        if (std::isfinite(x)) f.push_back(x);
    if (f.empty()) return {std::numeric_limits<double>::infinity(), 0.0};
    double mean = 0.0;
    for (double x : f) mean += x;
    mean /= static_cast<double>(f.size());
    double ss = 0.0;
    for (double x : f) ss += (x - mean) * (x - mean);
    const double sd = f.size() > 1 ? std::sqrt(ss / static_cast<double>(f.size() - 1)) : 0.0;
    return {mean, sd};
}

inline SummaryTable summarize(const std::vector<TrialResult>& results) {
    SummaryTable s;
    s.trials = static_cast<int>(results.size());
    for (const auto& r : results) s.divergent_trials += r.any_diverged() ? 1 : 0;
    for (std::size_t o = 0; o < 3; ++o) {
        std::vector<double> a, m;
        auto& row = s.rows[o];
        row.name = kObserverNames[o];
        for (const auto& r : results) {
            a.push_back(r.observers[o].rmse);
            m.push_back(r.observers[o].rmse_measured);
            row.diverged += r.observers[o].diverged ? 1 : 0;
        }
        std::tie(row.rmse_mean, row.rmse_std) = mean_std(a);
        std::tie(row.rmse_measured_mean, row.rmse_measured_std) = mean_std(m);
    }
    const double ekf = s.rows[2].rmse_mean;
    for (auto& row : s.rows) row.improvement = (ekf - row.rmse_mean) / ekf;
    return s;
}

// ============================================================================
// Output
// ============================================================================

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string trace_csv(const TrialResult& r) {
    std::ostringstream os;
    os.precision(17);
    const Trace& tr = r.truth;
    const Index n = tr.states.rows();
    os << "t";
    for (Index i = 0; i < n; ++i) os << ",x" << i + 1;
    for (const auto& name : kObserverNames)
        for (Index i = 0; i < n; ++i) os << ",xhat_" << name << i + 1;
    for (Index i = 0; i < tr.inputs.rows(); ++i) os << ",u" << i + 1;
    for (Index i = 0; i < tr.outputs_noisy.rows(); ++i) os << ",y_noisy" << i + 1;
    os << '\n';
    for (Index k = 0; k < tr.length(); ++k) {
        os << tr.times[static_cast<std::size_t>(k)];
        for (Index i = 0; i < n; ++i) os << ',' << tr.states(i, k);
        for (const auto& est : r.estimates)
            for (Index i = 0; i < n; ++i) os << ',' << est(i, k);
        for (Index i = 0; i < tr.inputs.rows(); ++i) os << ',' << tr.inputs(i, k);
        for (Index i = 0; i < tr.outputs_noisy.rows(); ++i) os << ',' << tr.outputs_noisy(i, k);
        os << '\n';
    }
    return os.str();
}

inline std::string trials_csv(const std::vector<TrialResult>& results) {
    std::ostringstream os;
    os << "seed,observer,rmse,rmse_measured,max_err,diverged,dissipation_fraction\n";
    for (const auto& r : results)
        for (std::size_t o = 0; o < 3; ++o) {
            const auto& ob = r.observers[o];
            os << r.seed << ',' << kObserverNames[o] << ',' << fmt(ob.rmse) << ',' << fmt(ob.rmse_measured) << ','
               << fmt(ob.max_err) << ',' << (ob.diverged ? 1 : 0) << ',';
            if (o == 0) os << fmt(r.dissipation.fraction);
            os << '\n';
        }
    return os.str();
}

inline std::string summary_csv(const SummaryTable& s) {
    std::ostringstream os;
    os << "observer,rmse_mean,rmse_std,rmse_measured_mean,rmse_measured_std,improvement_vs_ekf,diverged\n";
    for (const auto& row : s.rows)
        os << row.name << ',' << fmt(row.rmse_mean) << ',' << fmt(row.rmse_std) << ',' << fmt(row.rmse_measured_mean)
           << ',' << fmt(row.rmse_measured_std) << ',' << fmt(row.improvement) << ',' << row.diverged << '\n';
    return os.str();
}

inline std::string certificate_section(const Prepared& prep) {
    const auto& cert = prep.synth.cert;
    const auto& fit = prep.fit;
    std::ostringstream os;
    os << "certificate\n";
    os << "  verified            " << (cert.verified ? "yes" : "no (" + cert.verification_failure + ")") << '\n';
    os << "  coordinates         " << cert.coordinates << " (cond T = " << fmt(cert.cond_T()) << ")\n";
    os << "  design rho          " << fmt(cert.rho_lmi)
       << (prep.synth.nominal_fallback ? "  [nominal fallback: measured rho not certifiable]" : "") << '\n';
    os << "  lambda             ";
    for (Index j = 0; j < cert.Lambda.size(); ++j) os << ' ' << fmt(cert.Lambda[j]);
    os << '\n';
    os << "  gamma               " << fmt(cert.gamma) << '\n';
    os << "  alpha               " << fmt(cert.alpha) << '\n';
    os << "  beta                " << fmt(cert.beta) << '\n';
    os << "  c                   " << fmt(cert.c()) << '\n';
    os << "  xi_max_eig          " << fmt(cert.xi_max_eig) << '\n';
    os << "  xi_max_eig/|xi|     " << fmt(cert.xi_max_eig / cert.xi_norm) << '\n';
    os << "  decision variables  " << cert.decision_variables << '\n';
    os << "  sdp solves          " << cert.sdp_solves << '\n';
    if (prep.config.timing)
        os << "  solver wall time    " << fmt(cert.solve_seconds) << " s\n";
    else
        os << "  solver wall time    not recorded (timing disabled)\n";
    os << "model\n";
    os << "  r                   " << fit.model.r() << '\n';
    os << "  rho / eta_bar / eps " << fmt(fit.model.residual.rho) << " / " << fmt(fit.model.residual.eta_bar) << " / "
       << fmt(fit.model.residual.epsilon) << '\n';
    os << "  rho_w / eta_w / eps_w " << fmt(fit.residual_w.rho) << " / " << fmt(fit.residual_w.eta_bar) << " / "
       << fmt(fit.residual_w.epsilon) << '\n';
    os << "  kappa               " << fmt(fit.kappa[0]) << '\n';
    os << "  split d_bound       " << fmt(prep.split.d_bound) << " (disturbance bound " << fmt(prep.error_model.disturbance_bound)
       << ")\n";
    os << "  ekf q               " << fmt(prep.ekf_q) << '\n';
    if (prep.synth.nominal_fallback) os << "  note                " << prep.synth.note << '\n';
    return os.str();
}

inline std::string report_text(const Prepared& prep, const SummaryTable& s, const std::vector<TrialResult>& results) {
    std::ostringstream os;
    os << "benchmark " << prep.config.benchmark << "  trials " << s.trials << "  seed " << prep.config.seed
       << "  burn-in " << fmt(prep.config.burn_in) << " s\n\n";
    os << "observer  rmse_mean  rmse_std  impr_vs_ekf  rmse_measured_mean  diverged\n";
    for (const auto& row : s.rows)
        os << row.name << "  " << fmt(row.rmse_mean) << "  " << fmt(row.rmse_std) << "  " << fmt(row.improvement) << "  "
           << fmt(row.rmse_measured_mean) << "  " << row.diverged << '\n';
    os << "\ndivergent trials (any observer): " << s.divergent_trials << '\n';
    double worst = 1.0;
    for (const auto& r : results) worst = std::min(worst, r.dissipation.fraction);
    os << "PKO dissipation check: min fraction over trials " << fmt(worst) << "\n\n";
    os << certificate_section(prep);
    return os.str();
}

inline void write_common(const std::filesystem::path& dir, const Prepared& prep) {
    std::filesystem::create_directories(dir);
    write_json_file(dir / "config.json", config_to_json(prep.config));
    write_json_file(dir / "model.json", fit_to_json(prep.fit));
    write_json_file(dir / "certificate.json", certificate_to_json(prep.synth.cert, prep.config.timing));
}

struct BenchmarkOutput {
    SummaryTable summary;
    std::vector<TrialResult> results;
};

inline BenchmarkOutput run_benchmark(const Prepared& prep) {
    const auto& c = prep.config;
    BenchmarkOutput out;
    out.results = parallel_map<TrialResult>(c.trials, c.threads, [&](int i) { return run_trial(prep, i, i < c.keep_traces); });
    out.summary = summarize(out.results);
    return out;
}

inline void write_benchmark(const std::filesystem::path& dir, const Prepared& prep, const BenchmarkOutput& b) {
    write_common(dir, prep);
    write_text_file(dir / "trials.csv", trials_csv(b.results));
    write_text_file(dir / "summary.csv", summary_csv(b.summary));
    write_text_file(dir / "report.txt", report_text(prep, b.summary, b.results));
    if (prep.config.keep_traces > 0) {
        std::filesystem::create_directories(dir / "traces");
        for (const auto& r : b.results)
            if (r.truth.length() > 0) write_text_file(dir / "traces" / ("trial_" + std::to_string(r.seed) + ".csv"), trace_csv(r));
    }
}

// ============================================================================
// Residual-magnitude sweep on a lifted truth
// ============================================================================

// s(t) in [-1, 1]: mean of sinusoids with seeded frequencies and phases.
struct InjectedSignal {
    Vec direction;  // unit vector in z
    std::vector<double> freq;
    std::vector<double> phase;

    double value(double t) const {
        double s = 0.0;
        for (std::size_t i = 0; i < freq.size(); ++i) s += std::sin(freq[i] * t + phase[i]);
        return s / static_cast<double>(freq.size());
    }
};

inline InjectedSignal injected_signal(const ExperimentConfig& c, int r, std::uint64_t seed) {
    InjectedSignal sig;
    sig.direction.resize(r);
    for (int i = 0; i < r; ++i) sig.direction[i] = rng::normal(seed, streams::residual, 0, static_cast<std::uint64_t>(i));
    sig.direction.normalize();
    for (int m = 0; m < c.sweep.modes; ++m) {
        const auto mm = static_cast<std::uint64_t>(m);
        sig.freq.push_back(rng::uniform(c.sweep.freq_lo, c.sweep.freq_hi, seed, streams::residual, 1, mm));
        sig.phase.push_back(rng::uniform(0.0, 2.0 * std::numbers::pi, seed, streams::residual, 2, mm));
    }
    return sig;
}

// Lifted truth z' = A z + B u + eps * s(t) * direction, y = C_o z + v.
inline Trace simulate_lifted_truth(const KoopmanModel& model, const Vec& x0, const Mat& u, double duration, double dt,
                                   double eps, const InjectedSignal& sig, const NoiseSpec& noise, Mat& z_out) {
    const Index len = step_count(duration, dt) + 1;
    Trace tr;
    tr.times.resize(static_cast<std::size_t>(len));
    tr.states.resize(model.n(), len);
    tr.inputs = u.leftCols(len);
    tr.outputs_clean.resize(model.p(), len);
    tr.outputs_noisy.resize(model.p(), len);
    z_out.resize(model.r(), len);
    auto f = [&](const Vec& z, const Vec& uu, double t) -> Vec {
        Vec dz = model.A * z + eps * sig.value(t) * sig.direction;
        if (model.m() > 0) dz += model.B * uu;
        return dz;
    };
    Vec z = lift(model.dictionary, x0);
    for (Index k = 0; k < len; ++k) {
        const double t = static_cast<double>(k) * dt;
        tr.times[static_cast<std::size_t>(k)] = t;
        z_out.col(k) = z;
        tr.states.col(k) = z.head(model.n());
        tr.outputs_clean.col(k) = model.C_o * z;
        for (Index j = 0; j < model.p(); ++j) tr.outputs_noisy(j, k) = tr.outputs_clean(j, k) + noise_sample(noise, k, j);
        if (k + 1 < len) z = rk4_step(f, z, tr.inputs.col(k), t, dt);
    }
    return tr;
}

struct SweepRow {
    double epsilon = 0.0;
    std::string observer;
    double rmse_mean = 0.0;
    double rmse_std = 0.0;
    double ultimate_bound = 0.0;  // c * epsilon
    double ss_max_err = 0.0;      // max over trials of steady-state max error
    int diverged = 0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    std::array<double, 3> slope{};
    double pko_r2 = 0.0;
    bool pko_monotone = false;
    bool pko_contained = false;
};

// Least-squares line through (x, y); returns slope and R^2.
inline std::pair<double, double> linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
    const auto n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
    const double r2 = syy > 0.0 ? sxy * sxy / (sxx * syy) : 1.0;
    return {slope, r2};
}

inline SweepResult sweep_epsilon(const Prepared& prep) {
    const auto& c = prep.config;
    const auto& model = prep.fit.model;
    const auto& cert = prep.synth.cert;
    const Plant nominal = nominal_plant(c);
    const Index ss_first = static_cast<Index>(std::ceil(0.5 * c.duration / c.dt - 1e-9));
    const Index first = burn_in_index(c);
    const double c_bound = cert.c();

    struct Cell {
        std::array<double, 3> rmse{};
        std::array<double, 3> ss_max{};
        std::array<bool, 3> diverged{};
    };
    const int ne = static_cast<int>(c.sweep.epsilons.size());
    const int nt = c.sweep.trials;
    auto cells = parallel_map<Cell>(ne * nt, c.threads, [&](int job) {
        const int ie = job / nt, j = job % nt;
        const double eps = c.sweep.epsilons[static_cast<std::size_t>(ie)];
        const std::uint64_t seed = trial_seed(c.seed, streams::sweep, static_cast<std::uint64_t>(j));
        const Vec x0 = box_sample(c.evaluation.x0_box, seed, streams::init, 0);
        const auto sig = injected_signal(c, model.r(), seed);
        Mat z;
        const Trace tr = simulate_lifted_truth(model, x0, evaluation_input(c, seed, c.duration), c.duration, c.dt, eps,
                                               sig, {c.noise_variance, seed, streams::noise}, z);
        const Vec x_hat0 = initial_estimate(c, x0, seed);
        Cell cell;
        auto lifted_run = [&](auto& obs, auto step) {
            Mat zh = Mat::Constant(model.r(), tr.length(), std::numeric_limits<double>::quiet_NaN());
            Index k = 0;
            auto run = run_estimator(
                tr, model.n(), [&](const Vec& u, const Vec& y, double dt) { step(obs, u, y, dt); },
                [&] {
                    zh.col(k++) = obs.z_hat;
                    return estimate_state(obs.z_hat, model.n());
                });
            return std::make_pair(run, zh);
        };
        auto pko = make_pko(model, cert.K, prep.sigma, x_hat0);
        auto lin = make_linkoop(model, prep.L, x_hat0);
        const auto [pr, pz] = lifted_run(pko, [](PkoObserver& o, const Vec& u, const Vec& y, double dt) { pko_step(o, u, y, dt); });
        const auto [lr, lz] =
            lifted_run(lin, [](LinKoopObserver& o, const Vec& u, const Vec& y, double dt) { linkoop_step(o, u, y, dt); });
        const auto er = run_ekf(c, nominal, tr, x_hat0, prep.ekf_q);
        const std::array<const EstimatorRun*, 3> runs{&pr, &lr, &er};
        for (std::size_t o = 0; o < 3; ++o) {
            cell.diverged[o] = runs[o]->diverged;
            if (runs[o]->diverged) {
                cell.rmse[o] = cell.ss_max[o] = std::numeric_limits<double>::infinity();
                continue;
            }
            cell.rmse[o] = rmse(tr.states, runs[o]->estimates, first);
            const Index n = tr.length() - ss_first;
            // Lifted error for the Koopman observers, state error for the EKF.
            if (o == 0)
                cell.ss_max[o] = (pz.rightCols(n) - z.rightCols(n)).colwise().norm().maxCoeff();
            else if (o == 1)
                cell.ss_max[o] = (lz.rightCols(n) - z.rightCols(n)).colwise().norm().maxCoeff();
            else
                cell.ss_max[o] = (er.estimates.rightCols(n) - tr.states.rightCols(n)).colwise().norm().maxCoeff();
        }
        return cell;
    });

    SweepResult out;
    std::array<std::vector<double>, 3> means;
    out.pko_contained = true;
    for (int ie = 0; ie < ne; ++ie) {
        const double eps = c.sweep.epsilons[static_cast<std::size_t>(ie)];
        for (std::size_t o = 0; o < 3; ++o) {
            SweepRow row;
            row.epsilon = eps;
            row.observer = kObserverNames[o];
            row.ultimate_bound = c_bound * eps;
            std::vector<double> vals;
            for (int j = 0; j < nt; ++j) {
                const auto& cell = cells[static_cast<std::size_t>(ie * nt + j)];
                vals.push_back(cell.rmse[o]);
                row.ss_max_err = std::max(row.ss_max_err, cell.ss_max[o]);
                row.diverged += cell.diverged[o] ? 1 : 0;
            }
            std::tie(row.rmse_mean, row.rmse_std) = mean_std(vals);
            means[o].push_back(row.rmse_mean);
            if (o == 0 && !(row.ss_max_err <= row.ultimate_bound)) out.pko_contained = false;
            out.rows.push_back(row);
        }
    }
    for (std::size_t o = 0; o < 3; ++o) {
        const auto [slope, r2] = linear_fit(c.sweep.epsilons, means[o]);
        out.slope[o] = slope;
        if (o == 0) out.pko_r2 = r2;
    }
    out.pko_monotone = true;
    for (std::size_t i = 1; i < means[0].size(); ++i)
        if (!(means[0][i] > means[0][i - 1])) out.pko_monotone = false;
    return out;
}

inline std::string sweep_csv(const SweepResult& s) {
    std::ostringstream os;
    os << "epsilon,observer,rmse_mean,rmse_std,ultimate_bound,ss_max_err,diverged\n";
    for (const auto& r : s.rows)
        os << fmt(r.epsilon) << ',' << r.observer << ',' << fmt(r.rmse_mean) << ',' << fmt(r.rmse_std) << ','
           << fmt(r.ultimate_bound) << ',' << fmt(r.ss_max_err) << ',' << r.diverged << '\n';
    return os.str();
}

inline std::string sweep_report(const Prepared& prep, const SweepResult& s) {
    std::ostringstream os;
    os << "epsilon sweep  benchmark " << prep.config.benchmark << "  trials/point " << prep.config.sweep.trials << "  seed "
       << prep.config.seed << "\n\n";
    for (std::size_t o = 0; o < 3; ++o) os << kObserverNames[o] << " rmse slope " << fmt(s.slope[o]) << '\n';
    os << "PKO linear-fit R^2 " << fmt(s.pko_r2) << '\n';
    os << "PKO mean RMSE monotone in epsilon: " << (s.pko_monotone ? "yes" : "no") << '\n';
    os << "PKO steady-state max|e| <= c*epsilon at every point: " << (s.pko_contained ? "yes" : "no") << "\n\n";
    os << certificate_section(prep);
    return os.str();
}

inline void write_sweep(const std::filesystem::path& dir, const Prepared& prep, const SweepResult& s) {
    write_common(dir, prep);
    write_text_file(dir / "sweep.csv", sweep_csv(s));
    write_text_file(dir / "report.txt", sweep_report(prep, s));
}

}  // namespace pko
