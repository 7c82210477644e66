#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <gtest/gtest.h>

#include "pko/bench.hpp"

using namespace pko;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::map<std::string, std::string> dir_contents(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
    return out;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("pko_test_" + std::to_string(::getpid()) + "_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<std::string> lines(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    for (std::string l; std::getline(is, l);) out.push_back(l);
    return out;
}

std::vector<std::string> split_csv(const std::string& l) {
    std::vector<std::string> out;
    std::istringstream is(l);
    for (std::string f; std::getline(is, f, ',');) out.push_back(f);
    return out;
}

ExperimentConfig small_vdp() {
    auto c = default_config("vdp");
    c.trials = 4;
    c.threads = 1;
    c.keep_traces = 1;
    c.observers.ekf_tuning_trials = 2;
    c.sweep.trials = 2;
    c.sweep.epsilons = {0.0, 0.1, 0.2};
    return c;
}

// One prepared experiment shared by the slower tests.
const Prepared& shared_prep() {
    static const Prepared prep = prepare(small_vdp());
    return prep;
}

int run_tool(const std::string& args) {
    const std::string cmd = std::string(PKO_TOOL) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

TEST(Config, DefaultsRoundTrip) {
    for (const char* b : {"vdp", "arm"}) {
        const auto c = default_config(b);
        EXPECT_NO_THROW(validate(c));
        const auto j = config_to_json(c);
        EXPECT_EQ(config_to_json(config_from_json(j)), j) << b;
    }
    EXPECT_DOUBLE_EQ(default_config("vdp").noise_variance, 0.01);
    EXPECT_DOUBLE_EQ(default_config("arm").noise_variance, 0.04);
    EXPECT_EQ(default_config("vdp").dictionary.preset, "vdp15");
    EXPECT_EQ(default_config("arm").dictionary.preset, "arm20");
}

TEST(Config, ShippedConfigsLoad) {
    for (const char* f : {"vdp.json", "arm.json", "sweep.json"}) {
        const fs::path p = fs::path(PKO_SOURCE_DIR) / "configs" / f;
        EXPECT_NO_THROW(load_config(p.string())) << p;
    }
    EXPECT_EQ(load_config((fs::path(PKO_SOURCE_DIR) / "configs" / "arm.json").string()).benchmark, "arm");
}

TEST(Config, RejectsBadInput) {
    auto base = config_to_json(default_config("vdp"));
    auto with = [&](const std::function<void(nlohmann::json&)>& edit) {
        auto j = base;
        edit(j);
        return j;
    };
    EXPECT_THROW(config_from_json(with([](auto& j) { j["trails"] = 3; })), ConfigError);
    EXPECT_THROW(config_from_json(with([](auto& j) { j["training"]["ridg"] = 1; })), ConfigError);
    EXPECT_THROW(config_from_json(with([](auto& j) { j["plant"]["f_c"] = 1; })), ConfigError);
    EXPECT_THROW(config_from_json(with([](auto& j) { j["trials"] = "many"; })), ConfigError);
    EXPECT_THROW(config_from_json(with([](auto& j) { j["trials"] = 0; })), ConfigError);
    EXPECT_THROW(config_from_json(with([](auto& j) { j["dt"] = -0.1; })), ConfigError);
    EXPECT_THROW(config_from_json(with([](auto& j) { j["benchmark"] = "cartpole"; })), ConfigError);
    EXPECT_THROW(config_from_json(with([](auto& j) { j["schema_version"] = 7; })), ConfigError);
    EXPECT_THROW(config_from_json(with([](auto& j) { j["burn_in"] = 20.0; })), ConfigError);
    EXPECT_THROW(config_from_json(with([](auto& j) { j["synthesis"]["lambda_grid"] = {1.0, 0.5, 3}; })), ConfigError);
    EXPECT_THROW(config_from_json(with([](auto& j) { j["synthesis"]["kappa"] = "arm_friction"; })), ConfigError);
    EXPECT_THROW(config_from_json(with([](auto& j) { j["sweep"]["epsilons"] = {0.2, 0.1}; })), ConfigError);
    EXPECT_THROW(config_from_json(nlohmann::json::array()), ConfigError);
    EXPECT_THROW(read_json_file("/nonexistent/pko.json"), std::exception);
}

// ---------------------------------------------------------------------------
// Seeds and plants
// ---------------------------------------------------------------------------

TEST(Seeds, StreamsAreDistinct) {
    std::set<std::uint64_t> seen;
    for (std::uint64_t s : {streams::train, streams::trial, streams::tune, streams::sweep})
        for (std::uint64_t i = 0; i < 50; ++i) seen.insert(trial_seed(1, s, i));
    EXPECT_EQ(seen.size(), 200u);
    EXPECT_NE(trial_seed(1, streams::trial, 0), trial_seed(2, streams::trial, 0));
}

TEST(Seeds, MismatchRanges) {
    const auto v = default_config("vdp");
    const Plant tv = truth_plant(v, 5);
    EXPECT_EQ(tv.dynamics(Vec::Unit(2, 1), Vec::Zero(1), 0.0), vdp_dynamics(Vec::Unit(2, 1), 0.0, VdpParams{1.15}));
    const auto a = default_config("arm");
    const Vec x = (Vec(2) << 0.0, 1.0).finished();
    const Vec nominal = nominal_plant(a).dynamics(x, Vec::Zero(1), 0.0);
    bool varied = false;
    for (std::uint64_t s = 0; s < 50; ++s) {
        const Vec d = truth_plant(a, s).dynamics(x, Vec::Zero(1), 0.0);
        // friction only enters w'; at w = 1 the friction torque is f_c tanh(1/eps) + f_v
        const double f_nom = a.arm.f_c * std::tanh(1.0 / a.arm.sgn_smoothing) + a.arm.f_v;
        const double f_true = f_nom + (d[1] - nominal[1]) * a.arm.J * -1.0;
        EXPECT_GE(f_true, 0.7 * f_nom - 1e-12);
        EXPECT_LE(f_true, 1.3 * f_nom + 1e-12);
        varied = varied || std::abs(d[1] - nominal[1]) > 1e-6;
    }
    EXPECT_TRUE(varied);
}

// ---------------------------------------------------------------------------
// Metrics and summary
// ---------------------------------------------------------------------------

TEST(Metrics, RmseExamples) {
    Mat truth = Mat::Zero(2, 100), est = Mat::Zero(2, 100);
    EXPECT_EQ(rmse(truth, est), 0.0);
    est.row(0).setConstant(0.1);
    EXPECT_NEAR(rmse(truth, est), 0.1, 1e-15);
    est.setZero();
    for (Index k = 0; k < 100; ++k) est(1, k) = k % 2 == 0 ? 0.2 : -0.2;
    EXPECT_NEAR(rmse(truth, est), 0.2, 1e-15);
    // burn-in prefix is excluded
    est.setZero();
    est.leftCols(10).setConstant(5.0);
    EXPECT_EQ(rmse(truth, est, 10), 0.0);
    EXPECT_THROW(rmse(truth, Mat::Zero(2, 99)), InvalidInput);
    EXPECT_THROW(rmse(Mat::Zero(2, 0), Mat::Zero(2, 0)), InvalidInput);
}

TEST(Metrics, BurnInIndex) {
    auto c = default_config("vdp");
    EXPECT_EQ(burn_in_index(c), 50);
    c.burn_in = 0.0;
    EXPECT_EQ(burn_in_index(c), 0);
}

TEST(Summary, TwoTrialsHandComputed) {
    std::vector<TrialResult> rs(2);
    const double v[2][3] = {{0.1, 0.3, 0.4}, {0.3, 0.5, 0.6}};
    for (int t = 0; t < 2; ++t)
        for (int o = 0; o < 3; ++o) {
            rs[t].observers[o].rmse = v[t][o];
            rs[t].observers[o].rmse_measured = v[t][o] / 2;
        }
    const auto s = summarize(rs);
    EXPECT_EQ(s.trials, 2);
    EXPECT_EQ(s.divergent_trials, 0);
    EXPECT_NEAR(s.rows[0].rmse_mean, 0.2, 1e-15);
    EXPECT_NEAR(s.rows[0].rmse_std, std::sqrt(0.02), 1e-15);
    EXPECT_NEAR(s.rows[2].rmse_mean, 0.5, 1e-15);
    EXPECT_NEAR(s.rows[0].improvement, 0.6, 1e-15);
    EXPECT_NEAR(s.rows[1].improvement, 0.2, 1e-15);
    EXPECT_EQ(s.rows[2].improvement, 0.0);
    EXPECT_NEAR(s.rows[1].rmse_measured_mean, 0.2, 1e-15);
}

TEST(Summary, DivergedTrialsCountedSeparately) {
    std::vector<TrialResult> rs(3);
    for (auto& r : rs)
        for (auto& o : r.observers) o.rmse = o.rmse_measured = 1.0;
    rs[1].observers[1].diverged = true;
    rs[1].observers[1].rmse = std::numeric_limits<double>::infinity();
    const auto s = summarize(rs);
    EXPECT_EQ(s.divergent_trials, 1);
    EXPECT_EQ(s.rows[1].diverged, 1);
    EXPECT_EQ(s.rows[1].rmse_mean, 1.0);
    EXPECT_EQ(s.rows[0].diverged, 0);
}

// ---------------------------------------------------------------------------
// Benchmark pipeline
// ---------------------------------------------------------------------------

TEST(Bench, RunTrialIsPure) {
    const auto& prep = shared_prep();
    const auto a = run_trial(prep, 1, true), b = run_trial(prep, 1, true);
    EXPECT_EQ(a.seed, b.seed);
    for (std::size_t o = 0; o < 3; ++o) {
        EXPECT_EQ(a.observers[o].rmse, b.observers[o].rmse);
        EXPECT_EQ(a.observers[o].max_err, b.observers[o].max_err);
        EXPECT_TRUE(a.estimates[o].cwiseEqual(b.estimates[o]).all() || a.observers[o].diverged);
        EXPECT_GE(a.observers[o].rmse, 0.0);
    }
    EXPECT_EQ(a.dissipation.fraction, b.dissipation.fraction);
}

TEST(Bench, ParallelismInvariant) {
    auto prep = shared_prep();
    prep.config.threads = 1;
    const auto serial = run_benchmark(prep);
    prep.config.threads = 3;
    const auto parallel = run_benchmark(prep);
    ASSERT_EQ(serial.results.size(), parallel.results.size());
    for (std::size_t i = 0; i < serial.results.size(); ++i) {
        EXPECT_EQ(serial.results[i].seed, parallel.results[i].seed);
        for (std::size_t o = 0; o < 3; ++o) EXPECT_EQ(serial.results[i].observers[o].rmse, parallel.results[i].observers[o].rmse);
    }
    EXPECT_EQ(summary_csv(serial.summary), summary_csv(parallel.summary));
}

TEST(Bench, OutputDirectoryIsDeterministic) {
    const auto c = small_vdp();
    const auto d1 = scratch("det1"), d2 = scratch("det2");
    for (const auto& d : {d1, d2}) {
        const auto prep = prepare(c);
        write_benchmark(d, prep, run_benchmark(prep));
    }
    const auto a = dir_contents(d1), b = dir_contents(d2);
    EXPECT_EQ(a.size(), b.size());
    EXPECT_TRUE(a.count("report.txt") && a.count("summary.csv") && a.count("trials.csv") && a.count("certificate.json"));
    for (const auto& [name, content] : a) EXPECT_TRUE(b.count(name) && b.at(name) == content) << name;
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST(Bench, ReportStructureAndConsistency) {
    const auto& prep = shared_prep();
    const auto out = run_benchmark(prep);
    const auto dir = scratch("report");
    write_benchmark(dir, prep, out);
    const auto report = lines(slurp(dir / "report.txt"));
    int headers = 0, rows = 0;
    for (std::size_t i = 0; i < report.size(); ++i)
        if (report[i].rfind("observer  rmse_mean", 0) == 0) {
            ++headers;
            for (std::size_t k = i + 1; k < report.size() && !report[k].empty(); ++k) ++rows;
        }
    EXPECT_EQ(headers, 1);
    EXPECT_EQ(rows, 3);

    // improvement recomputable from the stored means
    const auto csv = lines(slurp(dir / "summary.csv"));
    ASSERT_EQ(csv.size(), 4u);
    const double ekf = std::stod(split_csv(csv[3])[1]);
    for (std::size_t i = 1; i < 4; ++i) {
        const auto f = split_csv(csv[i]);
        EXPECT_NEAR(std::stod(f[5]), (ekf - std::stod(f[1])) / ekf, 1e-12) << csv[i];
    }

    // certificate section matches certificate.json
    const auto cert = certificate_from_json(read_json_file((dir / "certificate.json").string()));
    auto field = [&](const std::string& key) {
        for (const auto& l : report)
            if (l.rfind("  " + key + " ", 0) == 0) return std::stod(l.substr(l.find_first_not_of(' ', key.size() + 2)));
        ADD_FAILURE() << "missing " << key;
        return 0.0;
    };
    EXPECT_EQ(field("gamma"), cert.gamma);
    EXPECT_EQ(field("alpha"), cert.alpha);
    EXPECT_EQ(field("beta"), cert.beta);
    EXPECT_EQ(field("c"), cert.c());
    EXPECT_EQ(field("xi_max_eig"), cert.xi_max_eig);
    EXPECT_EQ(field("decision variables"), cert.decision_variables);

    const auto trials = lines(slurp(dir / "trials.csv"));
    EXPECT_EQ(trials.size(), 1u + 3u * static_cast<std::size_t>(prep.config.trials));
    EXPECT_TRUE(fs::exists(dir / "traces" / ("trial_" + std::to_string(out.results[0].seed) + ".csv")));
    fs::remove_all(dir);
}

TEST(Bench, DissipationHoldsOnPerturbedTrials) {
    const auto& prep = shared_prep();
    for (int i = 0; i < 3; ++i) {
        const auto r = run_trial(prep, i);
        EXPECT_GE(r.dissipation.fraction, 0.99) << "trial " << i;
    }
}

TEST(Bench, PkoBeatsEkfOnMostVdpSeeds) {
    const auto& prep = shared_prep();
    int wins = 0;
    const int n = 20;
    for (int i = 0; i < n; ++i) {
        const auto r = run_trial(prep, i);
        wins += r.observers[0].rmse < r.observers[2].rmse ? 1 : 0;
    }
    EXPECT_GE(wins, 16) << wins << " of " << n;
}

// ---------------------------------------------------------------------------
// Residual sweep
// ---------------------------------------------------------------------------

TEST(Sweep, RowsAndBoundColumn) {
    const auto& prep = shared_prep();
    const auto res = sweep_epsilon(prep);
    ASSERT_EQ(res.rows.size(), 9u);
    for (const auto& row : res.rows) {
        if (row.observer == "PKO") EXPECT_NEAR(row.ultimate_bound, prep.synth.cert.c() * row.epsilon, 1e-12 * row.ultimate_bound);
        EXPECT_GE(row.rmse_mean, 0.0);
    }
    // epsilon = 0 is the noise-only floor: the injected signal's shape is irrelevant there
    auto other = shared_prep();
    other.config.sweep.epsilons = {0.0};
    other.config.sweep.modes = 5;
    other.config.sweep.freq_lo = 3.0;
    other.config.sweep.freq_hi = 4.0;
    const auto floor = sweep_epsilon(other);
    for (std::size_t o = 0; o < 3; ++o) EXPECT_EQ(floor.rows[o].rmse_mean, res.rows[o].rmse_mean);
    const auto csv = lines(sweep_csv(res));
    EXPECT_EQ(csv[0], "epsilon,observer,rmse_mean,rmse_std,ultimate_bound,ss_max_err,diverged");
    EXPECT_EQ(csv.size(), 10u);
}

namespace {

struct LiftedRun {
    double rmse = 0.0;
    double final_err = 0.0;
};

// PKO on a Delta-free lifted truth with no noise and no injected residual.
LiftedRun noise_free_lifted_run(const KoopmanModel& model, std::uint64_t seed, const SynthesisOptions& opts = {},
                                double duration = 0.0) {
    const Vec kappa = Vec::Ones(1);
    const auto cert = solve_gain(model, kappa, 0.0, opts);
    const auto sigma = make_sector(SectorKind::tanh_scaled, kappa);
    auto c = default_config("vdp");
    c.noise_variance = 0.0;
    if (duration > 0.0) c.duration = duration;
    const InjectedSignal sig = injected_signal(c, model.r(), seed);
    const Vec x0 = box_sample({1.5, 1.5}, seed, streams::init, 0);
    Mat z;
    const auto tr = simulate_lifted_truth(model, x0, zero_input(model.m(), c.duration, c.dt), c.duration, c.dt, 0.0, sig,
                                          {}, z);
    auto obs = make_pko(model, cert.K, sigma, initial_estimate(c, x0, seed));
    Mat est(model.n(), tr.length());
    for (Index k = 0; k < tr.length(); ++k) {
        est.col(k) = estimate_state(obs);
        if (k + 1 < tr.length()) pko_step(obs, tr.inputs.col(k), tr.outputs_noisy.col(k), c.dt);
    }
    return {rmse(tr.states, est, burn_in_index(c)), (est.col(tr.length() - 1) - tr.states.col(tr.length() - 1)).norm()};
}

}  // namespace

TEST(Sweep, NoiseFreeObservableLiftedPlantConverges) {
    KoopmanModel model;
    DictionarySpec ds;
    ds.state_dim = 2;
    ds.entries = {basis::Identity{0}, basis::Identity{1}};
    ds.allow_square = true;
    model.dictionary = build_dictionary(ds);
    model.A = (Mat(2, 2) << -0.5, 1.0, -1.0, -0.5).finished();
    model.B = Mat::Zero(2, 0);
    model.C_o = output_matrix(model.dictionary, {0});
    model.measured = {0};
    // |K| <= 1/dt keeps the sampled observer inside the RK4 stability region. The slow
    // closed-loop pole stays near -0.45, hence the longer horizon.
    SynthesisOptions o;
    o.gain_bound = 1.0 / default_config("vdp").dt;
    for (std::uint64_t s = 0; s < 5; ++s)
        EXPECT_LT(noise_free_lifted_run(model, s, o, 30.0).final_err, 1e-3) << "seed " << s;
}

TEST(Sweep, NoiseFreeExactLiftConverges) {
    // x1^2 and x2 do not reach y = x1 here, so they settle at the open-loop rate.
    KoopmanModel model;
    DictionarySpec ds;
    ds.preset = "exact3";
    model.dictionary = build_dictionary(ds);
    model.A = exact_lift_matrix(-0.5, -1.0);
    model.B = Mat::Zero(3, 0);
    model.C_o = output_matrix(model.dictionary, {0});
    model.measured = {0};
    for (std::uint64_t s = 0; s < 5; ++s) EXPECT_LT(noise_free_lifted_run(model, s).final_err, 1e-3) << "seed " << s;
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new fs::path(scratch("cli"));
        auto c = default_config("vdp");
        c.trials = 2;
        c.threads = 1;
        c.observers.ekf_tuning_trials = 1;
        write_json_file(*dir_ / "vdp.json", config_to_json(c));
        c.evaluation.init_offset = 1e7;
        write_json_file(*dir_ / "diverge.json", config_to_json(c));
    }
    static void TearDownTestSuite() {
        fs::remove_all(*dir_);
        delete dir_;
    }
    static std::string path(const std::string& f) { return (*dir_ / f).string(); }
    static fs::path* dir_;
};
fs::path* Cli::dir_ = nullptr;

TEST_F(Cli, UsageErrors) {
    EXPECT_EQ(run_tool(""), 1);
    EXPECT_EQ(run_tool("bench cartpole --out " + path("x")), 1);
    EXPECT_EQ(run_tool("fit --out " + path("x")), 1);
    EXPECT_EQ(run_tool("fit --config /nonexistent.json --out " + path("x")), 1);
    EXPECT_EQ(run_tool("--help"), 0);
}

TEST_F(Cli, FitThenSynth) {
    ASSERT_EQ(run_tool("fit --config " + path("vdp.json") + " --out " + path("fit") + " --seed 1"), 0);
    ASSERT_TRUE(fs::exists(path("fit/model.json")));
    EXPECT_TRUE(fs::exists(path("fit/fit_report.txt")));
    const auto fit = fit_from_json(read_json_file(path("fit/model.json")));
    EXPECT_EQ(fit.model.r(), 15);

    // An absurd residual slope cannot be certified.
    EXPECT_EQ(run_tool("synth --model " + path("fit/model.json") + " --out " + path("c_inf.json") + " --rho 1e9"), 2);
    EXPECT_FALSE(fs::exists(path("c_inf.json")));

    const int code = run_tool("synth --model " + path("fit/model.json") + " --out " + path("c0.json") +
                              " --rho 0 --lambda-grid 1e-3,1e3,25 --seed 4");
    ASSERT_TRUE(fs::exists(path("c0.json")));
    const auto cert = certificate_from_json(read_json_file(path("c0.json")));
    EXPECT_EQ(code, cert.verified ? 0 : 1);
    EXPECT_EQ(cert.r, 15);
    EXPECT_EQ(run_tool("synth --model " + path("fit/model.json") + " --out " + path("c1.json") + " --lambda-grid 5,1,3"), 1);
    EXPECT_EQ(run_tool("synth --model " + path("fit/model.json") + " --out " + path("c1.json") + " --margin -1"), 1);
}

TEST_F(Cli, BenchSimulateAndDivergence) {
    EXPECT_EQ(run_tool("bench vdp --config " + path("vdp.json") + " --out " + path("bench") + " --seed 3"), 0);
    for (const char* f : {"report.txt", "summary.csv", "trials.csv", "certificate.json", "model.json", "config.json"})
        EXPECT_TRUE(fs::exists(path(std::string("bench/") + f))) << f;
    EXPECT_EQ(load_config(path("bench/config.json")).seed, 3u);
    EXPECT_EQ(run_tool("bench arm --config " + path("vdp.json") + " --out " + path("bad")), 1);

    EXPECT_EQ(run_tool("simulate --config " + path("vdp.json") + " --out " + path("sim") + " --trial 1"), 0);
    const auto trace = lines(slurp(path("sim/trace.csv")));
    EXPECT_EQ(trace.size(), 502u);
    EXPECT_EQ(split_csv(trace[0]).size(), 1u + 2u + 6u + 1u + 1u);

    EXPECT_EQ(run_tool("bench vdp --config " + path("diverge.json") + " --out " + path("div")), 3);
}
