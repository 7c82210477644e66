#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "pko/bench.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitInfeasible = 2;
constexpr int kExitDiverged = 3;

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> trials;
    std::optional<int> threads;
    bool timing = false;
};

void add_common(CLI::App* app, Common& c, bool config_required) {
    auto* opt = app->add_option("--config", c.config, "experiment config (JSON)");
    if (config_required) opt->required()->check(CLI::ExistingFile);
    app->add_option("--out", c.out, "output directory")->required();
    app->add_option("--seed", c.seed, "base seed (overrides the config)");
    app->add_option("--threads", c.threads, "worker threads (0: all cores)");
    app->add_flag("--timing", c.timing, "record solver wall time in outputs");
}

pko::ExperimentConfig resolve(const Common& c, const std::string& benchmark = "") {
    pko::ExperimentConfig cfg = c.config.empty() ? pko::default_config(benchmark) : pko::load_config(c.config);
    if (!benchmark.empty() && cfg.benchmark != benchmark)
        throw pko::ConfigError("config is for benchmark '" + cfg.benchmark + "', not '" + benchmark + "'");
    if (c.seed) cfg.seed = *c.seed;
    if (c.trials) cfg.trials = *c.trials;
    if (c.threads) cfg.threads = *c.threads;
    if (c.timing) cfg.timing = true;
    pko::validate(cfg);
    return cfg;
}

std::vector<double> parse_grid(const std::string& s) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            v.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw pko::ConfigError("--lambda-grid: cannot parse '" + item + "'");
        }
    }
    if (v.size() != 3 || !(v[0] > 0.0) || !(v[1] > v[0]) || v[2] < 2.0 || v[2] != std::floor(v[2]))
        throw pko::ConfigError("--lambda-grid must be lo,hi,n with 0 < lo < hi and integer n >= 2");
    return v;
}

void print_certificate(const pko::Certificate& c) {
    std::cout << "coordinates " << c.coordinates << "  gamma " << c.gamma << "  alpha " << c.alpha << "  lambda "
              << c.Lambda.transpose() << "  verified " << (c.verified ? "yes" : "no") << '\n';
    if (!c.verified) std::cout << "verification failed: " << c.verification_failure << '\n';
}

int cmd_fit(const Common& c) {
    const auto cfg = resolve(c);
    const auto fit = pko::fit_pipeline(cfg);
    fs::create_directories(c.out);
    pko::write_json_file(fs::path(c.out) / "model.json", pko::fit_to_json(fit));
    pko::write_json_file(fs::path(c.out) / "config.json", pko::config_to_json(cfg));
    std::ostringstream os;
    os.precision(17);
    os << "r " << fit.model.r() << "  ridge " << fit.model.ridge_lambda << '\n'
       << "rho " << fit.model.residual.rho << "  eta_bar " << fit.model.residual.eta_bar << "  epsilon "
       << fit.model.residual.epsilon << '\n'
       << "coordinates " << (fit.T.isIdentity(0.0) ? "literal" : "balanced") << "  rho_w " << fit.residual_w.rho
       << "  eta_w " << fit.residual_w.eta_bar << "  epsilon_w " << fit.residual_w.epsilon << '\n'
       << "spectral abscissa of A " << pko::spectral_abscissa(fit.model.A) << '\n';
    pko::write_text_file(fs::path(c.out) / "fit_report.txt", os.str());
    std::cout << os.str();
    return kExitOk;
}

struct SynthArgs {
    std::string model;
    std::string out;
    std::string config;
    std::string lambda_grid;
    std::optional<double> margin;
    std::optional<double> rho;
    std::optional<double> gain_bound;
    std::optional<std::uint64_t> seed;
    std::string coordinates;
    bool timing = false;
};

int cmd_synth(const SynthArgs& a) {
    const auto fit = pko::fit_from_json(pko::read_json_file(a.model));
    pko::SynthesisOptions opts;
    opts.require_verified = false;
    if (!a.config.empty()) opts = pko::synthesis_options(pko::load_config(a.config));
    if (!a.lambda_grid.empty()) {
        const auto g = parse_grid(a.lambda_grid);
        opts.lambda_lo = g[0];
        opts.lambda_hi = g[1];
        opts.lambda_points = static_cast<int>(g[2]);
    }
    if (a.margin) {
        if (!(*a.margin > 0.0)) throw pko::ConfigError("--margin must be > 0");
        opts.margin = a.margin;
    }
    if (a.gain_bound) {
        if (!(*a.gain_bound > 0.0)) throw pko::ConfigError("--gain-bound must be > 0");
        opts.gain_bound = a.gain_bound;
    }
    if (a.rho && !(*a.rho >= 0.0)) throw pko::ConfigError("--rho must be >= 0");
    const auto outcome = pko::synthesize(fit, opts, false, a.rho);
    const fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    pko::write_json_file(out, pko::certificate_to_json(outcome.cert, a.timing));
    print_certificate(outcome.cert);
    return outcome.cert.verified ? kExitOk : kExitError;
}

int cmd_simulate(const Common& c, int trial) {
    auto cfg = resolve(c);
    cfg.keep_traces = 1;
    const auto prep = pko::prepare(cfg);
    const auto res = pko::run_trial(prep, trial, true);
    pko::write_common(c.out, prep);
    pko::write_text_file(fs::path(c.out) / "trace.csv", pko::trace_csv(res));
    for (std::size_t o = 0; o < 3; ++o)
        std::cout << pko::kObserverNames[o] << " rmse " << res.observers[o].rmse
                  << (res.observers[o].diverged ? " (diverged)" : "") << '\n';
    return kExitOk;
}

int cmd_bench(const Common& c, const std::string& which) {
    const auto cfg = resolve(c, which);
    const auto prep = pko::prepare(cfg);
    const auto out = pko::run_benchmark(prep);
    pko::write_benchmark(c.out, prep, out);
    std::cout << pko::report_text(prep, out.summary, out.results);
    if (2 * out.summary.divergent_trials > out.summary.trials) {
        std::cerr << "error: " << out.summary.divergent_trials << " of " << out.summary.trials << " trials diverged\n";
        return kExitDiverged;
    }
    return kExitOk;
}

int cmd_sweep(const Common& c) {
    auto cfg = resolve(c);
    if (c.trials) cfg.sweep.trials = *c.trials;
    const auto prep = pko::prepare(cfg);
    const auto res = pko::sweep_epsilon(prep);
    pko::write_sweep(c.out, prep, res);
    std::cout << pko::sweep_report(prep, res);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Persidskii-Koopman observer toolkit"};
    app.require_subcommand(1);

    Common fit_c, sim_c, bench_c, sweep_c;
    SynthArgs synth;
    int sim_trial = 0;
    std::string bench_which;

    auto* fit = app.add_subcommand("fit", "identify a Koopman model from simulated training data");
    add_common(fit, fit_c, true);

    auto* syn = app.add_subcommand("synth", "synthesize a PKO gain and certificate for a model");
    syn->add_option("--model", synth.model, "model.json from `pko fit`")->required()->check(CLI::ExistingFile);
    syn->add_option("--out", synth.out, "certificate output path")->required();
    syn->add_option("--config", synth.config, "experiment config supplying synthesis settings")->check(CLI::ExistingFile);
    syn->add_option("--seed", synth.seed, "accepted for interface uniformity; synthesis is deterministic");
    syn->add_option("--lambda-grid", synth.lambda_grid, "lo,hi,n log-spaced multiplier grid");
    syn->add_option("--margin", synth.margin, "strictness margin on the LMI");
    syn->add_option("--rho", synth.rho, "residual slope used in the LMI (certificate coordinates)");
    syn->add_option("--gain-bound", synth.gain_bound, "cap on |K| entries in certificate coordinates");
    syn->add_flag("--timing", synth.timing, "record solver wall time");

    auto* sim = app.add_subcommand("simulate", "simulate one evaluation trial with all observers");
    add_common(sim, sim_c, true);
    sim->add_option("--trial", sim_trial, "trial index")->check(CLI::NonNegativeNumber);

    auto* bench = app.add_subcommand("bench", "run the Monte-Carlo benchmark");
    bench->add_option("benchmark", bench_which, "vdp or arm")->required()->check(CLI::IsMember({"vdp", "arm"}));
    add_common(bench, bench_c, false);
    bench->add_option("--trials", bench_c.trials, "number of trials (overrides the config)");

    auto* sweep = app.add_subcommand("sweep-epsilon", "residual-magnitude sweep on a lifted truth");
    add_common(sweep, sweep_c, true);
    sweep->add_option("--trials", sweep_c.trials, "trials per epsilon (overrides the config)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitError;
    }

    try {
        if (*fit) return cmd_fit(fit_c);
        if (*syn) return cmd_synth(synth);
        if (*sim) return cmd_simulate(sim_c, sim_trial);
        if (*bench) return cmd_bench(bench_c, bench_which);
        if (*sweep) return cmd_sweep(sweep_c);
    } catch (const pko::SynthesisInfeasible& e) {
        std::cerr << "synthesis infeasible: " << e.what() << '\n';
        return kExitInfeasible;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitError;
    }
    return kExitError;
}
