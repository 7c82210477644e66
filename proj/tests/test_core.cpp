#include <algorithm>
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "pko/edmd.hpp"
#include "pko/lifting.hpp"
#include "pko/persidskii.hpp"
#include "pko/systems.hpp"

using namespace pko;

namespace {

DictionarySpec preset(const std::string& name) {
    DictionarySpec s;
    s.preset = name;
    return s;
}

DictionarySpec explicit_quadratic() {
    DictionarySpec s;
    s.state_dim = 2;
    s.entries = {basis::Identity{0}, basis::Identity{1}, basis::Monomial{{2, 0}}};
    return s;
}

Vec vec(std::initializer_list<double> v) { return from_std(std::vector<double>(v)); }

}  // namespace

// ---------------------------------------------------------------------------
// lifting
// ---------------------------------------------------------------------------

TEST(Lifting, PresetSizes) {
    const auto v = build_dictionary(preset("vdp15"));
    const auto a = build_dictionary(preset("arm20"));
    EXPECT_EQ(v.total_dim(), 15);
    EXPECT_EQ(a.total_dim(), 20);
    for (const auto* d : {&v, &a}) {
        EXPECT_EQ(detail::kind_name(d->entries()[0]), "identity");
        EXPECT_EQ(detail::kind_name(d->entries()[1]), "identity");
    }
    EXPECT_EQ(build_dictionary(explicit_quadratic()).total_dim(), 3);
}

TEST(Lifting, RejectsBadDictionaries) {
    DictionarySpec s = explicit_quadratic();
    s.entries = {basis::Identity{1}, basis::Identity{0}, basis::Monomial{{2, 0}}};
    EXPECT_THROW(build_dictionary(s), InvalidInput);
    s.entries = {basis::Identity{0}, basis::Identity{1}, basis::Monomial{{2, 0}}, basis::Monomial{{2, 0}}};
    EXPECT_THROW(build_dictionary(s), InvalidInput);
    s.entries = {basis::Identity{0}, basis::Identity{1}};
    EXPECT_THROW(build_dictionary(s), InvalidInput);
    s.allow_square = true;
    EXPECT_NO_THROW(build_dictionary(s));
    EXPECT_THROW(build_dictionary(preset("nope")), InvalidInput);
}

TEST(Lifting, ExplicitLiftAndJacobian) {
    const auto d = build_dictionary(explicit_quadratic());
    const Vec z = lift(d, vec({2, 3}));
    EXPECT_EQ(z, vec({2, 3, 4}));
    Mat expected(3, 2);
    expected << 1, 0, 0, 1, 4, 0;
    EXPECT_EQ(lift_jacobian(d, vec({2, 3})), expected);
    EXPECT_THROW(lift(d, vec({1, 2, 3})), InvalidInput);
}

TEST(Lifting, OriginValues) {
    for (const char* name : {"vdp15", "arm20"}) {
        const auto d = build_dictionary(preset(name));
        const Vec z = lift(d, Vec::Zero(2));
        for (int i = 0; i < d.total_dim(); ++i) {
            const auto kind = detail::kind_name(d.entries()[static_cast<std::size_t>(i)]);
            if (kind == "cosine") EXPECT_EQ(z[i], 1.0);
            else EXPECT_NEAR(z[i], 0.0, 1e-15) << name << " entry " << i;
        }
    }
}

TEST(Lifting, Vdp15MatchesSymbolicOracle) {
    // tests/oracles/oracles.py: vdp15_lift_11
    const Vec expected = vec({1, 1, 1, 1, 1, 1, 0.8414709848078965, 0.8414709848078965, 0.9092974268256817,
                              0.9092974268256817, 0.9092974268256817, 0, 0.1411200080598672, 0.1411200080598672,
                              0.1411200080598672});
    const Vec z = lift(build_dictionary(preset("vdp15")), vec({1, 1}));
    EXPECT_LT((z - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Lifting, Vdp15JacobianMatchesOracleAndFiniteDifferences) {
    // tests/oracles/oracles.py: vdp15_jac_05_m1
    Mat expected(15, 2);
    expected << 1, 0, 0, 1, 0.75, 0, -1, 0.25, 1, -1, 0, 3, 0.8775825618903728, 0, 0, 0.5403023058681398,
        1.0806046117362795, 0, 0, -0.8322936730942848, 0.8775825618903728, 0.8775825618903728, 0.0707372016677029,
        -0.0707372016677029, 0.2122116050031087, 0, 0, -2.9699774898013365, 2, 1;
    const auto d = build_dictionary(preset("vdp15"));
    const Vec x = vec({0.5, -1});
    const Mat j = lift_jacobian(d, x);
    EXPECT_LT((j - expected).cwiseAbs().maxCoeff(), 1e-13);
    const double h = 1e-6;
    for (int c = 0; c < 2; ++c) {
        const Vec e = h * Vec::Unit(2, c);
        const Vec fd = (lift(d, x + e) - lift(d, x - e)) / (2 * h);
        EXPECT_LT((fd - j.col(c)).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(Lifting, JacobianIdentityPrefixProperty) {
    rng::Stream s(3, 1);
    for (const char* name : {"vdp15", "arm20"}) {
        const auto d = build_dictionary(preset(name));
        for (int k = 0; k < 50; ++k) {
            const Vec x = vec({s.uniform(-3, 3), s.uniform(-3, 3)});
            const Mat j = lift_jacobian(d, x);
            EXPECT_EQ(j.topRows(2), Mat::Identity(2, 2));
            for (int c = 0; c < 2; ++c) {
                const Vec e = 1e-6 * Vec::Unit(2, c);
                const Vec fd = (lift(d, x + e) - lift(d, x - e)) / 2e-6;
                EXPECT_LT((fd - j.col(c)).cwiseAbs().maxCoeff(), 1e-5 * (1 + j.col(c).cwiseAbs().maxCoeff()));
            }
        }
    }
}

TEST(Lifting, OutputMatrix) {
    const auto v = build_dictionary(preset("vdp15"));
    const Mat c = output_matrix(v, {0});
    EXPECT_EQ(c.rows(), 1);
    EXPECT_EQ(c.cols(), 15);
    EXPECT_EQ(c, Mat(Vec::Unit(15, 0).transpose()));
    EXPECT_EQ(output_matrix(build_dictionary(preset("arm20")), {0}), Mat(Vec::Unit(20, 0).transpose()));
    const Mat both = output_matrix(v, {0, 1});
    EXPECT_EQ(both.leftCols(2), Mat::Identity(2, 2));
    EXPECT_TRUE(both.rightCols(13).isZero(0));
    EXPECT_THROW(output_matrix(v, {2}), InvalidInput);
    EXPECT_THROW(output_matrix(v, {0, 0}), InvalidInput);
}

TEST(Lifting, SpecJsonRoundTripAndHash) {
    for (const auto& spec : {preset("vdp15"), preset("arm20"), explicit_quadratic()}) {
        const auto d = build_dictionary(spec);
        const auto back = build_dictionary(spec_from_json(spec_to_json(spec)));
        EXPECT_EQ(dictionary_hash(d), dictionary_hash(back));
        const Vec x = vec({0.3, -0.7});
        EXPECT_EQ(lift(d, x), lift(back, x));
    }
    EXPECT_NE(dictionary_hash(build_dictionary(preset("vdp15"))), dictionary_hash(build_dictionary(preset("arm20"))));
    auto j = spec_to_json(preset("vdp15"));
    j["bogus"] = 1;
    EXPECT_THROW(spec_from_json(j), ConfigError);
}

TEST(Lifting, PresetsAreOdd) {
    rng::Stream s(9, 2);
    for (const char* name : {"vdp15", "arm20"}) {
        const auto d = build_dictionary(preset(name));
        for (int k = 0; k < 20; ++k) {
            const Vec x = vec({s.uniform(-2, 2), s.uniform(-2, 2)});
            EXPECT_LT((lift(d, -x) + lift(d, x)).norm(), 1e-12);
        }
    }
}

// ---------------------------------------------------------------------------
// systems
// ---------------------------------------------------------------------------

TEST(Systems, VdpHandValues) {
    const VdpParams p;
    EXPECT_EQ(vdp_dynamics(vec({0, 0}), 0, p), vec({0, 0}));
    EXPECT_EQ(vdp_dynamics(vec({1, 1}), 0, p), vec({1, -1}));
    EXPECT_EQ(vdp_dynamics(vec({2, 0}), 0.5, p), vec({0, -1.5}));
    EXPECT_THROW(make_vdp_plant(VdpParams{0.0}), InvalidInput);
}

TEST(Systems, ArmHandValues) {
    ArmParams p;
    EXPECT_LT(arm_dynamics(vec({0, 0}), 0, p).norm(), 1e-15);
    EXPECT_NEAR(arm_dynamics(vec({std::numbers::pi / 2, 0}), 0, p)[1], -9.81, 1e-12);
    p.sgn_smoothing = 1e-6;
    EXPECT_NEAR(arm_dynamics(vec({0, 1}), 0, p)[1], -2.0, 1e-9);
    ArmParams bad;
    bad.J = 0;
    EXPECT_THROW(make_arm_plant(bad), InvalidInput);
}

TEST(Systems, JacobiansMatchFiniteDifferences) {
    rng::Stream s(5, 5);
    for (const Plant& plant : {make_vdp_plant({}), make_arm_plant({}), make_exact_lift_plant(-0.5, -1.0)}) {
        for (int k = 0; k < 20; ++k) {
            const Vec x = vec({s.uniform(-2, 2), s.uniform(-2, 2)});
            const Vec u = Vec::Constant(plant.input_dim, 0.3);
            const Mat j = plant.jacobian(x, u);
            for (int c = 0; c < 2; ++c) {
                const Vec e = 1e-6 * Vec::Unit(2, c);
                const Vec fd = (plant.dynamics(x + e, u, 0) - plant.dynamics(x - e, u, 0)) / 2e-6;
                EXPECT_LT((fd - j.col(c)).norm(), 1e-5) << plant.name;
            }
        }
    }
}

TEST(Systems, Rk4) {
    auto decay = [](const Vec& x, const Vec&, double) -> Vec { return -x; };
    const Vec next = rk4_step(decay, vec({1}), Vec(), 0, 0.1);
    // tests/oracles/oracles.py: rk4_decay
    EXPECT_NEAR(next[0], 0.9048375000000001, 1e-15);
    EXPECT_NEAR(next[0], std::exp(-0.1), 1e-7);
    auto zero = [](const Vec& x, const Vec&, double) -> Vec { return Vec::Zero(x.size()); };
    EXPECT_EQ(rk4_step(zero, vec({1.5, -2}), Vec(), 0, 0.3), vec({1.5, -2}));
    auto one = [](const Vec&, const Vec&, double) -> Vec { return vec({1}); };
    EXPECT_EQ(rk4_step(one, vec({2}), Vec(), 0, 0.25)[0], 2.25);
    auto blow = [](const Vec& x, const Vec&, double) -> Vec { return x.array().square() * 1e300; };
    EXPECT_THROW(rk4_step(blow, vec({1e10}), Vec(), 0, 1.0), IntegrationBlowup);
    EXPECT_THROW(rk4_step(decay, vec({1}), Vec(), 0, 0.0), InvalidInput);
}

TEST(Systems, VdpReachesLimitCycle) {
    const auto tr = simulate_plant(make_vdp_plant({}), vec({0.2, 0}), zero_input(1, 10, 0.02), 10, 0.02, {});
    const Vec x10 = tr.states.col(tr.length() - 1);
    EXPECT_GE(x10.norm(), 1.5);
    EXPECT_LE(x10.norm(), 2.5);
    // tests/oracles/oracles.py: vdp_x10 (DOP853, tol 1e-12)
    EXPECT_LT((x10 - vec({-1.4724912227999158, 0.8024318960754385})).norm(), 1e-4);
}

TEST(Systems, TraceShapesNoiseAndDeterminism) {
    const auto plant = make_vdp_plant({});
    const Mat u = prbs_torque(11, 2, 0.02, 1.0, 10);
    const auto a = simulate_plant(plant, vec({1, 0}), u, 2, 0.02, {0.01, 4, 9});
    const auto b = simulate_plant(plant, vec({1, 0}), u, 2, 0.02, {0.01, 4, 9});
    const auto clean = simulate_plant(plant, vec({1, 0}), u, 2, 0.02, {});
    EXPECT_EQ(a.length(), 101);
    EXPECT_EQ(a.states, b.states);
    EXPECT_EQ(a.outputs_noisy, b.outputs_noisy);
    EXPECT_EQ(clean.outputs_noisy, clean.outputs_clean);
    EXPECT_NE(a.outputs_noisy, a.outputs_clean);
    for (std::size_t k = 1; k < a.times.size(); ++k) EXPECT_NEAR(a.times[k] - a.times[k - 1], 0.02, 1e-15);
    EXPECT_THROW(simulate_plant(plant, vec({1, 0}), u, 2, 0.03, {}), InvalidInput);
    EXPECT_THROW(simulate_plant(plant, vec({1, 0}), u.leftCols(10), 2, 0.02, {}), InvalidInput);
    EXPECT_THROW(simulate_plant(plant, vec({1, 0}), u, 2, 0.02, {-1.0, 0, 0}), InvalidInput);
}

TEST(Systems, NoiseStatistics) {
    const NoiseSpec n{0.04, 17, 3};
    double s = 0, ss = 0;
    const int N = 20000;
    for (int k = 0; k < N; ++k) {
        const double v = noise_sample(n, k, 0);
        s += v;
        ss += v * v;
    }
    EXPECT_NEAR(s / N, 0.0, 5 * 0.2 / std::sqrt(N));
    EXPECT_NEAR(ss / N, 0.04, 0.04 * 0.05);
}

TEST(Systems, PrbsProperties) {
    const Mat c = prbs_torque(7, 1, 0.1, 2, 11);
    EXPECT_TRUE((c.array() == c(0, 0)).all());
    EXPECT_TRUE(prbs_torque(7, 1, 0.1, 0, 3).isZero(0));
    // Kolmogorov-Smirnov statistic of 1e4 held levels against U[-2, 2].
    const Mat u = prbs_torque(7, 1e4, 1.0, 2.0, 10);
    std::vector<double> levels;
    for (Index k = 0; k + 10 <= u.cols() && levels.size() < 10000; k += 10) levels.push_back(u(0, k));
    ASSERT_EQ(levels.size(), 1000u);
    const Mat u2 = prbs_torque(7, 1e5, 1.0, 2.0, 10);
    levels.clear();
    for (Index k = 0; k < u2.cols() && levels.size() < 10000; k += 10) levels.push_back(u2(0, k));
    ASSERT_EQ(levels.size(), 10000u);
    std::sort(levels.begin(), levels.end());
    double d = 0;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const double f = (levels[i] + 2.0) / 4.0;
        d = std::max({d, std::abs(f - static_cast<double>(i) / 1e4), std::abs(f - static_cast<double>(i + 1) / 1e4)});
    }
    // 1% critical value for n = 1e4.
    EXPECT_LT(d, 1.63 / std::sqrt(1e4));
}

TEST(Systems, ExactLiftMatrixIsExact) {
    const double a = -0.5, b = -1.0;
    const auto plant = make_exact_lift_plant(a, b);
    DictionarySpec s;
    s.preset = "exact3";
    const auto d = build_dictionary(s);
    rng::Stream r(1, 1);
    for (int k = 0; k < 20; ++k) {
        const Vec x = vec({r.uniform(-2, 2), r.uniform(-2, 2)});
        const Vec lhs = lift_jacobian(d, x) * plant.dynamics(x, Vec(), 0);
        EXPECT_LT((lhs - exact_lift_matrix(a, b) * lift(d, x)).norm(), 1e-12);
    }
}

// ---------------------------------------------------------------------------
// edmd
// ---------------------------------------------------------------------------

namespace {

TrajectoryDataset linear_dataset(const Mat& m, double dt, int traces, double duration) {
    DictionarySpec s;
    s.state_dim = 2;
    s.entries = {basis::Identity{0}, basis::Identity{1}};
    s.allow_square = true;
    TrajectoryDataset data{{}, build_dictionary(s)};
    const auto plant = make_linear_plant(m, Mat::Zero(2, 0), {0});
    for (int i = 0; i < traces; ++i) {
        const Vec x0 = vec({std::cos(1.3 * i), std::sin(0.7 * i + 0.2)});
        data.traces.push_back(simulate_plant(plant, x0, zero_input(0, duration, dt), duration, dt, {}));
    }
    return data;
}

}  // namespace

TEST(Edmd, RecoversLinearPlant) {
    Mat m(2, 2);
    m << 0, 1, -1, -0.5;
    const auto data = linear_dataset(m, 0.002, 5, 4);
    EdmdOptions o;
    o.ridge_lambda = 0.0;
    const auto model = fit_edmd(data, o);
    EXPECT_LT((model.A - m).norm(), 1e-4);
    EXPECT_EQ(model.B.cols(), 0);
    // Residual is zero for an exactly identified linear plant.
    KoopmanModel exact = model;
    exact.A = m;
    const auto plant = make_linear_plant(m, Mat::Zero(2, 0), {0});
    EXPECT_LT(true_residual(exact, plant, vec({0.3, -1}), Vec()).norm(), 1e-10);
}

TEST(Edmd, EquilibriumDataIsSingular) {
    Mat m = Mat::Zero(2, 2);
    DictionarySpec s;
    s.state_dim = 2;
    s.entries = {basis::Identity{0}, basis::Identity{1}};
    s.allow_square = true;
    TrajectoryDataset data{{}, build_dictionary(s)};
    data.traces.push_back(simulate_plant(make_linear_plant(m, Mat::Zero(2, 0), {0}), Vec::Zero(2),
                                         zero_input(0, 10, 0.1), 10, 0.1, {}));
    EdmdOptions o;
    o.ridge_lambda = 0.0;
    EXPECT_THROW(fit_edmd(data, o), SingularSystem);
}

TEST(Edmd, InjectedModelErrorShiftsResidual) {
    Mat m(2, 2);
    m << 0, 1, -1, -0.5;
    auto model = fit_edmd(linear_dataset(m, 0.01, 4, 3));
    const auto plant = make_linear_plant(m, Mat::Zero(2, 0), {0});
    const Vec x = vec({0.4, 0.9});
    const Vec before = true_residual(model, plant, x, Vec());
    Mat e(2, 2);
    e << 0.1, -0.2, 0.05, 0.3;
    model.A += e;
    const Vec after = true_residual(model, plant, x, Vec());
    EXPECT_LT((after - before + e * lift(model.dictionary, x)).norm(), 1e-14);
}

TEST(Edmd, VdpModelQuality) {
    const auto plant = make_vdp_plant({});
    TrajectoryDataset data{{}, build_dictionary(preset("vdp15"))};
    std::vector<Trace> valid;
    for (int i = 0; i < 200; ++i) {
        const Vec x0 = vec({rng::uniform(-2.5, 2.5, 1, 2, i, 0), rng::uniform(-2.5, 2.5, 1, 2, i, 1)});
        auto tr = simulate_plant(plant, x0, prbs_torque(100 + i, 10, 0.02, 1.0, 10), 10, 0.02, {});
        (i % 5 == 0 ? valid : data.traces).push_back(std::move(tr));
    }
    const auto model = fit_edmd(data);
    EXPECT_LT(spectral_abscissa(model.A), 0.5);
    EXPECT_GT(model.omega_max, 0.0);
    // One-step lifted prediction on held-out data.
    double err = 0, sig = 0;
    for (const auto& tr : valid)
        for (Index k = 0; k + 1 < tr.length(); ++k) {
            const auto f = [&](const Vec& z, const Vec& u, double) -> Vec { return model.A * z + model.B * u; };
            const Vec zp = rk4_step(f, lift(model.dictionary, tr.states.col(k)), tr.inputs.col(k), 0, 0.02);
            err += (zp.head(2) - tr.states.col(k + 1)).squaredNorm();
            sig += tr.states.col(k + 1).squaredNorm();
        }
    EXPECT_LT(std::sqrt(err / sig), 0.1);
    const auto rc = estimate_residual_bound(model, plant, valid);
    EXPECT_TRUE(std::isfinite(rc.epsilon));
    EXPECT_GT(rc.epsilon, 0.0);
    for (const auto& [zn, dn] : rc.residual_samples) EXPECT_LE(dn, rc.rho * zn + rc.eta_bar + 1e-9);
}

TEST(Edmd, PlantedResidualEnvelopes) {
    std::vector<std::pair<double, double>> lin, cst, zero;
    for (int k = 0; k < 500; ++k) {
        const double z = 0.1 + 0.01 * k;
        lin.emplace_back(z, 0.08 * z);
        cst.emplace_back(z, 0.05);
        zero.emplace_back(z, 0.0);
    }
    const auto a = fit_residual_envelope(lin);
    // tests/oracles/oracles.py: envelope_planted
    EXPECT_NEAR(a.rho, 0.08, 0.08 / 99);
    EXPECT_NEAR(a.eta_bar, 0.0, 1e-3);
    const auto b = fit_residual_envelope(cst);
    EXPECT_NEAR(b.rho, 0.0, 1e-12);
    EXPECT_NEAR(b.eta_bar, 0.05, 1e-12);
    const auto c = fit_residual_envelope(zero);
    EXPECT_EQ(c.rho, 0.0);
    EXPECT_EQ(c.eta_bar, 0.0);
    EXPECT_EQ(c.epsilon, 0.0);
    EXPECT_THROW(fit_residual_envelope({}), InvalidInput);
}

TEST(Edmd, EnvelopeCoversSamplesProperty) {
    rng::Stream s(21, 0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::pair<double, double>> smp;
        for (int k = 0; k < 200; ++k) smp.emplace_back(s.uniform(0, 5), s.uniform(0, 2));
        const auto rc = fit_residual_envelope(smp);
        EXPECT_GE(rc.rho, 0.0);
        EXPECT_GE(rc.eta_bar, 0.0);
        for (const auto& [z, d] : rc.residual_samples) EXPECT_LE(d, rc.rho * z + rc.eta_bar + 1e-12);
    }
}

TEST(Edmd, SplitTracesIsSeededPartition) {
    const auto [tr, va] = split_traces(200, 0.8, 5);
    EXPECT_EQ(tr.size(), 160u);
    EXPECT_EQ(va.size(), 40u);
    std::vector<std::size_t> all(tr);
    all.insert(all.end(), va.begin(), va.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
    EXPECT_EQ(split_traces(200, 0.8, 5), split_traces(200, 0.8, 5));
    EXPECT_NE(split_traces(200, 0.8, 5).second, split_traces(200, 0.8, 6).second);
}

TEST(Edmd, ModelJsonRoundTrip) {
    Mat m(2, 2);
    m << 0, 1, -1, -0.5;
    const auto model = fit_edmd(linear_dataset(m, 0.01, 3, 2));
    const auto back = model_from_json(model_to_json(model));
    EXPECT_EQ(back.A, model.A);
    EXPECT_EQ(back.B, model.B);
    EXPECT_EQ(back.C_o, model.C_o);
    EXPECT_EQ(back.measured, model.measured);
    auto j = model_to_json(model);
    j["A"] = std::vector<double>{1, 2, 3};
    EXPECT_THROW(model_from_json(j), InvalidInput);
}

// ---------------------------------------------------------------------------
// persidskii
// ---------------------------------------------------------------------------

TEST(Sector, Evaluations) {
    const auto t1 = make_sector(SectorKind::tanh_scaled, Vec::Ones(1));
    EXPECT_EQ(sector_eval(t1, vec({0}))[0], 0.0);
    const auto sat = make_sector(SectorKind::saturation, Vec::Ones(1), 1.0);
    EXPECT_EQ(sector_eval(sat, vec({2}))[0], 1.0);
    const auto t2 = make_sector(SectorKind::tanh_scaled, vec({2}));
    // tests/oracles/oracles.py: tanh_scaled_2_1
    EXPECT_NEAR(sector_eval(t2, vec({1}))[0], 1.5231883119115297, 1e-15);
    EXPECT_THROW(make_sector(SectorKind::tanh_scaled, vec({0})), InvalidInput);
    EXPECT_THROW(make_sector(SectorKind::saturation, vec({1}), 0.0), InvalidInput);
    EXPECT_EQ(sector_kind_from_string("deadzone"), SectorKind::deadzone);
    EXPECT_THROW(sector_kind_from_string("cubic"), InvalidInput);
}

TEST(Sector, ShippedKindsPassAndViolatorFails) {
    for (auto kind : {SectorKind::tanh_scaled, SectorKind::saturation, SectorKind::deadzone})
        for (double k : {0.3, 1.0, 4.0}) {
            const auto rep = sector_check(make_sector(kind, vec({k, 2 * k}), 0.7));
            EXPECT_TRUE(rep.pass) << to_string(kind) << " kappa " << k;
            EXPECT_GE(rep.min_margin, -1e-12);
        }
    const auto bad = sector_check([](int, double s) { return 2 * s; }, vec({1}));
    EXPECT_FALSE(bad.pass);
    EXPECT_NE(bad.witness, 0.0);
    EXPECT_THROW(sector_check(make_sector(SectorKind::tanh_scaled, vec({1})), SectorGrid{5.0, 10001}), InvalidInput);
}

TEST(Sector, OddAndZeroAtOriginProperty) {
    rng::Stream s(8, 8);
    for (auto kind : {SectorKind::tanh_scaled, SectorKind::saturation, SectorKind::deadzone}) {
        const auto sg = make_sector(kind, vec({1.7}), 0.5);
        EXPECT_EQ(sector_eval(sg, vec({0}))[0], 0.0);
        for (int k = 0; k < 200; ++k) {
            const double v = s.uniform(-20, 20);
            EXPECT_EQ(sector_eval(sg, vec({v}))[0], -sector_eval(sg, vec({-v}))[0]);
            const double f = sector_eval(sg, vec({v}))[0];
            EXPECT_GE(f * (v - f / 1.7), -1e-12);
        }
    }
}

TEST(Split, PlantedStructure) {
    const int N = 400;
    std::vector<SplitSample> two, one;
    for (int k = 0; k < N; ++k) {
        const Vec e = vec({-3 + 6.0 * k / (N - 1), 2.5 * std::sin(0.7 * k)});
        const Vec d = 0.5 * e.array().tanh().matrix() + Vec::Constant(2, 0.1 * std::sin(0.05 * k));
        two.push_back({e, d});
        one.push_back({e.head(1), d.head(1)});
    }
    const auto s2 = split_residual(two, Vec::Ones(2));
    // tests/oracles/oracles.py: split_gains, split_d_bound
    EXPECT_NEAR(s2.gains[0], 0.5, 1e-3);
    EXPECT_NEAR(s2.gains[1], 0.5, 1e-3);
    EXPECT_NEAR(s2.d_bound, 0.141419256663019, 2e-4);
    const auto s1 = split_residual(one, Vec::Ones(1));
    EXPECT_NEAR(s1.gains[0], 0.5, 1e-3);
    EXPECT_LE(s1.d_bound, 0.11);
    const auto trivial = split_residual(two, Vec::Zero(2));
    EXPECT_TRUE(trivial.gains.isZero(0));
    double dmax = 0;
    for (const auto& s : two) dmax = std::max(dmax, s.delta.norm());
    EXPECT_DOUBLE_EQ(trivial.d_bound, dmax);
}

TEST(Split, ZeroResidual) {
    std::vector<SplitSample> z;
    for (int k = 0; k < 50; ++k) z.push_back({vec({0.1 * k, -0.05 * k}), Vec::Zero(2)});
    const auto s = split_residual(z, Vec::Ones(2));
    EXPECT_TRUE(s.gains.isZero(0));
    EXPECT_EQ(s.d_bound, 0.0);
    EXPECT_THROW(split_residual({}, Vec::Ones(2)), InvalidInput);
}

namespace {

KoopmanModel toy_model(const Mat& a, const Mat& c) {
    KoopmanModel m;
    DictionarySpec s;
    s.state_dim = static_cast<int>(a.rows());
    for (int i = 0; i < s.state_dim; ++i) s.entries.emplace_back(basis::Identity{i});
    s.allow_square = true;
    m.dictionary = build_dictionary(s);
    m.A = a;
    m.B = Mat::Zero(a.rows(), 0);
    m.C_o = c;
    m.measured = {0};
    return m;
}

}  // namespace

TEST(Embedding, ChannelStructure) {
    const auto model = toy_model(-Mat::Identity(2, 2), Mat(Vec::Unit(2, 0).transpose()));
    const auto sigma = make_sector(SectorKind::tanh_scaled, vec({1}));
    ResidualSplit none{Vec::Zero(2), Vec::Ones(2), 0.0};
    const auto em = embed_error_dynamics(model, Mat(Vec::Unit(2, 0)), sigma, none);
    ASSERT_EQ(em.channels.size(), 1u);
    EXPECT_EQ(em.channels[0].b, Vec::Unit(2, 0));
    EXPECT_EQ(em.channels[0].c, Vec::Unit(2, 0));
    const auto zero = embed_error_dynamics(model, Mat::Zero(2, 1), sigma, none);
    EXPECT_TRUE(zero.channels.empty());
    const Vec e = vec({0.3, -0.2}), d = vec({0.1, 0.4});
    EXPECT_EQ(zero.rhs(e, d), model.A * e + d);
    EXPECT_THROW(embed_error_dynamics(model, Mat::Zero(3, 1), sigma, none), InvalidInput);
    ResidualSplit over{vec({2.0, 0.0}), Vec::Ones(2), 0.0};
    EXPECT_THROW(embed_error_dynamics(model, Mat::Zero(2, 1), sigma, over), InvalidInput);
}

TEST(Embedding, ChannelSumEqualsDirectForm) {
    rng::Stream s(44, 0);
    const int r = 6, p = 2;
    Mat a(r, r), k(r, p), c = Mat::Zero(p, r);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) a(i, j) = s.normal();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < p; ++j) k(i, j) = s.normal();
    c(0, 0) = 1;
    c(1, 1) = 1;
    auto model = toy_model(a, c);
    model.measured = {0, 1};
    const auto sigma = make_sector(SectorKind::saturation, vec({1.5, 0.7}), 0.8);
    ResidualSplit split{vec({0.2, 0, 0.5, 0.1, 0, 0.9}), Vec::Ones(r), 0.3};
    const auto em = embed_error_dynamics(model, k, sigma, split, 0.1);
    EXPECT_EQ(em.channels.size(), 2u + 4u);
    for (int t = 0; t < 100; ++t) {
        Vec e(r), d(r);
        for (int i = 0; i < r; ++i) {
            e[i] = s.uniform(-3, 3);
            d[i] = s.uniform(-1, 1);
        }
        const Vec direct = a * e - k * sector_eval(sigma, c * e) - split.gamma(e) + d;
        EXPECT_LT((em.rhs(e, d) - direct).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((em.rhs_direct(e, d) - direct).cwiseAbs().maxCoeff(), 1e-12);
    }
    EXPECT_NEAR(em.disturbance_bound, 0.3 + k.operatorNorm() * 1.5 * 0.3, 1e-12);
}
