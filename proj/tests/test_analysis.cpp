#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include <eitmem/analysis.hpp>

using namespace eitmem;

namespace {

std::vector<real> uniform(real t0, real t1, std::size_t n)
{
    std::vector<real> t(n);
    for (std::size_t i = 0; i < n; ++i) {
        t[i] = t0 + (t1 - t0) * i / (n - 1);
    }
    return t;
}

decay_curve exponential(real a, real tau, const std::vector<real>& t)
{
    decay_curve c;
    c.times = t;
    for (real x : t) {
        c.energies.push_back(a * std::exp(-x / tau));
    }
    return c;
}

medium_setup small_setup()
{
    medium_setup m;
    m.gr.n_z = 8;
    inhomogeneous_profile p;
    p.n_opt = 21;
    p.n_spin = 5;
    m.classes = discretize_profile(p);
    return m;
}

} // namespace

TEST(IntegratePower, SquarePulse)
{
    const real omega = 1234.5;
    const auto t = uniform(-20e-6, 0.0, 101);
    std::vector<complex> f(t.size(), complex(omega, 0.0));
    EXPECT_NEAR(integrate_power(t, f, -20e-6, 0.0), omega * omega * 20e-6,
                1e-9 * omega * omega * 20e-6);
}

TEST(IntegratePower, PhaseAndTimeShiftInvariance)
{
    const auto t = uniform(0.0, 1e-3, 500);
    std::vector<complex> f, g;
    for (real x : t) {
        f.push_back(std::sin(7e3 * x) * 3.0);
        g.push_back(std::polar(3.0 * std::sin(7e3 * x), 1.234));
    }
    const real e = integrate_power(t, f, 0.0, 1e-3);
    EXPECT_NEAR(integrate_power(t, g, 0.0, 1e-3), e, 1e-12 * e);
    std::vector<real> shifted;
    for (real x : t) {
        shifted.push_back(x + 0.25);
    }
    EXPECT_NEAR(integrate_power(shifted, f, 0.25, 0.25 + 1e-3), e, 1e-9 * e);
}

TEST(IntegratePower, PartialWindowAndErrors)
{
    const std::vector<real> t{0.0, 1.0, 2.0};
    const std::vector<complex> f{1.0, 1.0, 1.0};
    EXPECT_NEAR(integrate_power(t, f, 0.5, 1.5), 1.0, 1e-15);
    EXPECT_THROW(integrate_power(t, f, 1.0, 1.0), analysis_error);
    EXPECT_THROW(integrate_power(t, f, 3.0, 4.0), analysis_error);
    EXPECT_THROW(integrate_power(t, {1.0}, 0.0, 1.0), analysis_error);
}

TEST(FitExponential, RecoversExactDecay)
{
    const auto c = exponential(2.5, 0.35, {0.1, 0.2, 0.4, 0.7, 1.0, 1.5, 2.0});
    const auto r = fit_exponential(c);
    EXPECT_TRUE(r.converged);
    EXPECT_NEAR(r.tau, 0.35, 1e-9);
    EXPECT_NEAR(r.amplitude, 2.5, 1e-9);
    EXPECT_LT(r.residual_norm, 1e-10);
}

TEST(FitExponential, TwoPointsInClosedForm)
{
    const auto r = fit_exponential(exponential(1.0, 2.3, {0.1, 1.0}));
    EXPECT_NEAR(r.tau, 2.3, 1e-12);
    EXPECT_NEAR(r.amplitude, 1.0, 1e-12);
}

TEST(FitExponential, ScaleEquivariance)
{
    std::mt19937_64 rng(2);
    std::normal_distribution<real> n(0.0, 0.02);
    auto c = exponential(1.0, 0.5, uniform(0.05, 2.0, 12));
    for (real& e : c.energies) {
        e *= 1.0 + n(rng);
    }
    const auto a = fit_exponential(c);
    auto scaled = c;
    for (real& e : scaled.energies) {
        e *= 1e-7;
    }
    const auto b = fit_exponential(scaled);
    EXPECT_NEAR(b.tau, a.tau, 1e-12 * a.tau);
    EXPECT_NEAR(b.amplitude, 1e-7 * a.amplitude, 1e-12 * 1e-7 * a.amplitude);
}

/* repeated fits to noisy data scatter around the true constant */
TEST(FitExponential, NoisyFitsAreUnbiased)
{
    std::mt19937_64 rng(4);
    std::normal_distribution<real> n(0.0, 0.01);
    const real tau = 0.8;
    const auto t = uniform(0.1, 2.0, 10);
    int covered = 0;
    const int trials = 400;
    std::vector<real> taus;
    for (int k = 0; k < trials; ++k) {
        auto c = exponential(1.0, tau, t);
        for (real& e : c.energies) {
            e += n(rng);
        }
        taus.push_back(fit_exponential(c).tau);
    }
    real mean = 0.0;
    for (real x : taus) {
        mean += x;
    }
    mean /= trials;
    real var = 0.0;
    for (real x : taus) {
        var += (x - mean) * (x - mean);
    }
    const real sd = std::sqrt(var / (trials - 1));
    for (real x : taus) {
        covered += std::abs(x - tau) <= 1.96 * sd ? 1 : 0;
    }
    EXPECT_NEAR(mean, tau, 3.0 * sd / std::sqrt(trials) + 1e-3);
    EXPECT_GE(covered, static_cast<int>(0.92 * trials));
    EXPECT_LE(covered, static_cast<int>(0.98 * trials));
}

TEST(FitExponential, RejectsBadCurves)
{
    EXPECT_THROW(fit_exponential(exponential(1.0, 1.0, {0.5})), analysis_error);
    auto c = exponential(1.0, 1.0, {0.1, 0.2, 0.3});
    c.energies[1] = 0.0;
    EXPECT_THROW(fit_exponential(c), analysis_error);
    auto d = exponential(1.0, 1.0, {0.1, 0.3, 0.2});
    EXPECT_THROW(fit_exponential(d), analysis_error);
}

TEST(EitFwhm, LorentzianWindow)
{
    spectrum s;
    const real hwhm = 5e3;
    for (real f : uniform(-500e3, 500e3, 20001)) {
        s.frequency_hz.push_back(f);
        s.transmission.push_back(0.2 + 0.6 / (1.0 + (f / hwhm) * (f / hwhm)));
    }
    EXPECT_NEAR(eit_fwhm(s), 10e3, 0.01 * 10e3);
}

TEST(EitFwhm, IgnoresRippleAndRejectsFlatSpectra)
{
    spectrum s;
    for (real f : uniform(-100e3, 100e3, 2001)) {
        s.frequency_hz.push_back(f);
        s.transmission.push_back(0.85 + 0.001 * std::cos(f / 500.0) +
                                 0.1 * std::exp(-f * f / (2.0 * 4e3 * 4e3)));
    }
    EXPECT_NEAR(eit_fwhm(s), 2.0 * std::sqrt(2.0 * std::log(2.0)) * 4e3, 0.05 * 9.4e3);

    spectrum flat;
    flat.frequency_hz = uniform(-1.0, 1.0, 11);
    flat.transmission.assign(11, 0.85);
    EXPECT_THROW(eit_fwhm(flat), analysis_error);
}

TEST(AnalyzeLinearity, ExactLineAndSaturation)
{
    std::vector<linearity_point> pts;
    for (real a : {0.02, 0.04, 0.06, 0.08, 0.1, 0.2, 0.3, 0.4, 0.5}) {
        const real in = a * a;
        /* saturating response: linear below 0.2, compressed above */
        const real out = 0.01 * in * (a <= 0.2 ? 1.0 : std::exp(-(a - 0.2) * 2.0));
        pts.push_back({a, in, out});
    }
    const auto r = analyze_linearity(pts, 0.1, 0.1);
    EXPECT_EQ(r.n_fit, 5u);
    EXPECT_NEAR(r.slope, 0.01, 1e-12);
    EXPECT_NEAR(r.r_squared, 1.0, 1e-12);
    ASSERT_TRUE(r.first_deviating_area.has_value());
    EXPECT_DOUBLE_EQ(*r.first_deviating_area, 0.3);
    ASSERT_TRUE(r.onset_area.has_value());
    EXPECT_GT(*r.onset_area, 0.2);
    EXPECT_LT(*r.onset_area, 0.3);
}

TEST(AnalyzeLinearity, NeedsThreeLowAreaPoints)
{
    std::vector<linearity_point> pts{{0.05, 1.0, 1.0}, {0.1, 2.0, 2.0}, {0.5, 9.0, 9.0}};
    EXPECT_THROW(analyze_linearity(pts, 0.1), analysis_error);
}

TEST(Linearity, DoublingAreaQuadruplesRecall)
{
    const auto m = small_setup();
    const auto r = linearity_scan({0.02 * std::numbers::pi, 0.04 * std::numbers::pi,
                                   0.06 * std::numbers::pi},
                                  8e-3, {}, m);
    const auto& p = r.points;
    EXPECT_NEAR(p[1].input_energy / p[0].input_energy, 4.0, 1e-9);
    EXPECT_NEAR(p[1].output_energy / p[0].output_energy, 4.0, 0.05 * 4.0);
    EXPECT_GT(r.r_squared, 0.999);
    EXPECT_FALSE(r.first_deviating_area.has_value());
    EXPECT_THROW(linearity_scan({0.2, 0.1}, 8e-3, {}, m), config_error);
}

TEST(DecayScan, NoiseFreeScanIsFlat)
{
    const auto m = small_setup();
    const auto r = decay_scan({0.008, 0.016, 0.04}, {}, m);
    ASSERT_EQ(r.simple.size(), 3u);
    ASSERT_EQ(r.ddc.size(), 3u);
    EXPECT_DOUBLE_EQ(r.ddc[0].storage_time, 0.008);
    EXPECT_DOUBLE_EQ(r.ddc[2].storage_time, 0.04);
    for (std::size_t i = 1; i < 3; ++i) {
        EXPECT_NEAR(r.simple[i].energy, r.simple[0].energy, 1e-4 * r.simple[0].energy);
        EXPECT_NEAR(r.ddc[i].energy, r.ddc[0].energy, 1e-4 * r.ddc[0].energy);
        EXPECT_EQ(r.simple[i].envelope, 1.0);
    }
}

TEST(Heterodyne, ZeroSignalDemodulatesToZero)
{
    const std::vector<complex> env(1024, 0.0);
    const auto beat = heterodyne_trace(env, 1e-8, 5e6, 2.0);
    for (real b : beat) {
        EXPECT_NEAR(b, 4.0, 1e-12);
    }
    for (const auto& x : demodulate(beat, 1e-8, 5e6, 2.0)) {
        EXPECT_LT(std::abs(x), 1e-12);
    }
}

TEST(Heterodyne, RoundTripRecoversEnvelope)
{
    const real dt = 1e-8;
    const std::size_t n = 4096;
    std::vector<complex> env(n);
    for (std::size_t i = 0; i < n; ++i) {
        const real t = (static_cast<real>(i) - n / 2.0) * dt;
        env[i] = std::polar(0.3 * std::exp(-t * t / (2.0 * 3e-6 * 3e-6)), 0.7 + 2e5 * t);
    }
    const auto back = demodulate(heterodyne_trace(env, dt, 10e6, 1.5), dt, 10e6, 1.5);
    real worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        worst = std::max(worst, std::abs(back[i] - env[i]));
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(Heterodyne, DetectorBandwidthAttenuates)
{
    const real dt = 1e-8;
    const std::size_t n = 4096;
    const real df = 1.0 / (n * dt);
    /* tone and LO on exact DFT bins */
    const real f_lo = 400 * df;
    const real tone = 82 * df;
    std::vector<complex> env(n);
    for (std::size_t i = 0; i < n; ++i) {
        env[i] = std::polar(0.2, two_pi * tone * i * dt);
    }
    const auto beat = heterodyne_trace(env, dt, f_lo);
    const detector_response det{f_lo, 1e6, 4};
    const auto back = demodulate(beat, dt, f_lo, 1.0, det);
    const real g = det.gain(f_lo + tone);
    EXPECT_LT(g, 1e-2);
    for (std::size_t i = 0; i < n; i += 97) {
        EXPECT_NEAR(std::abs(back[i]), 0.2 * g, 1e-9);
    }
    const detector_response ref{10e6, 1e6, 4};
    EXPECT_NEAR(ref.gain(12e6), 1.0 / std::sqrt(1.0 + std::pow(16.0, 4)), 1e-15);
    EXPECT_NEAR(ref.gain(10e6), 1.0, 1e-15);
    EXPECT_THROW(heterodyne_trace(env, dt, 60e6), config_error);
}

TEST(SweepSpectrum, CoversTheFlatPartInOrder)
{
    auto m = small_setup();
    m.classes = {detuning_class{}};
    const auto s = make_eit_sweep(300e3, 0.4e-3, 0.0);
    const auto rec = run_sequence(s, m.gr, m.geo, m.classes, m.scheme, m.run);
    const auto sp = sweep_spectrum(rec, *s.sweep());
    ASSERT_GT(sp.frequency_hz.size(), 100u);
    EXPECT_GT(sp.frequency_hz.front(), -150e3);
    EXPECT_LT(sp.frequency_hz.back(), 150e3);
    for (std::size_t i = 1; i < sp.frequency_hz.size(); ++i) {
        EXPECT_GT(sp.frequency_hz[i], sp.frequency_hz[i - 1]);
    }
    for (real t : sp.transmission) {
        EXPECT_GT(t, 0.0);
    }
    EXPECT_NEAR(transmission_at(sp, 1e9), sp.transmission.back(), 0.0);
}
