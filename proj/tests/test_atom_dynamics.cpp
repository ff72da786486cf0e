#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include <eitmem/atom_dynamics.hpp>
#include <eitmem/propagation.hpp>

#include "oracles.hpp"

using namespace eitmem;

namespace {

density_matrix random_state(std::mt19937_64& rng)
{
    std::normal_distribution<real> n;
    Eigen::Matrix3cd a;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            a(i, j) = complex(n(rng), n(rng));
    matrix3c r = a * a.adjoint();
    r /= r.trace().real();
    return density_matrix(r);
}

level_scheme lossless()
{
    level_scheme s;
    s.gamma3 = 0.0;
    s.gamma_opt = 0.0;
    return s;
}

real max_abs(const matrix3c& m) { return m.cwiseAbs().maxCoeff(); }

} // namespace

TEST(BlochRhs, PureExcitedStateDecay)
{
    level_scheme s;
    matrix3c r = matrix3c::Zero();
    r(2, 2) = 1.0;
    const matrix3c d = bloch_rhs(density_matrix(r), {}, {}, s);
    EXPECT_NEAR(d(2, 2).real(), -s.gamma3, 1e-12 * s.gamma3);
    EXPECT_NEAR(d(0, 0).real(), s.b1 * s.gamma3, 1e-12 * s.gamma3);
    EXPECT_NEAR(d(1, 1).real(), s.b2 * s.gamma3, 1e-12 * s.gamma3);
}

TEST(BlochRhs, TracelessAndHermitian)
{
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<real> u(-5e4, 5e4);
    level_scheme s;
    s.gamma_spin_static = 40.0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto rho = random_state(rng);
        drive_fields f{complex(u(rng), u(rng)), complex(u(rng), u(rng)),
                       complex(u(rng), u(rng))};
        const detuning_class k{u(rng), u(rng), 1.0};
        const matrix3c d = bloch_rhs(rho, f, k, s);
        EXPECT_NEAR(std::abs(d.trace()), 0.0, 1e-12 * 1e5);
        EXPECT_LE(max_abs(d - d.adjoint()), 1e-10);
    }
}

TEST(BlochRhs, DarkStateIsStationary)
{
    const level_scheme s;
    drive_fields f;
    f.omega_p = complex(3.0, 1.0);
    f.omega_c = complex(5.0, -2.0);
    Eigen::Vector3cd psi(f.omega_c, -f.omega_p, 0.0);
    const auto rho = density_matrix::pure(psi);
    EXPECT_LE(max_abs(bloch_rhs(rho, f, {}, s)), 1e-12);
}

TEST(BlochRhs, KernelMatchesMatrixForm)
{
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<real> u(-3e5, 3e5);
    level_scheme s;
    s.gamma_spin_static = 123.0;
    const detail::rates r(s);
    for (int trial = 0; trial < 50; ++trial) {
        const auto rho = random_state(rng);
        drive_fields f{complex(u(rng), u(rng)), complex(u(rng), u(rng)),
                       complex(u(rng), u(rng))};
        const detuning_class k{u(rng), u(rng), 1.0};
        const detail::lambda_vars x{rho(0, 0).real(), rho(1, 1).real(),
                                    rho(2, 2).real(), rho(1, 0).real(),
                                    rho(1, 0).imag(), rho(2, 0).real(),
                                    rho(2, 0).imag(), rho(2, 1).real(),
                                    rho(2, 1).imag()};
        auto check = [&](const detail::lambda_vars& g, const drive_fields& fd) {
            const matrix3c d = bloch_rhs(rho, fd, k, s);
            const real tol = 1e-12 * 1e6;
            EXPECT_NEAR(g.p1, d(0, 0).real(), tol);
            EXPECT_NEAR(g.p2, d(1, 1).real(), tol);
            EXPECT_NEAR(g.p3, d(2, 2).real(), tol);
            EXPECT_NEAR(g.ar, d(1, 0).real(), tol);
            EXPECT_NEAR(g.ai, d(1, 0).imag(), tol);
            EXPECT_NEAR(g.br, d(2, 0).real(), tol);
            EXPECT_NEAR(g.bi, d(2, 0).imag(), tol);
            EXPECT_NEAR(g.cr, d(2, 1).real(), tol);
            EXPECT_NEAR(g.ci, d(2, 1).imag(), tol);
        };
        check(detail::lambda_rhs<true>(
                  x, k.delta_opt, k.delta_spin, 0.5 * f.omega_p.real(),
                  0.5 * f.omega_p.imag(), 0.5 * f.omega_c.real(),
                  0.5 * f.omega_c.imag(), 0.5 * f.omega_rf.real(),
                  0.5 * f.omega_rf.imag(), r),
              f);
        /* the RF-free variant ignores the RF arguments */
        drive_fields no_rf = f;
        no_rf.omega_rf = 0.0;
        check(detail::lambda_rhs<false>(
                  x, k.delta_opt, k.delta_spin, 0.5 * f.omega_p.real(),
                  0.5 * f.omega_p.imag(), 0.5 * f.omega_c.real(),
                  0.5 * f.omega_c.imag(), 0.5 * f.omega_rf.real(),
                  0.5 * f.omega_rf.imag(), r),
              no_rf);
    }
}

TEST(StepRk4, FusedCellKernelMatchesSingleClassSteps)
{
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<real> u(-2e5, 2e5);
    inhomogeneous_profile p;
    p.n_opt = 21;
    p.n_spin = 5;
    const auto classes = discretize_profile(p);
    const level_scheme s;
    medium_state m(classes, 8);
    std::vector<density_matrix> start;
    for (std::size_t k = 0; k < classes.size(); ++k) {
        start.push_back(random_state(rng));
        m.set(0, k, start.back());
    }
    drive_fields f{complex(u(rng), u(rng)), complex(u(rng), u(rng)),
                   complex(u(rng), u(rng))};
    const real dt = 1e-7;
    const detail::class_constants cc(classes);
    const detail::rates r(s);
    real* y[medium_state::n_components];
    for (int q = 0; q < medium_state::n_components; ++q) {
        y[q] = m.data(static_cast<medium_state::component>(q));
    }
    const complex P[4] = {f.omega_p, f.omega_p, f.omega_p, f.omega_p};
    complex S[4];
    detail::rk4_cell(y, cc, r, classes.size(), P, f.omega_c, f.omega_rf, dt, S);
    complex s0 = 0.0;
    for (std::size_t k = 0; k < classes.size(); ++k) {
        const auto ref = step_rk4(start[k], f, classes[k], s, dt);
        EXPECT_LE(max_abs(m.at(0, k).matrix() - ref.matrix()), 1e-13);
        s0 += classes[k].weight * start[k](2, 0);
    }
    EXPECT_NEAR(std::abs(S[0] - s0), 0.0, 1e-14);
}

TEST(StepRk4, FreeSpinPrecession)
{
    const level_scheme s = lossless();
    const detuning_class k{0.0, hz_to_rad(5e3), 1.0};
    const density_matrix rho =
        density_matrix::pure(Eigen::Vector3cd(1.0, 1.0, 0.0));
    const real dt = 0.01 / k.delta_spin;
    const auto out = step_rk4(rho, {}, k, s, dt);
    const complex expected = rho(0, 1) * std::exp(complex(0.0, -k.delta_spin * dt));
    EXPECT_NEAR(std::abs(out(0, 1) - expected), 0.0, 1e-10);
}

TEST(StepRk4, GuardThrows)
{
    const level_scheme s;
    drive_fields f;
    f.omega_c = 1e6;
    EXPECT_THROW(step_rk4(density_matrix{}, f, {}, s, 0.11 / 1e6),
                 step_size_error);
    EXPECT_NO_THROW(step_rk4(density_matrix{}, f, {}, s, 0.1 / 1e6));
}

TEST(StepRk4, CouplingPiPulseTransfersPopulation)
{
    const level_scheme s = lossless();
    drive_fields f;
    f.omega_c = hz_to_rad(100e3);
    matrix3c r = matrix3c::Zero();
    r(1, 1) = 1.0;
    density_matrix rho(r);
    const int n = 200;
    const real dt = std::numbers::pi / f.omega_c.real() / n;
    for (int i = 0; i < n; ++i) {
        rho = step_rk4(rho, f, {}, s, dt);
    }
    EXPECT_NEAR(rho(2, 2).real(), 1.0, 1e-6);
    EXPECT_NEAR(rho(1, 1).real(), 0.0, 1e-6);
}

namespace {

/* error after integrating a resonant Rabi problem with decay to time T */
real rk4_error(int n_steps)
{
    const level_scheme s;
    drive_fields f;
    f.omega_p = hz_to_rad(40e3);
    f.omega_c = hz_to_rad(70e3);
    const detuning_class k{hz_to_rad(10e3), hz_to_rad(2e3), 1.0};
    const real T = 20e-6;
    const matrix3c exact = oracle::propagate(density_matrix{}.matrix(), f, k, s, T);
    density_matrix rho;
    for (int i = 0; i < n_steps; ++i) {
        rho = step_rk4(rho, f, k, s, T / n_steps);
    }
    return max_abs(rho.matrix() - exact);
}

} // namespace

TEST(StepRk4, RichardsonRatioIsSixteen)
{
    const real e1 = rk4_error(100);
    const real e2 = rk4_error(200);
    EXPECT_NEAR(e1 / e2, 16.0, 0.2 * 16.0);
}

TEST(StepRk4, FourthOrderOverOneDecade)
{
    const real e1 = rk4_error(100);
    const real e10 = rk4_error(1000);
    const real ratio = e1 / e10;
    EXPECT_GT(ratio, 1e4 / 2.0);
    EXPECT_LT(ratio, 1e4 * 2.0);
}

TEST(FreeEvolve, MatchesLiouvillianExponential)
{
    std::mt19937_64 rng(8);
    level_scheme s;
    s.gamma_spin_static = 50.0;
    const detuning_class k{hz_to_rad(31e3), hz_to_rad(-4e3), 1.0};
    for (int trial = 0; trial < 10; ++trial) {
        const auto rho = random_state(rng);
        const real t = 1e-4 * (trial + 1);
        const matrix3c exact = oracle::propagate(rho.matrix(), {}, k, s, t);
        EXPECT_LE(max_abs(free_evolve(rho, k, s, t).matrix() - exact), 1e-12);
    }
}

TEST(RfPulse, PiPulseSwapsGroundStates)
{
    const auto out = apply_rf_pulse(density_matrix{}, rf_pulse{});
    EXPECT_NEAR(out(0, 0).real(), 0.0, 1e-15);
    EXPECT_NEAR(out(1, 1).real(), 1.0, 1e-15);
}

TEST(RfPulse, TwoPiPulsesRestoreState)
{
    std::mt19937_64 rng(2);
    for (real phase : {0.0, 0.7, -2.0}) {
        const auto rho = random_state(rng);
        rf_pulse p;
        p.phase = phase;
        const auto out = apply_rf_pulse(apply_rf_pulse(rho, p), p);
        /* the rotation by 2 pi is -1 on {|1>,|2>}; the density matrix
           then differs from rho only in the sign of the optical
           coherences */
        matrix3c expected = rho.matrix();
        for (int i = 0; i < 2; ++i) {
            expected(i, 2) = -expected(i, 2);
            expected(2, i) = -expected(2, i);
        }
        EXPECT_LE(max_abs(out.matrix() - expected), 1e-9);
        EXPECT_NEAR(std::abs(out(0, 1)), std::abs(rho(0, 1)), 1e-12);
    }
}

TEST(RfPulse, PreservesSpinCoherenceMagnitude)
{
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const auto rho = random_state(rng);
        rf_pulse p;
        p.phase = 0.3 * trial;
        const auto out = apply_rf_pulse(rho, p);
        EXPECT_NEAR(std::abs(out(0, 1)), std::abs(rho(0, 1)), 1e-12);
        /* rho12 -> e^{2i phi} rho21 */
        const complex expected = std::exp(complex(0, -2.0 * p.phase)) * rho(1, 0);
        EXPECT_NEAR(std::abs(out(0, 1) - expected), 0.0, 1e-12);
    }
}

TEST(RfPulse, FiniteDurationMatchesInstantaneousOnResonance)
{
    const level_scheme s = lossless();
    const density_matrix rho =
        density_matrix::pure(Eigen::Vector3cd(1.0, complex(0.3, 0.5), 0.0));
    rf_pulse finite;
    finite.instantaneous = false;
    const auto a = apply_rf_pulse(rho, finite, {}, s);
    const auto b = apply_rf_pulse(rho, rf_pulse{});
    EXPECT_LE(max_abs(a.matrix() - b.matrix()), 1e-5);
}

TEST(RfPulse, RejectsBadArea)
{
    rf_pulse p;
    p.area = 0.0;
    EXPECT_THROW(apply_rf_pulse(density_matrix{}, p), config_error);
    p.area = 7.0;
    EXPECT_THROW(apply_rf_pulse(density_matrix{}, p), config_error);
}

TEST(Echo, StaticSpinSpreadIsRefocused)
{
    const level_scheme s = lossless();
    inhomogeneous_profile prof;
    prof.n_opt = 1;
    prof.n_spin = 41;
    const auto classes = discretize_profile(prof);
    const density_matrix start =
        density_matrix::pure(Eigen::Vector3cd(1.0, 0.6, 0.0));
    const real tau = 3e-3;
    complex s0 = 0.0, s_mid = 0.0, s_echo = 0.0;
    for (const auto& k : classes) {
        auto rho = free_evolve(start, k, s, tau);
        s_mid += k.weight * rho(0, 1);
        rho = apply_rf_pulse(rho, rf_pulse{});
        rho = free_evolve(rho, k, s, tau);
        s0 += k.weight * start(0, 1);
        s_echo += k.weight * rho(0, 1);
    }
    EXPECT_LT(std::abs(s_mid), 0.01 * std::abs(s0));
    EXPECT_NEAR(std::abs(s_echo), std::abs(s0), 1e-9);
}

TEST(DensityMatrix, Diagnostics)
{
    const auto rho = density_matrix::pure(Eigen::Vector3cd(1.0, 2.0, 2.0));
    EXPECT_NEAR(rho.trace(), 1.0, 1e-15);
    EXPECT_LE(rho.hermiticity_defect(), 1e-16);
    EXPECT_NEAR(rho.min_eigenvalue(), 0.0, 1e-15);
}
