#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include <eitmem/core.hpp>
#include <eitmem/spectral_ensemble.hpp>

namespace eitmem {

using matrix3c = Eigen::Matrix3cd;

/**
 * 3x3 density matrix of one detuning class at one grid point. Row/column 0
 * is |1>, 1 is |2>, 2 is |3>; entry (i, j) = <i|rho|j>.
 */
class density_matrix
{
public:
    density_matrix() : m_rho(matrix3c::Zero()) { m_rho(0, 0) = 1.0; }
    explicit density_matrix(const matrix3c& rho) : m_rho(rho) {}

    static density_matrix ground() { return density_matrix(); }

    /// projector onto a normalized copy of psi
    static density_matrix pure(const Eigen::Vector3cd& psi)
    {
        const Eigen::Vector3cd v = psi.normalized();
        return density_matrix(v * v.adjoint());
    }

    const matrix3c& matrix() const { return m_rho; }
    matrix3c& matrix() { return m_rho; }
    complex operator()(int i, int j) const { return m_rho(i, j); }
    complex& operator()(int i, int j) { return m_rho(i, j); }

    real trace() const { return m_rho.trace().real(); }

    real hermiticity_defect() const
    {
        return (m_rho - m_rho.adjoint()).cwiseAbs().maxCoeff();
    }

    real min_eigenvalue() const
    {
        const matrix3c h = 0.5 * (m_rho + m_rho.adjoint());
        Eigen::SelfAdjointEigenSolver<matrix3c> solver(
            h, Eigen::EigenvaluesOnly);
        return solver.eigenvalues().minCoeff();
    }

    void symmetrize() { m_rho = 0.5 * (m_rho + m_rho.adjoint()).eval(); }

private:
    matrix3c m_rho;
};

/**
 * Rabi frequencies (rad/s) in the frame co-rotating with the probe and
 * coupling carriers. The interaction Hamiltonian element is -Omega/2.
 */
struct drive_fields
{
    complex omega_p = 0.0;
    complex omega_c = 0.0;
    /// RF drive on |1>-|2>, only non-zero during finite-duration pulses
    complex omega_rf = 0.0;
};

/// RF rephasing pulse on the spin transition.
struct rf_pulse
{
    real area = std::numbers::pi;
    real phase = 0.0;
    /// 22 us pulses; ignored when instantaneous
    real duration = 22e-6;
    bool instantaneous = true;

    void validate() const
    {
        if (!(area > 0) || area > two_pi) {
            throw config_error("rf_pulse: area must lie in (0, 2 pi]");
        }
        if (duration < 0) {
            throw config_error("rf_pulse: duration must be >= 0");
        }
        if (!instantaneous && duration == 0) {
            throw config_error("rf_pulse: finite pulse needs a duration");
        }
    }

    bool operator==(const rf_pulse&) const = default;
};

/// Rotating-frame Hamiltonian of one class.
inline matrix3c lambda_hamiltonian(const drive_fields& f,
                                   const detuning_class& k)
{
    matrix3c h = matrix3c::Zero();
    h(1, 1) = -k.delta_spin;
    h(2, 2) = k.delta_opt;
    h(2, 0) = -0.5 * f.omega_p;
    h(0, 2) = std::conj(h(2, 0));
    h(2, 1) = -0.5 * f.omega_c;
    h(1, 2) = std::conj(h(2, 1));
    h(1, 0) = -0.5 * f.omega_rf;
    h(0, 1) = std::conj(h(1, 0));
    return h;
}

/**
 * Master-equation right-hand side: -i[H, rho] plus excited-state decay with
 * branching into |1>, |2> and phenomenological coherence decay.
 */
inline matrix3c bloch_rhs(const density_matrix& rho, const drive_fields& f,
                          const detuning_class& k, const level_scheme& s)
{
    const complex i(0.0, 1.0);
    const matrix3c& r = rho.matrix();
    const matrix3c h = lambda_hamiltonian(f, k);
    matrix3c d = -i * (h * r - r * h);

    const complex r33 = r(2, 2);
    d(0, 0) += s.b1 * s.gamma3 * r33;
    d(1, 1) += s.b2 * s.gamma3 * r33;
    d(2, 2) -= s.gamma3 * r33;
    d(0, 2) -= s.gamma_opt * r(0, 2);
    d(2, 0) -= s.gamma_opt * r(2, 0);
    d(1, 2) -= s.gamma_opt * r(1, 2);
    d(2, 1) -= s.gamma_opt * r(2, 1);
    d(0, 1) -= s.gamma_spin_static * r(0, 1);
    d(1, 0) -= s.gamma_spin_static * r(1, 0);
    return d;
}

/// Largest stable step: 0.1 over the fastest rate in the problem.
inline real max_stable_step(real fastest_rate)
{
    return fastest_rate > 0 ? 0.1 / fastest_rate
                            : std::numeric_limits<real>::infinity();
}

inline real fastest_rate(const drive_fields& f, const detuning_class& k,
                         const level_scheme& s)
{
    return std::max({std::abs(f.omega_p), std::abs(f.omega_c),
                     std::abs(f.omega_rf), std::abs(k.delta_opt),
                     std::abs(k.delta_spin), s.gamma3});
}

/**
 * One classical RK4 step with constant drives. The result is
 * re-symmetrized; the trace is left alone so drift stays observable.
 */
inline density_matrix step_rk4(const density_matrix& rho,
                               const drive_fields& f, const detuning_class& k,
                               const level_scheme& s, real dt)
{
    if (dt > max_stable_step(fastest_rate(f, k, s)) * (1.0 + 1e-12)) {
        throw step_size_error("step_rk4: dt exceeds 0.1 / fastest rate");
    }
    const matrix3c k1 = bloch_rhs(rho, f, k, s);
    const matrix3c k2 =
        bloch_rhs(density_matrix(rho.matrix() + 0.5 * dt * k1), f, k, s);
    const matrix3c k3 =
        bloch_rhs(density_matrix(rho.matrix() + 0.5 * dt * k2), f, k, s);
    const matrix3c k4 =
        bloch_rhs(density_matrix(rho.matrix() + dt * k3), f, k, s);
    density_matrix out(rho.matrix() + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
    out.symmetrize();
    return out;
}

/// Exact evolution over t with every field off.
inline density_matrix free_evolve(const density_matrix& rho,
                                  const detuning_class& k,
                                  const level_scheme& s, real t)
{
    const complex i(0.0, 1.0);
    matrix3c r = rho.matrix();
    const real decay = std::exp(-s.gamma3 * t);
    const complex r33 = r(2, 2);
    r(0, 0) += s.b1 * r33 * (1.0 - decay);
    r(1, 1) += s.b2 * r33 * (1.0 - decay);
    r(2, 2) = r33 * decay;
    /* rho_ij picks up exp(-i (E_i - E_j) t) with E = (0, -delta, Delta) */
    const complex f21 = std::exp((i * k.delta_spin - s.gamma_spin_static) * t);
    const complex f31 = std::exp((-i * k.delta_opt - s.gamma_opt) * t);
    const complex f32 =
        std::exp((-i * (k.delta_opt + k.delta_spin) - s.gamma_opt) * t);
    r(1, 0) *= f21;
    r(0, 1) *= std::conj(f21);
    r(2, 0) *= f31;
    r(0, 2) *= std::conj(f31);
    r(2, 1) *= f32;
    r(1, 2) *= std::conj(f32);
    return density_matrix(r);
}

/// Spin-transition rotation exp(-i H t) for an instantaneous pulse.
inline matrix3c rf_rotation(const rf_pulse& p)
{
    const complex i(0.0, 1.0);
    const real c = std::cos(0.5 * p.area);
    const real sn = std::sin(0.5 * p.area);
    matrix3c u = matrix3c::Identity();
    u(0, 0) = c;
    u(1, 1) = c;
    u(1, 0) = i * sn * std::exp(i * p.phase);
    u(0, 1) = i * sn * std::exp(-i * p.phase);
    return u;
}

/// Instantaneous RF pulse: unitary rotation in the {|1>, |2>} subspace.
inline density_matrix apply_rf_pulse(const density_matrix& rho,
                                     const rf_pulse& p)
{
    p.validate();
    const matrix3c u = rf_rotation(p);
    density_matrix out(u * rho.matrix() * u.adjoint());
    out.symmetrize();
    return out;
}

/**
 * RF pulse honouring its mode: instantaneous pulses rotate directly, finite
 * pulses integrate a constant RF drive of the stated duration with the
 * class detunings and decay active and the optical fields off.
 */
inline density_matrix apply_rf_pulse(const density_matrix& rho,
                                     const rf_pulse& p,
                                     const detuning_class& k,
                                     const level_scheme& s)
{
    p.validate();
    if (p.instantaneous) {
        return apply_rf_pulse(rho, p);
    }
    drive_fields f;
    f.omega_rf = std::polar(p.area / p.duration, p.phase);
    const real h = max_stable_step(fastest_rate(f, k, s));
    const int n = std::max(1, static_cast<int>(std::ceil(p.duration / h)));
    const real dt = p.duration / n;
    density_matrix out = rho;
    for (int j = 0; j < n; ++j) {
        out = step_rk4(out, f, k, s, dt);
    }
    return out;
}

} // namespace eitmem
