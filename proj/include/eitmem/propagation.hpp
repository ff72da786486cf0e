#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <eitmem/atom_dynamics.hpp>
#include <eitmem/core.hpp>
#include <eitmem/decoherence.hpp>
#include <eitmem/sequence.hpp>
#include <eitmem/spectral_ensemble.hpp>

namespace eitmem {

/// Uniform 1D grid along the propagation axis.
struct grid
{
    real length = 4e-3;
    int n_z = 16;

    void validate() const
    {
        if (!(length > 0)) {
            throw config_error("grid: length must be positive");
        }
        if (n_z < 8) {
            throw config_error("grid: n_z must be >= 8");
        }
    }

    real dz() const { return length / n_z; }
};

/// Beam geometry and the wavevector data needed for phase matching.
struct geometry
{
    beam_geometry mode = beam_geometry::counter;
    /// nominal wavelengths of the 606 nm Pr:YSO line
    real lambda_p = 605.98e-9;
    real lambda_c = 605.98e-9;
    /// residual co-propagating mismatch (1/m)
    real residual_mismatch_co = 100.0;

    void validate() const
    {
        if (!(lambda_p > 0) || !(lambda_c > 0)) {
            throw config_error("geometry: wavelengths must be positive");
        }
        if (!(residual_mismatch_co >= 0)) {
            throw config_error("geometry: residual mismatch must be >= 0");
        }
    }
};

inline real sinc(real x)
{
    return std::abs(x) < 1e-8 ? 1.0 - x * x / 6.0 : std::sin(x) / x;
}

/**
 * Amplitude overlap |(1/L) int exp(i dk z) dz| of a reversed spin wave with
 * the readout. Even flip counts restore the original wavevector.
 */
inline real phase_matching_factor(const geometry& g, int flip_count,
                                  const grid& gr)
{
    if (flip_count % 2 == 0) {
        return 1.0;
    }
    const real ks = g.mode == beam_geometry::counter
                        ? two_pi / g.lambda_p + two_pi / g.lambda_c
                        : g.residual_mismatch_co;
    return std::abs(sinc(ks * gr.length));
}

/**
 * Ensemble state over (z, class) in structure-of-arrays form. Only the
 * independent entries of the Hermitian density matrix are kept:
 * populations p1..p3 and the coherences a = rho21, b = rho31, c = rho32.
 */
class medium_state
{
public:
    enum component { p1, p2, p3, ar, ai, br, bi, cr, ci, n_components };

    medium_state(std::vector<detuning_class> classes, int n_z)
        : m_classes(std::move(classes)), m_n_z(n_z)
    {
        if (m_classes.empty()) {
            throw config_error("medium_state: no detuning classes");
        }
        const std::size_t n = size();
        for (auto& c : m_data) {
            c.assign(n, 0.0);
        }
        std::fill(m_data[p1].begin(), m_data[p1].end(), 1.0);
    }

    std::size_t n_classes() const { return m_classes.size(); }
    int n_z() const { return m_n_z; }
    std::size_t size() const { return m_classes.size() * m_n_z; }
    const std::vector<detuning_class>& classes() const { return m_classes; }

    real* data(component c) { return m_data[c].data(); }
    const real* data(component c) const { return m_data[c].data(); }

    std::size_t index(int z, std::size_t k) const
    {
        return static_cast<std::size_t>(z) * m_classes.size() + k;
    }

    density_matrix at(std::size_t i) const
    {
        matrix3c r;
        const complex a(m_data[ar][i], m_data[ai][i]);
        const complex b(m_data[br][i], m_data[bi][i]);
        const complex c(m_data[cr][i], m_data[ci][i]);
        r(0, 0) = m_data[p1][i];
        r(1, 1) = m_data[p2][i];
        r(2, 2) = m_data[p3][i];
        r(1, 0) = a;
        r(0, 1) = std::conj(a);
        r(2, 0) = b;
        r(0, 2) = std::conj(b);
        r(2, 1) = c;
        r(1, 2) = std::conj(c);
        return density_matrix(r);
    }

    density_matrix at(int z, std::size_t k) const { return at(index(z, k)); }

    /// Stores the Hermitian part of rho.
    void set(std::size_t i, const density_matrix& rho)
    {
        const matrix3c& r = rho.matrix();
        m_data[p1][i] = r(0, 0).real();
        m_data[p2][i] = r(1, 1).real();
        m_data[p3][i] = r(2, 2).real();
        const complex a = 0.5 * (r(1, 0) + std::conj(r(0, 1)));
        const complex b = 0.5 * (r(2, 0) + std::conj(r(0, 2)));
        const complex c = 0.5 * (r(2, 1) + std::conj(r(1, 2)));
        m_data[ar][i] = a.real();
        m_data[ai][i] = a.imag();
        m_data[br][i] = b.real();
        m_data[bi][i] = b.imag();
        m_data[cr][i] = c.real();
        m_data[ci][i] = c.imag();
    }

    void set(int z, std::size_t k, const density_matrix& rho)
    {
        set(index(z, k), rho);
    }

    /// sum_k w_k rho12 in cell z
    complex spin_wave(int z) const
    {
        complex s = 0.0;
        for (std::size_t k = 0; k < m_classes.size(); ++k) {
            const std::size_t i = index(z, k);
            s += m_classes[k].weight * complex(m_data[ar][i], -m_data[ai][i]);
        }
        return s;
    }

    /// sum_k w_k rho31 in cell z
    complex optical_polarization(int z) const
    {
        complex s = 0.0;
        for (std::size_t k = 0; k < m_classes.size(); ++k) {
            const std::size_t i = index(z, k);
            s += m_classes[k].weight * complex(m_data[br][i], m_data[bi][i]);
        }
        return s;
    }

    /* sum_k w_k |x_k| averaged over z, for one coherence */
    real mean_abs(component re, component im) const
    {
        real s = 0.0;
        for (int z = 0; z < m_n_z; ++z) {
            for (std::size_t k = 0; k < m_classes.size(); ++k) {
                const std::size_t i = index(z, k);
                s += m_classes[k].weight * std::hypot(m_data[re][i], m_data[im][i]);
            }
        }
        return s / m_n_z;
    }

    /// current spin-wave wavevector orientation
    int spinwave_sign = 1;
    int flip_count = 0;

private:
    std::vector<detuning_class> m_classes;
    int m_n_z;
    std::vector<real> m_data[n_components];
};

/// One entry of the run's event log.
struct log_entry
{
    real t;
    std::string what;
};

/// Spin-wave profile and coherence totals at a labelled instant.
struct snapshot
{
    real t;
    std::string label;
    /// S(z) = sum_k w_k rho12(z)
    std::vector<complex> spin_wave;
    /// sum_k w_k |rho12|, averaged over z
    real spin_abs = 0.0;
    /// sum_k w_k |rho13|, averaged over z
    real optical_abs = 0.0;
};

struct run_diagnostics
{
    real max_trace_drift = 0.0;
    real max_hermiticity_defect = 0.0;
    real min_eigenvalue = std::numeric_limits<real>::infinity();
    real dt_min = std::numeric_limits<real>::infinity();
    real dt_max = 0.0;
    long long steps = 0;
    int checks = 0;
    int flip_count = 0;
    real phase_matching = 1.0;
    real decoherence_envelope = 1.0;
    std::size_t n_classes = 0;
    int n_z = 0;
};

/// Named time interval of a record.
struct time_window
{
    std::string name;
    real begin;
    real end;
};

/**
 * Probe envelopes entering (z = 0) and leaving (z = L) the medium, in
 * rad/s. Samples sit at every step start; a segment end adds a left-limit
 * sample, so equal consecutive times mark a discontinuity.
 */
struct simulation_record
{
    std::vector<real> t;
    std::vector<complex> field_in;
    std::vector<complex> field_out;
    std::vector<time_window> windows;
    std::vector<snapshot> snapshots;
    std::vector<log_entry> events;
    run_diagnostics diagnostics;

    const time_window* window(const std::string& name) const
    {
        for (const auto& w : windows) {
            if (w.name == name) {
                return &w;
            }
        }
        return nullptr;
    }
};

struct run_options
{
    /// peak on-resonance optical depth d (intensity transmission exp(-d))
    real optical_depth = 0.1625;
    /// requested step; 0 picks the largest step the guard allows
    real dt = 0.0;
    /// noise model applied as a coherence envelope at recall
    std::optional<noise_model> noise;
    int n_traj = 10000;
    /// extra multiplicative factor on rho12 at recall
    real envelope = 1.0;
    /// positivity/trace checks every this many steps (and at every event)
    int check_every = 4096;
    bool diagnostics = true;
};

namespace detail {

/* applied drives over one segment, in rad/s */
struct segment_drive
{
    const probe_pulse* probe = nullptr;
    const probe_sweep* sweep = nullptr;
    complex coupling = 0.0;
    const rf_pulse_at* rf = nullptr;

    bool driven() const
    {
        return probe || sweep || coupling != 0.0 || rf;
    }

    complex probe_at(real t) const
    {
        const complex i(0.0, 1.0);
        if (probe) {
            const real tc = std::clamp(t, probe->t0, probe->end());
            const real phase = two_pi * probe->detuning_hz * (tc - probe->t0);
            return hz_to_rad(probe->peak_rabi_hz) * probe->profile(tc) *
                   std::exp(-i * phase);
        }
        if (sweep) {
            const real u = std::clamp(t, sweep->t0, sweep->end()) - sweep->t0;
            const real phase =
                two_pi * (-0.5 * sweep->span_hz * u +
                          0.5 * sweep->rate_hz_per_s() * u * u);
            return hz_to_rad(sweep->rabi_hz) * sweep->profile(sweep->t0 + u) *
                   std::exp(-i * phase);
        }
        return 0.0;
    }

    real probe_peak() const
    {
        if (probe) {
            return hz_to_rad(std::abs(probe->peak_rabi_hz));
        }
        if (sweep) {
            return hz_to_rad(std::abs(sweep->rabi_hz));
        }
        return 0.0;
    }

    real max_probe_detuning() const
    {
        if (probe) {
            return hz_to_rad(std::abs(probe->detuning_hz));
        }
        if (sweep) {
            return hz_to_rad(0.5 * std::abs(sweep->span_hz));
        }
        return 0.0;
    }

    complex rf_drive() const
    {
        if (!rf) {
            return 0.0;
        }
        return std::polar(rf->pulse.area / rf->pulse.duration, rf->pulse.phase);
    }
};

struct class_constants
{
    std::vector<real> delta_opt;
    std::vector<real> delta_spin;
    std::vector<real> weight;
    real max_abs_opt = 0.0;
    real max_abs_spin = 0.0;

    explicit class_constants(const std::vector<detuning_class>& classes)
    {
        for (const auto& k : classes) {
            delta_opt.push_back(k.delta_opt);
            delta_spin.push_back(k.delta_spin);
            weight.push_back(k.weight);
            max_abs_opt = std::max(max_abs_opt, std::abs(k.delta_opt));
            max_abs_spin = std::max(max_abs_spin, std::abs(k.delta_spin));
        }
    }
};

struct rates
{
    real gamma3, g1, g2, gamma_opt, gamma_spin;

    explicit rates(const level_scheme& s)
        : gamma3(s.gamma3), g1(s.b1 * s.gamma3), g2(s.b2 * s.gamma3),
          gamma_opt(s.gamma_opt), gamma_spin(s.gamma_spin_static)
    {
    }
};

/* classes per block of the fixed-order polarization reduction */
inline constexpr std::size_t reduction_block = 256;

struct lambda_vars
{
    real p1, p2, p3, ar, ai, br, bi, cr, ci;
};

/* time derivative of one class; P, C, R are halved Rabi frequencies */
template<bool with_rf>
[[gnu::always_inline]] inline lambda_vars
lambda_rhs(const lambda_vars& x, real dO, real dS, real hPr, real hPi,
           real hCr, real hCi, real hRr, real hRi, const rates& r)
{
    const real sd = dO + dS;
    const real im_pb = 2.0 * (hPi * x.br - hPr * x.bi);
    const real im_cc = 2.0 * (hCi * x.cr - hCr * x.ci);
    const real d12 = x.p1 - x.p2, d13 = x.p1 - x.p3, d23 = x.p2 - x.p3;
    lambda_vars f;
    f.p1 = im_pb + r.g1 * x.p3;
    f.p2 = im_cc + r.g2 * x.p3;
    f.p3 = -im_pb - im_cc - r.gamma3 * x.p3;
    f.ar = -dS * x.ai - (hCr * x.bi - hCi * x.br) +
           (hPi * x.cr - hPr * x.ci) - r.gamma_spin * x.ar;
    f.ai = dS * x.ar + (hCr * x.br + hCi * x.bi) -
           (hPr * x.cr + hPi * x.ci) - r.gamma_spin * x.ai;
    f.br = -hPi * d13 - (hCr * x.ai + hCi * x.ar) + dO * x.bi -
           r.gamma_opt * x.br;
    f.bi = hPr * d13 + (hCr * x.ar - hCi * x.ai) - dO * x.br -
           r.gamma_opt * x.bi;
    f.cr = -(hPi * x.ar - hPr * x.ai) - hCi * d23 + sd * x.ci -
           r.gamma_opt * x.cr;
    f.ci = (hPr * x.ar + hPi * x.ai) + hCr * d23 - sd * x.cr -
           r.gamma_opt * x.ci;
    if constexpr (with_rf) {
        const real im_ra = 2.0 * (hRi * x.ar - hRr * x.ai);
        f.p1 += im_ra;
        f.p2 -= im_ra;
        f.ar -= hRi * d12;
        f.ai += hRr * d12;
        f.br += hRr * x.ci + hRi * x.cr;
        f.bi -= hRr * x.cr - hRi * x.ci;
        f.cr += hRr * x.bi - hRi * x.br;
        f.ci -= hRr * x.br + hRi * x.bi;
    }
    return f;
}

[[gnu::always_inline]] inline lambda_vars axpy(const lambda_vars& y, real h,
                                               const lambda_vars& f)
{
    return {y.p1 + h * f.p1, y.p2 + h * f.p2, y.p3 + h * f.p3,
            y.ar + h * f.ar, y.ai + h * f.ai, y.br + h * f.br,
            y.bi + h * f.bi, y.cr + h * f.cr, y.ci + h * f.ci};
}

/*
 * Full RK4 step for every class of one cell, stages fused per class. P[s]
 * is the probe seen at stage s. On return S[s] holds sum_k w_k rho31 of
 * the stage-s inputs, reduced block by block in a fixed order. Without RF
 * the drive terms are compiled out.
 */
template<bool with_rf>
void rk4_cell_impl(real* const y[medium_state::n_components],
                   const class_constants& cc, const rates& r, std::size_t n,
                   const complex P[4], complex C, complex R, real dt,
                   complex S[4])
{
    const real hCr = 0.5 * C.real(), hCi = 0.5 * C.imag();
    const real hRr = 0.5 * R.real(), hRi = 0.5 * R.imag();
    const real hP0r = 0.5 * P[0].real(), hP0i = 0.5 * P[0].imag();
    const real hP1r = 0.5 * P[1].real(), hP1i = 0.5 * P[1].imag();
    const real hP2r = 0.5 * P[2].real(), hP2i = 0.5 * P[2].imag();
    const real hP3r = 0.5 * P[3].real(), hP3i = 0.5 * P[3].imag();
    const real half = 0.5 * dt, sixth = dt / 6.0;
    const real* d_opt = cc.delta_opt.data();
    const real* d_spin = cc.delta_spin.data();
    const real* w = cc.weight.data();
    real *y1 = y[0], *y2 = y[1], *y3 = y[2], *yar = y[3], *yai = y[4];
    real *ybr = y[5], *ybi = y[6], *ycr = y[7], *yci = y[8];

    real acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    for (std::size_t k0 = 0; k0 < n; k0 += reduction_block) {
        const std::size_t k1 = std::min(n, k0 + reduction_block);
        real s0r = 0, s0i = 0, s1r = 0, s1i = 0, s2r = 0, s2i = 0, s3r = 0,
             s3i = 0;
#pragma omp simd reduction(+ : s0r, s0i, s1r, s1i, s2r, s2i, s3r, s3i)
        for (std::size_t k = k0; k < k1; ++k) {
            const lambda_vars x{y1[k], y2[k], y3[k], yar[k], yai[k],
                                ybr[k], ybi[k], ycr[k], yci[k]};
            const real dO = d_opt[k], dS = d_spin[k], wk = w[k];
            s0r += wk * x.br;
            s0i += wk * x.bi;
            const lambda_vars f1 =
                lambda_rhs<with_rf>(x, dO, dS, hP0r, hP0i, hCr, hCi, hRr, hRi, r);
            const lambda_vars x2 = axpy(x, half, f1);
            s1r += wk * x2.br;
            s1i += wk * x2.bi;
            const lambda_vars f2 =
                lambda_rhs<with_rf>(x2, dO, dS, hP1r, hP1i, hCr, hCi, hRr, hRi, r);
            const lambda_vars x3 = axpy(x, half, f2);
            s2r += wk * x3.br;
            s2i += wk * x3.bi;
            const lambda_vars f3 =
                lambda_rhs<with_rf>(x3, dO, dS, hP2r, hP2i, hCr, hCi, hRr, hRi, r);
            const lambda_vars x4 = axpy(x, dt, f3);
            s3r += wk * x4.br;
            s3i += wk * x4.bi;
            const lambda_vars f4 =
                lambda_rhs<with_rf>(x4, dO, dS, hP3r, hP3i, hCr, hCi, hRr, hRi, r);
            y1[k] = x.p1 + sixth * (f1.p1 + 2.0 * (f2.p1 + f3.p1) + f4.p1);
            y2[k] = x.p2 + sixth * (f1.p2 + 2.0 * (f2.p2 + f3.p2) + f4.p2);
            y3[k] = x.p3 + sixth * (f1.p3 + 2.0 * (f2.p3 + f3.p3) + f4.p3);
            yar[k] = x.ar + sixth * (f1.ar + 2.0 * (f2.ar + f3.ar) + f4.ar);
            yai[k] = x.ai + sixth * (f1.ai + 2.0 * (f2.ai + f3.ai) + f4.ai);
            ybr[k] = x.br + sixth * (f1.br + 2.0 * (f2.br + f3.br) + f4.br);
            ybi[k] = x.bi + sixth * (f1.bi + 2.0 * (f2.bi + f3.bi) + f4.bi);
            ycr[k] = x.cr + sixth * (f1.cr + 2.0 * (f2.cr + f3.cr) + f4.cr);
            yci[k] = x.ci + sixth * (f1.ci + 2.0 * (f2.ci + f3.ci) + f4.ci);
        }
        acc[0] += s0r;
        acc[1] += s0i;
        acc[2] += s1r;
        acc[3] += s1i;
        acc[4] += s2r;
        acc[5] += s2i;
        acc[6] += s3r;
        acc[7] += s3i;
    }
    for (int s = 0; s < 4; ++s) {
        S[s] = complex(acc[2 * s], acc[2 * s + 1]);
    }
}

inline void rk4_cell(real* const y[medium_state::n_components],
                     const class_constants& cc, const rates& r,
                     std::size_t n, const complex P[4], complex C, complex R,
                     real dt, complex S[4])
{
    if (R == complex(0.0)) {
        rk4_cell_impl<false>(y, cc, r, n, P, C, R, dt, S);
    } else {
        rk4_cell_impl<true>(y, cc, r, n, P, C, R, dt, S);
    }
}

inline complex polarization_sum(const real* br, const real* bi,
                                 const class_constants& cc, std::size_t n)
{
    const real* w = cc.weight.data();
    real sum_r = 0.0, sum_i = 0.0;
    for (std::size_t k0 = 0; k0 < n; k0 += reduction_block) {
        const std::size_t k1 = std::min(n, k0 + reduction_block);
        real blk_r = 0.0, blk_i = 0.0;
#pragma omp simd reduction(+ : blk_r, blk_i)
        for (std::size_t k = k0; k < k1; ++k) {
            blk_r += w[k] * br[k];
            blk_i += w[k] * bi[k];
        }
        sum_r += blk_r;
        sum_i += blk_i;
    }
    return {sum_r, sum_i};
}

} // namespace detail

/**
 * Maxwell-Bloch integrator for one medium. The probe field is solved
 * quasi-statically along z from the polarization of each cell,
 *   dOmega_p/dz = i kappa sum_k w_k rho31,
 * with kappa normalized so that weak cw transmission through the medium
 * with the coupling off is exp(-d) on resonance.
 *
 * Each cell sees the field at its centre. The upstream face is exact for
 * every RK4 stage; the half-cell term uses the cell's own polarization
 * extrapolated from the two previous steps, so all four stages can be
 * fused per class. In steady state this is the trapezoidal rule in z.
 */
class propagator
{
public:
    propagator(medium_state& medium, const grid& gr, const level_scheme& s,
               real optical_depth)
        : m_medium(medium), m_grid(gr), m_scheme(s),
          m_constants(medium.classes()), m_rates(s)
    {
        gr.validate();
        s.validate();
        if (gr.n_z != medium.n_z()) {
            throw config_error("propagator: medium and grid differ in n_z");
        }
        if (!(optical_depth >= 0)) {
            throw config_error("propagator: optical depth must be >= 0");
        }
        const real norm =
            raw_probe_response(medium.classes(), s, 0.0, 0.0).real();
        m_kappa = optical_depth * s.gamma_opt / (gr.length * norm);
        m_prev.assign(gr.n_z, {});
        m_prev2.assign(gr.n_z, {});
    }

    real kappa() const { return m_kappa; }

    /// Fastest rate the guard must resolve for the given drive amplitudes.
    real fastest_rate(real probe, real coupling, real rf,
                      real probe_detuning) const
    {
        return std::max({probe, coupling, rf, probe_detuning,
                         m_constants.max_abs_opt, m_constants.max_abs_spin,
                         m_scheme.gamma3});
    }

    /// Output field for a given input with the medium held fixed.
    complex solve_field(complex input) const
    {
        const std::size_t nc = m_medium.n_classes();
        const complex ik(0.0, m_kappa * m_grid.dz());
        complex node = input;
        for (int z = 0; z < m_grid.n_z; ++z) {
            const std::size_t off = m_medium.index(z, 0);
            node += ik * detail::polarization_sum(
                             m_medium.data(medium_state::br) + off,
                             m_medium.data(medium_state::bi) + off,
                             m_constants, nc);
        }
        return node;
    }

    /// Restarts the polarization history after the state was edited.
    void refresh()
    {
        const std::size_t nc = m_medium.n_classes();
        for (int z = 0; z < m_grid.n_z; ++z) {
            const std::size_t off = m_medium.index(z, 0);
            const complex s = detail::polarization_sum(
                m_medium.data(medium_state::br) + off,
                m_medium.data(medium_state::bi) + off, m_constants, nc);
            m_prev[z] = {s, s, s, s};
        }
        m_history = 1;
    }

    /**
     * One RK4 step of the coupled system. in[s] is the input field at
     * stage s (times t, t+dt/2, t+dt/2, t+dt). Returns the output field at
     * the step start. With couple_field false the probe is held at zero
     * inside the medium.
     */
    complex step(const complex in[4], complex coupling, complex rf, real dt,
                 bool couple_field = true)
    {
        if (m_history == 0) {
            refresh();
        }
        const std::size_t nc = m_medium.n_classes();
        const complex ik(0.0, m_kappa * m_grid.dz());
        complex node[4] = {in[0], in[1], in[2], in[3]};
        for (int z = 0; z < m_grid.n_z; ++z) {
            const std::size_t off = m_medium.index(z, 0);
            real* y[medium_state::n_components];
            for (int q = 0; q < medium_state::n_components; ++q) {
                y[q] = m_medium.data(static_cast<medium_state::component>(q)) + off;
            }
            complex p[4];
            for (int s = 0; s < 4; ++s) {
                const complex guess = m_history >= 2
                                          ? 2.0 * m_prev[z][s] - m_prev2[z][s]
                                          : m_prev[z][s];
                p[s] = couple_field ? node[s] + 0.5 * ik * guess : 0.0;
            }
            std::array<complex, 4> sum;
            detail::rk4_cell(y, m_constants, m_rates, nc, p, coupling, rf, dt,
                             sum.data());
            if (couple_field) {
                for (int s = 0; s < 4; ++s) {
                    node[s] += ik * sum[s];
                }
            }
            m_prev2[z] = m_prev[z];
            m_prev[z] = sum;
        }
        ++m_history;
        return node[0];
    }

private:
    medium_state& m_medium;
    grid m_grid;
    level_scheme m_scheme;
    detail::class_constants m_constants;
    detail::rates m_rates;
    real m_kappa = 0.0;
    std::vector<std::array<complex, 4>> m_prev;
    std::vector<std::array<complex, 4>> m_prev2;
    int m_history = 0;
};

/// Exact evolution of every state over t with all fields off.
inline void free_evolve(medium_state& m, const level_scheme& s, real t)
{
    const auto& classes = m.classes();
    const std::size_t nc = m.n_classes();
    const real decay = std::exp(-s.gamma3 * t);
    const real spin_decay = std::exp(-s.gamma_spin_static * t);
    const real opt_decay = std::exp(-s.gamma_opt * t);
    std::vector<complex> fa(nc), fb(nc), fc(nc);
    for (std::size_t k = 0; k < nc; ++k) {
        const real dO = classes[k].delta_opt;
        const real dS = classes[k].delta_spin;
        fa[k] = std::polar(spin_decay, std::fmod(dS * t, two_pi));
        fb[k] = std::polar(opt_decay, -std::fmod(dO * t, two_pi));
        fc[k] = std::polar(opt_decay, -std::fmod((dO + dS) * t, two_pi));
    }
    auto rotate = [&](real* re, real* im, const complex& f, std::size_t i) {
        const complex v = complex(re[i], im[i]) * f;
        re[i] = v.real();
        im[i] = v.imag();
    };
    real* p1 = m.data(medium_state::p1);
    real* p2 = m.data(medium_state::p2);
    real* p3 = m.data(medium_state::p3);
    for (int z = 0; z < m.n_z(); ++z) {
        for (std::size_t k = 0; k < nc; ++k) {
            const std::size_t i = m.index(z, k);
            const real gone = p3[i] * (1.0 - decay);
            p1[i] += s.b1 * gone;
            p2[i] += s.b2 * gone;
            p3[i] *= decay;
            rotate(m.data(medium_state::ar), m.data(medium_state::ai), fa[k], i);
            rotate(m.data(medium_state::br), m.data(medium_state::bi), fb[k], i);
            rotate(m.data(medium_state::cr), m.data(medium_state::ci), fc[k], i);
        }
    }
}

/// Instantaneous RF pulse on every state; toggles the spin-wave sign.
inline void apply_rf_pulse(medium_state& m, const rf_pulse& p)
{
    p.validate();
    const matrix3c u = rf_rotation(p);
    for (std::size_t i = 0; i < m.size(); ++i) {
        m.set(i, density_matrix(u * m.at(i).matrix() * u.adjoint()));
    }
    m.spinwave_sign = -m.spinwave_sign;
    ++m.flip_count;
}

/**
 * Swaps the roles of |1> and |2>. After an odd number of pi pulses this
 * maps the stored state onto the form the readout expects.
 */
inline void exchange_ground_states(medium_state& m)
{
    for (std::size_t i = 0; i < m.size(); ++i) {
        std::swap(m.data(medium_state::p1)[i], m.data(medium_state::p2)[i]);
        m.data(medium_state::ai)[i] = -m.data(medium_state::ai)[i];
        std::swap(m.data(medium_state::br)[i], m.data(medium_state::cr)[i]);
        std::swap(m.data(medium_state::bi)[i], m.data(medium_state::ci)[i]);
    }
}

/// Scales every spin coherence rho12 by f.
inline void scale_spin_coherence(medium_state& m, real f)
{
    for (std::size_t i = 0; i < m.size(); ++i) {
        m.data(medium_state::ar)[i] *= f;
        m.data(medium_state::ai)[i] *= f;
    }
}

/// Trace, Hermiticity and positivity over the whole medium.
inline void check_medium(const medium_state& m, run_diagnostics& d)
{
    for (std::size_t i = 0; i < m.size(); ++i) {
        const density_matrix rho = m.at(i);
        d.max_trace_drift = std::max(d.max_trace_drift, std::abs(rho.trace() - 1.0));
        d.max_hermiticity_defect =
            std::max(d.max_hermiticity_defect, rho.hermiticity_defect());
        d.min_eigenvalue = std::min(d.min_eigenvalue, rho.min_eigenvalue());
    }
    ++d.checks;
}

namespace detail {

inline std::string describe(const event& e)
{
    std::ostringstream s;
    std::visit(
        [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, probe_pulse>) {
                s << "probe pulse " << v.duration << " s, peak " << v.peak_rabi_hz
                  << " Hz";
            } else if constexpr (std::is_same_v<T, coupling_set>) {
                s << "coupling set to " << v.rabi_hz << " Hz";
            } else if constexpr (std::is_same_v<T, rf_pulse_at>) {
                s << "RF pulse area " << v.pulse.area << " rad"
                  << (v.pulse.instantaneous ? " (instantaneous)" : "");
            } else if constexpr (std::is_same_v<T, recall_at>) {
                s << "recall, coupling " << v.rabi_hz << " Hz";
            } else {
                s << "probe sweep " << v.span_hz << " Hz in " << v.duration
                  << " s";
            }
        },
        e);
    return s.str();
}

inline snapshot take_snapshot(const medium_state& m, real t,
                              std::string label)
{
    snapshot s{t, std::move(label), {}, 0.0, 0.0};
    for (int z = 0; z < m.n_z(); ++z) {
        s.spin_wave.push_back(m.spin_wave(z));
    }
    s.spin_abs = m.mean_abs(medium_state::ar, medium_state::ai);
    s.optical_abs = m.mean_abs(medium_state::br, medium_state::bi);
    return s;
}

} // namespace detail

/**
 * Runs a validated timeline through the medium and records the probe at
 * both faces. Intervals with no applied field are propagated exactly; RF
 * pulses toggle the spin-wave orientation; at recall the decoherence
 * envelope scales rho12 and an odd flip count is read out through the
 * phase-matching factor.
 */
inline simulation_record run_sequence(const sequence& seq, const grid& gr,
                                      const geometry& geo,
                                      const std::vector<detuning_class>& classes,
                                      const level_scheme& scheme,
                                      const run_options& opt = {})
{
    gr.validate();
    geo.validate();
    scheme.validate();
    const auto blocking = blocking_findings(seq, geo.mode);
    if (!blocking.empty()) {
        std::string msg = "run_sequence: sequence failed validation:";
        for (const auto& f : blocking) {
            msg += " " + f.message + ";";
        }
        throw usage_error(msg);
    }
    if (seq.events.empty()) {
        throw usage_error("run_sequence: empty sequence");
    }

    medium_state medium(classes, gr.n_z);
    propagator prop(medium, gr, scheme, opt.optical_depth);
    simulation_record rec;
    rec.diagnostics.n_classes = medium.n_classes();
    rec.diagnostics.n_z = gr.n_z;

    /* breakpoints */
    std::vector<real> bp;
    for (const auto& e : seq.events) {
        std::visit(
            [&](const auto& v) {
                using T = std::decay_t<decltype(v)>;
                if constexpr (std::is_same_v<T, probe_pulse> ||
                              std::is_same_v<T, probe_sweep>) {
                    bp.push_back(v.t0);
                    bp.push_back(v.end());
                } else if constexpr (std::is_same_v<T, rf_pulse_at>) {
                    bp.push_back(v.start());
                    bp.push_back(v.end());
                } else if constexpr (std::is_same_v<T, recall_at>) {
                    bp.push_back(v.t);
                    bp.push_back(v.t + v.window);
                } else {
                    bp.push_back(v.t);
                }
            },
            e);
    }
    std::sort(bp.begin(), bp.end());
    bp.erase(std::unique(bp.begin(), bp.end()), bp.end());

    for (const auto& e : seq.events) {
        if (const auto* p = std::get_if<probe_pulse>(&e)) {
            rec.windows.push_back({"input", p->t0, p->end()});
        } else if (const auto* w = std::get_if<probe_sweep>(&e)) {
            rec.windows.push_back({"sweep", w->t0, w->end()});
        } else if (const auto* r = std::get_if<recall_at>(&e)) {
            rec.windows.push_back({"recall", r->t, r->t + r->window});
        }
    }

    /* drives active over (t0, t1), judged at the midpoint */
    auto drives_on = [&](real t0, real t1) {
        const real tm = 0.5 * (t0 + t1);
        detail::segment_drive d;
        real coupling_t = -std::numeric_limits<real>::infinity();
        for (const auto& e : seq.events) {
            if (const auto* p = std::get_if<probe_pulse>(&e)) {
                if (p->t0 < tm && tm < p->end()) {
                    d.probe = p;
                }
            } else if (const auto* w = std::get_if<probe_sweep>(&e)) {
                if (w->t0 < tm && tm < w->end()) {
                    d.sweep = w;
                }
            } else if (const auto* c = std::get_if<coupling_set>(&e)) {
                if (c->t <= t0 && c->t >= coupling_t) {
                    coupling_t = c->t;
                    d.coupling = hz_to_rad(c->rabi_hz);
                }
            } else if (const auto* r = std::get_if<recall_at>(&e)) {
                if (r->t <= t0 && r->t >= coupling_t) {
                    coupling_t = r->t;
                    d.coupling = hz_to_rad(r->rabi_hz);
                }
            } else if (const auto* f = std::get_if<rf_pulse_at>(&e)) {
                if (!f->pulse.instantaneous && f->start() < tm && tm < f->end()) {
                    d.rf = f;
                }
            }
        }
        return d;
    };

    const real phase_factor_odd = phase_matching_factor(geo, 1, gr);
    real out_factor = 1.0;
    bool recalled = false;

    auto push_sample = [&](real t, complex in, complex out) {
        rec.t.push_back(t);
        rec.field_in.push_back(in);
        rec.field_out.push_back(out * out_factor);
    };
    auto check = [&]() {
        if (opt.diagnostics) {
            check_medium(medium, rec.diagnostics);
        }
    };

    /* instantaneous actions at time t */
    auto act_at = [&](real t) {
        for (const auto& e : seq.events) {
            if (const auto* c = std::get_if<coupling_set>(&e)) {
                if (c->t == t && c->rabi_hz == 0.0 && seq.recall()) {
                    rec.events.push_back({t, detail::describe(e)});
                    rec.snapshots.push_back(
                        detail::take_snapshot(medium, t, "storage"));
                    check();
                } else if (c->t == t) {
                    rec.events.push_back({t, detail::describe(e)});
                }
            } else if (const auto* f = std::get_if<rf_pulse_at>(&e)) {
                if (f->pulse.instantaneous && f->t == t) {
                    apply_rf_pulse(medium, f->pulse);
                    rec.events.push_back({t, detail::describe(e)});
                    rec.snapshots.push_back(
                        detail::take_snapshot(medium, t, "rf"));
                    check();
                }
            } else if (const auto* r = std::get_if<recall_at>(&e)) {
                if (r->t == t && !recalled) {
                    recalled = true;
                    real env = opt.envelope;
                    if (opt.noise) {
                        env *= decay_envelope(seq, *opt.noise, opt.n_traj);
                    }
                    rec.diagnostics.decoherence_envelope = env;
                    scale_spin_coherence(medium, env);
                    rec.diagnostics.flip_count = medium.flip_count;
                    if (medium.flip_count % 2 != 0) {
                        exchange_ground_states(medium);
                        out_factor = phase_factor_odd;
                    }
                    rec.diagnostics.phase_matching = out_factor;
                    rec.events.push_back({t, detail::describe(e)});
                    rec.snapshots.push_back(
                        detail::take_snapshot(medium, t, "recall"));
                    check();
                }
            } else if (const auto* p = std::get_if<probe_pulse>(&e)) {
                if (p->t0 == t) {
                    rec.events.push_back({t, detail::describe(e)});
                }
            } else if (const auto* w = std::get_if<probe_sweep>(&e)) {
                if (w->t0 == t) {
                    rec.events.push_back({t, detail::describe(e)});
                }
            }
        }
    };

    for (std::size_t j = 0; j + 1 < bp.size(); ++j) {
        const real t0 = bp[j];
        const real t1 = bp[j + 1];
        act_at(t0);
        const auto d = drives_on(t0, t1);
        const real len = t1 - t0;
        if (!d.driven()) {
            push_sample(t0, 0.0, prop.solve_field(0.0));
            free_evolve(medium, scheme, len);
            push_sample(t1, 0.0, prop.solve_field(0.0));
            continue;
        }

        const complex rf = d.rf_drive();
        const real fastest =
            prop.fastest_rate(d.probe_peak(), std::abs(d.coupling),
                              std::abs(rf), d.max_probe_detuning());
        const real h_max = max_stable_step(fastest);
        if (opt.dt > h_max * (1.0 + 1e-12)) {
            std::ostringstream msg;
            msg << "run_sequence: dt = " << opt.dt << " s exceeds the stability "
                << "limit " << h_max << " s on [" << t0 << ", " << t1 << "] s";
            throw step_size_error(msg.str());
        }
        const real h_target = opt.dt > 0 ? opt.dt : h_max;
        const long long n =
            std::max<long long>(1, static_cast<long long>(std::ceil(len / h_target - 1e-9)));
        const real h = len / n;
        rec.diagnostics.dt_min = std::min(rec.diagnostics.dt_min, h);
        rec.diagnostics.dt_max = std::max(rec.diagnostics.dt_max, h);

        const bool couple = d.rf == nullptr;
        prop.refresh();
        for (long long s = 0; s < n; ++s) {
            const real t = t0 + s * h;
            const complex in[4] = {couple ? d.probe_at(t) : 0.0,
                                   couple ? d.probe_at(t + 0.5 * h) : 0.0,
                                   couple ? d.probe_at(t + 0.5 * h) : 0.0,
                                   couple ? d.probe_at(t + h) : 0.0};
            const complex out = prop.step(in, d.coupling, rf, h, couple);
            push_sample(t, in[0], couple ? out : 0.0);
            ++rec.diagnostics.steps;
            if (opt.check_every > 0 && (s + 1) % opt.check_every == 0) {
                check();
            }
        }
        const complex in_end = couple ? d.probe_at(t1) : 0.0;
        push_sample(t1, in_end, couple ? prop.solve_field(in_end) : 0.0);
        if (d.rf) {
            medium.spinwave_sign = -medium.spinwave_sign;
            ++medium.flip_count;
            rec.events.push_back({t0, detail::describe(event{*d.rf})});
            rec.events.push_back({t1, "RF pulse complete"});
            rec.snapshots.push_back(detail::take_snapshot(medium, t1, "rf"));
        }
        check();
    }
    act_at(bp.back());
    rec.events.push_back({bp.back(), "end of record"});
    rec.snapshots.push_back(detail::take_snapshot(medium, bp.back(), "end"));
    check();
    if (!recalled) {
        rec.diagnostics.flip_count = medium.flip_count;
    }
    return rec;
}

} // namespace eitmem
