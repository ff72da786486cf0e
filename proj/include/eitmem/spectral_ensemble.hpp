#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include <eitmem/core.hpp>
#include <eitmem/spectrum.hpp>

namespace eitmem {

/**
 * Lambda scheme: |1> and |2> are hyperfine ground levels, |3> is the
 * optically excited level. The probe drives |1>-|3>, the coupling drives
 * |2>-|3>. All rates in rad/s.
 */
struct level_scheme
{
    /// excited-state population decay (nominal 164 us lifetime)
    real gamma3 = 1.0 / 164e-6;
    real b1 = 0.5;
    real b2 = 0.5;
    /// optical coherence decay, half of the 2.5 kHz homogeneous FWHM
    real gamma_opt = hz_to_rad(1250.0);
    real gamma_spin_static = 0.0;

    void validate() const
    {
        if (gamma3 < 0 || gamma_opt < 0 || gamma_spin_static < 0 || b1 < 0 ||
            b2 < 0) {
            throw config_error("level_scheme: rates and branching must be "
                               "non-negative");
        }
        if (std::abs(b1 + b2 - 1.0) > 1e-15) {
            throw config_error("level_scheme: b1 + b2 must equal 1");
        }
        if (gamma_opt < 0.5 * gamma3) {
            throw config_error("level_scheme: gamma_opt must be at least "
                               "gamma3 / 2");
        }
    }

    static level_scheme with_branching(real b1)
    {
        level_scheme s;
        s.b1 = b1;
        s.b2 = 1.0 - b1;
        return s;
    }
};

/// Prepared (post-repump) inhomogeneous feature; Gaussian on both axes.
struct inhomogeneous_profile
{
    real optical_fwhm_hz = 100e3;
    real spin_fwhm_hz = 10e3;
    int n_opt = 161;
    int n_spin = 41;

    void validate() const
    {
        if (!(optical_fwhm_hz > 0) || !(spin_fwhm_hz > 0)) {
            throw config_error("inhomogeneous_profile: widths must be "
                               "positive");
        }
        if (n_opt < 1 || n_spin < 1 || n_opt % 2 == 0 || n_spin % 2 == 0) {
            throw config_error("inhomogeneous_profile: class counts must be "
                               "odd and >= 1");
        }
    }
};

/// One member of the discretized ensemble.
struct detuning_class
{
    /// shift of the |1>-|3> transition (rad/s)
    real delta_opt = 0.0;
    /// shift of the |1>-|2> splitting (rad/s)
    real delta_spin = 0.0;
    real weight = 1.0;
};

namespace detail {

/* symmetric +-3 sigma grid with unnormalized Gaussian weights */
inline void gaussian_axis(real fwhm_hz, int n, std::vector<real>& x,
                          std::vector<real>& w)
{
    x.assign(n, 0.0);
    w.assign(n, 1.0);
    if (n == 1) {
        return;
    }
    const real sigma = hz_to_rad(fwhm_hz) / fwhm_per_sigma;
    const int c = (n - 1) / 2;
    const real step = 3.0 * sigma / c;
    for (int i = 0; i < n; ++i) {
        x[i] = step * (i - c);
        w[i] = std::exp(-0.5 * (x[i] / sigma) * (x[i] / sigma));
    }
}

} // namespace detail

/**
 * Tensor-product grid over (optical, spin) detuning. Class index is
 * i_opt * n_spin + i_spin.
 */
inline std::vector<detuning_class>
discretize_profile(const inhomogeneous_profile& profile)
{
    profile.validate();
    std::vector<real> xo, wo, xs, ws;
    detail::gaussian_axis(profile.optical_fwhm_hz, profile.n_opt, xo, wo);
    detail::gaussian_axis(profile.spin_fwhm_hz, profile.n_spin, xs, ws);

    real total = 0.0;
    std::vector<detuning_class> classes;
    classes.reserve(xo.size() * xs.size());
    for (std::size_t i = 0; i < xo.size(); ++i) {
        for (std::size_t j = 0; j < xs.size(); ++j) {
            classes.push_back({xo[i], xs[j], wo[i] * ws[j]});
            total += wo[i] * ws[j];
        }
    }
    for (auto& c : classes) {
        c.weight /= total;
    }
    return classes;
}

/**
 * Unnormalized steady-state weak-probe response,
 *   sum_k w_k gamma / (gamma + i(D_k - Dp) + (|Wc|^2/4) / (gs - i(d_k + Dp))).
 * Its real part is the absorption line shape.
 */
inline complex raw_probe_response(const std::vector<detuning_class>& classes,
                                  const level_scheme& scheme, real omega_c,
                                  real probe_detuning)
{
    const real g = scheme.gamma_opt;
    const real gs = scheme.gamma_spin_static;
    const real c2 = 0.25 * omega_c * omega_c;
    complex sum = 0.0;
    for (const auto& k : classes) {
        const complex optical(g, k.delta_opt - probe_detuning);
        if (c2 == 0.0) {
            sum += k.weight * g / optical;
        } else {
            const complex spin(gs, -(k.delta_spin + probe_detuning));
            sum += k.weight * g * spin / (optical * spin + c2);
        }
    }
    return sum;
}

/**
 * Weak-probe response normalized so that its real part is 1 on resonance
 * with the coupling off. The cw intensity transmission through peak optical
 * depth d is exp(-d * Re(response)).
 */
inline complex weak_probe_susceptibility(
    const std::vector<detuning_class>& classes, const level_scheme& scheme,
    real omega_c, real probe_detuning)
{
    const real norm = raw_probe_response(classes, scheme, 0.0, 0.0).real();
    return raw_probe_response(classes, scheme, omega_c, probe_detuning) /
           norm;
}

inline real weak_probe_transmission(const std::vector<detuning_class>& classes,
                                    const level_scheme& scheme, real omega_c,
                                    real probe_detuning, real optical_depth)
{
    return std::exp(-optical_depth *
                    weak_probe_susceptibility(classes, scheme, omega_c,
                                              probe_detuning)
                        .real());
}

/// Analytic transmission spectrum over [-span/2, span/2] Hz.
inline spectrum analytic_spectrum(const std::vector<detuning_class>& classes,
                                  const level_scheme& scheme, real omega_c,
                                  real optical_depth, real span_hz,
                                  std::size_t points)
{
    const real norm = raw_probe_response(classes, scheme, 0.0, 0.0).real();
    spectrum s;
    s.frequency_hz.resize(points);
    s.transmission.resize(points);
    for (std::size_t i = 0; i < points; ++i) {
        const real f = -0.5 * span_hz + span_hz * i / (points - 1);
        const complex r =
            raw_probe_response(classes, scheme, omega_c, hz_to_rad(f)) / norm;
        s.frequency_hz[i] = f;
        s.transmission[i] = std::exp(-optical_depth * r.real());
    }
    return s;
}

/**
 * FWHM (Hz) of the analytic transparency window. The frequency span covers
 * the Autler-Townes doublet at +-omega_c/2 with margin.
 */
inline real eit_width_analytic(const std::vector<detuning_class>& classes,
                               const level_scheme& scheme, real omega_c,
                               real optical_depth = 0.1625,
                               std::size_t points = 1201)
{
    if (!(omega_c > 0)) {
        throw analysis_error("eit_width_analytic: coupling must be positive");
    }
    real span = 300e3;
    span = std::max(span, 1.6 * rad_to_hz(omega_c));
    const auto s = analytic_spectrum(classes, scheme, omega_c, optical_depth,
                                     span, points);
    return eit_fwhm(s);
}

} // namespace eitmem
