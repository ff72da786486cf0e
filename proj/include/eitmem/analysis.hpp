#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <exception>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <fftw3.h>

#include <eitmem/core.hpp>
#include <eitmem/decoherence.hpp>
#include <eitmem/fit.hpp>
#include <eitmem/propagation.hpp>
#include <eitmem/sequence.hpp>
#include <eitmem/spectrum.hpp>

namespace eitmem {

/**
 * Trapezoidal integral of |f|^2 over [t0, t1]. Samples outside the window
 * are ignored; a window edge between samples is interpolated linearly in
 * |f|^2. Repeated time stamps contribute nothing.
 */
inline real integrate_power(const std::vector<real>& t,
                            const std::vector<complex>& f, real t0, real t1)
{
    if (t.size() != f.size()) {
        throw analysis_error("energy: time and field lengths differ");
    }
    if (!(t1 > t0)) {
        throw analysis_error("energy: empty window");
    }
    if (t.empty() || t.back() < t0 || t.front() > t1) {
        throw analysis_error("energy: window outside the record");
    }
    real sum = 0.0;
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
        const real a = t[i], b = t[i + 1];
        if (b <= t0 || a >= t1 || b <= a) {
            continue;
        }
        const real pa = std::norm(f[i]), pb = std::norm(f[i + 1]);
        const real lo = std::max(a, t0), hi = std::min(b, t1);
        const real slope = (pb - pa) / (b - a);
        const real plo = pa + slope * (lo - a);
        const real phi = pa + slope * (hi - a);
        sum += 0.5 * (plo + phi) * (hi - lo);
    }
    return sum;
}

enum class channel { input, output };

/// Energy of one channel over a named window of the record.
inline real pulse_energy(const simulation_record& rec, const std::string& window,
                         channel c)
{
    const auto* w = rec.window(window);
    if (!w) {
        throw analysis_error("pulse_energy: record has no '" + window +
                             "' window");
    }
    return integrate_power(rec.t,
                           c == channel::input ? rec.field_in : rec.field_out,
                           w->begin, w->end);
}

/// Recalled energy over the input-pulse energy.
inline real efficiency(const simulation_record& rec)
{
    const real in = pulse_energy(rec, "input", channel::input);
    if (!(in > 0)) {
        throw analysis_error("efficiency: input pulse carries no energy");
    }
    return pulse_energy(rec, "recall", channel::output) / in;
}

/**
 * Transmission |out/in|^2 against instantaneous probe frequency over the
 * flat part of a swept record.
 */
inline spectrum sweep_spectrum(const simulation_record& rec,
                               const probe_sweep& sw)
{
    spectrum s;
    for (std::size_t i = 0; i < rec.t.size(); ++i) {
        const real t = rec.t[i];
        if (!sw.flat(t)) {
            continue;
        }
        const real in = std::norm(rec.field_in[i]);
        if (!(in > 0)) {
            continue;
        }
        const real f = sw.frequency_hz(t);
        if (!s.frequency_hz.empty() && !(f > s.frequency_hz.back())) {
            continue;
        }
        s.frequency_hz.push_back(f);
        s.transmission.push_back(std::norm(rec.field_out[i]) / in);
    }
    if (s.frequency_hz.size() < 3) {
        throw analysis_error("sweep_spectrum: too few samples in the sweep");
    }
    return s;
}

/// Transmission on the grid point nearest a frequency.
inline real transmission_at(const spectrum& s, real f_hz)
{
    s.check();
    if (s.frequency_hz.empty()) {
        throw analysis_error("transmission_at: empty spectrum");
    }
    const auto it =
        std::lower_bound(s.frequency_hz.begin(), s.frequency_hz.end(), f_hz);
    if (it == s.frequency_hz.end()) {
        return s.transmission.back();
    }
    const std::size_t i = it - s.frequency_hz.begin();
    if (i == 0 || *it == f_hz) {
        return s.transmission[i];
    }
    const real f0 = s.frequency_hz[i - 1], f1 = s.frequency_hz[i];
    const real u = (f_hz - f0) / (f1 - f0);
    return (1 - u) * s.transmission[i - 1] + u * s.transmission[i];
}

/* ---- scans ------------------------------------------------------------ */

/// Everything a store/recall run needs besides the timeline.
struct medium_setup
{
    grid gr;
    geometry geo;
    std::vector<detuning_class> classes;
    level_scheme scheme;
    run_options run;
};

struct decay_point
{
    real storage_time;
    real energy;
    real input_energy;
    real efficiency;
    real envelope;
    run_diagnostics diagnostics;
};

struct decay_scan_result
{
    std::vector<decay_point> simple;
    std::vector<decay_point> ddc;
    fit_result fit_simple;
    fit_result fit_ddc;
};

namespace detail {

template<class F>
void for_each_point(std::size_t n, F&& f)
{
#ifdef EITMEM_USE_OPENMP
    std::exception_ptr failure;
    std::mutex guard;
#pragma omp parallel for schedule(dynamic, 1)
    for (long i = 0; i < static_cast<long>(n); ++i) {
        try {
            f(static_cast<std::size_t>(i));
        } catch (...) {
            std::lock_guard<std::mutex> lock(guard);
            if (!failure) {
                failure = std::current_exception();
            }
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
#else
    for (std::size_t i = 0; i < n; ++i) {
        f(i);
    }
#endif
}

inline decay_point run_decay_point(const sequence& seq, real t,
                                   const medium_setup& m)
{
    const auto rec = run_sequence(seq, m.gr, m.geo, m.classes, m.scheme, m.run);
    const real e_in = pulse_energy(rec, "input", channel::input);
    const real e_out = pulse_energy(rec, "recall", channel::output);
    return {t, e_out, e_in, e_out / e_in, rec.diagnostics.decoherence_envelope,
            rec.diagnostics};
}

inline fit_result fit_points(const std::vector<decay_point>& pts)
{
    decay_curve c;
    const real e0 = std::max_element(pts.begin(), pts.end(),
                                     [](const auto& a, const auto& b) {
                                         return a.energy < b.energy;
                                     })->energy;
    for (const auto& p : pts) {
        c.times.push_back(p.storage_time);
        c.energies.push_back(p.energy / e0);
    }
    return fit_exponential(c);
}

} // namespace detail

/**
 * Recalled energy against storage time for the two-pulse and the 4 ms
 * bang-bang protocols, each with a single-exponential fit. Bang-bang points
 * use the nearest even pulse count, so their storage times are multiples
 * of 8 ms.
 */
inline decay_scan_result decay_scan(const std::vector<real>& storage_times,
                                    const store_options& opts,
                                    const medium_setup& m)
{
    decay_scan_result res;
    const std::size_t n = storage_times.size();
    res.simple.resize(n);
    res.ddc.resize(n);
    detail::for_each_point(2 * n, [&](std::size_t j) {
        const real t = storage_times[j % n];
        if (j < n) {
            res.simple[j] = detail::run_decay_point(
                make_store_recall_simple(t, opts), t, m);
        } else {
            const int pulses = ddc_even_pulse_count(t);
            res.ddc[j - n] = detail::run_decay_point(
                make_store_recall_ddc(pulses, opts), 0.004 * pulses, m);
        }
    });
    res.fit_simple = detail::fit_points(res.simple);
    res.fit_ddc = detail::fit_points(res.ddc);
    return res;
}

struct linearity_point
{
    real area;
    real input_energy;
    real output_energy;
    run_diagnostics diagnostics;
};

struct linearity_report
{
    std::vector<linearity_point> points;
    /// output = slope * input + intercept over the low-area points
    real slope = 0.0;
    real intercept = 0.0;
    real r_squared = 0.0;
    std::size_t n_fit = 0;
    /// first scanned area whose output misses the line by more than the
    /// tolerance, and the interpolated crossing below it
    std::optional<real> first_deviating_area;
    std::optional<real> onset_area;
};

/**
 * Least-squares line through the points with area <= fit_max_area and the
 * area where the output first departs from it by more than tolerance.
 */
inline linearity_report
analyze_linearity(std::vector<linearity_point> pts, real fit_max_area,
                  real tolerance = 0.1)
{
    std::sort(pts.begin(), pts.end(),
              [](const auto& a, const auto& b) { return a.area < b.area; });
    linearity_report rep;
    rep.points = pts;
    real sx = 0, sy = 0, sxx = 0, sxy = 0;
    std::size_t n = 0;
    for (const auto& p : pts) {
        if (p.area <= fit_max_area * (1 + 1e-12)) {
            sx += p.input_energy;
            sy += p.output_energy;
            sxx += p.input_energy * p.input_energy;
            sxy += p.input_energy * p.output_energy;
            ++n;
        }
    }
    if (n < 3) {
        throw analysis_error("linearity: need at least three low-area points");
    }
    const real den = n * sxx - sx * sx;
    if (!(std::abs(den) > 0)) {
        throw analysis_error("linearity: degenerate input energies");
    }
    rep.n_fit = n;
    rep.slope = (n * sxy - sx * sy) / den;
    rep.intercept = (sy - rep.slope * sx) / n;
    const real mean = sy / n;
    real ss_res = 0, ss_tot = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& p = pts[i];
        const real fit = rep.slope * p.input_energy + rep.intercept;
        ss_res += (p.output_energy - fit) * (p.output_energy - fit);
        ss_tot += (p.output_energy - mean) * (p.output_energy - mean);
    }
    rep.r_squared = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;

    auto deviation = [&](const linearity_point& p) {
        const real line = rep.slope * p.input_energy + rep.intercept;
        return std::abs(p.output_energy - line) / std::abs(line);
    };
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const real dev = deviation(pts[i]);
        if (dev > tolerance) {
            rep.first_deviating_area = pts[i].area;
            if (i == 0) {
                rep.onset_area = pts[i].area;
            } else {
                const real d0 = deviation(pts[i - 1]);
                const real u = (tolerance - d0) / (dev - d0);
                rep.onset_area =
                    pts[i - 1].area + u * (pts[i].area - pts[i - 1].area);
            }
            break;
        }
    }
    return rep;
}

/// Stores probe pulses of each area for a fixed delay and analyzes the
/// input/output energy relation.
inline linearity_report linearity_scan(const std::vector<real>& areas,
                                       real storage_time,
                                       const store_options& opts,
                                       const medium_setup& m,
                                       real fit_max_area = 0.1 * std::numbers::pi,
                                       real tolerance = 0.1)
{
    for (std::size_t i = 0; i < areas.size(); ++i) {
        if (!(areas[i] > 0) || (i > 0 && !(areas[i] > areas[i - 1]))) {
            throw config_error("linearity_scan: areas must be positive and "
                               "increasing");
        }
    }
    std::vector<linearity_point> pts(areas.size());
    detail::for_each_point(areas.size(), [&](std::size_t i) {
        store_options o = opts;
        o.probe_area = areas[i];
        const auto seq = make_store_recall_simple(storage_time, o);
        const auto rec =
            run_sequence(seq, m.gr, m.geo, m.classes, m.scheme, m.run);
        pts[i] = {areas[i], pulse_energy(rec, "input", channel::input),
                  pulse_energy(rec, "recall", channel::output), rec.diagnostics};
    });
    return analyze_linearity(std::move(pts), fit_max_area, tolerance);
}

/* ---- heterodyne detection --------------------------------------------- */

namespace detail {

inline std::mutex& fftw_planner_mutex()
{
    static std::mutex m;
    return m;
}

/* in-place complex DFT; sign -1 forward, +1 backward (unnormalized) */
inline void dft(std::vector<complex>& x, int sign)
{
    const int n = static_cast<int>(x.size());
    auto* data = reinterpret_cast<fftw_complex*>(x.data());
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        plan = fftw_plan_dft_1d(n, data, data,
                                sign < 0 ? FFTW_FORWARD : FFTW_BACKWARD,
                                FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
}

inline real dft_frequency(std::size_t k, std::size_t n, real dt)
{
    const real df = 1.0 / (n * dt);
    return k <= n / 2 ? k * df : (static_cast<real>(k) - n) * df;
}

} // namespace detail

/// Photodetector bandwidth: Butterworth band-pass around the LO offset.
struct detector_response
{
    real center_hz = 0.0;
    real bandwidth_hz = 0.0;
    int order = 4;

    real gain(real f_hz) const
    {
        const real x = (std::abs(f_hz) - center_hz) / (0.5 * bandwidth_hz);
        return 1.0 / std::sqrt(1.0 + std::pow(x * x, order));
    }
};

/**
 * Beat signal |E_lo + E(t) exp(i 2 pi f_lo t)|^2 of an envelope sampled at
 * uniform spacing dt, for an ideal square-law detector.
 */
inline std::vector<real> heterodyne_trace(const std::vector<complex>& envelope,
                                          real dt, real f_lo,
                                          real lo_amplitude = 1.0)
{
    if (!(dt > 0)) {
        throw config_error("heterodyne_trace: dt must be positive");
    }
    if (!(f_lo > 0) || f_lo >= 0.5 / dt) {
        throw config_error("heterodyne_trace: LO offset must lie in "
                           "(0, Nyquist)");
    }
    std::vector<real> s(envelope.size());
    for (std::size_t i = 0; i < envelope.size(); ++i) {
        const complex carrier = std::polar(1.0, two_pi * f_lo * i * dt);
        s[i] = std::norm(lo_amplitude + envelope[i] * carrier);
    }
    return s;
}

/**
 * Recovers the complex envelope from a beat signal: keeps the positive
 * sideband above f_lo / 2 (optionally shaped by a detector response),
 * shifts it down by f_lo and removes the LO scale.
 */
inline std::vector<complex>
demodulate(const std::vector<real>& beat, real dt, real f_lo,
           real lo_amplitude = 1.0,
           std::optional<detector_response> detector = std::nullopt)
{
    if (beat.empty()) {
        throw analysis_error("demodulate: empty trace");
    }
    if (!(lo_amplitude > 0)) {
        throw config_error("demodulate: LO amplitude must be positive");
    }
    const std::size_t n = beat.size();
    std::vector<complex> x(beat.begin(), beat.end());
    detail::dft(x, -1);
    for (std::size_t k = 0; k < n; ++k) {
        const real f = detail::dft_frequency(k, n, dt);
        real g = f > 0.5 * f_lo ? 2.0 : 0.0;
        if (g > 0 && detector) {
            g *= detector->gain(f);
        }
        x[k] *= g / static_cast<real>(n);
    }
    detail::dft(x, +1);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] *= std::polar(1.0 / (2.0 * lo_amplitude), -two_pi * f_lo * i * dt);
    }
    return x;
}

/**
 * Output envelope of a record resampled onto a uniform grid over
 * [t0, t1] (linear interpolation, duplicate stamps resolved to the later
 * sample).
 */
inline std::vector<complex> resample_output(const simulation_record& rec,
                                            real t0, real t1, std::size_t n)
{
    if (n < 2 || !(t1 > t0)) {
        throw analysis_error("resample_output: bad grid");
    }
    std::vector<complex> out(n);
    std::size_t j = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const real t = t0 + (t1 - t0) * i / (n - 1);
        while (j + 1 < rec.t.size() && rec.t[j + 1] <= t) {
            ++j;
        }
        if (j + 1 >= rec.t.size() || rec.t[j + 1] == rec.t[j]) {
            out[i] = rec.field_out[j];
            continue;
        }
        const real u = (t - rec.t[j]) / (rec.t[j + 1] - rec.t[j]);
        out[i] = (1 - u) * rec.field_out[j] + u * rec.field_out[j + 1];
    }
    return out;
}

} // namespace eitmem
