// Acceptance runs. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>

#include <eitmem/eitmem.hpp>

using namespace eitmem;

namespace {

/* record hygiene accumulated over every scenario */
struct hygiene
{
    real trace = 0.0;
    real hermiticity = 0.0;
    real min_eig = std::numeric_limits<real>::infinity();
    int runs = 0;

    void add(const run_diagnostics& d)
    {
        trace = std::max(trace, d.max_trace_drift);
        hermiticity = std::max(hermiticity, d.max_hermiticity_defect);
        min_eig = std::min(min_eig, d.min_eigenvalue);
        ++runs;
    }
    void add(const simulation_record& r) { add(r.diagnostics); }
};

hygiene all_runs;

simulation_record run(const sequence& s, const medium_setup& m)
{
    auto rec = run_sequence(s, m.gr, m.geo, m.classes, m.scheme, m.run);
    all_runs.add(rec);
    return rec;
}

struct outcome
{
    bool pass;
    std::string detail;
};

int failures = 0;

void criterion(int id, const char* name, double limit_s,
               const std::function<outcome()>& body)
{
    const auto t0 = std::chrono::steady_clock::now();
    outcome o{false, ""};
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = o.pass && secs < limit_s;
    failures += pass ? 0 : 1;
    std::printf("%s C%d %s: %s [%.1f s, limit %.0f s]\n", pass ? "PASS" : "FAIL", id,
                name, o.detail.c_str(), secs, limit_s);
    std::fflush(stdout);
}

template<class... A>
std::string fmt(const char* f, A... a)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, a...);
    return buf;
}

spectrum sweep(const config& c, real span_hz, real duration, real coupling_hz,
               std::vector<detuning_class> classes)
{
    sequence seq = make_eit_sweep(span_hz, duration, coupling_hz, c.sweep.probe_rabi_hz);
    auto& w = std::get<probe_sweep>(seq.events[1]);
    w.ramp_fraction = c.sweep.ramp_fraction;
    medium_setup m = c.setup();
    m.classes = std::move(classes);
    return sweep_spectrum(run(seq, m), w);
}

real store_efficiency(const sequence& s, const medium_setup& m)
{
    return efficiency(run(s, m));
}

real fid_oracle(real sigma, real tau, real t)
{
    const real u = t / tau;
    return std::exp(-sigma * sigma * tau * tau * (u - 1.0 + std::exp(-u)));
}

/* calibrated model, shared by the decay and efficiency criteria */
std::optional<noise_model> calibrated;

} // namespace

int main()
{
    const config base;
    const real pi = std::numbers::pi;

    criterion(1, "Beer-Lambert anchor", 60, [&] {
        inhomogeneous_profile p = base.profile;
        p.n_spin = 1;
        const auto s = sweep(base, base.sweep.span_hz, base.sweep.duration, 0.0,
                             discretize_profile(p));
        const real t = transmission_at(s, 0.0);
        return outcome{std::abs(t - 0.85) <= 0.01,
                       fmt("T(0) = %.4f, target 0.85 +- 0.01", t)};
    });

    criterion(2, "EIT window", 600, [&] {
        const auto classes = discretize_profile(base.profile);
        const real w0 = eit_fwhm(sweep(base, 300e3, 4e-3, 16e3, classes));
        const bool narrow = std::abs(w0 - 10e3) <= 0.15 * 10e3;

        const std::vector<real> omega{150e3, 300e3, 600e3, 1.5e6};
        std::vector<real> w;
        for (real o : omega) {
            w.push_back(eit_fwhm(sweep(base, 2.4e6, 1.6e-3, o, classes)));
        }
        real sx = 0, sy = 0, sxx = 0, sxy = 0;
        const real n = omega.size();
        for (std::size_t i = 0; i < omega.size(); ++i) {
            sx += omega[i];
            sy += w[i];
            sxx += omega[i] * omega[i];
            sxy += omega[i] * w[i];
        }
        const real slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        real worst = 0.0;
        for (std::size_t i = 1; i < omega.size(); ++i) {
            const real seg = (w[i] - w[i - 1]) / (omega[i] - omega[i - 1]);
            worst = std::max(worst, std::abs(seg / slope - 1.0));
        }
        return outcome{narrow && worst <= 0.1,
                       fmt("FWHM %.0f Hz at 16 kHz (10 kHz +- 15%%); widths %.0f %.0f %.0f "
                           "%.0f Hz, slope %.4f, worst segment %.1f%% (<= 10%%)",
                           w0, w[0], w[1], w[2], w[3], slope, 100 * worst)};
    });

    criterion(3, "parity law", 300, [&] {
        medium_setup counter = base.setup();
        counter.geo.mode = beam_geometry::counter;
        medium_setup co = base.setup();
        co.geo.mode = beam_geometry::co;
        const auto even = make_store_recall_ddc(2);
        const auto odd = make_store_recall_ddc(3, {}, true);
        const real rc = store_efficiency(odd, counter) / store_efficiency(even, counter);
        const real rco = store_efficiency(odd, co) / store_efficiency(even, co);
        const real x = 0.5 * 2.0 * co.geo.residual_mismatch_co * co.gr.length;
        const real expect = std::pow(std::sin(x) / x, 2);
        const bool ok = rc <= 1e-6 && std::abs(rco / expect - 1.0) <= 0.01;
        return outcome{ok, fmt("counter odd/even %.3e (<= 1e-6); co odd/even %.6f vs "
                               "sinc^2 %.6f", rc, rco, expect)};
    });

    criterion(4, "echo invariance", 300, [&] {
        const medium_setup m = base.setup();
        std::vector<real> e;
        for (real t : {8e-3, 0.1, 1.0}) {
            e.push_back(pulse_energy(run(make_store_recall_simple(t), m), "recall",
                                     channel::output));
        }
        for (int n : {2, 250}) {
            e.push_back(pulse_energy(run(make_store_recall_ddc(n), m), "recall",
                                     channel::output));
        }
        const auto [lo, hi] = std::minmax_element(e.begin(), e.end());
        const real spread = (*hi - *lo) / *hi;
        return outcome{spread < 1e-4,
                       fmt("recalled energy spread %.2e over 5 sequences (< 1e-4)", spread)};
    });

    criterion(5, "calibrated decay", 1800, [&] {
        const auto cal = calibrate(base.calibration, base.seed);
        if (!cal.success) {
            return outcome{false, "calibration failed: " + cal.message};
        }
        calibrated = cal.model;
        medium_setup m = base.setup();
        m.run.noise = cal.model;
        m.run.n_traj = 10000;
        const auto r = decay_scan(base.decay_times, base.store.options, m);
        for (const auto* pts : {&r.simple, &r.ddc}) {
            for (const auto& p : *pts) {
                all_runs.add(p.diagnostics);
            }
        }
        const real ts = r.fit_simple.tau;
        const real td = r.fit_ddc.tau;
        const bool ok = r.fit_simple.converged && r.fit_ddc.converged &&
                        std::abs(ts / 0.35 - 1) <= 0.3 && std::abs(td / 2.3 - 1) <= 0.3 &&
                        td / ts >= 5.0;
        return outcome{ok, fmt("sigma %.2f Hz, tau_c %.3g s; tau simple %.3f s (0.35), "
                               "tau ddc %.3f s (2.3), ratio %.2f (>= 5)",
                               rad_to_hz(cal.model.sigma), cal.model.tau_c, ts, td,
                               td / ts)};
    });

    criterion(6, "efficiency scale", 600, [&] {
        const auto seq = make_store_recall_simple(0.1);
        medium_setup m = base.setup();
        const real e = store_efficiency(seq, m);
        m.run.optical_depth = 2.0;
        const real e2 = store_efficiency(seq, m);
        std::string noisy = "no calibrated model";
        if (calibrated) {
            medium_setup n = base.setup();
            n.run.noise = calibrated;
            noisy = fmt("%.4f%%", 100 * store_efficiency(seq, n));
        }
        const bool ok = e >= 1e-3 && e <= 5e-2 && e2 / e >= 5.0;
        return outcome{ok, fmt("efficiency %.4f%% at d = 0.1625 ([0.1%%, 5%%]), %.2fx at "
                               "d = 2 (>= 5x); with calibrated noise %s",
                               100 * e, e2 / e, noisy.c_str())};
    });

    criterion(7, "linearity", 900, [&] {
        const auto r = linearity_scan(base.linearity_areas, base.linearity_storage_time,
                                      base.store.options, base.setup(), 0.1 * pi,
                                      base.linearity_tolerance);
        for (const auto& p : r.points) {
            all_runs.add(p.diagnostics);
        }
        const bool onset_ok = r.onset_area && *r.onset_area >= 0.25 * pi &&
                              *r.onset_area <= pi;
        const std::string onset =
            r.onset_area ? fmt("%.3f pi", *r.onset_area / pi) : std::string("none");
        return outcome{r.r_squared >= 0.99 && onset_ok,
                       fmt("R^2 %.6f over %zu points (>= 0.99); onset %s ([0.25, 1] pi)",
                           r.r_squared, r.n_fit, onset.c_str())};
    });

    criterion(8, "numerical hygiene", 600, [&] {
        std::ostringstream msg;
        const bool rec_ok = all_runs.trace <= 1e-7 && all_runs.hermiticity <= 1e-10 &&
                            all_runs.min_eig >= -1e-7;
        msg << "over " << all_runs.runs << " runs: trace " << all_runs.trace
            << ", hermiticity " << all_runs.hermiticity << ", min eigenvalue "
            << all_runs.min_eig;

        /* Richardson: successive differences shrink 16x per halving */
        const level_scheme s;
        const detuning_class k{hz_to_rad(20e3), hz_to_rad(3e3), 1.0};
        const drive_fields f{hz_to_rad(5e3), hz_to_rad(55e3)};
        auto integrate = [&](int steps) {
            const real T = 40e-6;
            density_matrix rho;
            for (int i = 0; i < steps; ++i) {
                rho = step_rk4(rho, f, k, s, T / steps);
            }
            return rho;
        };
        const auto r1 = integrate(160), r2 = integrate(320), r4 = integrate(640);
        const real d12 = (r1.matrix() - r2.matrix()).cwiseAbs().maxCoeff();
        const real d24 = (r2.matrix() - r4.matrix()).cwiseAbs().maxCoeff();
        const real order_ratio = d12 / d24;
        const bool rk_ok = order_ratio >= 8.0 && order_ratio <= 32.0;
        msg << "; RK4 halving ratio " << order_ratio << " (16, factor 2)";

        /* grid refinement on the default store scenario */
        medium_setup m = base.setup();
        const auto seq = make_store_recall_simple(0.1);
        const auto coarse = run(seq, m);
        const real e0 = efficiency(coarse);
        medium_setup fine = m;
        fine.run.dt = 0.5 * coarse.diagnostics.dt_max;
        fine.gr.n_z = 2 * m.gr.n_z;
        const real e1 = efficiency(run(seq, fine));
        const real change = std::abs(e1 / e0 - 1.0);
        msg << "; dt/2 and 2 n_z change " << 100 * change << "% (< 2%)";

        /* free induction decay against the closed form */
        const noise_model nm = calibrated.value_or(noise_model{23.10, 2.677e-3, 7});
        const real t_end = 3.0 / (nm.sigma * nm.sigma * nm.tau_c);
        const auto c = coherence_decay({}, nm, t_end, 10000, 41);
        real worst = 0.0;
        int checked = 0;
        for (std::size_t i = 0; i < c.times.size(); ++i) {
            const real expect = fid_oracle(nm.sigma, nm.tau_c, c.times[i]);
            if (expect >= 0.7) {
                worst = std::max(worst, std::abs(c.coherence[i] / expect - 1.0));
                ++checked;
            }
        }
        const bool fid_ok = checked > 3 && worst <= 0.02;
        msg << "; OU FID worst " << 100 * worst << "% over " << checked
            << " points (2%)";
        return outcome{rec_ok && rk_ok && change < 0.02 && fid_ok, msg.str()};
    });

    return failures == 0 ? 0 : 1;
}
