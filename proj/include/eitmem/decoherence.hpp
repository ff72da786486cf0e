#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <eitmem/core.hpp>
#include <eitmem/fit.hpp>
#include <eitmem/sequence.hpp>

namespace eitmem {

/**
 * Effective spin-frequency noise: a stationary Ornstein-Uhlenbeck process
 * with RMS sigma (rad/s) and correlation time tau_c (s). An infinite tau_c
 * freezes the value along each trajectory.
 */
struct noise_model
{
    real sigma = 0.0;
    real tau_c = 1e-3;
    std::uint64_t seed = 1;

    void validate() const
    {
        if (!(sigma >= 0)) {
            throw config_error("noise_model: sigma must be >= 0");
        }
        if (!(tau_c > 0)) {
            throw config_error("noise_model: tau_c must be > 0");
        }
    }

    bool frozen() const { return std::isinf(tau_c); }
};

/// Sign of the spin coherence in the frame toggled by each pi pulse.
class toggling_frame
{
public:
    toggling_frame() = default;
    explicit toggling_frame(std::vector<real> flips) : m_flips(std::move(flips))
    {
        std::sort(m_flips.begin(), m_flips.end());
    }

    const std::vector<real>& flips() const { return m_flips; }

    int sign(real t) const
    {
        const auto n = std::upper_bound(m_flips.begin(), m_flips.end(), t) -
                       m_flips.begin();
        return n % 2 == 0 ? 1 : -1;
    }

private:
    std::vector<real> m_flips;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/* generator for trajectory k, independent of evaluation order */
inline std::mt19937_64 trajectory_rng(std::uint64_t seed, std::uint64_t k)
{
    return std::mt19937_64(splitmix64(seed ^ splitmix64(k + 1)));
}

/* (2/3)u^3 - u^4/2 + ... written to avoid cancellation at small u */
inline real ou_integral_var_factor(real u)
{
    if (u < 1e-2) {
        return u * u * u * (2.0 / 3.0 - u * (0.5 - u * 7.0 / 30.0));
    }
    const real a = std::exp(-u);
    return 2.0 * u - 3.0 + 4.0 * a - a * a;
}

/* u - 1 + exp(-u) */
inline real ou_fid_factor(real u)
{
    if (u < 1e-4) {
        return u * u * (0.5 - u / 6.0);
    }
    return u + std::expm1(-u);
}

/**
 * Exact joint update of the OU value x and its running integral over a
 * step h, conditioned on the starting value.
 */
class ou_integrator
{
public:
    ou_integrator(const noise_model& m, real h) : m_frozen(m.frozen()), m_h(h)
    {
        if (m_frozen) {
            return;
        }
        const real u = h / m.tau_c;
        m_a = std::exp(-u);
        m_b = m.tau_c * (-std::expm1(-u));
        const real s2 = m.sigma * m.sigma;
        const real var_x = s2 * (-std::expm1(-2.0 * u));
        const real var_i = s2 * m.tau_c * m.tau_c * ou_integral_var_factor(u);
        const real cov = s2 * m_b * m_b / m.tau_c;
        /* Cholesky of [[var_x, cov], [cov, var_i]] */
        m_l11 = std::sqrt(std::max(var_x, 0.0));
        m_l21 = m_l11 > 0 ? cov / m_l11 : 0.0;
        m_l22 = std::sqrt(std::max(var_i - m_l21 * m_l21, 0.0));
    }

    template<class Rng>
    void step(real& x, real& phase, Rng& rng,
              std::normal_distribution<real>& normal) const
    {
        if (m_frozen) {
            phase += m_h * x;
            return;
        }
        const real z1 = normal(rng);
        const real z2 = normal(rng);
        phase += m_b * x + m_l21 * z1 + m_l22 * z2;
        x = m_a * x + m_l11 * z1;
    }

private:
    bool m_frozen;
    real m_h;
    real m_a = 1.0;
    real m_b = 0.0;
    real m_l11 = 0.0;
    real m_l21 = 0.0;
    real m_l22 = 0.0;
};

} // namespace detail

/**
 * Stationary OU samples x_0 .. x_{n-1} at spacing dt using the exact
 * one-step transition. Requires dt <= tau_c / 10.
 */
inline std::vector<real> sample_ou(const noise_model& m, real dt,
                                   std::size_t n_steps)
{
    m.validate();
    if (!(dt > 0) || dt > m.tau_c / 10.0) {
        throw config_error("sample_ou: dt must lie in (0, tau_c / 10]");
    }
    std::mt19937_64 rng(m.seed);
    std::normal_distribution<real> normal;
    std::vector<real> x(n_steps);
    if (n_steps == 0) {
        return x;
    }
    const real a = std::exp(-dt / m.tau_c);
    const real kick = m.sigma * std::sqrt(-std::expm1(-2.0 * dt / m.tau_c));
    x[0] = m.sigma * normal(rng);
    for (std::size_t i = 1; i < n_steps; ++i) {
        x[i] = a * x[i - 1] + kick * normal(rng);
    }
    return x;
}

/// Coherence |<exp(i phi(t))>| with its Monte-Carlo standard error.
struct coherence_curve
{
    std::vector<real> times;
    std::vector<real> coherence;
    std::vector<real> std_error;
};

/**
 * Monte-Carlo coherence at the requested times for a given set of pi-pulse
 * flip times. Trajectory k draws from its own counter-seeded generator, and
 * partial sums are combined in trajectory order.
 */
inline coherence_curve coherence_at(const std::vector<real>& flip_times,
                                    const noise_model& m,
                                    std::vector<real> eval_times, int n_traj)
{
    m.validate();
    if (n_traj < 1) {
        throw config_error("coherence: n_traj must be >= 1");
    }
    std::sort(eval_times.begin(), eval_times.end());
    const toggling_frame frame(flip_times);

    /* merged breakpoints; flags mark evaluation points */
    struct node
    {
        real t;
        int eval_index;
    };
    std::vector<node> nodes;
    for (std::size_t i = 0; i < eval_times.size(); ++i) {
        nodes.push_back({eval_times[i], static_cast<int>(i)});
    }
    for (real f : frame.flips()) {
        nodes.push_back({f, -1});
    }
    std::stable_sort(nodes.begin(), nodes.end(),
                     [](const node& a, const node& b) { return a.t < b.t; });

    std::vector<detail::ou_integrator> steps;
    std::vector<int> signs;
    real prev = 0.0;
    for (const auto& nd : nodes) {
        const real h = std::max(nd.t - prev, 0.0);
        steps.emplace_back(m, h);
        signs.push_back(frame.sign(0.5 * (prev + nd.t)));
        prev = std::max(prev, nd.t);
    }

    const std::size_t ne = eval_times.size();
    std::vector<real> sc(ne, 0.0), ss(ne, 0.0), scc(ne, 0.0), sss(ne, 0.0),
        scs(ne, 0.0);
    std::vector<real> phase_at(ne);

    for (int k = 0; k < n_traj; ++k) {
        auto rng = detail::trajectory_rng(m.seed, static_cast<std::uint64_t>(k));
        std::normal_distribution<real> normal;
        real x = m.sigma * normal(rng);
        /* toggled phase: each interval contributes sign * integral */
        real phase = 0.0;
        for (std::size_t j = 0; j < nodes.size(); ++j) {
            real increment = 0.0;
            steps[j].step(x, increment, rng, normal);
            phase += signs[j] * increment;
            if (nodes[j].eval_index >= 0) {
                phase_at[nodes[j].eval_index] = phase;
            }
        }
        for (std::size_t i = 0; i < ne; ++i) {
            const real c = std::cos(phase_at[i]);
            const real s = std::sin(phase_at[i]);
            sc[i] += c;
            ss[i] += s;
            scc[i] += c * c;
            sss[i] += s * s;
            scs[i] += c * s;
        }
    }

    coherence_curve out;
    out.times = eval_times;
    out.coherence.resize(ne);
    out.std_error.resize(ne);
    const real n = n_traj;
    for (std::size_t i = 0; i < ne; ++i) {
        const real mc = sc[i] / n;
        const real ms = ss[i] / n;
        const real mag = std::hypot(mc, ms);
        out.coherence[i] = mag;
        const real ux = mag > 0 ? mc / mag : 1.0;
        const real uy = mag > 0 ? ms / mag : 0.0;
        real var = 0.0;
        if (n_traj > 1) {
            const real vcc = (scc[i] - n * mc * mc) / (n - 1);
            const real vss = (sss[i] - n * ms * ms) / (n - 1);
            const real vcs = (scs[i] - n * mc * ms) / (n - 1);
            var = std::max(ux * ux * vcc + uy * uy * vss + 2 * ux * uy * vcs,
                           0.0);
        }
        out.std_error[i] = std::sqrt(var / n);
    }
    return out;
}

/// Coherence on a uniform grid over [0, total_time].
inline coherence_curve coherence_decay(const std::vector<real>& flip_times,
                                       const noise_model& m, real total_time,
                                       int n_traj, int n_points = 201)
{
    if (n_traj < 100) {
        throw config_error("coherence_decay: n_traj must be >= 100");
    }
    if (n_points < 2 || !(total_time > 0)) {
        throw config_error("coherence_decay: need a positive span and two "
                           "points");
    }
    std::vector<real> t(n_points);
    for (int i = 0; i < n_points; ++i) {
        t[i] = total_time * i / (n_points - 1);
    }
    t.back() = total_time;
    return coherence_at(flip_times, m, t, n_traj);
}

/**
 * Closed-form Gaussian-noise coherence exp(-Var(phi) / 2) for the toggled
 * phase accumulated up to time t.
 */
inline real analytic_coherence(const std::vector<real>& flip_times,
                               const noise_model& m, real t)
{
    m.validate();
    if (m.sigma == 0 || t <= 0) {
        return 1.0;
    }
    std::vector<real> edges{0.0};
    std::vector<real> sorted = flip_times;
    std::sort(sorted.begin(), sorted.end());
    for (real f : sorted) {
        if (f > 0 && f < t) {
            edges.push_back(f);
        }
    }
    edges.push_back(t);
    const toggling_frame frame(sorted);

    const real s2 = m.sigma * m.sigma;
    if (m.frozen()) {
        real area = 0.0;
        for (std::size_t j = 0; j + 1 < edges.size(); ++j) {
            area += frame.sign(0.5 * (edges[j] + edges[j + 1])) *
                    (edges[j + 1] - edges[j]);
        }
        return std::exp(-0.5 * s2 * area * area);
    }

    const real tau = m.tau_c;
    real diag = 0.0;
    real cross = 0.0;
    real carried = 0.0;
    for (std::size_t j = 0; j + 1 < edges.size(); ++j) {
        const real len = edges[j + 1] - edges[j];
        const real u = len / tau;
        const int sgn = frame.sign(0.5 * (edges[j] + edges[j + 1]));
        const real g = -std::expm1(-u);
        diag += 2.0 * detail::ou_fid_factor(u);
        cross += sgn * g * carried;
        carried = carried * std::exp(-u) + sgn * g;
    }
    const real var = s2 * tau * tau * (diag + 2.0 * cross);
    return std::exp(-0.5 * var);
}

/// Flip times of the two-pulse protocol (T/4, 3T/4).
inline std::vector<real> simple_flips(real storage_time)
{
    return {0.25 * storage_time, 0.75 * storage_time};
}

/// Flip times of the 4 ms bang-bang train ending 2 ms before recall.
inline std::vector<real> ddc_flips(real storage_time)
{
    const int n = static_cast<int>(std::lround(storage_time / 0.004));
    std::vector<real> t;
    for (int k = 0; k < n; ++k) {
        t.push_back(0.002 + 0.004 * k);
    }
    return t;
}

/**
 * Even bang-bang pulse count whose 4 ms train lasts closest to the
 * requested storage time (ties round up). At least two.
 */
inline int ddc_even_pulse_count(real storage_time)
{
    const long pairs = std::lround(storage_time / 0.008);
    return static_cast<int>(std::max(2L, 2 * pairs));
}

/// Storage time actually realized by the even bang-bang train.
inline real ddc_storage_time(real storage_time)
{
    return 0.004 * ddc_even_pulse_count(storage_time);
}

/// Coherence factor on the stored spin wave at recall.
inline real decay_envelope(const sequence& s, const noise_model& m,
                           int n_traj)
{
    m.validate();
    const real t = s.recall_time();
    if (m.sigma == 0) {
        return 1.0;
    }
    return coherence_at(s.rf_times(), m, {t}, n_traj).coherence.front();
}

struct calibration_targets
{
    real tau_simple = 0.35;
    real tau_ddc = 2.3;
    std::vector<real> storage_times{0.1, 0.2, 0.4, 0.7, 1.0, 1.5, 2.0};
    real sigma_min = 1e-1;
    real sigma_max = 1e4;
    real tau_c_min = 1e-4;
    real tau_c_max = 1e2;
    int grid = 41;
    real tolerance = 0.3;
};

struct calibration_result
{
    noise_model model;
    real tau_simple = 0.0;
    real tau_ddc = 0.0;
    real error_simple = 0.0;
    real error_ddc = 0.0;
    real objective = 0.0;
    bool success = false;
    std::string message;
    /* search diagnostics */
    real grid_best_sigma = 0.0;
    real grid_best_tau_c = 0.0;
    real grid_best_objective = 0.0;
    int refinement_sweeps = 0;
    int evaluations = 0;
};

/// Energy decay constant of a protocol, from the analytic coherence.
inline fit_result protocol_energy_fit(const noise_model& m,
                                      const std::vector<real>& storage_times,
                                      bool ddc)
{
    decay_curve c;
    for (real requested : storage_times) {
        const real t = ddc ? ddc_storage_time(requested) : requested;
        const real coh =
            analytic_coherence(ddc ? ddc_flips(t) : simple_flips(t), m, t);
        c.times.push_back(t);
        c.energies.push_back(coh * coh);
    }
    return fit_exponential(c);
}

/**
 * Finds (sigma, tau_c) whose simple-rephasing and bang-bang energy decay
 * constants match the targets: log-grid scan, then coordinate descent in
 * log space. Failure to get both within tolerance is reported, not thrown.
 */
inline calibration_result calibrate(const calibration_targets& targets,
                                    std::uint64_t seed = 1)
{
    if (!(targets.tau_simple > 0) || !(targets.tau_ddc > targets.tau_simple)) {
        throw config_error("calibrate: need 0 < tau_simple < tau_ddc");
    }
    calibration_result res;
    const real big = 1e6;

    struct eval_out
    {
        real objective;
        real ts;
        real td;
    };
    auto evaluate = [&](real log_sigma, real log_tau) -> eval_out {
        ++res.evaluations;
        noise_model m{std::exp(log_sigma), std::exp(log_tau), seed};
        for (real t : targets.storage_times) {
            const real c = analytic_coherence(simple_flips(t), m, t);
            if (!(c * c > 1e-300)) {
                return {big, 0.0, 0.0};
            }
        }
        fit_result fs, fd;
        try {
            fs = protocol_energy_fit(m, targets.storage_times, false);
            fd = protocol_energy_fit(m, targets.storage_times, true);
        } catch (const analysis_error&) {
            return {big, 0.0, 0.0};
        }
        if (!(fs.tau > 0) || !(fd.tau > 0) || !std::isfinite(fs.tau) ||
            !std::isfinite(fd.tau)) {
            return {big, fs.tau, fd.tau};
        }
        const real es = std::log(fs.tau / targets.tau_simple);
        const real ed = std::log(fd.tau / targets.tau_ddc);
        return {es * es + ed * ed, fs.tau, fd.tau};
    };

    const real ls0 = std::log(targets.sigma_min);
    const real ls1 = std::log(targets.sigma_max);
    const real lt0 = std::log(targets.tau_c_min);
    const real lt1 = std::log(targets.tau_c_max);
    const int n = targets.grid;
    real best_ls = ls0, best_lt = lt0;
    eval_out best{big * 10, 0, 0};
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const real ls = ls0 + (ls1 - ls0) * i / (n - 1);
            const real lt = lt0 + (lt1 - lt0) * j / (n - 1);
            const auto e = evaluate(ls, lt);
            if (e.objective < best.objective) {
                best = e;
                best_ls = ls;
                best_lt = lt;
            }
        }
    }
    res.grid_best_sigma = std::exp(best_ls);
    res.grid_best_tau_c = std::exp(best_lt);
    res.grid_best_objective = best.objective;

    real step = (ls1 - ls0) / (n - 1);
    while (step > 1e-7 && res.refinement_sweeps < 500) {
        ++res.refinement_sweeps;
        bool moved = false;
        for (int axis = 0; axis < 2; ++axis) {
            for (int dir : {-1, 1}) {
                const real ls = best_ls + (axis == 0 ? dir * step : 0.0);
                const real lt = best_lt + (axis == 1 ? dir * step : 0.0);
                if (ls < ls0 || ls > ls1 || lt < lt0 || lt > lt1) {
                    continue;
                }
                const auto e = evaluate(ls, lt);
                if (e.objective < best.objective) {
                    best = e;
                    best_ls = ls;
                    best_lt = lt;
                    moved = true;
                }
            }
        }
        if (!moved) {
            step *= 0.5;
        }
    }

    res.model = noise_model{std::exp(best_ls), std::exp(best_lt), seed};
    res.tau_simple = best.ts;
    res.tau_ddc = best.td;
    res.objective = best.objective;
    res.error_simple = std::abs(best.ts / targets.tau_simple - 1.0);
    res.error_ddc = std::abs(best.td / targets.tau_ddc - 1.0);
    res.success = best.objective < big && res.error_simple <= targets.tolerance &&
                  res.error_ddc <= targets.tolerance;
    res.message = res.success
                      ? "calibrated"
                      : "no (sigma, tau_c) in the search box reproduces both "
                        "decay constants within tolerance";
    return res;
}

} // namespace eitmem
