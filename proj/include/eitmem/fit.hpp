#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include <eitmem/core.hpp>

namespace eitmem {

/// Recalled-pulse energy against storage time.
struct decay_curve
{
    std::vector<real> times;
    std::vector<real> energies;
    std::vector<real> std_errors;

    void check() const
    {
        if (times.size() != energies.size()) {
            throw analysis_error("decay_curve: length mismatch");
        }
        for (std::size_t i = 1; i < times.size(); ++i) {
            if (!(times[i] > times[i - 1])) {
                throw analysis_error("decay_curve: times not strictly "
                                     "increasing");
            }
        }
        for (real e : energies) {
            if (!(e >= 0)) {
                throw analysis_error("decay_curve: negative energy");
            }
        }
    }
};

struct fit_result
{
    real amplitude = 0.0;
    real tau = 0.0;
    real residual_norm = 0.0;
    bool converged = false;
    int iterations = 0;
};

/**
 * Least-squares fit of A exp(-t / tau). The warm start is a straight-line
 * fit to log(E); Levenberg-damped Gauss-Newton polishes it on the linear
 * residuals. Two points are fitted in closed form.
 */
inline fit_result fit_exponential(const decay_curve& curve,
                                  int max_iterations = 200)
{
    curve.check();
    const std::size_t n = curve.times.size();
    if (n < 2) {
        throw analysis_error("fit_exponential: need at least two points");
    }
    for (real e : curve.energies) {
        if (!(e > 0)) {
            throw analysis_error("fit_exponential: energies must be positive");
        }
    }
    const auto& t = curve.times;
    const real scale = *std::max_element(curve.energies.begin(),
                                         curve.energies.end());
    std::vector<real> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = curve.energies[i] / scale;
    }

    fit_result r;
    if (n == 2) {
        const real ratio = std::log(y[0] / y[1]);
        r.tau = (t[1] - t[0]) / ratio;
        r.amplitude = curve.energies[0] * std::exp(t[0] / r.tau);
        r.converged = r.tau > 0 && std::isfinite(r.tau);
        return r;
    }

    /* log-linear warm start */
    real st = 0, sl = 0, stt = 0, stl = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const real l = std::log(y[i]);
        st += t[i];
        sl += l;
        stt += t[i] * t[i];
        stl += t[i] * l;
    }
    const real denom = n * stt - st * st;
    real rate = -(n * stl - st * sl) / denom;
    real amp = std::exp((sl + rate * st) / n);

    auto ssr = [&](real a, real k) {
        real s = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const real d = a * std::exp(-k * t[i]) - y[i];
            s += d * d;
        }
        return s;
    };

    real current = ssr(amp, rate);
    real lambda = 1e-3;
    int it = 0;
    bool converged = false;
    for (; it < max_iterations; ++it) {
        /* normal equations for (amp, rate) */
        real jaa = 0, jak = 0, jkk = 0, ga = 0, gk = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const real e = std::exp(-rate * t[i]);
            const real res = amp * e - y[i];
            const real da = e;
            const real dk = -amp * t[i] * e;
            jaa += da * da;
            jak += da * dk;
            jkk += dk * dk;
            ga += da * res;
            gk += dk * res;
        }
        bool accepted = false;
        real step_a = 0, step_k = 0;
        for (int tries = 0; tries < 30; ++tries) {
            const real a11 = jaa * (1 + lambda);
            const real a22 = jkk * (1 + lambda);
            const real det = a11 * a22 - jak * jak;
            if (det <= 0) {
                lambda *= 10;
                continue;
            }
            step_a = -(a22 * ga - jak * gk) / det;
            step_k = -(a11 * gk - jak * ga) / det;
            const real trial = ssr(amp + step_a, rate + step_k);
            const real rel_step = std::max(std::abs(step_a) / std::abs(amp),
                                           std::abs(step_k) / std::abs(rate));
            /* near the minimum the sum of squares is flat to rounding; tiny
               steps are trusted to the gradient */
            if (trial <= current || rel_step <= 1e-9) {
                amp += step_a;
                rate += step_k;
                current = std::min(trial, current);
                lambda = std::max(lambda * 0.1, 1e-12);
                accepted = true;
                if (rel_step <= 1e-13) {
                    converged = true;
                }
                break;
            }
            lambda *= 10;
        }
        if (!accepted) {
            /* no descent direction left: at a minimum to working precision */
            converged = true;
            break;
        }
        if (converged) {
            ++it;
            break;
        }
    }

    r.amplitude = amp * scale;
    r.tau = 1.0 / rate;
    r.residual_norm = std::sqrt(current) * scale;
    r.iterations = it;
    r.converged = converged && rate > 0 && std::isfinite(r.tau);
    return r;
}

} // namespace eitmem
