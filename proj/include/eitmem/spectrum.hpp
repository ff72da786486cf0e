#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <vector>

#include <eitmem/core.hpp>

namespace eitmem {

/** Probe transmission sampled against probe frequency offset. */
struct spectrum
{
    std::vector<real> frequency_hz;
    std::vector<real> transmission;

    void check() const
    {
        if (frequency_hz.size() != transmission.size()) {
            throw analysis_error("spectrum: axis and data length differ");
        }
        for (std::size_t i = 1; i < frequency_hz.size(); ++i) {
            if (!(frequency_hz[i] > frequency_hz[i - 1])) {
                throw analysis_error("spectrum: frequency axis not strictly "
                                     "increasing");
            }
        }
    }
};

/// Location and depth of the most prominent transmission maximum.
struct transparency_peak
{
    std::size_t index;
    real prominence;
    real left_floor;
    real right_floor;
};

namespace detail {

inline std::optional<transparency_peak>
find_transparency_peak(const std::vector<real>& t, real min_prominence)
{
    const std::size_t n = t.size();
    if (n < 3) {
        return std::nullopt;
    }
    std::vector<real> left_min(n), right_min(n);
    left_min[0] = t[0];
    for (std::size_t i = 1; i < n; ++i) {
        left_min[i] = std::min(left_min[i - 1], t[i]);
    }
    right_min[n - 1] = t[n - 1];
    for (std::size_t i = n - 1; i-- > 0;) {
        right_min[i] = std::min(right_min[i + 1], t[i]);
    }

    std::optional<transparency_peak> best;
    for (std::size_t i = 1; i + 1 < n; ++i) {
        /* plateau-tolerant local maximum: strictly above one neighbour */
        if (!(t[i] >= t[i - 1] && t[i] >= t[i + 1])) {
            continue;
        }
        if (!(t[i] > t[i - 1] || t[i] > t[i + 1])) {
            continue;
        }
        const real floor = std::max(left_min[i], right_min[i]);
        const real prom = t[i] - floor;
        if (prom > min_prominence && (!best || prom > best->prominence)) {
            best = transparency_peak{i, prom, left_min[i], right_min[i]};
        }
    }
    return best;
}

} // namespace detail

/**
 * Full width (Hz) of the transparency window: the most prominent local
 * transmission maximum is measured against the deepest absorption on either
 * side, and the crossings of the half-contrast level are linearly
 * interpolated. Maxima whose prominence is below min_relative_prominence
 * times the spectrum's full range are treated as ripple.
 */
inline real eit_fwhm(const spectrum& s, real min_relative_prominence = 0.05)
{
    s.check();
    const auto& t = s.transmission;
    const auto& f = s.frequency_hz;
    if (t.empty()) {
        throw analysis_error("eit_fwhm: empty spectrum");
    }
    const auto [lo, hi] = std::minmax_element(t.begin(), t.end());
    const real range = *hi - *lo;
    const auto peak = detail::find_transparency_peak(
        t, std::max(min_relative_prominence * range, 1e-12));
    if (!peak) {
        throw analysis_error("eit_fwhm: no transparency feature found");
    }
    const std::size_t i = peak->index;
    const real level = t[i] - 0.5 * peak->prominence;

    std::size_t r = i;
    while (r + 1 < t.size() && t[r] > level) {
        ++r;
    }
    std::size_t l = i;
    while (l > 0 && t[l] > level) {
        --l;
    }
    if (t[r] > level || t[l] > level) {
        throw analysis_error("eit_fwhm: half-contrast level not crossed");
    }
    const real fr = f[r - 1] + (level - t[r - 1]) / (t[r] - t[r - 1]) *
                                   (f[r] - f[r - 1]);
    const real fl =
        f[l] + (level - t[l]) / (t[l + 1] - t[l]) * (f[l + 1] - f[l]);
    return fr - fl;
}

} // namespace eitmem
