#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include <eitmem/atom_dynamics.hpp>
#include <eitmem/core.hpp>

/*
 * Experiment timelines. Event values are kept in file units (seconds, Hz)
 * so that a sequence survives a write/read cycle bit for bit; the simulator
 * converts to rad/s when it compiles the drives.
 *
 * Store/recall timelines put t = 0 at the storage instant (coupling off).
 * The input probe pulse is the one event that lives at negative times.
 */

namespace eitmem {

enum class pulse_shape { square, gaussian };
enum class beam_geometry { co, counter };

struct probe_pulse
{
    real t0 = 0.0;
    real duration = 20e-6;
    real peak_rabi_hz = 0.0;
    pulse_shape shape = pulse_shape::square;
    /// raised-cosine edge length as a fraction of the duration (square only)
    real ramp_fraction = 0.0;
    real detuning_hz = 0.0;

    real end() const { return t0 + duration; }

    /// envelope magnitude relative to the peak at time t
    real profile(real t) const
    {
        if (t < t0 || t > end()) {
            return 0.0;
        }
        const real tau = t - t0;
        if (shape == pulse_shape::gaussian) {
            const real sigma = duration / 6.0;
            const real x = (tau - 0.5 * duration) / sigma;
            return std::exp(-0.5 * x * x);
        }
        const real ramp = ramp_fraction * duration;
        if (ramp > 0) {
            if (tau < ramp) {
                return 0.5 * (1.0 - std::cos(std::numbers::pi * tau / ramp));
            }
            if (tau > duration - ramp) {
                const real u = duration - tau;
                return 0.5 * (1.0 - std::cos(std::numbers::pi * u / ramp));
            }
        }
        return 1.0;
    }

    /// pulse area per unit peak Rabi frequency (s)
    real area_per_rabi() const
    {
        if (shape == pulse_shape::gaussian) {
            const real sigma = duration / 6.0;
            return sigma * std::sqrt(two_pi) * std::erf(3.0 / std::sqrt(2.0));
        }
        return duration * (1.0 - ramp_fraction);
    }

    real area() const { return hz_to_rad(peak_rabi_hz) * area_per_rabi(); }

    void set_area(real area_rad)
    {
        peak_rabi_hz = rad_to_hz(area_rad / area_per_rabi());
    }

    bool operator==(const probe_pulse&) const = default;
};

struct coupling_set
{
    real t = 0.0;
    real rabi_hz = 0.0;

    bool operator==(const coupling_set&) const = default;
};

struct rf_pulse_at
{
    real t = 0.0;
    rf_pulse pulse;

    /// occupied interval; finite pulses are centred on t
    real start() const { return pulse.instantaneous ? t : t - 0.5 * pulse.duration; }
    real end() const { return pulse.instantaneous ? t : t + 0.5 * pulse.duration; }

    bool operator==(const rf_pulse_at&) const = default;
};

struct recall_at
{
    real t = 0.0;
    real rabi_hz = 0.0;
    /// length of the recorded read-out window
    real window = 30e-6;

    bool operator==(const recall_at&) const = default;
};

struct probe_sweep
{
    real t0 = 0.0;
    real duration = 4e-3;
    real span_hz = 300e3;
    real rabi_hz = 100.0;
    /// raised-cosine turn-on/off length as a fraction of the duration
    real ramp_fraction = 0.025;

    real end() const { return t0 + duration; }
    real rate_hz_per_s() const { return span_hz / duration; }
    /// instantaneous probe offset from line centre
    real frequency_hz(real t) const
    {
        return -0.5 * span_hz + rate_hz_per_s() * (t - t0);
    }

    /// envelope magnitude relative to rabi_hz at time t
    real profile(real t) const
    {
        if (t < t0 || t > end()) {
            return 0.0;
        }
        const real ramp = ramp_fraction * duration;
        const real u = std::min(t - t0, end() - t);
        if (ramp > 0 && u < ramp) {
            return 0.5 * (1.0 - std::cos(std::numbers::pi * u / ramp));
        }
        return 1.0;
    }

    /// true on the flat part of the envelope
    bool flat(real t) const
    {
        const real ramp = ramp_fraction * duration;
        return t >= t0 + ramp && t <= end() - ramp;
    }

    bool operator==(const probe_sweep&) const = default;
};

using event = std::variant<probe_pulse, coupling_set, rf_pulse_at, recall_at,
                           probe_sweep>;

inline real event_time(const event& e)
{
    return std::visit(
        [](const auto& v) -> real {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, probe_pulse> ||
                          std::is_same_v<T, probe_sweep>) {
                return v.t0;
            } else {
                return v.t;
            }
        },
        e);
}

struct sequence
{
    std::vector<event> events;
    /// permit an odd rephasing count (parity experiments)
    bool parity_override = false;

    real total_duration() const
    {
        real end = 0.0;
        for (const auto& e : events) {
            std::visit(
                [&](const auto& v) {
                    using T = std::decay_t<decltype(v)>;
                    if constexpr (std::is_same_v<T, probe_pulse> ||
                                  std::is_same_v<T, probe_sweep>) {
                        end = std::max(end, v.end());
                    } else if constexpr (std::is_same_v<T, recall_at>) {
                        end = std::max(end, v.t + v.window);
                    } else if constexpr (std::is_same_v<T, rf_pulse_at>) {
                        end = std::max(end, v.end());
                    } else {
                        end = std::max(end, v.t);
                    }
                },
                e);
        }
        return end;
    }

    int rf_pulse_count() const
    {
        return static_cast<int>(std::count_if(
            events.begin(), events.end(), [](const event& e) {
                return std::holds_alternative<rf_pulse_at>(e);
            }));
    }

    std::vector<real> rf_times() const
    {
        std::vector<real> t;
        for (const auto& e : events) {
            if (const auto* p = std::get_if<rf_pulse_at>(&e)) {
                t.push_back(p->t);
            }
        }
        return t;
    }

    const recall_at* recall() const
    {
        for (const auto& e : events) {
            if (const auto* r = std::get_if<recall_at>(&e)) {
                return r;
            }
        }
        return nullptr;
    }

    real recall_time() const
    {
        const auto* r = recall();
        if (!r) {
            throw usage_error("sequence has no recall event");
        }
        return r->t;
    }

    const probe_sweep* sweep() const
    {
        for (const auto& e : events) {
            if (const auto* s = std::get_if<probe_sweep>(&e)) {
                return s;
            }
        }
        return nullptr;
    }

    void sort()
    {
        std::stable_sort(events.begin(), events.end(),
                         [](const event& a, const event& b) {
                             return event_time(a) < event_time(b);
                         });
    }

    bool operator==(const sequence&) const = default;
};

/// Knobs shared by the store/recall builders.
struct store_options
{
    real probe_duration = 20e-6;
    real probe_area = 0.05 * std::numbers::pi;
    pulse_shape probe_shape = pulse_shape::square;
    real ramp_fraction = 0.0;
    /// storage coupling (the 10 mW beam)
    real coupling_rabi_hz = 55e3;
    /// defaults to the storage coupling when negative
    real recall_rabi_hz = -1.0;
    /// delay of coupling switch-off after the probe ends
    real coupling_lag = 0.0;
    real recall_window = 30e-6;
    rf_pulse rf;
};

namespace detail {

inline sequence store_prologue(const store_options& o)
{
    probe_pulse p;
    p.t0 = -o.probe_duration;
    p.duration = o.probe_duration;
    p.shape = o.probe_shape;
    p.ramp_fraction = o.ramp_fraction;
    p.set_area(o.probe_area);

    sequence s;
    s.events.push_back(coupling_set{p.t0, o.coupling_rabi_hz});
    s.events.push_back(p);
    s.events.push_back(coupling_set{o.coupling_lag, 0.0});
    return s;
}

inline recall_at store_epilogue(const store_options& o, real t)
{
    return recall_at{t,
                     o.recall_rabi_hz < 0 ? o.coupling_rabi_hz
                                          : o.recall_rabi_hz,
                     o.recall_window};
}

} // namespace detail

/// Weak probe chirped linearly across the span with the coupling held on.
inline sequence make_eit_sweep(real span_hz = 300e3, real duration = 4e-3,
                               real coupling_rabi_hz = 0.0,
                               real probe_rabi_hz = 100.0)
{
    if (!(span_hz > 0) || !(duration > 0)) {
        throw config_error("make_eit_sweep: span and duration must be "
                           "positive");
    }
    if (!(probe_rabi_hz > 0)) {
        throw config_error("make_eit_sweep: probe Rabi must be positive");
    }
    sequence s;
    s.events.push_back(coupling_set{0.0, coupling_rabi_hz});
    probe_sweep w;
    w.duration = duration;
    w.span_hz = span_hz;
    w.rabi_hz = probe_rabi_hz;
    s.events.push_back(w);
    return s;
}

/// Store, rephase with two pulses at T/4 and 3T/4, recall at T.
inline sequence make_store_recall_simple(real storage_time,
                                         store_options o = {})
{
    if (!(storage_time > 0)) {
        throw config_error("make_store_recall_simple: storage time must be "
                           "positive");
    }
    o.rf.validate();
    const real guard = std::max(o.rf.duration, o.coupling_lag);
    if (!(0.25 * storage_time > guard)) {
        throw config_error("make_store_recall_simple: storage time too short "
                           "to fit the rephasing pulses");
    }
    sequence s = detail::store_prologue(o);
    s.events.push_back(rf_pulse_at{0.25 * storage_time, o.rf});
    s.events.push_back(rf_pulse_at{0.75 * storage_time, o.rf});
    s.events.push_back(detail::store_epilogue(o, storage_time));
    return s;
}

/// Bang-bang train: pulses 2 ms after storage, every 4 ms, recall at 4N ms.
inline sequence make_store_recall_ddc(int n_pulses, store_options o = {},
                                      bool allow_odd = false)
{
    if (n_pulses < 1) {
        throw config_error("make_store_recall_ddc: need at least one pulse");
    }
    if (n_pulses % 2 != 0 && !allow_odd) {
        throw config_error(
            "make_store_recall_ddc: odd rephasing count leaves the spin wave "
            "reversed, which cannot be read out with counter-propagating "
            "beams");
    }
    o.rf.validate();
    if (o.rf.duration >= 0.002 || o.coupling_lag >= 0.002 - 0.5 * o.rf.duration) {
        throw config_error("make_store_recall_ddc: pulses do not fit the "
                           "4 ms spacing");
    }
    sequence s = detail::store_prologue(o);
    s.parity_override = allow_odd && n_pulses % 2 != 0;
    for (int k = 0; k < n_pulses; ++k) {
        s.events.push_back(rf_pulse_at{0.002 + 0.004 * k, o.rf});
    }
    s.events.push_back(detail::store_epilogue(o, 0.004 * n_pulses));
    return s;
}

/// Store and recall after T with no rephasing at all.
inline sequence make_store_recall_bare(real storage_time,
                                       store_options o = {})
{
    if (!(storage_time > o.coupling_lag)) {
        throw config_error("make_store_recall_bare: storage time must exceed "
                           "the coupling lag");
    }
    sequence s = detail::store_prologue(o);
    s.events.push_back(detail::store_epilogue(o, storage_time));
    return s;
}

enum class severity { warning, error };

enum class finding_code {
    negative_time,
    bad_duration,
    ordering,
    overlap,
    parity,
    recall_before_pulse,
    multiple_recall,
    missing_input
};

struct finding
{
    severity level;
    finding_code code;
    std::string message;
};

namespace detail {

struct interval
{
    real begin;
    real end;
};

/* intervals during which any optical field is on */
inline std::vector<interval> optical_intervals(const sequence& s)
{
    std::vector<interval> out;
    std::vector<std::pair<real, real>> coupling;
    for (const auto& e : s.events) {
        if (const auto* p = std::get_if<probe_pulse>(&e)) {
            out.push_back({p->t0, p->end()});
        } else if (const auto* w = std::get_if<probe_sweep>(&e)) {
            out.push_back({w->t0, w->end()});
        } else if (const auto* c = std::get_if<coupling_set>(&e)) {
            coupling.emplace_back(c->t, c->rabi_hz);
        } else if (const auto* r = std::get_if<recall_at>(&e)) {
            coupling.emplace_back(r->t, r->rabi_hz);
            out.push_back({r->t, r->t + r->window});
        }
    }
    std::stable_sort(coupling.begin(), coupling.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    const real horizon = s.total_duration();
    for (std::size_t i = 0; i < coupling.size(); ++i) {
        if (coupling[i].second != 0.0) {
            const real end =
                i + 1 < coupling.size() ? coupling[i + 1].first : horizon;
            out.push_back({coupling[i].first, end});
        }
    }
    return out;
}

} // namespace detail

/**
 * Checks a timeline against a beam geometry. Problems come back as
 * findings; nothing is thrown.
 */
inline std::vector<finding> validate(const sequence& s, beam_geometry g)
{
    std::vector<finding> out;
    auto add = [&](severity l, finding_code c, std::string m) {
        out.push_back({l, c, std::move(m)});
    };

    for (std::size_t i = 0; i < s.events.size(); ++i) {
        const auto& e = s.events[i];
        const real t = event_time(e);
        if (i > 0 && t < event_time(s.events[i - 1])) {
            add(severity::error, finding_code::ordering,
                "events are not in time order");
        }
        if (const auto* p = std::get_if<probe_pulse>(&e)) {
            if (!(p->duration > 0)) {
                add(severity::error, finding_code::bad_duration,
                    "probe pulse duration must be positive");
            }
            if (p->end() > 1e-15 && p->t0 < 0) {
                add(severity::error, finding_code::negative_time,
                    "a probe pulse starting before t = 0 must end by t = 0");
            }
        } else if (const auto* w = std::get_if<probe_sweep>(&e)) {
            if (!(w->duration > 0) || !(w->span_hz > 0)) {
                add(severity::error, finding_code::bad_duration,
                    "probe sweep needs positive duration and span");
            }
            if (w->t0 < 0) {
                add(severity::error, finding_code::negative_time,
                    "probe sweep starts before t = 0");
            }
        } else if (const auto* r = std::get_if<rf_pulse_at>(&e)) {
            if (r->start() < 0) {
                add(severity::error, finding_code::negative_time,
                    "RF pulse before t = 0");
            }
            if (!r->pulse.instantaneous && !(r->pulse.duration > 0)) {
                add(severity::error, finding_code::bad_duration,
                    "finite RF pulse needs a positive duration");
            }
        } else if (const auto* r = std::get_if<recall_at>(&e)) {
            if (r->t < 0) {
                add(severity::error, finding_code::negative_time,
                    "recall before t = 0");
            }
            if (!(r->window > 0)) {
                add(severity::error, finding_code::bad_duration,
                    "recall window must be positive");
            }
        } else if (const auto* c = std::get_if<coupling_set>(&e)) {
            const bool leads_probe = std::any_of(
                s.events.begin(), s.events.end(), [&](const event& o) {
                    const auto* p = std::get_if<probe_pulse>(&o);
                    return p && p->t0 == c->t;
                });
            if (c->t < 0 && !leads_probe) {
                add(severity::error, finding_code::negative_time,
                    "coupling change before t = 0");
            }
        }
    }

    /* finite RF pulses exclude every optical field and each other */
    const auto optical = detail::optical_intervals(s);
    std::vector<detail::interval> rf;
    for (const auto& e : s.events) {
        if (const auto* r = std::get_if<rf_pulse_at>(&e)) {
            if (!r->pulse.instantaneous) {
                rf.push_back({r->start(), r->end()});
            }
        }
    }
    for (std::size_t i = 0; i < rf.size(); ++i) {
        for (const auto& o : optical) {
            if (rf[i].begin < o.end && o.begin < rf[i].end) {
                add(severity::error, finding_code::overlap,
                    "finite RF pulse overlaps an optical drive");
                break;
            }
        }
        for (std::size_t j = i + 1; j < rf.size(); ++j) {
            if (rf[i].begin < rf[j].end && rf[j].begin < rf[i].end) {
                add(severity::error, finding_code::overlap,
                    "RF pulses overlap");
            }
        }
    }

    int recalls = 0;
    for (const auto& e : s.events) {
        recalls += std::holds_alternative<recall_at>(e) ? 1 : 0;
    }
    if (recalls > 1) {
        add(severity::error, finding_code::multiple_recall,
            "more than one recall event");
    }
    if (const auto* r = s.recall()) {
        const bool has_probe = std::any_of(
            s.events.begin(), s.events.end(), [](const event& e) {
                return std::holds_alternative<probe_pulse>(e);
            });
        if (!has_probe) {
            add(severity::warning, finding_code::missing_input,
                "recall without an input probe pulse");
        }
        for (const auto& e : s.events) {
            if (const auto* p = std::get_if<rf_pulse_at>(&e)) {
                if (p->end() > r->t) {
                    add(severity::error, finding_code::recall_before_pulse,
                        "recall precedes the last rephasing pulse");
                    break;
                }
            }
        }
        const int n = s.rf_pulse_count();
        if (n % 2 != 0) {
            if (g == beam_geometry::counter) {
                add(severity::error, finding_code::parity,
                    "odd rephasing count with counter-propagating geometry");
            } else {
                add(severity::warning, finding_code::parity,
                    "odd rephasing count: residual co-propagating mismatch "
                    "is not cancelled");
            }
        }
    }
    return out;
}

inline bool has_errors(const std::vector<finding>& f)
{
    return std::any_of(f.begin(), f.end(), [](const finding& x) {
        return x.level == severity::error;
    });
}

/// Errors that block simulation; the parity error is waived by override.
inline std::vector<finding> blocking_findings(const sequence& s,
                                              beam_geometry g)
{
    std::vector<finding> out;
    for (auto& f : validate(s, g)) {
        if (f.level != severity::error) {
            continue;
        }
        if (f.code == finding_code::parity && s.parity_override) {
            continue;
        }
        out.push_back(std::move(f));
    }
    return out;
}

/* ---- serialization ---------------------------------------------------- */

inline const char* to_string(pulse_shape s)
{
    return s == pulse_shape::gaussian ? "gaussian" : "square";
}

inline pulse_shape pulse_shape_from_string(const std::string& s)
{
    if (s == "square") return pulse_shape::square;
    if (s == "gaussian") return pulse_shape::gaussian;
    throw config_error("unknown pulse shape '" + s + "'");
}

inline const char* to_string(beam_geometry g)
{
    return g == beam_geometry::co ? "co" : "counter";
}

inline beam_geometry beam_geometry_from_string(const std::string& s)
{
    if (s == "co") return beam_geometry::co;
    if (s == "counter") return beam_geometry::counter;
    throw config_error("unknown geometry '" + s + "' (expected co|counter)");
}

inline nlohmann::json to_json(const sequence& s)
{
    using nlohmann::json;
    json events = json::array();
    for (const auto& e : s.events) {
        std::visit(
            [&](const auto& v) {
                using T = std::decay_t<decltype(v)>;
                json j;
                if constexpr (std::is_same_v<T, probe_pulse>) {
                    j = {{"type", "probe_pulse"},
                         {"t0", v.t0},
                         {"duration", v.duration},
                         {"peak_rabi_hz", v.peak_rabi_hz},
                         {"shape", to_string(v.shape)},
                         {"ramp_fraction", v.ramp_fraction},
                         {"detuning_hz", v.detuning_hz}};
                } else if constexpr (std::is_same_v<T, coupling_set>) {
                    j = {{"type", "coupling_set"},
                         {"t", v.t},
                         {"rabi_hz", v.rabi_hz}};
                } else if constexpr (std::is_same_v<T, rf_pulse_at>) {
                    j = {{"type", "rf_pulse"},
                         {"t", v.t},
                         {"area", v.pulse.area},
                         {"phase", v.pulse.phase},
                         {"duration", v.pulse.duration},
                         {"instantaneous", v.pulse.instantaneous}};
                } else if constexpr (std::is_same_v<T, recall_at>) {
                    j = {{"type", "recall"},
                         {"t", v.t},
                         {"rabi_hz", v.rabi_hz},
                         {"window", v.window}};
                } else {
                    j = {{"type", "probe_sweep"},
                         {"t0", v.t0},
                         {"duration", v.duration},
                         {"span_hz", v.span_hz},
                         {"rabi_hz", v.rabi_hz},
                         {"ramp_fraction", v.ramp_fraction}};
                }
                events.push_back(std::move(j));
            },
            e);
    }
    return {{"format", "eitmem-sequence"},
            {"version", 1},
            {"parity_override", s.parity_override},
            {"events", events}};
}

inline sequence sequence_from_json(const nlohmann::json& j)
{
    try {
        if (j.value("format", "") != "eitmem-sequence") {
            throw config_error("sequence file: unexpected format tag");
        }
        sequence s;
        s.parity_override = j.value("parity_override", false);
        for (const auto& e : j.at("events")) {
            const std::string type = e.at("type");
            if (type == "probe_pulse") {
                probe_pulse p;
                p.t0 = e.at("t0");
                p.duration = e.at("duration");
                p.peak_rabi_hz = e.at("peak_rabi_hz");
                p.shape = pulse_shape_from_string(e.value("shape", "square"));
                p.ramp_fraction = e.value("ramp_fraction", 0.0);
                p.detuning_hz = e.value("detuning_hz", 0.0);
                s.events.emplace_back(p);
            } else if (type == "coupling_set") {
                s.events.emplace_back(coupling_set{e.at("t"), e.at("rabi_hz")});
            } else if (type == "rf_pulse") {
                rf_pulse p;
                p.area = e.value("area", std::numbers::pi);
                p.phase = e.value("phase", 0.0);
                p.duration = e.value("duration", 22e-6);
                p.instantaneous = e.value("instantaneous", true);
                s.events.emplace_back(rf_pulse_at{e.at("t"), p});
            } else if (type == "recall") {
                s.events.emplace_back(recall_at{e.at("t"), e.at("rabi_hz"),
                                                e.value("window", 30e-6)});
            } else if (type == "probe_sweep") {
                probe_sweep w;
                w.t0 = e.at("t0");
                w.duration = e.at("duration");
                w.span_hz = e.at("span_hz");
                w.rabi_hz = e.at("rabi_hz");
                w.ramp_fraction = e.value("ramp_fraction", 0.025);
                s.events.emplace_back(w);
            } else {
                throw config_error("sequence file: unknown event type '" +
                                   type + "'");
            }
        }
        return s;
    } catch (const nlohmann::json::exception& ex) {
        throw config_error(std::string("sequence file: ") + ex.what());
    }
}

inline void write_sequence(const sequence& s, const std::string& path)
{
    std::ofstream out(path);
    if (!out) {
        throw config_error("cannot write " + path);
    }
    out << to_json(s).dump(2) << '\n';
}

inline sequence read_sequence(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw config_error("cannot read " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& ex) {
        throw config_error(path + ": " + ex.what());
    }
    return sequence_from_json(j);
}

} // namespace eitmem
