#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include <eitmem/analysis.hpp>
#include <eitmem/core.hpp>
#include <eitmem/decoherence.hpp>
#include <eitmem/propagation.hpp>
#include <eitmem/sequence.hpp>
#include <eitmem/spectral_ensemble.hpp>

namespace eitmem {

/* ---- CSV -------------------------------------------------------------- */

/// Numeric table with a header row.
struct csv_table
{
    std::vector<std::string> columns;
    std::vector<std::vector<real>> rows;

    void add_row(std::vector<real> r)
    {
        if (r.size() != columns.size()) {
            throw analysis_error("csv: row width does not match header");
        }
        rows.push_back(std::move(r));
    }

    bool operator==(const csv_table&) const = default;
};

/// Shortest decimal text that reads back to the same double.
inline std::string format_real(real x)
{
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, x);
    if (r.ec != std::errc()) {
        throw analysis_error("csv: cannot format number");
    }
    return std::string(buf, r.ptr);
}

inline real parse_real(const std::string& s)
{
    real x = 0.0;
    const char* end = s.data() + s.size();
    const auto r = std::from_chars(s.data(), end, x);
    if (r.ec != std::errc() || r.ptr != end) {
        throw config_error("csv: bad number '" + s + "'");
    }
    return x;
}

inline void write_csv(std::ostream& out, const csv_table& t)
{
    for (std::size_t i = 0; i < t.columns.size(); ++i) {
        out << (i ? "," : "") << t.columns[i];
    }
    out << '\n';
    for (const auto& r : t.rows) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            out << (i ? "," : "") << format_real(r[i]);
        }
        out << '\n';
    }
}

inline void write_csv(const std::string& path, const csv_table& t)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw config_error("cannot write " + path);
    }
    write_csv(out, t);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream s(line);
    while (std::getline(s, cell, ',')) {
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

} // namespace detail

inline csv_table read_csv(std::istream& in)
{
    csv_table t;
    std::string line;
    if (!std::getline(in, line)) {
        throw config_error("csv: missing header");
    }
    t.columns = detail::split_csv_line(line);
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != t.columns.size()) {
            throw config_error("csv: row width does not match header");
        }
        std::vector<real> r;
        r.reserve(cells.size());
        for (const auto& c : cells) {
            r.push_back(parse_real(c));
        }
        t.rows.push_back(std::move(r));
    }
    return t;
}

inline csv_table read_csv(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw config_error("cannot read " + path);
    }
    return read_csv(in);
}

/// Time series of a record: t, Re/Im input, Re/Im output (rad/s).
inline csv_table record_table(const simulation_record& rec)
{
    csv_table t;
    t.columns = {"t_s", "in_re", "in_im", "out_re", "out_im"};
    for (std::size_t i = 0; i < rec.t.size(); ++i) {
        t.add_row({rec.t[i], rec.field_in[i].real(), rec.field_in[i].imag(),
                   rec.field_out[i].real(), rec.field_out[i].imag()});
    }
    return t;
}

inline csv_table spectrum_table(const spectrum& s)
{
    csv_table t;
    t.columns = {"frequency_hz", "transmission"};
    for (std::size_t i = 0; i < s.frequency_hz.size(); ++i) {
        t.add_row({s.frequency_hz[i], s.transmission[i]});
    }
    return t;
}

/// One row per protocol point; protocol 0 is two-pulse, 1 is bang-bang.
inline csv_table decay_table(const decay_scan_result& r)
{
    csv_table t;
    t.columns = {"protocol", "storage_time_s", "energy", "input_energy",
                 "efficiency", "envelope"};
    auto add = [&](int proto, const std::vector<decay_point>& pts) {
        for (const auto& p : pts) {
            t.add_row({static_cast<real>(proto), p.storage_time, p.energy,
                       p.input_energy, p.efficiency, p.envelope});
        }
    };
    add(0, r.simple);
    add(1, r.ddc);
    return t;
}

inline csv_table linearity_table(const linearity_report& r)
{
    csv_table t;
    t.columns = {"area_rad", "input_energy", "output_energy"};
    for (const auto& p : r.points) {
        t.add_row({p.area, p.input_energy, p.output_energy});
    }
    return t;
}

/* ---- JSON summaries --------------------------------------------------- */

inline nlohmann::json to_json(const run_diagnostics& d)
{
    return {{"max_trace_drift", d.max_trace_drift},
            {"max_hermiticity_defect", d.max_hermiticity_defect},
            {"min_eigenvalue", d.checks > 0 ? nlohmann::json(d.min_eigenvalue)
                                            : nlohmann::json(nullptr)},
            {"dt_min_s", d.steps > 0 ? nlohmann::json(d.dt_min)
                                     : nlohmann::json(nullptr)},
            {"dt_max_s", d.dt_max},
            {"steps", d.steps},
            {"checks", d.checks},
            {"flip_count", d.flip_count},
            {"phase_matching", d.phase_matching},
            {"decoherence_envelope", d.decoherence_envelope},
            {"n_classes", d.n_classes},
            {"n_z", d.n_z}};
}

inline nlohmann::json to_json(const fit_result& f)
{
    return {{"amplitude", f.amplitude},
            {"tau_s", f.tau},
            {"residual_norm", f.residual_norm},
            {"converged", f.converged},
            {"iterations", f.iterations}};
}

inline nlohmann::json to_json(const noise_model& m)
{
    return {{"sigma_hz", rad_to_hz(m.sigma)},
            {"tau_c_s", m.tau_c},
            {"seed", m.seed}};
}

inline nlohmann::json to_json(const calibration_result& c)
{
    return {{"model", to_json(c.model)},
            {"tau_simple_s", c.tau_simple},
            {"tau_ddc_s", c.tau_ddc},
            {"relative_error_simple", c.error_simple},
            {"relative_error_ddc", c.error_ddc},
            {"objective", c.objective},
            {"success", c.success},
            {"message", c.message},
            {"search",
             {{"grid_best_sigma_hz", rad_to_hz(c.grid_best_sigma)},
              {"grid_best_tau_c_s", c.grid_best_tau_c},
              {"grid_best_objective", c.grid_best_objective},
              {"refinement_sweeps", c.refinement_sweeps},
              {"evaluations", c.evaluations}}}};
}

/// Event log and diagnostics of a record.
inline nlohmann::json record_summary(const simulation_record& rec)
{
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : rec.events) {
        events.push_back({{"t_s", e.t}, {"event", e.what}});
    }
    nlohmann::json snaps = nlohmann::json::array();
    for (const auto& s : rec.snapshots) {
        snaps.push_back({{"t_s", s.t},
                         {"label", s.label},
                         {"spin_abs", s.spin_abs},
                         {"optical_abs", s.optical_abs}});
    }
    nlohmann::json windows = nlohmann::json::array();
    for (const auto& w : rec.windows) {
        windows.push_back({{"name", w.name}, {"begin_s", w.begin}, {"end_s", w.end}});
    }
    return {{"samples", rec.t.size()},
            {"windows", windows},
            {"events", events},
            {"snapshots", snaps},
            {"diagnostics", to_json(rec.diagnostics)}};
}

inline void write_json(const std::string& path, const nlohmann::json& j)
{
    std::ofstream out(path);
    if (!out) {
        throw config_error("cannot write " + path);
    }
    out << j.dump(2) << '\n';
}

/* ---- configuration ---------------------------------------------------- */

struct sweep_config
{
    real span_hz = 300e3;
    real duration = 4e-3;
    real coupling_rabi_hz = 0.0;
    real probe_rabi_hz = 100.0;
    real ramp_fraction = 0.025;
};

enum class store_protocol { simple, ddc, bare };

inline store_protocol store_protocol_from_string(const std::string& s)
{
    if (s == "simple") return store_protocol::simple;
    if (s == "ddc") return store_protocol::ddc;
    if (s == "bare") return store_protocol::bare;
    throw config_error("unknown store protocol '" + s +
                       "' (expected simple|ddc|bare)");
}

struct store_config
{
    store_protocol protocol = store_protocol::simple;
    real storage_time = 0.1;
    int ddc_pulses = 2;
    bool allow_odd = false;
    store_options options;
};

/// Everything the command-line tool reads from its config file.
struct config
{
    inhomogeneous_profile profile;
    level_scheme scheme;
    grid gr;
    geometry geo;
    run_options run;
    /// rad/s per sqrt(W); energies in joules are reported only when set
    std::optional<real> rabi_per_sqrt_watt;
    sweep_config sweep;
    store_config store;
    std::vector<real> decay_times{0.1, 0.2, 0.4, 0.7, 1.0, 1.5, 2.0};
    std::vector<real> linearity_areas;
    real linearity_storage_time = 0.1;
    real linearity_fit_max_area = 0.1 * std::numbers::pi;
    real linearity_tolerance = 0.1;
    calibration_targets calibration;
    std::uint64_t seed = 1;

    config()
    {
        for (real a : {0.02, 0.04, 0.06, 0.08, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4,
                       0.5, 0.6, 0.7, 0.8, 1.0}) {
            linearity_areas.push_back(a * std::numbers::pi);
        }
    }

    medium_setup setup() const
    {
        return {gr, geo, discretize_profile(profile), scheme, run};
    }
};

namespace detail {

/* reads the keys of one section, rejecting unknown ones */
class section
{
public:
    section(const nlohmann::json& j, std::string name)
        : m_j(j), m_name(std::move(name))
    {
        if (!m_j.is_object()) {
            throw config_error("config: '" + m_name + "' must be an object");
        }
        for (auto it = m_j.begin(); it != m_j.end(); ++it) {
            m_unseen.insert(it.key());
        }
    }

    template<class T>
    void get(const char* key, T& out)
    {
        m_unseen.erase(key);
        if (!m_j.contains(key)) {
            return;
        }
        try {
            out = m_j.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw config_error("config: bad value for '" + m_name + "." + key +
                               "'");
        }
    }

    bool has(const char* key) const { return m_j.contains(key); }

    const nlohmann::json& sub(const char* key)
    {
        m_unseen.erase(key);
        return m_j.at(key);
    }

    void finish() const
    {
        if (!m_unseen.empty()) {
            throw config_error("config: unknown key '" + m_name + "." +
                               *m_unseen.begin() + "'");
        }
    }

private:
    const nlohmann::json& m_j;
    std::string m_name;
    std::set<std::string> m_unseen;
};

inline std::vector<real> scaled(std::vector<real> v, real f)
{
    for (auto& x : v) {
        x *= f;
    }
    return v;
}

} // namespace detail

/**
 * Builds a config from JSON. Every section and key is optional; unknown keys
 * are rejected. Frequencies are in Hz, times in seconds, areas in units
 * of pi.
 */
inline config config_from_json(const nlohmann::json& j)
{
    using detail::section;
    config c;
    section top(j, "config");

    if (top.has("ensemble")) {
        section s(top.sub("ensemble"), "ensemble");
        s.get("optical_fwhm_hz", c.profile.optical_fwhm_hz);
        s.get("spin_fwhm_hz", c.profile.spin_fwhm_hz);
        s.get("n_opt", c.profile.n_opt);
        s.get("n_spin", c.profile.n_spin);
        s.finish();
    }
    if (top.has("scheme")) {
        section s(top.sub("scheme"), "scheme");
        real g3 = rad_to_hz(c.scheme.gamma3);
        real gopt = rad_to_hz(c.scheme.gamma_opt);
        real gspin = rad_to_hz(c.scheme.gamma_spin_static);
        real b1 = c.scheme.b1;
        s.get("gamma3_hz", g3);
        s.get("gamma_opt_hz", gopt);
        s.get("gamma_spin_hz", gspin);
        s.get("branching_b1", b1);
        s.finish();
        c.scheme = level_scheme::with_branching(b1);
        c.scheme.gamma3 = hz_to_rad(g3);
        c.scheme.gamma_opt = hz_to_rad(gopt);
        c.scheme.gamma_spin_static = hz_to_rad(gspin);
    }
    if (top.has("medium")) {
        section s(top.sub("medium"), "medium");
        s.get("length_m", c.gr.length);
        s.get("n_z", c.gr.n_z);
        s.get("optical_depth", c.run.optical_depth);
        s.get("dt_s", c.run.dt);
        s.get("check_every", c.run.check_every);
        s.finish();
    }
    bool rf_instantaneous = c.store.options.rf.instantaneous;
    if (top.has("optics")) {
        section s(top.sub("optics"), "optics");
        std::string geo = to_string(c.geo.mode);
        s.get("geometry", geo);
        c.geo.mode = beam_geometry_from_string(geo);
        s.get("lambda_probe_m", c.geo.lambda_p);
        s.get("lambda_coupling_m", c.geo.lambda_c);
        real mismatch_per_cm = c.geo.residual_mismatch_co / 100.0;
        s.get("residual_mismatch_co_per_cm", mismatch_per_cm);
        c.geo.residual_mismatch_co = 100.0 * mismatch_per_cm;
        if (s.has("rabi_per_sqrt_watt")) {
            real k = 0.0;
            s.get("rabi_per_sqrt_watt", k);
            if (!(k > 0)) {
                throw config_error("config: rabi_per_sqrt_watt must be "
                                   "positive");
            }
            c.rabi_per_sqrt_watt = k;
        }
        s.get("rf_instantaneous", rf_instantaneous);
        s.finish();
    }
    if (top.has("sweep")) {
        section s(top.sub("sweep"), "sweep");
        s.get("span_hz", c.sweep.span_hz);
        s.get("duration_s", c.sweep.duration);
        s.get("coupling_rabi_hz", c.sweep.coupling_rabi_hz);
        s.get("probe_rabi_hz", c.sweep.probe_rabi_hz);
        s.get("ramp_fraction", c.sweep.ramp_fraction);
        s.finish();
    }
    auto& so = c.store.options;
    so.rf.instantaneous = rf_instantaneous;
    if (top.has("store")) {
        section s(top.sub("store"), "store");
        std::string proto = "simple";
        s.get("protocol", proto);
        c.store.protocol = store_protocol_from_string(proto);
        s.get("storage_time_s", c.store.storage_time);
        s.get("ddc_pulses", c.store.ddc_pulses);
        s.get("allow_odd", c.store.allow_odd);
        s.get("probe_duration_s", so.probe_duration);
        real area_pi = so.probe_area / std::numbers::pi;
        s.get("probe_area_pi", area_pi);
        so.probe_area = area_pi * std::numbers::pi;
        std::string shape = to_string(so.probe_shape);
        s.get("probe_shape", shape);
        so.probe_shape = pulse_shape_from_string(shape);
        s.get("ramp_fraction", so.ramp_fraction);
        s.get("coupling_rabi_hz", so.coupling_rabi_hz);
        s.get("recall_rabi_hz", so.recall_rabi_hz);
        s.get("coupling_lag_s", so.coupling_lag);
        s.get("recall_window_s", so.recall_window);
        s.get("rf_duration_s", so.rf.duration);
        s.finish();
    }
    if (top.has("decay")) {
        section s(top.sub("decay"), "decay");
        s.get("storage_times_s", c.decay_times);
        s.finish();
    }
    if (top.has("linearity")) {
        section s(top.sub("linearity"), "linearity");
        std::vector<real> areas_pi = detail::scaled(c.linearity_areas,
                                                    1.0 / std::numbers::pi);
        s.get("areas_pi", areas_pi);
        c.linearity_areas = detail::scaled(areas_pi, std::numbers::pi);
        s.get("storage_time_s", c.linearity_storage_time);
        real fit_pi = c.linearity_fit_max_area / std::numbers::pi;
        s.get("fit_max_area_pi", fit_pi);
        c.linearity_fit_max_area = fit_pi * std::numbers::pi;
        s.get("tolerance", c.linearity_tolerance);
        s.finish();
    }
    if (top.has("noise")) {
        section s(top.sub("noise"), "noise");
        noise_model m;
        real sigma_hz = 0.0;
        s.get("sigma_hz", sigma_hz);
        m.sigma = hz_to_rad(sigma_hz);
        s.get("tau_c_s", m.tau_c);
        s.get("seed", m.seed);
        s.finish();
        m.validate();
        c.run.noise = m;
    }
    top.get("n_traj", c.run.n_traj);
    top.get("seed", c.seed);
    if (top.has("calibration")) {
        section s(top.sub("calibration"), "calibration");
        auto& t = c.calibration;
        s.get("tau_simple_s", t.tau_simple);
        s.get("tau_ddc_s", t.tau_ddc);
        s.get("storage_times_s", t.storage_times);
        real smin = rad_to_hz(t.sigma_min), smax = rad_to_hz(t.sigma_max);
        s.get("sigma_min_hz", smin);
        s.get("sigma_max_hz", smax);
        t.sigma_min = hz_to_rad(smin);
        t.sigma_max = hz_to_rad(smax);
        s.get("tau_c_min_s", t.tau_c_min);
        s.get("tau_c_max_s", t.tau_c_max);
        s.get("grid", t.grid);
        s.get("tolerance", t.tolerance);
        s.finish();
    }
    top.finish();

    c.profile.validate();
    c.scheme.validate();
    c.gr.validate();
    c.geo.validate();
    so.rf.validate();
    if (!(c.run.optical_depth >= 0) || !(c.run.dt >= 0)) {
        throw config_error("config: optical_depth and dt_s must be >= 0");
    }
    if (c.run.n_traj < 1) {
        throw config_error("config: n_traj must be >= 1");
    }
    return c;
}

inline config read_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw config_error("cannot read config " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& ex) {
        throw config_error(path + ": " + ex.what());
    }
    return config_from_json(j);
}

/// Builds the store/recall timeline a store config describes.
inline sequence make_store_sequence(const store_config& s)
{
    switch (s.protocol) {
    case store_protocol::ddc:
        return make_store_recall_ddc(s.ddc_pulses, s.options, s.allow_odd);
    case store_protocol::bare:
        return make_store_recall_bare(s.storage_time, s.options);
    default:
        return make_store_recall_simple(s.storage_time, s.options);
    }
}

} // namespace eitmem
