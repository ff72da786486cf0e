#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include <eitmem/eitmem.hpp>

using namespace eitmem;
using nlohmann::json;

namespace {

struct common_flags
{
    std::string config_path;
    std::string out_dir = ".";
    std::optional<std::uint64_t> seed;
    std::optional<std::string> geometry;
};

config load(const common_flags& f)
{
    config c = f.config_path.empty() ? config{} : read_config(f.config_path);
    if (f.seed) {
        c.seed = *f.seed;
        if (c.run.noise) {
            c.run.noise->seed = *f.seed;
        }
    }
    if (f.geometry) {
        c.geo.mode = beam_geometry_from_string(*f.geometry);
    }
    return c;
}

std::string out_path(const common_flags& f, const std::string& file)
{
    std::error_code ec;
    std::filesystem::create_directories(f.out_dir, ec);
    if (ec) {
        throw config_error("cannot create output directory " + f.out_dir);
    }
    return (std::filesystem::path(f.out_dir) / file).string();
}

json energy_json(const config& c, real e)
{
    json j = {{"rabi2_s", e}};
    if (c.rabi_per_sqrt_watt) {
        j["joules"] = e / (*c.rabi_per_sqrt_watt * *c.rabi_per_sqrt_watt);
    }
    return j;
}

json header(const config& c, const std::string& command)
{
    return {{"command", command},
            {"geometry", to_string(c.geo.mode)},
            {"optical_depth", c.run.optical_depth},
            {"n_opt", c.profile.n_opt},
            {"n_spin", c.profile.n_spin},
            {"n_z", c.gr.n_z},
            {"seed", c.seed}};
}

int run_sweep(const common_flags& f, std::optional<real> coupling_hz)
{
    config c = load(f);
    if (coupling_hz) {
        c.sweep.coupling_rabi_hz = *coupling_hz;
    }
    /* without coupling the spin detuning never enters the dynamics */
    if (c.sweep.coupling_rabi_hz == 0.0) {
        c.profile.n_spin = 1;
    }
    sequence seq = make_eit_sweep(c.sweep.span_hz, c.sweep.duration,
                                  c.sweep.coupling_rabi_hz,
                                  c.sweep.probe_rabi_hz);
    auto& w = std::get<probe_sweep>(seq.events[1]);
    w.ramp_fraction = c.sweep.ramp_fraction;
    const auto classes = discretize_profile(c.profile);
    const auto rec = run_sequence(seq, c.gr, c.geo, classes, c.scheme, c.run);
    const auto spec = sweep_spectrum(rec, w);

    write_csv(out_path(f, "sweep.csv"), record_table(rec));
    write_csv(out_path(f, "sweep.spectrum.csv"), spectrum_table(spec));

    json s = header(c, "sweep");
    s["n_spin"] = c.profile.n_spin;
    s["span_hz"] = c.sweep.span_hz;
    s["duration_s"] = c.sweep.duration;
    s["coupling_rabi_hz"] = c.sweep.coupling_rabi_hz;
    s["probe_rabi_hz"] = c.sweep.probe_rabi_hz;
    s["transmission_on_resonance"] = transmission_at(spec, 0.0);
    s["analytic_transmission_on_resonance"] = weak_probe_transmission(
        classes, c.scheme, hz_to_rad(c.sweep.coupling_rabi_hz), 0.0,
        c.run.optical_depth);
    s["min_transmission"] =
        *std::min_element(spec.transmission.begin(), spec.transmission.end());
    if (c.sweep.coupling_rabi_hz != 0.0) {
        s["eit_fwhm_hz"] = eit_fwhm(spec);
        s["analytic_eit_fwhm_hz"] = eit_width_analytic(
            classes, c.scheme, hz_to_rad(c.sweep.coupling_rabi_hz),
            c.run.optical_depth);
    }
    s["record"] = record_summary(rec);
    write_json(out_path(f, "sweep.summary.json"), s);
    std::cout << "on-resonance transmission "
              << s["transmission_on_resonance"].get<real>() << '\n';
    if (s.contains("eit_fwhm_hz")) {
        std::cout << "EIT FWHM " << s["eit_fwhm_hz"].get<real>() << " Hz\n";
    }
    return 0;
}

struct store_flags
{
    std::optional<std::string> protocol;
    std::optional<real> storage_time;
    std::optional<int> pulses;
    bool allow_odd = false;
    std::optional<real> optical_depth;
    std::optional<real> coupling_hz;
    std::optional<real> area_pi;
};

int run_store(const common_flags& f, const store_flags& o)
{
    config c = load(f);
    auto& st = c.store;
    if (o.protocol) st.protocol = store_protocol_from_string(*o.protocol);
    if (o.storage_time) st.storage_time = *o.storage_time;
    if (o.pulses) st.ddc_pulses = *o.pulses;
    if (o.allow_odd) st.allow_odd = true;
    if (o.optical_depth) c.run.optical_depth = *o.optical_depth;
    if (o.coupling_hz) st.options.coupling_rabi_hz = *o.coupling_hz;
    if (o.area_pi) st.options.probe_area = *o.area_pi * std::numbers::pi;

    const sequence seq = make_store_sequence(st);
    write_sequence(seq, out_path(f, "store.sequence.json"));
    const auto m = c.setup();
    const auto rec = run_sequence(seq, m.gr, m.geo, m.classes, m.scheme, m.run);
    write_csv(out_path(f, "store.csv"), record_table(rec));

    const real e_in = pulse_energy(rec, "input", channel::input);
    const real e_leak = pulse_energy(rec, "input", channel::output);
    const real e_out = pulse_energy(rec, "recall", channel::output);
    json findings = json::array();
    for (const auto& x : validate(seq, c.geo.mode)) {
        findings.push_back({{"level", x.level == severity::error ? "error" : "warning"},
                            {"message", x.message}});
    }
    json s = header(c, "store");
    s["storage_time_s"] = seq.recall_time();
    s["rf_pulse_count"] = seq.rf_pulse_count();
    s["findings"] = findings;
    s["input_energy"] = energy_json(c, e_in);
    s["leaked_energy"] = energy_json(c, e_leak);
    s["recalled_energy"] = energy_json(c, e_out);
    s["efficiency"] = e_out / e_in;
    if (c.run.noise) {
        s["noise"] = to_json(*c.run.noise);
    }
    s["record"] = record_summary(rec);
    write_json(out_path(f, "store.summary.json"), s);
    std::cout << "efficiency " << e_out / e_in << '\n';
    return 0;
}

int run_decay(const common_flags& f, std::optional<int> n_traj)
{
    config c = load(f);
    if (n_traj) c.run.n_traj = *n_traj;
    json s = header(c, "decay");
    if (!c.run.noise) {
        const auto cal = calibrate(c.calibration, c.seed);
        if (!cal.success) {
            throw analysis_error("decay: calibration failed: " + cal.message);
        }
        c.run.noise = cal.model;
        s["calibration"] = to_json(cal);
    }
    s["noise"] = to_json(*c.run.noise);
    s["n_traj"] = c.run.n_traj;
    const auto r = decay_scan(c.decay_times, c.store.options, c.setup());
    write_csv(out_path(f, "decay.csv"), decay_table(r));
    s["fit_simple"] = to_json(r.fit_simple);
    s["fit_ddc"] = to_json(r.fit_ddc);
    s["tau_ratio"] = r.fit_ddc.tau / r.fit_simple.tau;
    s["csv_protocols"] = {{"0", "simple"}, {"1", "ddc"}};
    write_json(out_path(f, "decay.summary.json"), s);
    std::cout << "tau simple " << r.fit_simple.tau << " s, tau ddc "
              << r.fit_ddc.tau << " s\n";
    if (!r.fit_simple.converged || !r.fit_ddc.converged) {
        throw analysis_error("decay: exponential fit did not converge");
    }
    return 0;
}

int run_linearity(const common_flags& f)
{
    config c = load(f);
    const auto r = linearity_scan(c.linearity_areas, c.linearity_storage_time,
                                  c.store.options, c.setup(),
                                  c.linearity_fit_max_area,
                                  c.linearity_tolerance);
    write_csv(out_path(f, "linearity.csv"), linearity_table(r));
    json s = header(c, "linearity");
    s["storage_time_s"] = c.linearity_storage_time;
    s["fit_max_area_pi"] = c.linearity_fit_max_area / std::numbers::pi;
    s["tolerance"] = c.linearity_tolerance;
    s["slope"] = r.slope;
    s["intercept"] = r.intercept;
    s["r_squared"] = r.r_squared;
    s["n_fit"] = r.n_fit;
    auto pi_units = [](const std::optional<real>& a) {
        return a ? json(*a / std::numbers::pi) : json(nullptr);
    };
    s["first_deviating_area_pi"] = pi_units(r.first_deviating_area);
    s["onset_area_pi"] = pi_units(r.onset_area);
    write_json(out_path(f, "linearity.summary.json"), s);
    std::cout << "R^2 " << r.r_squared << ", onset "
              << (r.onset_area ? std::to_string(*r.onset_area / std::numbers::pi) + " pi"
                               : std::string("not reached"))
              << '\n';
    return 0;
}

int run_calibrate(const common_flags& f)
{
    config c = load(f);
    const auto cal = calibrate(c.calibration, c.seed);
    csv_table t;
    t.columns = {"storage_time_s", "energy_simple", "ddc_storage_time_s",
                 "energy_ddc"};
    for (real time : c.calibration.storage_times) {
        const real td = ddc_storage_time(time);
        const real cs = analytic_coherence(simple_flips(time), cal.model, time);
        const real cd = analytic_coherence(ddc_flips(td), cal.model, td);
        t.add_row({time, cs * cs, td, cd * cd});
    }
    write_csv(out_path(f, "calibrate.csv"), t);
    json s = header(c, "calibrate");
    s["targets"] = {{"tau_simple_s", c.calibration.tau_simple},
                    {"tau_ddc_s", c.calibration.tau_ddc},
                    {"tolerance", c.calibration.tolerance}};
    s["result"] = to_json(cal);
    write_json(out_path(f, "calibrate.summary.json"), s);
    std::cout << "sigma " << rad_to_hz(cal.model.sigma) << " Hz, tau_c "
              << cal.model.tau_c << " s, tau simple " << cal.tau_simple
              << " s, tau ddc " << cal.tau_ddc << " s\n";
    if (!cal.success) {
        throw analysis_error("calibrate: " + cal.message);
    }
    return 0;
}

void add_common(CLI::App* sub, common_flags& f)
{
    sub->add_option("--config", f.config_path, "JSON config file")
        ->check(CLI::ExistingFile);
    sub->add_option("--out", f.out_dir, "output directory");
    sub->add_option("--seed", f.seed, "noise / calibration seed");
    sub->add_option("--geometry", f.geometry, "beam geometry")
        ->check(CLI::IsMember({"co", "counter"}));
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"EIT light storage simulator"};
    app.require_subcommand(1);
    common_flags flags;

    auto* sweep = app.add_subcommand("sweep", "weak-probe EIT transmission sweep");
    add_common(sweep, flags);
    std::optional<real> sweep_coupling;
    sweep->add_option("--coupling-hz", sweep_coupling, "coupling Rabi frequency");

    auto* store = app.add_subcommand("store", "single store/recall run");
    add_common(store, flags);
    store_flags so;
    store->add_option("--protocol", so.protocol)
        ->check(CLI::IsMember({"simple", "ddc", "bare"}));
    store->add_option("--storage-time", so.storage_time, "seconds");
    store->add_option("--pulses", so.pulses, "bang-bang pulse count");
    store->add_flag("--allow-odd", so.allow_odd, "permit an odd pulse count");
    store->add_option("--optical-depth", so.optical_depth);
    store->add_option("--coupling-hz", so.coupling_hz);
    store->add_option("--area-pi", so.area_pi, "probe area in units of pi");

    auto* decay = app.add_subcommand("decay", "recalled energy vs storage time");
    add_common(decay, flags);
    std::optional<int> n_traj;
    decay->add_option("--n-traj", n_traj, "noise trajectories per point");

    auto* lin = app.add_subcommand("linearity", "output vs input energy");
    add_common(lin, flags);

    auto* cal = app.add_subcommand("calibrate", "fit the noise model to the decay constants");
    add_common(cal, flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (sweep->parsed()) return run_sweep(flags, sweep_coupling);
        if (store->parsed()) return run_store(flags, so);
        if (decay->parsed()) return run_decay(flags, n_traj);
        if (lin->parsed()) return run_linearity(flags);
        if (cal->parsed()) return run_calibrate(flags);
    } catch (const eitmem::error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
