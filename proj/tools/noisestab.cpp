// Command-line driver: each subcommand reads a configuration file, runs one
// experiment and writes CSV data plus a key=value summary into --out.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "noisestab/config.hpp"
#include "noisestab/exitmoments.hpp"
#include "noisestab/experiments.hpp"
#include "noisestab/lyapunov.hpp"
#include "noisestab/simulate.hpp"
#include "noisestab/stats.hpp"

namespace fs = std::filesystem;
using namespace noisestab;

namespace {

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> workers;
    std::optional<std::string> out;
    std::optional<std::string> phi;
    std::optional<std::string> clock;
    std::vector<std::string> sets;
};

/// Failure that is reported with exit code 3 after its outputs were written.
struct RunFailure : Error {
    using Error::Error;
};

class Summary {
public:
    template <class T>
    void add(const std::string& key, const T& v) {
        std::ostringstream os;
        if constexpr (std::is_floating_point_v<T>) os << format_double(v);
        else os << v;
        lines_.push_back(key + "=" + os.str());
    }

    void write(const fs::path& path) const {
        std::ofstream os(path);
        for (const auto& l : lines_) os << l << "\n";
    }

    void print() const {
        for (const auto& l : lines_) std::cout << l << "\n";
    }

private:
    std::vector<std::string> lines_;
};

struct Run {
    Config cfg;
    fs::path out;
    std::uint64_t seed = 1;
    unsigned workers = 1;
};

Run prepare(const std::string& command, const Options& o) {
    if (o.config_path.empty()) throw ConfigError("--config is required");
    Run run{Config::load(o.config_path), {}, 1, 1};
    for (const auto& s : o.sets) {
        const auto dot = s.find('.'), eq = s.find('=');
        if (dot == std::string::npos || eq == std::string::npos || eq < dot)
            throw ConfigError("--set expects section.key=value, got '" + s + "'");
        run.cfg.set(s.substr(0, dot), s.substr(dot + 1, eq - dot - 1), s.substr(eq + 1));
    }
    if (o.seed) run.cfg.set("run", "seed", std::to_string(*o.seed));
    if (o.workers) run.cfg.set("run", "workers", std::to_string(*o.workers));
    if (o.out) run.cfg.set("run", "out", *o.out);
    if (o.phi) run.cfg.set("experiment", "phi", *o.phi);
    if (o.clock) run.cfg.set("experiment", "clock", *o.clock);
    if (run.cfg.has("experiment", "kind") && run.cfg.get_string("experiment", "kind") != command)
        throw ConfigError(o.config_path + ": kind '" + run.cfg.get_string("experiment", "kind") +
                          "' does not match subcommand '" + command + "'");
    run.seed = run.cfg.get_u64("run", "seed");
    const auto workers = run.cfg.get_int("run", "workers");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    run.workers = static_cast<unsigned>(workers);
    // Validate the shared blocks before any work starts.
    run.cfg.system();
    run.cfg.integrator();
    run.out = run.cfg.get_string("run", "out");
    fs::create_directories(run.out);
    std::ofstream snap(run.out / "config.ini");
    run.cfg.write(snap);
    return run;
}

EnsembleConfig ensemble(const Run& run) {
    EnsembleConfig e;
    e.n_traj = run.cfg.get_count("experiment", "n_traj");
    e.t_per_traj = run.cfg.get_double("experiment", "t_per_traj");
    e.seed = run.seed;
    e.workers = run.workers;
    if (e.n_traj == 0) throw ConfigError("n_traj must be >= 1");
    return e;
}

void write_fit(Summary& s, const std::string& prefix, const LogLogFit& f) {
    s.add(prefix + "slope", f.slope);
    s.add(prefix + "slope_ci_lo", f.slope - 1.96 * f.slope_se);
    s.add(prefix + "slope_ci_hi", f.slope + 1.96 * f.slope_se);
    s.add(prefix + "residual", f.residual);
    s.add(prefix + "points", f.points);
}

// ------------------------------------------------------------ subcommands

void cmd_simulate(const Run& run, Summary& s) {
    const auto spec = run.cfg.system();
    const auto ic = run.cfg.integrator();
    const auto z0v = run.cfg.get_doubles("experiment", "z0");
    if (z0v.size() != 2) throw ConfigError("z0 expects 're im'");
    const complex z0{z0v[0], z0v[1]};
    const auto tr = integrate(spec, z0, ic, run.seed);
    std::ofstream os(run.out / "trajectory.csv");
    tr.write_csv(os);
    s.add("mode", to_string(ic.mode));
    s.add("records", tr.times.size());
    s.add("t_end", tr.times.back());
    s.add("r_end", modulus(tr.states.back()));
    double r_max = 0.0;
    for (auto z : tr.states) r_max = std::max(r_max, modulus(z));
    s.add("r_max", r_max);
    for (auto k : {EventKind::CapHit, EventKind::Blowup, EventKind::Floor, EventKind::Stop})
        if (auto t = tr.first(k)) s.add(std::string("event.") + to_string(k), *t);
}

void cmd_lyapunov(const Run& run, Summary& s) {
    const auto spec = run.cfg.system();
    const double gamma = run.cfg.get_double("experiment", "gamma");
    const int n = spec.n();
    if (!(gamma > n && gamma < 2 * n))
        throw ConfigError("gamma must lie in (n, 2n) = (" + std::to_string(n) + ", " + std::to_string(2 * n) + ")");
    if (!(spec.sigma() > 0.0)) throw ConfigError("lyapunov needs sigma > 0");
    GridSpec grid;
    grid.n_radii = static_cast<int>(run.cfg.get_int("experiment", "n_radii"));
    grid.strata_per_region = static_cast<int>(run.cfg.get_int("experiment", "strata"));
    grid.r_max_factor = run.cfg.get_double("experiment", "r_max_factor");
    grid.fd_every = static_cast<int>(run.cfg.get_int("experiment", "fd_every"));
    grid.workers = run.workers;
    const auto phi = run.cfg.get_string("experiment", "phi");
    std::vector<PhiKind> kinds;
    if (phi == "power" || phi == "both") kinds.push_back(PhiKind::PowerGamma);
    if (phi == "psidelta" || phi == "both") kinds.push_back(PhiKind::PsiOnePlusDelta);
    if (kinds.empty()) throw ConfigError("phi must be power, psidelta or both");

    const auto res = search_params(spec, gamma, {}, {}, grid);
    {
        std::ofstream os(run.out / "search_trace.txt");
        for (const auto& l : res.trace) os << l << "\n";
    }
    if (!res.params) {
        std::string msg = "no admissible parameters within search bounds";
        for (const auto& l : res.trace) msg += "\n  " + l;
        throw RunFailure(msg);
    }
    const auto& lp = *res.params;
    {
        std::ofstream os(run.out / "params.txt");
        lp.write(os);
    }
    const auto tables = ExitTables::build(lp, spec.sigma());
    {
        std::ofstream a(run.out / "table_p2.csv"), b(run.out / "table_p3.csv");
        tables->g_p2.write_csv(a);
        tables->g_p3.write_csv(b);
    }
    const LyapunovFunction fn(lp, spec.sigma(), tables);
    bool all_ok = true;
    for (auto k : kinds) {
        const auto cert = verify_drift(spec, fn, grid, k);
        std::ofstream os(run.out / (std::string("certificate_") + to_string(k) + ".txt"));
        cert.write(os);
        const std::string p = std::string(to_string(k)) + ".";
        s.add(p + "status", cert.ok() ? "ok" : "failed");
        s.add(p + "m", cert.m);
        s.add(p + "b", cert.b);
        s.add(p + "violations", cert.violations.size());
        all_ok = all_ok && cert.ok();
    }
    s.add("theta1", lp.partition.theta1);
    s.add("eta_star", lp.partition.eta_star);
    s.add("r_star", lp.partition.r_star);
    s.add("h3", lp.h3);
    if (!all_ok) throw RunFailure("certificate failed");
}

void cmd_spikes(const Run& run, Summary& s) {
    const auto spec = run.cfg.system();
    const auto ic = run.cfg.integrator();
    const double r_low = run.cfg.get_double("experiment", "r_low");
    const auto levels = run.cfg.get_doubles("experiment", "levels");
    const auto clock = run.cfg.get_string("experiment", "clock");
    if (clock != "plain" && clock != "timechanged") throw ConfigError("clock must be plain or timechanged");
    for (double R : levels)
        if (!(R > 2.0 * r_low)) throw ConfigError("every spike level must exceed 2 r_low");
    const auto res = run_spike_experiment(spec, ic, ensemble(run), r_low, levels,
                                          run.cfg.get_count("experiment", "min_gaps"));
    const bool plain = clock == "plain";
    const auto& rows = plain ? res.plain : res.timechanged;
    std::ofstream os(run.out / "spikes.csv");
    os.precision(17);
    os << "R,gaps,mean_gap,std_error\n";
    for (const auto& l : rows) os << l.R << "," << l.gaps << "," << l.mean_gap << "," << l.std_error << "\n";
    s.add("clock", clock);
    s.add("r_low", r_low);
    write_fit(s, "", plain ? res.fit_plain : res.fit_timechanged);
    s.add("window_lo", levels.front());
    s.add("window_hi", levels.back());
}

StationaryResult stationary(const Run& run, bool keep_samples, std::vector<double>& levels) {
    const auto spec = run.cfg.system();
    const auto ic = run.cfg.integrator();
    StationaryConfig sc;
    sc.r_low = run.cfg.get_double("experiment", "r_low");
    sc.stride = run.cfg.get_count("experiment", "stride");
    sc.burn_fraction = run.cfg.get_double("experiment", "burn_fraction");
    sc.keep_samples = keep_samples;
    levels = log_grid(run.cfg.get_double("experiment", "tail_lo"), run.cfg.get_double("experiment", "tail_hi"),
                      static_cast<int>(run.cfg.get_int("experiment", "tail_count")));
    return run_stationary(spec, ic, ensemble(run), sc, levels);
}

void cmd_tail(const Run& run, Summary& s) {
    std::vector<double> levels;
    const auto res = stationary(run, false, levels);
    const double r_low = run.cfg.get_double("experiment", "r_low");
    const auto min_exc = run.cfg.get_count("experiment", "min_exceedances");
    const auto plain = tail_fit(res.plain, 4.0 * r_low, min_exc);
    const auto tc = tail_fit(res.timechanged, 4.0 * r_low, min_exc);
    std::ofstream a(run.out / "survival_plain.csv"), b(run.out / "survival_timechanged.csv");
    plain.write_csv(a);
    tc.write_csv(b);
    s.add("samples", plain.samples);
    s.add("never_returned", res.never_returned);
    write_fit(s, "plain.", plain.fit);
    s.add("plain.window_lo", plain.window_lo);
    s.add("plain.window_hi", plain.window_hi);
    write_fit(s, "timechanged.", tc.fit);
    s.add("timechanged.window_lo", tc.window_lo);
    s.add("timechanged.window_hi", tc.window_hi);
}

void cmd_moments(const Run& run, Summary& s) {
    std::vector<double> levels;
    const auto res = stationary(run, true, levels);
    const auto gammas = run.cfg.get_doubles("experiment", "gammas");
    std::ofstream os(run.out / "moments.csv");
    os.precision(17);
    os << "gamma,count,mean\n";
    s.add("samples", res.samples.size());
    for (double g : gammas) {
        if (!(g > 0.0)) throw ConfigError("gammas must be positive");
        const auto m = empirical_moment(res.samples, g);
        for (std::size_t i = 0; i < m.counts.size(); ++i) os << g << "," << m.counts[i] << "," << m.means[i] << "\n";
        std::vector<double> powered(res.samples.size());
        for (std::size_t i = 0; i < powered.size(); ++i) powered[i] = std::pow(res.samples[i], g);
        const std::string p = "gamma_" + format_double(g) + ".";
        s.add(p + "verdict", to_string(m.verdict));
        if (!m.means.empty()) s.add(p + "estimate", m.means.back());
        if (powered.size() >= 20) s.add(p + "batch_se", batch_means(powered).std_error);
    }
}

void cmd_exitrate(const Run& run, Summary& s) {
    const auto spec = run.cfg.system();
    auto ic = run.cfg.integrator();
    const int n = spec.n();
    ExitConfig ec;
    ec.eta_star = run.cfg.get_double("experiment", "eta_star");
    ec.r_region = strip_radius(n, ec.eta_star, run.cfg.get_double("experiment", "strip_angle"));
    ec.start_radius = ec.r_region;
    ec.n_exits = run.cfg.get_count("experiment", "n_exits");
    ec.clock = ClockKind::TimeChanged;
    ec.seed = run.seed;
    ec.workers = run.workers;
    if (!(spec.sigma() > 0.0)) throw ConfigError("exitrate needs sigma > 0");
    const auto exits = run_exits(spec, ic, ec);
    std::ofstream os(run.out / "exits.csv");
    os.precision(17);
    os << "tau,r,theta,K,through_eta\n";
    std::vector<double> tau, k;
    for (const auto& e : exits) {
        os << e.tau << "," << e.r << "," << e.theta << "," << e.K << "," << (e.through_eta ? 1 : 0) << "\n";
        tau.push_back(e.tau);
        if (e.through_eta && e.K > 0.0) k.push_back(e.K);
    }
    const auto fit = exit_tail_rate(tau);
    const int gs = static_cast<int>(run.cfg.get_int("experiment", "grid_size"));
    const double lambda =
        smallest_eigenvalue(ec.eta_star, spec.sigma(), n, gs > 0 ? gs : recommended_grid_size(ec.eta_star, spec.sigma(), n));
    s.add("r_star", ec.r_region);
    s.add("exits", exits.size());
    s.add("rate", fit.rate);
    s.add("rate_residual", fit.residual);
    s.add("window_lo", fit.window_lo);
    s.add("window_hi", fit.window_hi);
    s.add("lambda1", lambda);
    s.add("relative_difference", fit.rate / lambda - 1.0);
    if (k.size() >= 10000) {
        const auto kt = ktau_tail(k);
        write_fit(s, "ktau.", kt.fit);
    }
}

void cmd_eigen(const Run& run, Summary& s) {
    const auto spec = run.cfg.system();
    if (!(spec.sigma() > 0.0)) throw ConfigError("eigen needs sigma > 0");
    const int n = spec.n();
    const int gs = static_cast<int>(run.cfg.get_int("experiment", "grid_size"));
    std::ofstream os(run.out / "eigen.csv");
    os.precision(17);
    os << "eta_star,lambda1,limit\n";
    const double limit = 0.5 * (3 * n + 2);
    for (double es : run.cfg.get_doubles("experiment", "eta_stars")) {
        const double l =
            smallest_eigenvalue(es, spec.sigma(), n, gs > 0 ? gs : recommended_grid_size(es, spec.sigma(), n));
        os << es << "," << l << "," << limit << "\n";
        s.add("lambda1.eta_star_" + format_double(es), l);
    }
    s.add("limit", limit);
}

void cmd_exitmoments(const Run& run, Summary& s) {
    const auto spec = run.cfg.system();
    if (!(spec.sigma() > 0.0)) throw ConfigError("exitmoments needs sigma > 0");
    const int n = spec.n();
    const double a = run.cfg.get_double("experiment", "a");
    const double c = run.cfg.get_double("experiment", "c");
    const double es = run.cfg.get_double("experiment", "eta_star");
    const int gs0 = static_cast<int>(run.cfg.get_int("experiment", "grid_size"));
    const int gs = gs0 > 0 ? gs0 : recommended_grid_size(es, spec.sigma(), n, c);
    const auto table = solve_bvp(a, c, es, spec.sigma(), n, gs);
    {
        std::ofstream os(run.out / "table.csv");
        table.write_csv(os);
    }
    s.add("grid_size", gs);
    s.add("weber_residual", weber_residual(table));
    s.add("richardson_change", richardson_change(a, c, es, spec.sigma(), n, gs));
    const auto paths = run.cfg.get_count("experiment", "mc_paths");
    if (paths == 0) return;
    const auto points = run.cfg.get_count("experiment", "points");
    const double dt = run.cfg.get_double("experiment", "mc_dt");
    std::ofstream os(run.out / "montecarlo.csv");
    os.precision(17);
    os << "eta,bvp,mc,std_error\n";
    double worst_rel = 0.0, worst_z = 0.0;
    for (std::size_t k = 1; k <= points; ++k) {
        const double e0 = table.lo() + 2.0 * es * static_cast<double>(k) / static_cast<double>(points + 1);
        const auto mc = mc_exit_moment(a, c, e0, OUSpec::for_degree(n, spec.sigma()), es, paths, dt,
                                       substream_seed(run.seed, k), run.workers);
        const double g = table.evaluate(e0).g;
        os << e0 << "," << g << "," << mc.estimate << "," << mc.std_error << "\n";
        worst_rel = std::max(worst_rel, std::abs(mc.estimate / g - 1.0));
        worst_z = std::max(worst_z, std::abs(mc.estimate - g) / mc.std_error);
    }
    s.add("mc.worst_relative", worst_rel);
    s.add("mc.worst_z", worst_z);
}

std::string keys_help() {
    std::ostringstream os;
    os << "Configuration keys ([section] key = value, '#' starts a comment):\n";
    std::string section;
    for (const auto& k : config_keys()) {
        if (k.section != section) {
            section = k.section;
            os << "  [" << section << "]\n";
        }
        os << "    " << k.name;
        if (!k.fallback.empty()) os << " (default " << k.fallback << ")";
        else if (!k.optional) os << " (required)";
        os << ": " << k.meaning << "\n";
    }
    return os.str();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Simulation and verification tools for noise-stabilized polynomial SDEs"};
    app.require_subcommand(1);
    app.footer(keys_help());
    Options opts;

    struct Command {
        const char* name;
        const char* about;
        const char* outputs;
        std::function<void(const Run&, Summary&)> fn;
    };
    const std::vector<Command> commands = {
        {"simulate", "integrate one trajectory",
         "trajectory.csv: t,re,im (cartesian) or t,r,theta,t_physical (timechanged); '# event,<kind>,<t>' lines",
         cmd_simulate},
        {"lyapunov", "search Lyapunov parameters and verify the drift condition on a grid",
         "params.txt, certificate_<phi>.txt (key=value), table_p2.csv and table_p3.csv: eta,G,Gprime; "
         "search_trace.txt",
         cmd_lyapunov},
        {"spikes", "mean spacing of spikes against their height",
         "spikes.csv: R,gaps,mean_gap,std_error", cmd_spikes},
        {"tail", "survival of stationary |z| on both clocks",
         "survival_plain.csv, survival_timechanged.csv: R,survival,exceedances,in_window", cmd_tail},
        {"moments", "running means of |z|^gamma with a convergence verdict", "moments.csv: gamma,count,mean",
         cmd_moments},
        {"exitrate", "exit times from the strip around the explosive ray",
         "exits.csv: tau,r,theta,K,through_eta", cmd_exitrate},
        {"eigen", "smallest eigenvalue of the exit-time operator", "eigen.csv: eta_star,lambda1,limit",
         cmd_eigen},
        {"exitmoments", "exit-moment table, with an optional Monte-Carlo comparison",
         "table.csv: eta,G,Gprime; montecarlo.csv: eta,bvp,mc,std_error", cmd_exitmoments},
    };

    const Command* chosen = nullptr;
    for (const auto& c : commands) {
        auto* sub = app.add_subcommand(c.name, c.about);
        sub->footer(std::string("Outputs (plus config.ini and summary.txt): ") + c.outputs);
        sub->add_option("--config", opts.config_path, "configuration file")->required();
        sub->add_option("--seed", opts.seed, "master seed, overrides [run] seed");
        sub->add_option("--workers", opts.workers, "worker threads, overrides [run] workers");
        sub->add_option("--out", opts.out, "output directory, overrides [run] out");
        sub->add_option("--set", opts.sets, "override any key: section.key=value");
        if (std::string(c.name) == "lyapunov")
            sub->add_option("--phi", opts.phi, "power | psidelta | both");
        if (std::string(c.name) == "spikes")
            sub->add_option("--clock", opts.clock, "plain | timechanged");
        sub->callback([&chosen, &c] { chosen = &c; });
    }

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

    Summary summary;
    try {
        const Run run = prepare(chosen->name, opts);
        try {
            chosen->fn(run, summary);
        } catch (const RunFailure& e) {
            summary.add("status", "failed");
            summary.write(run.out / "summary.txt");
            summary.print();
            std::cerr << "error: " << e.what() << "\n";
            return 3;
        }
        summary.add("status", "ok");
        summary.write(run.out / "summary.txt");
        summary.print();
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
