#pragma once

// Sectioned key = value configuration for experiments.  Every key is listed
// in a registry with its meaning and default; unknown keys, duplicates and
// malformed values are rejected with the file and line they came from.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "simulate.hpp"

namespace noisestab {

struct KeyInfo {
    std::string_view section;
    std::string_view name;
    std::string_view fallback;  ///< empty: the key is required
    std::string_view meaning;
    bool repeatable = false;
    bool optional = false;      ///< absent is allowed and has no default
};

inline const std::vector<KeyInfo>& config_keys() {
    static const std::vector<KeyInfo> keys = {
        {"run", "seed", "1", "master seed of the run; trajectory i uses substream i"},
        {"run", "workers", "1", "worker threads for ensembles"},
        {"run", "out", "out", "output directory"},

        {"system", "n", "", "degree of the leading term z^(n+1)"},
        {"system", "sigma", "", "noise amplitude; 0 gives the deterministic flow"},
        {"system", "coeff", "", "lower-order term 'j k re im': (re + i im) z^j conj(z)^k, j + k <= n", true, true},

        {"integrator", "mode", "cartesian", "cartesian | timechanged | deterministic"},
        {"integrator", "dt_base", "0.001", "largest step"},
        {"integrator", "drift_cap_eps", "0.01", "bound on the drift displacement of a step relative to max(1, |z|)"},
        {"integrator", "r_cap", "1000000", "radius at which a path is stopped and flagged"},
        {"integrator", "t_max", "10", "duration of a single trajectory"},
        {"integrator", "record_stride", "1", "keep every k-th step in stored trajectories"},
        {"integrator", "r_min", "0.001", "reflecting floor of the time-changed polar integrator"},

        {"experiment", "kind", "", "subcommand this file is meant for; checked when present", false, true},
        {"experiment", "z0", "0 0", "simulate: start point 're im'"},
        {"experiment", "n_traj", "1", "number of trajectories"},
        {"experiment", "t_per_traj", "1000", "duration of each ensemble trajectory"},
        {"experiment", "r_low", "2", "spikes, tail: return level r* that separates spikes and ends burn-in"},
        {"experiment", "levels", "10 20 40 80", "spikes: spike heights R"},
        {"experiment", "clock", "plain", "spikes: plain | timechanged, clock of the reported fit"},
        {"experiment", "min_gaps", "20", "spikes: gaps a level needs to enter the fit"},
        {"experiment", "stride", "100", "tail, moments: sample spacing in units of dt_base"},
        {"experiment", "burn_fraction", "0.1", "tail, moments: minimal burn-in fraction of each trajectory"},
        {"experiment", "tail_lo", "0.5", "tail: lowest survival level"},
        {"experiment", "tail_hi", "10000", "tail: highest survival level"},
        {"experiment", "tail_count", "50", "tail: number of log-spaced survival levels"},
        {"experiment", "min_exceedances", "50", "tail: exceedances a level needs to enter the fit"},
        {"experiment", "gammas", "1 2.5", "moments: exponents of E|z|^gamma"},
        {"experiment", "gamma", "1.5", "lyapunov: growth exponent, in (n, 2n)"},
        {"experiment", "phi", "both", "lyapunov: power | psidelta | both"},
        {"experiment", "n_radii", "200", "lyapunov: radii of the verification grid"},
        {"experiment", "strata", "40", "lyapunov: angles per region and radius"},
        {"experiment", "r_max_factor", "100", "lyapunov: grid spans [r*, factor r*]"},
        {"experiment", "fd_every", "100", "lyapunov: finite-difference cross-check on every k-th point"},
        {"experiment", "eta_star", "50", "exitrate, exitmoments: half-width of the strip in eta"},
        {"experiment", "strip_angle", "0.1", "exitrate: angular half-width of the strip at its inner radius"},
        {"experiment", "n_exits", "2000", "exitrate: number of exits"},
        {"experiment", "a", "1", "exitmoments: exponent a of E exp(a tau)"},
        {"experiment", "c", "0", "exitmoments: centre offset of the interval"},
        {"experiment", "grid_size", "0", "exitmoments, eigen: cells of the grid; 0 picks a size from the parameters"},
        {"experiment", "mc_paths", "0", "exitmoments: Monte-Carlo paths per point; 0 skips the comparison"},
        {"experiment", "mc_dt", "0.01", "exitmoments: Monte-Carlo step"},
        {"experiment", "points", "11", "exitmoments: interior comparison points"},
        {"experiment", "eta_stars", "25 50 100 200", "eigen: strip half-widths"},
    };
    return keys;
}

inline const KeyInfo* find_key(std::string_view section, std::string_view name) {
    for (const auto& k : config_keys())
        if (k.section == section && k.name == name) return &k;
    return nullptr;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
        const std::size_t b = i;
        while (i < s.size() && s[i] != ' ' && s[i] != '\t') ++i;
        if (i > b) out.push_back(s.substr(b, i - b));
    }
    return out;
}

template <class T>
std::optional<T> parse_number(std::string_view s) {
    T v{};
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
    return v;
}

} // namespace detail

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

class Config {
public:
    struct Entry {
        std::string value;
        std::string origin;  ///< "file:line" or "command line"
    };

    static Config parse(std::istream& in, const std::string& source = "<config>") {
        Config cfg;
        cfg.source_ = source;
        std::string line, section;
        for (int number = 1; std::getline(in, line); ++number) {
            const std::string where = source + ":" + std::to_string(number);
            auto text = std::string_view(line);
            if (const auto hash = text.find('#'); hash != std::string_view::npos) text = text.substr(0, hash);
            text = detail::trim(text);
            if (text.empty()) continue;
            if (text.front() == '[') {
                if (text.back() != ']') throw ConfigError(where + ": unterminated section header");
                section = std::string(detail::trim(text.substr(1, text.size() - 2)));
                bool known = false;
                for (const auto& k : config_keys()) known = known || k.section == section;
                if (!known) throw ConfigError(where + ": unknown section [" + section + "]");
                continue;
            }
            const auto eq = text.find('=');
            if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
            if (section.empty()) throw ConfigError(where + ": key outside of a section");
            const std::string key(detail::trim(text.substr(0, eq)));
            const std::string value(detail::trim(text.substr(eq + 1)));
            cfg.add(section, key, value, where);
        }
        return cfg;
    }

    static Config parse_string(const std::string& text, const std::string& source = "<string>") {
        std::istringstream in(text);
        return parse(in, source);
    }

    static Config load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError(path + ": cannot open");
        return parse(in, path);
    }

    /// Overrides a key, replacing every earlier value.
    void set(const std::string& section, const std::string& key, const std::string& value,
             const std::string& origin = "command line") {
        if (!find_key(section, key)) throw ConfigError(origin + ": unknown key '" + key + "' in [" + section + "]");
        entries_[{section, key}] = {Entry{value, origin}};
        validate_entry(section, key);
    }

    bool has(const std::string& section, const std::string& key) const {
        return entries_.count({section, key}) > 0;
    }

    std::string get_string(const std::string& section, const std::string& key) const {
        return raw(section, key).value;
    }

    double get_double(const std::string& section, const std::string& key) const {
        const auto e = raw(section, key);
        const auto v = detail::parse_number<double>(e.value);
        if (!v) throw ConfigError(e.origin + ": '" + key + "' expects a number, got '" + e.value + "'");
        return *v;
    }

    std::int64_t get_int(const std::string& section, const std::string& key) const {
        const auto e = raw(section, key);
        const auto v = detail::parse_number<std::int64_t>(e.value);
        if (!v) throw ConfigError(e.origin + ": '" + key + "' expects an integer, got '" + e.value + "'");
        return *v;
    }

    std::size_t get_count(const std::string& section, const std::string& key) const {
        const auto v = get_int(section, key);
        if (v < 0) throw ConfigError(raw(section, key).origin + ": '" + key + "' must be >= 0");
        return static_cast<std::size_t>(v);
    }

    std::uint64_t get_u64(const std::string& section, const std::string& key) const {
        const auto e = raw(section, key);
        const auto v = detail::parse_number<std::uint64_t>(e.value);
        if (!v) throw ConfigError(e.origin + ": '" + key + "' expects an unsigned integer, got '" + e.value + "'");
        return *v;
    }

    std::vector<double> get_doubles(const std::string& section, const std::string& key) const {
        const auto e = raw(section, key);
        std::vector<double> out;
        for (auto tok : detail::split_ws(e.value)) {
            const auto v = detail::parse_number<double>(tok);
            if (!v) throw ConfigError(e.origin + ": '" + key + "' expects numbers, got '" + std::string(tok) + "'");
            out.push_back(*v);
        }
        if (out.empty()) throw ConfigError(e.origin + ": '" + key + "' is empty");
        return out;
    }

    SystemSpec system() const {
        const auto n = get_int("system", "n");
        const double sigma = get_double("system", "sigma");
        SystemSpec::CoeffMap coeffs;
        if (auto it = entries_.find({"system", "coeff"}); it != entries_.end()) {
            for (const auto& e : it->second) {
                const auto tok = detail::split_ws(e.value);
                const auto j = tok.size() == 4 ? detail::parse_number<int>(tok[0]) : std::nullopt;
                const auto k = tok.size() == 4 ? detail::parse_number<int>(tok[1]) : std::nullopt;
                const auto re = tok.size() == 4 ? detail::parse_number<double>(tok[2]) : std::nullopt;
                const auto im = tok.size() == 4 ? detail::parse_number<double>(tok[3]) : std::nullopt;
                if (!j || !k || !re || !im) throw ConfigError(e.origin + ": coeff expects 'j k re im'");
                if (coeffs.count({*j, *k})) throw ConfigError(e.origin + ": duplicate coeff for z^" +
                                                              std::to_string(*j) + " zbar^" + std::to_string(*k));
                coeffs[{*j, *k}] = complex{*re, *im};
            }
        }
        try {
            return SystemSpec(static_cast<int>(n), sigma, coeffs);
        } catch (const DomainError& err) {
            throw ConfigError(source_ + ": [system] " + err.what());
        }
    }

    IntegratorConfig integrator() const {
        IntegratorConfig ic;
        const auto mode = get_string("integrator", "mode");
        if (mode == "cartesian") ic.mode = IntegratorMode::Cartesian;
        else if (mode == "timechanged") ic.mode = IntegratorMode::TimeChangedPolar;
        else if (mode == "deterministic") ic.mode = IntegratorMode::DeterministicCartesian;
        else throw ConfigError(raw("integrator", "mode").origin + ": unknown mode '" + mode + "'");
        ic.dt_base = get_double("integrator", "dt_base");
        ic.drift_cap_eps = get_double("integrator", "drift_cap_eps");
        ic.r_cap = get_double("integrator", "r_cap");
        ic.t_max = get_double("integrator", "t_max");
        ic.record_stride = get_count("integrator", "record_stride");
        ic.r_min = get_double("integrator", "r_min");
        try {
            ic.validate();
        } catch (const ConfigError& err) {
            throw ConfigError(source_ + ": " + err.what());
        }
        return ic;
    }

    /// Every key with its effective value, defaults included; parses back to
    /// an equivalent configuration.
    void write(std::ostream& os) const {
        std::string section;
        for (const auto& k : config_keys()) {
            if (k.section != section) {
                if (!section.empty()) os << "\n";
                section = k.section;
                os << "[" << section << "]\n";
            }
            const auto it = entries_.find({std::string(k.section), std::string(k.name)});
            if (it != entries_.end()) {
                for (const auto& e : it->second) os << k.name << " = " << e.value << "\n";
            } else if (!k.fallback.empty()) {
                os << k.name << " = " << k.fallback << "\n";
            }
        }
    }

private:
    using Key = std::pair<std::string, std::string>;

    void add(const std::string& section, const std::string& key, const std::string& value,
             const std::string& where) {
        const KeyInfo* info = find_key(section, key);
        if (!info) throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]");
        auto& list = entries_[{section, key}];
        if (!list.empty() && !info->repeatable) throw ConfigError(where + ": duplicate key '" + key + "'");
        list.push_back({value, where});
        validate_entry(section, key);
    }

    void validate_entry(const std::string& section, const std::string& key) const {
        const auto& e = entries_.at({section, key}).back();
        if (e.value.empty()) throw ConfigError(e.origin + ": '" + key + "' has no value");
    }

    Entry raw(const std::string& section, const std::string& key) const {
        const KeyInfo* info = find_key(section, key);
        if (!info) throw ConfigError("unregistered key '" + key + "' in [" + section + "]");
        if (const auto it = entries_.find({section, key}); it != entries_.end()) return it->second.back();
        if (info->optional) throw ConfigError(source_ + ": optional key '" + key + "' is not set");
        if (info->fallback.empty())
            throw ConfigError(source_ + ": missing required key '" + key + "' in [" + section + "]");
        return {std::string(info->fallback), "default of " + section + "." + key};
    }

    std::string source_ = "<config>";
    std::map<Key, std::vector<Entry>> entries_;
};

/// Text form of a system, readable by Config::parse.
inline std::string system_to_text(const SystemSpec& spec) {
    std::ostringstream os;
    os << "[system]\n";
    os << "n = " << spec.n() << "\n";
    os << "sigma = " << format_double(spec.sigma()) << "\n";
    for (const auto& [m, c] : spec.coeffs())
        os << "coeff = " << m.j << " " << m.k << " " << format_double(c.real()) << " " << format_double(c.imag())
           << "\n";
    return os.str();
}

inline SystemSpec system_from_text(const std::string& text) { return Config::parse_string(text).system(); }

} // namespace noisestab
