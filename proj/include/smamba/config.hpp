#pragma once

// Flat key=value configuration: trivially parseable, diff-friendly, and
// serialized in sorted order so equal configs are byte-equal.

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace smamba {

using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap parse_config_text(const std::string& text) {
    ConfigMap out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": expected key=value, got '" + t + "'");
        const std::string key = trim(t.substr(0, eq));
        const std::string val = trim(t.substr(eq + 1));
        if (key.empty()) throw std::runtime_error("config line " + std::to_string(lineno) +
                                                  ": empty key");
        out[key] = val;
    }
    return out;
}

inline ConfigMap load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

inline std::string serialize_config(const ConfigMap& cfg) {
    std::ostringstream os;
    for (const auto& [k, v] : cfg) os << k << "=" << v << "\n";
    return os.str();
}

inline const std::string& cfg_required(const ConfigMap& cfg, const std::string& key) {
    auto it = cfg.find(key);
    if (it == cfg.end()) throw std::runtime_error("missing config key: " + key);
    return it->second;
}

inline std::int64_t cfg_i64(const ConfigMap& cfg, const std::string& key) {
    try {
        return std::stoll(cfg_required(cfg, key));
    } catch (const std::invalid_argument&) {
        throw std::runtime_error("config key " + key + " is not an integer");
    }
}

inline double cfg_f64(const ConfigMap& cfg, const std::string& key) {
    try {
        return std::stod(cfg_required(cfg, key));
    } catch (const std::invalid_argument&) {
        throw std::runtime_error("config key " + key + " is not a number");
    }
}

inline bool cfg_bool(const ConfigMap& cfg, const std::string& key) {
    const std::string& v = cfg_required(cfg, key);
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw std::runtime_error("config key " + key + " is not a boolean: " + v);
}

inline std::int64_t cfg_i64_or(const ConfigMap& cfg, const std::string& key, std::int64_t dflt) {
    return cfg.count(key) ? cfg_i64(cfg, key) : dflt;
}

inline double cfg_f64_or(const ConfigMap& cfg, const std::string& key, double dflt) {
    return cfg.count(key) ? cfg_f64(cfg, key) : dflt;
}

inline std::string cfg_str_or(const ConfigMap& cfg, const std::string& key,
                              const std::string& dflt) {
    auto it = cfg.find(key);
    return it == cfg.end() ? dflt : it->second;
}

inline bool cfg_bool_or(const ConfigMap& cfg, const std::string& key, bool dflt) {
    return cfg.count(key) ? cfg_bool(cfg, key) : dflt;
}

} // namespace smamba
