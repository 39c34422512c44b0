#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "l0drop/errors.hpp"

namespace l0drop {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Flat key=value settings. '#' starts a comment; blank lines are ignored.
class ConfigMap {
public:
    static ConfigMap parse(const std::string& text) {
        ConfigMap c;
        std::istringstream is(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) {
                line.resize(hash);
            }
            line = trim(line);
            if (line.empty()) {
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config line " + std::to_string(lineno) + " is not key=value");
            }
            const auto key = trim(line.substr(0, eq));
            if (key.empty()) {
                throw ConfigError("config line " + std::to_string(lineno) + " has an empty key");
            }
            c.values_[key] = trim(line.substr(eq + 1));
        }
        return c;
    }

    static ConfigMap load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) {
            throw ConfigError("cannot read config file " + path.string());
        }
        std::stringstream ss;
        ss << is.rdbuf();
        return parse(ss.str());
    }

    bool has(const std::string& k) const { return values_.count(k) != 0; }
    void set(const std::string& k, const std::string& v) { values_[k] = v; }
    const std::map<std::string, std::string>& values() const { return values_; }

    std::string get(const std::string& k, const std::string& fallback) const {
        auto it = values_.find(k);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& k, double fallback) const {
        if (!has(k)) {
            return fallback;
        }
        try {
            std::size_t used = 0;
            const double v = std::stod(values_.at(k), &used);
            if (used != values_.at(k).size()) {
                throw std::invalid_argument(k);
            }
            return v;
        } catch (const std::logic_error&) {
            throw ConfigError("config key " + k + " expects a number, got '" + values_.at(k) + "'");
        }
    }

    std::uint64_t get_uint(const std::string& k, std::uint64_t fallback) const {
        if (!has(k)) {
            return fallback;
        }
        const auto& s = values_.at(k);
        try {
            std::size_t used = 0;
            if (!s.empty() && s[0] == '-') {
                throw std::invalid_argument(k);
            }
            const auto v = std::stoull(s, &used);
            if (used != s.size()) {
                throw std::invalid_argument(k);
            }
            return v;
        } catch (const std::logic_error&) {
            throw ConfigError("config key " + k + " expects a nonnegative integer, got '" + s + "'");
        }
    }

    bool get_bool(const std::string& k, bool fallback) const {
        if (!has(k)) {
            return fallback;
        }
        const auto& s = values_.at(k);
        if (s == "1" || s == "true" || s == "yes") {
            return true;
        }
        if (s == "0" || s == "false" || s == "no") {
            return false;
        }
        throw ConfigError("config key " + k + " expects a boolean, got '" + s + "'");
    }

    // Rejects keys outside `known`.
    void check_known(const std::set<std::string>& known) const {
        for (const auto& [k, _] : values_) {
            if (!known.count(k)) {
                throw ConfigError("unknown config key '" + k + "'");
            }
        }
    }

    std::string to_text() const {
        std::string out;
        for (const auto& [k, v] : values_) {
            out += k + "=" + v + "\n";
        }
        return out;
    }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace l0drop
