#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <string>

#include "medvae/common.hpp"

namespace medvae {

// Plain-text `key = value` config with '#' comments. Every key must be
// consumed by the reader; leftovers are fatal.
class KeyValueConfig {
public:
    static KeyValueConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config: cannot open " + path);
        KeyValueConfig cfg;
        cfg.source_ = path;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                if (b == std::string::npos) return std::string();
                const auto e = s.find_last_not_of(" \t\r");
                return s.substr(b, e - b + 1);
            };
            if (trim(line).empty()) continue;
            const size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config: missing '=' at " + path + ":" + std::to_string(lineno));
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty())
                throw ConfigError("config: empty key at " + path + ":" + std::to_string(lineno));
            if (!cfg.values_.emplace(key, value).second)
                throw ConfigError("config: duplicate key '" + key + "' in " + path);
        }
        return cfg;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(*it);
        std::string v = it->second;
        values_.erase(it);
        return v;
    }

    int64_t get_int(const std::string& key, int64_t fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        int64_t v;
        try {
            v = std::stoll(it->second);
        } catch (...) {
            throw ConfigError("config: key '" + key + "' is not an integer: " + it->second);
        }
        consumed_.insert(*it);
        values_.erase(it);
        return v;
    }

    double get_double(const std::string& key, double fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        double v;
        try {
            v = std::stod(it->second);
        } catch (...) {
            throw ConfigError("config: key '" + key + "' is not a number: " + it->second);
        }
        consumed_.insert(*it);
        values_.erase(it);
        return v;
    }

    bool get_bool(const std::string& key, bool fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const std::string v = it->second;
        consumed_.insert(*it);
        values_.erase(it);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config: key '" + key + "' is not a boolean: " + v);
    }

    // Unknown keys are fatal: call after all reads.
    void reject_unknown() const {
        if (values_.empty()) return;
        std::string keys;
        for (const auto& [k, _] : values_) {
            if (!keys.empty()) keys += ", ";
            keys += k;
        }
        throw ConfigError("config: unknown key(s) in " + source_ + ": " + keys);
    }

private:
    std::string source_ = "<memory>";
    std::map<std::string, std::string> values_;
    std::map<std::string, std::string> consumed_;
};

// MEDVAE_SEED environment variable overrides any configured seed.
inline uint64_t apply_seed_override(uint64_t configured) {
    const char* env = std::getenv("MEDVAE_SEED");
    if (!env || !*env) return configured;
    try {
        return static_cast<uint64_t>(std::stoull(env));
    } catch (...) {
        throw ConfigError("MEDVAE_SEED is not an unsigned integer: " + std::string(env));
    }
}

}  // namespace medvae
