#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dialign/errors.hpp"
#include "dialign/prompt_paths.hpp"
#include "dialign/provider.hpp"
#include "dialign/strings.hpp"

namespace dialign {

// ============================================================================
// Profile configuration
// ============================================================================
//
// Profiles live in one key/value document (INI subset, documented in the
// README):
//
//   # comment lines start with '#' or ';'
//   [provider.generator]
//   kind = mock                  # or http
//   model = mock-gen
//   script = scripts/gen.json    # mock: response script
//   endpoint_url = http://...    # http: chat-completions URL
//   api_key_env = MY_KEY         # http: env var holding the bearer token
//   temperature = 0.1            # default when a call carries none
//   max_retries = 3
//   request_timeout_ms = 60000
//   rate_limit_rpm = 0           # 0 = unlimited
//   backoff_base_ms = 250
//   max_transcript_chars = 120000
//
//   [run]
//   temps = 0.1, 0.7
//   paths = DG, Base, Tips, BaseCoT, CoTNoPK, CoTPK
//   pcn_max = 5
//   parallelism = 4
//   run_root = runs
//
// Values may be double-quoted to keep leading/trailing spaces. There are no
// inline comments. Unknown sections or keys are rejected — a typo should
// fail loudly, not run a misconfigured grid. Secrets never appear in the
// file: http providers name an environment variable instead.

struct Profile {
    std::map<std::string, ProviderConfig> providers;  // by role name
    std::vector<double> temps = {0.1, 0.7};
    std::vector<PathKind> paths = all_path_kinds();
    int pcn_max = 5;
    size_t parallelism = 4;
    std::string run_root = "runs";

    const ProviderConfig& provider(const std::string& role) const {
        auto it = providers.find(role);
        if (it == providers.end())
            throw ConfigError("profile has no [provider." + role + "] section");
        return it->second;
    }
};

namespace detail {

inline std::string unquote(std::string value) {
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
        return value.substr(1, value.size() - 2);
    return value;
}

inline double parse_double(const std::string& value, const std::string& key) {
    try {
        size_t pos = 0;
        double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' needs a number, got '" + value + "'");
    }
}

inline int parse_int(const std::string& value, const std::string& key) {
    try {
        size_t pos = 0;
        int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' needs an integer, got '" + value + "'");
    }
}

inline std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= value.size()) {
        size_t comma = value.find(',', start);
        std::string item =
            trim(value.substr(start, comma == std::string::npos ? std::string::npos
                                                                : comma - start));
        if (!item.empty()) out.push_back(std::move(item));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline void apply_provider_key(ProviderConfig& cfg, const std::string& key,
                               const std::string& value) {
    if (key == "kind") cfg.kind = value;
    else if (key == "model") cfg.model_name = value;
    else if (key == "script") cfg.script_path = value;
    else if (key == "endpoint_url") cfg.endpoint_url = value;
    else if (key == "api_key_env") cfg.api_key_env = value;
    else if (key == "temperature") cfg.temperature = parse_double(value, key);
    else if (key == "max_retries") cfg.max_retries = parse_int(value, key);
    else if (key == "request_timeout_ms") cfg.request_timeout_ms = parse_int(value, key);
    else if (key == "rate_limit_rpm") cfg.rate_limit_rpm = parse_int(value, key);
    else if (key == "backoff_base_ms") cfg.backoff_base_ms = parse_int(value, key);
    else if (key == "max_transcript_chars")
        cfg.max_transcript_chars = static_cast<size_t>(parse_int(value, key));
    else
        throw ConfigError("unknown provider key '" + key + "'");
}

inline void apply_run_key(Profile& profile, const std::string& key, const std::string& value) {
    if (key == "temps") {
        profile.temps.clear();
        for (const auto& item : split_list(value))
            profile.temps.push_back(parse_double(item, key));
        if (profile.temps.empty()) throw ConfigError("temps list is empty");
    } else if (key == "paths") {
        profile.paths.clear();
        for (const auto& item : split_list(value)) profile.paths.push_back(parse_path_kind(item));
        if (profile.paths.empty()) throw ConfigError("paths list is empty");
    } else if (key == "pcn_max") {
        profile.pcn_max = parse_int(value, key);
    } else if (key == "parallelism") {
        int p = parse_int(value, key);
        if (p < 1) throw ConfigError("parallelism must be >= 1");
        profile.parallelism = static_cast<size_t>(p);
    } else if (key == "run_root") {
        profile.run_root = value;
    } else {
        throw ConfigError("unknown [run] key '" + key + "'");
    }
}

}  // namespace detail

inline Profile load_profile(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PersistenceError("cannot open profile: " + path);

    Profile profile;
    std::string section;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        const std::string at = path + ":" + std::to_string(line_no);

        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError("unterminated section at " + at);
            section = trim(t.substr(1, t.size() - 2));
            if (section != "run" && section.rfind("provider.", 0) != 0)
                throw ConfigError("unknown section [" + section + "] at " + at);
            if (section.rfind("provider.", 0) == 0) {
                const std::string role = section.substr(9);
                if (role.empty()) throw ConfigError("empty provider role at " + at);
                profile.providers.emplace(role, ProviderConfig{});
            }
            continue;
        }

        size_t eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError("expected 'key = value' at " + at);
        const std::string key = trim(t.substr(0, eq));
        const std::string value = detail::unquote(trim(t.substr(eq + 1)));
        if (key.empty()) throw ConfigError("empty key at " + at);
        if (section.empty())
            throw ConfigError("key '" + key + "' outside any section at " + at);

        try {
            if (section == "run")
                detail::apply_run_key(profile, key, value);
            else
                detail::apply_provider_key(profile.providers.at(section.substr(9)), key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(e.what()) + " at " + at);
        }
    }

    for (const auto& [role, cfg] : profile.providers) {
        try {
            check_provider_config(cfg);
        } catch (const ConfigError& e) {
            throw ConfigError("[provider." + role + "]: " + e.what());
        }
    }
    return profile;
}

/// What makes two provider configs "the same model" for the self-serving
/// check: same kind, endpoint, and model name — mocks differ by script too.
inline std::string provider_identity(const ProviderConfig& cfg) {
    return cfg.kind + "|" + cfg.endpoint_url + "|" + cfg.model_name + "|" + cfg.script_path;
}

/// A model revising answers it also graded can launder its own bias into
/// the training data, so judge and revisor must be different providers
/// unless the caller explicitly accepts the risk.
inline void check_distinct_judge_revisor(const Profile& profile, bool allow_self_serving) {
    auto judge = profile.providers.find("judge");
    auto revisor = profile.providers.find("revisor");
    if (judge == profile.providers.end() || revisor == profile.providers.end()) return;
    if (allow_self_serving) return;
    if (provider_identity(judge->second) == provider_identity(revisor->second))
        throw ConfigError(
            "judge and revisor resolve to the same provider; pass --allow-self-serving to "
            "accept the self-serving risk");
}

}  // namespace dialign
