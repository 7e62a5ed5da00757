#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "dialign/errors.hpp"
#include "dialign/prompt_paths.hpp"

namespace dialign {

// ============================================================================
// Configuration
// ============================================================================

struct ProviderConfig {
    std::string kind = "mock";        // "mock" or "http"
    std::string endpoint_url;         // http(s)://host[:port]/path
    std::string model_name = "mock";
    std::string api_key_env;          // name of the env var holding the key
    std::string script_path;          // mock only
    double temperature = 0.1;
    int max_retries = 3;
    int request_timeout_ms = 60000;
    int rate_limit_rpm = 0;           // 0 = unlimited
    int backoff_base_ms = 250;
    size_t max_transcript_chars = 120000;
};

inline void check_provider_config(const ProviderConfig& cfg) {
    if (cfg.temperature < 0.0 || cfg.temperature > 1.0)
        throw ConfigError("temperature must be in [0,1], got " + std::to_string(cfg.temperature));
    if (cfg.max_retries < 0) throw ConfigError("max_retries must be >= 0");
    if (cfg.request_timeout_ms <= 0) throw ConfigError("request_timeout must be > 0");
    if (cfg.kind != "mock" && cfg.kind != "http")
        throw ConfigError("provider kind must be 'mock' or 'http', got '" + cfg.kind + "'");
    if (cfg.kind == "http" && cfg.endpoint_url.empty())
        throw ConfigError("http provider needs an endpoint_url");
}

/// Identifies one provider call inside a trial, so mock scripts can key on
/// position rather than global call order (which is racy under parallelism).
/// Carries the per-trial temperature; -1 means "use the provider default",
/// so judge/revisor calls inherit their configured value.
struct CallContext {
    std::string trial_id;
    int turn_index = 0;
    double temperature = -1.0;
};

struct CompletionResult {
    std::string text;  // raw, untrimmed model output
    int64_t latency_ms = 0;
    int attempt_count = 1;
    std::string provider_id;
    int64_t prompt_tokens = -1;      // -1 = not reported
    int64_t completion_tokens = -1;
};

// ============================================================================
// Provider interface
// ============================================================================

class Provider {
public:
    virtual ~Provider() = default;

    /// pre: transcript ends with a user turn.
    virtual CompletionResult complete(const PromptTranscript& transcript,
                                      const CallContext& ctx) = 0;

    virtual std::string id() const = 0;

    /// True when byte-identical outputs per (trial_id, turn_index) are
    /// guaranteed; the runner then freezes timestamps so whole artifacts
    /// become reproducible.
    virtual bool deterministic() const { return false; }

protected:
    /// Truncation would silently change the experiment, so over-budget
    /// transcripts are refused instead.
    static void check_transcript(const PromptTranscript& transcript, size_t max_chars) {
        if (transcript.turns.empty() || transcript.turns.back().role != Role::User)
            throw ProtocolViolation("completion requires a transcript ending in a user turn");
        size_t total = 0;
        for (const auto& t : transcript.turns) total += t.text.size();
        if (total > max_chars)
            throw TranscriptTooLong("transcript is " + std::to_string(total) +
                                    " chars, budget is " + std::to_string(max_chars));
    }
};

// ============================================================================
// Scripted mock
// ============================================================================

/// Offline deterministic provider. Scripts map "trial_id/turn_index" to the
/// response text; everything unscripted answers with the refusal sentinel the
/// prompt templates themselves prescribe. Immutable after construction, so
/// concurrent complete() calls need no locking.
class ScriptedMockProvider : public Provider {
public:
    explicit ScriptedMockProvider(std::map<std::string, std::string> script = {},
                                  std::string name = "mock")
        : script_(std::move(script)), name_(std::move(name)) {}

    static ScriptedMockProvider from_file(const std::string& path, std::string name = "mock") {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot open mock script: " + path);
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("mock script parse failure in " + path + ": " + e.what());
        }
        if (!doc.is_object()) throw ConfigError("mock script must be a JSON object: " + path);
        std::map<std::string, std::string> script;
        for (auto it = doc.begin(); it != doc.end(); ++it) {
            if (!it.value().is_string())
                throw ConfigError("mock script value for '" + it.key() + "' is not a string");
            script[it.key()] = it.value().get<std::string>();
        }
        return ScriptedMockProvider(std::move(script), std::move(name));
    }

    CompletionResult complete(const PromptTranscript& transcript,
                              const CallContext& ctx) override {
        check_transcript(transcript, max_transcript_chars_);
        CompletionResult r;
        r.provider_id = id();
        r.attempt_count = 1;
        r.latency_ms = 0;
        auto it = script_.find(ctx.trial_id + "/" + std::to_string(ctx.turn_index));
        r.text = it != script_.end() ? it->second
                                     : std::string(templates::kRefusalSentinel);
        return r;
    }

    std::string id() const override { return "mock:" + name_; }
    bool deterministic() const override { return true; }

    void set_max_transcript_chars(size_t n) { max_transcript_chars_ = n; }

private:
    std::map<std::string, std::string> script_;
    std::string name_;
    size_t max_transcript_chars_ = 120000;
};

// ============================================================================
// Rate limiting
// ============================================================================

/// Client-side token bucket: capacity of one minute's quota, continuous
/// refill. acquire() blocks until a token is available.
class TokenBucket {
public:
    explicit TokenBucket(int requests_per_minute)
        : rpm_(requests_per_minute),
          tokens_(static_cast<double>(requests_per_minute)),
          last_(std::chrono::steady_clock::now()) {}

    void acquire() {
        if (rpm_ <= 0) return;  // unlimited
        std::unique_lock<std::mutex> lock(mu_);
        for (;;) {
            refill();
            if (tokens_ >= 1.0) {
                tokens_ -= 1.0;
                return;
            }
            const double deficit = 1.0 - tokens_;
            const auto wait = std::chrono::duration<double>(deficit * 60.0 / rpm_);
            cv_.wait_for(lock, wait);
        }
    }

private:
    void refill() {
        auto now = std::chrono::steady_clock::now();
        double elapsed = std::chrono::duration<double>(now - last_).count();
        last_ = now;
        tokens_ = std::min(static_cast<double>(rpm_), tokens_ + elapsed * rpm_ / 60.0);
    }

    int rpm_;
    double tokens_;
    std::chrono::steady_clock::time_point last_;
    std::mutex mu_;
    std::condition_variable cv_;
};

// ============================================================================
// HTTP chat-completions client
// ============================================================================

namespace detail {

struct ParsedUrl {
    std::string base;  // scheme://host[:port]
    std::string path;  // /v1/chat/completions
};

inline ParsedUrl split_url(const std::string& url) {
    size_t scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        throw ConfigError("endpoint_url must start with http:// or https://: " + url);
    size_t path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace detail

/// Talks the common chat-completions wire format: POST {model, messages,
/// temperature}, bearer token from the configured environment variable.
/// Transient failures (429, 5xx, timeouts) retry with exponential backoff up
/// to max_retries; other 4xx never retry. Each call uses its own connection,
/// so concurrent complete() calls only contend on the rate limiter.
class HttpProvider : public Provider {
public:
    explicit HttpProvider(ProviderConfig cfg)
        : cfg_(std::move(cfg)), bucket_(std::make_unique<TokenBucket>(cfg_.rate_limit_rpm)) {
        check_provider_config(cfg_);
        if (!cfg_.api_key_env.empty()) {
            const char* key = std::getenv(cfg_.api_key_env.c_str());
            if (key) api_key_ = key;
        }
    }

    CompletionResult complete(const PromptTranscript& transcript,
                              const CallContext& ctx) override {
        check_transcript(transcript, cfg_.max_transcript_chars);

        const double temp = ctx.temperature >= 0.0 ? ctx.temperature : cfg_.temperature;
        if (temp > 1.0) throw ConfigError("temperature must be in [0,1], got " +
                                          std::to_string(temp));

        nlohmann::json body;
        body["model"] = cfg_.model_name;
        body["temperature"] = temp;
        body["messages"] = nlohmann::json::array();
        for (const auto& turn : transcript.turns)
            body["messages"].push_back(
                {{"role", std::string(role_str(turn.role))}, {"content", turn.text}});
        const std::string payload = body.dump();

        const auto [base, path] = detail::split_url(cfg_.endpoint_url);
        const auto start = std::chrono::steady_clock::now();
        std::string last_error;
        bool last_was_rate_limit = false;
        bool last_was_timeout = false;

        for (int attempt = 1; attempt <= cfg_.max_retries + 1; ++attempt) {
            bucket_->acquire();

            httplib::Client client(base);
            client.set_connection_timeout(std::chrono::milliseconds(cfg_.request_timeout_ms));
            client.set_read_timeout(std::chrono::milliseconds(cfg_.request_timeout_ms));
            client.set_write_timeout(std::chrono::milliseconds(cfg_.request_timeout_ms));

            httplib::Headers headers;
            if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

            auto res = client.Post(path, headers, payload, "application/json");

            if (!res) {
                // Transport-level failure: connection refused, timeout, reset.
                last_was_timeout = true;
                last_was_rate_limit = false;
                last_error = "transport error: " + httplib::to_string(res.error());
            } else if (res->status == 200) {
                return parse_completion(res->body, attempt, start, ctx);
            } else if (res->status == 401 || res->status == 403) {
                throw AuthError("status " + std::to_string(res->status) + " from " +
                                cfg_.endpoint_url + " (key env: " + cfg_.api_key_env + ")");
            } else if (res->status == 429) {
                last_was_rate_limit = true;
                last_was_timeout = false;
                last_error = "status 429: " + excerpt(res->body);
            } else if (res->status >= 500) {
                last_was_rate_limit = false;
                last_was_timeout = false;
                last_error = "status " + std::to_string(res->status) + ": " + excerpt(res->body);
            } else {
                throw UpstreamError("status " + std::to_string(res->status) + " from " +
                                    cfg_.endpoint_url + ": " + excerpt(res->body));
            }

            if (attempt <= cfg_.max_retries)
                std::this_thread::sleep_for(backoff_delay(attempt));
        }

        const std::string tag = " [trial " + ctx.trial_id + "]";
        if (last_was_rate_limit)
            throw RateLimited("retries exhausted: " + last_error + tag);
        if (last_was_timeout)
            throw TimeoutError("retries exhausted: " + last_error + tag);
        throw UpstreamError("retries exhausted: " + last_error + tag);
    }

    std::string id() const override { return cfg_.model_name + "@" + cfg_.endpoint_url; }

    /// Backoff doubles per attempt from the configured base, capped at 8 s —
    /// monotone non-decreasing by construction.
    std::chrono::milliseconds backoff_delay(int attempt) const {
        int64_t ms = cfg_.backoff_base_ms;
        for (int i = 1; i < attempt && ms < 8000; ++i) ms *= 2;
        return std::chrono::milliseconds(std::min<int64_t>(ms, 8000));
    }

private:
    static std::string excerpt(const std::string& body) {
        return body.size() <= 200 ? body : body.substr(0, 200) + "...";
    }

    CompletionResult parse_completion(const std::string& body, int attempt,
                                      std::chrono::steady_clock::time_point start,
                                      const CallContext& ctx) const {
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(body);
        } catch (const nlohmann::json::parse_error&) {
            throw UpstreamError("malformed completion body [trial " + ctx.trial_id +
                                "]: " + excerpt(body));
        }
        if (!doc.contains("choices") || !doc["choices"].is_array() || doc["choices"].empty() ||
            !doc["choices"][0].contains("message") ||
            !doc["choices"][0]["message"].contains("content") ||
            !doc["choices"][0]["message"]["content"].is_string()) {
            throw UpstreamError("completion body missing choices[0].message.content [trial " +
                                ctx.trial_id + "]: " + excerpt(body));
        }
        CompletionResult r;
        r.text = doc["choices"][0]["message"]["content"].get<std::string>();
        r.attempt_count = attempt;
        r.provider_id = id();
        r.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::steady_clock::now() - start)
                           .count();
        if (doc.contains("usage") && doc["usage"].is_object()) {
            const auto& u = doc["usage"];
            if (u.contains("prompt_tokens") && u["prompt_tokens"].is_number())
                r.prompt_tokens = u["prompt_tokens"].get<int64_t>();
            if (u.contains("completion_tokens") && u["completion_tokens"].is_number())
                r.completion_tokens = u["completion_tokens"].get<int64_t>();
        }
        return r;
    }

    ProviderConfig cfg_;
    std::string api_key_;
    std::unique_ptr<TokenBucket> bucket_;
};

/// Builds the provider a config describes.
inline std::unique_ptr<Provider> make_provider(const ProviderConfig& cfg,
                                               const std::string& name = "") {
    check_provider_config(cfg);
    if (cfg.kind == "mock") {
        const std::string label = name.empty() ? cfg.model_name : name;
        if (!cfg.script_path.empty()) {
            auto mock = ScriptedMockProvider::from_file(cfg.script_path, label);
            mock.set_max_transcript_chars(cfg.max_transcript_chars);
            return std::make_unique<ScriptedMockProvider>(std::move(mock));
        }
        auto mock = std::make_unique<ScriptedMockProvider>(std::map<std::string, std::string>{},
                                                           label);
        mock->set_max_transcript_chars(cfg.max_transcript_chars);
        return mock;
    }
    return std::make_unique<HttpProvider>(cfg);
}

/// The templates instruct the model to answer exactly "I don't know" when
/// unsure; downstream stages tag such answers for audit.
inline bool is_refusal(std::string_view text) {
    std::string t = to_lower(trim(text));
    while (!t.empty() && (t.back() == '.' || t.back() == '!')) t.pop_back();
    return t == "i don't know" || t == "i dont know";
}

}  // namespace dialign
