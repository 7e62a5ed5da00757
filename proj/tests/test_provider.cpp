#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <chrono>
#include <mutex>
#include <thread>

#include "dialign/provider.hpp"
#include "test_support.hpp"

using namespace dialign;

namespace {

PromptTranscript one_user_turn(const std::string& text = "hello") {
    PromptTranscript t;
    t.turns.push_back({Role::User, text});
    t.placeholders_resolved = true;
    return t;
}

CallContext ctx_for(const std::string& trial_id, int turn = 0) {
    CallContext ctx;
    ctx.trial_id = trial_id;
    ctx.turn_index = turn;
    return ctx;
}

/// Local chat-completions stand-in with a programmable status sequence.
/// Captures the last request so tests can assert on the wire format.
class StubServer {
public:
    explicit StubServer(std::vector<int> statuses, std::string reply_text = "stub reply")
        : statuses_(std::move(statuses)), reply_text_(std::move(reply_text)) {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req,
                                                    httplib::Response& res) {
            int hit;
            {
                std::lock_guard<std::mutex> lock(mu_);
                hit = hits_++;
                last_body_ = req.body;
                auto auth = req.headers.find("Authorization");
                last_auth_ = auth != req.headers.end() ? auth->second : "";
            }
            if (delay_ms_ > 0)
                std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms_));
            int status = hit < static_cast<int>(statuses_.size()) ? statuses_[hit]
                                                                  : statuses_.back();
            if (status == 200) {
                nlohmann::json body = {
                    {"choices",
                     {{{"message", {{"role", "assistant"}, {"content", reply_text_}}}}}},
                    {"usage", {{"prompt_tokens", 12}, {"completion_tokens", 3}}}};
                res.status = 200;
                res.set_content(body.dump(), "application/json");
            } else if (status == -1) {  // deliberately malformed 200
                res.status = 200;
                res.set_content("{\"choices\": []}", "application/json");
            } else {
                res.status = status;
                res.set_content("{\"error\": \"synthetic\"}", "application/json");
            }
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        REQUIRE(port_ > 0);
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~StubServer() {
        server_.stop();
        thread_.join();
    }

    std::string url() const {
        return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions";
    }
    int hits() {
        std::lock_guard<std::mutex> lock(mu_);
        return hits_;
    }
    nlohmann::json last_body() {
        std::lock_guard<std::mutex> lock(mu_);
        return nlohmann::json::parse(last_body_);
    }
    std::string last_auth() {
        std::lock_guard<std::mutex> lock(mu_);
        return last_auth_;
    }
    void set_delay_ms(int ms) { delay_ms_ = ms; }

private:
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::vector<int> statuses_;
    std::string reply_text_;
    std::mutex mu_;
    int hits_ = 0;
    std::string last_body_;
    std::string last_auth_;
    std::atomic<int> delay_ms_{0};
};

ProviderConfig http_config(const StubServer& server) {
    ProviderConfig cfg;
    cfg.kind = "http";
    cfg.endpoint_url = server.url();
    cfg.model_name = "test-model";
    cfg.max_retries = 3;
    cfg.backoff_base_ms = 1;  // keep retry tests fast
    cfg.request_timeout_ms = 5000;
    return cfg;
}

}  // namespace

// ============================================================================
// Scripted mock
// ============================================================================

TEST_CASE("the mock replays its script by trial and turn") {
    ScriptedMockProvider mock({{"t1/0", "Paris"}, {"t1/1", "still Paris"}}, "gen");
    CHECK(mock.id() == "mock:gen");
    CHECK(mock.deterministic());

    auto r0 = mock.complete(one_user_turn(), ctx_for("t1", 0));
    CHECK(r0.text == "Paris");
    CHECK(r0.attempt_count == 1);
    CHECK(r0.provider_id == "mock:gen");

    CHECK(mock.complete(one_user_turn(), ctx_for("t1", 1)).text == "still Paris");

    // Unscripted positions answer with the refusal sentinel, so whole runs
    // stay deterministic even with holes in the script.
    CHECK(mock.complete(one_user_turn(), ctx_for("t1", 2)).text == "I don't know");
    CHECK(mock.complete(one_user_turn(), ctx_for("other", 0)).text == "I don't know");

    // Same inputs, same outputs.
    CHECK(mock.complete(one_user_turn(), ctx_for("t1", 0)).text ==
          mock.complete(one_user_turn(), ctx_for("t1", 0)).text);
}

TEST_CASE("mock scripts load from JSON files") {
    testsup::TempDir tmp;
    auto path = (tmp / "script.json").string();

    testsup::write_file(path, R"({"t9/0": "scripted answer"})");
    auto mock = ScriptedMockProvider::from_file(path, "file");
    CHECK(mock.complete(one_user_turn(), ctx_for("t9", 0)).text == "scripted answer");

    testsup::write_file(path, "[1,2,3]");
    CHECK_THROWS_AS(ScriptedMockProvider::from_file(path), ConfigError);

    testsup::write_file(path, R"({"t9/0": 42})");
    CHECK_THROWS_AS(ScriptedMockProvider::from_file(path), ConfigError);

    testsup::write_file(path, "{nope");
    CHECK_THROWS_AS(ScriptedMockProvider::from_file(path), ConfigError);

    CHECK_THROWS_AS(ScriptedMockProvider::from_file((tmp / "absent.json").string()),
                    ConfigError);
}

TEST_CASE("transcript preconditions hold for every provider") {
    ScriptedMockProvider mock;

    PromptTranscript ends_assistant;
    ends_assistant.turns.push_back({Role::User, "q"});
    ends_assistant.turns.push_back({Role::Assistant, "a"});
    CHECK_THROWS_AS(mock.complete(ends_assistant, ctx_for("t")), ProtocolViolation);

    PromptTranscript empty;
    CHECK_THROWS_AS(mock.complete(empty, ctx_for("t")), ProtocolViolation);

    mock.set_max_transcript_chars(10);
    CHECK_THROWS_AS(mock.complete(one_user_turn("this is far too long"), ctx_for("t")),
                    TranscriptTooLong);
    CHECK_NOTHROW(mock.complete(one_user_turn("short"), ctx_for("t")));
}

// ============================================================================
// Rate limiting
// ============================================================================

TEST_CASE("the token bucket only throttles past its minute quota") {
    SUBCASE("zero means unlimited") {
        TokenBucket bucket(0);
        auto start = std::chrono::steady_clock::now();
        for (int i = 0; i < 1000; ++i) bucket.acquire();
        auto elapsed = std::chrono::steady_clock::now() - start;
        CHECK(elapsed < std::chrono::seconds(1));
    }

    SUBCASE("burst capacity is free, the next token costs real time") {
        TokenBucket bucket(600);  // refills 10/s
        auto start = std::chrono::steady_clock::now();
        for (int i = 0; i < 600; ++i) bucket.acquire();
        auto burst = std::chrono::steady_clock::now() - start;
        CHECK(burst < std::chrono::seconds(2));

        bucket.acquire();  // 601st: needs ~100 ms of refill
        auto total = std::chrono::steady_clock::now() - start;
        CHECK(total >= std::chrono::milliseconds(30));
        CHECK(total < std::chrono::seconds(10));
    }
}

// ============================================================================
// HTTP provider against a local stub
// ============================================================================

TEST_CASE("a clean 200 round-trips the wire format") {
    StubServer server({200}, "The capital is Paris.");
    setenv("DIALIGN_TEST_KEY", "sekrit", 1);
    auto cfg = http_config(server);
    cfg.api_key_env = "DIALIGN_TEST_KEY";
    HttpProvider provider(cfg);

    PromptTranscript t;
    t.turns.push_back({Role::System, "You judge things."});
    t.turns.push_back({Role::User, "Capital of France?"});
    auto ctx = ctx_for("trial-42");
    ctx.temperature = 0.7;
    auto result = provider.complete(t, ctx);

    CHECK(result.text == "The capital is Paris.");
    CHECK(result.attempt_count == 1);
    CHECK(result.prompt_tokens == 12);
    CHECK(result.completion_tokens == 3);
    CHECK(server.hits() == 1);
    CHECK(server.last_auth() == "Bearer sekrit");

    auto body = server.last_body();
    CHECK(body["model"] == "test-model");
    CHECK(body["temperature"] == doctest::Approx(0.7));
    REQUIRE(body["messages"].size() == 2);
    CHECK(body["messages"][0]["role"] == "system");
    CHECK(body["messages"][0]["content"] == "You judge things.");
    CHECK(body["messages"][1]["role"] == "user");
    CHECK(body["messages"][1]["content"] == "Capital of France?");
}

TEST_CASE("the per-call temperature falls back to the configured default") {
    StubServer server({200});
    auto cfg = http_config(server);
    cfg.temperature = 0.3;
    HttpProvider provider(cfg);

    provider.complete(one_user_turn(), ctx_for("t"));  // ctx temperature = -1
    CHECK(server.last_body()["temperature"] == doctest::Approx(0.3));

    auto ctx = ctx_for("t");
    ctx.temperature = 1.5;
    CHECK_THROWS_AS(provider.complete(one_user_turn(), ctx), ConfigError);
}

TEST_CASE("rate-limit responses are retried until they clear") {
    StubServer server({429, 429, 200});
    HttpProvider provider(http_config(server));

    auto result = provider.complete(one_user_turn(), ctx_for("t"));
    CHECK(result.text == "stub reply");
    CHECK(result.attempt_count == 3);
    CHECK(server.hits() == 3);
}

TEST_CASE("persistent rate limiting exhausts retries and says so") {
    StubServer server({429});
    auto cfg = http_config(server);
    cfg.max_retries = 2;
    HttpProvider provider(cfg);

    CHECK_THROWS_AS(provider.complete(one_user_turn(), ctx_for("t-rate")), RateLimited);
    CHECK(server.hits() == 3);  // max_retries + 1 attempts, never more

    try {
        provider.complete(one_user_turn(), ctx_for("t-rate"));
    } catch (const RateLimited& e) {
        CHECK(std::string(e.what()).find("t-rate") != std::string::npos);
    }
}

TEST_CASE("server errors are retryable, client errors are not") {
    SUBCASE("5xx retries then succeeds") {
        StubServer server({500, 503, 200});
        HttpProvider provider(http_config(server));
        CHECK(provider.complete(one_user_turn(), ctx_for("t")).attempt_count == 3);
    }
    SUBCASE("persistent 5xx surfaces as upstream failure") {
        StubServer server({500});
        auto cfg = http_config(server);
        cfg.max_retries = 1;
        HttpProvider provider(cfg);
        CHECK_THROWS_AS(provider.complete(one_user_turn(), ctx_for("t")), UpstreamError);
        CHECK(server.hits() == 2);
    }
    SUBCASE("auth failures never retry") {
        StubServer server({401});
        HttpProvider provider(http_config(server));
        CHECK_THROWS_AS(provider.complete(one_user_turn(), ctx_for("t")), AuthError);
        CHECK(server.hits() == 1);
    }
    SUBCASE("other 4xx fails immediately") {
        StubServer server({404});
        HttpProvider provider(http_config(server));
        CHECK_THROWS_AS(provider.complete(one_user_turn(), ctx_for("t")), UpstreamError);
        CHECK(server.hits() == 1);
    }
}

TEST_CASE("a 200 with an unusable body is an upstream error") {
    SUBCASE("missing choices") {
        StubServer server({-1});
        auto cfg = http_config(server);
        cfg.max_retries = 0;
        HttpProvider provider(cfg);
        CHECK_THROWS_AS(provider.complete(one_user_turn(), ctx_for("t")), UpstreamError);
    }
}

TEST_CASE("an unreachable endpoint times out instead of hanging") {
    ProviderConfig cfg;
    cfg.kind = "http";
    // Port 9 (discard) on localhost: nothing listens there in this sandbox.
    cfg.endpoint_url = "http://127.0.0.1:9/v1/chat/completions";
    cfg.model_name = "m";
    cfg.max_retries = 1;
    cfg.backoff_base_ms = 1;
    cfg.request_timeout_ms = 200;
    HttpProvider provider(cfg);
    CHECK_THROWS_AS(provider.complete(one_user_turn(), ctx_for("t")), TimeoutError);
}

TEST_CASE("a server slower than the read timeout counts as a timeout") {
    StubServer server({200});
    server.set_delay_ms(400);
    auto cfg = http_config(server);
    cfg.request_timeout_ms = 100;
    cfg.max_retries = 0;
    HttpProvider provider(cfg);
    CHECK_THROWS_AS(provider.complete(one_user_turn(), ctx_for("t")), TimeoutError);
}

TEST_CASE("backoff never shrinks between attempts and stays capped") {
    ProviderConfig cfg;
    cfg.kind = "http";
    cfg.endpoint_url = "http://127.0.0.1:9/x";
    cfg.backoff_base_ms = 250;
    HttpProvider provider(cfg);

    auto prev = provider.backoff_delay(1);
    CHECK(prev == std::chrono::milliseconds(250));
    for (int attempt = 2; attempt <= 12; ++attempt) {
        auto cur = provider.backoff_delay(attempt);
        CHECK(cur >= prev);
        CHECK(cur <= std::chrono::milliseconds(8000));
        prev = cur;
    }
    CHECK(provider.backoff_delay(12) == std::chrono::milliseconds(8000));
}

TEST_CASE("oversized transcripts are refused before any network call") {
    StubServer server({200});
    auto cfg = http_config(server);
    cfg.max_transcript_chars = 8;
    HttpProvider provider(cfg);
    CHECK_THROWS_AS(provider.complete(one_user_turn("way beyond the budget"), ctx_for("t")),
                    TranscriptTooLong);
    CHECK(server.hits() == 0);
}

// ============================================================================
// Factory and config validation
// ============================================================================

TEST_CASE("the factory builds what the config describes") {
    ProviderConfig mock_cfg;
    mock_cfg.kind = "mock";
    mock_cfg.model_name = "mock-gen";
    auto mock = make_provider(mock_cfg);
    CHECK(mock->id() == "mock:mock-gen");
    CHECK(mock->deterministic());

    testsup::TempDir tmp;
    auto script = (tmp / "s.json").string();
    testsup::write_file(script, R"({"a/0": "hi"})");
    mock_cfg.script_path = script;
    auto scripted = make_provider(mock_cfg, "override");
    CHECK(scripted->id() == "mock:override");
    CHECK(scripted->complete(one_user_turn(), ctx_for("a")).text == "hi");

    ProviderConfig http_cfg;
    http_cfg.kind = "http";
    http_cfg.endpoint_url = "http://example.invalid/v1/chat/completions";
    http_cfg.model_name = "m";
    auto http = make_provider(http_cfg);
    CHECK_FALSE(http->deterministic());
    CHECK(http->id() == "m@http://example.invalid/v1/chat/completions");
}

TEST_CASE("bad provider configs are rejected up front") {
    ProviderConfig cfg;
    cfg.kind = "carrier-pigeon";
    CHECK_THROWS_AS(check_provider_config(cfg), ConfigError);

    cfg = ProviderConfig{};
    cfg.temperature = 1.5;
    CHECK_THROWS_AS(check_provider_config(cfg), ConfigError);

    cfg = ProviderConfig{};
    cfg.kind = "http";  // no endpoint
    CHECK_THROWS_AS(check_provider_config(cfg), ConfigError);

    cfg = ProviderConfig{};
    cfg.max_retries = -1;
    CHECK_THROWS_AS(check_provider_config(cfg), ConfigError);

    CHECK_THROWS_AS(detail::split_url("not-a-url"), ConfigError);
    auto parts = detail::split_url("http://h:8080");
    CHECK(parts.base == "http://h:8080");
    CHECK(parts.path == "/");
}

// ============================================================================
// Refusal detection
// ============================================================================

TEST_CASE("refusals are matched loosely but not greedily") {
    CHECK(is_refusal("I don't know"));
    CHECK(is_refusal("  i don't know.  "));
    CHECK(is_refusal("I DON'T KNOW!"));
    CHECK(is_refusal("I dont know."));
    CHECK_FALSE(is_refusal("I don't know the capital"));
    CHECK_FALSE(is_refusal("Unknown"));
    CHECK_FALSE(is_refusal(""));
}
