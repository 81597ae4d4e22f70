#include <doctest.h>

#include <atomic>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "factalign/llm_gateway.hpp"
#include "tmpdir.hpp"

using namespace factalign;
using namespace factalign::llm;
using testing::TempDir;

namespace {

class CountingBackend : public Backend {
  public:
    explicit CountingBackend(bool n) : n_(n) {}
    [[nodiscard]] bool supports_n() const override { return n_; }
    std::vector<Completion> complete(const ChatRequest& request) override {
        ++batch_calls;
        std::vector<Completion> out;
        for (int i = 0; i < request.sampling.n_samples; ++i) out.push_back(make(request, i));
        return out;
    }
    Completion complete_sample(const ChatRequest& request, int i) override {
        ++single_calls;
        return make(request, i);
    }
    std::atomic<int> batch_calls{0};
    std::atomic<int> single_calls{0};

  private:
    static Completion make(const ChatRequest& r, int i) {
        return {r.messages.back().content + "#" + std::to_string(i), i, FinishReason::stop};
    }
    bool n_;
};

ChatRequest request(const std::string& backend, const std::string& prompt, int n = 1) {
    SamplingParams s;
    s.n_samples = n;
    return ChatRequest::user_prompt(backend, "m", prompt, s);
}

}  // namespace

TEST_CASE("transcript and digest") {
    const std::vector<Message> msgs = {{Role::system, "sys"}, {Role::user, "hi"}};
    CHECK(render_transcript(msgs) == "system\nsys\x1euser\nhi");
    const std::vector<Message> one = {{Role::user, "hi"}};
    CHECK(prompt_digest(std::string_view("hi")) == prompt_digest(one));
    CHECK(prompt_digest(msgs) != prompt_digest(one));
}

TEST_CASE("request validation") {
    auto r = request("b", "x");
    CHECK_NOTHROW(r.validate());
    r.messages.push_back({Role::assistant, "a"});
    CHECK_THROWS_AS(r.validate(), GatewayError);
    auto e = request("b", "x");
    e.messages.clear();
    CHECK_THROWS_AS(e.validate(), GatewayError);
}

TEST_CASE("mock backend is keyed on transcript and sample index") {
    MockScript script;
    script.add(prompt_digest(std::string_view("q")), 0, "zero");
    script.add(prompt_digest(std::string_view("q")), 1, "one");
    script.add_failure(prompt_digest(std::string_view("q")), 2);
    auto mock = std::make_shared<MockBackend>(script);
    Gateway gw;
    gw.register_backend("m", mock);
    const auto out = gw.complete(request("m", "q", 4));
    REQUIRE(out.size() == 4);
    CHECK(out[0].text == "zero");
    CHECK(out[1].text == "one");
    CHECK_FALSE(out[2].ok());
    CHECK_FALSE(out[3].ok());
    CHECK(mock->misses() == 1);

    // Sampling parameters play no part in the lookup.
    auto hot = request("m", "q", 1);
    hot.sampling.temperature = 1.3;
    CHECK(gw.complete(hot)[0].text == "zero");
}

TEST_CASE("mock fallbacks") {
    MockScript echo;
    echo.fallback = MockScript::Fallback::echo;
    CHECK(MockBackend(echo).complete_sample(request("m", "say this"), 0).text == "say this");
    MockScript fixed;
    fixed.fallback = MockScript::Fallback::fixed;
    fixed.fixed_text = "Score: 3";
    CHECK(MockBackend(fixed).complete_sample(request("m", "anything"), 5).text == "Score: 3");
    CHECK(parse_fallback("echo") == MockScript::Fallback::echo);
    CHECK_THROWS(parse_fallback("random"));
}

TEST_CASE("mock script file round trip") {
    TempDir dir;
    MockScript s;
    s.add("d1", 0, "line\nbreak");
    s.add_failure("d1", 1);
    s.save(dir / "m.jsonl");
    const auto back = MockScript::load(dir / "m.jsonl");
    CHECK(back.entries.size() == 2);
    CHECK(back.entries.at({"d1", 0}).text == "line\nbreak");
    CHECK_FALSE(back.entries.at({"d1", 1}).text.has_value());
}

TEST_CASE("gateway dispatch") {
    Gateway gw;
    auto batch = std::make_shared<CountingBackend>(true);
    auto single = std::make_shared<CountingBackend>(false);
    gw.register_backend("batch", batch);
    gw.register_backend("single", single);
    CHECK(gw.complete(request("batch", "p", 3)).size() == 3);
    CHECK(batch->batch_calls == 1);
    const auto out = gw.complete(request("single", "p", 3));
    CHECK(single->single_calls == 3);
    CHECK(out[2].text == "p#2");
    CHECK(out[2].sample_index == 2);
    CHECK(gw.stats().backend_calls == 4);
    try {
        gw.complete(request("nope", "p"));
        FAIL("expected GatewayError");
    } catch (const GatewayError& e) {
        CHECK(e.kind() == GatewayError::Kind::unregistered_backend);
    }
}

TEST_CASE("cache hits skip the backend") {
    TempDir dir;
    Gateway gw;
    auto b = std::make_shared<CountingBackend>(true);
    gw.register_backend("b", b);
    gw.set_cache(std::make_shared<ResponseCache>(dir.path()));
    const auto first = gw.cached_complete(request("b", "p", 2));
    const auto second = gw.cached_complete(request("b", "p", 2));
    CHECK(first == second);
    CHECK(b->batch_calls == 1);
    CHECK(gw.stats().cache_hits == 2);
    CHECK(gw.stats().cache_misses == 2);
}

TEST_CASE("cache key covers every sampling field") {
    const auto base = request("b", "p", 2);
    const auto k = ResponseCache::key(base, 0);
    CHECK(k != ResponseCache::key(base, 1));
    auto v = base;
    v.sampling.temperature = 0.71;
    CHECK(ResponseCache::key(v, 0) != k);
    v = base;
    v.sampling.top_p = 0.95;
    CHECK(ResponseCache::key(v, 0) != k);
    v = base;
    v.sampling.seed = 7;
    CHECK(ResponseCache::key(v, 0) != k);
    v = base;
    v.sampling.max_tokens = 256;
    CHECK(ResponseCache::key(v, 0) != k);
    v = base;
    v.model = "other";
    CHECK(ResponseCache::key(v, 0) != k);
}

TEST_CASE("corrupt cache entries are dropped") {
    TempDir dir;
    ResponseCache cache(dir.path());
    const auto key = ResponseCache::key(request("b", "p"), 0);
    cache.put(key, {"text", 0, FinishReason::stop});
    REQUIRE(cache.get(key));
    std::filesystem::path entry;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir.path())) {
        if (e.is_regular_file()) entry = e.path();
    }
    std::ofstream(entry, std::ios::trunc) << "{truncated";
    CHECK_FALSE(cache.get(key));
    CHECK_FALSE(std::filesystem::exists(entry));

    // Failed samples are never cached.
    const auto k2 = ResponseCache::key(request("b", "q"), 0);
    cache.put(k2, {"", 0, FinishReason::error});
    CHECK_FALSE(cache.get(k2));
}

TEST_CASE("judge score parsing") {
    CHECK(parse_scalar_score("Score: 4") == 4.0);
    CHECK(parse_scalar_score("score:3.5 then SCORE: 2") == 2.0);
    CHECK(parse_scalar_score("Score: **5**") == 5.0);
    CHECK(parse_scalar_score("Score: 9") == 5.0);
    CHECK(parse_scalar_score("Score: 0") == 1.0);
    CHECK_FALSE(parse_scalar_score("I would give it four"));
}

// ---------------------------------------------------------------------------

TEST_CASE("http backend against a local server") {
    httplib::Server server;
    std::atomic<int> hits{0};
    std::atomic<int> fail_first{0};
    Json last_body;
    std::mutex mu;
    server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        ++hits;
        if (fail_first > 0) {
            --fail_first;
            res.status = 503;
            return;
        }
        const auto body = Json::parse(req.body);
        {
            std::lock_guard lock(mu);
            last_body = body;
        }
        Json choices = Json::array();
        const int n = body.at("n").get<int>();
        for (int i = n - 1; i >= 0; --i) {
            choices.push_back(
                {{"index", i}, {"message", {{"role", "assistant"}, {"content", "c" + std::to_string(i)}}}});
        }
        res.set_content(Json{{"choices", choices}}.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    HttpBackendConfig cfg;
    cfg.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
    cfg.backoff_ms = 1;
    HttpBackend backend(cfg);

    auto req = request("h", "hello", 3);
    req.sampling.seed = 11;
    const auto out = backend.complete(req);
    REQUIRE(out.size() == 3);
    CHECK(out[0].text == "c0");
    CHECK(out[2].text == "c2");
    {
        std::lock_guard lock(mu);
        CHECK(last_body.at("model") == "m");
        CHECK(last_body.at("n") == 3);
        CHECK(last_body.at("seed") == 11);
        CHECK(last_body.at("max_tokens") == 512);
        CHECK(last_body.at("messages").at(0).at("content") == "hello");
    }

    SUBCASE("retries transient failures") {
        fail_first = 2;
        const int before = hits;
        CHECK(backend.complete_sample(req, 1).text == "c0");
        CHECK(hits - before == 3);
        std::lock_guard lock(mu);
        CHECK(last_body.at("seed") == 12);
    }
    SUBCASE("gives up after the retry budget") {
        fail_first = 10;
        try {
            backend.complete(req);
            FAIL("expected GatewayError");
        } catch (const GatewayError& e) {
            CHECK(e.kind() == GatewayError::Kind::unreachable);
        }
        fail_first = 0;
    }
    server.stop();
    t.join();
}

TEST_CASE("http reply parsing") {
    CHECK_THROWS_AS(HttpBackend::parse_reply("nope", 1), GatewayError);
    CHECK_THROWS_AS(HttpBackend::parse_reply(R"({"choices":[]})", 1), GatewayError);
    CHECK_THROWS_AS(HttpBackend::parse_reply(R"({"choices":[{"index":0,"message":{}}]})", 1), GatewayError);
    const auto ok = HttpBackend::parse_reply(
        R"({"choices":[{"index":0,"message":{"content":"x"},"finish_reason":"length"}]})", 1);
    CHECK(ok[0].finish_reason == FinishReason::length);
}

TEST_CASE("unreachable backend") {
    HttpBackendConfig cfg;
    cfg.base_url = "http://127.0.0.1:1/v1";
    cfg.max_retries = 1;
    cfg.backoff_ms = 1;
    cfg.timeout_ms = 500;
    HttpBackend backend(cfg);
    CHECK_THROWS_AS(backend.complete(request("h", "x")), GatewayError);
    CHECK(backend.transport_calls() == 2);
    CHECK_THROWS_AS(HttpBackend(HttpBackendConfig{"localhost:80"}), std::invalid_argument);
}
