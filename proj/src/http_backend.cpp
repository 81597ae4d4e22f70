#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <thread>

#include <spdlog/spdlog.h>

#include "factalign/llm_gateway.hpp"

namespace factalign::llm {

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
    const auto& url = config_.base_url;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw std::invalid_argument("base_url must start with http:// or https://: " + url);
    }
    const auto path_start = url.find('/', scheme_end + 3);
    scheme_host_port_ = url.substr(0, path_start);
    path_ = path_start == std::string::npos ? std::string{} : url.substr(path_start);
    while (!path_.empty() && path_.back() == '/') path_.pop_back();
    path_ += "/chat/completions";
}

Json HttpBackend::request_body(const ChatRequest& request, int n, std::optional<std::int64_t> seed) {
    Json messages = Json::array();
    for (const auto& m : request.messages) {
        messages.push_back(Json{{"role", to_string(m.role)}, {"content", m.content}});
    }
    Json body{{"model", request.model},
              {"messages", std::move(messages)},
              {"temperature", request.sampling.temperature},
              {"top_p", request.sampling.top_p},
              {"n", n},
              {"max_tokens", request.sampling.max_tokens}};
    if (seed) body["seed"] = *seed;
    return body;
}

std::vector<Completion> HttpBackend::parse_reply(const std::string& body, int n) {
    Json j;
    try {
        j = Json::parse(body);
    } catch (const std::exception& e) {
        throw GatewayError(GatewayError::Kind::malformed_reply, "reply is not JSON: " + detail::describe_json_error(e));
    }
    if (!j.contains("choices") || !j.at("choices").is_array()) {
        throw GatewayError(GatewayError::Kind::malformed_reply, "reply has no choices array");
    }
    const auto& choices = j.at("choices");
    if (choices.size() != static_cast<std::size_t>(n)) {
        throw GatewayError(GatewayError::Kind::malformed_reply,
                           "expected " + std::to_string(n) + " choices, got " + std::to_string(choices.size()));
    }
    std::vector<std::optional<Completion>> slots(static_cast<std::size_t>(n));
    for (std::size_t pos = 0; pos < choices.size(); ++pos) {
        const auto& c = choices[pos];
        try {
            const int index = c.contains("index") ? c.at("index").get<int>() : static_cast<int>(pos);
            if (index < 0 || index >= n || slots[index]) throw std::runtime_error("bad choice index");
            Completion out;
            out.sample_index = index;
            out.text = c.at("message").at("content").get<std::string>();
            const auto fr = c.value("finish_reason", std::string("stop"));
            out.finish_reason = fr == "length" ? FinishReason::length : FinishReason::stop;
            slots[index] = std::move(out);
        } catch (const std::exception& e) {
            throw GatewayError(GatewayError::Kind::malformed_reply,
                               "malformed choice: " + detail::describe_json_error(e));
        }
    }
    std::vector<Completion> out;
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

std::string HttpBackend::post(const Json& body) {
    httplib::Client client(scheme_host_port_);
    const auto timeout = std::chrono::milliseconds(config_.timeout_ms);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    httplib::Headers headers;
    if (const char* key = std::getenv(config_.api_key_env.c_str()); key != nullptr && *key != '\0') {
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    const auto payload = body.dump();

    std::string last_error;
    bool timed_out = false;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(config_.backoff_ms << (attempt - 1)));
        }
        transport_calls_.fetch_add(1);
        auto res = client.Post(path_, headers, payload, "application/json");
        if (!res) {
            timed_out = res.error() == httplib::Error::Read || res.error() == httplib::Error::ConnectionTimeout;
            last_error = httplib::to_string(res.error());
            spdlog::warn("http backend {}: attempt {} failed: {}", scheme_host_port_, attempt + 1, last_error);
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            timed_out = false;
            last_error = "HTTP " + std::to_string(res->status);
            spdlog::warn("http backend {}: attempt {} returned {}", scheme_host_port_, attempt + 1, res->status);
            continue;
        }
        if (res->status != 200) {
            throw GatewayError(GatewayError::Kind::malformed_reply,
                               "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
        }
        return res->body;
    }
    throw GatewayError(timed_out ? GatewayError::Kind::timeout : GatewayError::Kind::unreachable,
                       "backend " + scheme_host_port_ + " failed after " + std::to_string(config_.max_retries + 1) +
                           " attempts: " + last_error);
}

std::vector<Completion> HttpBackend::complete(const ChatRequest& request) {
    if (!config_.supports_n) {
        std::vector<Completion> out;
        for (int i = 0; i < request.sampling.n_samples; ++i) out.push_back(complete_sample(request, i));
        return out;
    }
    const int n = request.sampling.n_samples;
    return parse_reply(post(request_body(request, n, request.sampling.seed)), n);
}

Completion HttpBackend::complete_sample(const ChatRequest& request, int sample_index) {
    std::optional<std::int64_t> seed;
    if (request.sampling.seed) seed = *request.sampling.seed + sample_index;
    auto out = parse_reply(post(request_body(request, 1, seed)), 1);
    out.front().sample_index = sample_index;
    return out.front();
}

}  // namespace factalign::llm
