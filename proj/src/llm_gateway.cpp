#include "factalign/llm_gateway.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

namespace factalign::llm {

std::string_view to_string(Role r) {
    switch (r) {
        case Role::system:
            return "system";
        case Role::user:
            return "user";
        case Role::assistant:
            return "assistant";
    }
    return "?";
}

std::string_view to_string(FinishReason r) {
    switch (r) {
        case FinishReason::stop:
            return "stop";
        case FinishReason::length:
            return "length";
        case FinishReason::error:
            return "error";
    }
    return "?";
}

Role parse_role(std::string_view s) {
    if (s == "system") return Role::system;
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    throw std::invalid_argument("unknown role '" + std::string(s) + "'");
}

void ChatRequest::validate() const {
    if (messages.empty()) throw GatewayError(GatewayError::Kind::invalid_request, "request has no messages");
    if (messages.back().role != Role::user) {
        throw GatewayError(GatewayError::Kind::invalid_request, "last message must come from the user");
    }
    try {
        sampling.validate();
    } catch (const InvariantError& e) {
        throw GatewayError(GatewayError::Kind::invalid_request, e.what());
    }
}

ChatRequest ChatRequest::user_prompt(std::string backend_id, std::string model, std::string prompt,
                                     SamplingParams sampling) {
    ChatRequest r;
    r.backend_id = std::move(backend_id);
    r.model = std::move(model);
    r.messages.push_back({Role::user, std::move(prompt)});
    r.sampling = sampling;
    return r;
}

std::string render_transcript(std::span<const Message> messages) {
    std::string out;
    for (std::size_t i = 0; i < messages.size(); ++i) {
        if (i > 0) out += '\x1e';
        out += to_string(messages[i].role);
        out += '\n';
        out += messages[i].content;
    }
    return out;
}

std::string prompt_digest(std::span<const Message> messages) { return sha256_hex(render_transcript(messages)); }

std::string prompt_digest(std::string_view prompt) {
    const std::array<Message, 1> m{Message{Role::user, std::string(prompt)}};
    return prompt_digest(m);
}

// ---------------------------------------------------------------------------
// Mock
// ---------------------------------------------------------------------------

void MockScript::add(std::string digest, int sample_index, std::string text) {
    entries[{std::move(digest), sample_index}] = Entry{std::move(text)};
}

void MockScript::add_failure(std::string digest, int sample_index) {
    entries[{std::move(digest), sample_index}] = Entry{std::nullopt};
}

MockScript::Fallback parse_fallback(std::string_view s) {
    if (s == "error") return MockScript::Fallback::error;
    if (s == "echo") return MockScript::Fallback::echo;
    if (s == "fixed") return MockScript::Fallback::fixed;
    throw std::invalid_argument("unknown mock fallback '" + std::string(s) + "'");
}

MockScript MockScript::load(const std::filesystem::path& path, Fallback fallback, std::string fixed_text) {
    MockScript script;
    script.fallback = fallback;
    script.fixed_text = std::move(fixed_text);
    const auto lines = detail::read_lines(path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        try {
            const auto j = Json::parse(lines[i]);
            auto digest = j.at("prompt_digest").get<std::string>();
            const int idx = j.at("sample_index").get<int>();
            if (j.value("error", false)) {
                script.add_failure(std::move(digest), idx);
            } else {
                script.add(std::move(digest), idx, j.at("text").get<std::string>());
            }
        } catch (const std::exception& e) {
            throw DatasetError(DatasetError::Kind::schema_violation, i + 1,
                               path.string() + ":" + std::to_string(i + 1) + ": bad mock entry: " +
                                   detail::describe_json_error(e));
        }
    }
    return script;
}

void MockScript::save(const std::filesystem::path& path) const {
    std::string bytes;
    for (const auto& [key, entry] : entries) {
        Json j{{"prompt_digest", key.first}, {"sample_index", key.second}};
        if (entry.text) {
            j["text"] = *entry.text;
        } else {
            j["error"] = true;
        }
        bytes += j.dump() + "\n";
    }
    detail::write_atomically(path, bytes);
}

Completion MockBackend::lookup(const std::string& digest, const ChatRequest& request, int sample_index) {
    if (auto it = script_.entries.find({digest, sample_index}); it != script_.entries.end()) {
        if (it->second.text) return {*it->second.text, sample_index, FinishReason::stop};
        return {"", sample_index, FinishReason::error};
    }
    misses_.fetch_add(1);
    switch (script_.fallback) {
        case MockScript::Fallback::echo:
            return {request.messages.back().content, sample_index, FinishReason::stop};
        case MockScript::Fallback::fixed:
            return {script_.fixed_text, sample_index, FinishReason::stop};
        case MockScript::Fallback::error:
            break;
    }
    spdlog::debug("mock: no entry for ({}, {})", digest, sample_index);
    return {"", sample_index, FinishReason::error};
}

std::vector<Completion> MockBackend::complete(const ChatRequest& request) {
    calls_.fetch_add(1);
    const auto digest = prompt_digest(request.messages);
    std::vector<Completion> out;
    out.reserve(static_cast<std::size_t>(request.sampling.n_samples));
    for (int i = 0; i < request.sampling.n_samples; ++i) out.push_back(lookup(digest, request, i));
    return out;
}

Completion MockBackend::complete_sample(const ChatRequest& request, int sample_index) {
    calls_.fetch_add(1);
    return lookup(prompt_digest(request.messages), request, sample_index);
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

namespace {

std::string exact(double v) {
    std::array<char, 64> buf{};
    auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), p);
}

}  // namespace

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
}

std::string ResponseCache::key(const ChatRequest& request, int sample_index) {
    const auto transcript = render_transcript(request.messages);
    const auto temp = exact(request.sampling.temperature);
    const auto top_p = exact(request.sampling.top_p);
    const auto n = std::to_string(request.sampling.n_samples);
    const auto seed = request.sampling.seed ? std::to_string(*request.sampling.seed) : std::string("none");
    const auto max_tokens = std::to_string(request.sampling.max_tokens);
    const auto idx = std::to_string(sample_index);
    const std::array<std::string_view, 10> fields{
        "factalign/cache/v1", request.backend_id, request.model, transcript, temp, top_p, n, seed, max_tokens, idx};
    return digest_fields(fields);
}

std::filesystem::path ResponseCache::entry_path(const std::string& key) const {
    return dir_ / key.substr(0, 2) / (key + ".json");
}

std::optional<Completion> ResponseCache::get(const std::string& key) const {
    const auto path = entry_path(key);
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    std::stringstream ss;
    ss << in.rdbuf();
    in.close();
    try {
        const auto j = Json::parse(ss.str());
        if (j.at("key").get<std::string>() != key) throw std::runtime_error("key mismatch");
        Completion c;
        c.text = j.at("text").get<std::string>();
        c.sample_index = j.at("sample_index").get<int>();
        const auto fr = j.at("finish_reason").get<std::string>();
        if (fr == "stop") {
            c.finish_reason = FinishReason::stop;
        } else if (fr == "length") {
            c.finish_reason = FinishReason::length;
        } else {
            throw std::runtime_error("unexpected finish_reason " + fr);
        }
        return c;
    } catch (const std::exception& e) {
        spdlog::warn("cache: discarding corrupt entry {} ({})", path.string(), detail::describe_json_error(e));
        std::error_code ec;
        std::filesystem::remove(path, ec);
        return std::nullopt;
    }
}

void ResponseCache::put(const std::string& key, const Completion& completion) {
    if (!completion.ok()) return;
    const Json j{{"key", key},
                 {"sample_index", completion.sample_index},
                 {"finish_reason", to_string(completion.finish_reason)},
                 {"text", completion.text}};
    // Racing writers publish identical bytes; rename makes the last one win.
    const auto path = entry_path(key);
    std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += "." + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << j.dump();
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) spdlog::warn("cache: cannot publish {}: {}", path.string(), ec.message());
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

void Gateway::Slots::acquire() {
    std::unique_lock lock(m_);
    cv_.wait(lock, [this] { return free_ > 0; });
    --free_;
}

void Gateway::Slots::release() {
    {
        std::lock_guard lock(m_);
        ++free_;
    }
    cv_.notify_one();
}

void Gateway::register_backend(const std::string& id, std::shared_ptr<Backend> backend, int max_in_flight) {
    if (!backend) throw std::invalid_argument("register_backend: null backend");
    if (max_in_flight < 1) throw std::invalid_argument("register_backend: max_in_flight must be positive");
    backends_[id] = Registered{std::move(backend), std::make_unique<Slots>(max_in_flight)};
}

Gateway::Registered& Gateway::lookup(const std::string& id) {
    auto it = backends_.find(id);
    if (it == backends_.end()) {
        throw GatewayError(GatewayError::Kind::unregistered_backend, "backend '" + id + "' is not registered");
    }
    return it->second;
}

namespace {

struct SlotGuard {
    explicit SlotGuard(auto& slots) : release([&slots] { slots.release(); }) { slots.acquire(); }
    ~SlotGuard() { release(); }
    SlotGuard(const SlotGuard&) = delete;
    SlotGuard& operator=(const SlotGuard&) = delete;
    std::function<void()> release;
};

}  // namespace

std::vector<Completion> Gateway::call_all(Registered& r, const ChatRequest& request) {
    SlotGuard guard(*r.slots);
    backend_calls_.fetch_add(1);
    auto out = r.backend->complete(request);
    if (out.size() != static_cast<std::size_t>(request.sampling.n_samples)) {
        throw GatewayError(GatewayError::Kind::malformed_reply, "backend returned the wrong number of samples");
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i].sample_index = static_cast<int>(i);
    return out;
}

Completion Gateway::call_one(Registered& r, const ChatRequest& request, int sample_index) {
    SlotGuard guard(*r.slots);
    backend_calls_.fetch_add(1);
    auto c = r.backend->complete_sample(request, sample_index);
    c.sample_index = sample_index;
    return c;
}

std::vector<Completion> Gateway::complete(const ChatRequest& request) {
    auto& r = lookup(request.backend_id);
    request.validate();
    if (r.backend->supports_n()) return call_all(r, request);
    std::vector<Completion> out;
    for (int i = 0; i < request.sampling.n_samples; ++i) out.push_back(call_one(r, request, i));
    return out;
}

std::vector<Completion> Gateway::cached_complete(const ChatRequest& request) {
    if (!cache_) return complete(request);
    auto& r = lookup(request.backend_id);
    request.validate();
    const int n = request.sampling.n_samples;
    std::vector<std::optional<Completion>> slots(static_cast<std::size_t>(n));
    std::vector<std::string> keys(static_cast<std::size_t>(n));
    std::vector<int> missing;
    for (int i = 0; i < n; ++i) {
        keys[i] = ResponseCache::key(request, i);
        if (auto hit = cache_->get(keys[i])) {
            hit->sample_index = i;
            slots[i] = std::move(hit);
            cache_hits_.fetch_add(1);
        } else {
            missing.push_back(i);
            cache_misses_.fetch_add(1);
        }
    }
    if (!missing.empty()) {
        if (r.backend->supports_n() && missing.size() == static_cast<std::size_t>(n)) {
            auto fresh = call_all(r, request);
            for (int i : missing) slots[i] = std::move(fresh[i]);
        } else {
            for (int i : missing) slots[i] = call_one(r, request, i);
        }
        for (int i : missing) cache_->put(keys[i], *slots[i]);
    }
    std::vector<Completion> out;
    out.reserve(slots.size());
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

GatewayStats Gateway::stats() const {
    return {backend_calls_.load(), cache_hits_.load(), cache_misses_.load()};
}

// ---------------------------------------------------------------------------
// Score parsing
// ---------------------------------------------------------------------------

const ScorePatternSet& judge_score_patterns() {
    static const ScorePatternSet kPatterns{
        {std::regex(R"(score\s*:\s*\**\s*([0-9]+(?:\.[0-9]+)?))", std::regex::icase | std::regex::ECMAScript)},
        1.0,
        5.0};
    return kPatterns;
}

std::optional<double> parse_scalar_score(std::string_view text, const ScorePatternSet& patterns) {
    const std::string s(text);
    std::optional<std::pair<std::ptrdiff_t, double>> last;
    for (const auto& re : patterns.patterns) {
        for (auto it = std::sregex_iterator(s.begin(), s.end(), re); it != std::sregex_iterator(); ++it) {
            const auto& m = *it;
            double v = 0.0;
            try {
                v = std::stod(m[1].str());
            } catch (const std::exception&) {
                continue;
            }
            if (!last || m.position(0) >= last->first) last = std::make_pair(m.position(0), v);
        }
    }
    if (!last) return std::nullopt;
    return std::clamp(last->second, patterns.lo, patterns.hi);
}

}  // namespace factalign::llm
