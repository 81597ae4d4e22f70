#pragma once

// Chat-completion access: backend registry, a table-driven mock, an HTTP wire
// client and a persistent per-sample response cache.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "factalign/core.hpp"

namespace factalign::llm {

enum class Role { system, user, assistant };
enum class FinishReason { stop, length, error };

std::string_view to_string(Role r);
std::string_view to_string(FinishReason r);
Role parse_role(std::string_view s);

struct Message {
    Role role = Role::user;
    std::string content;
    bool operator==(const Message&) const = default;
};

struct ChatRequest {
    std::string backend_id;
    std::string model;
    std::vector<Message> messages;
    SamplingParams sampling;

    /// Throws GatewayError(invalid_request).
    void validate() const;

    static ChatRequest user_prompt(std::string backend_id, std::string model, std::string prompt,
                                   SamplingParams sampling);
};

struct Completion {
    std::string text;
    int sample_index = 0;
    FinishReason finish_reason = FinishReason::stop;
    bool operator==(const Completion&) const = default;

    [[nodiscard]] bool ok() const noexcept { return finish_reason != FinishReason::error; }
};

class GatewayError : public std::runtime_error {
  public:
    enum class Kind { invalid_request, unregistered_backend, unreachable, timeout, malformed_reply };
    GatewayError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    [[nodiscard]] Kind kind() const noexcept { return kind_; }

  private:
    Kind kind_;
};

/// Canonical transcript: each message as "<role>\n<content>", joined by the
/// ASCII record separator (0x1E).
std::string render_transcript(std::span<const Message> messages);

/// SHA-256 of the canonical transcript. Mock scripts are keyed on this.
std::string prompt_digest(std::span<const Message> messages);

/// Digest of a single user message carrying `prompt`.
std::string prompt_digest(std::string_view prompt);

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

class Backend {
  public:
    virtual ~Backend() = default;

    /// Whether one request may ask for n samples at once.
    [[nodiscard]] virtual bool supports_n() const { return true; }

    /// Exactly sampling.n_samples completions ordered by sample_index. A
    /// sample the backend could not produce carries FinishReason::error.
    virtual std::vector<Completion> complete(const ChatRequest& request) = 0;

    /// One sample with the given index.
    virtual Completion complete_sample(const ChatRequest& request, int sample_index) = 0;
};

struct MockScript {
    enum class Fallback { error, echo, fixed };

    struct Entry {
        std::optional<std::string> text;  // nullopt scripts a failed sample
    };

    std::map<std::pair<std::string, int>, Entry> entries;
    Fallback fallback = Fallback::error;
    std::string fixed_text;

    void add(std::string digest, int sample_index, std::string text);
    void add_failure(std::string digest, int sample_index);

    /// JSONL of {prompt_digest, sample_index, text} or {..., "error": true}.
    static MockScript load(const std::filesystem::path& path, Fallback fallback = Fallback::error,
                           std::string fixed_text = {});
    void save(const std::filesystem::path& path) const;
};

MockScript::Fallback parse_fallback(std::string_view s);

class MockBackend final : public Backend {
  public:
    explicit MockBackend(MockScript script) : script_(std::move(script)) {}

    std::vector<Completion> complete(const ChatRequest& request) override;
    Completion complete_sample(const ChatRequest& request, int sample_index) override;

    [[nodiscard]] std::uint64_t calls() const noexcept { return calls_.load(); }
    [[nodiscard]] std::uint64_t misses() const noexcept { return misses_.load(); }

  private:
    Completion lookup(const std::string& digest, const ChatRequest& request, int sample_index);

    MockScript script_;
    std::atomic<std::uint64_t> calls_{0};
    std::atomic<std::uint64_t> misses_{0};
};

struct HttpBackendConfig {
    std::string base_url;  // e.g. http://127.0.0.1:8000/v1
    int timeout_ms = 60000;
    int max_retries = 3;
    int backoff_ms = 200;
    bool supports_n = true;
    std::string api_key_env = "FACTALIGN_API_KEY";
};

/// POSTs {model, messages, temperature, top_p, n, max_tokens, seed?} to
/// <base_url>/chat/completions and reads choices[].message.content.
class HttpBackend final : public Backend {
  public:
    explicit HttpBackend(HttpBackendConfig config);

    [[nodiscard]] bool supports_n() const override { return config_.supports_n; }
    std::vector<Completion> complete(const ChatRequest& request) override;
    Completion complete_sample(const ChatRequest& request, int sample_index) override;

    /// HTTP attempts issued, including retries.
    [[nodiscard]] std::uint64_t transport_calls() const noexcept { return transport_calls_.load(); }

    static Json request_body(const ChatRequest& request, int n, std::optional<std::int64_t> seed);
    /// Throws GatewayError(malformed_reply) unless exactly `n` choices parse.
    static std::vector<Completion> parse_reply(const std::string& body, int n);

  private:
    std::string post(const Json& body);

    HttpBackendConfig config_;
    std::string scheme_host_port_;
    std::string path_;
    std::atomic<std::uint64_t> transport_calls_{0};
};

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

class ResponseCache {
  public:
    explicit ResponseCache(std::filesystem::path dir);

    /// Digest of backend, model, transcript, temperature, top_p, n_samples,
    /// seed, max_tokens and the sample index.
    static std::string key(const ChatRequest& request, int sample_index);

    /// Corrupt entries are removed and reported as misses.
    std::optional<Completion> get(const std::string& key) const;
    void put(const std::string& key, const Completion& completion);

    [[nodiscard]] const std::filesystem::path& dir() const noexcept { return dir_; }

  private:
    [[nodiscard]] std::filesystem::path entry_path(const std::string& key) const;

    std::filesystem::path dir_;
};

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

struct GatewayStats {
    std::uint64_t backend_calls = 0;
    std::uint64_t cache_hits = 0;
    std::uint64_t cache_misses = 0;
};

class Gateway {
  public:
    Gateway() = default;
    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;

    void register_backend(const std::string& id, std::shared_ptr<Backend> backend, int max_in_flight = 8);
    void set_cache(std::shared_ptr<ResponseCache> cache) { cache_ = std::move(cache); }
    [[nodiscard]] bool has_backend(const std::string& id) const { return backends_.contains(id); }

    /// Uncached; n samples in one call when the backend supports it,
    /// otherwise one call per sample.
    std::vector<Completion> complete(const ChatRequest& request);

    /// Cache-first. Falls back to complete() when no cache is configured.
    std::vector<Completion> cached_complete(const ChatRequest& request);

    [[nodiscard]] GatewayStats stats() const;

  private:
    class Slots {
      public:
        explicit Slots(int n) : free_(n) {}
        void acquire();
        void release();

      private:
        std::mutex m_;
        std::condition_variable cv_;
        int free_;
    };

    struct Registered {
        std::shared_ptr<Backend> backend;
        std::unique_ptr<Slots> slots;
    };

    Registered& lookup(const std::string& id);
    std::vector<Completion> call_all(Registered& r, const ChatRequest& request);
    Completion call_one(Registered& r, const ChatRequest& request, int sample_index);

    std::map<std::string, Registered> backends_;
    std::shared_ptr<ResponseCache> cache_;
    std::atomic<std::uint64_t> backend_calls_{0};
    std::atomic<std::uint64_t> cache_hits_{0};
    std::atomic<std::uint64_t> cache_misses_{0};
};

// ---------------------------------------------------------------------------
// Score parsing
// ---------------------------------------------------------------------------

struct ScorePatternSet {
    /// Each regex must capture the number in group 1.
    std::vector<std::regex> patterns;
    double lo = 1.0;
    double hi = 5.0;
};

/// "Score: <number>", case-insensitive, clamped to [1,5].
const ScorePatternSet& judge_score_patterns();

/// Last occurrence of any pattern, clamped to [lo,hi]; nullopt when none match.
std::optional<double> parse_scalar_score(std::string_view text,
                                         const ScorePatternSet& patterns = judge_score_patterns());

}  // namespace factalign::llm
