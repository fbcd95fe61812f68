#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sra/common.hpp"
#include "sra/evaluation.hpp"

namespace sra {

inline constexpr std::string_view kJudgeTemplateVersion = "judge-pairwise/1";

struct JudgeRequest {
  std::string history;
  std::string strategy_block;
  std::string response_1;
  std::string response_2;
};

enum class JudgeChoice { first, second, tie };

std::string_view to_string(JudgeChoice c);

struct JudgeVerdict {
  std::string raw;
  JudgeChoice choice = JudgeChoice::tie;
  std::string reasoning;
  bool parsed = false;  // false when no marker was found
};

/// Pairwise judge prompt. Throws on empty fields or when the result is longer
/// than max_chars.
std::string render_judge_prompt(const JudgeRequest& req, std::size_t max_chars = 32000);

/// Reads the last [[A]] / [[B]] / [[C]] marker. No marker gives a tie and a
/// logged warning.
JudgeVerdict parse_verdict(std::string raw);

/// Chat-completion request body, serialized with sorted keys.
std::string chat_request_body(const std::string& model, const std::string& prompt);

/// Extracts choices[0].message.content from a chat-completion response.
std::string chat_response_content(const std::string& body);

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// Network-level failure (connection refused, timeout). Retryable.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// 401/403 from the endpoint. Not retried; aborts the run.
class JudgeAuthError : public Error {
 public:
  using Error::Error;
};

class Transport {
 public:
  virtual ~Transport() = default;
  /// POSTs `body` to `path`. Throws TransportError on network failure.
  virtual HttpResponse post(const std::string& path, const std::string& body) = 0;
};

class HttpTransport : public Transport {
 public:
  /// `base_url` is scheme://host[:port][/prefix]; an empty API key sends no
  /// Authorization header.
  HttpTransport(std::string base_url, std::string api_key, std::chrono::milliseconds timeout);
  HttpResponse post(const std::string& path, const std::string& body) override;

 private:
  std::string origin_;
  std::string prefix_;
  std::string api_key_;
  std::chrono::milliseconds timeout_;
};

/// Wraps another transport and appends every exchange to a JSONL cassette.
/// The Authorization header is never written.
class RecordingTransport : public Transport {
 public:
  RecordingTransport(Transport& inner, std::filesystem::path cassette);
  HttpResponse post(const std::string& path, const std::string& body) override;

 private:
  Transport& inner_;
  std::filesystem::path path_;
  std::mutex mu_;
};

struct CassetteEntry {
  std::string path;
  std::string body;
  HttpResponse response;
};

std::vector<CassetteEntry> load_cassette(const std::filesystem::path& path);

/// Serves responses from a cassette. A request must match a recorded one
/// byte for byte (path and body); identical requests are served in
/// recording order.
class ReplayTransport : public Transport {
 public:
  explicit ReplayTransport(std::vector<CassetteEntry> entries);
  explicit ReplayTransport(const std::filesystem::path& cassette) : ReplayTransport(load_cassette(cassette)) {}
  HttpResponse post(const std::string& path, const std::string& body) override;
  std::size_t remaining() const;

 private:
  std::map<std::pair<std::string, std::string>, std::vector<HttpResponse>> queue_;
  mutable std::mutex mu_;
};

struct JudgeConfig {
  std::string url = "http://127.0.0.1:8000";
  std::string model = "gpt-4o";
  std::string api_key_env = "JUDGE_API_KEY";
  std::chrono::milliseconds timeout{60000};
  std::size_t max_prompt_chars = 32000;
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::size_t concurrency = 4;
};

inline constexpr std::string_view kChatCompletionsPath = "/v1/chat/completions";

class JudgeClient {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  JudgeClient(Transport& transport, JudgeConfig cfg, Sleeper sleeper = {});

  /// One judge call with retry on network errors, 429 and 5xx; backoff
  /// doubles per attempt. Throws JudgeAuthError on 401/403, Error otherwise.
  JudgeVerdict request_verdict(const JudgeRequest& req);

  const JudgeConfig& config() const { return cfg_; }

 private:
  Transport& transport_;
  JudgeConfig cfg_;
  Sleeper sleep_;
};

struct JudgePair {
  std::string pair_id;
  std::string history;
  std::string strategy_block;
  std::string response_a;
  std::string response_b;
};

std::vector<JudgePair> load_judge_pairs(const std::filesystem::path& path);
std::vector<JudgePair> parse_judge_pairs(std::istream& in, std::string_view source = "<stream>");

struct HeadToHeadResult {
  std::string pair_id;
  std::optional<Verdict> verdict_ab;  // A shown first
  std::optional<Verdict> verdict_ba;  // B shown first
  std::optional<Outcome> final;
  std::string error;  // set when a call failed after retries
};

std::string serialize_head_to_head(const HeadToHeadResult& r);

/// Judges every pair in both orders with at most cfg.concurrency calls in
/// flight. Results keep input order. Auth failures propagate.
std::vector<HeadToHeadResult> run_head_to_head(JudgeClient& client, std::span<const JudgePair> pairs);

/// Outcomes of the pairs that completed.
std::vector<Outcome> completed_outcomes(std::span<const HeadToHeadResult> results);

}  // namespace sra
