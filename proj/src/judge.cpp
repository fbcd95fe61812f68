#include "sra/judge.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <fstream>
#include <nlohmann/json.hpp>
#include <thread>

#include "text_util.hpp"

namespace sra {

std::string_view to_string(JudgeChoice c) {
  switch (c) {
    case JudgeChoice::first: return "first";
    case JudgeChoice::second: return "second";
    case JudgeChoice::tie: return "tie";
  }
  return "?";
}

std::string render_judge_prompt(const JudgeRequest& req, std::size_t max_chars) {
  if (detail::trim(req.strategy_block).empty()) throw InvalidArgument("judge prompt: empty strategy block");
  if (detail::trim(req.response_1).empty() || detail::trim(req.response_2).empty()) {
    throw InvalidArgument("judge prompt: both responses must be non-empty");
  }
  std::string out;
  out +=
      "[System]\n"
      "Please act as an impartial judge and compare the strategy adherence of the two responses provided by AI "
      "assistants to the emotional support conversation displayed below. Both assistants were instructed to use "
      "the support strategy given below in their next message. Choose the assistant whose response follows that "
      "strategy more closely. Do not judge general helpfulness. Do not let the order in which the responses were "
      "presented, their length, or the names of the assistants influence your evaluation. First reason about which "
      "response is potentially better, then output your final verdict by strictly following this format: \"[[A]]\" "
      "if assistant A is better, \"[[B]]\" if assistant B is better, and \"[[C]]\" for a tie.\n\n";
  out += "[Conversation History]\n" + req.history + "\n\n";
  out += "[Strategy]\n" + req.strategy_block + "\n\n";
  out += "[The Start of Assistant A's Answer]\n" + req.response_1 + "\n[The End of Assistant A's Answer]\n\n";
  out += "[The Start of Assistant B's Answer]\n" + req.response_2 + "\n[The End of Assistant B's Answer]\n";
  if (out.size() > max_chars) {
    throw InvalidArgument("judge prompt has " + std::to_string(out.size()) + " characters, limit is " +
                          std::to_string(max_chars));
  }
  return out;
}

JudgeVerdict parse_verdict(std::string raw) {
  JudgeVerdict v;
  v.raw = std::move(raw);
  std::size_t best = std::string::npos;
  for (auto [marker, choice] : {std::pair{"[[A]]", JudgeChoice::first}, std::pair{"[[B]]", JudgeChoice::second},
                                std::pair{"[[C]]", JudgeChoice::tie}}) {
    const auto pos = v.raw.rfind(marker);
    if (pos != std::string::npos && (best == std::string::npos || pos > best)) {
      best = pos;
      v.choice = choice;
    }
  }
  if (best == std::string::npos) {
    spdlog::warn("judge output has no verdict marker, counting as tie");
    v.choice = JudgeChoice::tie;
    v.reasoning = std::string(detail::trim(v.raw));
  } else {
    v.parsed = true;
    v.reasoning = std::string(detail::trim(std::string_view(v.raw).substr(0, best)));
  }
  if (v.reasoning.size() > 600) v.reasoning = v.reasoning.substr(0, 600);
  return v;
}

std::string chat_request_body(const std::string& model, const std::string& prompt) {
  nlohmann::json body = {{"model", model},
                         {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
                         {"temperature", 0}};
  return body.dump();
}

std::string chat_response_content(const std::string& body) {
  try {
    const auto j = nlohmann::json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed chat-completion response: ") + e.what());
  }
}

HttpTransport::HttpTransport(std::string base_url, std::string api_key, std::chrono::milliseconds timeout)
    : api_key_(std::move(api_key)), timeout_(timeout) {
  const auto scheme = base_url.find("://");
  if (scheme == std::string::npos) throw InvalidArgument("judge URL needs a scheme: " + base_url);
  const auto slash = base_url.find('/', scheme + 3);
  origin_ = base_url.substr(0, slash);
  prefix_ = slash == std::string::npos ? "" : base_url.substr(slash);
  while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (origin_.rfind("https://", 0) == 0) throw InvalidArgument("built without TLS support: " + base_url);
#endif
}

HttpResponse HttpTransport::post(const std::string& path, const std::string& body) {
  httplib::Client cli(origin_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
  cli.set_connection_timeout(secs.count(), usecs.count());
  cli.set_read_timeout(secs.count(), usecs.count());
  cli.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  // Avoid a trailing-slash mismatch when the URL already names the endpoint.
  std::string full = prefix_;
  if (!(full.size() >= path.size() && full.compare(full.size() - path.size(), path.size(), path) == 0)) full += path;
  auto res = cli.Post(full, headers, body, "application/json");
  if (!res) throw TransportError("judge request failed: " + httplib::to_string(res.error()));
  return {res->status, res->body};
}

RecordingTransport::RecordingTransport(Transport& inner, std::filesystem::path cassette)
    : inner_(inner), path_(std::move(cassette)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream truncate(path_, std::ios::trunc);
  if (!truncate) throw Error("cannot write cassette: " + path_.string());
}

HttpResponse RecordingTransport::post(const std::string& path, const std::string& body) {
  auto res = inner_.post(path, body);
  nlohmann::json line = {{"request", {{"path", path}, {"body", body}}},
                         {"response", {{"status", res.status}, {"body", res.body}}}};
  std::lock_guard lock(mu_);
  std::ofstream out(path_, std::ios::app);
  out << line.dump() << '\n';
  return res;
}

std::vector<CassetteEntry> load_cassette(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open cassette: " + path.string());
  std::vector<CassetteEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("request").at("path"), j.at("request").at("body"),
                     {j.at("response").at("status"), j.at("response").at("body")}});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
  return out;
}

ReplayTransport::ReplayTransport(std::vector<CassetteEntry> entries) {
  for (auto& e : entries) queue_[{e.path, e.body}].push_back(std::move(e.response));
  for (auto& [_, q] : queue_) std::reverse(q.begin(), q.end());
}

HttpResponse ReplayTransport::post(const std::string& path, const std::string& body) {
  std::lock_guard lock(mu_);
  auto it = queue_.find({path, body});
  if (it == queue_.end() || it->second.empty()) {
    throw Error("cassette has no recorded response for this request (" + std::to_string(body.size()) +
                " byte body to " + path + ")");
  }
  auto res = std::move(it->second.back());
  it->second.pop_back();
  return res;
}

std::size_t ReplayTransport::remaining() const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& [_, q] : queue_) n += q.size();
  return n;
}

JudgeClient::JudgeClient(Transport& transport, JudgeConfig cfg, Sleeper sleeper)
    : transport_(transport), cfg_(std::move(cfg)), sleep_(std::move(sleeper)) {
  if (cfg_.max_attempts < 1) throw InvalidArgument("judge max_attempts must be >= 1");
  if (cfg_.concurrency < 1) throw InvalidArgument("judge concurrency must be >= 1");
  if (!sleep_) sleep_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

JudgeVerdict JudgeClient::request_verdict(const JudgeRequest& req) {
  const auto body = chat_request_body(cfg_.model, render_judge_prompt(req, cfg_.max_prompt_chars));
  const std::string path(kChatCompletionsPath);
  auto backoff = cfg_.initial_backoff;
  std::string last_error;
  for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
    try {
      const auto res = transport_.post(path, body);
      if (res.status == 401 || res.status == 403) {
        throw JudgeAuthError("judge endpoint rejected credentials (HTTP " + std::to_string(res.status) + ")");
      }
      if (res.status >= 200 && res.status < 300) return parse_verdict(chat_response_content(res.body));
      last_error = "HTTP " + std::to_string(res.status);
      if (res.status != 429 && res.status < 500) throw Error("judge request failed: " + last_error);
    } catch (const TransportError& e) {
      last_error = e.what();
    }
    if (attempt < cfg_.max_attempts) {
      spdlog::warn("judge attempt {}/{} failed ({}), retrying in {} ms", attempt, cfg_.max_attempts, last_error,
                   backoff.count());
      sleep_(backoff);
      backoff *= 2;
    }
  }
  throw Error("judge request failed after " + std::to_string(cfg_.max_attempts) + " attempts: " + last_error);
}

std::vector<JudgePair> parse_judge_pairs(std::istream& in, std::string_view source) {
  std::vector<JudgePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("pair_id"), j.value("history", ""), j.at("strategy"), j.at("response_a"),
                     j.at("response_b")});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string(source), lineno, e.what());
    }
  }
  return out;
}

std::vector<JudgePair> load_judge_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open judge pairs: " + path.string());
  return parse_judge_pairs(in, path.string());
}

std::string serialize_head_to_head(const HeadToHeadResult& r) {
  nlohmann::json j = {{"pair_id", r.pair_id}};
  j["verdict_ab"] = r.verdict_ab ? nlohmann::json(std::string(to_string(*r.verdict_ab))) : nlohmann::json();
  j["verdict_ba"] = r.verdict_ba ? nlohmann::json(std::string(to_string(*r.verdict_ba))) : nlohmann::json();
  j["final"] = r.final ? nlohmann::json(std::string(to_string(*r.final))) : nlohmann::json();
  if (!r.error.empty()) j["error"] = r.error;
  return j.dump();
}

namespace {

Verdict to_model_verdict(JudgeChoice c, bool a_first) {
  if (c == JudgeChoice::tie) return Verdict::tie;
  const bool first = c == JudgeChoice::first;
  return first == a_first ? Verdict::a : Verdict::b;
}

}  // namespace

std::vector<HeadToHeadResult> run_head_to_head(JudgeClient& client, std::span<const JudgePair> pairs) {
  std::vector<HeadToHeadResult> results(pairs.size());
  // Calls are indexed 2i (A first) and 2i+1 (B first).
  std::vector<std::optional<Verdict>> verdicts(2 * pairs.size());
  std::vector<std::string> errors(2 * pairs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr fatal;
  std::mutex fatal_mu;

  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= verdicts.size() || abort.load()) return;
      const auto& p = pairs[k / 2];
      const bool a_first = k % 2 == 0;
      JudgeRequest req{p.history, p.strategy_block, a_first ? p.response_a : p.response_b,
                       a_first ? p.response_b : p.response_a};
      try {
        verdicts[k] = to_model_verdict(client.request_verdict(req).choice, a_first);
      } catch (const JudgeAuthError&) {
        std::lock_guard lock(fatal_mu);
        if (!fatal) fatal = std::current_exception();
        abort = true;
        return;
      } catch (const std::exception& e) {
        errors[k] = e.what();
      }
    }
  };
  const std::size_t n_threads = std::min(client.config().concurrency, std::max<std::size_t>(1, verdicts.size()));
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (fatal) std::rethrow_exception(fatal);

  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto& r = results[i];
    r.pair_id = pairs[i].pair_id;
    r.verdict_ab = verdicts[2 * i];
    r.verdict_ba = verdicts[2 * i + 1];
    if (r.verdict_ab && r.verdict_ba) {
      r.final = adjudicate(*r.verdict_ab, *r.verdict_ba);
    } else {
      r.error = !errors[2 * i].empty() ? errors[2 * i] : errors[2 * i + 1];
      spdlog::error("pair {}: {}", r.pair_id, r.error);
    }
  }
  return results;
}

std::vector<Outcome> completed_outcomes(std::span<const HeadToHeadResult> results) {
  std::vector<Outcome> out;
  for (const auto& r : results)
    if (r.final) out.push_back(*r.final);
  return out;
}

}  // namespace sra
