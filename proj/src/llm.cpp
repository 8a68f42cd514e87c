#include "gwvlm/llm.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <regex>
#include <thread>

#include <nlohmann/json.hpp>

#include "gwvlm/error.hpp"
#include "http.hpp"
#include "text_util.hpp"

namespace gwvlm {

using nlohmann::json;

void ChatConfig::validate() const {
  if (!(temperature >= 0.0 && temperature <= 0.1)) {
    throw Error(ErrorCode::kConfig, "temperature must lie in [0.0, 0.1]");
  }
  if (max_tokens <= 0) throw Error(ErrorCode::kConfig, "max_tokens must be positive");
  if (retries < 0 || retries > 10) throw Error(ErrorCode::kConfig, "retries must lie in [0, 10]");
  if (!(timeout_seconds > 0.0)) throw Error(ErrorCode::kConfig, "timeout must be positive");
  if (backoff_initial_ms < 0 || !(backoff_multiplier >= 1.0)) {
    throw Error(ErrorCode::kConfig, "invalid retry backoff");
  }
}

ChatConfig ChatConfig::with_environment() const {
  ChatConfig out = *this;
  if (const char* key = std::getenv(std::string(kApiKeyEnv).c_str())) out.api_key = key;
  if (out.endpoint.empty()) {
    if (const char* ep = std::getenv(std::string(kEndpointEnv).c_str())) out.endpoint = ep;
  }
  return out;
}

std::string redact(std::string text, std::string_view secret) {
  if (secret.empty()) return text;
  std::size_t pos = 0;
  while ((pos = text.find(secret, pos)) != std::string::npos) {
    text.replace(pos, secret.size(), "***");
    pos += 3;
  }
  return text;
}

// ---------------------------------------------------------------------------
// HTTP client

std::string HttpChatClient::complete(std::span<const ChatMessage> messages, const ChatConfig& cfg) {
  if (cfg.endpoint.empty()) throw Error(ErrorCode::kConfig, "chat endpoint is not configured");
  const auto base = http::parse_url(cfg.endpoint);

  json body;
  body["model"] = cfg.model;
  body["temperature"] = cfg.temperature;
  body["max_tokens"] = cfg.max_tokens;
  body["messages"] = json::array();
  for (const auto& m : messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});

  http::Headers headers;
  if (!cfg.api_key.empty()) headers.emplace_back("Authorization", "Bearer " + cfg.api_key);

  const auto response =
      http::post_json(base, "/chat/completions", body.dump(), headers, cfg.timeout_seconds);
  if (response.status >= 400) {
    std::string excerpt = response.body.substr(0, 200);
    throw HttpError(response.status,
                    redact("chat endpoint returned status " + std::to_string(response.status) +
                               ": " + excerpt,
                           cfg.api_key));
  }

  json doc;
  try {
    doc = json::parse(response.body);
  } catch (const json::parse_error&) {
    throw Error(ErrorCode::kDecode, "chat completion body is not valid JSON");
  }
  if (!doc.is_object() || !doc.contains("choices") || !doc["choices"].is_array() ||
      doc["choices"].empty()) {
    throw Error(ErrorCode::kDecode, "chat completion body has no choices");
  }
  const auto& choice = doc["choices"][0];
  if (!choice.is_object() || !choice.contains("message") || !choice["message"].is_object()) {
    throw Error(ErrorCode::kDecode, "chat completion choice has no message");
  }
  const auto& content = choice["message"].value("content", json());
  if (!content.is_string()) throw Error(ErrorCode::kDecode, "chat completion content is not text");
  return content.get<std::string>();
}

// ---------------------------------------------------------------------------
// Mock client

MockChatClient::MockChatClient(Mode mode, std::uint64_t seed) : mode_(mode), seed_(seed) {}

void MockChatClient::push_response(std::string response) {
  std::lock_guard lock(mutex_);
  script_.push_back(std::move(response));
}

void MockChatClient::set_answer(std::string snippet_text, std::string answer) {
  answers_[std::move(snippet_text)] = std::move(answer);
}

void MockChatClient::add_override(std::string needle, std::string response) {
  overrides_.emplace_back(std::move(needle), std::move(response));
}

std::string MockChatClient::identity() const {
  switch (mode_) {
    case Mode::kEcho: return "mock:echo";
    case Mode::kScripted: return "mock:scripted";
    case Mode::kTopSnippet: return "mock:top_snippet";
  }
  return "mock";
}

std::size_t MockChatClient::calls() const {
  std::lock_guard lock(mutex_);
  return calls_;
}

std::string MockChatClient::top_snippet_reply(const std::string& prompt) const {
  static const std::regex evidence(R"(^(.+) \(([a-z_]+)(, -?[0-9]+\.[0-9]+)?\)$)");
  static constexpr std::array<std::string_view, 3> kOpeners = {
      "The strongest primary-view clue is", "Most of the evidence points to",
      "Weighing the main view first, the best match is"};

  bool in_main = false;
  for (const auto& line : text::split_lines(prompt)) {
    if (line.rfind("## ", 0) == 0) {
      if (in_main) break;
      in_main = line.rfind("## Main object", 0) == 0;
      continue;
    }
    if (!in_main) continue;
    std::smatch m;
    if (std::regex_match(line, m, evidence)) {
      const std::string snippet = m[1].str();
      const auto it = answers_.find(snippet);
      const std::string answer = it == answers_.end() ? snippet : it->second;
      const auto opener = kOpeners[text::fnv1a64(prompt, seed_) % kOpeners.size()];
      return std::string(opener) + " \"" + snippet + "\".\n" + format_answer_line(answer);
    }
  }
  return "I could not find any main-object clue.";
}

std::string MockChatClient::complete(std::span<const ChatMessage> messages, const ChatConfig&) {
  std::string prompt;
  for (const auto& m : messages) {
    if (m.role == "user") prompt = m.content;
  }
  {
    std::lock_guard lock(mutex_);
    ++calls_;
  }
  for (const auto& [needle, response] : overrides_) {
    if (prompt.find(needle) != std::string::npos) return response;
  }
  switch (mode_) {
    case Mode::kEcho: return prompt;
    case Mode::kScripted: {
      std::lock_guard lock(mutex_);
      if (next_ >= script_.size()) {
        throw Error(ErrorCode::kTransport, "mock chat script exhausted");
      }
      return script_[next_++];
    }
    case Mode::kTopSnippet: return top_snippet_reply(prompt);
  }
  return prompt;
}

// ---------------------------------------------------------------------------
// Retry loop

namespace {

bool retryable(const Error& e) {
  if (e.code() == ErrorCode::kTransport) return true;
  if (const auto* h = dynamic_cast<const HttpError*>(&e)) {
    return h->status() == 429 || h->status() >= 500;
  }
  return false;
}

}  // namespace

std::string chat(ChatClient& client, std::span<const ChatMessage> messages, const ChatConfig& cfg) {
  double delay_ms = cfg.backoff_initial_ms;
  for (int attempt = 0;; ++attempt) {
    try {
      return client.complete(messages, cfg);
    } catch (const HttpError& e) {
      if (attempt >= cfg.retries || !retryable(e)) {
        throw HttpError(e.status(), redact(e.what(), cfg.api_key));
      }
    } catch (const Error& e) {
      if (attempt >= cfg.retries || !retryable(e)) {
        throw Error(e.code(), redact(e.what(), cfg.api_key));
      }
    }
    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(delay_ms));
    delay_ms *= cfg.backoff_multiplier;
  }
}

// ---------------------------------------------------------------------------
// Answer parsing

namespace {

std::string strip_decoration(std::string s) {
  auto is_deco = [](char c) { return c == '*' || c == '"' || c == '\'' || c == '`' || c == '_'; };
  while (!s.empty() && is_deco(s.front())) s.erase(s.begin());
  while (!s.empty() && is_deco(s.back())) s.pop_back();
  return text::trim(s);
}

// Matches "Category: x" with optional markdown around the key.
bool category_line(const std::string& line, std::string& name) {
  static const std::regex re(R"(^[\s*#>_-]*category[*_]*\s*:[*_]*\s*(.*)$)", std::regex::icase);
  std::smatch m;
  if (!std::regex_match(line, m, re)) return false;
  name = strip_decoration(text::trim(m[1].str()));
  return !name.empty();
}

bool is_phrase_boundary(const std::string& word) {
  static const std::array<std::string_view, 52> kStop = {
      "a",        "an",      "the",        "is",       "are",     "was",      "were",
      "be",       "been",    "being",      "it",       "this",    "that",     "these",
      "those",    "they",    "object",     "of",       "as",      "like",     "to",
      "in",       "on",      "at",         "for",      "with",    "by",       "from",
      "likely",   "probably", "most",      "possibly", "perhaps", "definitely", "clearly",
      "therefore", "so",     "thus",       "and",      "or",      "but",      "answer",
      "category", "guess",   "i",          "think",    "believe", "my",       "final",
      "its",      "which",   "called"};
  return std::find(kStop.begin(), kStop.end(), word) != kStop.end();
}

std::string trailing_noun_phrase(std::string_view raw) {
  // Last non-empty sentence.
  std::string sentence;
  std::string current;
  for (char c : raw) {
    if (c == '.' || c == '!' || c == '?' || c == '\n') {
      if (!text::trim(current).empty()) sentence = text::trim(current);
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!text::trim(current).empty()) sentence = text::trim(current);

  std::vector<std::string> words;
  for (const auto& token : text::split_whitespace(sentence)) {
    std::string w = text::to_lower(token);
    while (!w.empty() && !std::isalnum(static_cast<unsigned char>(w.front()))) w.erase(w.begin());
    while (!w.empty() && !std::isalnum(static_cast<unsigned char>(w.back()))) w.pop_back();
    if (!w.empty()) words.push_back(std::move(w));
  }

  std::vector<std::string> phrase;
  for (auto it = words.rbegin(); it != words.rend() && phrase.size() < 4; ++it) {
    if (is_phrase_boundary(*it)) break;
    phrase.insert(phrase.begin(), *it);
  }
  return text::join(phrase, " ");
}

}  // namespace

ParsedAnswer parse_answer(std::string_view raw) {
  const auto lines = text::split_lines(raw);
  for (std::size_t i = lines.size(); i-- > 0;) {
    std::string name;
    if (category_line(lines[i], name)) {
      std::vector<std::string> before(lines.begin(), lines.begin() + static_cast<long>(i));
      return {text::trim(text::join(before, "\n")), name};
    }
  }
  std::string fallback = trailing_noun_phrase(raw);
  if (fallback.empty()) {
    throw Error(ErrorCode::kUnparseableAnswer,
                "no category found in model output: \"" + std::string(raw.substr(0, 200)) + "\"");
  }
  return {text::trim(raw), fallback};
}

std::string format_answer_line(std::string_view category) {
  return "Category: " + std::string(category);
}

GuessResult guess_category(ChatClient& client, std::string_view prompt, const ChatConfig& cfg) {
  if (text::trim(prompt).empty()) throw Error(ErrorCode::kInvalidArgument, "empty prompt");
  const std::array<ChatMessage, 2> messages = {
      ChatMessage{"system", cfg.system_prompt}, ChatMessage{"user", std::string(prompt)}};

  const auto start = std::chrono::steady_clock::now();
  std::string raw = chat(client, messages, cfg);
  const auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(
      std::chrono::steady_clock::now() - start);

  raw = redact(std::move(raw), cfg.api_key);
  if (text::trim(raw).empty()) throw Error(ErrorCode::kEmptyCompletion, "model returned no text");
  auto parsed = parse_answer(raw);
  return {std::move(parsed.reasoning), std::move(parsed.category_raw), std::move(raw), latency};
}

}  // namespace gwvlm
