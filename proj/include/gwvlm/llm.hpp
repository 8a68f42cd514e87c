#pragma once

// Chat-completions client plumbing and the "guess what" decision: one
// completion per object, reasoning trace plus a final category answer.

#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gwvlm {

inline constexpr std::string_view kApiKeyEnv = "GW_LLM_API_KEY";
inline constexpr std::string_view kEndpointEnv = "GW_LLM_ENDPOINT";

// Game framing sent as the system message.
inline constexpr std::string_view kDefaultSystemPrompt =
    "We are playing a game of \"guess what\". You will receive clues about one object "
    "found in an image: where it sits, how big it is, and short phrases matched to its "
    "appearance and its surroundings. Reason step by step about what the object is, then "
    "finish with a final line of the form \"Category: <name>\".";

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatConfig {
  std::string endpoint;
  std::string model = "qwen-plus";
  double temperature = 0.0;
  int max_tokens = 512;
  double timeout_seconds = 60.0;
  int retries = 2;
  int backoff_initial_ms = 500;
  double backoff_multiplier = 2.0;
  std::string system_prompt = std::string(kDefaultSystemPrompt);
  // Read from the environment; never serialized or logged.
  std::string api_key;

  // Temperature in [0.0, 0.1], positive token budget, retries in [0, 10].
  void validate() const;

  // Fills api_key from GW_LLM_API_KEY and, when endpoint is empty, the
  // endpoint from GW_LLM_ENDPOINT.
  ChatConfig with_environment() const;
};

enum class ChatClientKind { kHttp, kMock };

class ChatClient {
 public:
  virtual ~ChatClient() = default;

  virtual ChatClientKind kind() const = 0;
  virtual std::string identity() const = 0;

  // Exactly one request/response exchange; chat() layers retries on top.
  virtual std::string complete(std::span<const ChatMessage> messages, const ChatConfig& cfg) = 0;
};

// POST {endpoint}/chat/completions with the OpenAI-compatible body.
class HttpChatClient final : public ChatClient {
 public:
  ChatClientKind kind() const override { return ChatClientKind::kHttp; }
  std::string identity() const override { return "http"; }
  std::string complete(std::span<const ChatMessage> messages, const ChatConfig& cfg) override;
};

// Deterministic stand-in for a language model.
//
//   kEcho        returns the last user message verbatim.
//   kScripted    returns queued responses in order; throws once exhausted.
//   kTopSnippet  reads the first evidence line of the "## Main object"
//                section of a rendered prompt and answers with it, looked up
//                through `answers` (identity when absent).
//
// `overrides` are checked first in every mode: the first needle contained in
// the user message selects its canned response.
class MockChatClient final : public ChatClient {
 public:
  enum class Mode { kEcho, kScripted, kTopSnippet };

  explicit MockChatClient(Mode mode, std::uint64_t seed = 0);

  void push_response(std::string response);
  void set_answer(std::string snippet_text, std::string answer);
  void add_override(std::string needle, std::string response);

  ChatClientKind kind() const override { return ChatClientKind::kMock; }
  std::string identity() const override;
  std::string complete(std::span<const ChatMessage> messages, const ChatConfig& cfg) override;

  std::size_t calls() const;

 private:
  std::string top_snippet_reply(const std::string& prompt) const;

  Mode mode_;
  std::uint64_t seed_;
  std::map<std::string, std::string> answers_;
  std::vector<std::pair<std::string, std::string>> overrides_;
  mutable std::mutex mutex_;
  std::vector<std::string> script_;
  std::size_t next_ = 0;
  std::size_t calls_ = 0;
};

// Sends the messages, retrying transport errors, 429 and 5xx responses with
// exponential backoff up to cfg.retries extra attempts.
std::string chat(ChatClient& client, std::span<const ChatMessage> messages, const ChatConfig& cfg);

struct ParsedAnswer {
  std::string reasoning;
  std::string category_raw;
};

// Last "Category: <name>" line wins (key is case-insensitive) and everything
// before it is the reasoning. Without such a line, the trailing noun phrase of
// the last sentence is used, lowercased. Throws kUnparseableAnswer otherwise.
ParsedAnswer parse_answer(std::string_view raw);

std::string format_answer_line(std::string_view category);

struct GuessResult {
  std::string reasoning;
  std::string category_raw;
  std::string raw_response;
  std::chrono::milliseconds latency{0};
};

GuessResult guess_category(ChatClient& client, std::string_view prompt, const ChatConfig& cfg);

// Replaces every occurrence of secret with "***".
std::string redact(std::string text, std::string_view secret);

}  // namespace gwvlm
