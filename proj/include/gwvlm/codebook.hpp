#pragma once

// Snippet vocabulary: attribute-classed phrases projected by the text
// encoder and matched against object views.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gwvlm/geometry.hpp"

namespace gwvlm {

class ChatClient;
struct ChatConfig;

enum class AttributeClass {
  kAppearance,
  kShape,
  kRelational,
  kSpatial,
  kSemantic,
  kFunctional,
  kHighLevelCategory,
  kCommonCategory,
  kComponentAttribute,
  kSceneDescription,
  kContextualClue,
};

std::string_view to_string(AttributeClass c);
std::optional<AttributeClass> parse_attribute_class(std::string_view token);
std::span<const AttributeClass> all_attribute_classes();

// Category-name snippets rather than attribute phrases.
inline bool is_category_class(AttributeClass c) {
  return c == AttributeClass::kHighLevelCategory || c == AttributeClass::kCommonCategory;
}

enum class SceneDomain { kNatural, kRemoteSensing, kBoth };

std::string_view to_string(SceneDomain d);
std::optional<SceneDomain> parse_scene_domain(std::string_view token);
bool domain_matches(SceneDomain snippet_domain, SceneKind scene);

struct Snippet {
  std::string snippet_id;
  std::string text;
  AttributeClass attribute_class = AttributeClass::kAppearance;
  SceneDomain scene_domain = SceneDomain::kBoth;

  friend bool operator==(const Snippet&, const Snippet&) = default;
};

// Untyped entry as read from a codebook document, before validation.
struct SnippetRecord {
  std::string id;  // may be empty; assigned on load
  std::string text;
  std::string attribute_class;
  std::string scene_domain;
};

struct Violation {
  std::size_t index = 0;
  std::string message;
};

// Stable id derived from the normalized text and class.
std::string snippet_id_for(std::string_view text, AttributeClass c);

// Lists empty texts, unknown class or domain tokens, and duplicate ids or
// (text, class) pairs. A well-formed document yields an empty report.
std::vector<Violation> validate(std::span<const SnippetRecord> records);

class Codebook {
 public:
  // Validates; throws kParse listing the first violation.
  Codebook(std::vector<Snippet> snippets, SceneKind domain);

  const std::vector<Snippet>& snippets() const noexcept { return snippets_; }
  SceneKind domain() const noexcept { return domain_; }
  std::size_t size() const noexcept { return snippets_.size(); }
  const Snippet* find(std::string_view snippet_id) const;

  friend bool operator==(const Codebook&, const Codebook&) = default;

 private:
  std::vector<Snippet> snippets_;
  SceneKind domain_;
  std::map<std::string, std::size_t, std::less<>> by_id_;
};

std::vector<SnippetRecord> parse_codebook_document(std::string_view document);
std::string serialize_codebook(std::span<const Snippet> snippets);

// Keeps snippets tagged with the scene or with `both`, in file order.
Codebook codebook_from_records(std::span<const SnippetRecord> records, SceneKind domain);
Codebook load_codebook(const std::filesystem::path& path, SceneKind domain);
void save_codebook(const std::filesystem::path& path, std::span<const Snippet> snippets);

// Per-class prompt templates for asking a language model for new snippets.
// Templates may use {n}, {attribute_class} and {scene}.
class SnippetPromptBook {
 public:
  static SnippetPromptBook load(const std::filesystem::path& path);
  explicit SnippetPromptBook(std::map<AttributeClass, std::string> templates);

  std::string render(AttributeClass c, SceneDomain domain, int n) const;

 private:
  std::map<AttributeClass, std::string> templates_;
};

struct GeneratedSnippets {
  std::vector<Snippet> snippets;
  std::vector<std::string> warnings;
};

// One phrase per output line; bullets and numbering are stripped, blank
// lines skipped, at most n kept.
GeneratedSnippets generate_snippets(ChatClient& client, const ChatConfig& cfg,
                                    const SnippetPromptBook& prompts, AttributeClass c,
                                    SceneDomain domain, int n);

}  // namespace gwvlm
