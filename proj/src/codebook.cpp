#include "gwvlm/codebook.hpp"

#include <array>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gwvlm/error.hpp"
#include "gwvlm/llm.hpp"
#include "text_util.hpp"

namespace gwvlm {

using nlohmann::json;

namespace {

constexpr std::array<AttributeClass, 11> kAllClasses = {
    AttributeClass::kAppearance,         AttributeClass::kShape,
    AttributeClass::kRelational,         AttributeClass::kSpatial,
    AttributeClass::kSemantic,           AttributeClass::kFunctional,
    AttributeClass::kHighLevelCategory,  AttributeClass::kCommonCategory,
    AttributeClass::kComponentAttribute, AttributeClass::kSceneDescription,
    AttributeClass::kContextualClue,
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string_view to_string(AttributeClass c) {
  switch (c) {
    case AttributeClass::kAppearance: return "appearance";
    case AttributeClass::kShape: return "shape";
    case AttributeClass::kRelational: return "relational";
    case AttributeClass::kSpatial: return "spatial";
    case AttributeClass::kSemantic: return "semantic";
    case AttributeClass::kFunctional: return "functional";
    case AttributeClass::kHighLevelCategory: return "high_level_category";
    case AttributeClass::kCommonCategory: return "common_category";
    case AttributeClass::kComponentAttribute: return "component_attribute";
    case AttributeClass::kSceneDescription: return "scene_description";
    case AttributeClass::kContextualClue: return "contextual_clue";
  }
  return "appearance";
}

std::optional<AttributeClass> parse_attribute_class(std::string_view token) {
  for (auto c : kAllClasses) {
    if (to_string(c) == token) return c;
  }
  return std::nullopt;
}

std::span<const AttributeClass> all_attribute_classes() { return kAllClasses; }

std::string_view to_string(SceneDomain d) {
  switch (d) {
    case SceneDomain::kNatural: return "natural";
    case SceneDomain::kRemoteSensing: return "remote_sensing";
    case SceneDomain::kBoth: return "both";
  }
  return "both";
}

std::optional<SceneDomain> parse_scene_domain(std::string_view token) {
  if (token == "natural") return SceneDomain::kNatural;
  if (token == "remote_sensing") return SceneDomain::kRemoteSensing;
  if (token == "both") return SceneDomain::kBoth;
  return std::nullopt;
}

bool domain_matches(SceneDomain snippet_domain, SceneKind scene) {
  if (snippet_domain == SceneDomain::kBoth) return true;
  return (snippet_domain == SceneDomain::kNatural) == (scene == SceneKind::kNatural);
}

std::string snippet_id_for(std::string_view text, AttributeClass c) {
  std::string key = text::collapse_whitespace(text);
  key += '\x1f';
  key += to_string(c);
  return "s" + text::hex64(text::fnv1a64(key));
}

std::vector<Violation> validate(std::span<const SnippetRecord> records) {
  std::vector<Violation> out;
  std::set<std::string> ids;
  std::set<std::pair<std::string, std::string>> pairs;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string text = text::collapse_whitespace(r.text);
    if (text.empty()) out.push_back({i, "snippet " + std::to_string(i) + " has empty text"});
    const auto cls = parse_attribute_class(r.attribute_class);
    if (!cls) {
      out.push_back({i, "snippet " + std::to_string(i) + " has unknown attribute class '" +
                            r.attribute_class + "'"});
    }
    if (!parse_scene_domain(r.scene_domain)) {
      out.push_back({i, "snippet " + std::to_string(i) + " has unknown scene domain '" +
                            r.scene_domain + "'"});
    }
    if (text.empty() || !cls) continue;
    if (!pairs.emplace(text, r.attribute_class).second) {
      out.push_back({i, "duplicate snippet \"" + text + "\" in class " + r.attribute_class});
    }
    const std::string id = r.id.empty() ? snippet_id_for(text, *cls) : r.id;
    if (!ids.insert(id).second) out.push_back({i, "duplicate snippet id '" + id + "'"});
  }
  return out;
}

Codebook::Codebook(std::vector<Snippet> snippets, SceneKind domain)
    : snippets_(std::move(snippets)), domain_(domain) {
  if (snippets_.empty()) throw Error(ErrorCode::kParse, "codebook is empty");
  std::set<std::pair<std::string, AttributeClass>> pairs;
  for (std::size_t i = 0; i < snippets_.size(); ++i) {
    const auto& s = snippets_[i];
    if (s.text.empty()) throw Error(ErrorCode::kParse, "snippet '" + s.snippet_id + "' is empty");
    if (!pairs.emplace(s.text, s.attribute_class).second) {
      throw Error(ErrorCode::kParse, "duplicate snippet \"" + s.text + "\"");
    }
    if (!by_id_.emplace(s.snippet_id, i).second) {
      throw Error(ErrorCode::kParse, "duplicate snippet id '" + s.snippet_id + "'");
    }
  }
}

const Snippet* Codebook::find(std::string_view snippet_id) const {
  const auto it = by_id_.find(snippet_id);
  return it == by_id_.end() ? nullptr : &snippets_[it->second];
}

std::vector<SnippetRecord> parse_codebook_document(std::string_view document) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParse, std::string("codebook is not valid JSON: ") + e.what());
  }
  if (!doc.is_array()) throw Error(ErrorCode::kParse, "codebook document must be a list");
  std::vector<SnippetRecord> out;
  out.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& e = doc[i];
    if (!e.is_object() || !e.contains("text") || !e["text"].is_string() || !e.contains("class") ||
        !e["class"].is_string()) {
      throw Error(ErrorCode::kParse,
                  "codebook entry " + std::to_string(i) + " needs string 'text' and 'class'");
    }
    SnippetRecord r;
    r.text = e["text"].get<std::string>();
    r.attribute_class = e["class"].get<std::string>();
    r.scene_domain = e.value("domain", std::string("both"));
    r.id = e.value("id", std::string());
    out.push_back(std::move(r));
  }
  return out;
}

std::string serialize_codebook(std::span<const Snippet> snippets) {
  json doc = json::array();
  for (const auto& s : snippets) {
    doc.push_back({{"id", s.snippet_id},
                   {"text", s.text},
                   {"class", to_string(s.attribute_class)},
                   {"domain", to_string(s.scene_domain)}});
  }
  return doc.dump(2) + "\n";
}

Codebook codebook_from_records(std::span<const SnippetRecord> records, SceneKind domain) {
  const auto violations = validate(records);
  if (!violations.empty()) throw Error(ErrorCode::kParse, violations.front().message);
  std::vector<Snippet> snippets;
  for (const auto& r : records) {
    const auto cls = *parse_attribute_class(r.attribute_class);
    const auto dom = *parse_scene_domain(r.scene_domain);
    if (!domain_matches(dom, domain)) continue;
    std::string text = text::collapse_whitespace(r.text);
    std::string id = r.id.empty() ? snippet_id_for(text, cls) : r.id;
    snippets.push_back({std::move(id), std::move(text), cls, dom});
  }
  if (snippets.empty()) {
    throw Error(ErrorCode::kParse,
                "no snippets left for scene '" + std::string(to_string(domain)) + "'");
  }
  return Codebook(std::move(snippets), domain);
}

Codebook load_codebook(const std::filesystem::path& path, SceneKind domain) {
  const auto records = parse_codebook_document(read_file(path));
  return codebook_from_records(records, domain);
}

void save_codebook(const std::filesystem::path& path, std::span<const Snippet> snippets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << serialize_codebook(snippets);
}

// ---------------------------------------------------------------------------
// Generation

SnippetPromptBook::SnippetPromptBook(std::map<AttributeClass, std::string> templates)
    : templates_(std::move(templates)) {}

SnippetPromptBook SnippetPromptBook::load(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParse, "snippet prompt file is not valid JSON: " + std::string(e.what()));
  }
  if (!doc.is_object()) throw Error(ErrorCode::kParse, "snippet prompt file must be an object");
  std::map<AttributeClass, std::string> templates;
  for (const auto& [key, value] : doc.items()) {
    const auto cls = parse_attribute_class(key);
    if (!cls) throw Error(ErrorCode::kParse, "unknown attribute class '" + key + "'");
    if (!value.is_string()) throw Error(ErrorCode::kParse, "template for " + key + " is not text");
    templates[*cls] = value.get<std::string>();
  }
  return SnippetPromptBook(std::move(templates));
}

std::string SnippetPromptBook::render(AttributeClass c, SceneDomain domain, int n) const {
  const auto it = templates_.find(c);
  if (it == templates_.end()) {
    throw Error(ErrorCode::kConfig,
                "no generation prompt for class '" + std::string(to_string(c)) + "'");
  }
  std::string scene = domain == SceneDomain::kRemoteSensing ? "remote sensing imagery"
                      : domain == SceneDomain::kNatural     ? "natural scene photographs"
                                                            : "natural and remote sensing images";
  std::string out = it->second;
  auto replace_all = [&out](std::string_view key, const std::string& value) {
    std::size_t pos = 0;
    while ((pos = out.find(key, pos)) != std::string::npos) {
      out.replace(pos, key.size(), value);
      pos += value.size();
    }
  };
  replace_all("{n}", std::to_string(n));
  replace_all("{attribute_class}", std::string(to_string(c)));
  replace_all("{scene}", scene);
  return out;
}

GeneratedSnippets generate_snippets(ChatClient& client, const ChatConfig& cfg,
                                    const SnippetPromptBook& prompts, AttributeClass c,
                                    SceneDomain domain, int n) {
  if (n < 1) throw Error(ErrorCode::kInvalidArgument, "snippet count must be positive");
  const std::array<ChatMessage, 1> messages = {ChatMessage{"user", prompts.render(c, domain, n)}};
  const std::string raw = chat(client, messages, cfg);

  static const std::regex list_marker(R"(^\s*(?:[-*•]|\d+[.)])\s*)");
  GeneratedSnippets out;
  for (const auto& line : text::split_lines(raw)) {
    if (static_cast<int>(out.snippets.size()) >= n) break;
    std::string phrase = text::collapse_whitespace(std::regex_replace(line, list_marker, ""));
    if (phrase.empty()) continue;
    out.snippets.push_back({snippet_id_for(phrase, c), phrase, c, domain});
  }
  if (out.snippets.empty()) {
    out.warnings.push_back("model returned no usable phrases for class '" +
                           std::string(to_string(c)) + "'");
  }
  return out;
}

}  // namespace gwvlm
