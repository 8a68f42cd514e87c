#pragma once

// Contextual concept prompts: scenario, spatial structure, main-object
// evidence and zoom context rendered from a placeholder template.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gwvlm/codebook.hpp"
#include "gwvlm/embedding.hpp"
#include "gwvlm/geometry.hpp"

namespace gwvlm {

// Section markers every shipped template carries, in this order.
inline constexpr std::string_view kSectionScenario = "## Scenario";
inline constexpr std::string_view kSectionSpatial = "## Spatial structure";
inline constexpr std::string_view kSectionMain = "## Main object";
inline constexpr std::string_view kSectionContext = "## Context";

inline constexpr std::string_view kUnknownSentinel = "unknown";

struct SpatialInfo {
  double width = 0.0;
  double height = 0.0;
  double aspect_ratio = 1.0;
  double area_fraction = 0.0;
  SizeLevel size_level = SizeLevel::kSmall;
  std::optional<double> resolution;
  std::optional<std::pair<double, double>> physical_size;  // meters
};

SpatialInfo compute_spatial_info(const BBox& b, const ImageMeta& meta, const SizeClass& size);

struct Evidence {
  std::string text;
  AttributeClass attribute_class = AttributeClass::kAppearance;
  double similarity = 0.0;
};

struct ZoomSection {
  double factor = 1.0;
  std::vector<Evidence> items;
};

struct PromptContext {
  SceneKind scene_kind = SceneKind::kNatural;
  std::string scenario_text;
  SpatialInfo spatial;
  std::vector<Evidence> main_snippets;
  std::vector<ZoomSection> zoom_in_sections;
  std::vector<ZoomSection> zoom_out_sections;
  std::optional<std::vector<std::string>> vocabulary_hint;
  bool show_similarity = true;
};

std::string default_scenario(SceneKind kind);

// Resolves snippet ids through the codebook; zoom sections follow plan order.
PromptContext context_from_matches(const ScaleMatches& matches, const Codebook& codebook,
                                   const SpatialInfo& spatial, SceneKind kind,
                                   std::string scenario_text);

// Names accepted inside {braces}; "{{" and "}}" are literal braces.
std::span<const std::string_view> placeholder_catalogue();

class PromptTemplate {
 public:
  // Throws kParse naming the first unknown placeholder or stray brace.
  static PromptTemplate parse(std::string template_id, SceneKind kind, std::string body);

  const std::string& template_id() const noexcept { return template_id_; }
  SceneKind scene_kind() const noexcept { return scene_kind_; }
  const std::string& body() const noexcept { return body_; }
  const std::vector<std::string>& placeholders() const noexcept { return placeholders_; }

 private:
  struct Piece {
    bool placeholder = false;
    std::string text;
  };

  PromptTemplate() = default;
  friend std::string render_prompt(const PromptTemplate&, const PromptContext&);

  std::string template_id_;
  SceneKind scene_kind_ = SceneKind::kNatural;
  std::string body_;
  std::vector<std::string> placeholders_;
  std::vector<Piece> pieces_;
};

// Parses the file and additionally requires the four section markers in
// order, the game framing, and the "Category:" answer instruction.
PromptTemplate load_template(const std::filesystem::path& path, SceneKind kind);

// Snippet lists render one "text (class, 0.812)" entry per line.
std::string render_prompt(const PromptTemplate& t, const PromptContext& ctx);

std::string render_evidence(const Evidence& e, bool show_similarity);

}  // namespace gwvlm
