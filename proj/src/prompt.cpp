#include "gwvlm/prompt.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>

#include "gwvlm/error.hpp"
#include "text_util.hpp"

namespace gwvlm {

namespace {

constexpr std::array<std::string_view, 15> kPlaceholders = {
    "scene_kind",     "scenario",       "bbox_width",      "bbox_height",
    "aspect_ratio",   "area_fraction",  "area_percent",    "size_level",
    "resolution",     "physical_width", "physical_height", "main_snippets",
    "zoom_in_context", "zoom_out_context", "vocabulary_hint",
};

std::string render_list(const std::vector<Evidence>& items, bool show_similarity) {
  std::vector<std::string> lines;
  lines.reserve(items.size());
  for (const auto& e : items) lines.push_back(render_evidence(e, show_similarity));
  return text::join(lines, "\n");
}

std::string render_sections(const std::vector<ZoomSection>& sections, std::string_view label,
                            bool show_similarity) {
  if (sections.empty()) return "(no " + std::string(label) + " views)";
  std::vector<std::string> blocks;
  for (const auto& s : sections) {
    blocks.push_back("[" + std::string(label) + " " + format_g(s.factor) + "x]\n" +
                     render_list(s.items, show_similarity));
  }
  return text::join(blocks, "\n");
}

std::string value_for(const std::string& name, const PromptContext& ctx) {
  const auto& sp = ctx.spatial;
  if (name == "scene_kind") {
    return ctx.scene_kind == SceneKind::kNatural ? "natural scene" : "remote sensing";
  }
  if (name == "scenario") return ctx.scenario_text;
  if (name == "bbox_width") return text::fixed(sp.width, 1);
  if (name == "bbox_height") return text::fixed(sp.height, 1);
  if (name == "aspect_ratio") return text::fixed(sp.aspect_ratio, 2);
  if (name == "area_fraction") return text::fixed(sp.area_fraction, 4);
  if (name == "area_percent") return text::fixed(sp.area_fraction * 100.0, 2) + "%";
  if (name == "size_level") return std::string(to_string(sp.size_level));
  if (name == "resolution") {
    return sp.resolution ? format_g(*sp.resolution) + " m/pixel" : std::string(kUnknownSentinel);
  }
  if (name == "physical_width") {
    return sp.physical_size ? text::fixed(sp.physical_size->first, 1) + " m"
                            : std::string(kUnknownSentinel);
  }
  if (name == "physical_height") {
    return sp.physical_size ? text::fixed(sp.physical_size->second, 1) + " m"
                            : std::string(kUnknownSentinel);
  }
  if (name == "main_snippets") {
    if (ctx.main_snippets.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "prompt context is missing main_snippets");
    }
    return render_list(ctx.main_snippets, ctx.show_similarity);
  }
  if (name == "zoom_in_context") return render_sections(ctx.zoom_in_sections, "zoom-in", ctx.show_similarity);
  if (name == "zoom_out_context") {
    return render_sections(ctx.zoom_out_sections, "zoom-out", ctx.show_similarity);
  }
  if (name == "vocabulary_hint") {
    if (!ctx.vocabulary_hint) {
      return "Any category name is allowed; answer with the most specific common name.";
    }
    return "Choose exactly one of these categories: " + text::join(*ctx.vocabulary_hint, ", ") + ".";
  }
  throw Error(ErrorCode::kInvalidArgument, "no value for placeholder {" + name + "}");
}

}  // namespace

std::span<const std::string_view> placeholder_catalogue() { return kPlaceholders; }

SpatialInfo compute_spatial_info(const BBox& b, const ImageMeta& meta, const SizeClass& size) {
  SpatialInfo s;
  s.width = b.width();
  s.height = b.height();
  s.aspect_ratio = s.width / s.height;
  s.area_fraction = size.area_fraction;
  s.size_level = size.level;
  s.resolution = meta.resolution;
  if (meta.resolution) s.physical_size = std::pair{s.width * *meta.resolution, s.height * *meta.resolution};
  return s;
}

std::string default_scenario(SceneKind kind) {
  if (kind == SceneKind::kRemoteSensing) {
    return "You are looking straight down at an overhead remote sensing image. A region "
           "proposal has marked one object; its apparent size depends on the ground "
           "resolution, so use the metric size cues below.";
  }
  return "You are looking at an everyday photograph. A region proposal has marked one "
         "object; people, furniture, vehicles and other objects around it give context.";
}

PromptContext context_from_matches(const ScaleMatches& matches, const Codebook& codebook,
                                   const SpatialInfo& spatial, SceneKind kind,
                                   std::string scenario_text) {
  auto resolve = [&codebook](const std::vector<SnippetMatch>& list) {
    std::vector<Evidence> out;
    out.reserve(list.size());
    for (const auto& m : list) {
      const Snippet* s = codebook.find(m.snippet_id);
      if (s == nullptr) {
        throw Error(ErrorCode::kInvalidArgument, "match refers to unknown snippet '" + m.snippet_id + "'");
      }
      out.push_back({s->text, s->attribute_class, m.similarity});
    }
    return out;
  };

  PromptContext ctx;
  ctx.scene_kind = kind;
  ctx.scenario_text = std::move(scenario_text);
  ctx.spatial = spatial;
  for (const auto& list : matches.per_role) {
    switch (list.entry.role) {
      case ScaleRole::kPrimary: ctx.main_snippets = resolve(list.matches); break;
      case ScaleRole::kZoomIn:
        ctx.zoom_in_sections.push_back({list.entry.factor, resolve(list.matches)});
        break;
      case ScaleRole::kZoomOut:
        ctx.zoom_out_sections.push_back({list.entry.factor, resolve(list.matches)});
        break;
    }
  }
  return ctx;
}

std::string render_evidence(const Evidence& e, bool show_similarity) {
  std::string out = e.text + " (" + std::string(to_string(e.attribute_class));
  if (show_similarity) out += ", " + text::fixed(e.similarity, 3);
  return out + ")";
}

PromptTemplate PromptTemplate::parse(std::string template_id, SceneKind kind, std::string body) {
  PromptTemplate t;
  t.template_id_ = std::move(template_id);
  t.scene_kind_ = kind;
  t.body_ = std::move(body);

  std::string literal;
  const std::string& b = t.body_;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const char c = b[i];
    if (c == '{' && i + 1 < b.size() && b[i + 1] == '{') {
      literal.push_back('{');
      ++i;
    } else if (c == '}' && i + 1 < b.size() && b[i + 1] == '}') {
      literal.push_back('}');
      ++i;
    } else if (c == '{') {
      const auto close = b.find('}', i);
      if (close == std::string::npos) {
        throw Error(ErrorCode::kParse, "unclosed placeholder in template '" + t.template_id_ + "'");
      }
      std::string name = b.substr(i + 1, close - i - 1);
      if (std::find(kPlaceholders.begin(), kPlaceholders.end(), name) == kPlaceholders.end()) {
        throw Error(ErrorCode::kParse,
                    "unknown placeholder {" + name + "} in template '" + t.template_id_ + "'");
      }
      if (!literal.empty()) t.pieces_.push_back({false, std::move(literal)});
      literal.clear();
      t.pieces_.push_back({true, name});
      if (std::find(t.placeholders_.begin(), t.placeholders_.end(), name) == t.placeholders_.end()) {
        t.placeholders_.push_back(name);
      }
      i = close;
    } else if (c == '}') {
      throw Error(ErrorCode::kParse, "stray '}' in template '" + t.template_id_ + "'");
    } else {
      literal.push_back(c);
    }
  }
  if (!literal.empty()) t.pieces_.push_back({false, std::move(literal)});
  return t;
}

PromptTemplate load_template(const std::filesystem::path& path, SceneKind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open template " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  auto t = PromptTemplate::parse(path.stem().string(), kind, ss.str());

  const std::string& body = t.body();
  std::size_t last = 0;
  for (auto marker : {kSectionScenario, kSectionSpatial, kSectionMain, kSectionContext}) {
    const auto pos = body.find(marker, last);
    if (pos == std::string::npos) {
      throw Error(ErrorCode::kParse, "template " + path.string() + " lacks section '" +
                                         std::string(marker) + "' in the expected order");
    }
    last = pos + marker.size();
  }
  if (text::to_lower(body).find("guess what") == std::string::npos) {
    throw Error(ErrorCode::kParse, "template " + path.string() + " lacks the guess-what framing");
  }
  if (body.find("Category:") == std::string::npos) {
    throw Error(ErrorCode::kParse, "template " + path.string() + " lacks the Category: instruction");
  }
  return t;
}

std::string render_prompt(const PromptTemplate& t, const PromptContext& ctx) {
  if (t.scene_kind() != ctx.scene_kind) {
    throw Error(ErrorCode::kInvalidArgument,
                "template '" + t.template_id() + "' is for " + std::string(to_string(t.scene_kind())) +
                    " scenes but the context is " + std::string(to_string(ctx.scene_kind)));
  }
  std::string out;
  for (const auto& piece : t.pieces_) out += piece.placeholder ? value_for(piece.text, ctx) : piece.text;
  return out;
}

}  // namespace gwvlm
