#include "gwvlm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <tuple>

#include "gwvlm/error.hpp"

namespace gwvlm {

std::string_view to_string(SceneKind kind) {
  return kind == SceneKind::kNatural ? "natural" : "remote_sensing";
}

SceneKind parse_scene_kind(std::string_view text) {
  if (text == "natural") return SceneKind::kNatural;
  if (text == "remote_sensing") return SceneKind::kRemoteSensing;
  throw Error(ErrorCode::kInvalidArgument, "unknown scene kind '" + std::string(text) + "'");
}

std::string_view to_string(SizeLevel level) {
  switch (level) {
    case SizeLevel::kSmall: return "small";
    case SizeLevel::kMedium: return "medium";
    case SizeLevel::kLarge: return "large";
  }
  return "medium";
}

std::string_view to_string(ScaleRole role) {
  switch (role) {
    case ScaleRole::kPrimary: return "primary";
    case ScaleRole::kZoomIn: return "zoom_in";
    case ScaleRole::kZoomOut: return "zoom_out";
  }
  return "primary";
}

ScaleRole parse_scale_role(std::string_view text) {
  if (text == "primary") return ScaleRole::kPrimary;
  if (text == "zoom_in") return ScaleRole::kZoomIn;
  if (text == "zoom_out") return ScaleRole::kZoomOut;
  throw Error(ErrorCode::kInvalidArgument, "unknown scale role '" + std::string(text) + "'");
}

std::string format_g(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", value);
  return buf;
}

// ---------------------------------------------------------------------------
// BBox

BBox::BBox(double x1, double y1, double x2, double y2, double score, std::string source,
           std::string image_id)
    : x1_(x1), y1_(y1), x2_(x2), y2_(y2), score_(score), source_(std::move(source)),
      image_id_(std::move(image_id)) {
  if (!std::isfinite(x1) || !std::isfinite(y1) || !std::isfinite(x2) || !std::isfinite(y2)) {
    throw Error(ErrorCode::kInvalidArgument, "box coordinates must be finite");
  }
  if (!(x1 < x2) || !(y1 < y2)) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "degenerate box [%g,%g,%g,%g]", x1, y1, x2, y2);
    throw Error(ErrorCode::kInvalidArgument, buf);
  }
  if (!(score >= 0.0 && score <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "box score " + format_g(score) + " outside [0,1]");
  }
}

BBox BBox::with_extent(double x1, double y1, double x2, double y2) const {
  return BBox(x1, y1, x2, y2, score_, source_, image_id_);
}

BBox BBox::with_score(double score) const {
  return BBox(x1_, y1_, x2_, y2_, score, source_, image_id_);
}

BBox BBox::with_source(std::string source) const {
  return BBox(x1_, y1_, x2_, y2_, score_, std::move(source), image_id_);
}

void ImageMeta::validate() const {
  if (width <= 0 || height <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "image '" + image_id + "' has non-positive size");
  }
  if (resolution && !(*resolution > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "image '" + image_id + "' has non-positive resolution");
  }
}

// ---------------------------------------------------------------------------
// Scale plans

ScalePlan::ScalePlan(std::vector<ScaleEntry> entries) : entries_(std::move(entries)) {
  std::size_t primaries = 0;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (!(e.factor > 0.0) || !std::isfinite(e.factor)) {
      throw Error(ErrorCode::kConfig, "scale factor must be positive");
    }
    switch (e.role) {
      case ScaleRole::kPrimary:
        if (e.factor != 1.0) throw Error(ErrorCode::kConfig, "primary view must have factor 1.0");
        ++primaries;
        break;
      case ScaleRole::kZoomIn:
        if (!(e.factor < 1.0)) {
          throw Error(ErrorCode::kConfig, "zoom-in factor " + format_g(e.factor) + " must be < 1");
        }
        break;
      case ScaleRole::kZoomOut:
        if (!(e.factor > 1.0)) {
          throw Error(ErrorCode::kConfig, "zoom-out factor " + format_g(e.factor) + " must be > 1");
        }
        break;
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (entries_[j] == e) {
        throw Error(ErrorCode::kConfig, "duplicate scale entry " + std::string(to_string(e.role)) +
                                            "@" + format_g(e.factor));
      }
    }
  }
  if (primaries != 1) throw Error(ErrorCode::kConfig, "scale plan needs exactly one primary view");
}

std::size_t ScalePlan::count(ScaleRole role) const noexcept {
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(), [role](const ScaleEntry& e) { return e.role == role; }));
}

ScaleTable ScaleTable::defaults() {
  ScaleTable t;
  t.set(SceneKind::kNatural, SizeLevel::kSmall, {{0.6, 0.8}, {3.0}});
  t.set(SceneKind::kNatural, SizeLevel::kMedium, {{0.5, 0.75}, {2.0}});
  t.set(SceneKind::kNatural, SizeLevel::kLarge, {{0.4, 0.6}, {1.5}});
  t.set(SceneKind::kRemoteSensing, SizeLevel::kSmall, {{0.5, 0.7}, {2.0, 4.0, 8.0}});
  t.set(SceneKind::kRemoteSensing, SizeLevel::kMedium, {{0.5, 0.7, 0.9}, {1.5, 2.5, 4.0}});
  t.set(SceneKind::kRemoteSensing, SizeLevel::kLarge, {{0.4, 0.6, 0.8}, {1.3, 1.8}});
  return t;
}

void ScaleTable::set(SceneKind kind, SizeLevel level, ScaleFactors factors) {
  table_[{kind, level}] = std::move(factors);
}

const ScaleFactors* ScaleTable::find(SceneKind kind, SizeLevel level) const {
  auto it = table_.find({kind, level});
  return it == table_.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------------------
// Box operations

double area(const BBox& b) noexcept { return b.width() * b.height(); }

double iou(const BBox& a, const BBox& b) noexcept {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = area(a) + area(b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

BBox clip_to_image(const BBox& b, const ImageMeta& meta) {
  const double w = meta.width;
  const double h = meta.height;
  const double x1 = std::clamp(b.x1(), 0.0, w);
  const double y1 = std::clamp(b.y1(), 0.0, h);
  const double x2 = std::clamp(b.x2(), 0.0, w);
  const double y2 = std::clamp(b.y2(), 0.0, h);
  if (!(x1 < x2) || !(y1 < y2)) {
    throw Error(ErrorCode::kInvalidArgument,
                "box lies entirely outside image '" + meta.image_id + "'");
  }
  return b.with_extent(x1, y1, x2, y2);
}

bool score_order(const BBox& a, const BBox& b) noexcept {
  if (a.score() != b.score()) return a.score() > b.score();
  if (a.source() != b.source()) return a.source() < b.source();
  return std::tuple(a.x1(), a.y1(), a.x2(), a.y2()) < std::tuple(b.x1(), b.y1(), b.x2(), b.y2());
}

std::vector<BBox> nms(std::vector<BBox> boxes, double iou_threshold) {
  if (boxes.empty()) return boxes;
  for (const auto& b : boxes) {
    if (b.image_id() != boxes.front().image_id()) {
      throw Error(ErrorCode::kInvalidArgument, "nms input mixes images '" +
                                                   boxes.front().image_id() + "' and '" +
                                                   b.image_id() + "'");
    }
  }
  std::stable_sort(boxes.begin(), boxes.end(), score_order);

  std::vector<BBox> kept;
  kept.reserve(boxes.size());
  for (auto& candidate : boxes) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const BBox& k) {
      return iou(candidate, k) > iou_threshold;
    });
    if (!suppressed) kept.push_back(std::move(candidate));
  }
  return kept;
}

namespace {

std::vector<BBox> calibrated(const ProposalSet& set) {
  std::vector<BBox> out;
  out.reserve(set.boxes.size());
  if (set.boxes.empty()) return out;
  auto [lo, hi] = std::minmax_element(
      set.boxes.begin(), set.boxes.end(),
      [](const BBox& a, const BBox& b) { return a.score() < b.score(); });
  const double min_score = lo->score();
  const double range = hi->score() - min_score;
  for (const auto& b : set.boxes) {
    // A source that reports a single score value is left untouched.
    const double s = range > 0.0 ? (b.score() - min_score) / range : b.score();
    out.push_back(b.with_score(s));
  }
  return out;
}

}  // namespace

std::vector<BBox> merge_proposals(std::span<const ProposalSet> sets, const MergeOptions& options) {
  std::vector<BBox> all;
  for (const auto& set : sets) {
    auto boxes = options.calibrate_scores ? calibrated(set) : set.boxes;
    for (auto& b : boxes) all.push_back(b.with_source(set.source));
  }
  return nms(std::move(all), options.iou_threshold);
}

SizeLevel size_level_for(double area_fraction, const SizeThresholds& thresholds) {
  if (area_fraction < thresholds.small_below) return SizeLevel::kSmall;
  if (area_fraction > thresholds.large_above) return SizeLevel::kLarge;
  return SizeLevel::kMedium;
}

SizeClass classify_size(const BBox& b, const ImageMeta& meta, const SizeThresholdTable& thresholds) {
  const double fraction = std::min(1.0, area(b) / meta.pixel_area());
  return {size_level_for(fraction, thresholds.for_scene(meta.scene_kind)), fraction};
}

ScalePlan plan_scales(const SizeClass& size, SceneKind kind, const ScaleTable& table) {
  const ScaleFactors* factors = table.find(kind, size.level);
  const std::string where =
      std::string(to_string(kind)) + "/" + std::string(to_string(size.level));
  if (factors == nullptr) throw Error(ErrorCode::kConfig, "no scale factors for " + where);
  if (factors->zoom_in.empty() || factors->zoom_out.empty()) {
    throw Error(ErrorCode::kConfig, "empty zoom factor list for " + where);
  }
  const std::size_t n_in = factors->zoom_in.size();
  const std::size_t n_out = factors->zoom_out.size();
  if (kind == SceneKind::kNatural && (n_in != 2 || n_out != 1)) {
    throw Error(ErrorCode::kConfig,
                "natural scale plans take two zoom-in and one zoom-out factor (" + where + ")");
  }
  if (kind == SceneKind::kRemoteSensing && (n_in < 2 || n_in > 3 || n_out < 2 || n_out > 3)) {
    throw Error(ErrorCode::kConfig,
                "remote-sensing scale plans take two to three factors per zoom direction (" +
                    where + ")");
  }

  std::vector<ScaleEntry> entries{{ScaleRole::kPrimary, 1.0}};
  for (double f : factors->zoom_in) entries.push_back({ScaleRole::kZoomIn, f});
  for (double f : factors->zoom_out) entries.push_back({ScaleRole::kZoomOut, f});
  return ScalePlan(std::move(entries));
}

BBox scale_box(const BBox& b, double factor, const ImageMeta& meta) {
  if (!(factor > 0.0) || !std::isfinite(factor)) {
    throw Error(ErrorCode::kInvalidArgument, "scale factor must be positive");
  }
  const double cx = (b.x1() + b.x2()) / 2.0;
  const double cy = (b.y1() + b.y2()) / 2.0;
  const double hw = b.width() / 2.0 * factor;
  const double hh = b.height() / 2.0 * factor;
  const double x1 = std::clamp(cx - hw, 0.0, static_cast<double>(meta.width));
  const double y1 = std::clamp(cy - hh, 0.0, static_cast<double>(meta.height));
  const double x2 = std::clamp(cx + hw, 0.0, static_cast<double>(meta.width));
  const double y2 = std::clamp(cy + hh, 0.0, static_cast<double>(meta.height));
  if (!(x1 < x2) || !(y1 < y2)) {
    throw Error(ErrorCode::kInvalidArgument,
                "box scaled by " + format_g(factor) + " has no area inside the image");
  }
  return b.with_extent(x1, y1, x2, y2);
}

std::string make_crop_id(const std::string& image_id, const BBox& anchor, ScaleRole role,
                         double factor) {
  std::string id = image_id;
  id += '/';
  id += format_g(anchor.x1()) + ',' + format_g(anchor.y1()) + ',' + format_g(anchor.x2()) + ',' +
        format_g(anchor.y2());
  id += '/';
  id += to_string(role);
  id += '@';
  id += format_g(factor);
  return id;
}

std::vector<CropSpec> make_crops(const BBox& anchor, const ScalePlan& plan, const ImageMeta& meta) {
  std::vector<CropSpec> crops;
  crops.reserve(plan.entries().size());
  for (const auto& entry : plan.entries()) {
    BBox scaled = scale_box(anchor, entry.factor, meta);
    const bool duplicate = std::any_of(crops.begin(), crops.end(), [&](const CropSpec& c) {
      return c.bbox.same_extent(scaled);
    });
    if (duplicate) continue;
    crops.push_back({std::move(scaled), entry.role, entry.factor,
                     make_crop_id(meta.image_id, anchor, entry.role, entry.factor)});
  }
  return crops;
}

}  // namespace gwvlm
