#pragma once

// Box arithmetic, class-agnostic proposal fusion, and multi-scale crop
// planning. Everything here is a pure function over values.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gwvlm {

enum class SceneKind { kNatural, kRemoteSensing };

std::string_view to_string(SceneKind kind);
SceneKind parse_scene_kind(std::string_view text);

// Axis-aligned box in continuous pixel coordinates. Construction rejects
// degenerate extents, non-finite coordinates and scores outside [0, 1].
class BBox {
 public:
  BBox(double x1, double y1, double x2, double y2, double score = 1.0,
       std::string source = {}, std::string image_id = {});

  double x1() const noexcept { return x1_; }
  double y1() const noexcept { return y1_; }
  double x2() const noexcept { return x2_; }
  double y2() const noexcept { return y2_; }
  double width() const noexcept { return x2_ - x1_; }
  double height() const noexcept { return y2_ - y1_; }
  double score() const noexcept { return score_; }
  const std::string& source() const noexcept { return source_; }
  const std::string& image_id() const noexcept { return image_id_; }

  // Copy with new corners; score, source and image_id carry over.
  BBox with_extent(double x1, double y1, double x2, double y2) const;
  BBox with_score(double score) const;
  BBox with_source(std::string source) const;

  bool same_extent(const BBox& other) const noexcept {
    return x1_ == other.x1_ && y1_ == other.y1_ && x2_ == other.x2_ && y2_ == other.y2_;
  }

  friend bool operator==(const BBox&, const BBox&) = default;

 private:
  double x1_, y1_, x2_, y2_;
  double score_;
  std::string source_;
  std::string image_id_;
};

struct ImageMeta {
  std::string image_id;
  int width = 0;
  int height = 0;
  SceneKind scene_kind = SceneKind::kNatural;
  std::optional<double> resolution;  // meters per pixel, remote sensing only

  void validate() const;
  double pixel_area() const noexcept { return static_cast<double>(width) * height; }
};

enum class SizeLevel { kSmall, kMedium, kLarge };

std::string_view to_string(SizeLevel level);

struct SizeClass {
  SizeLevel level = SizeLevel::kSmall;
  double area_fraction = 0.0;
};

// A fraction below small_below is small, above large_above is large, and
// everything in between (boundaries included) is medium.
struct SizeThresholds {
  double small_below = 0.01;
  double large_above = 0.10;
};

struct SizeThresholdTable {
  SizeThresholds natural{0.01, 0.10};
  SizeThresholds remote_sensing{0.001, 0.02};

  const SizeThresholds& for_scene(SceneKind kind) const noexcept {
    return kind == SceneKind::kNatural ? natural : remote_sensing;
  }
};

SizeLevel size_level_for(double area_fraction, const SizeThresholds& thresholds);

enum class ScaleRole { kPrimary, kZoomIn, kZoomOut };

std::string_view to_string(ScaleRole role);
ScaleRole parse_scale_role(std::string_view text);

struct ScaleEntry {
  ScaleRole role = ScaleRole::kPrimary;
  double factor = 1.0;

  friend bool operator==(const ScaleEntry&, const ScaleEntry&) = default;
};

// Ordered views to search for one object: the primary view first, then
// zoom-ins (factor < 1) and zoom-outs (factor > 1) in configured order.
class ScalePlan {
 public:
  explicit ScalePlan(std::vector<ScaleEntry> entries);

  static ScalePlan primary_only() { return ScalePlan({{ScaleRole::kPrimary, 1.0}}); }

  const std::vector<ScaleEntry>& entries() const noexcept { return entries_; }
  std::size_t count(ScaleRole role) const noexcept;

 private:
  std::vector<ScaleEntry> entries_;
};

struct ScaleFactors {
  std::vector<double> zoom_in;
  std::vector<double> zoom_out;
};

// Zoom factor table keyed by (scene kind, size level).
class ScaleTable {
 public:
  static ScaleTable defaults();

  void set(SceneKind kind, SizeLevel level, ScaleFactors factors);
  const ScaleFactors* find(SceneKind kind, SizeLevel level) const;

 private:
  std::map<std::pair<SceneKind, SizeLevel>, ScaleFactors> table_;
};

struct CropSpec {
  BBox bbox;
  ScaleRole role = ScaleRole::kPrimary;
  double factor = 1.0;
  std::string crop_id;
};

struct ProposalSet {
  std::string source;
  std::vector<BBox> boxes;
};

struct MergeOptions {
  double iou_threshold = 0.5;
  // Per-source min-max rescaling of scores before suppression.
  bool calibrate_scores = false;
};

double area(const BBox& b) noexcept;

// Touching edges do not intersect.
double iou(const BBox& a, const BBox& b) noexcept;

BBox clip_to_image(const BBox& b, const ImageMeta& meta);

// Descending score, then source, then corner coordinates.
bool score_order(const BBox& a, const BBox& b) noexcept;

// Greedy suppression. Output is in score_order. A box is dropped when its IoU
// with an already kept box is strictly greater than iou_threshold.
std::vector<BBox> nms(std::vector<BBox> boxes, double iou_threshold);

// Concatenates all sets (each box relabelled with its set's source) and
// suppresses duplicates with nms.
std::vector<BBox> merge_proposals(std::span<const ProposalSet> sets, const MergeOptions& options);

SizeClass classify_size(const BBox& b, const ImageMeta& meta, const SizeThresholdTable& thresholds);

ScalePlan plan_scales(const SizeClass& size, SceneKind kind, const ScaleTable& table);

// Scales width and height about the box center, then clips to the image.
BBox scale_box(const BBox& b, double factor, const ImageMeta& meta);

std::string make_crop_id(const std::string& image_id, const BBox& anchor, ScaleRole role,
                         double factor);

std::vector<CropSpec> make_crops(const BBox& anchor, const ScalePlan& plan, const ImageMeta& meta);

// printf("%g") rendering, shared by crop ids and report writers.
std::string format_g(double value);

}  // namespace gwvlm
