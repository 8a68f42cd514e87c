#pragma once

// Re-projection of free-form answers onto a fixed vocabulary, detection
// matching, P/R/F1 at IoU thresholds, P-R curves and prompt-swap scoring.

#include <filesystem>
#include <functional>
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
class EmbeddingProvider;

inline constexpr std::string_view kUnknownCategory = "unknown";

// Lowercase, trim, collapse whitespace, ASCII hyphens to spaces, strip
// leading articles and terminal punctuation.
std::string normalize_label(std::string_view s);

class Vocabulary {
 public:
  // synonyms: alias -> canonical. Throws kConfig on duplicate canonicals or
  // synonyms pointing at unknown categories.
  explicit Vocabulary(std::vector<std::string> categories,
                      std::map<std::string, std::string> synonyms = {});

  // {"categories": [...], "synonyms": {"alias": "canonical"}}
  static Vocabulary load(const std::filesystem::path& path);

  const std::vector<std::string>& categories() const noexcept { return categories_; }
  const std::map<std::string, std::string>& synonyms() const noexcept { return synonyms_; }
  bool contains(std::string_view canonical) const;
  std::size_t index_of(std::string_view canonical) const;

  // Canonical name for a normalized canonical or synonym.
  std::optional<std::string> lookup(std::string_view normalized) const;
  // Normalized term -> canonical, canonicals and synonyms together.
  const std::map<std::string, std::string, std::less<>>& terms() const noexcept { return terms_; }

 private:
  std::vector<std::string> categories_;
  std::map<std::string, std::string> synonyms_;
  std::map<std::string, std::string, std::less<>> terms_;
};

// Returns a canonical category for an answer the rule chain could not place.
using FallbackMapper = std::function<std::optional<std::string>(std::string_view normalized)>;

// Exact normalized match, then synonym, then whole-word containment of
// exactly one category, then the optional fallback; "unknown" otherwise.
std::string map_answer(std::string_view raw, const Vocabulary& vocab,
                       const FallbackMapper& fallback = {});

// Nearest category name by text embedding, accepted above a cosine floor.
// Category names are embedded once at construction with id "label:<name>".
FallbackMapper embedding_fallback(EmbeddingProvider& provider, const Vocabulary& vocab,
                                  double floor = 0.85);

struct SwapSet {
  std::string set_id;
  std::vector<std::string> aliases;  // aligned with Vocabulary::categories()

  const std::string& alias_of(const Vocabulary& vocab, std::string_view canonical) const;
  // Canonical for an alias; kUnknownCategory passes through.
  std::string canonical_of(const Vocabulary& vocab, std::string_view alias) const;
};

// Checks the alias map is a bijection onto the vocabulary with every alias
// textually different from its canonical.
SwapSet build_swap_vocab(const Vocabulary& vocab, std::string set_id,
                         const std::map<std::string, std::string>& aliases);

// {"set_id": "...", "aliases": {"canonical": "alias", ...}}
SwapSet load_swap_set(const std::filesystem::path& path, const Vocabulary& vocab);
void save_swap_set(const std::filesystem::path& path, const Vocabulary& vocab, const SwapSet& swap);

// Asks the model for one "canonical: alias" line per category.
SwapSet generate_swap_set(ChatClient& client, const ChatConfig& cfg, const Vocabulary& vocab,
                          std::string set_id);

// The aliases as categories, without synonyms.
Vocabulary alias_vocabulary(const Vocabulary& vocab, const SwapSet& swap);

struct Detection {
  BBox bbox;
  std::string category;
  std::string category_raw;
  double score = 0.0;
};

struct GroundTruth {
  std::string image_id;
  BBox bbox;
  std::string category;
};

struct MatchPair {
  std::size_t detection = 0;
  std::size_t ground_truth = 0;
  double iou = 0.0;
};

struct MatchResult {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::vector<MatchPair> matches;
  std::vector<bool> detection_is_tp;  // indexed like the input detections
};

// Descending score, then image id, then coordinates.
std::vector<std::size_t> detection_order(std::span<const Detection> dets);

// Greedy one-to-one matching in detection_order: each detection takes the
// unmatched same-image ground truth (same category when class_aware) with the
// highest IoU >= iou_thr. "unknown" never matches when class_aware.
MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                             double iou_thr, bool class_aware = true);

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

double f1_score(double precision, double recall);
PRF precision_recall_f1(std::size_t tp, std::size_t fp, std::size_t fn);

struct ThresholdMetrics {
  double iou_threshold = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
  PRF prf;
};

struct MetricsReport {
  std::vector<ThresholdMetrics> per_threshold;
  PRF miou;
  std::size_t detections = 0;
  std::size_t ground_truths = 0;
};

std::vector<double> default_report_thresholds();
// 0.50, 0.55, ..., 0.95
std::vector<double> default_miou_sweep();

MetricsReport compute_report(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                             std::span<const double> thresholds, std::span<const double> sweep,
                             bool class_aware = true);

struct PrPoint {
  double score = 0.0;
  double recall = 0.0;
  double precision = 0.0;
};

// One point per distinct detection score, descending.
std::vector<PrPoint> pr_curve(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                              double iou_thr, bool class_aware = true);

struct SwapReport {
  std::vector<std::pair<std::string, double>> f1_by_set;  // F1@0.5 as a fraction
  double average = 0.0;
};

// Detections per set must already be re-mapped to canonical categories. Sets
// without results score 0; results for a set not listed in `swaps` are an error.
SwapReport prompt_swap_eval(const std::map<std::string, std::vector<Detection>>& results_by_set,
                            std::span<const GroundTruth> gts, std::span<const SwapSet> swaps);

// Half-up rounding to the given number of decimals.
double round_half_up(double value, int decimals);
// 0.7850 -> "78.50"
std::string percent(double fraction);

// Report emitters.
std::string metrics_json(const MetricsReport& report);
std::string metrics_table(const MetricsReport& report);
std::string swap_table(const SwapReport& report);
std::string swap_json(const SwapReport& report);
std::string pr_curve_csv(std::span<const PrPoint> points);
std::string pr_curve_svg(std::span<const PrPoint> points, std::string_view title);

}  // namespace gwvlm
