#pragma once

// End-to-end detection runs: dataset and proposal ingest, the per-object
// search / prompt / guess loop, run manifests, report files and overlays.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gwvlm/codebook.hpp"
#include "gwvlm/embedding.hpp"
#include "gwvlm/eval.hpp"
#include "gwvlm/geometry.hpp"
#include "gwvlm/llm.hpp"

namespace gwvlm {

inline constexpr std::string_view kEmbedEndpointEnv = "GW_EMBED_ENDPOINT";

struct EmbeddingSpec {
  std::vector<std::filesystem::path> cache_paths;
  std::string service_url;
  double timeout_seconds = 60.0;
  std::size_t max_in_flight = 4;
  std::size_t batch_size = 64;
};

struct MockLlmSpec {
  std::map<std::string, std::string> answers;  // snippet text -> answer
  std::vector<std::pair<std::string, std::string>> overrides;  // needle -> response
};

struct PipelineConfig {
  SceneKind scene_kind = SceneKind::kRemoteSensing;
  double nms_threshold = 0.5;
  bool calibrate_scores = false;
  SizeThresholdTable size_thresholds;
  ScaleTable scales = ScaleTable::defaults();
  std::optional<TopKConfig> top_k;  // per-scene default when absent

  std::filesystem::path codebook;
  std::optional<std::filesystem::path> template_path;  // shipped template when absent
  EmbeddingSpec embedding;
  ChatConfig chat;
  std::size_t chat_max_in_flight = 8;
  MockLlmSpec mock_llm;

  std::optional<std::filesystem::path> vocabulary;  // annotation categories when absent
  std::vector<std::filesystem::path> swap_sets;
  bool embedding_fallback = false;
  double fallback_floor = 0.85;

  std::optional<std::string> scenario;
  bool show_similarity = true;
  bool closed_vocabulary_hint = false;

  std::vector<double> report_thresholds = default_report_thresholds();
  std::vector<double> miou_sweep = default_miou_sweep();
  bool class_aware = true;

  std::size_t workers = 4;
  std::filesystem::path output_dir = "out";
  std::uint64_t seed = 0;

  // SHA-256 of the canonical config document.
  std::string hash;

  TopKConfig effective_top_k() const;
  std::filesystem::path effective_template() const;

  // Throws kConfig on out-of-range values or missing files.
  void validate() const;
};

// Relative paths resolve against the config file's directory. Throws kConfig.
// load_config also validates; parse_config leaves that to the caller.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig parse_config(std::string_view document, const std::filesystem::path& base_dir);

// The shipped defaults as a config document.
std::string default_config_document();

// ---------------------------------------------------------------------------
// Inputs

struct Dataset {
  std::vector<ImageMeta> images;  // annotation order
  std::vector<GroundTruth> ground_truths;
  std::vector<std::string> categories;  // annotation category order
  std::map<std::string, std::string> file_names;  // image_id -> file name

  const ImageMeta* find(std::string_view image_id) const;
};

// COCO-style document. Image ids are stringified; bbox [x,y,w,h] becomes
// corners; an optional per-image "resolution" is meters per pixel.
Dataset load_dataset(const std::filesystem::path& annotations, SceneKind default_scene);
Dataset parse_dataset(std::string_view document, SceneKind default_scene);

// JSON lines {"image_id", "bbox": [x1,y1,x2,y2], "score", "source"}.
using ProposalMap = std::map<std::string, std::vector<ProposalSet>>;
ProposalMap load_proposals(const std::filesystem::path& path);
ProposalMap parse_proposals(std::string_view document);

// ---------------------------------------------------------------------------
// Detection run

struct DetectionRecord {
  Detection detection;
  std::string reasoning;
  std::vector<std::string> snippets_used;  // primary-view snippet ids
  std::string source;
};

struct ObjectFailure {
  std::string image_id;
  BBox anchor;
  std::string stage;
  std::string message;
};

struct RunCounts {
  std::size_t images = 0;
  std::size_t proposals_in = 0;
  std::size_t proposals_out = 0;
  std::size_t crops = 0;
  std::size_t prompts = 0;
  std::size_t answers = 0;
  std::size_t failures = 0;
  std::size_t unknowns = 0;
};

struct RunManifest {
  std::string config_hash;
  std::string embedding_provider;
  std::string chat_client;
  std::string template_id;
  std::string swap_set;  // empty for canonical runs
  std::string started_at;
  std::string finished_at;
  RunCounts counts;
  std::vector<ObjectFailure> failures;
};

struct DetectResult {
  std::vector<DetectionRecord> detections;  // sorted by image id, then anchor
  RunManifest manifest;
};

struct RunContext {
  const PipelineConfig& config;
  const Dataset& dataset;
  const ProposalMap& proposals;
  EmbeddingProvider& embeddings;
  ChatClient& chat;
  std::filesystem::path images_dir;
};

// Per-object failures become "unknown" detections and manifest entries.
DetectResult run_detect(const RunContext& ctx, const SwapSet* swap = nullptr);

std::unique_ptr<EmbeddingProvider> make_embedding_provider(const PipelineConfig& cfg);
std::unique_ptr<ChatClient> make_chat_client(const PipelineConfig& cfg, bool mock);
Vocabulary run_vocabulary(const PipelineConfig& cfg, const Dataset& dataset);

// Crop ids for every view of every merged proposal, deduplicated, in order.
std::vector<std::pair<ImageSource, std::vector<CropSpec>>> plan_all_crops(
    const PipelineConfig& cfg, const Dataset& dataset, const ProposalMap& proposals,
    const std::filesystem::path& images_dir);

// ---------------------------------------------------------------------------
// Outputs

std::string detections_jsonl(std::span<const DetectionRecord> detections);
std::vector<Detection> parse_detections(std::string_view document);
std::vector<Detection> load_detections(const std::filesystem::path& path);
std::string manifest_json(const RunManifest& manifest);

void write_text(const std::filesystem::path& path, std::string_view content);

// metrics.json, metrics.txt, pr_curve.csv and pr_curve.svg.
MetricsReport emit_metrics(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                           const PipelineConfig& cfg, const std::filesystem::path& out_dir);

// swap.json and swap.txt.
void emit_swap_report(const SwapReport& report, const std::filesystem::path& out_dir);

// SVG with the image embedded, one labelled rectangle per detection and,
// when given, ground truth in a dashed second style.
std::string render_overlay(const std::filesystem::path& image_path, const ImageMeta& meta,
                           std::span<const Detection> dets,
                           const std::vector<GroundTruth>* gts = nullptr);

}  // namespace gwvlm
