// gwvlm: training-free open-vocabulary detection over class-agnostic proposals.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>

#include "gwvlm/embedding.hpp"
#include "gwvlm/error.hpp"
#include "gwvlm/eval.hpp"
#include "gwvlm/pipeline.hpp"

namespace fs = std::filesystem;
using namespace gwvlm;

namespace {

enum ExitCode { kOk = 0, kConfigError = 1, kRuntimeError = 2, kPartial = 3 };

struct Options {
  std::string config;
  std::string scene;
  std::string proposals;
  std::string annotations;
  std::string images;
  std::string out;
  std::string detections;
  std::string cache_path;
  std::size_t workers = 0;
  bool mock_llm = false;
  bool show_gt = false;
  bool list_ids = false;
  std::vector<std::string> swap_sets;
};

// Config problems exit 1; everything after the config is accepted exits 2.
struct ConfigFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

PipelineConfig load(const Options& o) {
  try {
    PipelineConfig cfg = load_config(o.config);
    if (!o.scene.empty()) cfg.scene_kind = parse_scene_kind(o.scene);
    if (!o.out.empty()) cfg.output_dir = o.out;
    if (o.workers > 0) cfg.workers = o.workers;
    if (!o.swap_sets.empty()) cfg.swap_sets.assign(o.swap_sets.begin(), o.swap_sets.end());
    cfg.validate();
    return cfg;
  } catch (const Error& e) {
    throw ConfigFailure(e.what());
  }
}

template <typename F>
auto at_init(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kConfig) throw ConfigFailure(e.what());
    throw;
  }
}

std::vector<SwapSet> load_swaps(const PipelineConfig& cfg, const Vocabulary& vocab) {
  std::vector<SwapSet> out;
  std::set<std::string> ids;
  for (const auto& p : cfg.swap_sets) {
    out.push_back(at_init([&] { return load_swap_set(p, vocab); }));
    if (!ids.insert(out.back().set_id).second) {
      throw ConfigFailure("duplicate swap set id '" + out.back().set_id + "'");
    }
  }
  return out;
}

void report_run(const RunManifest& m, const fs::path& dir) {
  std::fprintf(stderr,
               "%s: %zu images, %zu proposals -> %zu objects, %zu answers, %zu failures, %zu unknown\n",
               dir.string().c_str(), m.counts.images, m.counts.proposals_in, m.counts.proposals_out,
               m.counts.answers, m.counts.failures, m.counts.unknowns);
}

int cmd_detect(const Options& o) {
  const PipelineConfig cfg = load(o);
  const Dataset dataset = load_dataset(o.annotations, cfg.scene_kind);
  const ProposalMap proposals = load_proposals(o.proposals);
  auto chat = at_init([&] { return make_chat_client(cfg, o.mock_llm); });
  auto embeddings = at_init([&] { return make_embedding_provider(cfg); });

  // Canonical run unless one swap set is named on the command line.
  std::optional<SwapSet> swap;
  if (!o.swap_sets.empty()) {
    const auto swaps = load_swaps(cfg, run_vocabulary(cfg, dataset));
    if (swaps.size() > 1) throw ConfigFailure("detect takes at most one --swap-set; use swap-eval");
    swap = swaps.front();
  }

  const RunContext ctx{cfg, dataset, proposals, *embeddings, *chat, o.images};
  const DetectResult result = run_detect(ctx, swap ? &*swap : nullptr);
  write_text(cfg.output_dir / "detections.jsonl", detections_jsonl(result.detections));
  write_text(cfg.output_dir / "manifest.json", manifest_json(result.manifest));
  report_run(result.manifest, cfg.output_dir);
  return result.manifest.counts.failures > 0 ? kPartial : kOk;
}

int cmd_evaluate(const Options& o) {
  const PipelineConfig cfg = load(o);
  const Dataset dataset = load_dataset(o.annotations, cfg.scene_kind);
  const fs::path dets_path = o.detections.empty() ? cfg.output_dir / "detections.jsonl" : fs::path(o.detections);
  const auto dets = load_detections(dets_path);
  const MetricsReport report = emit_metrics(dets, dataset.ground_truths, cfg, cfg.output_dir);
  std::cout << metrics_table(report);
  return kOk;
}

int cmd_swap_eval(const Options& o) {
  const PipelineConfig cfg = load(o);
  const Dataset dataset = load_dataset(o.annotations, cfg.scene_kind);
  const ProposalMap proposals = load_proposals(o.proposals);
  const auto swaps = load_swaps(cfg, at_init([&] { return run_vocabulary(cfg, dataset); }));
  if (swaps.empty()) throw ConfigFailure("swap-eval needs at least one --swap-set");
  auto chat = at_init([&] { return make_chat_client(cfg, o.mock_llm); });
  auto embeddings = at_init([&] { return make_embedding_provider(cfg); });

  const RunContext ctx{cfg, dataset, proposals, *embeddings, *chat, o.images};
  std::map<std::string, std::vector<Detection>> by_set;
  bool partial = false;
  for (const auto& swap : swaps) {
    const DetectResult result = run_detect(ctx, &swap);
    const fs::path dir = cfg.output_dir / "swap" / swap.set_id;
    write_text(dir / "detections.jsonl", detections_jsonl(result.detections));
    write_text(dir / "manifest.json", manifest_json(result.manifest));
    report_run(result.manifest, dir);
    partial = partial || result.manifest.counts.failures > 0;
    auto& dets = by_set[swap.set_id];
    for (const auto& r : result.detections) dets.push_back(r.detection);
  }
  const SwapReport report = prompt_swap_eval(by_set, dataset.ground_truths, swaps);
  emit_swap_report(report, cfg.output_dir);
  std::cout << swap_table(report);
  return partial ? kPartial : kOk;
}

int cmd_cache_build(const Options& o) {
  PipelineConfig cfg = load(o);
  if (cfg.embedding.service_url.empty()) {
    throw ConfigFailure("cache build needs embedding.service_url or " + std::string(kEmbedEndpointEnv));
  }
  cfg.embedding.cache_paths.clear();
  const Dataset dataset = load_dataset(o.annotations, cfg.scene_kind);
  const ProposalMap proposals = load_proposals(o.proposals);
  auto provider = at_init([&] { return make_embedding_provider(cfg); });

  std::vector<KeyedVector> entries;
  const Codebook codebook = load_codebook(cfg.codebook, cfg.scene_kind);
  const SnippetIndex index(codebook, *provider);
  for (const auto& e : index.entries()) entries.push_back(e);

  if (cfg.embedding_fallback) {
    const Vocabulary vocab = run_vocabulary(cfg, dataset);
    std::vector<TextItem> labels;
    for (const auto& c : vocab.categories()) labels.push_back({"label:" + normalize_label(c), c});
    auto vectors = embed_texts(*provider, labels);
    for (std::size_t i = 0; i < labels.size(); ++i) entries.push_back({labels[i].id, std::move(vectors[i])});
  }
  std::size_t crops = 0;
  for (const auto& [source, specs] : plan_all_crops(cfg, dataset, proposals, o.images)) {
    if (specs.empty()) continue;
    auto vectors = embed_crops(*provider, source, specs);
    for (std::size_t i = 0; i < specs.size(); ++i) entries.push_back({specs[i].crop_id, std::move(vectors[i])});
    crops += specs.size();
  }
  const fs::path out = o.cache_path.empty() ? cfg.output_dir / "embeddings.gwemb" : fs::path(o.cache_path);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  cache_write(out, entries);
  std::fprintf(stderr, "%s: %zu snippets, %zu crops, dim %zu\n", out.string().c_str(),
               index.entries().size(), crops, provider->dim());
  return kOk;
}

int cmd_cache_inspect(const Options& o) {
  const CacheContents contents = read_cache_file(o.cache_path);
  std::cout << "GWEMB1 version " << kCacheVersion << " dim " << contents.dim << " count "
            << contents.entries.size() << "\n";
  if (o.list_ids) {
    for (const auto& e : contents.entries) std::cout << e.id << "\n";
  }
  return kOk;
}

int cmd_overlay(const Options& o) {
  const PipelineConfig cfg = load(o);
  const Dataset dataset = load_dataset(o.annotations, cfg.scene_kind);
  const fs::path dets_path = o.detections.empty() ? cfg.output_dir / "detections.jsonl" : fs::path(o.detections);
  const auto dets = load_detections(dets_path);
  std::map<std::string, std::vector<Detection>> by_image;
  for (const auto& d : dets) {
    if (dataset.find(d.bbox.image_id()) == nullptr) {
      throw Error(ErrorCode::kParse, "detection for unknown image '" + d.bbox.image_id() + "'");
    }
    by_image[d.bbox.image_id()].push_back(d);
  }
  for (const auto& meta : dataset.images) {
    const fs::path image = fs::path(o.images) / dataset.file_names.at(meta.image_id);
    const auto svg = render_overlay(image, meta, by_image[meta.image_id],
                                    o.show_gt ? &dataset.ground_truths : nullptr);
    write_text(cfg.output_dir / "overlays" / (meta.image_id + ".svg"), svg);
  }
  std::fprintf(stderr, "%zu overlays written to %s\n", dataset.images.size(),
               (cfg.output_dir / "overlays").string().c_str());
  return kOk;
}

int cmd_validate(const Options& o) {
  const PipelineConfig cfg = load(o);
  std::cout << "config OK (" << to_string(cfg.scene_kind) << ", sha256 " << cfg.hash << ")\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-free open-vocabulary object detection"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--scene", o.scene, "Scene kind override")
        ->check(CLI::IsMember({"natural", "remote_sensing"}));
    sub->add_option("--out", o.out, "Output directory");
  };
  auto run_inputs = [&](CLI::App* sub) {
    sub->add_option("--proposals", o.proposals, "Proposals (JSON lines)")->required()->check(CLI::ExistingFile);
    sub->add_option("--annotations", o.annotations, "COCO-style annotations")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--images", o.images, "Image directory")->check(CLI::ExistingDirectory);
    sub->add_option("--workers", o.workers, "Worker threads")->check(CLI::Range(1, 256));
    sub->add_flag("--mock-llm", o.mock_llm, "Answer with the deterministic mock model");
    sub->add_option("--swap-set", o.swap_sets, "Swap vocabulary file (repeatable)")->check(CLI::ExistingFile);
  };

  auto* detect = app.add_subcommand("detect", "Run detection and write detections.jsonl");
  common(detect);
  run_inputs(detect);

  auto* evaluate = app.add_subcommand("evaluate", "Score detections against ground truth");
  common(evaluate);
  evaluate->add_option("--annotations", o.annotations, "COCO-style annotations")
      ->required()
      ->check(CLI::ExistingFile);
  evaluate->add_option("--detections", o.detections, "Detections file (default: <out>/detections.jsonl)");

  auto* swap_eval = app.add_subcommand("swap-eval", "Detect and score once per swap vocabulary");
  common(swap_eval);
  run_inputs(swap_eval);

  auto* cache = app.add_subcommand("cache", "Build or inspect embedding caches");
  cache->require_subcommand(1);
  auto* cache_build = cache->add_subcommand("build", "Embed snippets and crops through the service");
  common(cache_build);
  run_inputs(cache_build);
  cache_build->add_option("--cache", o.cache_path, "Output cache file");
  auto* cache_inspect = cache->add_subcommand("inspect", "Print a cache header");
  cache_inspect->add_option("cache", o.cache_path, "Cache file")->required()->check(CLI::ExistingFile);
  cache_inspect->add_flag("--ids", o.list_ids, "List every id");

  auto* overlay = app.add_subcommand("overlay", "Render detections over each image as SVG");
  common(overlay);
  overlay->add_option("--annotations", o.annotations, "COCO-style annotations")
      ->required()
      ->check(CLI::ExistingFile);
  overlay->add_option("--images", o.images, "Image directory")->required()->check(CLI::ExistingDirectory);
  overlay->add_option("--detections", o.detections, "Detections file (default: <out>/detections.jsonl)");
  overlay->add_flag("--gt", o.show_gt, "Also draw ground truth");

  auto* validate_config = app.add_subcommand("validate-config", "Check a config and print its hash");
  common(validate_config);

  auto* default_config = app.add_subcommand("default-config", "Print the default config document");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  }

  try {
    if (detect->parsed()) return cmd_detect(o);
    if (evaluate->parsed()) return cmd_evaluate(o);
    if (swap_eval->parsed()) return cmd_swap_eval(o);
    if (cache_build->parsed()) return cmd_cache_build(o);
    if (cache_inspect->parsed()) return cmd_cache_inspect(o);
    if (overlay->parsed()) return cmd_overlay(o);
    if (validate_config->parsed()) return cmd_validate(o);
    if (default_config->parsed()) {
      std::cout << default_config_document();
      return kOk;
    }
  } catch (const ConfigFailure& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeError;
  }
  return kConfigError;
}
