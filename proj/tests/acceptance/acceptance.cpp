// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gwvlm/codebook.hpp"
#include "gwvlm/embedding.hpp"
#include "gwvlm/error.hpp"
#include "gwvlm/eval.hpp"
#include "gwvlm/geometry.hpp"
#include "gwvlm/pipeline.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace gwvlm;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kCellTol = 0.01 + 1e-9;  // percentage points
constexpr double kIouTol = 1e-12;
constexpr double kMetricTol = 1e-12;

const fs::path kGolden = fs::path(GWVLM_FIXTURE_DIR) / "golden";

int g_failed = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s  %-34s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  if (!ok) ++g_failed;
}

void run(const std::string& name, const std::function<std::string(bool&)>& body) {
  bool ok = true;
  std::string detail;
  try {
    detail = body(ok);
  } catch (const std::exception& e) {
    ok = false;
    detail = std::string("threw: ") + e.what();
  }
  report(name, ok, detail);
}

std::string fmt(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

struct Golden {
  PipelineConfig cfg = load_config(kGolden / "config.json");
  Dataset dataset = load_dataset(kGolden / "annotations.json", cfg.scene_kind);
  ProposalMap proposals = load_proposals(kGolden / "proposals.jsonl");

  DetectResult detect(std::size_t workers, const SwapSet* swap = nullptr) {
    cfg.workers = workers;
    auto embeddings = make_embedding_provider(cfg);
    auto chat = make_chat_client(cfg, true);
    const RunContext ctx{cfg, dataset, proposals, *embeddings, *chat, kGolden / "images"};
    return run_detect(ctx, swap);
  }
};

std::vector<Detection> plain(const DetectResult& r) {
  std::vector<Detection> out;
  for (const auto& d : r.detections) out.push_back(d.detection);
  return out;
}

std::string f1_cells(bool& ok) {
  struct Cell {
    const char* name;
    double recall, precision, f1;
  };
  const Cell cells[] = {{"NWPU", 91.70, 93.23, 92.46}, {"DIOR", 70.85, 88.00, 78.50}, {"VOC", 73.51, 83.12, 78.02}};
  std::ostringstream out;
  for (const auto& c : cells) {
    const double f1 = f1_score(c.precision / 100.0, c.recall / 100.0) * 100.0;
    const bool cell_ok = std::fabs(f1 - c.f1) <= kCellTol;
    ok = ok && cell_ok;
    out << c.name << " " << fmt(f1) << " vs " << fmt(c.f1) << "; ";
  }
  return out.str();
}

std::string swap_average(bool& ok) {
  const double f1s[] = {0.7683, 0.7611, 0.7622};
  double sum = 0.0;
  for (double f : f1s) sum += f;
  const double avg = round_half_up(sum / 3.0 * 100.0, 2);
  ok = std::fabs(avg - 76.40) <= kCellTol;
  return "mean of 76.83/76.11/76.22 = " + fmt(avg) + " vs 76.40";
}

std::string iou_nms_oracle(bool& ok) {
  std::mt19937_64 rng(20261019);
  std::size_t iou_checks = 0, nms_checks = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto a = oracle::random_grid_box(rng, 12);
    const auto b = oracle::random_grid_box(rng, 12);
    ok = ok && std::fabs(iou(a, b) - oracle::grid_iou(a, b)) <= kIouTol;
    ok = ok && iou(a, b) == iou(b, a);
    ++iou_checks;
  }
  std::uniform_int_distribution<int> count(0, 14);
  std::uniform_int_distribution<int> score(0, 5);
  for (double thr : {0.3, 0.5, 0.7}) {
    for (int i = 0; i < 400; ++i) {
      std::vector<BBox> boxes;
      const int n = count(rng);
      for (int j = 0; j < n; ++j) {
        boxes.push_back(oracle::random_grid_box(rng, 10, score(rng) / 5.0, j % 2 ? "rpn" : "sam"));
      }
      ok = ok && nms(boxes, thr) == oracle::nms(boxes, thr);
      ++nms_checks;
    }
  }
  return std::to_string(iou_checks) + " IoU pairs, " + std::to_string(nms_checks) +
         " NMS sets over thresholds 0.3/0.5/0.7";
}

std::string topk_oracle(bool& ok) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> book_size(1, 100);
  std::uniform_int_distribution<std::size_t> kdist(1, 12);
  std::size_t n = 0;
  for (std::size_t dim : {4, 16, 512}) {
    for (int i = 0; i < 400; ++i) {
      std::vector<KeyedVector> book;
      const std::size_t m = book_size(rng);
      for (std::size_t j = 0; j < m; ++j) {
        // Duplicate vectors force similarity ties.
        if (j > 0 && j % 7 == 0) {
          book.push_back({"s" + std::to_string(j), book[j - 1].vector});
        } else {
          book.push_back({"s" + std::to_string(j), EmbeddingVector(oracle::random_vector(rng, dim))});
        }
      }
      const EmbeddingVector q(oracle::random_vector(rng, dim));
      const std::size_t k = kdist(rng);
      ok = ok && topk_soft_align(q, book, k) == oracle::topk(q, book, k);
      ++n;
    }
  }
  return std::to_string(n) + " instances, dims 4/16/512, codebooks up to 100";
}

std::string scale_invariance(bool& ok) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> factor(0.01, 100.0);
  std::size_t n = 0;
  for (int i = 0; i < 600; ++i) {
    std::vector<KeyedVector> book;
    for (int j = 0; j < 20; ++j) {
      book.push_back({"s" + std::to_string(j), EmbeddingVector(oracle::random_vector(rng, 16))});
    }
    const auto raw = oracle::random_vector(rng, 16);
    auto scaled = raw;
    const double c = factor(rng);
    for (auto& x : scaled) x *= c;
    const auto a = topk_soft_align(EmbeddingVector(raw), book, 5);
    const auto b = topk_soft_align(EmbeddingVector(scaled), book, 5);
    bool same = a.size() == b.size();
    for (std::size_t j = 0; same && j < a.size(); ++j) {
      same = a[j].snippet_id == b[j].snippet_id && std::fabs(a[j].similarity - b[j].similarity) <= 1e-12;
    }
    ok = ok && same;
    ++n;
  }
  return std::to_string(n) + " trials, positive rescaling of the query";
}

std::string cache_round_trip(bool& ok) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::uint32_t> dimd(1, 64);
  std::uniform_int_distribution<std::size_t> countd(0, 40);
  std::uniform_real_distribution<float> val(-1e6f, 1e6f);
  TempDir dir;
  std::size_t files = 0;
  for (int i = 0; i < 120; ++i) {
    const std::uint32_t dim = dimd(rng);
    std::vector<KeyedVector> entries;
    const std::size_t count = countd(rng);
    for (std::size_t j = 0; j < count; ++j) {
      std::vector<double> v(dim);
      for (auto& x : v) x = static_cast<double>(val(rng));
      entries.push_back({"id/" + std::to_string(i) + "/" + std::to_string(j), EmbeddingVector(std::move(v))});
    }
    const auto path = dir / ("c" + std::to_string(i) + ".gwemb");
    cache_write(path, entries, dim);
    const auto back = read_cache_file(path);
    bool same = back.dim == dim && back.entries.size() == entries.size();
    for (std::size_t j = 0; same && j < entries.size(); ++j) {
      same = back.entries[j].id == entries[j].id && back.entries[j].vector == entries[j].vector;
    }
    same = same && encode_cache(back.entries, back.dim) == slurp(path);
    ok = ok && same;
    ++files;
  }
  return std::to_string(files) + " files, values and bytes identical after re-encode";
}

std::string golden_detections(bool& ok) {
  Golden g;
  const std::string want = slurp(kGolden / "expected_detections.jsonl");
  std::ostringstream out;
  for (std::size_t w : {1, 4, 16}) {
    const bool same = detections_jsonl(g.detect(w).detections) == want;
    ok = ok && same;
    out << "workers " << w << (same ? " identical; " : " DIFFERS; ");
  }

  const auto expected = json::parse(slurp(kGolden / "expected.json"));
  const auto result = g.detect(4);
  const auto& want_dets = expected["detections"];
  bool dets_ok = want_dets.size() == result.detections.size();
  for (std::size_t i = 0; dets_ok && i < want_dets.size(); ++i) {
    const auto& e = want_dets[i];
    const auto& d = result.detections[i].detection;
    dets_ok = e["image_id"] == d.bbox.image_id() && e["bbox"][0] == d.bbox.x1() && e["bbox"][1] == d.bbox.y1() &&
              e["bbox"][2] == d.bbox.x2() && e["bbox"][3] == d.bbox.y2() && e["score"] == d.score &&
              e["category"] == d.category;
  }
  const auto& c = expected["counts"];
  const auto& m = result.manifest.counts;
  const bool counts_ok = c["images"] == m.images && c["proposals_in"] == m.proposals_in &&
                         c["proposals_out"] == m.proposals_out && c["failures"] == m.failures &&
                         c["unknowns"] == m.unknowns;
  ok = ok && dets_ok && counts_ok;
  out << (dets_ok ? "records match" : "records DIFFER") << "; " << (counts_ok ? "counts match" : "counts DIFFER");
  return out.str();
}

std::string golden_metrics(bool& ok) {
  Golden g;
  const auto dets = plain(g.detect(4));
  const auto report = compute_report(dets, g.dataset.ground_truths, g.cfg.report_thresholds, g.cfg.miou_sweep,
                                     g.cfg.class_aware);
  const auto want = json::parse(slurp(kGolden / "expected_metrics.json"));
  auto close = [](double a, double b) { return std::fabs(a - b) <= kMetricTol; };
  ok = report.detections == want["detections"] && report.ground_truths == want["ground_truths"] &&
       report.per_threshold.size() == want["per_threshold"].size();
  for (std::size_t i = 0; ok && i < report.per_threshold.size(); ++i) {
    const auto& t = report.per_threshold[i];
    const auto& w = want["per_threshold"][i];
    ok = t.iou_threshold == w["iou_threshold"] && t.tp == w["tp"] && t.fp == w["fp"] && t.fn == w["fn"] &&
         close(t.prf.precision, w["precision"]) && close(t.prf.recall, w["recall"]) && close(t.prf.f1, w["f1"]);
  }
  ok = ok && close(report.miou.precision, want["miou"]["precision"]) &&
       close(report.miou.recall, want["miou"]["recall"]) && close(report.miou.f1, want["miou"]["f1"]);
  return "F1@0.5 " + fmt(report.per_threshold[0].prf.f1, 6) + ", mIoU F1 " + fmt(report.miou.f1, 6) +
         " vs independent oracle";
}

std::string scale_plans(bool& ok) {
  const auto table = ScaleTable::defaults();
  std::size_t plans = 0;
  for (auto kind : {SceneKind::kNatural, SceneKind::kRemoteSensing}) {
    for (auto level : {SizeLevel::kSmall, SizeLevel::kMedium, SizeLevel::kLarge}) {
      const auto plan = plan_scales({level, 0.0}, kind, table);
      const auto* f = table.find(kind, level);
      std::vector<ScaleEntry> want{{ScaleRole::kPrimary, 1.0}};
      for (double z : f->zoom_in) want.push_back({ScaleRole::kZoomIn, z});
      for (double z : f->zoom_out) want.push_back({ScaleRole::kZoomOut, z});
      ok = ok && plan.entries() == want;
      for (const auto& e : plan.entries()) {
        if (e.role == ScaleRole::kZoomIn) ok = ok && e.factor > 0.0 && e.factor < 1.0;
        if (e.role == ScaleRole::kZoomOut) ok = ok && e.factor > 1.0;
      }
      ++plans;
    }
  }
  const auto k = TopKConfig::defaults(SceneKind::kRemoteSensing);
  ok = ok && k.primary == 3 && k.zoom == 5;

  // Every remote sensing object in the golden run searches K=3 on the primary view and K=5 elsewhere.
  Golden g;
  auto provider = make_embedding_provider(g.cfg);
  const auto codebook = load_codebook(g.cfg.codebook, g.cfg.scene_kind);
  const SnippetIndex index(codebook, *provider);
  std::size_t objects = 0;
  for (const auto& meta : g.dataset.images) {
    const auto it = g.proposals.find(meta.image_id);
    if (it == g.proposals.end()) continue;
    for (const auto& anchor : merge_proposals(it->second, {g.cfg.nms_threshold, false})) {
      const auto plan = plan_scales(classify_size(anchor, meta, g.cfg.size_thresholds), meta.scene_kind, table);
      try {
        const auto found = search_object(anchor, plan, {{}, meta}, index, *provider, k);
        for (const auto& l : found.per_role) {
          const std::size_t want = std::min(l.entry.role == ScaleRole::kPrimary ? k.primary : k.zoom,
                                            index.entries().size());
          ok = ok && l.matches.size() == want;
        }
        ++objects;
      } catch (const Error&) {
        ok = false;
      }
    }
  }
  return std::to_string(plans) + " plans match the table; K=(3,5) on " + std::to_string(objects) + " objects";
}

std::string swap_invariance(bool& ok) {
  Golden g;
  const auto vocab = run_vocabulary(g.cfg, g.dataset);
  std::vector<SwapSet> swaps;
  std::map<std::string, std::vector<Detection>> by_set;
  for (const auto& path : g.cfg.swap_sets) {
    swaps.push_back(load_swap_set(path, vocab));
    by_set[swaps.back().set_id] = plain(g.detect(4, &swaps.back()));
  }
  const auto report = prompt_swap_eval(by_set, g.dataset.ground_truths, swaps);
  const double want = json::parse(slurp(kGolden / "expected_metrics.json"))["swap_f1"];
  ok = swaps.size() == 3 && report.f1_by_set.size() == 3;
  std::ostringstream out;
  for (const auto& [id, f1] : report.f1_by_set) {
    ok = ok && f1 == report.f1_by_set.front().second && std::fabs(f1 - want) <= kMetricTol;
    out << id << " " << fmt(f1 * 100.0) << "; ";
  }
  ok = ok && std::fabs(report.average - want) <= kMetricTol;
  out << "avg " << fmt(report.average * 100.0);
  return out.str();
}

}  // namespace

int main() {
  run("f1-cells", f1_cells);
  run("swap-average-rounding", swap_average);
  run("iou-nms-oracle", iou_nms_oracle);
  run("topk-oracle", topk_oracle);
  run("topk-scale-invariance", scale_invariance);
  run("gwemb1-round-trip", cache_round_trip);
  run("golden-detections", golden_detections);
  run("golden-metrics", golden_metrics);
  run("scale-plan-and-k", scale_plans);
  run("swap-invariance", swap_invariance);
  std::printf("%d criteria failed\n", g_failed);
  return g_failed == 0 ? 0 : 1;
}
