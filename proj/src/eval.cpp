#include "gwvlm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "gwvlm/embedding.hpp"
#include "gwvlm/error.hpp"
#include "gwvlm/llm.hpp"
#include "text_util.hpp"

namespace gwvlm {

using nlohmann::json;

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json_file(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParse, path.string() + " is not valid JSON: " + e.what());
  }
}

bool is_terminal_punct(char c) {
  return c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':';
}

}  // namespace

std::string normalize_label(std::string_view s) {
  std::string out = text::to_lower(s);
  std::replace(out.begin(), out.end(), '-', ' ');
  out = text::trim(out);
  while (!out.empty() && is_terminal_punct(out.back())) {
    out.pop_back();
    out = text::trim(out);
  }
  out = text::collapse_whitespace(out);
  for (std::string_view article : {"a ", "an ", "the "}) {
    if (out.rfind(article, 0) == 0) {
      out.erase(0, article.size());
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> categories, std::map<std::string, std::string> synonyms)
    : categories_(std::move(categories)), synonyms_(std::move(synonyms)) {
  if (categories_.empty()) throw Error(ErrorCode::kConfig, "vocabulary is empty");
  for (const auto& c : categories_) {
    const auto key = normalize_label(c);
    if (key.empty()) throw Error(ErrorCode::kConfig, "vocabulary contains a blank category");
    if (key == kUnknownCategory) {
      throw Error(ErrorCode::kConfig, "'unknown' is reserved and cannot be a category");
    }
    if (!terms_.emplace(key, c).second) {
      throw Error(ErrorCode::kConfig, "duplicate category '" + c + "'");
    }
  }
  for (const auto& [alias, canonical] : synonyms_) {
    if (!contains(canonical)) {
      throw Error(ErrorCode::kConfig,
                  "synonym '" + alias + "' maps to unknown category '" + canonical + "'");
    }
    const auto key = normalize_label(alias);
    const auto [it, inserted] = terms_.emplace(key, canonical);
    if (!inserted && it->second != canonical) {
      throw Error(ErrorCode::kConfig, "synonym '" + alias + "' is ambiguous");
    }
  }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  const json doc = parse_json_file(path);
  if (!doc.is_object() || !doc.contains("categories") || !doc["categories"].is_array()) {
    throw Error(ErrorCode::kParse, path.string() + " needs a 'categories' list");
  }
  std::vector<std::string> categories;
  for (const auto& c : doc["categories"]) {
    if (!c.is_string()) throw Error(ErrorCode::kParse, "category names must be strings");
    categories.push_back(c.get<std::string>());
  }
  std::map<std::string, std::string> synonyms;
  if (doc.contains("synonyms")) {
    if (!doc["synonyms"].is_object()) throw Error(ErrorCode::kParse, "'synonyms' must be an object");
    for (const auto& [k, v] : doc["synonyms"].items()) {
      if (!v.is_string()) throw Error(ErrorCode::kParse, "synonym targets must be strings");
      synonyms[k] = v.get<std::string>();
    }
  }
  return Vocabulary(std::move(categories), std::move(synonyms));
}

bool Vocabulary::contains(std::string_view canonical) const {
  return std::find(categories_.begin(), categories_.end(), canonical) != categories_.end();
}

std::size_t Vocabulary::index_of(std::string_view canonical) const {
  const auto it = std::find(categories_.begin(), categories_.end(), canonical);
  if (it == categories_.end()) {
    throw Error(ErrorCode::kInvalidArgument, "'" + std::string(canonical) + "' is not a category");
  }
  return static_cast<std::size_t>(it - categories_.begin());
}

std::optional<std::string> Vocabulary::lookup(std::string_view normalized) const {
  const auto it = terms_.find(normalized);
  if (it == terms_.end()) return std::nullopt;
  return it->second;
}

std::string map_answer(std::string_view raw, const Vocabulary& vocab, const FallbackMapper& fallback) {
  const std::string answer = normalize_label(raw);
  if (answer.empty()) return std::string(kUnknownCategory);
  if (auto hit = vocab.lookup(answer)) return *hit;

  const std::string padded = " " + answer + " ";
  std::set<std::string> found;
  for (const auto& [term, canonical] : vocab.terms()) {
    if (padded.find(" " + term + " ") != std::string::npos) found.insert(canonical);
  }
  if (found.size() == 1) return *found.begin();

  if (fallback) {
    if (auto hit = fallback(answer); hit && vocab.contains(*hit)) return *hit;
  }
  return std::string(kUnknownCategory);
}

FallbackMapper embedding_fallback(EmbeddingProvider& provider, const Vocabulary& vocab, double floor) {
  std::vector<TextItem> items;
  for (const auto& c : vocab.categories()) items.push_back({"label:" + normalize_label(c), c});
  auto vectors = embed_texts(provider, items);
  std::vector<KeyedVector> index;
  for (std::size_t i = 0; i < items.size(); ++i) {
    index.push_back({vocab.categories()[i], std::move(vectors[i])});
  }
  return [&provider, index = std::move(index), floor](std::string_view normalized)
             -> std::optional<std::string> {
    const std::string text(normalized);
    const std::vector<TextItem> query = {{"label:" + text, text}};
    const auto q = embed_texts(provider, query);
    const auto best = topk_soft_align(q.front(), index, 1);
    if (best.front().similarity >= floor) return best.front().snippet_id;
    return std::nullopt;
  };
}

// ---------------------------------------------------------------------------
// Swap sets

const std::string& SwapSet::alias_of(const Vocabulary& vocab, std::string_view canonical) const {
  return aliases.at(vocab.index_of(canonical));
}

std::string SwapSet::canonical_of(const Vocabulary& vocab, std::string_view alias) const {
  if (alias == kUnknownCategory) return std::string(kUnknownCategory);
  const auto it = std::find(aliases.begin(), aliases.end(), alias);
  if (it == aliases.end()) {
    throw Error(ErrorCode::kInvalidArgument,
                "'" + std::string(alias) + "' is not an alias in swap set '" + set_id + "'");
  }
  return vocab.categories()[static_cast<std::size_t>(it - aliases.begin())];
}

SwapSet build_swap_vocab(const Vocabulary& vocab, std::string set_id,
                         const std::map<std::string, std::string>& aliases) {
  if (aliases.size() != vocab.categories().size()) {
    throw Error(ErrorCode::kConfig, "swap set '" + set_id + "' has " + std::to_string(aliases.size()) +
                                        " aliases for " + std::to_string(vocab.categories().size()) +
                                        " categories");
  }
  SwapSet swap;
  swap.set_id = std::move(set_id);
  std::set<std::string> seen;
  for (const auto& canonical : vocab.categories()) {
    const auto it = aliases.find(canonical);
    if (it == aliases.end()) {
      throw Error(ErrorCode::kConfig, "swap set '" + swap.set_id + "' has no alias for '" + canonical + "'");
    }
    const std::string key = normalize_label(it->second);
    if (key.empty()) throw Error(ErrorCode::kConfig, "blank alias for '" + canonical + "'");
    if (key == normalize_label(canonical)) {
      throw Error(ErrorCode::kConfig,
                  "alias '" + it->second + "' is not textually different from '" + canonical + "'");
    }
    if (!seen.insert(key).second) throw Error(ErrorCode::kConfig, "duplicate alias '" + it->second + "'");
    swap.aliases.push_back(it->second);
  }
  return swap;
}

SwapSet load_swap_set(const std::filesystem::path& path, const Vocabulary& vocab) {
  const json doc = parse_json_file(path);
  if (!doc.is_object() || !doc.contains("set_id") || !doc["set_id"].is_string() ||
      !doc.contains("aliases") || !doc["aliases"].is_object()) {
    throw Error(ErrorCode::kParse, path.string() + " needs 'set_id' and an 'aliases' object");
  }
  std::map<std::string, std::string> aliases;
  for (const auto& [k, v] : doc["aliases"].items()) {
    if (!v.is_string()) throw Error(ErrorCode::kParse, "aliases must be strings");
    aliases[k] = v.get<std::string>();
  }
  return build_swap_vocab(vocab, doc["set_id"].get<std::string>(), aliases);
}

void save_swap_set(const std::filesystem::path& path, const Vocabulary& vocab, const SwapSet& swap) {
  json doc;
  doc["set_id"] = swap.set_id;
  doc["aliases"] = json::object();
  for (std::size_t i = 0; i < swap.aliases.size(); ++i) {
    doc["aliases"][vocab.categories()[i]] = swap.aliases[i];
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

SwapSet generate_swap_set(ChatClient& client, const ChatConfig& cfg, const Vocabulary& vocab,
                          std::string set_id) {
  std::string prompt =
      "For each category name below, give one semantically equivalent but textually "
      "different noun or short noun phrase. Answer with exactly one line per category in "
      "the form \"<category>: <replacement>\" and nothing else.\n\n";
  for (const auto& c : vocab.categories()) prompt += c + "\n";
  const std::vector<ChatMessage> messages = {{"user", prompt}};
  const std::string raw = chat(client, messages, cfg);

  std::map<std::string, std::string> aliases;
  for (const auto& line : text::split_lines(raw)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    const auto key = vocab.lookup(normalize_label(line.substr(0, colon)));
    const std::string alias = text::trim(line.substr(colon + 1));
    if (key && !alias.empty()) aliases[*key] = alias;
  }
  return build_swap_vocab(vocab, std::move(set_id), aliases);
}

Vocabulary alias_vocabulary(const Vocabulary& vocab, const SwapSet& swap) {
  if (swap.aliases.size() != vocab.categories().size()) {
    throw Error(ErrorCode::kConfig, "swap set '" + swap.set_id + "' does not cover the vocabulary");
  }
  return Vocabulary(swap.aliases);
}

// ---------------------------------------------------------------------------
// Matching

std::vector<std::size_t> detection_order(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& da = dets[a];
    const auto& db = dets[b];
    if (da.score != db.score) return da.score > db.score;
    return std::tuple(da.bbox.image_id(), da.bbox.x1(), da.bbox.y1(), da.bbox.x2(), da.bbox.y2()) <
           std::tuple(db.bbox.image_id(), db.bbox.x1(), db.bbox.y1(), db.bbox.x2(), db.bbox.y2());
  });
  return order;
}

MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                             double iou_thr, bool class_aware) {
  MatchResult out;
  out.detection_is_tp.assign(dets.size(), false);
  std::vector<bool> taken(gts.size(), false);

  std::map<std::string, std::vector<std::size_t>, std::less<>> gts_by_image;
  for (std::size_t g = 0; g < gts.size(); ++g) gts_by_image[gts[g].image_id].push_back(g);

  for (const std::size_t d : detection_order(dets)) {
    const auto& det = dets[d];
    if (class_aware && det.category == kUnknownCategory) continue;
    const auto group = gts_by_image.find(det.bbox.image_id());
    if (group == gts_by_image.end()) continue;
    std::optional<std::size_t> best;
    double best_iou = -1.0;
    for (const std::size_t g : group->second) {
      if (taken[g]) continue;
      if (class_aware && gts[g].category != det.category) continue;
      const double overlap = iou(det.bbox, gts[g].bbox);
      if (overlap >= iou_thr && overlap > best_iou) {
        best = g;
        best_iou = overlap;
      }
    }
    if (best) {
      taken[*best] = true;
      out.detection_is_tp[d] = true;
      out.matches.push_back({d, *best, best_iou});
    }
  }
  out.tp = out.matches.size();
  out.fp = dets.size() - out.tp;
  out.fn = gts.size() - out.tp;
  return out;
}

double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

PRF precision_recall_f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  PRF out;
  out.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  out.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  out.f1 = f1_score(out.precision, out.recall);
  return out;
}

std::vector<double> default_report_thresholds() { return {0.5, 0.95}; }

std::vector<double> default_miou_sweep() {
  std::vector<double> out;
  for (int pct = 50; pct <= 95; pct += 5) out.push_back(pct / 100.0);
  return out;
}

MetricsReport compute_report(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                             std::span<const double> thresholds, std::span<const double> sweep,
                             bool class_aware) {
  MetricsReport report;
  report.detections = dets.size();
  report.ground_truths = gts.size();
  for (double thr : thresholds) {
    const auto m = match_detections(dets, gts, thr, class_aware);
    report.per_threshold.push_back({thr, m.tp, m.fp, m.fn, precision_recall_f1(m.tp, m.fp, m.fn)});
  }
  if (!sweep.empty()) {
    PRF sum;
    for (double thr : sweep) {
      const auto m = match_detections(dets, gts, thr, class_aware);
      const auto prf = precision_recall_f1(m.tp, m.fp, m.fn);
      sum.precision += prf.precision;
      sum.recall += prf.recall;
      sum.f1 += prf.f1;
    }
    const auto n = static_cast<double>(sweep.size());
    report.miou = {sum.precision / n, sum.recall / n, sum.f1 / n};
  }
  return report;
}

std::vector<PrPoint> pr_curve(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                              double iou_thr, bool class_aware) {
  const auto match = match_detections(dets, gts, iou_thr, class_aware);
  const auto order = detection_order(dets);
  std::vector<PrPoint> out;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (match.detection_is_tp[order[i]]) ++tp;
    const double score = dets[order[i]].score;
    const bool last_of_score = i + 1 == order.size() || dets[order[i + 1]].score != score;
    if (!last_of_score) continue;
    const double recall = gts.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(gts.size());
    out.push_back({score, recall, static_cast<double>(tp) / static_cast<double>(i + 1)});
  }
  return out;
}

SwapReport prompt_swap_eval(const std::map<std::string, std::vector<Detection>>& results_by_set,
                            std::span<const GroundTruth> gts, std::span<const SwapSet> swaps) {
  for (const auto& [set_id, _] : results_by_set) {
    const bool known = std::any_of(swaps.begin(), swaps.end(),
                                   [&](const SwapSet& s) { return s.set_id == set_id; });
    if (!known) throw Error(ErrorCode::kInvalidArgument, "unknown swap set '" + set_id + "'");
  }
  SwapReport report;
  double sum = 0.0;
  for (const auto& swap : swaps) {
    const auto it = results_by_set.find(swap.set_id);
    double f1 = 0.0;
    if (it != results_by_set.end()) {
      const auto m = match_detections(it->second, gts, 0.5, true);
      f1 = precision_recall_f1(m.tp, m.fp, m.fn).f1;
    }
    report.f1_by_set.emplace_back(swap.set_id, f1);
    sum += f1;
  }
  report.average = swaps.empty() ? 0.0 : sum / static_cast<double>(swaps.size());
  return report;
}

// ---------------------------------------------------------------------------
// Emitters

double round_half_up(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  // The nudge keeps decimal ties such as 76.385 (stored as 76.38499...) rounding up.
  return std::floor(value * scale + 0.5 + 1e-9) / scale;
}

std::string percent(double fraction) { return text::fixed(round_half_up(fraction * 100.0, 2), 2); }

namespace {

json prf_json(const PRF& p) {
  return {{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}};
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.insert(0, width - s.size(), ' ');
  return s;
}

}  // namespace

std::string metrics_json(const MetricsReport& report) {
  json doc;
  doc["detections"] = report.detections;
  doc["ground_truths"] = report.ground_truths;
  doc["per_threshold"] = json::array();
  for (const auto& t : report.per_threshold) {
    json row = prf_json(t.prf);
    row["iou_threshold"] = t.iou_threshold;
    row["tp"] = t.tp;
    row["fp"] = t.fp;
    row["fn"] = t.fn;
    doc["per_threshold"].push_back(row);
  }
  doc["miou"] = prf_json(report.miou);
  return doc.dump(2) + "\n";
}

std::string metrics_table(const MetricsReport& report) {
  std::ostringstream out;
  out << "detections: " << report.detections << "  ground truths: " << report.ground_truths << "\n";
  out << pad("IoU", 8) << pad("TP", 7) << pad("FP", 7) << pad("FN", 7) << pad("R", 8) << pad("P", 8)
      << pad("F1", 8) << "\n";
  for (const auto& t : report.per_threshold) {
    out << pad(text::fixed(t.iou_threshold, 2), 8) << pad(std::to_string(t.tp), 7)
        << pad(std::to_string(t.fp), 7) << pad(std::to_string(t.fn), 7)
        << pad(percent(t.prf.recall), 8) << pad(percent(t.prf.precision), 8)
        << pad(percent(t.prf.f1), 8) << "\n";
  }
  out << pad("mIoU", 8) << pad("", 21) << pad(percent(report.miou.recall), 8)
      << pad(percent(report.miou.precision), 8) << pad(percent(report.miou.f1), 8) << "\n";
  return out.str();
}

std::string swap_table(const SwapReport& report) {
  std::ostringstream out;
  for (const auto& [set_id, _] : report.f1_by_set) out << pad(set_id, 10);
  out << pad("Avg", 10) << "\n";
  for (const auto& [_, f1] : report.f1_by_set) out << pad(percent(f1), 10);
  out << pad(percent(report.average), 10) << "\n";
  return out.str();
}

std::string swap_json(const SwapReport& report) {
  json doc;
  doc["sets"] = json::array();
  for (const auto& [set_id, f1] : report.f1_by_set) doc["sets"].push_back({{"set_id", set_id}, {"f1", f1}});
  doc["average"] = report.average;
  return doc.dump(2) + "\n";
}

std::string pr_curve_csv(std::span<const PrPoint> points) {
  std::string out = "score,recall,precision\n";
  for (const auto& p : points) {
    out += text::fixed(p.score, 6) + "," + text::fixed(p.recall, 6) + "," + text::fixed(p.precision, 6) + "\n";
  }
  return out;
}

std::string pr_curve_svg(std::span<const PrPoint> points, std::string_view title) {
  constexpr double kW = 480, kH = 360, kLeft = 60, kRight = 20, kTop = 40, kBottom = 50;
  const double pw = kW - kLeft - kRight;
  const double ph = kH - kTop - kBottom;
  auto px = [&](double recall) { return text::fixed(kLeft + recall * pw, 2); };
  auto py = [&](double precision) { return text::fixed(kTop + (1.0 - precision) * ph, 2); };

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
      << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  out << "  <rect x=\"0\" y=\"0\" width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
  out << "  <text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"14\">"
      << title << "</text>\n";
  out << "  <rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    out << "  <text x=\"" << px(v) << "\" y=\"" << kH - kBottom + 16
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << text::fixed(v, 2)
        << "</text>\n";
    out << "  <text x=\"" << kLeft - 6 << "\" y=\"" << py(v)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << text::fixed(v, 2)
        << "</text>\n";
  }
  out << "  <text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">recall</text>\n";
  out << "  <text x=\"16\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"12\" transform=\"rotate(-90 16 "
      << kTop + ph / 2 << ")\">precision</text>\n";
  if (!points.empty()) {
    out << "  <polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (i) out << ' ';
      out << px(points[i].recall) << ',' << py(points[i].precision);
    }
    out << "\"/>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace gwvlm
