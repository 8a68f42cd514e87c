#include "gwvlm/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <semaphore>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "gwvlm/error.hpp"
#include "gwvlm/image.hpp"
#include "gwvlm/prompt.hpp"
#include "text_util.hpp"

namespace gwvlm {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::kConfig, "SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_relative() ? base / path : path;
}

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorCode::kConfig, msg); }

SizeLevel parse_size_level(std::string_view s) {
  if (s == "small") return SizeLevel::kSmall;
  if (s == "medium") return SizeLevel::kMedium;
  if (s == "large") return SizeLevel::kLarge;
  config_error("unknown size level '" + std::string(s) + "'");
}

void check_keys(const json& obj, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) config_error(std::string(where) + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      config_error("unknown key '" + key + "' in " + std::string(where));
    }
  }
}

template <typename T>
T get_as(const json& obj, const char* key, std::string_view where, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    config_error(std::string(where) + "." + key + " has the wrong type");
  }
}

std::vector<double> number_list(const json& v, const std::string& where) {
  if (!v.is_array()) config_error(where + " must be a list of numbers");
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number()) config_error(where + " must be a list of numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

void check_unit_interval(const std::vector<double>& values, const std::string& where) {
  for (double v : values) {
    if (!(v > 0.0 && v <= 1.0)) config_error(where + " values must lie in (0, 1]");
  }
}

std::string image_id_from(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw Error(ErrorCode::kParse, "image ids must be strings or integers");
}

std::string iso8601(std::time_t t) {
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// SOURCE_DATE_EPOCH pins timestamps so repeated runs produce identical manifests.
std::string timestamp_now() {
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch != nullptr && *epoch != '\0') {
    try {
      return iso8601(static_cast<std::time_t>(std::stoll(epoch)));
    } catch (const std::exception&) {
      config_error("SOURCE_DATE_EPOCH is not an integer");
    }
  }
  return iso8601(std::chrono::system_clock::to_time_t(std::chrono::system_clock::now()));
}

bool anchor_less(const BBox& a, const BBox& b) {
  return std::tuple(a.image_id(), a.x1(), a.y1(), a.x2(), a.y2(), a.source()) <
         std::tuple(b.image_id(), b.x1(), b.y1(), b.x2(), b.y2(), b.source());
}

json bbox_json(const BBox& b) { return json::array({b.x1(), b.y1(), b.x2(), b.y2()}); }

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TopKConfig PipelineConfig::effective_top_k() const {
  return top_k ? *top_k : TopKConfig::defaults(scene_kind);
}

fs::path PipelineConfig::effective_template() const {
  if (template_path) return *template_path;
  return fs::path(GWVLM_RESOURCE_DIR) / "templates" / (std::string(to_string(scene_kind)) + ".txt");
}

void PipelineConfig::validate() const {
  if (!(nms_threshold > 0.0 && nms_threshold <= 1.0)) config_error("nms_threshold must lie in (0, 1]");
  for (const auto* t : {&size_thresholds.natural, &size_thresholds.remote_sensing}) {
    if (!(t->small_below > 0.0 && t->small_below < t->large_above && t->large_above <= 1.0)) {
      config_error("size thresholds need 0 < small_below < large_above <= 1");
    }
  }
  for (auto kind : {SceneKind::kNatural, SceneKind::kRemoteSensing}) {
    for (auto level : {SizeLevel::kSmall, SizeLevel::kMedium, SizeLevel::kLarge}) {
      const ScalePlan plan = plan_scales({level, 0.0}, kind, scales);
      for (const auto& e : plan.entries()) {
        if (e.role == ScaleRole::kZoomIn && !(e.factor > 0.0 && e.factor < 1.0)) {
          config_error("zoom-in factors must lie in (0, 1)");
        }
        if (e.role == ScaleRole::kZoomOut && !(e.factor > 1.0 && std::isfinite(e.factor))) {
          config_error("zoom-out factors must be greater than 1");
        }
      }
    }
  }
  const TopKConfig k = effective_top_k();
  if (k.primary == 0 || k.zoom == 0) config_error("top_k values must be positive");

  auto require_file = [](const fs::path& p, std::string_view what) {
    if (!fs::is_regular_file(p)) config_error(std::string(what) + " not found: " + p.string());
  };
  require_file(codebook, "codebook");
  require_file(effective_template(), "prompt template");
  if (vocabulary) require_file(*vocabulary, "vocabulary");
  for (const auto& s : swap_sets) require_file(s, "swap set");

  if (embedding.cache_paths.empty() && embedding.service_url.empty()) {
    config_error("no embedding provider: set embedding.cache, embedding.service_url or " +
                 std::string(kEmbedEndpointEnv));
  }
  for (const auto& p : embedding.cache_paths) require_file(p, "embedding cache");
  if (embedding.max_in_flight == 0 || embedding.batch_size == 0) {
    config_error("embedding max_in_flight and batch_size must be positive");
  }
  if (!(embedding.timeout_seconds > 0.0)) config_error("embedding timeout must be positive");

  chat.validate();
  if (chat_max_in_flight == 0) config_error("chat max_in_flight must be positive");
  if (workers == 0 || workers > 256) config_error("workers must lie in [1, 256]");
  if (!(fallback_floor >= -1.0 && fallback_floor <= 1.0)) {
    config_error("answer fallback floor must lie in [-1, 1]");
  }
  if (report_thresholds.empty() || miou_sweep.empty()) {
    config_error("evaluation thresholds must not be empty");
  }
  check_unit_interval(report_thresholds, "evaluation.report_thresholds");
  check_unit_interval(miou_sweep, "evaluation.miou_sweep");
}

PipelineConfig parse_config(std::string_view document, const fs::path& base_dir) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfig, std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(doc, "config",
             {"scene_kind", "proposals", "size_thresholds", "scales", "top_k", "codebook", "template",
              "embedding", "chat", "mock_llm", "vocabulary", "swap_sets", "answer_mapping", "prompt",
              "evaluation", "workers", "output_dir", "seed"});

  PipelineConfig cfg;
  try {
    if (doc.contains("scene_kind")) cfg.scene_kind = parse_scene_kind(doc["scene_kind"].get<std::string>());
  } catch (const json::exception&) {
    config_error("scene_kind must be a string");
  } catch (const Error& e) {
    config_error(e.what());
  }

  if (doc.contains("proposals")) {
    const auto& p = doc["proposals"];
    check_keys(p, "proposals", {"nms_threshold", "calibrate_scores"});
    cfg.nms_threshold = get_as(p, "nms_threshold", "proposals", cfg.nms_threshold);
    cfg.calibrate_scores = get_as(p, "calibrate_scores", "proposals", cfg.calibrate_scores);
  }

  if (doc.contains("size_thresholds")) {
    const auto& s = doc["size_thresholds"];
    check_keys(s, "size_thresholds", {"natural", "remote_sensing"});
    for (auto [key, target] : {std::pair{"natural", &cfg.size_thresholds.natural},
                               std::pair{"remote_sensing", &cfg.size_thresholds.remote_sensing}}) {
      if (!s.contains(key)) continue;
      const auto& t = s[key];
      const std::string where = std::string("size_thresholds.") + key;
      check_keys(t, where, {"small_below", "large_above"});
      target->small_below = get_as(t, "small_below", where, target->small_below);
      target->large_above = get_as(t, "large_above", where, target->large_above);
    }
  }

  if (doc.contains("scales")) {
    const auto& s = doc["scales"];
    check_keys(s, "scales", {"natural", "remote_sensing"});
    for (const auto& [scene, levels] : s.items()) {
      const SceneKind kind = parse_scene_kind(scene);
      check_keys(levels, "scales." + scene, {"small", "medium", "large"});
      for (const auto& [level, factors] : levels.items()) {
        const std::string where = "scales." + scene + "." + level;
        check_keys(factors, where, {"zoom_in", "zoom_out"});
        if (!factors.contains("zoom_in") || !factors.contains("zoom_out")) {
          config_error(where + " needs zoom_in and zoom_out");
        }
        cfg.scales.set(kind, parse_size_level(level),
                       {number_list(factors["zoom_in"], where + ".zoom_in"),
                        number_list(factors["zoom_out"], where + ".zoom_out")});
      }
    }
  }

  if (doc.contains("top_k") && !doc["top_k"].is_null()) {
    const auto& k = doc["top_k"];
    check_keys(k, "top_k", {"primary", "zoom"});
    TopKConfig base = TopKConfig::defaults(cfg.scene_kind);
    base.primary = get_as(k, "primary", "top_k", base.primary);
    base.zoom = get_as(k, "zoom", "top_k", base.zoom);
    cfg.top_k = base;
  }

  cfg.codebook = doc.contains("codebook")
                     ? resolve(base_dir, get_as<std::string>(doc, "codebook", "config", ""))
                     : fs::path(GWVLM_RESOURCE_DIR) / "codebook" / "starter_codebook.json";
  if (doc.contains("template") && !doc["template"].is_null()) {
    cfg.template_path = resolve(base_dir, get_as<std::string>(doc, "template", "config", ""));
  }

  if (doc.contains("embedding")) {
    const auto& e = doc["embedding"];
    check_keys(e, "embedding", {"cache", "service_url", "timeout_seconds", "max_in_flight", "batch_size"});
    if (e.contains("cache")) {
      const auto& c = e["cache"];
      if (c.is_string()) {
        cfg.embedding.cache_paths.push_back(resolve(base_dir, c.get<std::string>()));
      } else if (c.is_array()) {
        for (const auto& p : c) {
          if (!p.is_string()) config_error("embedding.cache entries must be paths");
          cfg.embedding.cache_paths.push_back(resolve(base_dir, p.get<std::string>()));
        }
      } else {
        config_error("embedding.cache must be a path or a list of paths");
      }
    }
    cfg.embedding.service_url = get_as(e, "service_url", "embedding", cfg.embedding.service_url);
    cfg.embedding.timeout_seconds = get_as(e, "timeout_seconds", "embedding", cfg.embedding.timeout_seconds);
    cfg.embedding.max_in_flight = get_as(e, "max_in_flight", "embedding", cfg.embedding.max_in_flight);
    cfg.embedding.batch_size = get_as(e, "batch_size", "embedding", cfg.embedding.batch_size);
  }
  if (cfg.embedding.cache_paths.empty() && cfg.embedding.service_url.empty()) {
    if (const char* env = std::getenv(std::string(kEmbedEndpointEnv).c_str())) cfg.embedding.service_url = env;
  }

  if (doc.contains("chat")) {
    const auto& c = doc["chat"];
    check_keys(c, "chat",
               {"endpoint", "model", "temperature", "max_tokens", "timeout_seconds", "retries",
                "backoff_initial_ms", "backoff_multiplier", "system_prompt", "max_in_flight"});
    if (c.contains("api_key")) config_error("chat.api_key must come from " + std::string(kApiKeyEnv));
    auto& ch = cfg.chat;
    ch.endpoint = get_as(c, "endpoint", "chat", ch.endpoint);
    ch.model = get_as(c, "model", "chat", ch.model);
    ch.temperature = get_as(c, "temperature", "chat", ch.temperature);
    ch.max_tokens = get_as(c, "max_tokens", "chat", ch.max_tokens);
    ch.timeout_seconds = get_as(c, "timeout_seconds", "chat", ch.timeout_seconds);
    ch.retries = get_as(c, "retries", "chat", ch.retries);
    ch.backoff_initial_ms = get_as(c, "backoff_initial_ms", "chat", ch.backoff_initial_ms);
    ch.backoff_multiplier = get_as(c, "backoff_multiplier", "chat", ch.backoff_multiplier);
    ch.system_prompt = get_as(c, "system_prompt", "chat", ch.system_prompt);
    cfg.chat_max_in_flight = get_as(c, "max_in_flight", "chat", cfg.chat_max_in_flight);
  }

  if (doc.contains("mock_llm")) {
    const auto& m = doc["mock_llm"];
    check_keys(m, "mock_llm", {"answers", "overrides"});
    if (m.contains("answers")) {
      if (!m["answers"].is_object()) config_error("mock_llm.answers must be an object");
      for (const auto& [k, v] : m["answers"].items()) {
        if (!v.is_string()) config_error("mock_llm.answers values must be strings");
        cfg.mock_llm.answers[k] = v.get<std::string>();
      }
    }
    if (m.contains("overrides")) {
      if (!m["overrides"].is_array()) config_error("mock_llm.overrides must be a list");
      for (const auto& o : m["overrides"]) {
        check_keys(o, "mock_llm.overrides[]", {"needle", "response"});
        if (!o.contains("needle") || !o.contains("response")) {
          config_error("mock_llm.overrides entries need needle and response");
        }
        cfg.mock_llm.overrides.emplace_back(get_as<std::string>(o, "needle", "mock_llm", ""),
                                            get_as<std::string>(o, "response", "mock_llm", ""));
      }
    }
  }

  if (doc.contains("vocabulary") && !doc["vocabulary"].is_null()) {
    cfg.vocabulary = resolve(base_dir, get_as<std::string>(doc, "vocabulary", "config", ""));
  }
  if (doc.contains("swap_sets")) {
    for (const auto& p : get_as<std::vector<std::string>>(doc, "swap_sets", "config", {})) {
      cfg.swap_sets.push_back(resolve(base_dir, p));
    }
  }
  if (doc.contains("answer_mapping")) {
    const auto& a = doc["answer_mapping"];
    check_keys(a, "answer_mapping", {"embedding_fallback", "fallback_floor"});
    cfg.embedding_fallback = get_as(a, "embedding_fallback", "answer_mapping", cfg.embedding_fallback);
    cfg.fallback_floor = get_as(a, "fallback_floor", "answer_mapping", cfg.fallback_floor);
  }
  if (doc.contains("prompt")) {
    const auto& p = doc["prompt"];
    check_keys(p, "prompt", {"scenario", "show_similarity", "closed_vocabulary_hint"});
    if (p.contains("scenario") && !p["scenario"].is_null()) {
      cfg.scenario = get_as<std::string>(p, "scenario", "prompt", "");
    }
    cfg.show_similarity = get_as(p, "show_similarity", "prompt", cfg.show_similarity);
    cfg.closed_vocabulary_hint = get_as(p, "closed_vocabulary_hint", "prompt", cfg.closed_vocabulary_hint);
  }
  if (doc.contains("evaluation")) {
    const auto& e = doc["evaluation"];
    check_keys(e, "evaluation", {"report_thresholds", "miou_sweep", "class_aware"});
    if (e.contains("report_thresholds")) {
      cfg.report_thresholds = number_list(e["report_thresholds"], "evaluation.report_thresholds");
    }
    if (e.contains("miou_sweep")) cfg.miou_sweep = number_list(e["miou_sweep"], "evaluation.miou_sweep");
    cfg.class_aware = get_as(e, "class_aware", "evaluation", cfg.class_aware);
  }
  cfg.workers = get_as(doc, "workers", "config", cfg.workers);
  if (doc.contains("output_dir")) {
    cfg.output_dir = resolve(base_dir, get_as<std::string>(doc, "output_dir", "config", ""));
  }
  cfg.seed = get_as(doc, "seed", "config", cfg.seed);

  cfg.hash = sha256_hex(doc.dump());
  return cfg;
}

PipelineConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    config_error(e.what());
  }
  PipelineConfig cfg = parse_config(text, path.parent_path());
  cfg.validate();
  return cfg;
}

std::string default_config_document() {
  const PipelineConfig d;
  auto factors_json = [&](SceneKind kind) {
    json out;
    for (auto level : {SizeLevel::kSmall, SizeLevel::kMedium, SizeLevel::kLarge}) {
      const ScaleFactors* f = d.scales.find(kind, level);
      out[std::string(to_string(level))] = {{"zoom_in", f->zoom_in}, {"zoom_out", f->zoom_out}};
    }
    return out;
  };
  const TopKConfig k = TopKConfig::defaults(d.scene_kind);
  json doc = {
      {"scene_kind", to_string(d.scene_kind)},
      {"proposals", {{"nms_threshold", d.nms_threshold}, {"calibrate_scores", d.calibrate_scores}}},
      {"size_thresholds",
       {{"natural",
         {{"small_below", d.size_thresholds.natural.small_below},
          {"large_above", d.size_thresholds.natural.large_above}}},
        {"remote_sensing",
         {{"small_below", d.size_thresholds.remote_sensing.small_below},
          {"large_above", d.size_thresholds.remote_sensing.large_above}}}}},
      {"scales",
       {{"natural", factors_json(SceneKind::kNatural)},
        {"remote_sensing", factors_json(SceneKind::kRemoteSensing)}}},
      {"top_k", {{"primary", k.primary}, {"zoom", k.zoom}}},
      {"embedding",
       {{"cache", json::array()},
        {"service_url", ""},
        {"timeout_seconds", d.embedding.timeout_seconds},
        {"max_in_flight", d.embedding.max_in_flight},
        {"batch_size", d.embedding.batch_size}}},
      {"chat",
       {{"endpoint", ""},
        {"model", d.chat.model},
        {"temperature", d.chat.temperature},
        {"max_tokens", d.chat.max_tokens},
        {"timeout_seconds", d.chat.timeout_seconds},
        {"retries", d.chat.retries},
        {"backoff_initial_ms", d.chat.backoff_initial_ms},
        {"backoff_multiplier", d.chat.backoff_multiplier},
        {"max_in_flight", d.chat_max_in_flight}}},
      {"swap_sets", json::array()},
      {"answer_mapping",
       {{"embedding_fallback", d.embedding_fallback}, {"fallback_floor", d.fallback_floor}}},
      {"prompt",
       {{"scenario", nullptr},
        {"show_similarity", d.show_similarity},
        {"closed_vocabulary_hint", d.closed_vocabulary_hint}}},
      {"evaluation",
       {{"report_thresholds", d.report_thresholds},
        {"miou_sweep", d.miou_sweep},
        {"class_aware", d.class_aware}}},
      {"workers", d.workers},
      {"output_dir", d.output_dir.string()},
      {"seed", d.seed},
  };
  return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Inputs

const ImageMeta* Dataset::find(std::string_view image_id) const {
  for (const auto& m : images) {
    if (m.image_id == image_id) return &m;
  }
  return nullptr;
}

Dataset parse_dataset(std::string_view document, SceneKind default_scene) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParse, std::string("annotations are not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("images") || !doc["images"].is_array()) {
    throw Error(ErrorCode::kParse, "annotations need an 'images' list");
  }

  Dataset ds;
  std::set<std::string> seen;
  try {
    for (const auto& img : doc["images"]) {
      ImageMeta meta;
      meta.image_id = image_id_from(img.at("id"));
      meta.width = img.at("width").get<int>();
      meta.height = img.at("height").get<int>();
      meta.scene_kind = default_scene;
      if (img.contains("resolution") && !img["resolution"].is_null()) {
        meta.resolution = img["resolution"].get<double>();
      }
      meta.validate();
      if (!seen.insert(meta.image_id).second) {
        throw Error(ErrorCode::kParse, "duplicate image id '" + meta.image_id + "'");
      }
      ds.file_names[meta.image_id] = img.value("file_name", meta.image_id + ".png");
      ds.images.push_back(std::move(meta));
    }

    std::map<long long, std::string> names;
    if (doc.contains("categories")) {
      for (const auto& c : doc["categories"]) {
        const auto id = c.at("id").get<long long>();
        const auto name = c.at("name").get<std::string>();
        if (!names.emplace(id, name).second) {
          throw Error(ErrorCode::kParse, "duplicate category id " + std::to_string(id));
        }
        ds.categories.push_back(name);
      }
    }

    if (doc.contains("annotations")) {
      std::size_t n = 0;
      for (const auto& a : doc["annotations"]) {
        const std::string where = "annotation " + std::to_string(n++);
        const std::string image_id = image_id_from(a.at("image_id"));
        if (!seen.count(image_id)) {
          throw Error(ErrorCode::kParse, where + " refers to unknown image '" + image_id + "'");
        }
        const auto cat = names.find(a.at("category_id").get<long long>());
        if (cat == names.end()) throw Error(ErrorCode::kParse, where + " has an unknown category_id");
        const auto& b = a.at("bbox");
        if (!b.is_array() || b.size() != 4) throw Error(ErrorCode::kParse, where + " bbox needs 4 numbers");
        const double x = b[0].get<double>(), y = b[1].get<double>();
        const double w = b[2].get<double>(), h = b[3].get<double>();
        try {
          ds.ground_truths.push_back({image_id, BBox(x, y, x + w, y + h, 1.0, "gt", image_id), cat->second});
        } catch (const Error& e) {
          throw Error(ErrorCode::kParse, where + ": " + e.what());
        }
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("malformed annotations: ") + e.what());
  }
  return ds;
}

Dataset load_dataset(const fs::path& annotations, SceneKind default_scene) {
  return parse_dataset(read_file(annotations), default_scene);
}

ProposalMap parse_proposals(std::string_view document) {
  ProposalMap out;
  const auto lines = text::split_lines(document);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string where = "proposals line " + std::to_string(i + 1);
    if (text::trim(lines[i]).empty()) continue;
    try {
      const json row = json::parse(lines[i]);
      const std::string image_id = image_id_from(row.at("image_id"));
      const auto& b = row.at("bbox");
      if (!b.is_array() || b.size() != 4) throw Error(ErrorCode::kParse, "bbox needs 4 numbers");
      const double score = row.value("score", 1.0);
      if (!(score >= 0.0 && score <= 1.0)) throw Error(ErrorCode::kParse, "score outside [0, 1]");
      const std::string source = row.value("source", std::string("rpn"));
      BBox box(b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>(), score,
               source, image_id);
      auto& sets = out[image_id];
      auto it = std::find_if(sets.begin(), sets.end(), [&](const ProposalSet& s) { return s.source == source; });
      if (it == sets.end()) {
        sets.push_back({source, {}});
        it = std::prev(sets.end());
      }
      it->boxes.push_back(std::move(box));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kParse, where + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorCode::kParse, where + ": " + e.what());
    }
  }
  return out;
}

ProposalMap load_proposals(const fs::path& path) { return parse_proposals(read_file(path)); }

// ---------------------------------------------------------------------------
// Detection run

std::unique_ptr<EmbeddingProvider> make_embedding_provider(const PipelineConfig& cfg) {
  if (!cfg.embedding.cache_paths.empty()) return cache_read(cfg.embedding.cache_paths);
  HttpEmbeddingProvider::Options opts;
  opts.base_url = cfg.embedding.service_url;
  opts.timeout_seconds = cfg.embedding.timeout_seconds;
  opts.max_in_flight = cfg.embedding.max_in_flight;
  opts.batch_size = cfg.embedding.batch_size;
  return std::make_unique<HttpEmbeddingProvider>(opts);
}

std::unique_ptr<ChatClient> make_chat_client(const PipelineConfig& cfg, bool mock) {
  if (mock) {
    auto client = std::make_unique<MockChatClient>(MockChatClient::Mode::kTopSnippet, cfg.seed);
    for (const auto& [k, v] : cfg.mock_llm.answers) client->set_answer(k, v);
    for (const auto& [needle, response] : cfg.mock_llm.overrides) client->add_override(needle, response);
    return client;
  }
  const ChatConfig env = cfg.chat.with_environment();
  if (env.endpoint.empty()) {
    config_error("no chat endpoint: set chat.endpoint or " + std::string(kEndpointEnv));
  }
  if (env.api_key.empty()) config_error("no API key: set " + std::string(kApiKeyEnv));
  return std::make_unique<HttpChatClient>();
}

Vocabulary run_vocabulary(const PipelineConfig& cfg, const Dataset& dataset) {
  if (cfg.vocabulary) return Vocabulary::load(*cfg.vocabulary);
  if (dataset.categories.empty()) {
    config_error("no vocabulary: configure one or supply annotations with categories");
  }
  return Vocabulary(dataset.categories);
}

namespace {

struct ObjectJob {
  const ImageMeta* meta = nullptr;
  BBox anchor;
};

struct ObjectOutcome {
  explicit ObjectOutcome(const BBox& anchor)
      : record{{anchor, std::string(kUnknownCategory), "", anchor.score()}, "", {}, anchor.source()},
        failure{anchor.image_id(), anchor, "", ""} {}

  DetectionRecord record;
  std::size_t crops = 0;
  bool failed = false;
  bool unknown = false;
  ObjectFailure failure;
};

std::vector<ObjectJob> collect_jobs(const PipelineConfig& cfg, const Dataset& dataset,
                                    const ProposalMap& proposals, RunCounts& counts) {
  for (const auto& [image_id, _] : proposals) {
    if (dataset.find(image_id) == nullptr) {
      throw Error(ErrorCode::kParse, "proposals refer to unknown image '" + image_id + "'");
    }
  }
  std::vector<ObjectJob> jobs;
  for (const auto& meta : dataset.images) {
    ++counts.images;
    const auto it = proposals.find(meta.image_id);
    if (it == proposals.end()) continue;
    for (const auto& set : it->second) counts.proposals_in += set.boxes.size();
    const auto merged = merge_proposals(it->second, {cfg.nms_threshold, cfg.calibrate_scores});
    counts.proposals_out += merged.size();
    for (const auto& b : merged) {
      if (b.image_id() != meta.image_id) {
        throw Error(ErrorCode::kInvalidArgument, "proposal filed under '" + meta.image_id +
                                                     "' belongs to '" + b.image_id() + "'");
      }
      jobs.push_back({&meta, b});
    }
  }
  return jobs;
}

// Category-name snippets matching a canonical category take its alias; ids stay.
Codebook swap_codebook(const Codebook& codebook, const Vocabulary& vocab, const SwapSet& swap) {
  std::vector<Snippet> snippets = codebook.snippets();
  for (auto& s : snippets) {
    if (!is_category_class(s.attribute_class)) continue;
    const std::string key = normalize_label(s.text);
    for (const auto& canonical : vocab.categories()) {
      if (normalize_label(canonical) == key) s.text = swap.alias_of(vocab, canonical);
    }
  }
  return Codebook(std::move(snippets), codebook.domain());
}

std::string stage_for(const Error& e, std::string_view current) {
  if (e.code() == ErrorCode::kUnparseableAnswer || e.code() == ErrorCode::kEmptyCompletion) return "parse";
  return std::string(current);
}

}  // namespace

DetectResult run_detect(const RunContext& ctx, const SwapSet* swap) {
  const PipelineConfig& cfg = ctx.config;
  DetectResult result;
  RunManifest& manifest = result.manifest;
  manifest.started_at = timestamp_now();
  manifest.config_hash = cfg.hash;
  manifest.embedding_provider = ctx.embeddings.identity();
  manifest.chat_client = ctx.chat.identity();
  if (swap) manifest.swap_set = swap->set_id;

  const Vocabulary vocab = run_vocabulary(cfg, ctx.dataset);
  std::optional<Vocabulary> alias_vocab;
  if (swap) alias_vocab = alias_vocabulary(vocab, *swap);
  const Vocabulary& answer_vocab = swap ? *alias_vocab : vocab;

  Codebook codebook = load_codebook(cfg.codebook, cfg.scene_kind);
  if (swap) codebook = swap_codebook(codebook, vocab, *swap);
  const PromptTemplate tmpl = load_template(cfg.effective_template(), cfg.scene_kind);
  manifest.template_id = tmpl.template_id();

  RunCounts counts;
  const auto jobs = collect_jobs(cfg, ctx.dataset, ctx.proposals, counts);

  std::optional<SnippetIndex> index;
  FallbackMapper fallback;
  if (!jobs.empty()) {
    index.emplace(codebook, ctx.embeddings);
    if (cfg.embedding_fallback) fallback = embedding_fallback(ctx.embeddings, answer_vocab, cfg.fallback_floor);
  }

  const TopKConfig top_k = cfg.effective_top_k();
  const std::string scenario = cfg.scenario ? *cfg.scenario : default_scenario(cfg.scene_kind);
  std::counting_semaphore<1024> chat_slots(
      static_cast<std::ptrdiff_t>(std::min<std::size_t>(cfg.chat_max_in_flight, 1024)));

  std::vector<ObjectOutcome> outcomes;
  outcomes.reserve(jobs.size());
  for (const auto& job : jobs) outcomes.emplace_back(job.anchor);
  auto process = [&](std::size_t i) {
    const ObjectJob& job = jobs[i];
    ObjectOutcome& out = outcomes[i];
    const BBox& anchor = job.anchor;
    std::string stage = "plan";
    try {
      const SizeClass size = classify_size(anchor, *job.meta, cfg.size_thresholds);
      const ScalePlan plan = plan_scales(size, cfg.scene_kind, cfg.scales);

      stage = "search";
      fs::path image_path;
      if (!ctx.images_dir.empty()) image_path = ctx.images_dir / ctx.dataset.file_names.at(job.meta->image_id);
      const ImageSource source{image_path, *job.meta};
      const ScaleMatches matches = search_object(anchor, plan, source, *index, ctx.embeddings, top_k);
      std::set<std::string> crop_ids;
      for (const auto& l : matches.per_role) crop_ids.insert(l.crop_id);
      out.crops = crop_ids.size();
      for (const auto& m : matches.anchor_matches()) out.record.snippets_used.push_back(m.snippet_id);

      stage = "prompt";
      const SpatialInfo spatial = compute_spatial_info(anchor, *job.meta, size);
      PromptContext pctx = context_from_matches(matches, codebook, spatial, cfg.scene_kind, scenario);
      pctx.show_similarity = cfg.show_similarity;
      if (cfg.closed_vocabulary_hint) pctx.vocabulary_hint = answer_vocab.categories();
      const std::string prompt = render_prompt(tmpl, pctx);

      stage = "llm";
      GuessResult guess = [&] {
        chat_slots.acquire();
        try {
          auto g = guess_category(ctx.chat, prompt, cfg.chat);
          chat_slots.release();
          return g;
        } catch (...) {
          chat_slots.release();
          throw;
        }
      }();

      stage = "map";
      std::string category = map_answer(guess.category_raw, answer_vocab, fallback);
      if (swap) category = swap->canonical_of(vocab, category);
      out.record.detection.category = category;
      out.record.detection.category_raw = guess.category_raw;
      out.record.reasoning = guess.reasoning;
      out.unknown = category == kUnknownCategory;
    } catch (const std::exception& e) {
      const auto* err = dynamic_cast<const Error*>(&e);
      out.failed = true;
      out.unknown = true;
      out.failure = {job.meta->image_id, anchor, err ? stage_for(*err, stage) : stage, e.what()};
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.workers, jobs.size()));
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) process(i);
      });
    }
  }

  std::vector<std::size_t> order(jobs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return anchor_less(jobs[a].anchor, jobs[b].anchor); });

  for (const std::size_t i : order) {
    auto& out = outcomes[i];
    ++counts.prompts;
    counts.crops += out.crops;
    if (out.failed) {
      ++counts.failures;
      manifest.failures.push_back(std::move(out.failure));
    } else {
      ++counts.answers;
    }
    if (out.unknown) ++counts.unknowns;
    result.detections.push_back(std::move(out.record));
  }
  manifest.counts = counts;
  manifest.finished_at = timestamp_now();
  return result;
}

std::vector<std::pair<ImageSource, std::vector<CropSpec>>> plan_all_crops(const PipelineConfig& cfg,
                                                                         const Dataset& dataset,
                                                                         const ProposalMap& proposals,
                                                                         const fs::path& images_dir) {
  RunCounts counts;
  const auto jobs = collect_jobs(cfg, dataset, proposals, counts);
  std::vector<std::pair<ImageSource, std::vector<CropSpec>>> out;
  std::set<std::string> seen;
  for (const auto& job : jobs) {
    if (out.empty() || out.back().first.meta.image_id != job.meta->image_id) {
      fs::path path;
      if (!images_dir.empty()) path = images_dir / dataset.file_names.at(job.meta->image_id);
      out.push_back({ImageSource{path, *job.meta}, {}});
    }
    const SizeClass size = classify_size(job.anchor, *job.meta, cfg.size_thresholds);
    const ScalePlan plan = plan_scales(size, cfg.scene_kind, cfg.scales);
    for (auto& crop : make_crops(job.anchor, plan, *job.meta)) {
      if (seen.insert(crop.crop_id).second) out.back().second.push_back(std::move(crop));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Outputs

std::string detections_jsonl(std::span<const DetectionRecord> detections) {
  std::string out;
  for (const auto& r : detections) {
    const auto& d = r.detection;
    json row = {{"image_id", d.bbox.image_id()},
                {"bbox", bbox_json(d.bbox)},
                {"score", d.score},
                {"category", d.category},
                {"category_raw", d.category_raw},
                {"reasoning", r.reasoning},
                {"snippets_used", r.snippets_used},
                {"source", r.source}};
    out += row.dump() + "\n";
  }
  return out;
}

std::vector<Detection> parse_detections(std::string_view document) {
  std::vector<Detection> out;
  const auto lines = text::split_lines(document);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (text::trim(lines[i]).empty()) continue;
    try {
      const json row = json::parse(lines[i]);
      const std::string image_id = image_id_from(row.at("image_id"));
      const auto& b = row.at("bbox");
      const double score = row.value("score", 1.0);
      out.push_back({BBox(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                          b.at(3).get<double>(), score, row.value("source", std::string()), image_id),
                     row.at("category").get<std::string>(), row.value("category_raw", std::string()),
                     score});
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kParse, "detections line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

std::vector<Detection> load_detections(const fs::path& path) { return parse_detections(read_file(path)); }

std::string manifest_json(const RunManifest& m) {
  json doc = {{"config_hash", m.config_hash},
              {"embedding_provider", m.embedding_provider},
              {"chat_client", m.chat_client},
              {"template_id", m.template_id},
              {"swap_set", m.swap_set},
              {"started_at", m.started_at},
              {"finished_at", m.finished_at},
              {"counts",
               {{"images", m.counts.images},
                {"proposals_in", m.counts.proposals_in},
                {"proposals_out", m.counts.proposals_out},
                {"crops", m.counts.crops},
                {"prompts", m.counts.prompts},
                {"answers", m.counts.answers},
                {"failures", m.counts.failures},
                {"unknowns", m.counts.unknowns}}},
              {"failures", json::array()}};
  for (const auto& f : m.failures) {
    doc["failures"].push_back({{"image_id", f.image_id},
                               {"bbox", bbox_json(f.anchor)},
                               {"stage", f.stage},
                               {"message", f.message}});
  }
  return doc.dump(2) + "\n";
}

void write_text(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw Error(ErrorCode::kIo, "cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << content;
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

MetricsReport emit_metrics(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                           const PipelineConfig& cfg, const fs::path& out_dir) {
  const MetricsReport report = compute_report(dets, gts, cfg.report_thresholds, cfg.miou_sweep, cfg.class_aware);
  write_text(out_dir / "metrics.json", metrics_json(report));
  write_text(out_dir / "metrics.txt", metrics_table(report));
  const auto curve = pr_curve(dets, gts, cfg.report_thresholds.front(), cfg.class_aware);
  write_text(out_dir / "pr_curve.csv", pr_curve_csv(curve));
  write_text(out_dir / "pr_curve.svg",
             pr_curve_svg(curve, "Precision-recall @ IoU " + text::fixed(cfg.report_thresholds.front(), 2)));
  return report;
}

void emit_swap_report(const SwapReport& report, const fs::path& out_dir) {
  write_text(out_dir / "swap.json", swap_json(report));
  write_text(out_dir / "swap.txt", swap_table(report));
}

std::string render_overlay(const fs::path& image_path, const ImageMeta& meta, std::span<const Detection> dets,
                           const std::vector<GroundTruth>* gts) {
  if (!fs::is_regular_file(image_path)) throw Error(ErrorCode::kIo, "image not found: " + image_path.string());
  const Image pixels = load_image(image_path);
  const std::string png = encode_png(pixels);

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << meta.width << "\" height=\"" << meta.height
      << "\" viewBox=\"0 0 " << meta.width << " " << meta.height << "\">\n";
  out << "  <image x=\"0\" y=\"0\" width=\"" << meta.width << "\" height=\"" << meta.height
      << "\" href=\"data:image/png;base64," << base64_encode(png) << "\"/>\n";
  out << "  <rect class=\"frame\" x=\"0\" y=\"0\" width=\"" << meta.width << "\" height=\"" << meta.height
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  auto rect = [&](const BBox& b, std::string_view cls, std::string_view style) {
    out << "  <rect class=\"" << cls << "\" x=\"" << format_g(b.x1()) << "\" y=\"" << format_g(b.y1())
        << "\" width=\"" << format_g(b.width()) << "\" height=\"" << format_g(b.height())
        << "\" fill=\"none\" " << style << "/>\n";
  };
  if (gts) {
    for (const auto& g : *gts) {
      if (g.image_id != meta.image_id) continue;
      rect(g.bbox, "gt", "stroke=\"#2ca02c\" stroke-width=\"2\" stroke-dasharray=\"6 3\"");
      out << "  <text class=\"gt-label\" x=\"" << format_g(g.bbox.x1()) << "\" y=\""
          << format_g(g.bbox.y2() + 12) << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#2ca02c\">"
          << xml_escape(g.category) << "</text>\n";
    }
  }
  for (const auto& d : dets) {
    if (d.bbox.image_id() != meta.image_id) {
      throw Error(ErrorCode::kInvalidArgument,
                  "detection for '" + d.bbox.image_id() + "' passed to the overlay of '" + meta.image_id + "'");
    }
    rect(d.bbox, "det", "stroke=\"#d62728\" stroke-width=\"2\"");
    out << "  <text class=\"det-label\" x=\"" << format_g(d.bbox.x1()) << "\" y=\""
        << format_g(std::max(10.0, d.bbox.y1() - 3)) << "\" font-family=\"sans-serif\" font-size=\"11\" "
        << "fill=\"#d62728\">" << xml_escape(d.category) << " " << text::fixed(d.score, 2) << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace gwvlm
