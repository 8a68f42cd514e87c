#include <semaphore>

#include <nlohmann/json.hpp>

#include "gwvlm/embedding.hpp"
#include "gwvlm/error.hpp"
#include "gwvlm/image.hpp"
#include "http.hpp"

namespace gwvlm {

using nlohmann::json;

struct HttpEmbeddingProvider::Limiter {
  explicit Limiter(std::size_t n) : slots(static_cast<std::ptrdiff_t>(n)) {}
  std::counting_semaphore<1024> slots;
};

namespace {

class SlotGuard {
 public:
  explicit SlotGuard(std::counting_semaphore<1024>& s) : s_(s) { s_.acquire(); }
  ~SlotGuard() { s_.release(); }
  SlotGuard(const SlotGuard&) = delete;
  SlotGuard& operator=(const SlotGuard&) = delete;

 private:
  std::counting_semaphore<1024>& s_;
};

json parse_body(const http::Response& r, std::string_view what) {
  if (r.status >= 400) {
    throw HttpError(r.status, std::string(what) + " returned status " + std::to_string(r.status));
  }
  try {
    return json::parse(r.body);
  } catch (const json::parse_error&) {
    throw Error(ErrorCode::kDecode, std::string(what) + " returned invalid JSON");
  }
}

}  // namespace

HttpEmbeddingProvider::HttpEmbeddingProvider(Options options) : options_(std::move(options)) {
  if (options_.max_in_flight == 0 || options_.max_in_flight > 1024) {
    throw Error(ErrorCode::kConfig, "embedding max_in_flight must lie in [1, 1024]");
  }
  if (options_.batch_size == 0) throw Error(ErrorCode::kConfig, "embedding batch size must be positive");
  limiter_ = std::make_unique<Limiter>(options_.max_in_flight);

  const auto base = http::parse_url(options_.base_url);
  const auto doc = parse_body(http::get(base, "/healthz", {}, options_.timeout_seconds), "/healthz");
  if (!doc.is_object() || !doc.contains("dim") || !doc["dim"].is_number_unsigned() ||
      doc["dim"].get<std::size_t>() == 0) {
    throw Error(ErrorCode::kDecode, "/healthz response lacks a positive dim");
  }
  dim_ = doc["dim"].get<std::size_t>();
  model_ = doc.value("model", std::string("unknown"));
}

HttpEmbeddingProvider::~HttpEmbeddingProvider() = default;

std::vector<EmbeddingVector> HttpEmbeddingProvider::post(std::string_view path,
                                                         const std::string& body,
                                                         std::size_t expected) {
  const auto base = http::parse_url(options_.base_url);
  http::Response response;
  {
    SlotGuard slot(limiter_->slots);
    response = http::post_json(base, path, body, {}, options_.timeout_seconds);
  }
  const auto doc = parse_body(response, path);
  if (!doc.is_object() || !doc.contains("vectors") || !doc["vectors"].is_array()) {
    throw Error(ErrorCode::kDecode, std::string(path) + " response lacks 'vectors'");
  }
  if (doc.contains("dim") && doc["dim"] != dim_) {
    throw Error(ErrorCode::kDecode, std::string(path) + " answered with a different dim");
  }
  if (doc["vectors"].size() != expected) {
    throw Error(ErrorCode::kDecode, std::string(path) + " returned " +
                                        std::to_string(doc["vectors"].size()) + " vectors for " +
                                        std::to_string(expected) + " inputs");
  }
  std::vector<EmbeddingVector> out;
  out.reserve(expected);
  for (const auto& row : doc["vectors"]) {
    if (!row.is_array()) throw Error(ErrorCode::kDecode, "embedding row is not a list");
    std::vector<double> values;
    values.reserve(row.size());
    for (const auto& v : row) {
      if (!v.is_number()) throw Error(ErrorCode::kDecode, "embedding component is not a number");
      values.push_back(v.get<double>());
    }
    try {
      out.emplace_back(std::move(values));
    } catch (const Error& e) {
      throw Error(ErrorCode::kDecode, std::string(path) + ": " + e.what());
    }
  }
  return out;
}

std::vector<EmbeddingVector> HttpEmbeddingProvider::embed_texts(std::span<const TextItem> items) {
  std::vector<EmbeddingVector> out;
  out.reserve(items.size());
  for (std::size_t start = 0; start < items.size(); start += options_.batch_size) {
    const auto batch = items.subspan(start, std::min(options_.batch_size, items.size() - start));
    json body;
    body["texts"] = json::array();
    for (const auto& item : batch) body["texts"].push_back(item.text);
    auto vectors = post("/v1/embed/text", body.dump(), batch.size());
    for (auto& v : vectors) out.push_back(std::move(v));
  }
  return out;
}

std::vector<EmbeddingVector> HttpEmbeddingProvider::embed_crops(const ImageSource& image,
                                                                std::span<const CropSpec> crops) {
  const Image pixels = load_image(image.path);
  if (pixels.width != image.meta.width || pixels.height != image.meta.height) {
    throw Error(ErrorCode::kDecode, image.path.string() + " is " + std::to_string(pixels.width) +
                                        "x" + std::to_string(pixels.height) +
                                        " but its metadata says " +
                                        std::to_string(image.meta.width) + "x" +
                                        std::to_string(image.meta.height));
  }
  std::vector<EmbeddingVector> out;
  out.reserve(crops.size());
  for (std::size_t start = 0; start < crops.size(); start += options_.batch_size) {
    const auto batch = crops.subspan(start, std::min(options_.batch_size, crops.size() - start));
    json body;
    body["images_b64"] = json::array();
    for (const auto& crop : batch) {
      const Image view =
          resize_bilinear(crop_image(pixels, crop.bbox), kEncoderInputSize, kEncoderInputSize);
      body["images_b64"].push_back(base64_encode(encode_png(view)));
    }
    body["resize"] = kEncoderInputSize;
    auto vectors = post("/v1/embed/image", body.dump(), batch.size());
    for (auto& v : vectors) out.push_back(std::move(v));
  }
  return out;
}

}  // namespace gwvlm
