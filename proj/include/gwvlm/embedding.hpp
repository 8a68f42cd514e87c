#pragma once

// Multi-scale visual-language search: embed every view of an object, score
// it against the snippet codebook by cosine similarity and keep the Top-K
// snippets per view.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gwvlm/codebook.hpp"
#include "gwvlm/geometry.hpp"

namespace gwvlm {

// Raw encoder output; normalization happens inside cosine().
class EmbeddingVector {
 public:
  // Throws kInvalidArgument on empty or non-finite input.
  explicit EmbeddingVector(std::vector<double> values);

  std::size_t dim() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;

 private:
  std::vector<double> values_;
};

// u.v / (|u| |v|), clamped to [-1, 1]. Throws on zero norm or dim mismatch.
double cosine(const EmbeddingVector& u, const EmbeddingVector& v);

struct KeyedVector {
  std::string id;
  EmbeddingVector vector;
};

struct SnippetMatch {
  std::string snippet_id;
  double similarity = 0.0;

  friend bool operator==(const SnippetMatch&, const SnippetMatch&) = default;
};

// Descending similarity, ties by ascending id.
bool match_order(const SnippetMatch& a, const SnippetMatch& b) noexcept;

// The min(k, |codebook|) most similar entries in match_order.
std::vector<SnippetMatch> topk_soft_align(const EmbeddingVector& query,
                                          std::span<const KeyedVector> codebook, std::size_t k);

enum class ProviderKind { kFileCache, kHttpService };

struct TextItem {
  std::string id;
  std::string text;
};

struct ImageSource {
  std::filesystem::path path;  // may be empty for cache-backed runs
  ImageMeta meta;
};

// Source of text and crop embeddings. Implementations must be safe to call
// from several threads at once.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;

  virtual ProviderKind kind() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::string identity() const = 0;

  virtual std::vector<EmbeddingVector> embed_texts(std::span<const TextItem> items) = 0;
  virtual std::vector<EmbeddingVector> embed_crops(const ImageSource& image,
                                                   std::span<const CropSpec> crops) = 0;
};

// Checked wrappers: non-empty input, one output per input in order, and the
// provider's declared dimension on every vector.
std::vector<EmbeddingVector> embed_texts(EmbeddingProvider& provider,
                                         std::span<const TextItem> items);
std::vector<EmbeddingVector> embed_crops(EmbeddingProvider& provider, const ImageSource& image,
                                         std::span<const CropSpec> crops);

// Snippet embeddings, computed once per run and shared across objects.
class SnippetIndex {
 public:
  SnippetIndex(const Codebook& codebook, EmbeddingProvider& provider);
  SnippetIndex(std::vector<KeyedVector> entries) : entries_(std::move(entries)) {}

  std::span<const KeyedVector> entries() const noexcept { return entries_; }

 private:
  std::vector<KeyedVector> entries_;
};

struct TopKConfig {
  std::size_t primary = 3;
  std::size_t zoom = 3;

  static TopKConfig defaults(SceneKind kind);
  std::size_t for_role(ScaleRole role) const noexcept {
    return role == ScaleRole::kPrimary ? primary : zoom;
  }
};

struct ScaleMatchList {
  ScaleEntry entry;
  std::string crop_id;
  std::vector<SnippetMatch> matches;
};

// One list per plan entry, in plan order; the primary view comes first.
struct ScaleMatches {
  std::vector<ScaleMatchList> per_role;

  const std::vector<SnippetMatch>& anchor_matches() const;
};

// Zoom views that clip to the same pixels as an earlier view share that
// view's crop and embedding.
ScaleMatches search_object(const BBox& anchor, const ScalePlan& plan, const ImageSource& image,
                           const SnippetIndex& index, EmbeddingProvider& provider,
                           const TopKConfig& k);

// ---------------------------------------------------------------------------
// GWEMB1 cache files
//
//   "GWEMB1" | u16 version=1 | u32 dim | u64 count |
//   count x { u16 id_len | id bytes | dim x f32 }     (all little-endian)

inline constexpr std::uint16_t kCacheVersion = 1;

struct CacheContents {
  std::uint32_t dim = 0;
  std::vector<KeyedVector> entries;
};

// Values are narrowed to f32; float-representable input round-trips exactly.
std::string encode_cache(std::span<const KeyedVector> entries, std::uint32_t dim = 0);
CacheContents decode_cache(std::string_view bytes);

void cache_write(const std::filesystem::path& path, std::span<const KeyedVector> entries,
                 std::uint32_t dim = 0);
CacheContents read_cache_file(const std::filesystem::path& path);

// Read-only id lookup; crops are looked up by crop_id, texts by item id.
class FileCacheProvider final : public EmbeddingProvider {
 public:
  explicit FileCacheProvider(std::vector<CacheContents> caches, std::string identity = "file_cache");

  ProviderKind kind() const override { return ProviderKind::kFileCache; }
  std::size_t dim() const override { return dim_; }
  std::string identity() const override { return identity_; }

  bool contains(std::string_view id) const;
  std::size_t size() const noexcept { return index_.size(); }

  std::vector<EmbeddingVector> embed_texts(std::span<const TextItem> items) override;
  std::vector<EmbeddingVector> embed_crops(const ImageSource& image,
                                           std::span<const CropSpec> crops) override;

 private:
  const EmbeddingVector& lookup(const std::string& id) const;

  std::size_t dim_ = 0;
  std::string identity_;
  std::vector<KeyedVector> storage_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

std::unique_ptr<FileCacheProvider> cache_read(std::span<const std::filesystem::path> paths);
std::unique_ptr<FileCacheProvider> cache_read(const std::filesystem::path& path);

// Client for the embedding service protocol:
//   POST /v1/embed/text   {"texts": [...]}                     -> {"dim", "vectors"}
//   POST /v1/embed/image  {"images_b64": [...], "resize": 224} -> {"dim", "vectors"}
//   GET  /healthz                                              -> {"dim", "model"}
class HttpEmbeddingProvider final : public EmbeddingProvider {
 public:
  struct Options {
    std::string base_url;
    double timeout_seconds = 60.0;
    std::size_t max_in_flight = 4;
    std::size_t batch_size = 64;
  };

  // Queries /healthz for the model name and dimension.
  explicit HttpEmbeddingProvider(Options options);
  ~HttpEmbeddingProvider() override;

  ProviderKind kind() const override { return ProviderKind::kHttpService; }
  std::size_t dim() const override { return dim_; }
  std::string identity() const override { return "http:" + model_; }

  std::vector<EmbeddingVector> embed_texts(std::span<const TextItem> items) override;
  std::vector<EmbeddingVector> embed_crops(const ImageSource& image,
                                           std::span<const CropSpec> crops) override;

 private:
  std::vector<EmbeddingVector> post(std::string_view path, const std::string& body,
                                    std::size_t expected);

  struct Limiter;
  Options options_;
  std::size_t dim_ = 0;
  std::string model_;
  std::unique_ptr<Limiter> limiter_;
};

}  // namespace gwvlm
