#include "gwvlm/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "gwvlm/error.hpp"

namespace gwvlm {

EmbeddingVector::EmbeddingVector(std::vector<double> values) : values_(std::move(values)) {
  if (values_.empty()) throw Error(ErrorCode::kInvalidArgument, "embedding has no components");
  for (double v : values_) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kInvalidArgument, "embedding is not finite");
  }
}

double cosine(const EmbeddingVector& u, const EmbeddingVector& v) {
  if (u.dim() != v.dim()) {
    throw Error(ErrorCode::kInvalidArgument, "cosine of vectors with dims " +
                                                 std::to_string(u.dim()) + " and " +
                                                 std::to_string(v.dim()));
  }
  const auto a = u.values();
  const auto b = v.values();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw Error(ErrorCode::kInvalidArgument, "cosine of zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

bool match_order(const SnippetMatch& a, const SnippetMatch& b) noexcept {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return a.snippet_id < b.snippet_id;
}

std::vector<SnippetMatch> topk_soft_align(const EmbeddingVector& query,
                                          std::span<const KeyedVector> codebook, std::size_t k) {
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "top-k needs k >= 1");
  if (codebook.empty()) throw Error(ErrorCode::kInvalidArgument, "top-k over an empty codebook");
  std::vector<SnippetMatch> scored;
  scored.reserve(codebook.size());
  for (const auto& entry : codebook) scored.push_back({entry.id, cosine(query, entry.vector)});
  const std::size_t keep = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep),
                    scored.end(), match_order);
  scored.resize(keep);
  return scored;
}

namespace {

void check_outputs(const EmbeddingProvider& provider, const std::vector<EmbeddingVector>& out,
                   std::size_t expected) {
  if (out.size() != expected) {
    throw Error(ErrorCode::kDecode, provider.identity() + " returned " + std::to_string(out.size()) +
                                        " vectors for " + std::to_string(expected) + " inputs");
  }
  for (const auto& v : out) {
    if (v.dim() != provider.dim()) {
      throw Error(ErrorCode::kDecode, provider.identity() + " returned a vector of dim " +
                                          std::to_string(v.dim()) + ", expected " +
                                          std::to_string(provider.dim()));
    }
  }
}

}  // namespace

std::vector<EmbeddingVector> embed_texts(EmbeddingProvider& provider,
                                         std::span<const TextItem> items) {
  if (items.empty()) throw Error(ErrorCode::kInvalidArgument, "no texts to embed");
  auto out = provider.embed_texts(items);
  check_outputs(provider, out, items.size());
  return out;
}

std::vector<EmbeddingVector> embed_crops(EmbeddingProvider& provider, const ImageSource& image,
                                         std::span<const CropSpec> crops) {
  if (crops.empty()) throw Error(ErrorCode::kInvalidArgument, "no crops to embed");
  std::set<std::string_view> ids;
  for (const auto& c : crops) {
    if (!ids.insert(c.crop_id).second) {
      throw Error(ErrorCode::kInvalidArgument, "duplicate crop id '" + c.crop_id + "'");
    }
  }
  auto out = provider.embed_crops(image, crops);
  check_outputs(provider, out, crops.size());
  return out;
}

SnippetIndex::SnippetIndex(const Codebook& codebook, EmbeddingProvider& provider) {
  std::vector<TextItem> items;
  items.reserve(codebook.size());
  for (const auto& s : codebook.snippets()) items.push_back({s.snippet_id, s.text});
  auto vectors = embed_texts(provider, items);
  entries_.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    entries_.push_back({items[i].id, std::move(vectors[i])});
  }
}

TopKConfig TopKConfig::defaults(SceneKind kind) {
  return kind == SceneKind::kNatural ? TopKConfig{3, 3} : TopKConfig{3, 5};
}

const std::vector<SnippetMatch>& ScaleMatches::anchor_matches() const {
  for (const auto& list : per_role) {
    if (list.entry.role == ScaleRole::kPrimary) return list.matches;
  }
  throw Error(ErrorCode::kInvalidArgument, "scale matches lack a primary view");
}

ScaleMatches search_object(const BBox& anchor, const ScalePlan& plan, const ImageSource& image,
                           const SnippetIndex& index, EmbeddingProvider& provider,
                           const TopKConfig& k) {
  const auto crops = make_crops(anchor, plan, image.meta);
  const auto vectors = embed_crops(provider, image, crops);

  ScaleMatches out;
  out.per_role.reserve(plan.entries().size());
  for (const auto& entry : plan.entries()) {
    const BBox view = scale_box(anchor, entry.factor, image.meta);
    const auto it = std::find_if(crops.begin(), crops.end(),
                                 [&](const CropSpec& c) { return c.bbox.same_extent(view); });
    const auto idx = static_cast<std::size_t>(it - crops.begin());
    out.per_role.push_back(
        {entry, it->crop_id, topk_soft_align(vectors[idx], index.entries(), k.for_role(entry.role))});
  }
  return out;
}

}  // namespace gwvlm
