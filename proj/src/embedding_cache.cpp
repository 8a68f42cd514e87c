#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "gwvlm/embedding.hpp"
#include "gwvlm/error.hpp"

namespace gwvlm {

namespace {

constexpr std::string_view kMagic = "GWEMB1";

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  bool has(std::size_t n) const { return bytes_.size() - pos_ >= n; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  template <typename T>
  T get_le() {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string_view take(std::size_t n) {
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_cache(std::span<const KeyedVector> entries, std::uint32_t dim) {
  if (!entries.empty()) {
    const auto first = static_cast<std::uint32_t>(entries.front().vector.dim());
    if (dim != 0 && dim != first) {
      throw Error(ErrorCode::kInvalidArgument, "cache dim " + std::to_string(dim) +
                                                   " does not match entry dim " +
                                                   std::to_string(first));
    }
    dim = first;
  }
  std::set<std::string_view> ids;
  std::string out;
  out.reserve(kMagic.size() + 14 + entries.size() * (2 + 16 + 4 * static_cast<std::size_t>(dim)));
  out += kMagic;
  put_le<std::uint16_t>(out, kCacheVersion);
  put_le<std::uint32_t>(out, dim);
  put_le<std::uint64_t>(out, entries.size());
  for (const auto& e : entries) {
    if (!ids.insert(e.id).second) {
      throw Error(ErrorCode::kInvalidArgument, "duplicate cache id '" + e.id + "'");
    }
    if (e.vector.dim() != dim) {
      throw Error(ErrorCode::kInvalidArgument, "cache entry '" + e.id + "' has dim " +
                                                   std::to_string(e.vector.dim()) + ", expected " +
                                                   std::to_string(dim));
    }
    if (e.id.size() > 0xffff) throw Error(ErrorCode::kInvalidArgument, "cache id too long");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.id.size()));
    out += e.id;
    for (double v : e.vector.values()) {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

CacheContents decode_cache(std::string_view bytes) {
  Reader in(bytes);
  if (!in.has(kMagic.size()) || in.take(kMagic.size()) != kMagic) {
    throw Error(ErrorCode::kParse, "bad magic: not a GWEMB1 cache");
  }
  if (!in.has(2 + 4 + 8)) throw Error(ErrorCode::kTruncated, "truncated header");
  const auto version = in.get_le<std::uint16_t>();
  if (version != kCacheVersion) {
    throw Error(ErrorCode::kParse, "unsupported cache version " + std::to_string(version));
  }
  CacheContents out;
  out.dim = in.get_le<std::uint32_t>();
  const auto count = in.get_le<std::uint64_t>();
  if (count > 0 && out.dim == 0) throw Error(ErrorCode::kParse, "cache with entries has dim 0");

  std::set<std::string, std::less<>> ids;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string where = "truncated record " + std::to_string(i);
    if (!in.has(2)) throw Error(ErrorCode::kTruncated, where);
    const auto id_len = in.get_le<std::uint16_t>();
    if (!in.has(id_len + static_cast<std::size_t>(out.dim) * 4)) {
      throw Error(ErrorCode::kTruncated, where);
    }
    std::string id(in.take(id_len));
    std::vector<double> values(out.dim);
    for (auto& v : values) v = std::bit_cast<float>(in.get_le<std::uint32_t>());
    if (!ids.insert(id).second) throw Error(ErrorCode::kParse, "duplicate cache id '" + id + "'");
    try {
      out.entries.push_back({std::move(id), EmbeddingVector(std::move(values))});
    } catch (const Error&) {
      throw Error(ErrorCode::kParse, "cache record " + std::to_string(i) + " is not finite");
    }
  }
  if (in.remaining() != 0) throw Error(ErrorCode::kParse, "trailing bytes after last record");
  return out;
}

void cache_write(const std::filesystem::path& path, std::span<const KeyedVector> entries,
                 std::uint32_t dim) {
  const std::string bytes = encode_cache(entries, dim);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

CacheContents read_cache_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_cache(ss.str());
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

FileCacheProvider::FileCacheProvider(std::vector<CacheContents> caches, std::string identity)
    : identity_(std::move(identity)) {
  for (auto& cache : caches) {
    if (cache.entries.empty()) continue;
    if (dim_ == 0) dim_ = cache.dim;
    if (cache.dim != dim_) {
      throw Error(ErrorCode::kConfig, "embedding caches disagree on dimension (" +
                                          std::to_string(dim_) + " vs " +
                                          std::to_string(cache.dim) + ")");
    }
    for (auto& e : cache.entries) {
      if (index_.contains(e.id)) {
        throw Error(ErrorCode::kConfig, "id '" + e.id + "' appears in more than one cache");
      }
      index_.emplace(e.id, storage_.size());
      storage_.push_back(std::move(e));
    }
  }
  if (dim_ == 0) {
    for (const auto& cache : caches) dim_ = std::max<std::size_t>(dim_, cache.dim);
  }
}

bool FileCacheProvider::contains(std::string_view id) const { return index_.find(id) != index_.end(); }

const EmbeddingVector& FileCacheProvider::lookup(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw Error(ErrorCode::kCacheMiss, "embedding cache has no entry '" + id + "'");
  return storage_[it->second].vector;
}

std::vector<EmbeddingVector> FileCacheProvider::embed_texts(std::span<const TextItem> items) {
  std::vector<EmbeddingVector> out;
  out.reserve(items.size());
  for (const auto& item : items) out.push_back(lookup(item.id));
  return out;
}

std::vector<EmbeddingVector> FileCacheProvider::embed_crops(const ImageSource&,
                                                            std::span<const CropSpec> crops) {
  std::vector<EmbeddingVector> out;
  out.reserve(crops.size());
  for (const auto& c : crops) out.push_back(lookup(c.crop_id));
  return out;
}

std::unique_ptr<FileCacheProvider> cache_read(std::span<const std::filesystem::path> paths) {
  std::vector<CacheContents> caches;
  std::string identity = "file_cache:";
  for (std::size_t i = 0; i < paths.size(); ++i) {
    caches.push_back(read_cache_file(paths[i]));
    if (i) identity += ',';
    identity += paths[i].filename().string();
  }
  return std::make_unique<FileCacheProvider>(std::move(caches), identity);
}

std::unique_ptr<FileCacheProvider> cache_read(const std::filesystem::path& path) {
  return cache_read(std::span<const std::filesystem::path>(&path, 1));
}

}  // namespace gwvlm
