#include <doctest.h>

#include <cmath>
#include <mutex>
#include <random>

#include <nlohmann/json.hpp>

#include "gwvlm/embedding.hpp"
#include "gwvlm/error.hpp"
#include "gwvlm/image.hpp"
#include "oracles.hpp"
#include "test_server.hpp"
#include "test_util.hpp"

using namespace gwvlm;
using nlohmann::json;

namespace {

ImageMeta meta(int w, int h, SceneKind kind) {
  ImageMeta m;
  m.image_id = "img";
  m.width = w;
  m.height = h;
  m.scene_kind = kind;
  return m;
}

EmbeddingVector vec(std::vector<double> v) { return EmbeddingVector(std::move(v)); }

std::vector<KeyedVector> random_book(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
  std::vector<KeyedVector> book;
  for (std::size_t i = 0; i < n; ++i) {
    book.push_back({"s" + std::to_string(i), vec(oracle::random_vector(rng, dim))});
  }
  return book;
}

// Cache holding a vector for every crop id the plan produces.
FileCacheProvider crop_cache(const BBox& anchor, const ScalePlan& plan, const ImageMeta& m,
                             std::size_t dim, std::mt19937_64& rng,
                             std::vector<KeyedVector> extra = {}) {
  CacheContents c;
  c.dim = static_cast<std::uint32_t>(dim);
  for (const auto& crop : make_crops(anchor, plan, m)) {
    c.entries.push_back({crop.crop_id, vec(oracle::random_vector(rng, dim))});
  }
  for (auto& e : extra) c.entries.push_back(std::move(e));
  return FileCacheProvider({std::move(c)});
}

ScalePlan default_plan(SceneKind kind, const BBox& box, const ImageMeta& m) {
  return plan_scales(classify_size(box, m, SizeThresholdTable{}), kind, ScaleTable::defaults());
}

}  // namespace

TEST_CASE("cosine examples") {
  const auto u = vec({0.3, -1.2, 4.0});
  CHECK(cosine(u, u) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine(vec({1, 0}), vec({0, 1})) == 0.0);
  CHECK(cosine(vec({1, 0}), vec({1, 1})) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(cosine(vec({1, 0}), vec({-1, 0})) == -1.0);
  CHECK_THROWS_AS(cosine(vec({0, 0}), vec({1, 0})), Error);
  CHECK_THROWS_AS(cosine(vec({1, 0}), vec({1, 0, 0})), Error);
  CHECK_THROWS_AS(vec({}), Error);
  CHECK_THROWS_AS(vec({NAN}), Error);
}

TEST_CASE("cosine agrees with an extended-precision reference") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 500; ++i) {
    const auto a = oracle::random_vector(rng, 16);
    const auto b = oracle::random_vector(rng, 16);
    CHECK(cosine(vec(a), vec(b)) == doctest::Approx(oracle::cosine(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("topk examples") {
  const std::vector<KeyedVector> book = {{"a", vec({1, 0})}, {"b", vec({0, 1})}};
  const auto one = topk_soft_align(vec({1, 0.1}), book, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0].snippet_id == "a");
  CHECK(one[0].similarity == doctest::Approx(0.995037).epsilon(1e-6));

  const auto all = topk_soft_align(vec({1, 0.1}), book, 10);
  REQUIRE(all.size() == 2);
  CHECK(all[1].snippet_id == "b");
  CHECK(all[1].similarity == doctest::Approx(0.0995037).epsilon(1e-6));

  CHECK_THROWS_AS(topk_soft_align(vec({1, 0}), book, 0), Error);
  CHECK_THROWS_AS(topk_soft_align(vec({1, 0}), {}, 1), Error);
}

TEST_CASE("ties break by snippet id") {
  const std::vector<KeyedVector> book = {{"z", vec({1, 0})}, {"m", vec({2, 0})}, {"a", vec({0, 1})}};
  const auto out = topk_soft_align(vec({1, 0}), book, 2);
  CHECK(out[0].snippet_id == "m");
  CHECK(out[1].snippet_id == "z");
}

TEST_CASE("topk matches the full-sort oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const auto book = random_book(rng, 20, 8);
    const auto q = vec(oracle::random_vector(rng, 8));
    CHECK(topk_soft_align(q, book, 5) == oracle::topk(q, book, 5));
  }
}

TEST_CASE("topk is invariant to positive rescaling") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto book = random_book(rng, 12, 16);
    auto raw = oracle::random_vector(rng, 16);
    const auto base = topk_soft_align(vec(raw), book, 4);
    const double s = scale(rng);
    for (auto& x : raw) x *= s;
    const auto scaled = topk_soft_align(vec(raw), book, 4);
    REQUIRE(scaled.size() == base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
      CHECK(scaled[i].snippet_id == base[i].snippet_id);
      CHECK(std::abs(scaled[i].similarity - base[i].similarity) <= 1e-9);
    }
  }
}

TEST_CASE("file cache lookups") {
  CacheContents c;
  c.dim = 2;
  c.entries = {{"a", vec({1, 0})}, {"b", vec({0, 1})}};
  FileCacheProvider p({c});
  CHECK(p.dim() == 2);
  CHECK(p.kind() == ProviderKind::kFileCache);
  const std::vector<TextItem> items = {{"b", "ignored"}, {"a", "ignored"}};
  const auto out = embed_texts(p, items);
  CHECK(out[0] == vec({0, 1}));
  CHECK(out[1] == vec({1, 0}));

  const std::vector<TextItem> missing = {{"a", ""}, {"nope", ""}};
  try {
    embed_texts(p, missing);
    FAIL("expected a cache miss");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kCacheMiss);
    CHECK(std::string(e.what()).find("nope") != std::string::npos);
  }
  CHECK_THROWS_AS(embed_texts(p, {}), Error);
}

TEST_CASE("file cache crops are keyed by crop id") {
  const auto m = meta(100, 100, SceneKind::kNatural);
  const BBox anchor(40, 40, 60, 60, 1.0, "rpn", "img");
  const auto crops = make_crops(anchor, ScalePlan::primary_only(), m);
  CacheContents c;
  c.dim = 3;
  c.entries = {{crops[0].crop_id, vec({0.5, 0.25, 1})}};
  FileCacheProvider p({c});
  const ImageSource src{{}, m};
  CHECK(embed_crops(p, src, crops)[0] == vec({0.5, 0.25, 1}));

  const std::vector<CropSpec> dup = {crops[0], crops[0]};
  CHECK_THROWS_AS(embed_crops(p, src, dup), Error);
}

TEST_CASE("merging caches of different dims fails") {
  CacheContents a{2, {{"a", vec({1, 0})}}};
  CacheContents b{3, {{"b", vec({1, 0, 0})}}};
  CHECK_THROWS_AS(FileCacheProvider({a, b}), Error);
}

TEST_CASE("search_object with primary only equals the oracle") {
  std::mt19937_64 rng(3);
  const auto m = meta(100, 100, SceneKind::kNatural);
  const BBox anchor(10, 10, 30, 40, 0.9, "rpn", "img");
  const auto book = random_book(rng, 5, 8);
  auto provider = crop_cache(anchor, ScalePlan::primary_only(), m, 8, rng);
  const SnippetIndex index(book);
  const auto out = search_object(anchor, ScalePlan::primary_only(), {{}, m}, index, provider, {3, 3});
  REQUIRE(out.per_role.size() == 1);
  const auto crops = make_crops(anchor, ScalePlan::primary_only(), m);
  const auto q = embed_crops(provider, {{}, m}, crops)[0];
  CHECK(out.per_role[0].matches == oracle::topk(q, book, 3));
  CHECK(out.anchor_matches().size() == 3);
}

TEST_CASE("remote sensing default plan list lengths") {
  std::mt19937_64 rng(4);
  const auto m = meta(1000, 1000, SceneKind::kRemoteSensing);
  const BBox anchor(500, 500, 510, 510, 0.9, "rpn", "img");
  const auto plan = default_plan(SceneKind::kRemoteSensing, anchor, m);
  REQUIRE(plan.entries().size() == 6);
  const auto book = random_book(rng, 10, 4);
  auto provider = crop_cache(anchor, plan, m, 4, rng);
  const auto out = search_object(anchor, plan, {{}, m}, SnippetIndex(book), provider,
                                 TopKConfig::defaults(SceneKind::kRemoteSensing));
  std::vector<std::size_t> lengths;
  for (const auto& l : out.per_role) lengths.push_back(l.matches.size());
  CHECK(lengths == std::vector<std::size_t>{3, 5, 5, 5, 5, 5});
  CHECK(out.per_role[0].entry.role == ScaleRole::kPrimary);

  // Identical inputs give identical matches.
  const auto again = search_object(anchor, plan, {{}, m}, SnippetIndex(book), provider,
                                   TopKConfig::defaults(SceneKind::kRemoteSensing));
  for (std::size_t i = 0; i < out.per_role.size(); ++i) {
    CHECK(again.per_role[i].matches == out.per_role[i].matches);
    CHECK(again.per_role[i].crop_id == out.per_role[i].crop_id);
  }
}

TEST_CASE("small codebooks saturate k") {
  std::mt19937_64 rng(8);
  const auto m = meta(1000, 1000, SceneKind::kRemoteSensing);
  const BBox anchor(500, 500, 510, 510, 0.9, "rpn", "img");
  const auto plan = default_plan(SceneKind::kRemoteSensing, anchor, m);
  auto provider = crop_cache(anchor, plan, m, 4, rng);
  const auto out = search_object(anchor, plan, {{}, m}, SnippetIndex(random_book(rng, 2, 4)),
                                 provider, {5, 5});
  for (const auto& l : out.per_role) CHECK(l.matches.size() == 2);
}

TEST_CASE("collapsed zoom-outs share the primary crop") {
  std::mt19937_64 rng(2);
  const auto m = meta(100, 100, SceneKind::kNatural);
  const BBox anchor(0, 0, 100, 100, 0.9, "rpn", "img");
  const auto plan = default_plan(SceneKind::kNatural, anchor, m);
  auto provider = crop_cache(anchor, plan, m, 4, rng);
  const auto out = search_object(anchor, plan, {{}, m}, SnippetIndex(random_book(rng, 6, 4)),
                                 provider, {3, 3});
  REQUIRE(out.per_role.back().entry.role == ScaleRole::kZoomOut);
  CHECK(out.per_role.back().crop_id == out.per_role.front().crop_id);
  CHECK(out.per_role.back().matches == out.per_role.front().matches);
}

TEST_CASE("snippet index embeds every codebook entry by id") {
  const std::vector<SnippetRecord> records = {{"cat.ship", "ship", "common_category", "both"},
                                              {"shape.rect", "Rectangular shape", "shape", "both"}};
  const auto cb = codebook_from_records(records, SceneKind::kRemoteSensing);
  CacheContents c{2, {{"cat.ship", vec({1, 0})}, {"shape.rect", vec({0, 1})}}};
  FileCacheProvider p({c});
  const SnippetIndex index(cb, p);
  REQUIRE(index.entries().size() == 2);
  CHECK(index.entries()[1].id == "shape.rect");
  CHECK(index.entries()[1].vector == vec({0, 1}));
}

TEST_CASE("http embedding service protocol") {
  TestServer srv;
  std::mutex mu;
  std::vector<std::string> images;
  int requested_resize = 0;
  std::string mode = "ok";
  srv.server().Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"dim": 3, "model": "fake-clip"})", "application/json");
  });
  auto reply = [&](std::size_t n, httplib::Response& res) {
    json vectors = json::array();
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> e(mode == "short_dim" ? 2 : 3, 0.0);
      e[i % e.size()] = 1.0;
      vectors.push_back(e);
    }
    if (mode == "short_count") vectors.erase(vectors.begin());
    res.set_content(json{{"dim", 3}, {"vectors", vectors}}.dump(), "application/json");
  };
  srv.server().Post("/v1/embed/text", [&](const httplib::Request& req, httplib::Response& res) {
    std::lock_guard lock(mu);
    reply(json::parse(req.body)["texts"].size(), res);
  });
  srv.server().Post("/v1/embed/image", [&](const httplib::Request& req, httplib::Response& res) {
    std::lock_guard lock(mu);
    const auto body = json::parse(req.body);
    requested_resize = body["resize"].get<int>();
    for (const auto& b : body["images_b64"]) images.push_back(b.get<std::string>());
    reply(body["images_b64"].size(), res);
  });
  srv.start();

  HttpEmbeddingProvider::Options opts;
  opts.base_url = srv.url();
  opts.timeout_seconds = 5.0;
  opts.batch_size = 2;
  HttpEmbeddingProvider p(opts);
  CHECK(p.dim() == 3);
  CHECK(p.identity() == "http:fake-clip");

  SUBCASE("texts come back as basis vectors") {
    const std::vector<TextItem> items = {{"a", "ship"}, {"b", "harbor"}, {"c", "tank"}};
    const auto out = embed_texts(p, items);
    REQUIRE(out.size() == 3);
    CHECK(out[0] == vec({1, 0, 0}));
    CHECK(out[1] == vec({0, 1, 0}));
    // Batches of two: the third item restarts the basis.
    CHECK(out[2] == vec({1, 0, 0}));
  }
  SUBCASE("crops are resized to 224 and PNG encoded") {
    TempDir dir;
    Image img;
    img.width = 100;
    img.height = 80;
    img.rgb.assign(100 * 80 * 3, 0);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i % 251);
    const auto path = dir / "img.png";
    write_png(path, img);
    auto m = meta(100, 80, SceneKind::kNatural);
    const BBox anchor(10, 10, 40, 30, 0.9, "rpn", "img");
    const auto crops = make_crops(anchor, default_plan(SceneKind::kNatural, anchor, m), m);
    const auto out = embed_crops(p, {path, m}, crops);
    CHECK(out.size() == crops.size());
    CHECK(requested_resize == 224);
    REQUIRE(images.size() == crops.size());
    const auto decoded = dir.write("crop.png", base64_decode(images[0]));
    CHECK(image_size(decoded) == std::pair<int, int>{224, 224});

    m.width = 99;
    CHECK_THROWS_AS(embed_crops(p, {path, m}, crops), Error);
  }
  SUBCASE("wrong dimension is a decode error") {
    mode = "short_dim";
    const std::vector<TextItem> items = {{"a", "ship"}};
    try {
      embed_texts(p, items);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kDecode);
    }
  }
  SUBCASE("wrong vector count is a decode error") {
    mode = "short_count";
    const std::vector<TextItem> items = {{"a", "ship"}, {"b", "harbor"}};
    try {
      embed_texts(p, items);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kDecode);
    }
  }
}

TEST_CASE("unreachable embedding service") {
  std::string url;
  {
    TestServer srv;
    srv.start();
    url = srv.url();
  }
  HttpEmbeddingProvider::Options opts;
  opts.base_url = url;
  opts.timeout_seconds = 2.0;
  try {
    HttpEmbeddingProvider p(opts);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kTransport);
  }
}
