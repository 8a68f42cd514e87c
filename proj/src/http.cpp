#include "http.hpp"

#include <chrono>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include "gwvlm/error.hpp"

namespace gwvlm::http {

Url parse_url(std::string_view url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) {
    throw Error(ErrorCode::kConfig, "endpoint URL '" + std::string(url) + "' lacks a scheme");
  }
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") {
    throw Error(ErrorCode::kConfig, "unsupported URL scheme '" + std::string(scheme) + "'");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  Url out;
  if (path_start == std::string_view::npos) {
    out.origin = std::string(url);
  } else {
    out.origin = std::string(url.substr(0, path_start));
    out.path = std::string(url.substr(path_start));
    while (!out.path.empty() && out.path.back() == '/') out.path.pop_back();
  }
  if (out.origin.size() <= scheme_end + 3) {
    throw Error(ErrorCode::kConfig, "endpoint URL '" + std::string(url) + "' lacks a host");
  }
  return out;
}

namespace {

httplib::Client make_client(const Url& base, double timeout_seconds) {
  httplib::Client client(base.origin);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::duration<double>(timeout_seconds));
  const auto sec = static_cast<time_t>(timeout.count() / 1000000);
  const auto usec = static_cast<time_t>(timeout.count() % 1000000);
  client.set_connection_timeout(sec, usec);
  client.set_read_timeout(sec, usec);
  client.set_write_timeout(sec, usec);
  client.set_keep_alive(false);
  return client;
}

httplib::Headers to_httplib(const Headers& headers) {
  httplib::Headers out;
  for (const auto& [k, v] : headers) out.emplace(k, v);
  return out;
}

Response finish(const httplib::Result& result, const Url& base, std::string_view path) {
  if (!result) {
    throw Error(ErrorCode::kTransport, "request to " + base.origin + base.path + std::string(path) +
                                           " failed: " + httplib::to_string(result.error()));
  }
  return {result->status, result->body};
}

}  // namespace

Response post_json(const Url& base, std::string_view path, const std::string& body,
                   const Headers& headers, double timeout_seconds) {
  auto client = make_client(base, timeout_seconds);
  const std::string full = base.path + std::string(path);
  return finish(client.Post(full, to_httplib(headers), body, "application/json"), base, path);
}

Response get(const Url& base, std::string_view path, const Headers& headers,
             double timeout_seconds) {
  auto client = make_client(base, timeout_seconds);
  const std::string full = base.path + std::string(path);
  return finish(client.Get(full, to_httplib(headers)), base, path);
}

}  // namespace gwvlm::http
