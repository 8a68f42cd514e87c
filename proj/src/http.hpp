#pragma once

// Thin blocking HTTP wrapper so only one translation unit pulls in httplib.

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gwvlm::http {

struct Url {
  std::string origin;  // scheme://host[:port]
  std::string path;    // prefix without trailing slash, may be empty
};

// Throws Error(kConfig) on anything that is not http:// or https://.
Url parse_url(std::string_view url);

struct Response {
  int status = 0;
  std::string body;
};

using Headers = std::vector<std::pair<std::string, std::string>>;

// Transport failures (connect, timeout, TLS) throw Error(kTransport); any
// received status is returned, including >= 400.
Response post_json(const Url& base, std::string_view path, const std::string& body,
                   const Headers& headers, double timeout_seconds);

Response get(const Url& base, std::string_view path, const Headers& headers,
             double timeout_seconds);

}  // namespace gwvlm::http
