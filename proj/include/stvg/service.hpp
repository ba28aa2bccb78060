#pragma once

// Line-delimited JSON scoring service. One request object per input line, one
// response object per output line; the field list is in docs/protocol.md.

#include <cerrno>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <json.hpp>

#include "stvg/dataset_io.hpp"
#include "stvg/grpo.hpp"
#include "stvg/reward.hpp"

namespace stvg {

class ScoringService {
 public:
  ScoringService(AnnotationFile annotations, RewardConfig reward, double delta = 1e-6,
                 std::size_t default_group_size = 8)
      : annotations_(std::move(annotations)),
        reward_(reward),
        delta_(delta),
        default_group_size_(default_group_size) {}

  /// Handles one request line. Never throws for bad input: the reply is an
  /// error object naming `line_no`.
  std::string handle_line(std::string_view line, std::size_t line_no) {
    Json id = nullptr;
    try {
      Json req = Json::parse(line);
      if (!req.is_object()) throw RequestError("request must be a JSON object");
      if (req.contains("id")) id = req.at("id");
      if (!req.contains("type") || !req.at("type").is_string()) throw RequestError("missing string field 'type'");
      const std::string type = req.at("type").get<std::string>();
      Json resp;
      if (type == "ping") {
        resp = {{"type", "pong"}};
      } else if (type == "score") {
        resp = score(req);
      } else if (type == "group_advantages") {
        resp = advantages(req);
      } else {
        throw RequestError("unknown request type '" + type + "'");
      }
      resp["id"] = id;
      return resp.dump();
    } catch (const Json::parse_error&) {
      return error(id, line_no, "request is not valid JSON");
    } catch (const Json::exception& e) {
      return error(id, line_no, std::string("bad field: ") + e.what());
    } catch (const std::exception& e) {
      return error(id, line_no, e.what());
    }
  }

  /// Serves until end of input. Blank lines are ignored but still counted.
  void serve(std::istream& in, std::ostream& out) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      out << handle_line(line, line_no) << '\n';
      out.flush();
    }
  }

  std::size_t pending_groups() const { return groups_.size(); }

 private:
  struct RequestError : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

  struct PendingGroup {
    std::size_t size{0};
    std::vector<double> totals;
  };

  static std::string error(const Json& id, std::size_t line_no, const std::string& message) {
    return Json{{"id", id}, {"type", "error"}, {"line", line_no}, {"message", message}}.dump();
  }

  RewardConfig request_config(const Json& req) const {
    RewardConfig cfg = reward_;
    if (!req.contains("config")) return cfg;
    const Json& o = req.at("config");
    if (!o.is_object()) throw RequestError("'config' must be an object");
    for (const auto& [k, v] : o.items()) {
      if (k == "lambda_k") {
        cfg.lambda_k = v.get<double>();
        if (!(cfg.lambda_k >= 0.0)) throw RequestError("lambda_k must be non-negative");
      } else if (k == "spatial_term") {
        cfg.spatial_term = parse_spatial_term(v.get<std::string>());
      } else if (k == "clamp_spatial") {
        cfg.clamp_spatial = v.get<bool>();
      } else {
        throw RequestError("unknown config override '" + k + "'");
      }
    }
    return cfg;
  }

  Json score(const Json& req) {
    if (!req.contains("raw_output") || !req.at("raw_output").is_string()) {
      throw RequestError("missing string field 'raw_output'");
    }
    GroundTruthSample inline_gt;
    const GroundTruthSample* gt = nullptr;
    if (req.contains("ground_truth")) {
      try {
        inline_gt = detail::native_sample(req.at("ground_truth"), annotations_.fps, 0);
      } catch (const DataError& e) {
        throw RequestError(std::string("ground_truth: ") + e.what());
      }
      gt = &inline_gt;
    } else if (req.contains("sample_id")) {
      const auto sid = req.at("sample_id").get<std::string>();
      gt = annotations_.find(sid);
      if (!gt) throw RequestError("no ground truth for sample id " + sid);
    } else {
      throw RequestError("need 'sample_id' or 'ground_truth'");
    }
    const RewardConfig cfg = request_config(req);
    const RewardBreakdown b = total_reward(req.at("raw_output").get<std::string>(), *gt, cfg);
    Json resp = {{"type", "score"}, {"sample_id", gt->sample_id}, {"breakdown", breakdown_to_json(b)}};

    if (req.contains("group_id")) {
      const auto gid = req.at("group_id").get<std::string>();
      auto it = groups_.find(gid);
      if (it == groups_.end()) {
        const std::size_t size = req.value("group_size", default_group_size_);
        if (size < 2) throw RequestError("group_size must be at least 2");
        it = groups_.emplace(gid, PendingGroup{size, {}}).first;
      }
      PendingGroup& g = it->second;
      g.totals.push_back(b.total);
      resp["group_id"] = gid;
      if (g.totals.size() == g.size) {
        resp["group_totals"] = g.totals;
        resp["advantages"] = group_advantages(g.totals, delta_);
        groups_.erase(it);
      }
    }
    return resp;
  }

  Json advantages(const Json& req) const {
    if (!req.contains("totals")) throw RequestError("missing field 'totals'");
    const auto totals = req.at("totals").get<std::vector<double>>();
    const double delta = req.value("delta", delta_);
    if (!(delta > 0.0)) throw RequestError("delta must be positive");
    try {
      return {{"type", "group_advantages"}, {"advantages", group_advantages(totals, delta)}};
    } catch (const std::invalid_argument& e) {
      throw RequestError(e.what());
    }
  }

  AnnotationFile annotations_;
  RewardConfig reward_;
  double delta_;
  std::size_t default_group_size_;
  std::map<std::string, PendingGroup> groups_;
};

// ---------------------------------------------------------------------------
// Unix-domain socket transport: connections are served one after another.

namespace detail {

class FdLineReader {
 public:
  explicit FdLineReader(int fd) : fd_(fd) {}

  bool next(std::string& line) {
    for (;;) {
      const auto nl = buf_.find('\n');
      if (nl != std::string::npos) {
        line = buf_.substr(0, nl);
        buf_.erase(0, nl + 1);
        return true;
      }
      char chunk[4096];
      const ssize_t n = ::read(fd_, chunk, sizeof(chunk));
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        if (buf_.empty()) return false;
        line.swap(buf_);
        buf_.clear();
        return true;
      }
      buf_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int fd_;
  std::string buf_;
};

inline bool write_all(int fd, std::string_view s) {
  while (!s.empty()) {
    const ssize_t n = ::write(fd, s.data(), s.size());
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    s.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

}  // namespace detail

/// Listens on `path` and serves `max_connections` clients in turn (0 means no
/// limit). Line numbers restart for each connection.
inline void serve_unix_socket(ScoringService& service, const std::string& path, std::size_t max_connections = 0) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  if (path.size() >= sizeof(addr.sun_path)) throw std::invalid_argument("socket path too long: " + path);
  std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);

  const int server = ::socket(AF_UNIX, SOCK_STREAM, 0);
  if (server < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
  ::unlink(path.c_str());
  if (::bind(server, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(server, 8) != 0) {
    const std::string err = std::strerror(errno);
    ::close(server);
    throw std::runtime_error("cannot listen on " + path + ": " + err);
  }
  for (std::size_t served = 0; max_connections == 0 || served < max_connections; ++served) {
    const int client = ::accept(server, nullptr, nullptr);
    if (client < 0) {
      if (errno == EINTR) continue;
      break;
    }
    detail::FdLineReader reader(client);
    std::string line;
    std::size_t line_no = 0;
    while (reader.next(line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") == std::string::npos) continue;
      if (!detail::write_all(client, service.handle_line(line, line_no) + "\n")) break;
    }
    ::close(client);
  }
  ::close(server);
  ::unlink(path.c_str());
}

}  // namespace stvg
