#include <gtest/gtest.h>

#include <sstream>
#include <thread>

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include "stvg/service.hpp"
#include "test_support.hpp"

namespace stvg {
namespace {

AnnotationFile annotations() {
  AnnotationFile ann;
  ann.samples.push_back(test::constant_gt({2, 4}, {10, 10, 30, 30}, {100, 100}, "a"));
  ann.samples.push_back(test::constant_gt({0, 3}, {50, 50, 90, 80}, {100, 100}, "b"));
  return ann;
}

Json ask(ScoringService& s, const Json& req, std::size_t line = 1) { return Json::parse(s.handle_line(req.dump(), line)); }

std::string exact_output(const AnnotationFile& ann, std::size_t i) {
  return serialize_output(test::output_for(ann.samples[i]));
}

TEST(ScoringService, Ping) {
  ScoringService s(annotations(), {});
  const Json r = ask(s, {{"type", "ping"}, {"id", 7}});
  EXPECT_EQ(r["type"], "pong");
  EXPECT_EQ(r["id"], 7);
}

TEST(ScoringService, ScoreBySampleId) {
  const auto ann = annotations();
  ScoringService s(ann, {});
  const Json r = ask(s, {{"type", "score"}, {"id", "q1"}, {"sample_id", "a"}, {"raw_output", exact_output(ann, 0)}});
  EXPECT_EQ(r["type"], "score");
  EXPECT_EQ(r["id"], "q1");
  EXPECT_EQ(r["sample_id"], "a");
  EXPECT_EQ(r["breakdown"]["total"], kOptimalTotalReward);
  EXPECT_EQ(r["breakdown"]["parse_ok"], true);
}

TEST(ScoringService, InlineGroundTruth) {
  ScoringService s(AnnotationFile{}, {});
  const Json gt = {{"sample_id", "inline"}, {"width", 50}, {"height", 50}, {"span", {0, 1}},
                   {"boxes", {{1, 1, 10, 10}, {2, 2, 11, 11}}}};
  const std::string raw =
      "<time>[0,1]</time><think_bbox>[[1,1,10,10],[2,2,11,11]]</think_bbox><pred_bbox>[[1,1,10,10],[2,2,11,11]]</pred_bbox>";
  const Json r = ask(s, {{"type", "score"}, {"ground_truth", gt}, {"raw_output", raw}});
  EXPECT_EQ(r["sample_id"], "inline");
  EXPECT_EQ(r["breakdown"]["total"], kOptimalTotalReward);
}

TEST(ScoringService, ConfigOverridesMatchLibrary) {
  const auto ann = annotations();
  ScoringService s(ann, {});
  auto p = test::output_for(ann.samples[0]);
  p.pred.boxes[1] = {12, 12, 33, 31};
  p.think.boxes[0] = {0, 0, 40, 40};
  const std::string raw = serialize_output(p);
  RewardConfig cfg;
  cfg.lambda_k = 1.0;
  cfg.spatial_term = SpatialTerm::GiouOnly;
  const Json r = ask(s, {{"type", "score"},
                         {"sample_id", "a"},
                         {"raw_output", raw},
                         {"config", {{"lambda_k", 1.0}, {"spatial_term", "giou"}}}});
  EXPECT_EQ(r["breakdown"], breakdown_to_json(total_reward(raw, ann.samples[0], cfg)));
  // Overrides do not leak into later requests.
  const Json d = ask(s, {{"type", "score"}, {"sample_id", "a"}, {"raw_output", raw}});
  EXPECT_EQ(d["breakdown"], breakdown_to_json(total_reward(raw, ann.samples[0], {})));
}

TEST(ScoringService, GroupOfEqualTotalsGivesZeroAdvantages) {
  ScoringService s(annotations(), {});
  const Json r = ask(s, {{"type", "group_advantages"}, {"totals", std::vector<double>(8, 1.0)}});
  EXPECT_EQ(r["type"], "group_advantages");
  EXPECT_EQ(r["advantages"], std::vector<double>(8, 0.0));
}

TEST(ScoringService, GroupCompletesOnLastMember) {
  const auto ann = annotations();
  ScoringService s(ann, {});
  const Json first = ask(s, {{"type", "score"}, {"sample_id", "a"}, {"raw_output", exact_output(ann, 0)},
                             {"group_id", "g"}, {"group_size", 2}});
  EXPECT_EQ(first["group_id"], "g");
  EXPECT_FALSE(first.contains("advantages"));
  EXPECT_EQ(s.pending_groups(), 1u);
  const Json second = ask(s, {{"type", "score"}, {"sample_id", "a"}, {"raw_output", "junk"}, {"group_id", "g"}});
  ASSERT_TRUE(second.contains("advantages"));
  EXPECT_EQ(second["group_totals"], (std::vector<double>{5.0, 0.0}));
  const auto adv = second["advantages"].get<std::vector<double>>();
  const std::vector<double> totals{5.0, 0.0};
  EXPECT_EQ(adv, group_advantages(totals, 1e-6));
  EXPECT_GT(adv[0], 0.0);
  EXPECT_EQ(s.pending_groups(), 0u);
}

TEST(ScoringService, ErrorsNameLineAndLoopContinues) {
  const auto ann = annotations();
  ScoringService s(ann, {});
  std::istringstream in("{not json\n"
                        "\n"
                        "{\"type\":\"score\",\"id\":3,\"sample_id\":\"zz\",\"raw_output\":\"\"}\n"
                        "{\"type\":\"nope\"}\n"
                        "{\"type\":\"score\",\"sample_id\":\"a\"}\n"
                        "{\"type\":\"group_advantages\",\"totals\":[1]}\n"
                        "{\"type\":\"score\",\"sample_id\":\"a\",\"raw_output\":\"x\",\"config\":{\"bogus\":1}}\n"
                        "{\"type\":\"ping\"}\n");
  std::ostringstream out;
  s.serve(in, out);
  std::istringstream lines(out.str());
  std::vector<Json> rs;
  std::string l;
  while (std::getline(lines, l)) rs.push_back(Json::parse(l));
  ASSERT_EQ(rs.size(), 7u);
  const std::vector<std::size_t> expected_lines{1, 3, 4, 5, 6, 7};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(rs[i]["type"], "error") << rs[i];
    EXPECT_EQ(rs[i]["line"], expected_lines[i]);
    EXPECT_FALSE(rs[i]["message"].get<std::string>().empty());
  }
  EXPECT_EQ(rs[1]["id"], 3);
  EXPECT_EQ(rs[6]["type"], "pong");
}

TEST(ScoringService, MatchesBatchScoring) {
  const auto ann = annotations();
  ScoringService s(ann, {});
  std::string preds;
  for (int i = 0; i < 20; ++i) {
    auto p = test::output_for(ann.samples[i % 2]);
    p.span.end += i % 3;
    for (auto& b : p.pred.boxes) b.x2 -= 0.5 * (i % 4);
    preds += Json{{"sample_id", ann.samples[i % 2].sample_id}, {"raw_output", serialize_output(p)}}.dump() + "\n";
  }
  std::istringstream in(preds);
  std::istringstream batch(score_batch(read_predictions(in), ann, {}));
  std::istringstream again(preds);
  std::string pl, bl;
  while (std::getline(again, pl)) {
    ASSERT_TRUE(std::getline(batch, bl));
    Json req = Json::parse(pl);
    req["type"] = "score";
    EXPECT_EQ(ask(s, req)["breakdown"], Json::parse(bl)["breakdown"]);
  }
}

std::string socket_request(const std::string& path, const std::string& payload) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::strncpy(addr.sun_path, path.c_str(), sizeof(addr.sun_path) - 1);
  int fd = -1;
  for (int attempt = 0; attempt < 200; ++attempt) {
    fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) break;
    ::close(fd);
    fd = -1;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  if (fd < 0) return {};
  detail::write_all(fd, payload);
  ::shutdown(fd, SHUT_WR);
  std::string out;
  char buf[4096];
  ssize_t n;
  while ((n = ::read(fd, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
  ::close(fd);
  return out;
}

TEST(ScoringService, UnixSocketRoundTrip) {
  const auto ann = annotations();
  ScoringService s(ann, {});
  const std::string path = "/tmp/stvg-test-" + std::to_string(::getpid()) + ".sock";
  std::thread server([&] { serve_unix_socket(s, path, 1); });
  const std::string req = Json{{"type", "score"}, {"id", 1}, {"sample_id", "b"}, {"raw_output", exact_output(ann, 1)}}.dump();
  const std::string reply = socket_request(path, "{\"type\":\"ping\"}\n" + req + "\n");
  server.join();
  std::istringstream lines(reply);
  std::string l;
  ASSERT_TRUE(std::getline(lines, l));
  EXPECT_EQ(Json::parse(l)["type"], "pong");
  ASSERT_TRUE(std::getline(lines, l));
  EXPECT_EQ(Json::parse(l)["breakdown"]["total"], kOptimalTotalReward);
}

}  // namespace
}  // namespace stvg
