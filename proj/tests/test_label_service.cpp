#include <doctest.h>

#include <httplib.h>
#include <json.hpp>

#include <future>

#include "oracles.hpp"
#include "saflab/label_service.hpp"

using namespace saflab;
using nlohmann::json;

namespace {

struct Fixture {
  fs::path dir = fs::temp_directory_path() / "saflab_test_service";
  std::unique_ptr<LabelService> service;
  int port = 0;
  std::future<void> running;

  explicit Fixture(bool exit_when_complete = true) {
    fs::remove_all(dir);
    RgbImage frame(Size{16, 16});
    const Mask inst = oracle::rect(Size{16, 16}, 4, 4, 9, 9);
    std::vector<LabelCard> cards;
    for (int k = 0; k < 8; ++k) cards.push_back({{k, 10 * k, 0, std::nullopt}, render_overlay_png(frame, inst)});
    LabelServiceOptions opt;
    opt.session_file = dir / "session.jsonl";
    opt.classes = {"grasper", "scissors", "hook", "clipper"};
    opt.exit_when_complete = exit_when_complete;
    service = std::make_unique<LabelService>(opt, std::move(cards));
    port = service->bind("127.0.0.1", 0);
    running = std::async(std::launch::async, [this] { service->serve(); });
    httplib::Client probe("127.0.0.1", port);
    for (int i = 0; i < 100 && !probe.Get("/api/session/status"); ++i)
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  ~Fixture() {
    if (running.wait_for(std::chrono::seconds(0)) != std::future_status::ready) service->stop();
    running.wait();
    fs::remove_all(dir);
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

httplib::Result post_label(httplib::Client& c, const json& body) {
  return c.Post("/api/session/labels", body.dump(), "application/json");
}

}  // namespace

TEST_CASE("label service: fresh session") {
  Fixture f(false);
  auto c = f.client();
  const auto s = c.Get("/api/session");
  REQUIRE(s);
  CHECK(s->status == 200);
  const auto body = json::parse(s->body);
  REQUIRE(body["prototypes"].size() == 8);
  for (const auto& p : body["prototypes"]) {
    CHECK(p["label"].is_null());
    // Base64 of the 8-byte PNG signature.
    CHECK(p["frame_png_base64"].get<std::string>().rfind("iVBORw0KGgo", 0) == 0);
  }
  CHECK(body["classes"] == json({"grasper", "scissors", "hook", "clipper"}));

  const auto st = c.Get("/api/session/status");
  REQUIRE(st);
  const auto status = json::parse(st->body);
  CHECK(status["labelled"] == 0);
  CHECK(status["total"] == 8);

  const auto index = c.Get("/");
  REQUIRE(index);
  CHECK(index->status == 200);
}

TEST_CASE("label service: errors") {
  Fixture f(false);
  auto c = f.client();
  auto r = post_label(c, {{"cluster_id", 99}, {"label", 0}});
  REQUIRE(r);
  CHECK(r->status == 404);
  r = post_label(c, {{"cluster_id", 1}, {"label", 4}});
  REQUIRE(r);
  CHECK(r->status == 422);
  r = post_label(c, {{"cluster_id", 1}, {"label", "forceps"}});
  REQUIRE(r);
  CHECK(r->status == 422);
  r = c.Post("/api/session/labels", "{not json", "application/json");
  REQUIRE(r);
  CHECK(r->status == 400);
  CHECK(f.service->labelled() == 0);
}

TEST_CASE("label service: eight labels persist and end the session") {
  Fixture f(true);
  auto c = f.client();
  const int labels[8] = {2, 0, 1, 3, 3, 0, 1, 2};
  for (int k = 0; k < 8; ++k) {
    const auto r = k == 5 ? post_label(c, {{"cluster_id", k}, {"label", "grasper"}})
                          : post_label(c, {{"cluster_id", k}, {"label", labels[k]}});
    REQUIRE(r);
    CHECK(r->status == 200);
  }
  CHECK(f.running.wait_for(std::chrono::seconds(5)) == std::future_status::ready);
  const auto session = read_session(f.dir / "session.jsonl");
  REQUIRE(session.size() == 8);
  for (int k = 0; k < 8; ++k) {
    CHECK(session[static_cast<std::size_t>(k)].cluster_id == k);
    CHECK(session[static_cast<std::size_t>(k)].frame_index == 10 * k);
    CHECK(session[static_cast<std::size_t>(k)].label == labels[k]);
  }
}

TEST_CASE("label service: relabelling overwrites") {
  Fixture f(false);
  auto c = f.client();
  REQUIRE(post_label(c, {{"cluster_id", 3}, {"label", 1}}));
  REQUIRE(post_label(c, {{"cluster_id", 3}, {"label", 2}}));
  const auto session = read_session(f.dir / "session.jsonl");
  CHECK(session[3].label == 2);
  CHECK(json::parse(c.Get("/api/session/status")->body)["labelled"] == 1);
}
