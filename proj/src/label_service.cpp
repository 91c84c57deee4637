#include "saflab/label_service.hpp"

#include <algorithm>

#include <httplib.h>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace saflab {

using ojson = nlohmann::ordered_json;

std::string render_overlay_png(const RgbImage& frame, const Mask& instance) {
  require_same_size(frame.size(), instance.size(), "render_overlay_png");
  const Size s = frame.size();
  cv::Mat bgr(s.height, s.width, CV_8UC3);
  int x0 = s.width, y0 = s.height, x1 = -1, y1 = -1;
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const auto* p = frame.px(x, y);
      auto& q = bgr.at<cv::Vec3b>(y, x);
      q = cv::Vec3b(p[2], p[1], p[0]);
      if (!instance.at(x, y)) continue;
      q = cv::Vec3b(static_cast<std::uint8_t>(q[0] / 2 + 127), static_cast<std::uint8_t>(q[1] / 2 + 127),
                    static_cast<std::uint8_t>(q[2] / 2));
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 >= 0) cv::rectangle(bgr, cv::Point(x0, y0), cv::Point(x1, y1), cv::Scalar(255, 255, 0), 2);
  std::vector<std::uint8_t> png;
  if (!cv::imencode(".png", bgr, png)) throw std::runtime_error("render_overlay_png: encoding failed");
  return std::string(png.begin(), png.end());
}

namespace {

constexpr const char* kFallbackIndex =
    "<!doctype html><title>prototype labelling</title>"
    "<p>No frontend bundle is mounted. The JSON API lives under <code>/api/session</code>.</p>";

}  // namespace

LabelService::LabelService(LabelServiceOptions options, std::vector<LabelCard> cards)
    : options_(std::move(options)), cards_(std::move(cards)), server_(std::make_unique<httplib::Server>()) {
  if (options_.classes.empty()) throw std::invalid_argument("LabelService: empty class list");
  install_routes();
}

LabelService::~LabelService() {
  stop();
  if (stopper_.joinable()) stopper_.join();
}

std::size_t LabelService::labelled() const {
  std::lock_guard lock(mutex_);
  return static_cast<std::size_t>(
      std::count_if(cards_.begin(), cards_.end(), [](const LabelCard& c) { return c.entry.label.has_value(); }));
}

void LabelService::persist_locked() const {
  std::vector<SessionEntry> entries;
  for (const auto& c : cards_) entries.push_back(c.entry);
  write_session(options_.session_file, entries);
}

void LabelService::install_routes() {
  auto& svr = *server_;
  svr.Get("/api/session", [this](const httplib::Request&, httplib::Response& res) {
    std::lock_guard lock(mutex_);
    ojson protos = ojson::array();
    for (const auto& c : cards_) {
      ojson p;
      p["cluster_id"] = c.entry.cluster_id;
      p["frame_index"] = c.entry.frame_index;
      p["instance_index"] = c.entry.instance_index;
      p["frame_png_base64"] = httplib::detail::base64_encode(c.overlay_png);
      p["label"] = c.entry.label ? ojson(*c.entry.label) : ojson(nullptr);
      protos.push_back(std::move(p));
    }
    ojson body{{"v", 1}, {"prototypes", protos}, {"classes", options_.classes}};
    res.set_content(body.dump(), "application/json");
  });

  svr.Get("/api/session/status", [this](const httplib::Request&, httplib::Response& res) {
    const ojson body{{"v", 1}, {"labelled", labelled()}, {"total", total()}};
    res.set_content(body.dump(), "application/json");
  });

  svr.Post("/api/session/labels", [this](const httplib::Request& req, httplib::Response& res) {
    auto fail = [&](int status, const std::string& msg) {
      res.status = status;
      res.set_content(ojson{{"v", 1}, {"error", msg}}.dump(), "application/json");
    };
    ojson body;
    try {
      body = ojson::parse(req.body);
    } catch (const nlohmann::json::exception&) {
      return fail(400, "body is not valid JSON");
    }
    if (!body.is_object() || !body.contains("cluster_id") || !body["cluster_id"].is_number_integer() ||
        !body.contains("label")) {
      return fail(400, "expected {cluster_id, label}");
    }
    const int cluster = body["cluster_id"].get<int>();
    int label = -1;
    const auto& l = body["label"];
    if (l.is_number_integer()) {
      label = l.get<int>();
    } else if (l.is_string()) {
      const auto it = std::find(options_.classes.begin(), options_.classes.end(), l.get<std::string>());
      if (it != options_.classes.end()) label = static_cast<int>(it - options_.classes.begin());
    }
    bool complete = false;
    {
      std::lock_guard lock(mutex_);
      const auto card = std::find_if(cards_.begin(), cards_.end(),
                                     [&](const LabelCard& c) { return c.entry.cluster_id == cluster; });
      if (card == cards_.end()) return fail(404, "unknown cluster_id");
      if (label < 0 || label >= static_cast<int>(options_.classes.size())) return fail(422, "label outside class list");
      card->entry.label = label;
      persist_locked();
      complete = std::all_of(cards_.begin(), cards_.end(), [](const LabelCard& c) { return c.entry.label.has_value(); });
      res.set_content(ojson{{"v", 1}, {"cluster_id", cluster}, {"label", label}}.dump(), "application/json");
    }
    if (complete && options_.exit_when_complete && !stopping_.exchange(true)) {
      // The response must leave before the listener shuts down.
      stopper_ = std::thread([this] {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
        server_->stop();
      });
    }
  });

  if (!options_.static_dir.empty() && std::filesystem::is_directory(options_.static_dir)) {
    svr.set_mount_point("/", options_.static_dir.string());
  } else {
    svr.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_content(kFallbackIndex, "text/html"); });
  }
}

int LabelService::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = server_->bind_to_any_port(host);
    if (p < 0) throw std::runtime_error("LabelService: cannot bind " + host);
    return p;
  }
  if (!server_->bind_to_port(host, port)) throw std::runtime_error("LabelService: cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void LabelService::serve() {
  {
    std::lock_guard lock(mutex_);
    persist_locked();
  }
  server_->listen_after_bind();
  if (stopper_.joinable()) stopper_.join();
}

void LabelService::stop() {
  stopping_ = true;
  server_->stop();
}

}  // namespace saflab
