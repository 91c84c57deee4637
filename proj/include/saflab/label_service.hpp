#pragma once

// HTTP service for labelling prototype instances by hand. The session file
// is rewritten after every accepted label.

#include <atomic>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "saflab/image.hpp"
#include "saflab/io.hpp"

namespace httplib {
class Server;
}

namespace saflab {

/// PNG bytes of `frame` with `instance` tinted and its bounding box drawn.
std::string render_overlay_png(const RgbImage& frame, const Mask& instance);

struct LabelServiceOptions {
  std::filesystem::path session_file;
  std::vector<std::string> classes;
  std::filesystem::path static_dir;  // frontend bundle; optional
  bool exit_when_complete = true;
};

struct LabelCard {
  SessionEntry entry;
  std::string overlay_png;  // raw PNG bytes
};

class LabelService {
 public:
  LabelService(LabelServiceOptions options, std::vector<LabelCard> cards);
  ~LabelService();
  LabelService(const LabelService&) = delete;
  LabelService& operator=(const LabelService&) = delete;

  /// Binds to `host:port`; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop() or, with exit_when_complete, the last label.
  void serve();
  void stop();

  [[nodiscard]] std::size_t labelled() const;
  [[nodiscard]] std::size_t total() const { return cards_.size(); }

 private:
  void install_routes();
  void persist_locked() const;

  LabelServiceOptions options_;
  std::vector<LabelCard> cards_;
  mutable std::mutex mutex_;
  std::unique_ptr<httplib::Server> server_;
  std::thread stopper_;
  std::atomic<bool> stopping_{false};
};

}  // namespace saflab
