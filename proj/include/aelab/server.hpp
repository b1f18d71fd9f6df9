#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "aelab/evaluator.hpp"

namespace aelab {

struct RatingServerOptions {
  std::string host = "127.0.0.1";
  /// Directory with the exported `<opaque>.png` files.
  std::filesystem::path image_dir;
  /// Static single-page UI mounted at `/`, if any.
  std::optional<std::filesystem::path> ui_dir;
};

/// HTTP front end of a RatingService.
///
///   POST /api/session        {rater_id?}                 -> {session_id}
///   GET  /api/next?session=  -> {item_id, image_url, original_url, progress} | {exhausted: true}
///   POST /api/rating         {session_id, item_id, rating} -> {accepted: true}
///   GET  /api/report         -> MosReport (operator-facing)
///   GET  /img/<opaque>.png
///
/// Errors are `{error}` with 400, 404 or 409.
class RatingServer {
 public:
  RatingServer(RatingService& service, RatingServerOptions options);
  ~RatingServer();
  RatingServer(const RatingServer&) = delete;
  RatingServer& operator=(const RatingServer&) = delete;

  /// Binds `port`, or a free port when 0. Returns the bound port.
  int bind(int port = 0);
  /// Serves until stop(). Requires bind().
  void run();
  /// Serves on a background thread.
  void start();
  void stop();
  int port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace aelab
