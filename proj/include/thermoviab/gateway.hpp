#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "thermoviab/pipeline.hpp"

namespace thermoviab {

struct GatewayConfig {
  std::filesystem::path data_root;
  std::optional<std::filesystem::path> model_dir;       // needed for the predict stage
  std::optional<std::filesystem::path> segmenter_model; // needed for segmenter "net"
  std::optional<std::filesystem::path> static_dir;      // built review UI, served under /
  std::size_t queue_capacity = 16;                      // pending jobs before 503
  AlignConfig align;
  FeatureConfig features;
};

/// HTTP facade over the case directories of one data root.
///
/// Reads are served concurrently; stage runs go through a bounded in-process
/// queue drained by a single worker, with at most one queued-or-running job
/// per case. Error bodies are {"error": <code>, "message": <text>}.
class Gateway {
 public:
  /// Throws ModelFormat when model_dir is given but cannot be loaded.
  explicit Gateway(GatewayConfig config);
  ~Gateway();

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  /// Binds and starts serving on a background thread. Port 0 picks a free
  /// port; the bound port is returned. Throws IoFailure.
  int start(const std::string& host = "127.0.0.1", int port = 0);

  /// Binds and serves on the calling thread until stop().
  void run(const std::string& host, int port);

  void stop();

  /// Blocks until the job queue is empty and no job is running.
  void drain();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace thermoviab
