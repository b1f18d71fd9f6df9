#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "aelab/autoencoders.hpp"
#include "aelab/dataset.hpp"

namespace aelab {

struct TrainConfig {
  ModelSpec spec = ModelSpec::defaults(ModelFamily::kConvolutional, 32, 32);
  int epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  LossWeights weights;
  std::filesystem::path data_root;
  std::optional<std::size_t> per_class_cap;
  double split_ratio = 0.2;
  /// Reuse an existing split instead of drawing one from `seed`.
  std::optional<std::filesystem::path> split_manifest;
  /// Checkpoint, history and split manifest go here when set.
  std::optional<std::filesystem::path> output_dir;

  /// Throws ConfigError for the first violated constraint.
  void validate() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_mse = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

enum class Phase { kUpdate, kValidation };

/// Which items were read in which phase.
struct AccessRecord {
  Phase phase;
  int epoch;
  std::size_t item;
};

/// Serves decoded images by item id, caching them after the first read and
/// logging every request.
class BatchSource {
 public:
  BatchSource(const DatasetIndex& index, std::size_t height, std::size_t width);

  Tensor load(const std::vector<std::size_t>& items, Phase phase, int epoch);
  const std::vector<AccessRecord>& access_log() const { return log_; }

 private:
  const DatasetIndex& index_;
  std::size_t height_;
  std::size_t width_;
  std::vector<Tensor> cache_;
  std::vector<AccessRecord> log_;
};

struct TrainResult {
  std::unique_ptr<Autoencoder<float>> model;
  std::vector<EpochRecord> history;
  DatasetIndex index;
  Split split;
  std::vector<AccessRecord> access_log;
  std::optional<std::filesystem::path> checkpoint;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Scans, splits, trains and validates. Each epoch visits the training items
/// in an order shuffled by (seed + epoch) and ends with the validation MSE.
/// A non-finite loss throws TrainingError naming epoch and batch.
TrainResult train(const TrainConfig& config, const TrainHooks& hooks = {});

/// Mean over items of the per-image reconstruction MSE, in batches.
double validation_mse(const Autoencoder<float>& model, BatchSource& source,
                      const std::vector<std::size_t>& items, std::size_t batch_size, int epoch);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);
std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path);

}  // namespace aelab
