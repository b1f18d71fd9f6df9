#include "aelab/trainer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "aelab/checkpoint.hpp"
#include "aelab/errors.hpp"
#include "aelab/nn.hpp"

namespace aelab {
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  spec.validate();
  if (epochs < 1) throw ConfigError("epochs must be at least 1, got " + std::to_string(epochs));
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
  if (weights.noise < 0.0 || weights.kl < 0.0) throw ConfigError("loss weights must be non-negative");
  if (data_root.empty()) throw ConfigError("no dataset root given");
}

BatchSource::BatchSource(const DatasetIndex& index, std::size_t height, std::size_t width)
    : index_(index), height_(height), width_(width), cache_(index.size()) {}

Tensor BatchSource::load(const std::vector<std::size_t>& items, Phase phase, int epoch) {
  std::vector<std::size_t> missing;
  for (auto i : items) {
    log_.push_back({phase, epoch, i});
    if (!cache_.at(i).defined()) missing.push_back(i);
  }
  if (!missing.empty()) {
    const auto fresh = load_batch(index_, missing, height_, width_);
    const std::size_t plane = 3 * height_ * width_;
    for (std::size_t b = 0; b < missing.size(); ++b) {
      const auto src = fresh.images.data().subspan(b * plane, plane);
      cache_[missing[b]] = Tensor(Shape{3, height_, width_}, std::vector<float>(src.begin(), src.end()));
    }
  }
  const std::size_t plane = 3 * height_ * width_;
  Tensor batch(Shape{items.size(), 3, height_, width_});
  auto out = batch.mutable_data();
  for (std::size_t b = 0; b < items.size(); ++b) {
    const auto src = cache_[items[b]].data();
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(b * plane));
  }
  return batch;
}

double validation_mse(const Autoencoder<float>& model, BatchSource& source,
                      const std::vector<std::size_t>& items, std::size_t batch_size, int epoch) {
  if (items.empty()) throw ConfigError("validation subset is empty");
  double total = 0.0;
  for (std::size_t start = 0; start < items.size(); start += batch_size) {
    const std::vector<std::size_t> chunk(
        items.begin() + static_cast<std::ptrdiff_t>(start),
        items.begin() + static_cast<std::ptrdiff_t>(std::min(start + batch_size, items.size())));
    const auto x = source.load(chunk, Phase::kValidation, epoch);
    const auto y = model.reconstruct(x);
    const std::size_t plane = x.numel() / chunk.size();
    const auto xd = x.data(), yd = y.data();
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      double acc = 0.0;
      for (std::size_t k = b * plane; k < (b + 1) * plane; ++k) {
        const double d = static_cast<double>(yd[k]) - static_cast<double>(xd[k]);
        acc += d * d;
      }
      total += acc / static_cast<double>(plane);
    }
  }
  return total / static_cast<double>(items.size());
}

TrainResult train(const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  TrainResult result;
  result.index = scan(config.data_root, config.per_class_cap);
  result.split = config.split_manifest ? read_split_manifest(*config.split_manifest, result.index)
                                       : split(result.index, config.split_ratio, config.seed);
  if (result.split.train.empty()) throw ConfigError("training subset is empty");
  if (result.split.val.empty()) throw ConfigError("validation subset is empty");

  // Independent streams for initialisation and per-step noise.
  Rng root(config.seed);
  Rng init_rng = root.split();
  Rng noise_rng = root.split();
  result.model = build_model<float>(config.spec, init_rng);
  auto& model = *result.model;

  const auto params = model.parameters();
  std::vector<Tensor> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);
  AdamState<float> adam;
  adam.config.lr = config.lr;

  BatchSource source(result.index, config.spec.height, config.spec.width);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    auto order = result.split.train;
    Rng shuffle_rng(config.seed + static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t seen = 0, batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_no) {
      const std::vector<std::size_t> chunk(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(start + config.batch_size, order.size())));
      const auto x = source.load(chunk, Phase::kUpdate, epoch);

      zero_grad(std::span<const NamedParameter<float>>(params));
      double loss_value = 0.0;
      {
        Tape<float> tape;
        typename Tape<float>::Recording rec(tape);
        const auto loss = training_loss(model.forward(x, noise_rng), x, config.weights);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_no + 1));
        }
        tape.backward(loss);
      }
      adam_step(std::span<const Tensor>(tensors), adam);
      loss_sum += loss_value * static_cast<double>(chunk.size());
      seen += chunk.size();
    }

    EpochRecord record{epoch, loss_sum / static_cast<double>(seen),
                       validation_mse(model, source, result.split.val, config.batch_size, epoch)};
    result.history.push_back(record);
    if (hooks.on_epoch) hooks.on_epoch(record);
  }
  result.access_log = source.access_log();

  if (config.output_dir) {
    const fs::path dir = *config.output_dir;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    const std::string stem = family_name(config.spec.family);
    result.checkpoint = dir / (stem + ".aec");
    save_checkpoint(model,
                    CheckpointMeta{config.epochs, result.history.back().train_loss, config.seed},
                    *result.checkpoint);
    write_history_csv(dir / (stem + "_history.csv"), result.history);
    write_split_manifest(dir / "split.txt", result.index, result.split);
  }
  return result;
}

void write_history_csv(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,train_loss,val_mse\n";
  out.precision(17);
  for (const auto& r : history) out << r.epoch << ',' << r.train_loss << ',' << r.val_mse << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<EpochRecord> read_history_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,val_mse") {
    throw IoError(path.string() + ": missing 'epoch,train_loss,val_mse' header");
  }
  std::vector<EpochRecord> history;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    EpochRecord r;
    char c1 = 0, c2 = 0;
    if (!(row >> r.epoch >> c1 >> r.train_loss >> c2 >> r.val_mse) || c1 != ',' || c2 != ',') {
      throw IoError(path.string() + ": malformed row '" + line + "'");
    }
    history.push_back(r);
  }
  return history;
}

}  // namespace aelab
