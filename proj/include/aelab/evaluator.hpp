#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "aelab/autoencoders.hpp"
#include "aelab/dataset.hpp"

namespace aelab {

// ---------------------------------------------------------------------------
// Objective evaluation

/// Mean squared error of each image in a B×C×H×W pair, accumulated in double.
std::vector<double> per_image_mse(const Tensor& x, const Tensor& y);

struct ClassMse {
  std::string class_name;
  std::size_t n = 0;
  double mean_mse = 0.0;
};

struct EvalReport {
  std::string model;
  std::string checkpoint;
  std::size_t n_images = 0;
  double mean_mse = 0.0;
  std::vector<ClassMse> per_class;  // classes with at least one validation image
};

/// Mean over the validation images of the per-image reconstruction MSE.
/// Uses `reconstruct`, so diffusion runs its deterministic reverse chain.
EvalReport evaluate_mse(const Autoencoder<float>& model, const DatasetIndex& index,
                        const Split& split, std::size_t batch_size = 32);

/// `model,n,mean_mse`, one row per report.
void write_eval_csv(const std::filesystem::path& path, std::span<const EvalReport> reports);
/// `model,class,n,mean_mse`.
void write_per_class_csv(const std::filesystem::path& path, std::span<const EvalReport> reports);

// ---------------------------------------------------------------------------
// Reconstruction export

struct NamedModel {
  std::string id;
  const Autoencoder<float>* model = nullptr;
};

/// One exported PNG. `model` is empty for originals.
struct ExportEntry {
  std::string file;  // "<opaque>.png" inside <out>/img
  std::string item_path;
  std::string class_name;
  std::string model;
  std::string original_file;  // the matching original; equals `file` for originals
};

struct ExportManifest {
  std::size_t height = 0;
  std::size_t width = 0;
  std::uint64_t seed = 0;
  std::vector<ExportEntry> entries;
};

/// Writes, for every item, the resized original and one reconstruction per
/// model to `<out>/img/<opaque>.png` (pixels round(255·x)), plus the
/// server-side `<out>/manifest.json`. Opaque names are seeded and never
/// contain a model id. All models must share the input size.
ExportManifest export_reconstructions(std::span<const NamedModel> models, const DatasetIndex& index,
                                      const std::vector<std::size_t>& items,
                                      const std::filesystem::path& out_dir, std::uint64_t seed);

ExportManifest read_export_manifest(const std::filesystem::path& out_dir);

/// Random string over an alphabet without the letters of common model names,
/// re-drawn until it avoids every string in `avoid` (case-insensitive).
std::string opaque_id(Rng& rng, std::span<const std::string> avoid, std::size_t length = 16);

// ---------------------------------------------------------------------------
// Rating study

struct RatingItem {
  std::string item_id;  // opaque; the image file stem
  std::string image_file;
  std::string model;  // server-side only
  std::string class_label;
  std::string original_file;
};

/// Reconstructions of a manifest as rating items, in manifest order.
std::vector<RatingItem> rating_items(const ExportManifest& manifest);

struct RatingRecord {
  std::string session_id;
  std::string rater_id;
  std::string item_id;
  int rating = 0;
  std::string timestamp;  // ISO-8601 UTC

  bool operator==(const RatingRecord&) const = default;
};

struct ModelMos {
  std::string model;
  double mean = 0.0;
  std::size_t count = 0;
  std::array<std::size_t, 5> histogram{};  // ratings 1..5

  bool operator==(const ModelMos&) const = default;
};

struct MosReport {
  std::vector<ModelMos> models;  // sorted by model id; only rated models

  bool operator==(const MosReport&) const = default;
};

/// Unweighted mean per hidden model id. Throws ContractError for a record
/// whose item is unknown or whose rating lies outside 1..5.
MosReport compute_mos(std::span<const RatingRecord> records, std::span<const RatingItem> items);

std::string rating_record_json(const RatingRecord& record);
/// Parses a JSON-lines rating log; IoError names the line.
std::vector<RatingRecord> read_rating_log(const std::filesystem::path& path);

std::string mos_report_json(const MosReport& report);
/// Table with columns Method and Average MOS, plus count and histogram.
std::string format_mos_table(const MosReport& report);

/// What a rater sees next. Never carries a model id.
struct NextItem {
  bool exhausted = false;
  std::string item_id;
  std::string image_url;     // /img/<opaque>.png
  std::string original_url;  // for side-by-side display
  std::size_t rated = 0;
  std::size_t total = 0;
};

struct RatingServiceOptions {
  std::uint64_t seed = 0;
  /// Items presented per session; all items when unset.
  std::optional<std::size_t> items_per_session;
  /// Timestamp source, UTC ISO-8601 wall clock by default.
  std::function<std::string()> clock;
};

/// Sessions, blinded scheduling and append-only rating persistence. Safe to
/// call from several threads; one mutex serializes state and the log.
class RatingService {
 public:
  /// Existing records in `log_path` are kept and their session ids reserved.
  RatingService(std::vector<RatingItem> items, std::filesystem::path log_path,
                RatingServiceOptions options = {});

  std::string create_session(const std::string& rater_id = "");
  /// Hands out the session's next unrated item in its seeded shuffled order.
  /// NotFoundError for an unknown session.
  NextItem schedule_next(const std::string& session_id);
  /// ValidationError (rating outside 1..5), NotFoundError (session or item),
  /// ConflictError (item already rated in this session). The record is
  /// flushed to the log before returning.
  RatingRecord record_rating(const std::string& session_id, const std::string& item_id, int rating);
  /// Recomputed from the log file.
  MosReport report() const;

  const std::vector<RatingItem>& items() const { return items_; }
  const RatingItem* find_item(const std::string& item_id) const;
  /// Image files the service may serve: reconstructions and their originals.
  bool is_servable(const std::string& file) const;
  const std::filesystem::path& log_path() const { return log_path_; }

 private:
  struct Session {
    std::string rater_id;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::unordered_set<std::string> rated;
  };

  std::vector<RatingItem> items_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::unordered_set<std::string> servable_;
  std::filesystem::path log_path_;
  RatingServiceOptions options_;
  mutable std::mutex mutex_;
  Rng rng_;
  std::unordered_map<std::string, Session> sessions_;
  std::unordered_set<std::string> reserved_sessions_;
};

}  // namespace aelab
