#include "aelab/evaluator.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "aelab/errors.hpp"
#include "aelab/image_io.hpp"
#include "json.hpp"

namespace aelab {
namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Objective evaluation

std::vector<double> per_image_mse(const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape() || x.rank() != 4) {
    throw ShapeError("per_image_mse: expected equal B×C×H×W shapes, got " + shape_str(x.shape()) +
                     " and " + shape_str(y.shape()));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t plane = x.numel() / batch;
  const auto xd = x.data(), yd = y.data();
  std::vector<double> out(batch, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    double acc = 0.0;
    for (std::size_t k = b * plane; k < (b + 1) * plane; ++k) {
      const double d = static_cast<double>(yd[k]) - static_cast<double>(xd[k]);
      acc += d * d;
    }
    out[b] = acc / static_cast<double>(plane);
  }
  return out;
}

EvalReport evaluate_mse(const Autoencoder<float>& model, const DatasetIndex& index,
                        const Split& split, std::size_t batch_size) {
  if (split.val.empty()) throw ConfigError("evaluate_mse: validation subset is empty");
  if (batch_size == 0) throw ConfigError("evaluate_mse: batch size must be positive");
  const auto& spec = model.spec();
  std::vector<double> class_sum(index.classes.size(), 0.0);
  std::vector<std::size_t> class_n(index.classes.size(), 0);
  double total = 0.0;
  for (std::size_t start = 0; start < split.val.size(); start += batch_size) {
    const std::vector<std::size_t> chunk(
        split.val.begin() + static_cast<std::ptrdiff_t>(start),
        split.val.begin() + static_cast<std::ptrdiff_t>(std::min(start + batch_size, split.val.size())));
    const auto batch = load_batch(index, chunk, spec.height, spec.width);
    const auto errors = per_image_mse(batch.images, model.reconstruct(batch.images));
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const auto c = index.items.at(chunk[b]).class_id;
      class_sum[c] += errors[b];
      ++class_n[c];
      total += errors[b];
    }
  }
  EvalReport report;
  report.n_images = split.val.size();
  report.mean_mse = total / static_cast<double>(report.n_images);
  for (std::size_t c = 0; c < index.classes.size(); ++c) {
    if (class_n[c] == 0) continue;
    report.per_class.push_back(
        {index.classes[c], class_n[c], class_sum[c] / static_cast<double>(class_n[c])});
  }
  return report;
}

namespace {

std::ofstream open_for_write(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  return out;
}

}  // namespace

void write_eval_csv(const fs::path& path, std::span<const EvalReport> reports) {
  auto out = open_for_write(path);
  out << "model,n,mean_mse\n";
  for (const auto& r : reports) out << r.model << ',' << r.n_images << ',' << r.mean_mse << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

void write_per_class_csv(const fs::path& path, std::span<const EvalReport> reports) {
  auto out = open_for_write(path);
  out << "model,class,n,mean_mse\n";
  for (const auto& r : reports) {
    for (const auto& c : r.per_class) {
      out << r.model << ',' << c.class_name << ',' << c.n << ',' << c.mean_mse << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Reconstruction export

std::string opaque_id(Rng& rng, std::span<const std::string> avoid, std::size_t length) {
  // Digits plus letters absent from "feedforward", "convolutional",
  // "diffusion" and their short forms.
  static constexpr char kAlphabet[] = "0123456789bghjkmpqxyz";
  constexpr std::size_t kSize = sizeof(kAlphabet) - 1;
  const auto lower = [](std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
  };
  for (;;) {
    std::string id(length, '0');
    for (auto& ch : id) ch = kAlphabet[rng.below(kSize)];
    const bool clean = std::none_of(avoid.begin(), avoid.end(), [&](const std::string& word) {
      return !word.empty() && id.find(lower(word)) != std::string::npos;
    });
    if (clean) return id;
  }
}

ExportManifest export_reconstructions(std::span<const NamedModel> models, const DatasetIndex& index,
                                      const std::vector<std::size_t>& items, const fs::path& out_dir,
                                      std::uint64_t seed) {
  if (models.empty()) throw ConfigError("export_reconstructions: no models given");
  if (items.empty()) throw ConfigError("export_reconstructions: no items given");
  const auto& first = models.front().model->spec();
  std::vector<std::string> ids;
  for (const auto& m : models) {
    if (m.model == nullptr || m.id.empty()) throw ConfigError("export_reconstructions: unnamed model");
    const auto& spec = m.model->spec();
    if (spec.height != first.height || spec.width != first.width) {
      throw ConfigError("export_reconstructions: model '" + m.id + "' expects " +
                        std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                        ", others " + std::to_string(first.height) + "x" +
                        std::to_string(first.width));
    }
    if (std::find(ids.begin(), ids.end(), m.id) != ids.end()) {
      throw ConfigError("export_reconstructions: duplicate model id '" + m.id + "'");
    }
    ids.push_back(m.id);
  }

  const fs::path img_dir = out_dir / "img";
  std::error_code ec;
  fs::create_directories(img_dir, ec);
  if (ec) throw IoError("cannot create " + img_dir.string() + ": " + ec.message());

  ExportManifest manifest;
  manifest.height = first.height;
  manifest.width = first.width;
  manifest.seed = seed;
  Rng rng(seed);
  std::unordered_set<std::string> used;
  const auto fresh_name = [&] {
    for (;;) {
      auto name = opaque_id(rng, ids) + ".png";
      if (used.insert(name).second) return name;
    }
  };

  const auto batch = load_batch(index, items, first.height, first.width);
  std::vector<Tensor> outputs;
  for (const auto& m : models) outputs.push_back(m.model->reconstruct(batch.images));
  const std::size_t plane = 3 * first.height * first.width;
  const auto slice = [&](const Tensor& t, std::size_t b) {
    const auto src = t.data().subspan(b * plane, plane);
    return Tensor(Shape{3, first.height, first.width}, std::vector<float>(src.begin(), src.end()));
  };

  for (std::size_t b = 0; b < items.size(); ++b) {
    const auto& item = index.items.at(items[b]);
    const std::string& class_name = index.classes.at(item.class_id);
    const auto original = fresh_name();
    write_png(img_dir / original, slice(batch.images, b));
    manifest.entries.push_back({original, item.path, class_name, "", original});
    for (std::size_t m = 0; m < models.size(); ++m) {
      const auto name = fresh_name();
      write_png(img_dir / name, slice(outputs[m], b));
      manifest.entries.push_back({name, item.path, class_name, models[m].id, original});
    }
  }

  json entries = json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"file", e.file},
                       {"item", e.item_path},
                       {"class", e.class_name},
                       {"model", e.model.empty() ? json(nullptr) : json(e.model)},
                       {"original", e.original_file}});
  }
  const json doc = {{"height", manifest.height},
                    {"width", manifest.width},
                    {"seed", manifest.seed},
                    {"entries", entries}};
  auto out = open_for_write(out_dir / "manifest.json");
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + (out_dir / "manifest.json").string());
  return manifest;
}

ExportManifest read_export_manifest(const fs::path& out_dir) {
  const auto path = out_dir / "manifest.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  ExportManifest manifest;
  try {
    const auto doc = json::parse(in);
    manifest.height = doc.at("height").get<std::size_t>();
    manifest.width = doc.at("width").get<std::size_t>();
    manifest.seed = doc.at("seed").get<std::uint64_t>();
    for (const auto& e : doc.at("entries")) {
      ExportEntry entry;
      entry.file = e.at("file").get<std::string>();
      entry.item_path = e.at("item").get<std::string>();
      entry.class_name = e.at("class").get<std::string>();
      entry.model = e.at("model").is_null() ? "" : e.at("model").get<std::string>();
      entry.original_file = e.at("original").get<std::string>();
      manifest.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Rating study

std::vector<RatingItem> rating_items(const ExportManifest& manifest) {
  std::vector<RatingItem> items;
  for (const auto& e : manifest.entries) {
    if (e.model.empty()) continue;
    const auto stem = fs::path(e.file).stem().string();
    items.push_back({stem, e.file, e.model, e.class_name, e.original_file});
  }
  return items;
}

MosReport compute_mos(std::span<const RatingRecord> records, std::span<const RatingItem> items) {
  std::unordered_map<std::string, const RatingItem*> lookup;
  for (const auto& item : items) lookup.emplace(item.item_id, &item);
  std::map<std::string, ModelMos> by_model;
  std::map<std::string, long long> sums;
  for (const auto& r : records) {
    const auto it = lookup.find(r.item_id);
    if (it == lookup.end()) throw ContractError("compute_mos: unknown item '" + r.item_id + "'");
    if (r.rating < 1 || r.rating > 5) {
      throw ContractError("compute_mos: rating " + std::to_string(r.rating) + " outside 1..5");
    }
    auto& m = by_model[it->second->model];
    m.model = it->second->model;
    ++m.count;
    ++m.histogram[static_cast<std::size_t>(r.rating - 1)];
    sums[m.model] += r.rating;
  }
  MosReport report;
  for (auto& [id, m] : by_model) {
    m.mean = static_cast<double>(sums[id]) / static_cast<double>(m.count);
    report.models.push_back(m);
  }
  return report;
}

std::string rating_record_json(const RatingRecord& r) {
  return json{{"session_id", r.session_id},
              {"rater_id", r.rater_id},
              {"item_id", r.item_id},
              {"rating", r.rating},
              {"timestamp", r.timestamp}}
      .dump();
}

std::vector<RatingRecord> read_rating_log(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<RatingRecord> records;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      RatingRecord r;
      r.session_id = j.at("session_id").get<std::string>();
      r.rater_id = j.value("rater_id", "");
      r.item_id = j.at("item_id").get<std::string>();
      r.rating = j.at("rating").get<int>();
      r.timestamp = j.value("timestamp", "");
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return records;
}

std::string mos_report_json(const MosReport& report) {
  json models = json::array();
  for (const auto& m : report.models) {
    models.push_back({{"model", m.model},
                      {"mean", m.mean},
                      {"count", m.count},
                      {"histogram", m.histogram}});
  }
  return json{{"models", models}}.dump();
}

std::string format_mos_table(const MosReport& report) {
  std::ostringstream out;
  out << std::left << std::setw(16) << "Method" << std::setw(14) << "Average MOS" << std::setw(8)
      << "Count" << "Histogram (1..5)\n";
  for (const auto& m : report.models) {
    std::ostringstream mean;
    mean << std::fixed << std::setprecision(2) << m.mean;
    out << std::setw(16) << m.model << std::setw(14) << mean.str() << std::setw(8) << m.count;
    for (std::size_t k = 0; k < 5; ++k) out << (k ? " " : "") << m.histogram[k];
    out << '\n';
  }
  return out.str();
}

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

}  // namespace

RatingService::RatingService(std::vector<RatingItem> items, fs::path log_path,
                             RatingServiceOptions options)
    : items_(std::move(items)),
      log_path_(std::move(log_path)),
      options_(std::move(options)),
      rng_(options_.seed) {
  if (items_.empty()) throw ConfigError("rating service: no items to rate");
  if (!options_.clock) options_.clock = utc_now;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (!by_id_.emplace(items_[i].item_id, i).second) {
      throw ConfigError("rating service: duplicate item id '" + items_[i].item_id + "'");
    }
    servable_.insert(items_[i].image_file);
    servable_.insert(items_[i].original_file);
  }
  if (fs::exists(log_path_)) {
    const auto previous = read_rating_log(log_path_);
    compute_mos(previous, items_);  // validates items and ratings
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& r : previous) {
      if (!seen.emplace(r.session_id, r.item_id).second) {
        throw IoError(log_path_.string() + ": item '" + r.item_id + "' rated twice in session '" +
                      r.session_id + "'");
      }
      reserved_sessions_.insert(r.session_id);
    }
  } else {
    if (log_path_.has_parent_path()) fs::create_directories(log_path_.parent_path());
    std::ofstream touch(log_path_, std::ios::binary | std::ios::app);
    if (!touch) throw IoError("cannot create rating log " + log_path_.string());
  }
}

std::string RatingService::create_session(const std::string& rater_id) {
  std::lock_guard lock(mutex_);
  std::vector<std::string> avoid;
  for (const auto& item : items_) avoid.push_back(item.model);
  std::string id;
  do {
    id = "s" + opaque_id(rng_, avoid, 12);
  } while (sessions_.count(id) != 0 || reserved_sessions_.count(id) != 0);
  Session session;
  session.rater_id = rater_id;
  session.order.resize(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) session.order[i] = i;
  Rng order_rng(rng_.next_u64());
  order_rng.shuffle(session.order);
  if (options_.items_per_session && *options_.items_per_session < session.order.size()) {
    session.order.resize(*options_.items_per_session);
  }
  sessions_.emplace(id, std::move(session));
  return id;
}

NextItem RatingService::schedule_next(const std::string& session_id) {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFoundError("unknown session '" + session_id + "'");
  auto& s = it->second;
  NextItem next;
  next.total = s.order.size();
  next.rated = s.rated.size();
  while (s.cursor < s.order.size() && s.rated.count(items_[s.order[s.cursor]].item_id) != 0) {
    ++s.cursor;
  }
  if (s.cursor == s.order.size()) {
    next.exhausted = true;
    return next;
  }
  const auto& item = items_[s.order[s.cursor++]];
  next.item_id = item.item_id;
  next.image_url = "/img/" + item.image_file;
  next.original_url = "/img/" + item.original_file;
  return next;
}

RatingRecord RatingService::record_rating(const std::string& session_id, const std::string& item_id,
                                          int rating) {
  if (rating < 1 || rating > 5) {
    throw ValidationError("rating must be an integer from 1 to 5, got " + std::to_string(rating));
  }
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFoundError("unknown session '" + session_id + "'");
  if (by_id_.count(item_id) == 0) throw NotFoundError("unknown item '" + item_id + "'");
  auto& s = it->second;
  if (s.rated.count(item_id) != 0) {
    throw ConflictError("item '" + item_id + "' already rated in session '" + session_id + "'");
  }
  RatingRecord record{session_id, s.rater_id, item_id, rating, options_.clock()};
  std::ofstream out(log_path_, std::ios::binary | std::ios::app);
  out << rating_record_json(record) << '\n';
  out.flush();
  if (!out) throw IoError("failed appending to " + log_path_.string());
  s.rated.insert(item_id);
  return record;
}

MosReport RatingService::report() const {
  std::vector<RatingRecord> snapshot;
  {
    std::lock_guard lock(mutex_);
    snapshot = read_rating_log(log_path_);
  }
  return compute_mos(snapshot, items_);
}

const RatingItem* RatingService::find_item(const std::string& item_id) const {
  const auto it = by_id_.find(item_id);
  return it == by_id_.end() ? nullptr : &items_[it->second];
}

bool RatingService::is_servable(const std::string& file) const { return servable_.count(file) != 0; }

}  // namespace aelab
