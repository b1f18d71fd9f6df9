#include "aelab/dataset.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include "aelab/errors.hpp"
#include "aelab/image_io.hpp"
#include "aelab/random.hpp"

namespace aelab {
namespace fs = std::filesystem;

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::string format_ratio(double ratio) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, ratio);
  return std::string(buf, res.ptr);
}

}  // namespace

std::vector<std::size_t> DatasetIndex::class_items(std::size_t class_id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].class_id == class_id) out.push_back(i);
  }
  return out;
}

DatasetIndex scan(const fs::path& root, std::optional<std::size_t> per_class_cap) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw ConfigError("dataset root is not a directory: " + root.string());
  DatasetIndex index;
  index.root = root;
  index.per_class_cap = per_class_cap;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) index.classes.push_back(entry.path().filename().string());
  }
  if (index.classes.empty()) throw ConfigError("dataset root has no class folders: " + root.string());
  std::sort(index.classes.begin(), index.classes.end());

  for (std::size_t c = 0; c < index.classes.size(); ++c) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(root / index.classes[c])) {
      if (entry.is_regular_file() && is_image_file(entry.path())) {
        files.push_back(entry.path().filename().string());
      }
    }
    std::sort(files.begin(), files.end());
    if (per_class_cap && files.size() > *per_class_cap) files.resize(*per_class_cap);
    if (files.empty()) index.warnings.push_back("class '" + index.classes[c] + "' has no images");
    for (const auto& f : files) index.items.push_back({index.classes[c] + "/" + f, c});
  }
  return index;
}

Split split(const DatasetIndex& index, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ConfigError("split ratio must lie in (0, 1), got " + format_ratio(ratio));
  }
  Split s;
  s.seed = seed;
  s.ratio = ratio;
  Rng rng(seed);
  for (std::size_t c = 0; c < index.classes.size(); ++c) {
    auto members = index.class_items(c);
    if (members.size() < 2) {
      if (!members.empty()) {
        s.warnings.push_back("class '" + index.classes[c] + "' has fewer than 2 items; all train");
      }
      s.train.insert(s.train.end(), members.begin(), members.end());
      continue;
    }
    rng.shuffle(members);
    const auto n_val = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(members.size())));
    const auto cut = members.size() - std::min(n_val, members.size());
    s.train.insert(s.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(cut));
    s.val.insert(s.val.end(), members.begin() + static_cast<std::ptrdiff_t>(cut), members.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

void write_split_manifest(const fs::path& file, const DatasetIndex& index, const Split& split) {
  std::vector<char> subset(index.size(), 0);
  for (auto i : split.train) subset.at(i) = 't';
  for (auto i : split.val) subset.at(i) = 'v';
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out << "#seed=" << split.seed << ",ratio=" << format_ratio(split.ratio) << '\n';
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (subset[i] == 0) throw ContractError("split does not cover item " + index.items[i].path);
    out << index.items[i].path << ',' << (subset[i] == 't' ? "train" : "val") << '\n';
  }
  if (!out) throw IoError("failed writing " + file.string());
}

Split read_split_manifest(const fs::path& file, const DatasetIndex& index) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("#seed=", 0) != 0) {
    throw ConfigError(file.string() + ": missing '#seed=<u64>,ratio=<decimal>' header");
  }
  Split s;
  const auto comma = line.find(",ratio=");
  if (comma == std::string::npos) throw ConfigError(file.string() + ": header lacks ratio");
  const std::string seed_text = line.substr(6, comma - 6);
  const std::string ratio_text = line.substr(comma + 7);
  if (std::from_chars(seed_text.data(), seed_text.data() + seed_text.size(), s.seed).ec !=
          std::errc() ||
      std::from_chars(ratio_text.data(), ratio_text.data() + ratio_text.size(), s.ratio).ec !=
          std::errc()) {
    throw ConfigError(file.string() + ": malformed header '" + line + "'");
  }

  std::unordered_map<std::string, std::size_t> lookup;
  for (std::size_t i = 0; i < index.size(); ++i) lookup.emplace(index.items[i].path, i);
  std::vector<char> seen(index.size(), 0);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto sep = line.rfind(',');
    const std::string where = file.string() + ":" + std::to_string(line_no);
    if (sep == std::string::npos) throw ConfigError(where + ": expected 'path,train|val'");
    const std::string path = line.substr(0, sep), subset = line.substr(sep + 1);
    const auto it = lookup.find(path);
    if (it == lookup.end()) throw ConfigError(where + ": unknown item " + path);
    if (seen[it->second]) throw ConfigError(where + ": duplicate item " + path);
    seen[it->second] = 1;
    if (subset == "train") {
      s.train.push_back(it->second);
    } else if (subset == "val") {
      s.val.push_back(it->second);
    } else {
      throw ConfigError(where + ": subset must be train or val, got '" + subset + "'");
    }
  }
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (!seen[i]) throw ConfigError(file.string() + ": item missing from manifest: " + index.items[i].path);
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

ImageBatch load_batch(const DatasetIndex& index, const std::vector<std::size_t>& items,
                      std::size_t height, std::size_t width) {
  if (items.empty()) throw ContractError("load_batch: empty item list");
  const std::size_t plane = 3 * height * width;
  ImageBatch batch;
  batch.images = Tensor(Shape{items.size(), 3, height, width});
  batch.items = items;
  auto out = batch.images.mutable_data();
  for (std::size_t b = 0; b < items.size(); ++b) {
    if (items[b] >= index.size()) {
      throw ContractError("load_batch: item " + std::to_string(items[b]) + " out of range");
    }
    const auto image = to_tensor(read_image(index.absolute(items[b])), height, width);
    std::copy(image.data().begin(), image.data().end(), out.begin() + static_cast<std::ptrdiff_t>(b * plane));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Synthetic generator

std::vector<std::string> synthetic_class_names(std::size_t count) {
  std::vector<std::string> names;
  for (char c = 'A'; c <= 'Z'; ++c) names.emplace_back(1, c);
  names.insert(names.end(), {"del", "nothing", "space"});
  for (std::size_t i = names.size(); i < count; ++i) names.push_back("class_" + std::to_string(i));
  names.resize(count);
  return names;
}

namespace {

constexpr int kShapeKinds = 8;

// Shape membership in the shape's own frame, radius 1.
bool inside(int kind, double u, double v) {
  switch (kind) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2: {
      // Triangle with vertices (0,-1), (±0.87, 0.5).
      const double s = std::sqrt(3.0);
      return v <= 0.5 && s * u - v <= 1.0 && -s * u - v <= 1.0;
    }
    case 3: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case 4:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    case 5:
      return std::abs(u) <= 1.0 && std::abs(v) <= 1.0 &&
             static_cast<int>(std::floor((v + 1.0) * 2.5)) % 2 == 0;
    case 6:
      return std::abs(u) + std::abs(v) <= 1.0;
    default:
      return u * u + v * v <= 1.0 && (u - 0.45) * (u - 0.45) + v * v > 0.49;
  }
}

std::array<double, 3> hue_to_rgb(double hue) {
  std::array<double, 3> rgb{};
  for (int c = 0; c < 3; ++c) {
    const double k = std::fmod(hue * 6.0 + 4.0 - 2.0 * c + 12.0, 6.0);
    rgb[static_cast<std::size_t>(c)] = 1.0 - std::clamp(std::min(k, 4.0 - k), 0.0, 1.0);
  }
  return rgb;
}

std::vector<std::uint8_t> render(std::size_t class_id, std::size_t size, Rng& rng) {
  const int kind = static_cast<int>(class_id % kShapeKinds);
  const auto color = hue_to_rgb(std::fmod(static_cast<double>(class_id) * 0.137, 1.0));
  const double n = static_cast<double>(size);
  const double cx = n / 2.0 + rng.uniform(-n / 8.0, n / 8.0);
  const double cy = n / 2.0 + rng.uniform(-n / 8.0, n / 8.0);
  const double radius = n * rng.uniform(0.22, 0.34);
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double brightness = rng.uniform(0.6, 1.0);
  const double background = rng.uniform(0.05, 0.25);
  const double gradient = rng.uniform(-0.1, 0.1);
  const double ca = std::cos(angle), sa = std::sin(angle);

  std::vector<std::uint8_t> rgb(size * size * 3);
  constexpr int kSuper = 2;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSuper - cx;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSuper - cy;
          const double u = (ca * px + sa * py) / radius;
          const double v = (-sa * px + ca * py) / radius;
          hits += inside(kind, u, v) ? 1 : 0;
        }
      }
      const double cover = hits / static_cast<double>(kSuper * kSuper);
      const double bg = std::clamp(background + gradient * (static_cast<double>(y) / n - 0.5), 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double value = bg * (1.0 - cover) + brightness * color[c] * cover;
        rgb[(y * size + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(255.0 * value));
      }
    }
  }
  return rgb;
}

}  // namespace

void make_synthetic(const fs::path& root, const SyntheticOptions& options) {
  if (options.classes == 0 || options.per_class == 0 || options.size == 0) {
    throw ConfigError("make_synthetic: classes, per_class and size must be positive");
  }
  const auto names = synthetic_class_names(options.classes);
  Rng rng(options.seed);
  for (std::size_t c = 0; c < names.size(); ++c) {
    const fs::path dir = root / names[c];
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (std::size_t i = 0; i < options.per_class; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%04zu.png", i);
      write_png(dir / (names[c] + "_" + name), options.size, options.size,
                render(c, options.size, rng));
    }
  }
}

}  // namespace aelab
