#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "aelab/tensor.hpp"

namespace aelab {

struct DatasetItem {
  std::string path;  // relative to the root, '/'-separated
  std::size_t class_id = 0;

  bool operator==(const DatasetItem&) const = default;
};

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<std::string> classes;  // sorted; ids are positions
  std::vector<DatasetItem> items;    // grouped by class, file order within
  std::optional<std::size_t> per_class_cap;
  std::vector<std::string> warnings;

  std::size_t size() const { return items.size(); }
  std::filesystem::path absolute(std::size_t item) const { return root / items.at(item).path; }
  /// Item indices of one class, in index order.
  std::vector<std::size_t> class_items(std::size_t class_id) const;
};

struct Split {
  std::vector<std::size_t> train;  // ascending item indices
  std::vector<std::size_t> val;
  std::uint64_t seed = 0;
  double ratio = 0.2;
  std::vector<std::string> warnings;
};

struct ImageBatch {
  Tensor images;  // B×3×H×W in [0, 1]
  std::vector<std::size_t> items;
};

/// Indexes `root/<Class>/<file>.{png,jpg,jpeg}`. Classes and files are sorted
/// by name so the result never depends on directory enumeration order. With
/// a cap, each class keeps its first `cap` files.
DatasetIndex scan(const std::filesystem::path& root,
                  std::optional<std::size_t> per_class_cap = std::nullopt);

/// Stratified split: each class is shuffled with the seeded generator and its
/// last round(ratio · n_c) items go to validation.
Split split(const DatasetIndex& index, double ratio, std::uint64_t seed);

/// `#seed=<u64>,ratio=<decimal>` header, then one `path,train|val` line per
/// item in index order.
void write_split_manifest(const std::filesystem::path& file, const DatasetIndex& index,
                          const Split& split);
/// Rebuilds a split from a manifest. Every indexed item must appear once.
Split read_split_manifest(const std::filesystem::path& file, const DatasetIndex& index);

/// Decodes, resizes and stacks the given items. Any failure aborts the whole
/// batch with an IoError naming the file.
ImageBatch load_batch(const DatasetIndex& index, const std::vector<std::size_t>& items,
                      std::size_t height, std::size_t width);

struct SyntheticOptions {
  std::size_t classes = 29;
  std::size_t per_class = 20;
  std::size_t size = 32;
  std::uint64_t seed = 0;
};

/// Class folder names used by the generator: A–Z, del, nothing, space, then
/// class_29, class_30, ...
std::vector<std::string> synthetic_class_names(std::size_t count);

/// Writes a conforming tree of PNG images, one procedural shape family per
/// class with varied pose and brightness. Same options give identical bytes.
void make_synthetic(const std::filesystem::path& root, const SyntheticOptions& options);

}  // namespace aelab
