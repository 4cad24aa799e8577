// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "oneshot_ldm/rng.hpp"

namespace oneshot {

enum class DatasetName { QuickDrawFS, Omniglot };
enum class SplitName { Train, Test };

DatasetName parse_dataset_name(const std::string& s);
std::string to_string(DatasetName name);
SplitName parse_split_name(const std::string& s);
std::string to_string(SplitName split);

/// One category: its conditioning exemplar plus the variations drawn from it.
/// Images are [1, H, W] float32 in [0, 1].
struct Episode {
  int64_t category_id = 0;
  torch::Tensor exemplar;
  std::vector<torch::Tensor> variations;
  /// Alphabet for Omniglot, empty otherwise.
  std::string group;
};

struct DatasetSplit {
  std::vector<Episode> episodes;
  SplitName split = SplitName::Train;
  int64_t height = 48;
  int64_t width = 48;

  size_t num_variations() const;
  /// Index into `episodes` of a category id; throws ValidationError if absent.
  size_t index_of(int64_t category_id) const;
  std::vector<int64_t> category_ids() const;
  /// Exemplars stacked in episode order, [N, 1, H, W].
  torch::Tensor exemplar_batch() const;
};

struct LoadOptions {
  int64_t image_size = 48;
  /// Whether the exemplar also appears in the variation pool.
  bool exemplar_in_variations = false;
  /// Keep only categories whose group is listed (empty: keep all).
  std::vector<std::string> groups;
  /// Keep only the first `max_groups` groups in sorted order (0: no limit).
  size_t max_groups = 0;
};

/// Loads `<root>/manifest.json` and the category directories of one split.
///
/// Layout: `<root>/<category_id>/sample_<k>.png` (8-bit grayscale),
/// `<root>/<category_id>/exemplar.idx` holding the exemplar's k, and
/// `<root>/manifest.json` mapping category ids to their split.
DatasetSplit load_dataset(const std::filesystem::path& root, DatasetName name, SplitName split,
                          const LoadOptions& options = {});

/// Category entry used when writing a dataset to disk.
struct CategoryRecord {
  int64_t category_id = 0;
  SplitName split = SplitName::Train;
  std::string group;
  std::vector<torch::Tensor> samples;
  size_t exemplar_index = 0;
};

void write_dataset(const std::filesystem::path& root, DatasetName name,
                   const std::vector<CategoryRecord>& categories, int64_t image_size = 48);

/// Image batch [N, 1, H, W] -> feature rows [N, k].
using Embedder = std::function<torch::Tensor(const torch::Tensor&)>;

/// Flattens raw pixels; the fallback embedder for exemplar selection.
torch::Tensor pixel_embedding(const torch::Tensor& images);

/// Sample with the smallest mean Euclidean embedding distance to the other
/// samples. Ties resolve to the lowest index.
std::pair<torch::Tensor, size_t> select_exemplar(const std::vector<torch::Tensor>& samples,
                                                 const Embedder& embedder = pixel_embedding);

/// A training batch of (variation, label, exemplar) triples. `labels` index
/// into the split's episodes, so `exemplars[i]` is
/// `split.episodes[labels[i]].exemplar`.
struct Batch {
  torch::Tensor images;
  torch::Tensor labels;
  torch::Tensor exemplars;
  std::vector<int64_t> category_ids;
};

/// Iterates the split's variations in shuffled order, each once per epoch.
/// The last batch of an epoch may be short. Holds private RNG state; do not
/// share one sampler between workers.
class BatchSampler {
 public:
  BatchSampler(const DatasetSplit& split, int64_t batch_size, Rng rng);

  /// Next batch of the current epoch, or nullopt once the epoch is exhausted
  /// (the following call starts a new epoch).
  std::optional<Batch> next();
  int64_t epoch() const { return epoch_; }
  int64_t batches_per_epoch() const;
  Rng& rng() { return rng_; }

 private:
  void reshuffle();

  const DatasetSplit* split_;
  int64_t batch_size_;
  Rng rng_;
  std::vector<std::pair<uint32_t, uint32_t>> items_;
  std::vector<int64_t> order_;
  size_t cursor_ = 0;
  int64_t epoch_ = 0;
  bool exhausted_ = true;
};

/// One batch drawn without replacement.
Batch make_batch(const DatasetSplit& split, int64_t batch_size, Rng& rng);

/// Assigns `held_out` seeded categories per group to the test split.
std::map<int64_t, SplitName> group_holdout_split(const std::map<std::string, std::vector<int64_t>>& groups,
                                                 size_t held_out, uint64_t seed);

/// Converts an Omniglot tree (`<src>/<alphabet>/<character>/*.png`, dark ink
/// on white) into the on-disk layout: ink becomes 1, images are area-resized
/// to `image_size`, 3 characters per alphabet go to test, exemplars are
/// selected by `select_exemplar` on pixels. Returns the number of categories.
size_t import_omniglot(const std::vector<std::filesystem::path>& sources,
                       const std::filesystem::path& out_root, int64_t image_size, uint64_t seed,
                       size_t held_out_per_alphabet = 3);

}  // namespace oneshot
