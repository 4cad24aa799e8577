// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "oneshot_ldm/errors.hpp"
#include "oneshot_ldm/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace oneshot {

DatasetName parse_dataset_name(const std::string& s) {
  if (s == "quickdraw-fs") return DatasetName::QuickDrawFS;
  if (s == "omniglot") return DatasetName::Omniglot;
  throw ConfigError("unknown dataset '" + s + "' (expected quickdraw-fs or omniglot)");
}

std::string to_string(DatasetName name) {
  return name == DatasetName::QuickDrawFS ? "quickdraw-fs" : "omniglot";
}

SplitName parse_split_name(const std::string& s) {
  if (s == "train") return SplitName::Train;
  if (s == "test") return SplitName::Test;
  throw ConfigError("unknown split '" + s + "' (expected train or test)");
}

std::string to_string(SplitName split) { return split == SplitName::Train ? "train" : "test"; }

size_t DatasetSplit::num_variations() const {
  size_t n = 0;
  for (const auto& e : episodes) n += e.variations.size();
  return n;
}

size_t DatasetSplit::index_of(int64_t category_id) const {
  for (size_t i = 0; i < episodes.size(); ++i) {
    if (episodes[i].category_id == category_id) return i;
  }
  throw ValidationError("category " + std::to_string(category_id) + " not in split " + to_string(split));
}

std::vector<int64_t> DatasetSplit::category_ids() const {
  std::vector<int64_t> ids;
  ids.reserve(episodes.size());
  for (const auto& e : episodes) ids.push_back(e.category_id);
  return ids;
}

torch::Tensor DatasetSplit::exemplar_batch() const {
  std::vector<torch::Tensor> xs;
  xs.reserve(episodes.size());
  for (const auto& e : episodes) xs.push_back(e.exemplar);
  return torch::stack(xs);
}

namespace {

struct ManifestEntry {
  SplitName split;
  std::string group;
};

std::map<int64_t, ManifestEntry> read_manifest(const fs::path& root, DatasetName name) {
  const auto path = root / "manifest.json";
  if (!fs::exists(path)) throw IoError("missing manifest " + path.string());
  std::ifstream in(path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string(), e.what());
  }
  if (doc.contains("dataset") && doc["dataset"].get<std::string>() != to_string(name)) {
    throw ValidationError(path.string() + " describes dataset '" + doc["dataset"].get<std::string>() +
                          "', not '" + to_string(name) + "'");
  }
  if (!doc.contains("categories") || !doc["categories"].is_object()) {
    throw ParseError(path.string(), "manifest needs a 'categories' object");
  }
  std::map<int64_t, ManifestEntry> out;
  for (const auto& [key, value] : doc["categories"].items()) {
    int64_t id = 0;
    const auto res = std::from_chars(key.data(), key.data() + key.size(), id);
    if (res.ec != std::errc() || res.ptr != key.data() + key.size()) {
      throw ParseError(path.string(), "category id '" + key + "' is not an integer");
    }
    ManifestEntry entry;
    try {
      if (value.is_string()) {
        entry.split = parse_split_name(value.get<std::string>());
      } else {
        entry.split = parse_split_name(value.at("split").get<std::string>());
        if (value.contains("group")) entry.group = value["group"].get<std::string>();
      }
    } catch (const json::exception& e) {
      throw ParseError(path.string(), "category " + key + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ParseError(path.string(), "category " + key + ": " + e.what());
    }
    out.emplace(id, std::move(entry));
  }
  return out;
}

/// sample_<k>.png files of a category directory, sorted by k.
std::vector<std::pair<int64_t, fs::path>> list_samples(const fs::path& dir) {
  std::vector<std::pair<int64_t, fs::path>> out;
  for (const auto& ent : fs::directory_iterator(dir)) {
    const auto name = ent.path().filename().string();
    if (ent.path().extension() != ".png") continue;
    if (name.rfind("sample_", 0) != 0) {
      throw ParseError(ent.path().string(), "unexpected image name (want sample_<k>.png)");
    }
    const std::string stem = ent.path().stem().string().substr(7);
    int64_t k = 0;
    const auto res = std::from_chars(stem.data(), stem.data() + stem.size(), k);
    if (res.ec != std::errc() || res.ptr != stem.data() + stem.size()) {
      throw ParseError(ent.path().string(), "sample index is not an integer");
    }
    out.emplace_back(k, ent.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int64_t read_exemplar_index(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing " + path.string());
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto b = text.find_first_not_of(" \t\r\n");
  const auto e = text.find_last_not_of(" \t\r\n");
  if (b == std::string::npos) throw ParseError(path.string(), "empty exemplar index");
  const std::string body = text.substr(b, e - b + 1);
  int64_t k = 0;
  const auto res = std::from_chars(body.data(), body.data() + body.size(), k);
  if (res.ec != std::errc() || res.ptr != body.data() + body.size()) {
    throw ParseError(path.string(), "exemplar index '" + body + "' is not an integer");
  }
  return k;
}

}  // namespace

DatasetSplit load_dataset(const fs::path& root, DatasetName name, SplitName split,
                          const LoadOptions& options) {
  if (!fs::exists(root) || !fs::is_directory(root)) {
    throw IoError("dataset root " + root.string() + " does not exist");
  }
  const auto manifest = read_manifest(root, name);

  std::set<std::string> keep_groups(options.groups.begin(), options.groups.end());
  if (options.max_groups > 0) {
    std::set<std::string> all;
    for (const auto& [id, e] : manifest) all.insert(e.group);
    size_t taken = 0;
    for (const auto& g : all) {
      if (taken++ >= options.max_groups) break;
      if (options.groups.empty() || keep_groups.count(g)) keep_groups.insert(g);
    }
    if (!options.groups.empty()) {
      std::set<std::string> both;
      for (const auto& g : options.groups) {
        if (keep_groups.count(g)) both.insert(g);
      }
      keep_groups = both;
    }
  }

  DatasetSplit out;
  out.split = split;
  out.height = options.image_size;
  out.width = options.image_size;
  for (const auto& [id, entry] : manifest) {
    if (entry.split != split) continue;
    if (!keep_groups.empty() && !keep_groups.count(entry.group)) continue;
    const auto dir = root / std::to_string(id);
    if (!fs::is_directory(dir)) throw IoError("missing category directory " + dir.string());
    const auto samples = list_samples(dir);
    if (samples.empty()) {
      throw ValidationError("category " + std::to_string(id) + " has no samples");
    }
    const int64_t ex_k = read_exemplar_index(dir / "exemplar.idx");
    Episode ep;
    ep.category_id = id;
    ep.group = entry.group;
    bool found = false;
    for (const auto& [k, path] : samples) {
      auto img = read_png_gray(path);
      if (img.size(1) != options.image_size || img.size(2) != options.image_size) {
        throw ParseError(path.string(), "image is " + std::to_string(img.size(1)) + "x" +
                                            std::to_string(img.size(2)) + ", expected " +
                                            std::to_string(options.image_size) + "x" +
                                            std::to_string(options.image_size));
      }
      if (k == ex_k) {
        ep.exemplar = img;
        found = true;
        if (!options.exemplar_in_variations) continue;
      }
      ep.variations.push_back(std::move(img));
    }
    if (!found) {
      throw ParseError((dir / "exemplar.idx").string(),
                       "exemplar index " + std::to_string(ex_k) + " names no sample");
    }
    if (ep.variations.empty()) {
      throw ValidationError("category " + std::to_string(id) + " has no variations besides its exemplar");
    }
    out.episodes.push_back(std::move(ep));
  }
  return out;
}

void write_dataset(const fs::path& root, DatasetName name, const std::vector<CategoryRecord>& categories,
                   int64_t image_size) {
  fs::create_directories(root);
  json cats = json::object();
  for (const auto& c : categories) {
    if (c.samples.empty()) throw ValidationError("category " + std::to_string(c.category_id) + " is empty");
    if (c.exemplar_index >= c.samples.size()) throw ValidationError("exemplar index out of range");
    const auto dir = root / std::to_string(c.category_id);
    fs::create_directories(dir);
    for (size_t k = 0; k < c.samples.size(); ++k) {
      write_png_gray(dir / ("sample_" + std::to_string(k) + ".png"), c.samples[k]);
    }
    std::ofstream(dir / "exemplar.idx") << c.exemplar_index << "\n";
    json entry = {{"split", to_string(c.split)}};
    if (!c.group.empty()) entry["group"] = c.group;
    cats[std::to_string(c.category_id)] = entry;
  }
  json doc = {{"schema_version", 1},
              {"dataset", to_string(name)},
              {"image_size", {image_size, image_size}},
              {"categories", cats}};
  std::ofstream(root / "manifest.json") << doc.dump(2) << "\n";
}

torch::Tensor pixel_embedding(const torch::Tensor& images) {
  return images.reshape({images.size(0), -1}).to(torch::kFloat64);
}

std::pair<torch::Tensor, size_t> select_exemplar(const std::vector<torch::Tensor>& samples,
                                                 const Embedder& embedder) {
  if (samples.empty()) throw ValidationError("select_exemplar: no samples");
  if (samples.size() == 1) return {samples.front(), 0};
  torch::NoGradGuard guard;
  auto emb = embedder(torch::stack(samples)).to(torch::kFloat64);
  if (emb.dim() != 2 || emb.size(0) != static_cast<int64_t>(samples.size())) {
    throw ShapeError("embedder must return one row per sample");
  }
  const auto n = emb.size(0);
  auto dist = (emb.unsqueeze(1) - emb.unsqueeze(0)).pow(2).sum(-1).sqrt();
  auto mean = dist.sum(1) / static_cast<double>(n - 1);
  auto acc = mean.accessor<double, 1>();
  size_t best = 0;
  for (int64_t i = 1; i < n; ++i) {
    if (acc[i] < acc[static_cast<int64_t>(best)]) best = static_cast<size_t>(i);
  }
  return {samples[best], best};
}

BatchSampler::BatchSampler(const DatasetSplit& split, int64_t batch_size, Rng rng)
    : split_(&split), batch_size_(batch_size), rng_(std::move(rng)) {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  for (size_t e = 0; e < split.episodes.size(); ++e) {
    for (size_t v = 0; v < split.episodes[e].variations.size(); ++v) {
      items_.emplace_back(static_cast<uint32_t>(e), static_cast<uint32_t>(v));
    }
  }
  if (static_cast<size_t>(batch_size) > items_.size()) {
    throw ValidationError("batch_size " + std::to_string(batch_size) + " exceeds split size " +
                          std::to_string(items_.size()));
  }
}

int64_t BatchSampler::batches_per_epoch() const {
  const auto n = static_cast<int64_t>(items_.size());
  return (n + batch_size_ - 1) / batch_size_;
}

void BatchSampler::reshuffle() {
  order_ = rng_.permutation(static_cast<int64_t>(items_.size()));
  cursor_ = 0;
}

namespace {

Batch gather(const DatasetSplit& split, const std::vector<std::pair<uint32_t, uint32_t>>& items,
             const std::vector<int64_t>& order, size_t begin, size_t end) {
  std::vector<torch::Tensor> xs, ys;
  std::vector<int64_t> labels, ids;
  for (size_t i = begin; i < end; ++i) {
    const auto [e, v] = items[static_cast<size_t>(order[i])];
    const auto& ep = split.episodes[e];
    xs.push_back(ep.variations[v]);
    ys.push_back(ep.exemplar);
    labels.push_back(e);
    ids.push_back(ep.category_id);
  }
  Batch b;
  b.images = torch::stack(xs);
  b.exemplars = torch::stack(ys);
  b.labels = torch::tensor(labels, torch::kInt64);
  b.category_ids = std::move(ids);
  return b;
}

}  // namespace

std::optional<Batch> BatchSampler::next() {
  if (exhausted_) {
    reshuffle();
    exhausted_ = false;
  }
  if (cursor_ >= order_.size()) {
    exhausted_ = true;
    ++epoch_;
    return std::nullopt;
  }
  const size_t end = std::min(order_.size(), cursor_ + static_cast<size_t>(batch_size_));
  auto b = gather(*split_, items_, order_, cursor_, end);
  cursor_ = end;
  return b;
}

Batch make_batch(const DatasetSplit& split, int64_t batch_size, Rng& rng) {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  std::vector<std::pair<uint32_t, uint32_t>> items;
  for (size_t e = 0; e < split.episodes.size(); ++e) {
    for (size_t v = 0; v < split.episodes[e].variations.size(); ++v) {
      items.emplace_back(static_cast<uint32_t>(e), static_cast<uint32_t>(v));
    }
  }
  if (static_cast<size_t>(batch_size) > items.size()) {
    throw ValidationError("batch_size " + std::to_string(batch_size) + " exceeds split size " +
                          std::to_string(items.size()));
  }
  const auto order = rng.permutation(static_cast<int64_t>(items.size()));
  return gather(split, items, order, 0, static_cast<size_t>(batch_size));
}

std::map<int64_t, SplitName> group_holdout_split(const std::map<std::string, std::vector<int64_t>>& groups,
                                                 size_t held_out, uint64_t seed) {
  std::map<int64_t, SplitName> out;
  Rng rng(seed);
  for (const auto& [group, ids0] : groups) {
    auto ids = ids0;
    std::sort(ids.begin(), ids.end());
    const auto perm = rng.permutation(static_cast<int64_t>(ids.size()));
    for (size_t i = 0; i < ids.size(); ++i) {
      out[ids[static_cast<size_t>(perm[i])]] = i < held_out ? SplitName::Test : SplitName::Train;
    }
  }
  return out;
}

size_t import_omniglot(const std::vector<fs::path>& sources, const fs::path& out_root, int64_t image_size,
                       uint64_t seed, size_t held_out_per_alphabet) {
  struct Character {
    std::string alphabet;
    std::vector<fs::path> files;
  };
  std::vector<Character> chars;
  for (const auto& src : sources) {
    if (!fs::is_directory(src)) throw IoError("omniglot source " + src.string() + " is not a directory");
    std::vector<fs::path> alphabets;
    for (const auto& a : fs::directory_iterator(src)) {
      if (a.is_directory()) alphabets.push_back(a.path());
    }
    std::sort(alphabets.begin(), alphabets.end());
    for (const auto& a : alphabets) {
      std::vector<fs::path> characters;
      for (const auto& c : fs::directory_iterator(a)) {
        if (c.is_directory()) characters.push_back(c.path());
      }
      std::sort(characters.begin(), characters.end());
      for (const auto& c : characters) {
        Character ch{a.filename().string(), {}};
        for (const auto& f : fs::directory_iterator(c)) {
          if (f.path().extension() == ".png") ch.files.push_back(f.path());
        }
        std::sort(ch.files.begin(), ch.files.end());
        if (!ch.files.empty()) chars.push_back(std::move(ch));
      }
    }
  }
  std::map<std::string, std::vector<int64_t>> groups;
  for (size_t i = 0; i < chars.size(); ++i) groups[chars[i].alphabet].push_back(static_cast<int64_t>(i));
  const auto split = group_holdout_split(groups, held_out_per_alphabet, seed);

  std::vector<CategoryRecord> records;
  for (size_t i = 0; i < chars.size(); ++i) {
    CategoryRecord rec;
    rec.category_id = static_cast<int64_t>(i);
    rec.group = chars[i].alphabet;
    rec.split = split.at(rec.category_id);
    for (const auto& f : chars[i].files) {
      auto img = 1.0f - read_png_gray(f);
      img = torch::nn::functional::interpolate(
                img.unsqueeze(0),
                torch::nn::functional::InterpolateFuncOptions()
                    .size(std::vector<int64_t>{image_size, image_size})
                    .mode(torch::kArea))
                .squeeze(0)
                .clamp(0.0, 1.0);
      rec.samples.push_back(img);
    }
    rec.exemplar_index = select_exemplar(rec.samples).second;
    records.push_back(std::move(rec));
  }
  write_dataset(out_root, DatasetName::Omniglot, records, image_size);
  return records.size();
}

}  // namespace oneshot
