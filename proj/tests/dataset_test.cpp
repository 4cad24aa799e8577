// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <set>

#include "oneshot_ldm/dataset.hpp"
#include "oneshot_ldm/errors.hpp"
#include "oneshot_ldm/image_io.hpp"
#include "oneshot_ldm/synthetic.hpp"
#include "support.hpp"

namespace oneshot {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

std::vector<CategoryRecord> random_records(int64_t n_train, int64_t n_test, int64_t per_category, int64_t size,
                                           uint64_t seed) {
  Rng rng(seed);
  std::vector<CategoryRecord> out;
  for (int64_t c = 0; c < n_train + n_test; ++c) {
    CategoryRecord r;
    r.category_id = 100 + c;
    r.split = c < n_train ? SplitName::Train : SplitName::Test;
    for (int64_t k = 0; k < per_category; ++k) {
      r.samples.push_back(torch::floor(rng.uniform_tensor({1, size, size}) * 255) / 255);
    }
    r.exemplar_index = static_cast<size_t>(c % per_category);
    out.push_back(std::move(r));
  }
  return out;
}

TEST(LoadDataset, RoundTripAndSplitDisjointness) {
  TempDir dir;
  const auto records = random_records(6, 3, 4, 48, 1);
  write_dataset(dir.path(), DatasetName::Omniglot, records);
  const auto train = load_dataset(dir.path(), DatasetName::Omniglot, SplitName::Train);
  const auto test = load_dataset(dir.path(), DatasetName::Omniglot, SplitName::Test);
  ASSERT_EQ(train.episodes.size(), 6u);
  ASSERT_EQ(test.episodes.size(), 3u);
  std::set<int64_t> a, b;
  for (const auto& e : train.episodes) a.insert(e.category_id);
  for (const auto& e : test.episodes) b.insert(e.category_id);
  for (auto id : a) EXPECT_FALSE(b.count(id));
  for (const auto& e : train.episodes) {
    const auto& rec = records[static_cast<size_t>(e.category_id - 100)];
    EXPECT_TRUE(torch::allclose(e.exemplar, rec.samples[rec.exemplar_index], 0, 1e-6));
    EXPECT_EQ(e.variations.size(), 3u);  // exemplar excluded by default
    for (const auto& v : e.variations) {
      EXPECT_EQ(v.sizes(), (std::vector<int64_t>{1, 48, 48}));
      EXPECT_GE(v.min().item<float>(), 0.f);
      EXPECT_LE(v.max().item<float>(), 1.f);
    }
  }
  LoadOptions with;
  with.exemplar_in_variations = true;
  EXPECT_EQ(load_dataset(dir.path(), DatasetName::Omniglot, SplitName::Train, with).episodes[0].variations.size(), 4u);
}

TEST(LoadDataset, QuickDrawScaleSplitCounts) {
  TempDir dir;
  write_dataset(dir.path(), DatasetName::QuickDrawFS, random_records(550, 115, 2, 48, 2));
  EXPECT_EQ(load_dataset(dir.path(), DatasetName::QuickDrawFS, SplitName::Train).episodes.size(), 550u);
  EXPECT_EQ(load_dataset(dir.path(), DatasetName::QuickDrawFS, SplitName::Test).episodes.size(), 115u);
}

TEST(LoadDataset, Errors) {
  TempDir dir;
  EXPECT_THROW(load_dataset(dir / "missing", DatasetName::Omniglot, SplitName::Train), IoError);

  write_dataset(dir.path(), DatasetName::Omniglot, random_records(2, 1, 3, 48, 3));
  EXPECT_THROW(load_dataset(dir.path(), DatasetName::QuickDrawFS, SplitName::Train), ValidationError);

  const auto bad = dir / "101" / "sample_2.png";
  std::ofstream(bad, std::ios::trunc) << "garbage";
  try {
    load_dataset(dir.path(), DatasetName::Omniglot, SplitName::Train);
    FAIL() << "corrupt record accepted";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("101/sample_2.png"), std::string::npos) << e.what();
  }
}

TEST(LoadDataset, CategoryWithOnlyItsExemplarIsEmpty) {
  TempDir dir;
  write_dataset(dir.path(), DatasetName::Omniglot, random_records(2, 1, 1, 48, 4));
  EXPECT_THROW(load_dataset(dir.path(), DatasetName::Omniglot, SplitName::Train), ValidationError);
}

TEST(SelectExemplar, Singleton) {
  const auto img = torch::rand({1, 4, 4});
  const auto [chosen, idx] = select_exemplar({img});
  EXPECT_EQ(idx, 0u);
  EXPECT_TRUE(torch::equal(chosen, img));
  EXPECT_THROW(select_exemplar({}), ValidationError);
}

Embedder first_pixel() {
  return [](const torch::Tensor& x) { return x.flatten(1).narrow(1, 0, 1).to(torch::kFloat64); };
}

TEST(SelectExemplar, LineOracle) {
  std::vector<torch::Tensor> s;
  for (double v : {0.0, 1.0, 10.0}) s.push_back(torch::full({1, 2, 2}, v));
  EXPECT_EQ(select_exemplar(s, first_pixel()).second, 1u);
}

TEST(SelectExemplar, TieGoesToLowestIndex) {
  std::vector<torch::Tensor> s;
  for (double v : {0.0, 2.0}) s.push_back(torch::full({1, 2, 2}, v));
  EXPECT_EQ(select_exemplar(s, first_pixel()).second, 0u);
}

// Exhaustive O(n^2) mean-distance minimization.
size_t brute_force_exemplar(const torch::Tensor& e) {
  const auto n = e.size(0);
  size_t best = 0;
  double best_mean = 1e300;
  for (int64_t i = 0; i < n; ++i) {
    double sum = 0;
    for (int64_t j = 0; j < n; ++j) {
      if (i != j) sum += (e[i] - e[j]).pow(2).sum().sqrt().item<double>();
    }
    const double mean = n > 1 ? sum / static_cast<double>(n - 1) : 0.0;
    if (mean < best_mean) {
      best_mean = mean;
      best = static_cast<size_t>(i);
    }
  }
  return best;
}

TEST(SelectExemplar, MatchesBruteForceOnRandomSets) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = rng.randint(2, 50);
    std::vector<torch::Tensor> s;
    for (int64_t i = 0; i < n; ++i) s.push_back(rng.uniform_tensor({1, 6, 6}, torch::kFloat64));
    EXPECT_EQ(select_exemplar(s).second, brute_force_exemplar(pixel_embedding(torch::stack(s))));
  }
}

class BatchingTest : public ::testing::Test {
 protected:
  void SetUp() override {
    write_dataset(dir_.path(), DatasetName::Omniglot, random_records(5, 1, 4, 48, 6));
    split_ = load_dataset(dir_.path(), DatasetName::Omniglot, SplitName::Train);
  }
  TempDir dir_;
  DatasetSplit split_;
};

TEST_F(BatchingTest, ExemplarsAlignWithLabels) {
  Rng rng(1);
  for (int64_t bs : {1, 4, 15}) {
    const auto b = make_batch(split_, bs, rng);
    ASSERT_EQ(b.images.size(0), bs);
    for (int64_t i = 0; i < bs; ++i) {
      const auto& ep = split_.episodes[static_cast<size_t>(b.labels[i].item<int64_t>())];
      EXPECT_TRUE(torch::equal(b.exemplars[i], ep.exemplar));
    }
  }
  EXPECT_THROW(make_batch(split_, 16, rng), ValidationError);
  EXPECT_THROW(make_batch(split_, 0, rng), ValidationError);
}

TEST_F(BatchingTest, EpochVisitsEveryVariationOnce) {
  BatchSampler sampler(split_, 4, Rng(2));
  std::vector<torch::Tensor> seen;
  while (auto b = sampler.next()) {
    for (int64_t i = 0; i < b->images.size(0); ++i) seen.push_back(b->images[i]);
  }
  ASSERT_EQ(seen.size(), split_.num_variations());
  std::vector<int> hits(seen.size(), 0);
  for (const auto& ep : split_.episodes) {
    for (const auto& v : ep.variations) {
      int matches = 0;
      for (const auto& s : seen) matches += torch::equal(s, v);
      EXPECT_EQ(matches, 1);
    }
  }
}

TEST_F(BatchingTest, SameSeedSameOrder) {
  BatchSampler a(split_, 3, Rng(9)), b(split_, 3, Rng(9));
  for (int epoch = 0; epoch < 2; ++epoch) {
    for (;;) {
      auto x = a.next();
      auto y = b.next();
      ASSERT_EQ(x.has_value(), y.has_value());
      if (!x) break;
      EXPECT_TRUE(torch::equal(x->labels, y->labels));
      EXPECT_TRUE(torch::equal(x->images, y->images));
    }
  }
}

TEST(GroupHoldout, SeededThreePerGroup) {
  std::map<std::string, std::vector<int64_t>> groups{{"a", {1, 2, 3, 4, 5}}, {"b", {6, 7, 8, 9}}};
  const auto s1 = group_holdout_split(groups, 3, 11);
  EXPECT_EQ(s1, group_holdout_split(groups, 3, 11));
  int test_a = 0, test_b = 0;
  for (auto id : groups["a"]) test_a += s1.at(id) == SplitName::Test;
  for (auto id : groups["b"]) test_b += s1.at(id) == SplitName::Test;
  EXPECT_EQ(test_a, 3);
  EXPECT_EQ(test_b, 3);
}

TEST(ImportOmniglot, InvertsInkAndHoldsOutPerAlphabet) {
  TempDir dir;
  const auto src = dir / "images_background";
  for (int a = 0; a < 2; ++a) {
    for (int c = 0; c < 4; ++c) {
      const auto cdir = src / ("Alphabet_" + std::to_string(a)) / ("character" + std::to_string(c));
      fs::create_directories(cdir);
      for (int k = 0; k < 3; ++k) {
        auto img = torch::ones({1, 105, 105});
        img.index_put_({0, torch::indexing::Slice(20 + 10 * c, 40 + 10 * c), torch::indexing::Slice(30, 60 + k)}, 0.0);
        write_png_gray(cdir / ("d" + std::to_string(k) + ".png"), img);
      }
    }
  }
  const auto out = dir / "omni";
  EXPECT_EQ(import_omniglot({src}, out, 48, 1), 8u);
  const auto train = load_dataset(out, DatasetName::Omniglot, SplitName::Train);
  const auto test = load_dataset(out, DatasetName::Omniglot, SplitName::Test);
  EXPECT_EQ(train.episodes.size(), 2u);
  EXPECT_EQ(test.episodes.size(), 6u);
  // Background maps to 0, strokes to ink near 1.
  const auto& ex = train.episodes[0].exemplar;
  EXPECT_EQ(ex.sizes(), (std::vector<int64_t>{1, 48, 48}));
  EXPECT_LT(ex[0][0][0].item<float>(), 1e-6);
  EXPECT_GT(ex.max().item<float>(), 0.9f);
}

TEST(Synthetic, DeterministicAndLoadable) {
  TempDir dir;
  SyntheticOptions o;
  o.train_categories = 4;
  o.test_categories = 2;
  o.samples_per_category = 3;
  o.seed = 3;
  const auto a = make_synthetic_categories(o);
  const auto b = make_synthetic_categories(o);
  ASSERT_EQ(a.size(), 6u);
  for (size_t i = 0; i < a.size(); ++i) {
    for (size_t k = 0; k < a[i].samples.size(); ++k) EXPECT_TRUE(torch::equal(a[i].samples[k], b[i].samples[k]));
  }
  write_synthetic_dataset(dir.path(), DatasetName::Omniglot, o);
  EXPECT_EQ(load_dataset(dir.path(), DatasetName::Omniglot, SplitName::Test).episodes.size(), 2u);
}

}  // namespace
}  // namespace oneshot
