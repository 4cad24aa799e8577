// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "oneshot_ldm/errors.hpp"
#include "oneshot_ldm/evaluation.hpp"
#include "support.hpp"

namespace oneshot {
namespace {

using testing::random_images;
using testing::synthetic_split;
using testing::TempDir;

Embedder linear_embedder(const torch::Tensor& w) {
  return [w](const torch::Tensor& x) { return torch::matmul(x.reshape({x.size(0), -1}).to(w.scalar_type()), w.t()); };
}

ExemplarSet random_exemplars(int64_t n, uint64_t seed) {
  const auto imgs = random_images(n, 48, seed);
  ExemplarSet ex;
  for (int64_t i = 0; i < n; ++i) ex[100 + i] = imgs[i];
  return ex;
}

std::vector<TaggedSamples> copies_of(const ExemplarSet& ex, int64_t per) {
  std::vector<TaggedSamples> out;
  for (const auto& [id, img] : ex) out.push_back({id, img.unsqueeze(0).expand({per, 1, 48, 48}).clone()});
  return out;
}

// ---- recognizability ----

TEST(Recognizability, ExemplarCopiesAreFullyRecognized) {
  const auto ex = random_exemplars(6, 1);
  EXPECT_EQ(recognizability(copies_of(ex, 3), ex, pixel_embedding), 1.0);
  Rng rng(2);
  EXPECT_EQ(recognizability(copies_of(ex, 3), ex, pixel_embedding, 3, &rng), 1.0);
}

TEST(Recognizability, RandomTagsAreAtChance) {
  const int64_t N = 5, per = 400;
  const auto ex = random_exemplars(N, 3);
  Rng rng(4);
  // Each sample is a noisy copy of a random exemplar but tagged with an independent random category.
  std::vector<TaggedSamples> samples;
  std::vector<int64_t> ids;
  for (const auto& [id, img] : ex) ids.push_back(id);
  for (int64_t i = 0; i < N * per; ++i) {
    const auto src = ids[static_cast<size_t>(rng.randint(0, N - 1))];
    const auto tag = ids[static_cast<size_t>(rng.randint(0, N - 1))];
    samples.push_back({tag, (ex.at(src) + 0.05 * rng.normal({1, 48, 48})).unsqueeze(0)});
  }
  const double n = static_cast<double>(samples.size());
  const double acc = recognizability(samples, ex, pixel_embedding);
  EXPECT_LT(std::abs(acc - 1.0 / N), 3 * std::sqrt((1.0 / N) * (1 - 1.0 / N) / n));
  const double acc2 = recognizability(samples, ex, pixel_embedding, 2, &rng);
  // Two-way episodes: a sample drawn from its tag always wins; otherwise it loses when the rival is its
  // source and wins half the time against an unrelated rival.
  const double p2 = 1.0 / N + (1 - 1.0 / N) * (1 - 1.0 / (N - 1)) * 0.5;
  EXPECT_LT(std::abs(acc2 - p2), 4 * std::sqrt(p2 * (1 - p2) / n));
}

TEST(Recognizability, PermutationInvariantAndErrors) {
  const auto ex = random_exemplars(4, 5);
  Rng rng(6);
  std::vector<TaggedSamples> samples;
  for (const auto& [id, img] : ex) samples.push_back({id, random_images(3, 48, 10 + static_cast<uint64_t>(id))});
  const double a = recognizability(samples, ex, pixel_embedding);
  auto shuffled = samples;
  std::reverse(shuffled.begin(), shuffled.end());
  for (auto& s : shuffled) s.images = s.images.flip(0);
  EXPECT_EQ(recognizability(shuffled, ex, pixel_embedding), a);
  EXPECT_THROW(recognizability({}, ex, pixel_embedding), ValidationError);
  EXPECT_THROW(recognizability({{999, random_images(1, 48, 1)}}, ex, pixel_embedding), ValidationError);
  EXPECT_THROW(recognizability(samples, ex, pixel_embedding, 2, nullptr), ValidationError);
}

TEST(OneShotAccuracy, SelfMatchAndChecks) {
  const auto x = random_images(5, 48, 7);
  EXPECT_EQ(one_shot_accuracy(pixel_embedding, x, torch::arange(5), x), 1.0);
  EXPECT_EQ(one_shot_accuracy(pixel_embedding, x, torch::tensor({1, 0, 2, 3, 4}), x), 0.6);
  EXPECT_THROW(one_shot_accuracy(pixel_embedding, x.narrow(0, 0, 0), torch::zeros({0}, torch::kInt64), x),
               ValidationError);
}

// ---- originality ----

TEST(Originality, ZeroForCopiesAndMatchesManualMean) {
  const auto ex = random_exemplars(3, 8);
  EXPECT_EQ(originality_raw(copies_of(ex, 2), ex, pixel_embedding), 0.0);
  std::vector<TaggedSamples> samples;
  double want = 0;
  int count = 0;
  for (const auto& [id, img] : ex) {
    const auto s = random_images(2, 48, 20 + static_cast<uint64_t>(id));
    samples.push_back({id, s});
    for (int k = 0; k < 2; ++k) {
      want += (s[k] - img).to(torch::kFloat64).pow(2).sum().sqrt().item<double>();
      ++count;
    }
  }
  EXPECT_NEAR(originality_raw(samples, ex, pixel_embedding), want / count, 1e-6 * want / count);
}

TEST(Originality, HomogeneousAndPoolsAsWeightedMean) {
  const auto ex = random_exemplars(3, 9);
  Rng rng(10);
  const auto w = rng.normal({6, 48 * 48}, torch::kFloat64);
  std::vector<TaggedSamples> a, b;
  for (const auto& [id, img] : ex) {
    a.push_back({id, random_images(2, 48, 30 + static_cast<uint64_t>(id))});
    b.push_back({id, random_images(5, 48, 40 + static_cast<uint64_t>(id))});
  }
  const double oa = originality_raw(a, ex, linear_embedder(w));
  EXPECT_NEAR(originality_raw(a, ex, linear_embedder(2 * w)), 2 * oa, 1e-9 * oa);
  const double ob = originality_raw(b, ex, linear_embedder(w));
  auto pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  EXPECT_NEAR(originality_raw(pooled, ex, linear_embedder(w)), (6 * oa + 15 * ob) / 21, 1e-9 * ob);
}

// ---- normalization and distance ----

std::vector<ModelPoint> points(std::initializer_list<double> raws) {
  std::vector<ModelPoint> p;
  for (double r : raws) {
    ModelPoint m;
    m.model_id = "m" + std::to_string(p.size());
    m.originality_raw = r;
    p.push_back(m);
  }
  return p;
}

TEST(NormalizeOriginality, MinMaxOverModelsAndHuman) {
  auto p = points({2, 4, 6});
  EXPECT_EQ(normalize_originality(p, 4), 0.5);
  EXPECT_EQ(p[0].originality, 0.0);
  EXPECT_EQ(p[1].originality, 0.5);
  EXPECT_EQ(p[2].originality, 1.0);
  // A human value outside the model range becomes an extreme.
  auto q = points({2, 4, 6});
  EXPECT_EQ(normalize_originality(q, 10), 1.0);
  EXPECT_EQ(q[2].originality, 0.5);
  auto same = points({3, 3});
  EXPECT_THROW(normalize_originality(same, 3), DegenerateError);
}

TEST(NormalizeOriginality, PreservesOrderAndMapsExtremes) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = points({});
    for (int i = 0; i < 8; ++i) {
      ModelPoint m;
      m.originality_raw = rng.uniform(0, 5);
      p.push_back(m);
    }
    const double h = normalize_originality(p, rng.uniform(0, 5));
    double lo = h, hi = h;
    for (size_t i = 0; i < p.size(); ++i) {
      lo = std::min(lo, p[i].originality);
      hi = std::max(hi, p[i].originality);
      for (size_t j = 0; j < p.size(); ++j) {
        if (p[i].originality_raw < p[j].originality_raw) ASSERT_LT(p[i].originality, p[j].originality);
      }
    }
    EXPECT_EQ(lo, 0.0);
    EXPECT_EQ(hi, 1.0);
  }
}

TEST(DistanceToHuman, Euclidean) {
  ModelPoint a;
  a.originality = 0;
  a.recognizability = 0;
  EXPECT_DOUBLE_EQ(distance_to_human(a, 0.3, 0.4), 0.5);
  EXPECT_EQ(distance_to_human(a, 0, 0), 0.0);
  ModelPoint b;
  b.originality = 0.3;
  b.recognizability = 0.4;
  EXPECT_DOUBLE_EQ(distance_to_human(b, 0, 0), distance_to_human(a, 0.3, 0.4));
}

// ---- sweep fit ----

TEST(FitSweep, RecoversQuadraticInLogBeta) {
  const std::vector<double> betas{1e-3, 1e-1, 1, 10, 100};
  std::vector<double> o, r;
  for (double b : betas) {
    const double x = std::log10(b);
    o.push_back(0.2 + 0.1 * x - 0.05 * x * x);
    r.push_back(0.9 - 0.02 * x + 0.01 * x * x);
  }
  const auto f = fit_sweep(betas, o, r);
  EXPECT_NEAR(f.originality[0], 0.2, 1e-8);
  EXPECT_NEAR(f.originality[1], 0.1, 1e-8);
  EXPECT_NEAR(f.originality[2], -0.05, 1e-8);
  EXPECT_NEAR(f.recognizability[2], 0.01, 1e-8);
  EXPECT_EQ(f.beta_order, betas);
  const auto [ob, rb] = f.at(10);
  EXPECT_NEAR(ob, o[3], 1e-8);
  EXPECT_NEAR(rb, r[3], 1e-8);
}

TEST(FitSweep, DuplicatesAreAveragedFirst) {
  const auto f = fit_sweep({10, 1, 100, 1, 0.1}, {0.5, 0.1, 0.2, 0.3, 0.9}, {1, 1, 1, 1, 1});
  const auto g = fit_sweep({0.1, 1, 10, 100}, {0.9, 0.2, 0.5, 0.2}, {1, 1, 1, 1});
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(f.originality[k], g.originality[k], 1e-12);
  EXPECT_EQ(f.beta_order, (std::vector<double>{0.1, 1, 10, 100}));
}

TEST(FitSweep, Errors) {
  EXPECT_THROW(fit_sweep({1, 1, 10}, {0, 0, 0}, {0, 0, 0}), ValidationError);
  EXPECT_THROW(fit_sweep({0, 1, 10}, {0, 0, 0}, {0, 0, 0}), ValidationError);
  EXPECT_THROW(fit_sweep({1, 10, 100}, {0, 0}, {0, 0, 0}), ValidationError);
}

// ---- critics ----

CriticConfig tiny_critics() {
  CriticConfig c;
  c.widths = {4, 4, 8, 8};
  c.embedding_dim = 8;
  c.projection_dim = 8;
  c.classifier_epochs = 3;
  c.embedder_epochs = 2;
  c.batch_size = 16;
  c.gate_accuracy = 0.0;
  return c;
}

double checksum(const Critic& c) {
  double s = 0;
  for (const auto& p : c.net->parameters()) s += p.to(torch::kFloat64).abs().sum().item<double>();
  for (const auto& b : c.net->buffers()) s += b.to(torch::kFloat64).abs().sum().item<double>();
  return s;
}

class TrainedCritics : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    split_ = new DatasetSplit(synthetic_split(8, 6, 12));
    critics_ = new Critics(train_critics(*split_, tiny_critics(), 13));
  }
  static void TearDownTestSuite() {
    delete critics_;
    delete split_;
  }
  static DatasetSplit* split_;
  static Critics* critics_;
};
DatasetSplit* TrainedCritics::split_ = nullptr;
Critics* TrainedCritics::critics_ = nullptr;

TEST_F(TrainedCritics, SelfQueriesAreRecognized) {
  const auto ex = split_->exemplar_batch();
  EXPECT_EQ(one_shot_accuracy(critics_->classifier.embedder(), ex, torch::arange(ex.size(0)), ex), 1.0);
  EXPECT_EQ(critics_->classifier.embed(ex).size(1), 8);
  EXPECT_EQ(critics_->embedder.embed(ex).size(1), 8);
  EXPECT_EQ(critics_->report.classifier_loss.size(), 3u);
  EXPECT_EQ(critics_->report.embedder_loss.size(), 2u);
}

TEST_F(TrainedCritics, EvaluationDoesNotTouchParameters) {
  const double c0 = checksum(critics_->classifier), e0 = checksum(critics_->embedder);
  const auto ex = exemplar_set(*split_);
  const auto samples = split_samples(*split_);
  recognizability(samples, ex, critics_->classifier.embedder());
  originality_raw(samples, ex, critics_->embedder.embedder());
  EXPECT_EQ(checksum(critics_->classifier), c0);
  EXPECT_EQ(checksum(critics_->embedder), e0);
}

TEST_F(TrainedCritics, SaveLoadRoundTrip) {
  TempDir dir;
  save_critics(*critics_, dir.path() / "critics.ckpt");
  const auto back = load_critics(dir.path() / "critics.ckpt");
  const auto ex = split_->exemplar_batch();
  EXPECT_TRUE(torch::equal(back.classifier.embed(ex), critics_->classifier.embed(ex)));
  EXPECT_TRUE(torch::equal(back.embedder.embed(ex), critics_->embedder.embed(ex)));
  EXPECT_EQ(back.report.classifier_loss, critics_->report.classifier_loss);
  EXPECT_EQ(back.report.gate_accuracy, critics_->report.gate_accuracy);
}

TEST_F(TrainedCritics, SeedsGiveDifferentParameters) {
  const auto other = train_critics(*split_, tiny_critics(), 14);
  EXPECT_NE(checksum(other.classifier), checksum(critics_->classifier));
}

TEST(CriticGate, UnlearnableSplitFailsTheGate) {
  // Variations are independent noise, unrelated to their exemplars.
  DatasetSplit split;
  for (int64_t c = 0; c < 10; ++c) {
    Episode ep;
    ep.category_id = c;
    ep.exemplar = random_images(1, 48, 50 + static_cast<uint64_t>(c))[0];
    const auto v = random_images(4, 48, 80 + static_cast<uint64_t>(c));
    for (int64_t k = 0; k < 4; ++k) ep.variations.push_back(v[k]);
    split.episodes.push_back(ep);
  }
  auto cfg = tiny_critics();
  cfg.classifier_epochs = 1;
  cfg.embedder_epochs = 0;
  cfg.gate_accuracy = 0.9;
  try {
    train_critics(split, cfg, 15);
    FAIL() << "gate passed on noise";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("loss"), std::string::npos) << e.what();
  }
  cfg.gate_accuracy = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(CriticConfig, JsonRoundTrip) {
  auto c = tiny_critics();
  c.gate_n_way = 5;
  EXPECT_EQ(to_json(critic_config_from_json(to_json(c))), to_json(c));
}

TEST(HumanReference, SplitSamplesCoverEveryCategory) {
  const auto split = synthetic_split(4, 5, 16);
  const auto samples = split_samples(split);
  const auto ex = exemplar_set(split);
  ASSERT_EQ(samples.size(), 4u);
  for (const auto& s : samples) {
    EXPECT_EQ(s.images.size(0), 4);
    EXPECT_TRUE(ex.count(s.category_id));
  }
}

}  // namespace
}  // namespace oneshot
