// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

// Scaled Omniglot directional check (criterion 8). Needs ONESHOT_OMNIGLOT_ROOT:
// either a dataset already in the on-disk layout (has manifest.json), or an
// Omniglot alphabet tree (or a parent of several, e.g. images_background and
// images_evaluation), which is imported first. Exits 77
// (skipped) when the variable is unset.
//
// Per seed: unregularized and prototype (beta 10) autoencoders at d=64, 30
// epochs, each with a 100-epoch latent diffusion model, on the first 20
// alphabets; recognizability on 10 held-out categories. Passes when the
// prototype model wins in at least 2 of 3 seeds.

#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>

#include "oneshot_ldm/oneshot_ldm.hpp"

namespace fs = std::filesystem;
using namespace oneshot;

namespace {

constexpr int kSkip = 77;

double run_model(const DatasetSplit& train, const DatasetSplit& test, const Critics& critics,
                 const std::vector<RegularizerSpec>& specs, uint64_t seed) {
  RAEConfig rc;
  rc.latent_dim = 64;
  rc.epochs = 30;
  TrainOptions ro;
  ro.on_epoch = [](const EpochStats& s) {
    std::fprintf(stderr, "  rae epoch %lld recon %.4f\n", static_cast<long long>(s.epoch), s.recon);
  };
  auto rae = train_rae(train, rc, specs, derive_seed(seed, 0.0, "rae"), ro).model;

  LDMConfig lc;
  lc.unet.latent_dim = rc.latent_dim;
  lc.epochs = 100;
  LDMTrainOptions lo;
  lo.on_epoch = [](int64_t epoch, double loss) {
    if (epoch % 10 == 0) std::fprintf(stderr, "  ldm epoch %lld loss %.4f\n", static_cast<long long>(epoch), loss);
  };
  auto ldm = train_ldm(encode_split(rae, train), lc, derive_seed(seed, 0.0, "ldm"), lo).model;

  torch::NoGradGuard guard;
  Rng rng(derive_seed(seed, 0.0, "sample"));
  const auto samples = sample_split(rae, ldm, lc, test, 20, rng);
  return recognizability(samples, exemplar_set(test), critics.classifier.embedder());
}

}  // namespace

int main() {
  torch::set_num_threads(1);
  const char* env = std::getenv("ONESHOT_OMNIGLOT_ROOT");
  if (!env || !*env) {
    std::printf("SKIP   8  scaled Omniglot check: set ONESHOT_OMNIGLOT_ROOT to run it\n");
    return kSkip;
  }
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fs::path root = env;
    if (!fs::exists(root / "manifest.json")) {
      const auto key = derive_seed(0, 0.0, fs::absolute(root).string());
      const auto imported = fs::temp_directory_path() / ("oneshot_omniglot_48_" + std::to_string(key % 1000000007));
      if (!fs::exists(imported / "manifest.json")) {
        // root/<alphabet>/<character>/*.png, or a parent of several such trees.
        bool is_tree = false;
        for (const auto& e : fs::recursive_directory_iterator(root)) {
          if (e.path().extension() == ".png") {
            const auto rel = fs::relative(e.path(), root);
            is_tree = std::distance(rel.begin(), rel.end()) == 3;
            break;
          }
        }
        std::vector<fs::path> sources;
        if (is_tree) {
          sources.push_back(root);
        } else {
          for (const auto& e : fs::directory_iterator(root)) {
            if (e.is_directory()) sources.push_back(e.path());
          }
          std::sort(sources.begin(), sources.end());
        }
        import_omniglot(sources, imported, 48, 0);
      }
      root = imported;
    }
    LoadOptions lo;
    lo.max_groups = 20;
    const auto train = load_dataset(root, DatasetName::Omniglot, SplitName::Train, lo);
    auto test = load_dataset(root, DatasetName::Omniglot, SplitName::Test, lo);
    if (test.episodes.size() < 10) throw ValidationError("fewer than 10 held-out categories");
    test.episodes.resize(10);

    std::fprintf(stderr, "critics on %zu categories\n", train.episodes.size());
    const auto critics = train_critics(train, CriticConfig{}, 0);

    RegularizerSpec proto;
    proto.kind = RegKind::Prototype;
    proto.beta = 10.0;
    int wins = 0;
    for (uint64_t seed : {1, 2, 3}) {
      std::fprintf(stderr, "seed %llu: unregularized\n", static_cast<unsigned long long>(seed));
      const double base = run_model(train, test, critics, {}, seed);
      std::fprintf(stderr, "seed %llu: prototype\n", static_cast<unsigned long long>(seed));
      const double pr = run_model(train, test, critics, {proto}, seed);
      wins += pr > base ? 1 : 0;
      std::printf("          seed %llu: recognizability prototype %.4f vs unregularized %.4f\n",
                  static_cast<unsigned long long>(seed), pr, base);
      std::fflush(stdout);
    }
    const double hours =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 3600.0;
    const bool ok = wins >= 2;
    std::printf("%s   8  scaled Omniglot check: prototype ahead in %d of 3 seeds, %.2f h\n", ok ? "PASS" : "FAIL", wins,
                hours);
    return ok ? 0 : 1;
  } catch (const std::exception& e) {
    std::printf("FAIL   8  scaled Omniglot check: %s\n", e.what());
    return 1;
  }
}
