// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "support.hpp"

#include <atomic>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "oneshot_ldm/synthetic.hpp"

namespace oneshot::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("oneshot-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

torch::Tensor numeric_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x,
                               double h) {
  torch::NoGradGuard guard;
  auto base = x.detach().to(torch::kFloat64).clone();
  auto grad = torch::zeros_like(base);
  auto flat = base.view(-1);
  auto g = grad.view(-1);
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double v = flat[i].item<double>();
    flat[i] = v + h;
    const double fp = f(base).item<double>();
    flat[i] = v - h;
    const double fm = f(base).item<double>();
    flat[i] = v;
    g[i] = (fp - fm) / (2 * h);
  }
  return grad;
}

torch::Tensor autograd_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x) {
  auto v = x.detach().to(torch::kFloat64).clone().requires_grad_(true);
  f(v).backward();
  return v.grad().detach();
}

double relative_error(const torch::Tensor& a, const torch::Tensor& b, double floor) {
  const double diff = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
  const double scale = std::max(b.to(torch::kFloat64).abs().max().item<double>(), floor);
  return diff / scale;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

torch::Tensor random_images(int64_t n, int64_t size, uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return torch::rand({n, 1, size, size}, gen);
}

DatasetSplit synthetic_split(int64_t categories, int64_t samples, uint64_t seed) {
  SyntheticOptions opt;
  opt.train_categories = categories;
  opt.test_categories = 0;
  opt.samples_per_category = samples;
  opt.seed = seed;
  DatasetSplit split;
  for (auto& rec : make_synthetic_categories(opt)) {
    Episode ep;
    ep.category_id = rec.category_id;
    ep.exemplar = rec.samples[rec.exemplar_index];
    for (size_t k = 0; k < rec.samples.size(); ++k) {
      if (k != rec.exemplar_index) ep.variations.push_back(rec.samples[k]);
    }
    split.episodes.push_back(std::move(ep));
  }
  return split;
}

}  // namespace oneshot::testing

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
