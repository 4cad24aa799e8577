// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Criterion 8 (scaled Omniglot) lives in acceptance_omniglot.

#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "oneshot_ldm/oneshot_ldm.hpp"

namespace fs = std::filesystem;
using namespace oneshot;

namespace {

constexpr auto kF64 = torch::kFloat64;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

__attribute__((format(printf, 1, 2))) std::string fmt(const char* f, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

// Collects named checks for one criterion; the criterion passes when all do.
class Criterion {
 public:
  Criterion(int id, std::string title) : id_(id), title_(std::move(title)), t0_(Clock::now()) {}

  void check(const std::string& what, bool ok, const std::string& detail = {}) {
    if (!ok) {
      ok_ = false;
      failures_.push_back(what + (detail.empty() ? "" : " (" + detail + ")"));
    }
    ++n_;
  }

  // |got - want| / |want|, or the absolute error when the oracle is zero.
  void close(const std::string& what, double got, double want, double tol) {
    const double err = want == 0.0 ? std::abs(got) : std::abs(got - want) / std::abs(want);
    worst_ = std::max(worst_, err);
    check(what, std::isfinite(got) && err <= tol, fmt("got %.10g want %.10g", got, want));
  }

  void note(const std::string& s) { notes_.push_back(s); }
  double worst() const { return worst_; }

  bool finish(double budget_seconds = 0.0) {
    const double dt = seconds_since(t0_);
    if (budget_seconds > 0.0 && dt > budget_seconds) {
      check("runtime", false, fmt("%.1f s over the %.0f s budget", dt, budget_seconds));
    }
    std::printf("%s  %2d  %-34s %3d checks, worst rel %.2e, %.1f s\n", ok_ ? "PASS" : "FAIL", id_, title_.c_str(), n_,
                worst_, dt);
    for (const auto& n : notes_) std::printf("          %s\n", n.c_str());
    for (const auto& f : failures_) std::printf("          failed: %s\n", f.c_str());
    std::fflush(stdout);
    return ok_;
  }

 private:
  int id_;
  std::string title_;
  Clock::time_point t0_;
  bool ok_ = true;
  int n_ = 0;
  double worst_ = 0.0;
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
};

double scalar(const torch::Tensor& t) { return t.item<double>(); }

torch::Tensor t2(std::vector<std::vector<double>> rows) {
  const auto r = static_cast<int64_t>(rows.size()), c = static_cast<int64_t>(rows[0].size());
  auto out = torch::empty({r, c}, kF64);
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) out[i][j] = rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
  }
  return out;
}

double max_rel(const torch::Tensor& got, const torch::Tensor& want) {
  const double den = std::max(want.abs().max().item<double>(), 1e-300);
  return (got - want).abs().max().item<double>() / den;
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

UNet tiny_unet(int64_t d, std::vector<int64_t> widths = {8, 4}) {
  UNetConfig c;
  c.latent_dim = d;
  c.widths = std::move(widths);
  c.time_dim = 8;
  c.attn_dim = 4;
  UNet net(c);
  Rng rng(17);
  seeded_init(*net, rng);
  net->to(kF64);
  return net;
}

// Max over `wrt` of max|analytic - fd| / max|fd|, probing at most `max_coords`
// evenly spaced coordinates of each tensor with central differences.
double gradient_error(const std::function<torch::Tensor()>& loss, const std::vector<torch::Tensor>& wrt, double h,
                      int64_t max_coords = 64) {
  const auto grads = torch::autograd::grad({loss()}, wrt, {}, false, false, true);
  double worst = 0.0;
  for (size_t k = 0; k < wrt.size(); ++k) {
    auto x = wrt[k];
    const auto g = grads[k].defined() ? grads[k].contiguous().view(-1) : torch::zeros({x.numel()}, kF64);
    const int64_t n = x.numel();
    const int64_t stride = std::max<int64_t>(1, n / max_coords);
    std::vector<double> an, fd;
    for (int64_t i = 0; i < n; i += stride) {
      double* p;
      {
        torch::NoGradGuard guard;
        p = x.data_ptr<double>() + i;
      }
      const double x0 = *p;
      double up, down;
      {
        torch::NoGradGuard guard;
        *p = x0 + h;
        up = scalar(loss());
        *p = x0 - h;
        down = scalar(loss());
        *p = x0;
      }
      fd.push_back((up - down) / (2 * h));
      an.push_back(g[i].item<double>());
    }
    double num = 0.0, den = 1e-300;
    for (size_t i = 0; i < fd.size(); ++i) {
      num = std::max(num, std::abs(an[i] - fd[i]));
      den = std::max(den, std::abs(fd[i]));
    }
    worst = std::max(worst, num / den);
  }
  return worst;
}

// ------------------------------------------------------------------ 1

bool loss_oracles() {
  Criterion c(1, "loss-oracle suite");
  const double tol = 1e-6;

  {  // Medoid exemplar: brute-force mean distance over all candidates.
    std::vector<torch::Tensor> s;
    const std::vector<double> pos{0.0, 1.0, 10.0};
    for (double v : pos) s.push_back(torch::full({1, 1, 1}, v, kF64));
    const auto [ex, idx] = select_exemplar(s, [](const torch::Tensor& x) { return x.flatten(1); });
    size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < pos.size(); ++i) {
      double d = 0;
      for (double q : pos) d += std::abs(pos[i] - q);
      if (d < best_d) best_d = d, best = i;
    }
    c.check("medoid exemplar", idx == best && best == 1, fmt("index %zu", idx));
  }
  {  // Gaussian KL closed form.
    auto kl = [](double mu, double var, int d) { return 0.5 * d * (mu * mu + var - 1.0 - std::log(var)); };
    c.close("kl d=1", scalar(kl_loss({t2({{1.0}}), t2({{0.0}})})), kl(1.0, 1.0, 1), tol);
    c.close("kl d=2 var=e", scalar(kl_loss({torch::zeros({1, 2}, kF64), torch::ones({1, 2}, kF64)})),
            kl(0.0, std::exp(1.0), 2), tol);
    c.close("kl value", kl(0.0, std::exp(1.0), 2), std::exp(1.0) - 2.0, tol);
  }
  {  // Quantization against brute-force nearest codeword.
    Rng rng(1);
    const auto book = rng.normal({16, 2}, kF64);
    const auto z = rng.normal({32, 8}, kF64);
    const auto q = quantize(z, book);
    bool ok = true;
    for (int64_t b = 0; b < 32; ++b) {
      for (int64_t k = 0; k < 4; ++k) {
        const auto piece = z[b].slice(0, 2 * k, 2 * k + 2);
        int64_t arg = 0;
        double best = std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < 16; ++j) {
          const double d = (piece - book[j]).pow(2).sum().item<double>();
          if (d < best) best = d, arg = j;
        }
        ok = ok && q.indices[b][k].item<int64_t>() == arg &&
             torch::equal(q.z_q[b].slice(0, 2 * k, 2 * k + 2), book[arg]);
      }
    }
    c.check("quantize nearest neighbour", ok);
    c.close("vq loss", scalar(vq_loss(t2({{1.0, 0.0}}), t2({{0.0, 0.0}}))), 1.0 + 1.0, tol);
  }
  {  // Softmax-based losses, hand-evaluated.
    c.close("label cross-entropy", scalar(label_cross_entropy(t2({{1.0, 0.0}}), torch::tensor({0}))),
            -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), tol);
    const auto ex = t2({{0.0, 0.0}, {10.0, 0.0}});
    c.close("prototype nll", scalar(prototype_nll(ex, ex, torch::tensor({0, 1}))),
            -std::log(1.0 / (1.0 + std::exp(-10.0))), tol);
    auto cos = [](const torch::Tensor& x, const torch::Tensor& y) {
      return (x * y).sum().item<double>() / (x.norm().item<double>() * y.norm().item<double>());
    };
    auto written = [&](const torch::Tensor& a, const torch::Tensor& b) {
      double sum = 0;
      for (int64_t i = 0; i < a.size(0); ++i) {
        double neg = 0;
        for (int64_t j = 0; j < a.size(0); ++j) {
          if (j != i) neg += std::exp(cos(a[i], b[j]));
        }
        sum += -cos(a[i], b[i]) + std::log(neg);
      }
      return sum / static_cast<double>(a.size(0));
    };
    const auto e = torch::eye(4, kF64);
    c.close("infonce orthogonal", scalar(info_nce(e.narrow(0, 0, 2), e.narrow(0, 2, 2))),
            written(e.narrow(0, 0, 2), e.narrow(0, 2, 2)), tol);
    const auto a = t2({{1.0, 0.0}, {0.0, 1.0}});
    c.close("infonce aligned", scalar(info_nce(a, a)), written(a, a), tol);
    c.close("infonce aligned value", written(a, a), -1.0, tol);
    const double lambda = 5e-3;
    const double bar = std::pow(1 - 1.0, 2) + std::pow(1 - 0.5, 2) + lambda * 2 * 0.2 * 0.2;
    c.close("barlow", scalar(barlow_from_correlation(t2({{1.0, 0.2}, {0.2, 0.5}}), lambda)), bar, tol);
    c.close("barlow value", bar, 0.2504, tol);
  }
  {  // Reparametrization inversion and the zero-predictor loss.
    const auto sched = build_schedule();
    Rng rng(2);
    const auto z0 = rng.normal({8, 6}, kF64), eps = rng.normal({8, 6}, kF64);
    double worst = 0;
    for (int64_t t : {1, 10, 250, 999, 1000}) {
      const auto zt = noise_latents(z0, torch::full({8}, t, torch::kInt64), eps, sched);
      worst = std::max(worst, max_rel(predict_z0(zt, eps, t, sched), z0));
    }
    c.close("z0 inversion", worst, 0.0, 1e-5);

    const int64_t B = 20000, d = 8;
    const Predictor zero = [](const torch::Tensor& z, const torch::Tensor&, const torch::Tensor&) {
      return torch::zeros_like(z);
    };
    const double loss = scalar(ddpm_loss(zero, torch::zeros({B, d}, kF64), torch::zeros({B, d}, kF64), sched, {}, rng));
    const double se = std::sqrt(2.0 * d / static_cast<double>(B));
    c.check("zero predictor chi-square mean", std::abs(loss - d) < 3 * se,
            fmt("%.4f vs %lld, 3 SE = %.4f", loss, static_cast<long long>(d), 3 * se));
  }
  {  // Chance-level recognizability with random tags.
    const int64_t N = 5, per = 400;
    Rng rng(3);
    ExemplarSet ex;
    for (int64_t i = 0; i < N; ++i) ex[100 + i] = rng.uniform_tensor({1, 48, 48}, torch::kFloat32);
    std::vector<TaggedSamples> samples;
    for (int64_t i = 0; i < N * per; ++i) {
      const auto src = 100 + rng.randint(0, N - 1), tag = 100 + rng.randint(0, N - 1);
      samples.push_back({tag, (ex.at(src) + 0.05 * rng.normal({1, 48, 48})).unsqueeze(0)});
    }
    const double acc = recognizability(samples, ex, pixel_embedding);
    const double p = 1.0 / N, se = std::sqrt(p * (1 - p) / static_cast<double>(N * per));
    c.check("random tags at chance", std::abs(acc - p) < 3 * se, fmt("%.4f vs %.4f", acc, p));
  }
  {  // Least squares on an exact quadratic.
    std::vector<double> x, y;
    for (int i = 0; i < 9; ++i) {
      x.push_back(-2.0 + 0.5 * i);
      y.push_back(0.7 - 1.3 * x.back() + 2.1 * x.back() * x.back());
    }
    const auto q = fit_quadratic(x, y);
    c.close("quadratic a", q[0], 0.7, 1e-8);
    c.close("quadratic b", q[1], -1.3, 1e-8);
    c.close("quadratic c", q[2], 2.1, 1e-8);
  }
  {  // Spearman by the rank-difference formula; exact Wilcoxon by enumeration.
    const std::vector<double> a{1, 2, 3, 4}, b{1, 3, 2, 4};
    double d2 = 0;
    for (size_t i = 0; i < 4; ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);  // already ranks
    c.close("spearman", spearman_rank(a, b), 1.0 - 6.0 * d2 / (4.0 * 15.0), tol);

    Rng rng(4);
    std::vector<double> u, v;
    for (int i = 0; i < 12; ++i) {
      u.push_back(rng.normal({1}, kF64).item<double>() + 0.3);
      v.push_back(rng.normal({1}, kF64).item<double>());
    }
    const auto w = wilcoxon_signed_rank(u, v, Alternative::Greater);
    std::vector<double> r;
    {
      std::vector<double> absd;
      for (size_t i = 0; i < u.size(); ++i) absd.push_back(std::abs(u[i] - v[i]));
      r = average_ranks(absd);
    }
    int64_t at_least = 0;
    for (uint32_t mask = 0; mask < (1u << 12); ++mask) {
      double s = 0;
      for (int i = 0; i < 12; ++i) {
        if (mask & (1u << i)) s += r[static_cast<size_t>(i)];
      }
      if (s >= w.statistic - 1e-9) ++at_least;
    }
    c.close("wilcoxon exact", w.p_value, static_cast<double>(at_least) / 4096.0, tol);
  }
  {  // One RAE epoch lowers reconstruction.
    RAEConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    const auto log = train_rae(synthetic_split(10, 6, 5), cfg, {}, 6).log;
    c.check("rae epoch lowers reconstruction", log.size() == 1 && log[0].last_recon < log[0].first_recon,
            fmt("%.4f -> %.4f", log.at(0).first_recon, log.at(0).last_recon));
  }
  return c.finish(120.0);
}

// ------------------------------------------------------------------ 2

bool gradients() {
  Criterion c(2, "gradient suite");
  const double h = 1e-6, tol = 1e-4;
  Rng rng(10);
  const int64_t B = 6, d = 8;
  auto leaf = [&](std::initializer_list<int64_t> shape) { return rng.normal(shape, kF64).requires_grad_(true); };
  auto head = [](RegKind k, int64_t in, int64_t out) {
    ProjectionHead hd(k, in, out);
    hd->to(kF64);
    return hd;
  };
  {
    auto mu = leaf({B, d}), lv = leaf({B, d});
    c.close("kl", gradient_error([&] { return kl_loss({mu, lv}); }, {mu, lv}, h), 0.0, tol);
  }
  {
    // Stop-gradients make each input see one squared-distance term.
    auto z = leaf({B, d}), zq = leaf({B, d});
    const auto g = torch::autograd::grad({vq_loss(z, zq)}, {z, zq});
    auto z2 = z.detach().clone().requires_grad_(true), zq2 = zq.detach().clone().requires_grad_(true);
    const double ez = gradient_error([&] { return (z2 - zq.detach()).pow(2).sum() / B; }, {z2}, h);
    const double eq = gradient_error([&] { return (z.detach() - zq2).pow(2).sum() / B; }, {zq2}, h);
    const auto want_z = 2 * (z - zq).detach() / B;
    c.close("vq terms", std::max(ez, eq), 0.0, tol);
    c.close("vq wrt z", max_rel(g[0], want_z), 0.0, tol);
    c.close("vq wrt codeword", max_rel(g[1], -want_z), 0.0, tol);
    // Through the straight-through estimator, z_q - z held constant.
    const auto book = rng.normal({16, 2}, kF64);
    const auto w = rng.normal({B, d}, kF64);
    auto zs = leaf({B, d});
    const auto offset = (quantize(zs.detach(), book).z_q - zs.detach());
    c.close("straight-through fd",
            gradient_error([&] { return (straight_through(zs, zs.detach() + offset) * w).pow(2).sum(); }, {zs}, h),
            0.0, 1e-5);
  }
  {
    auto hd = head(RegKind::Classification, d, 5);
    auto z = leaf({B, d});
    const auto labels = torch::tensor({0, 1, 2, 3, 4, 0});
    c.close("classification",
            gradient_error([&] { return classification_loss(z, labels, hd); }, {z, hd->linear->weight}, h), 0.0, tol);
  }
  {
    auto hd = head(RegKind::Prototype, d, d);
    auto z = leaf({B, d}), zy = leaf({B, d});
    const auto labels = torch::tensor({0, 1, 2, 0, 1, 2});
    // Exemplar embeddings are shared within a class.
    auto exemplar = [&] { return zy.index_select(0, torch::tensor({0, 1, 2})).index_select(0, labels); };
    c.close("prototype", gradient_error([&] { return prototype_loss(z, exemplar(), labels, hd); }, {z, zy}, h), 0.0,
            tol);
  }
  {
    auto hd = head(RegKind::SimCLR, d, 8);
    auto a = leaf({B, d}), b = leaf({B, d});
    c.close("simclr", gradient_error([&] { return simclr_loss(a, b, hd, 0.5); }, {a, b, hd->linear->weight}, h), 0.0,
            tol);
  }
  {
    auto hd = head(RegKind::Barlow, d, 8);
    auto a = leaf({B, d}), b = leaf({B, d});
    c.close("barlow", gradient_error([&] { return barlow_loss(a, b, hd); }, {a, b, hd->linear->weight}, h), 0.0, tol);
  }
  {  // Full autoencoder objective in float64.
    RAEConfig cfg;
    cfg.latent_dim = 4;
    cfg.widths = {4, 4, 8, 8};
    const auto split = synthetic_split(3, 4, 11);
    Rng init(12);
    RegularizerSpec kl, proto;
    kl.kind = RegKind::KL;
    kl.beta = 0.1;
    proto.kind = RegKind::Prototype;
    proto.beta = 1.0;
    auto rae = make_rae(cfg, {kl, proto}, 3, init);
    rae->to(kF64);
    rae->train();
    auto batch = make_batch(split, 6, init);
    batch.images = batch.images.to(kF64);
    batch.exemplars = batch.exemplars.to(kF64);
    const Rng replay(13);
    auto loss = [&] {
      Rng r = replay;
      return std::get<0>(rae_loss(rae, batch, r));
    };
    std::vector<torch::Tensor> params;
    for (const auto& p : rae->named_parameters()) {
      if (p.key() == "encoder.fc.weight" || p.key() == "encoder.conv.0.weight" || p.key() == "dec_out.weight" ||
          p.key() == "dec_up0.weight") {
        params.push_back(p.value());
      }
    }
    c.check("rae parameters found", params.size() == 4);
    c.close("rae loss", gradient_error(loss, params, h, 24), 0.0, tol);
  }
  {  // Denoising objective with a tiny predictor.
    auto net = tiny_unet(4);
    const auto sched = build_schedule(50);
    const auto z0 = rng.normal({8, 4}, kF64), zy = rng.normal({8, 4}, kF64);
    const Rng replay(14);
    const auto pred = as_predictor(net);
    auto loss = [&] {
      Rng r = replay;
      return ddpm_loss(pred, z0, zy, sched, {}, r);
    };
    std::vector<torch::Tensor> params;
    for (const auto& p : net->named_parameters()) {
      if (p.key() == "init.weight" || p.key() == "down0.rb1.block1.proj.weight" ||
          p.key() == "mid_attn.attn.to_qkv.weight" || p.key() == "final_proj.bias") {
        params.push_back(p.value());
      }
    }
    c.check("ddpm parameters found", params.size() == 4);
    c.close("ddpm loss", gradient_error(loss, params, h, 24), 0.0, 1e-3);
  }
  return c.finish(300.0);
}

// ------------------------------------------------------------------ 3

bool straight_through_contract() {
  Criterion c(3, "straight-through contract");
  Rng rng(20);
  const auto book = rng.normal({32, 4}, torch::kFloat32);
  const auto w = rng.normal({16, 8}, torch::kFloat32);
  const auto W = rng.normal({8, 5}, torch::kFloat32);
  // Linear downstream stub: its gradient does not depend on the forward value.
  auto stub = [&](const torch::Tensor& x) { return torch::matmul(x * w, W).sum(); };
  auto z = rng.normal({16, 8}, torch::kFloat32).requires_grad_(true);
  const auto zq = quantize(z.detach(), book).z_q;
  const auto g_st = torch::autograd::grad({stub(straight_through(z, zq))}, {z})[0];
  auto ident = z.detach().clone().requires_grad_(true);
  const auto g_id = torch::autograd::grad({stub(ident)}, {ident})[0];
  c.check("bitwise equal to identity pass-through", torch::equal(g_st, g_id));
  c.check("forward value is the codeword", torch::allclose(straight_through(z, zq), zq, 0, 1e-6));
  return c.finish();
}

// ------------------------------------------------------------------ 4

bool schedule_statistics() {
  Criterion c(4, "schedule and noising statistics");
  const auto s = build_schedule(1000, 1.5e-3, 1.95e-2);
  bool dec = true;
  for (size_t i = 1; i < s.alpha_bar.size(); ++i) dec = dec && s.alpha_bar[i] < s.alpha_bar[i - 1];
  c.check("alpha_bar strictly decreasing", dec);
  c.check("alpha_bar_T < 1e-4", s.alpha_bar_at(1000) < 1e-4, fmt("%.3g", s.alpha_bar_at(1000)));
  c.close("beta_1", s.beta_at(1), 1.5e-3, 1e-12);
  c.close("beta_T", s.beta_at(1000), 1.95e-2, 1e-12);

  Rng rng(30);
  const int64_t n = 10000;
  const auto z0 = torch::tensor({1.5, -0.7, 0.2, 3.0}, kF64);
  const auto z0s = z0.unsqueeze(0).expand({n, 4});
  for (int64_t t : {10, 100, 500}) {
    const auto eps = rng.normal({n, 4}, kF64);
    const auto zt = noise_latents(z0s, torch::full({n}, t, torch::kInt64), eps, s);
    const double ab = s.alpha_bar_at(t), var = 1.0 - ab;
    const auto mean = zt.mean(0), v = zt.var(0);
    const double se_mean = std::sqrt(var / static_cast<double>(n));
    const double se_var = var * std::sqrt(2.0 / static_cast<double>(n - 1));
    const auto dm = ((mean - std::sqrt(ab) * z0).abs() / se_mean).max().item<double>();
    const auto dv = ((v - var).abs() / se_var).max().item<double>();
    c.check(fmt("mean at t=%lld", static_cast<long long>(t)), dm < 3.0, fmt("%.2f SE", dm));
    c.check(fmt("variance at t=%lld", static_cast<long long>(t)), dv < 3.0, fmt("%.2f SE", dv));
    c.note(fmt("t=%-3lld mean within %.2f SE, variance within %.2f SE", static_cast<long long>(t), dm, dv));
  }
  return c.finish(60.0);
}

// ------------------------------------------------------------------ 5

struct ToyResult {
  double dist_pos, dist_neg, frac_pos, frac_neg, train_s, sample_s;
};

ToyResult toy_run(uint64_t seed, int64_t epochs) {
  Rng rng(seed);
  const int64_t n = 20000;
  const double spread = 0.5;
  auto side = (rng.uniform_tensor({n, 1}, kF64) < 0.5).to(kF64) * 2 - 1;
  LatentDataset data;
  data.z0 = (side * 2.0 + spread * rng.normal({n, 2}, kF64)).to(torch::kFloat32);
  data.z_y = torch::zeros({n, 2});

  LDMConfig cfg;
  cfg.unet.latent_dim = 2;
  cfg.unet.widths = {64, 32};
  cfg.unet.time_dim = 32;
  cfg.unet.attn_dim = 16;
  cfg.epochs = epochs;
  cfg.batch_size = 256;
  cfg.learning_rate = 2e-3;
  cfg.weight_decay = 0.0;
  cfg.lr_step = {0, 1.0};
  auto t0 = Clock::now();
  auto net = train_ldm(data, cfg, seed + 1).model;
  ToyResult r{};
  r.train_s = seconds_since(t0);

  t0 = Clock::now();
  net->eval();
  torch::NoGradGuard guard;
  const int64_t m = 2000;
  const auto z = sample_latents(as_predictor(net), torch::zeros({1, 2}), cfg.schedule(), 0.0, m, rng).to(kF64);
  r.sample_s = seconds_since(t0);
  const auto pos = (z.sum(1) > 0);
  const auto zp = z.index({pos}), zn = z.index({pos.logical_not()});
  r.frac_pos = static_cast<double>(zp.size(0)) / m;
  r.frac_neg = static_cast<double>(zn.size(0)) / m;
  auto dist = [](const torch::Tensor& pts, double c) {
    if (pts.size(0) == 0) return std::numeric_limits<double>::infinity();
    return (pts.mean(0) - c).norm().item<double>();
  };
  r.dist_pos = dist(zp, 2.0);
  r.dist_neg = dist(zn, -2.0);
  return r;
}

bool toy_recovery() {
  Criterion c(5, "toy two-mode recovery");
  const char* env = std::getenv("ONESHOT_TOY_EPOCHS");
  const int64_t epochs = env ? std::atoll(env) : 40;
  for (uint64_t seed : {1, 2, 3}) {
    const auto r = toy_run(seed, epochs);
    const bool ok = r.dist_pos <= 0.3 && r.dist_neg <= 0.3 && r.frac_pos >= 0.3 && r.frac_neg >= 0.3 &&
                    r.train_s <= 300.0;
    c.check(fmt("seed %llu", static_cast<unsigned long long>(seed)), ok);
    c.note(fmt("seed %llu: |mean-(2,2)| %.3f, |mean+(2,2)| %.3f, split %.2f/%.2f, train %.0f s, sample %.0f s",
                          static_cast<unsigned long long>(seed), r.dist_pos, r.dist_neg, r.frac_pos, r.frac_neg,
                          r.train_s, r.sample_s));
  }
  return c.finish();
}

// ------------------------------------------------------------------ 6

bool guidance_algebra() {
  Criterion c(6, "classifier-free guidance algebra");
  auto net = tiny_unet(6, {16, 8});
  const auto pred = as_predictor(net);
  Rng rng(40);
  torch::NoGradGuard guard;
  for (int trial = 0; trial < 5; ++trial) {
    const auto z = rng.normal({4, 6}, kF64), y = rng.normal({4, 6}, kF64);
    const auto t = rng.randint_tensor(1, 1000, {4});
    const auto cond = pred(z, y, t), uncond = pred(z, null_token_like(y), t);
    c.check("gamma=0 is conditional", torch::equal(guided_eps(pred, z, y, t, 0.0), cond));
    c.check("gamma=1 is 2c-u", torch::equal(guided_eps(pred, z, y, t, 1.0), 2.0 * cond - uncond));
    c.check("gamma=-1 is unconditional", torch::equal(guided_eps(pred, z, y, t, -1.0), uncond));
  }
  return c.finish();
}

// ------------------------------------------------------------------ 7

bool jvp_attribution() {
  Criterion c(7, "JVP attribution");
  const auto sched = build_schedule();
  Rng rng(50);
  torch::NoGradGuard guard;
  {  // Real decoder, trained briefly, probed in float64.
    RAEConfig cfg;
    cfg.latent_dim = 8;
    cfg.widths = {4, 4, 8, 8};
    cfg.epochs = 2;
    cfg.batch_size = 8;
    torch::GradMode::set_enabled(true);
    auto rae = train_rae(synthetic_split(6, 5, 51), cfg, {}, 52).model;
    torch::GradMode::set_enabled(false);
    rae->to(kF64);
    rae->eval();
    auto net = tiny_unet(8, {16, 8});
    const auto pred = as_predictor(net);
    const auto dec = decoder_jvp(rae);
    const double h = 1e-6;
    double worst = 0;
    for (int probe = 0; probe < 100; ++probe) {
      const auto z = rng.normal({1, 8}, kF64), y = rng.normal({1, 8}, kF64);
      const auto t = rng.randint(1, 1000);
      const auto got = local_importance(dec, pred, z, y, t, sched, 1.0);
      const auto s = score_from_eps(guided_eps(pred, z, y, torch::full({1}, t, torch::kInt64), 1.0), t, sched);
      const auto fd = ((rae->decode(z + h * s) - rae->decode(z - h * s)) / (2 * h)).abs().reshape(got.sizes());
      worst = std::max(worst, max_rel(got, fd));
    }
    c.close("trained decoder, 100 probes", worst, 0.0, 1e-2);
  }
  {  // Identity stub: the map is |score| exactly.
    auto net = tiny_unet(64, {16, 8});
    const auto pred = as_predictor(net);
    bool ok = true;
    for (int probe = 0; probe < 10; ++probe) {
      const auto z = rng.normal({1, 64}, kF64), y = rng.normal({1, 64}, kF64);
      const auto t = rng.randint(1, 1000);
      const auto got = local_importance(identity_decoder(8, 8), pred, z, y, t, sched, 1.0);
      const auto s = score_from_eps(guided_eps(pred, z, y, torch::full({1}, t, torch::kInt64), 1.0), t, sched);
      ok = ok && torch::equal(got, s.abs().reshape(got.sizes()));
    }
    c.check("identity decoder exact", ok);
  }
  {  // Linear stub against central differences.
    auto net = tiny_unet(6, {16, 8});
    const auto pred = as_predictor(net);
    const auto W = rng.normal({48, 6}, kF64);
    const auto dec = linear_decoder(W, 6, 8);
    double worst = 0;
    for (int probe = 0; probe < 20; ++probe) {
      const auto z = rng.normal({1, 6}, kF64), y = rng.normal({1, 6}, kF64);
      const auto t = rng.randint(1, 1000);
      const auto got = local_importance(dec, pred, z, y, t, sched, 1.0);
      const auto s = score_from_eps(guided_eps(pred, z, y, torch::full({1}, t, torch::kInt64), 1.0), t, sched);
      const double h = 1e-3;
      const auto fd =
          ((torch::matmul(z + h * s, W.t()) - torch::matmul(z - h * s, W.t())) / (2 * h)).abs().reshape(got.sizes());
      worst = std::max(worst, max_rel(got, fd));
    }
    c.close("linear decoder", worst, 0.0, 1e-3);
  }
  return c.finish();
}

// ------------------------------------------------------------------ 9

bool statistics_fixtures() {
  Criterion c(9, "statistics fixtures");
  c.close("spearman fixture", spearman_rank(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4}), 0.8,
          1e-12);
  Rng rng(60);
  std::map<std::string, std::vector<torch::Tensor>> same, noise;
  for (int k = 0; k < 4; ++k) {
    const auto m = rng.uniform_tensor({1, 16, 16}, kF64);
    same["c" + std::to_string(k)] = std::vector<torch::Tensor>(6, m);
    for (int p = 0; p < 10; ++p) noise["c" + std::to_string(k)].push_back(rng.normal({1, 16, 16}, kF64));
  }
  c.close("bootstrap identical maps", bootstrap_consistency(same, 100, rng), 1.0, 1e-12);
  const double rho = bootstrap_consistency(noise, 1000, rng);
  c.check("bootstrap white noise |rho| < 0.05", std::abs(rho) < 0.05, fmt("%.4f", rho));
  std::vector<double> a, b;
  for (int i = 0; i < 25; ++i) {
    b.push_back(rng.normal({1}, kF64).item<double>());
    a.push_back(b.back() + 1.0);
  }
  const auto w = wilcoxon_signed_rank(a, b, Alternative::Greater);
  c.check("wilcoxon n=25 p < 1e-4", w.p_value < 1e-4, fmt("p = %.3g", w.p_value));
  c.close("wilcoxon n=25 exact p", w.p_value, std::ldexp(1.0, -25), 1e-12);
  return c.finish();
}

// ------------------------------------------------------------------ 10

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool pipeline_reproducibility() {
  Criterion c(10, "pipeline reproducibility");
  ::unsetenv("ONESHOT_LDM_CACHE");
  std::string tmpl = (fs::temp_directory_path() / "oneshot_acceptance_XXXXXX").string();
  const fs::path root = ::mkdtemp(tmpl.data());
  auto cfg = [&](const std::string& out) {
    auto j = nlohmann::json::parse(R"({"schema_version":1,
      "dataset":{"name":"omniglot",
                 "synthetic":{"train_categories":10,"test_categories":4,"samples_per_category":6,"seed":1}},
      "rae":{"latent_dim":8,"widths":[4,4,8,8],"epochs":1,"batch_size":16},
      "ldm":{"unet":{"widths":[16,8]},"steps":20,"epochs":1,"batch_size":16},
      "critics":{"widths":[4,4,8,8],"embedding_dim":8,"classifier_epochs":1,"embedder_epochs":1,
                 "batch_size":16,"projection_dim":8,"gate_accuracy":0},
      "sweeps":[{"name":"pr","swept":{"kind":"prototype"},"betas":[1,10]}],
      "samples_per_category":2,"stages":["rae","ldm","sample","evaluate"]})");
    j["dataset"]["root"] = (root / "data").string();
    j["output_dir"] = (root / out).string();
    return experiment_from_json(j);
  };
  RunOptions opts;
  opts.skip_disk_check = true;
  try {
    const auto a = run_sweep(cfg("a"), opts);
    const auto b = run_sweep(cfg("b"), opts);
    c.check("both runs succeed", a.exit_code == 0 && b.exit_code == 0 && a.computed == 2 && b.computed == 2);
    for (const auto* f : {"report.csv", "fits.json", "plot.svg"}) {
      const auto x = slurp(root / "a" / f);
      c.check(std::string("identical ") + f, !x.empty() && x == slurp(root / "b" / f));
    }
    auto stop = opts;
    stop.stop_after_points = 1;
    const auto killed = run_sweep(cfg("r"), stop);
    c.check("interrupted run stops after one point", killed.stopped_early && killed.computed == 1);
    const auto resumed = run_sweep(cfg("r"), opts);
    c.check("resume computes only the missing point", resumed.computed == 1 && resumed.skipped == 1,
            fmt("computed %lld skipped %lld", static_cast<long long>(resumed.computed),
                           static_cast<long long>(resumed.skipped)));
    const auto again = run_sweep(cfg("r"), opts);
    c.check("rerun recomputes nothing", again.computed == 0 && again.skipped == 2);
    c.check("resumed report identical", slurp(root / "r" / "report.csv") == slurp(root / "a" / "report.csv"));
  } catch (const std::exception& e) {
    c.check("sweep", false, e.what());
  }
  std::error_code ec;
  fs::remove_all(root, ec);
  return c.finish();
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  // Optional criterion filter: acceptance 1 4 9
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  auto want = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  const std::vector<std::pair<int, std::function<bool()>>> all{
      {1, loss_oracles},          {2, gradients},        {3, straight_through_contract},
      {4, schedule_statistics},   {5, toy_recovery},     {6, guidance_algebra},
      {7, jvp_attribution},       {9, statistics_fixtures}, {10, pipeline_reproducibility}};
  int failed = 0;
  for (const auto& [id, run] : all) {
    if (!want(id)) continue;
    bool ok = false;
    try {
      ok = run();
    } catch (const std::exception& e) {
      std::printf("FAIL  %2d  threw: %s\n", id, e.what());
    }
    failed += ok ? 0 : 1;
  }
  if (want(8)) std::printf("SKIP   8  scaled Omniglot check runs in acceptance_omniglot\n");
  std::printf("%s: %d criteria failed\n", failed ? "FAIL" : "PASS", failed);
  return failed ? 1 : 0;
}
