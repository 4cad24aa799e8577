// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/diffusion.hpp"

#include <cmath>
#include <sstream>

#include "oneshot_ldm/errors.hpp"

namespace oneshot {

Predictor as_predictor(UNet& net) {
  return [net](const torch::Tensor& z_t, const torch::Tensor& z_y, const torch::Tensor& t) mutable {
    return net->forward(z_t, z_y, t);
  };
}

torch::Tensor null_token_like(const torch::Tensor& z_y) { return torch::zeros_like(z_y); }

torch::Tensor ddpm_loss(const Predictor& predictor, const torch::Tensor& z0, const torch::Tensor& z_y,
                        const DiffusionSchedule& schedule, const GuidanceConfig& guidance, Rng& rng) {
  if (z0.dim() != 2 || z_y.sizes() != z0.sizes()) throw ShapeError("ddpm_loss expects z0 and z_y as [B, d]");
  const int64_t B = z0.size(0);
  auto t = rng.randint_tensor(1, schedule.T, {B});
  auto eps = rng.normal(z0.sizes(), z0.scalar_type());
  auto keep = (rng.uniform_tensor({B, 1}, torch::kFloat64) >= guidance.cond_dropout_prob).to(z_y.scalar_type());
  auto cond = z_y * keep + null_token_like(z_y) * (1 - keep);
  auto eps_hat = predictor(noise_latents(z0, t, eps, schedule), cond, t);
  return (eps_hat - eps).pow(2).sum(1).mean();
}

torch::Tensor guided_eps(const Predictor& predictor, const torch::Tensor& z_t, const torch::Tensor& z_y,
                         const torch::Tensor& t, double gamma) {
  if (!std::isfinite(gamma)) throw ValidationError("guidance scale must be finite");
  if (z_y.sizes() != z_t.sizes()) throw ShapeError("guided_eps: z_t and z_y shapes differ");
  auto cond = predictor(z_t, z_y, t);
  if (cond.sizes() != z_t.sizes()) throw ShapeError("predictor output shape differs from z_t");
  if (gamma == 0.0) return cond;
  auto uncond = predictor(z_t, null_token_like(z_y), t);
  return (1.0 + gamma) * cond - gamma * uncond;
}

torch::Tensor posterior_mean(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int64_t t,
                             const DiffusionSchedule& schedule) {
  const double a = schedule.alpha_at(t);
  const double coef = (1.0 - a) / schedule.sqrt_one_minus_alpha_bar[static_cast<size_t>(t - 1)];
  return (z_t - coef * eps_hat) / std::sqrt(a);
}

torch::Tensor predict_z0(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int64_t t,
                         const DiffusionSchedule& schedule) {
  schedule.check_step(t);
  const auto i = static_cast<size_t>(t - 1);
  return (z_t - schedule.sqrt_one_minus_alpha_bar[i] * eps_hat) / schedule.sqrt_alpha_bar[i];
}

namespace {

torch::Tensor steps_like(const torch::Tensor& z_t, int64_t t) {
  return torch::full({z_t.size(0)}, t, torch::TensorOptions().dtype(torch::kInt64));
}

}  // namespace

torch::Tensor reverse_step_with_noise(const Predictor& predictor, const torch::Tensor& z_t, const torch::Tensor& z_y,
                                      int64_t t, const DiffusionSchedule& schedule, double gamma,
                                      const torch::Tensor& noise) {
  schedule.check_step(t);
  auto eps_hat = guided_eps(predictor, z_t, z_y, steps_like(z_t, t), gamma);
  auto mean = posterior_mean(z_t, eps_hat, t, schedule);
  if (t == 1) return mean;
  return mean + schedule.sigma_at(t) * noise;
}

torch::Tensor reverse_step(const Predictor& predictor, const torch::Tensor& z_t, const torch::Tensor& z_y, int64_t t,
                           const DiffusionSchedule& schedule, double gamma, Rng& rng) {
  schedule.check_step(t);
  auto noise = t > 1 ? rng.normal(z_t.sizes(), z_t.scalar_type()) : torch::zeros_like(z_t);
  return reverse_step_with_noise(predictor, z_t, z_y, t, schedule, gamma, noise);
}

torch::Tensor sample_latents(const Predictor& predictor, const torch::Tensor& z_y, const DiffusionSchedule& schedule,
                             double gamma, int64_t n, Rng& rng, const StepVisitor& visit) {
  if (n < 0) throw ValidationError("sample_latents: n must be >= 0");
  auto cond = z_y.dim() == 1 ? z_y.unsqueeze(0) : z_y;
  if (cond.dim() != 2 || (cond.size(0) != 1 && cond.size(0) != n)) {
    throw ShapeError("sample_latents: z_y must be [d], [1, d] or [n, d]");
  }
  const int64_t d = cond.size(1);
  if (n == 0) return torch::zeros({0, d}, cond.options());
  torch::NoGradGuard guard;
  cond = cond.expand({n, d}).contiguous();
  auto z = rng.normal({n, d}, cond.scalar_type());
  for (int64_t t = schedule.T; t >= 1; --t) {
    auto eps_hat = guided_eps(predictor, z, cond, steps_like(z, t), gamma);
    if (visit) visit(z, t, eps_hat);
    auto mean = posterior_mean(z, eps_hat, t, schedule);
    z = t > 1 ? mean + schedule.sigma_at(t) * rng.normal({n, d}, cond.scalar_type()) : mean;
  }
  return z;
}

torch::Tensor generate_variations(RAE& rae, const Predictor& predictor, int64_t predictor_dim,
                                  const torch::Tensor& exemplar, int64_t n, double gamma,
                                  const DiffusionSchedule& schedule, Rng& rng) {
  if (predictor_dim != rae->latent_dim()) {
    throw ConfigError("diffusion model latent size " + std::to_string(predictor_dim) +
                      " does not match the autoencoder's " + std::to_string(rae->latent_dim()));
  }
  auto x = exemplar.dim() == 3 ? exemplar.unsqueeze(0) : exemplar;
  const int64_t s = rae->config().image_size;
  if (n == 0) return torch::zeros({0, 1, s, s});
  torch::NoGradGuard guard;
  rae->eval();
  auto z_y = rae->code(x);
  auto z = sample_latents(predictor, z_y, schedule, gamma, n, rng);
  return rae->decode(z);
}

void LDMConfig::validate() const {
  unet.validate();
  build_schedule(steps, beta_start, beta_end);
  if (epochs < 0) throw ConfigError("ldm epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("ldm batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("ldm learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("ldm weight_decay must be >= 0");
  if (!(guidance.cond_dropout_prob >= 0.0 && guidance.cond_dropout_prob <= 1.0)) {
    throw ConfigError("cond_dropout_prob must lie in [0, 1]");
  }
  if (!std::isfinite(guidance.gamma)) throw ConfigError("gamma must be finite");
  if (lr_step.every < 0 || !(lr_step.factor > 0.0)) throw ConfigError("ldm lr_step needs every >= 0 and factor > 0");
}

nlohmann::json to_json(const LDMConfig& c) {
  return {{"unet", to_json(c.unet)},
          {"steps", c.steps},
          {"beta_start", c.beta_start},
          {"beta_end", c.beta_end},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"lr_step", {{"every", c.lr_step.every}, {"factor", c.lr_step.factor}}},
          {"guidance", {{"gamma", c.guidance.gamma}, {"cond_dropout_prob", c.guidance.cond_dropout_prob}}}};
}

LDMConfig ldm_config_from_json(const nlohmann::json& j, int64_t latent_dim) {
  LDMConfig c;
  try {
    c.unet = unet_config_from_json(j.value("unet", nlohmann::json::object()), latent_dim);
    c.steps = j.value("steps", c.steps);
    c.beta_start = j.value("beta_start", c.beta_start);
    c.beta_end = j.value("beta_end", c.beta_end);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("lr_step")) {
      c.lr_step.every = j["lr_step"].value("every", c.lr_step.every);
      c.lr_step.factor = j["lr_step"].value("factor", c.lr_step.factor);
    }
    if (j.contains("guidance")) {
      c.guidance.gamma = j["guidance"].value("gamma", c.guidance.gamma);
      c.guidance.cond_dropout_prob = j["guidance"].value("cond_dropout_prob", c.guidance.cond_dropout_prob);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ldm config: ") + e.what());
  }
  c.validate();
  return c;
}

LatentDataset encode_split(RAE& rae, const DatasetSplit& split, int64_t chunk) {
  torch::NoGradGuard guard;
  rae->eval();
  std::vector<torch::Tensor> images, exemplar_codes;
  auto ex_codes = rae->code(split.exemplar_batch());
  for (size_t e = 0; e < split.episodes.size(); ++e) {
    for (const auto& v : split.episodes[e].variations) {
      images.push_back(v);
      exemplar_codes.push_back(ex_codes[static_cast<int64_t>(e)]);
    }
  }
  if (images.empty()) throw ValidationError("encode_split: split has no variations");
  auto all = torch::stack(images);
  std::vector<torch::Tensor> codes;
  for (int64_t i = 0; i < all.size(0); i += chunk) {
    codes.push_back(rae->code(all.narrow(0, i, std::min(chunk, all.size(0) - i))));
  }
  return {torch::cat(codes), torch::stack(exemplar_codes)};
}

std::unique_ptr<torch::optim::AdamW> make_ldm_optimizer(UNet& model, const LDMConfig& config) {
  return std::make_unique<torch::optim::AdamW>(
      model->parameters(), torch::optim::AdamWOptions(config.learning_rate).weight_decay(config.weight_decay));
}

CheckpointSection& save_ldm(Checkpoint& ckpt, UNet& model, const LDMConfig& config, torch::optim::Optimizer* optimizer,
                            const Rng* rng, int64_t epoch) {
  auto& sec = ckpt.add("ldm");
  sec.config = to_json(config);
  sec.config["latent_dim"] = model->config().latent_dim;
  sec.epoch = epoch;
  if (rng) sec.rng_state = rng->state();
  sec.parameters = module_state(*model);
  if (optimizer) sec.optimizer = adam_state(*optimizer, *model);
  return sec;
}

LoadedLDM load_ldm(const Checkpoint& ckpt) {
  const auto& sec = ckpt.section("ldm");
  LoadedLDM out;
  out.config = ldm_config_from_json(sec.config, sec.config.at("latent_dim").get<int64_t>());
  out.model = UNet(out.config.unet);
  load_module_state(*out.model, sec.parameters);
  out.model->eval();
  return out;
}

LDMTrainResult train_ldm(const LatentDataset& data, const LDMConfig& config, uint64_t seed,
                         const LDMTrainOptions& options) {
  config.validate();
  if (data.z0.dim() != 2 || data.z_y.sizes() != data.z0.sizes() || data.z0.size(0) == 0) {
    throw ValidationError("train_ldm: latents must be non-empty matching [N, d] tensors");
  }
  if (data.z0.size(1) != config.unet.latent_dim) {
    throw ConfigError("latent size " + std::to_string(data.z0.size(1)) + " does not match unet latent_dim " +
                      std::to_string(config.unet.latent_dim));
  }
  const auto schedule = config.schedule();
  Rng rng(seed);
  LDMTrainResult result;
  result.model = UNet(config.unet);
  seeded_init(*result.model, rng);
  auto& model = result.model;
  auto optimizer = make_ldm_optimizer(model, config);
  int64_t epoch = 0;
  if (options.resume) {
    const auto ckpt = Checkpoint::load(*options.resume);
    const auto& sec = ckpt.section("ldm");
    load_module_state(*model, sec.parameters);
    load_adam_state(*optimizer, *model, sec.optimizer);
    rng.set_state(sec.rng_state);
    epoch = sec.epoch;
  }
  auto save = [&](int64_t completed) {
    if (!options.checkpoint) return;
    Checkpoint ckpt;
    for (const auto& s : options.extra_sections) ckpt.sections.push_back(s);
    save_ldm(ckpt, model, config, optimizer.get(), &rng, completed);
    ckpt.save(*options.checkpoint);
  };
  const auto z0 = data.z0.detach().to(torch::kFloat32);
  const auto zy = data.z_y.detach().to(torch::kFloat32);
  const int64_t N = z0.size(0), B = std::min(config.batch_size, N);
  auto predictor = as_predictor(model);
  model->train();
  const int64_t stop = options.max_epochs_this_call > 0 ? std::min(config.epochs, epoch + options.max_epochs_this_call)
                                                        : config.epochs;
  for (; epoch < stop; ++epoch) {
    const double lr = config.lr_step.at(config.learning_rate, epoch);
    for (auto& g : optimizer->param_groups()) g.options().set_lr(lr);
    auto perm = torch::tensor(rng.permutation(N), torch::kInt64);
    double sum = 0.0;
    int64_t steps = 0;
    for (int64_t i = 0; i < N; i += B) {
      auto idx = perm.narrow(0, i, std::min(B, N - i));
      optimizer->zero_grad();
      auto loss = ddpm_loss(predictor, z0.index_select(0, idx), zy.index_select(0, idx), schedule, config.guidance, rng);
      const double v = loss.item<double>();
      if (!std::isfinite(v)) {
        std::ostringstream msg;
        msg << "non-finite diffusion loss at epoch " << epoch << ", step " << steps;
        throw TrainingError(msg.str());
      }
      loss.backward();
      optimizer->step();
      sum += v;
      ++steps;
    }
    result.epoch_loss.push_back(sum / static_cast<double>(std::max<int64_t>(1, steps)));
    if (options.on_epoch) options.on_epoch(epoch, result.epoch_loss.back());
    if ((epoch + 1) % std::max<int64_t>(1, options.checkpoint_every) == 0 || epoch + 1 == stop) save(epoch + 1);
  }
  if (config.epochs == 0) save(0);
  model->eval();
  return result;
}

}  // namespace oneshot
