// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/rae.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "oneshot_ldm/errors.hpp"

namespace oneshot {

namespace nn = torch::nn;

double LrStep::at(double base, int64_t epoch) const {
  if (every <= 0) return base;
  return base * std::pow(factor, static_cast<double>(epoch / every));
}

void RAEConfig::validate() const {
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (image_size != 48) throw ConfigError("the autoencoder is laid out for 48x48 images");
  if (widths.size() != 4) throw ConfigError("widths must list 4 channel counts");
  for (size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] < 1) throw ConfigError("widths must be positive");
    if (i > 0 && widths[i] < widths[i - 1]) throw ConfigError("widths must be non-decreasing");
  }
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (lr_step.every < 0 || !(lr_step.factor > 0.0)) throw ConfigError("lr_step needs every >= 0 and factor > 0");
  augmentation.validate();
}

nlohmann::json to_json(const RAEConfig& c) {
  return {{"latent_dim", c.latent_dim},
          {"image_size", c.image_size},
          {"widths", c.widths},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"lr_step", {{"every", c.lr_step.every}, {"factor", c.lr_step.factor}}},
          {"augmentation", to_json(c.augmentation)}};
}

RAEConfig rae_config_from_json(const nlohmann::json& j) {
  RAEConfig c;
  try {
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.image_size = j.value("image_size", c.image_size);
    c.widths = j.value("widths", c.widths);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("lr_step")) {
      c.lr_step.every = j["lr_step"].value("every", int64_t{0});
      c.lr_step.factor = j["lr_step"].value("factor", 1.0);
    }
    if (j.contains("augmentation")) c.augmentation = augmentation_from_json(j["augmentation"]);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("rae config: ") + e.what());
  }
  c.validate();
  return c;
}

ConvEncoderImpl::ConvEncoderImpl(const std::vector<int64_t>& w, int64_t out_dim) : widths(w) {
  if (w.size() != 4) throw ConfigError("encoder needs 4 channel widths");
  conv = nn::Sequential();
  const int64_t ins[4] = {1, w[0], w[1], w[2]};
  const int64_t pads[4] = {1, 1, 2, 1};  // 48 -> 24 -> 12 -> 7 -> 3
  for (int i = 0; i < 4; ++i) {
    conv->push_back(nn::Conv2d(nn::Conv2dOptions(ins[i], w[i], 4).stride(2).padding(pads[i]).bias(false)));
    conv->push_back(nn::BatchNorm2d(w[i]));
    conv->push_back(nn::ReLU());
  }
  register_module("conv", conv);
  fc = register_module("fc", nn::Linear(w[3] * 9, out_dim));
}

torch::Tensor ConvEncoderImpl::forward(const torch::Tensor& x) { return fc->forward(conv->forward(x).flatten(1)); }

void check_image_batch(const torch::Tensor& x, int64_t size) {
  if (x.dim() != 4 || x.size(1) != 1 || x.size(2) != size || x.size(3) != size) {
    throw ShapeError("expected images [B, 1, " + std::to_string(size) + ", " + std::to_string(size) + "], got " +
                     c10::str(x.sizes()));
  }
}

RAEImpl::RAEImpl(RAEConfig config, std::vector<RegularizerSpec> specs, int64_t n_classes)
    : config_(std::move(config)), n_classes_(n_classes) {
  config_.validate();
  const auto& w = config_.widths;
  const int64_t d = config_.latent_dim;
  regs = register_module("regs", RegularizerSet(std::move(specs), d, n_classes));

  encoder = register_module("encoder", ConvEncoder(w, gaussian() ? 2 * d : d));

  // 1 -> 6 -> 12 -> 24 -> 48
  const int64_t dec_in[4] = {d, w[3], w[2], w[1]};
  const int64_t dec_out_ch[4] = {w[3], w[2], w[1], w[0]};
  for (int i = 0; i < 4; ++i) {
    auto opts = i == 0 ? nn::ConvTranspose2dOptions(dec_in[i], dec_out_ch[i], 6).stride(1).bias(false)
                       : nn::ConvTranspose2dOptions(dec_in[i], dec_out_ch[i], 4).stride(2).padding(1).bias(false);
    dec_up.push_back(register_module("dec_up" + std::to_string(i), nn::ConvTranspose2d(opts)));
    dec_bn.push_back(register_module("dec_bn" + std::to_string(i), nn::BatchNorm2d(dec_out_ch[i])));
  }
  // After a right/bottom zero pad to 49x49.
  dec_out = register_module("dec_out", nn::Conv2d(nn::Conv2dOptions(w[0], 1, 4).stride(1).padding(1)));
}

LatentBatch RAEImpl::encode(const torch::Tensor& x, Rng* rng) {
  check_image_batch(x, config_.image_size);
  auto h = encoder->forward(x);
  LatentBatch out;
  if (gaussian()) {
    const int64_t d = config_.latent_dim;
    GaussianLatent g{h.narrow(1, 0, d), h.narrow(1, d, d)};
    out.z = (is_training() && rng) ? g.reparametrize(rng->normal(g.mean.sizes(), g.mean.scalar_type())) : g.mean;
    out.gaussian = std::move(g);
  } else {
    out.z = h;
  }
  if (quantized()) {
    auto q = quantize(out.z, regs->codebook);
    out.z_q = q.z_q;
    out.indices = q.indices;
  }
  return out;
}

torch::Tensor RAEImpl::code(const torch::Tensor& x) {
  auto lb = encode(x);
  return lb.gaussian ? lb.gaussian->mean : lb.z;
}

torch::Tensor RAEImpl::decode(const torch::Tensor& z) {
  if (z.dim() != 2 || z.size(1) != config_.latent_dim) {
    throw ShapeError("decode expects [B, " + std::to_string(config_.latent_dim) + "], got " + c10::str(z.sizes()));
  }
  return decoder_forward(quantized() ? quantize(z, regs->codebook).z_q : z);
}

torch::Tensor RAEImpl::decoder_forward(const torch::Tensor& z) { return decoder_pass(z, nullptr, false).first; }

std::pair<torch::Tensor, torch::Tensor> RAEImpl::decode_jvp(const torch::Tensor& z, const torch::Tensor& dz) {
  if (is_training()) throw ValidationError("decode_jvp needs the model in eval mode");
  if (z.dim() != 2 || z.size(1) != config_.latent_dim || dz.sizes() != z.sizes()) {
    throw ValidationError("decode_jvp: z and dz must both be [B, " + std::to_string(config_.latent_dim) + "]");
  }
  auto zp = quantized() ? quantize(z, regs->codebook).z_q : z;
  return decoder_pass(zp, &dz, true);
}

std::pair<torch::Tensor, torch::Tensor> RAEImpl::decoder_pass(const torch::Tensor& z, const torch::Tensor* dz,
                                                              bool tangent) {
  auto x = z.reshape({z.size(0), z.size(1), 1, 1});
  torch::Tensor t = tangent ? dz->reshape_as(x).to(x.scalar_type()) : torch::Tensor();
  for (size_t i = 0; i < dec_up.size(); ++i) {
    x = dec_up[i]->forward(x);
    if (tangent) {
      const int64_t stride = i == 0 ? 1 : 2, pad = i == 0 ? 0 : 1;
      t = torch::conv_transpose2d(t, dec_up[i]->weight, {}, stride, pad);
      auto& bn = dec_bn[i];
      auto scale = bn->weight / torch::sqrt(bn->running_var + bn->options.eps());
      t = t * scale.reshape({1, -1, 1, 1});
    }
    x = dec_bn[i]->forward(x);
    if (tangent) t = t * (x > 0).to(t.scalar_type());
    x = torch::relu(x);
  }
  x = torch::constant_pad_nd(x, {0, 1, 0, 1});
  x = dec_out->forward(x);
  x = torch::sigmoid(x);
  if (tangent) {
    t = torch::constant_pad_nd(t, {0, 1, 0, 1});
    t = torch::conv2d(t, dec_out->weight, {}, 1, 1);
    t = t * x * (1.0 - x);
  }
  return {x, t};
}

void seeded_init(nn::Module& module, Rng& rng) {
  torch::NoGradGuard guard;
  std::map<std::string, int64_t> fan_in;
  auto params = module.named_parameters(true);
  for (const auto& item : params) {
    const auto& p = item.value();
    if (p.dim() >= 2) {
      int64_t f = p.size(1);
      for (int64_t k = 2; k < p.dim(); ++k) f *= p.size(k);
      fan_in[item.key()] = f;
    }
  }
  auto fill = [&](torch::Tensor& p, double bound) {
    p.copy_(rng.uniform_tensor(p.sizes(), p.scalar_type()) * (2.0 * bound) - bound);
  };
  for (auto& item : params) {
    const std::string& name = item.key();
    auto& p = item.value();
    const bool is_codebook = name.size() >= 8 && name.compare(name.size() - 8, 8, "codebook") == 0;
    if (is_codebook) {
      fill(p, 1.0 / static_cast<double>(p.size(0)));
    } else if (p.dim() >= 2) {
      fill(p, 1.0 / std::sqrt(static_cast<double>(fan_in[name])));
    } else if (name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0) {
      auto it = fan_in.find(name.substr(0, name.size() - 5) + ".weight");
      if (it != fan_in.end()) fill(p, 1.0 / std::sqrt(static_cast<double>(it->second)));
    }
  }
}

RAE make_rae(const RAEConfig& config, const std::vector<RegularizerSpec>& specs, int64_t n_classes, Rng& rng) {
  RAE model(config, specs, n_classes);
  seeded_init(*model, rng);
  return model;
}

std::tuple<torch::Tensor, torch::Tensor, torch::Tensor> rae_loss(RAE& model, const Batch& batch, Rng& rng) {
  const auto& x = batch.images;
  RegContext ctx;
  LatentBatch main;
  if (model->regs->needs_views()) {
    const auto& aug = model->config().augmentation;
    auto xa = augment_batch(x, aug, rng);
    auto xb = augment_batch(x, aug, rng);
    main = model->encode(xa, &rng);
    ctx.z_a = main.z;
    ctx.z_b = model->encode(xb, &rng).z;
  } else {
    main = model->encode(x, &rng);
  }
  ctx.z = main.z;
  ctx.gaussian = main.gaussian;
  ctx.z_q = main.z_q;
  ctx.labels = batch.labels;
  if (model->regs->has(RegKind::Prototype)) ctx.z_y = model->encode(batch.exemplars, &rng).z;

  auto dec_in = model->quantized() ? straight_through(main.z, main.z_q) : main.z;
  auto recon = torch::mse_loss(model->decoder_forward(dec_in), x);
  auto reg = compose_regularizers(model->regs, ctx);
  return {recon + reg, recon, reg};
}

RAEStepResult rae_step(RAE& model, const Batch& batch, torch::optim::Optimizer& optimizer, Rng& rng) {
  optimizer.zero_grad();
  auto [total, recon, reg] = rae_loss(model, batch, rng);
  RAEStepResult r{total.item<double>(), recon.item<double>(), reg.item<double>()};
  if (!std::isfinite(r.total)) {
    std::ostringstream msg;
    msg << "non-finite autoencoder loss (recon " << r.recon << ", reg " << r.reg;
    for (const auto& s : model->regs->specs) msg << ", " << to_string(s.kind) << " beta " << s.beta;
    msg << ")";
    throw TrainingError(msg.str());
  }
  total.backward();
  optimizer.step();
  return r;
}

std::unique_ptr<torch::optim::Adam> make_rae_optimizer(RAE& model, const RAEConfig& config) {
  return std::make_unique<torch::optim::Adam>(
      model->parameters(), torch::optim::AdamOptions(config.learning_rate).weight_decay(config.weight_decay));
}

CheckpointSection& save_rae(Checkpoint& ckpt, RAE& model, torch::optim::Optimizer* optimizer, const Rng* rng,
                            int64_t epoch) {
  auto& sec = ckpt.add("rae");
  nlohmann::json specs = nlohmann::json::array();
  for (const auto& s : model->regs->specs) specs.push_back(to_json(s));
  sec.config = {{"rae", to_json(model->config())}, {"regularizers", specs}, {"n_classes", model->n_classes()}};
  sec.epoch = epoch;
  if (rng) sec.rng_state = rng->state();
  sec.parameters = module_state(*model);
  if (optimizer) sec.optimizer = adam_state(*optimizer, *model);
  return sec;
}

RAE load_rae(const Checkpoint& ckpt) {
  const auto& sec = ckpt.section("rae");
  RAE model(rae_config_from_json(sec.config.at("rae")), regularizers_from_json(sec.config.at("regularizers")),
            sec.config.value("n_classes", int64_t{0}));
  load_module_state(*model, sec.parameters);
  model->eval();
  return model;
}

RAETrainResult train_rae(const DatasetSplit& train, const RAEConfig& config, const std::vector<RegularizerSpec>& specs,
                         uint64_t seed, const TrainOptions& options) {
  config.validate();
  if (train.episodes.empty()) throw ValidationError("train_rae: empty training split");
  Rng rng(seed);
  const auto n_classes = static_cast<int64_t>(train.episodes.size());
  RAETrainResult result;
  result.model = make_rae(config, specs, n_classes, rng);
  auto& model = result.model;
  auto optimizer = make_rae_optimizer(model, config);
  int64_t epoch = 0;
  if (options.resume) {
    const auto ckpt = Checkpoint::load(*options.resume);
    const auto& sec = ckpt.section("rae");
    load_module_state(*model, sec.parameters);
    load_adam_state(*optimizer, *model, sec.optimizer);
    rng.set_state(sec.rng_state);
    epoch = sec.epoch;
  }
  const auto batch = std::min<int64_t>(config.batch_size, static_cast<int64_t>(train.num_variations()));
  const int64_t min_batch = model->regs->needs_views() ? 2 : 1;
  auto save = [&](int64_t completed) {
    if (!options.checkpoint) return;
    Checkpoint ckpt;
    save_rae(ckpt, model, optimizer.get(), &rng, completed);
    ckpt.save(*options.checkpoint);
  };

  model->train();
  const int64_t stop = options.max_epochs_this_call > 0 ? std::min(config.epochs, epoch + options.max_epochs_this_call)
                                                        : config.epochs;
  for (; epoch < stop; ++epoch) {
    EpochStats st;
    st.epoch = epoch;
    st.learning_rate = config.lr_step.at(config.learning_rate, epoch);
    for (auto& g : optimizer->param_groups()) g.options().set_lr(st.learning_rate);
    BatchSampler sampler(train, batch, rng.fork());
    int64_t steps = 0;
    while (auto b = sampler.next()) {
      if (b->images.size(0) < min_batch) continue;
      const auto r = rae_step(model, *b, *optimizer, rng);
      if (steps == 0) st.first_recon = r.recon;
      st.last_recon = r.recon;
      st.total += r.total;
      st.recon += r.recon;
      st.reg += r.reg;
      ++steps;
    }
    if (steps > 0) {
      st.total /= static_cast<double>(steps);
      st.recon /= static_cast<double>(steps);
      st.reg /= static_cast<double>(steps);
    }
    result.log.push_back(st);
    if (options.on_epoch) options.on_epoch(st);
    if ((epoch + 1) % std::max<int64_t>(1, options.checkpoint_every) == 0 || epoch + 1 == stop) {
      save(epoch + 1);
    }
  }
  if (config.epochs == 0) save(0);
  model->eval();
  return result;
}

}  // namespace oneshot
