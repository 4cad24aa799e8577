// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/attribution.hpp"

#include "oneshot_ldm/errors.hpp"

namespace oneshot {

ImportanceMap unit_max(const ImportanceMap& map) {
  ImportanceMap out = map;
  out.normalization = MapNormalization::UnitMax;
  const double mx = map.values.max().item<double>();
  if (mx > 0.0) out.values = map.values / mx;
  return out;
}

DecoderJvp decoder_jvp(RAE& rae) {
  return [rae](const torch::Tensor& z, const torch::Tensor& dz) mutable { return rae->decode_jvp(z, dz); };
}

DecoderJvp identity_decoder(int64_t height, int64_t width) {
  return [height, width](const torch::Tensor& z, const torch::Tensor& dz) {
    if (z.size(1) != height * width) throw ValidationError("identity decoder needs d = H * W");
    return std::make_pair(z.reshape({-1, 1, height, width}), dz.reshape({-1, 1, height, width}));
  };
}

DecoderJvp linear_decoder(const torch::Tensor& weight, int64_t height, int64_t width) {
  if (weight.dim() != 2 || weight.size(0) != height * width) throw ValidationError("linear decoder needs W [H*W, d]");
  return [weight, height, width](const torch::Tensor& z, const torch::Tensor& dz) {
    auto w = weight.to(z.scalar_type());
    return std::make_pair(torch::matmul(z, w.t()).reshape({-1, 1, height, width}),
                          torch::matmul(dz, w.t()).reshape({-1, 1, height, width}));
  };
}

torch::Tensor score_from_eps(const torch::Tensor& eps_hat, int64_t t, const DiffusionSchedule& schedule) {
  schedule.check_step(t);
  return -eps_hat / schedule.sqrt_one_minus_alpha_bar[static_cast<size_t>(t - 1)];
}

torch::Tensor local_importance_along(const DecoderJvp& decoder, const torch::Tensor& z_t,
                                     const torch::Tensor& direction) {
  auto z = z_t.dim() == 1 ? z_t.unsqueeze(0) : z_t;
  auto s = direction.dim() == 1 ? direction.unsqueeze(0) : direction;
  if (z.dim() != 2 || z.size(0) != 1 || s.sizes() != z.sizes()) {
    throw ValidationError("local importance needs one latent and a direction of the same shape");
  }
  torch::NoGradGuard guard;
  return decoder(z, s).second.abs()[0];
}

torch::Tensor local_importance(const DecoderJvp& decoder, const Predictor& predictor, const torch::Tensor& z_t,
                               const torch::Tensor& z_y, int64_t t, const DiffusionSchedule& schedule, double gamma) {
  schedule.check_step(t);
  auto z = z_t.dim() == 1 ? z_t.unsqueeze(0) : z_t;
  auto y = z_y.dim() == 1 ? z_y.unsqueeze(0) : z_y;
  if (y.sizes() != z.sizes()) throw ValidationError("local_importance: z_t and z_y shapes differ");
  torch::NoGradGuard guard;
  auto steps = torch::full({1}, t, torch::TensorOptions().dtype(torch::kInt64));
  auto s = score_from_eps(guided_eps(predictor, z, y, steps, gamma), t, schedule);
  return local_importance_along(decoder, z, s);
}

ImportanceMap importance_map(const DecoderJvp& decoder, const Predictor& predictor, const torch::Tensor& z_y,
                             const DiffusionSchedule& schedule, double gamma, Rng& rng) {
  torch::Tensor total;
  auto visit = [&](const torch::Tensor& z_t, int64_t t, const torch::Tensor& eps_hat) {
    auto term = local_importance_along(decoder, z_t, score_from_eps(eps_hat, t, schedule));
    total = total.defined() ? total + term : term;
  };
  sample_latents(predictor, z_y, schedule, gamma, 1, rng, visit);
  ImportanceMap out;
  out.values = total;
  return out;
}

ImportanceMap importance_map(RAE& rae, const Predictor& predictor, const torch::Tensor& exemplar,
                             const DiffusionSchedule& schedule, double gamma, Rng& rng) {
  rae->eval();
  auto x = exemplar.dim() == 3 ? exemplar.unsqueeze(0) : exemplar;
  torch::Tensor z_y;
  {
    torch::NoGradGuard guard;
    z_y = rae->code(x);
  }
  auto map = importance_map(decoder_jvp(rae), predictor, z_y, schedule, gamma, rng);
  map.flagged = rae->quantized();
  return map;
}

ImportanceMap category_importance(RAE& rae, const Predictor& predictor, const torch::Tensor& exemplar,
                                  int64_t n_variations, const DiffusionSchedule& schedule, double gamma, Rng& rng) {
  if (n_variations < 1) throw ValidationError("category_importance needs n_variations >= 1");
  ImportanceMap acc;
  for (int64_t i = 0; i < n_variations; ++i) {
    auto m = importance_map(rae, predictor, exemplar, schedule, gamma, rng);
    if (i == 0) {
      acc = m;
    } else {
      acc.values = acc.values + m.values;
    }
  }
  if (n_variations > 1) acc.values = acc.values / static_cast<double>(n_variations);
  acc.n_averaged = n_variations;
  return acc;
}

}  // namespace oneshot
