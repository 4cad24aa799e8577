// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/rng.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <bit>
#include <cstring>
#include <mutex>

#include "oneshot_ldm/errors.hpp"

namespace oneshot {

namespace {

uint64_t next_u64(torch::Generator& gen) {
  std::lock_guard<std::mutex> lock(gen.mutex());
  return gen.get<at::CPUGeneratorImpl>()->random64();
}

}  // namespace

Rng::Rng(uint64_t seed) : seed_(seed), gen_(at::make_generator<at::CPUGeneratorImpl>(seed)) {}

Rng::Rng(const Rng& other) : seed_(other.seed_), gen_(other.gen_.clone()) {}

Rng& Rng::operator=(const Rng& other) {
  if (this != &other) {
    seed_ = other.seed_;
    gen_ = other.gen_.clone();
  }
  return *this;
}

double Rng::uniform(double lo, double hi) {
  const double u = static_cast<double>(next_u64(gen_) >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

int64_t Rng::randint(int64_t lo, int64_t hi) {
  if (hi < lo) throw ValidationError("randint: empty range");
  const auto span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(next_u64(gen_) % span);
}

bool Rng::bernoulli(double p) { return uniform(0.0, 1.0) < p; }

torch::Tensor Rng::normal(at::IntArrayRef shape, torch::ScalarType dtype) {
  return torch::randn(shape, gen_, torch::TensorOptions().dtype(dtype));
}

torch::Tensor Rng::uniform_tensor(at::IntArrayRef shape, torch::ScalarType dtype) {
  return torch::rand(shape, gen_, torch::TensorOptions().dtype(dtype));
}

torch::Tensor Rng::randint_tensor(int64_t lo, int64_t hi, at::IntArrayRef shape) {
  return torch::randint(lo, hi + 1, shape, gen_, torch::TensorOptions().dtype(torch::kInt64));
}

std::vector<int64_t> Rng::permutation(int64_t n) {
  auto perm = torch::randperm(n, gen_, torch::TensorOptions().dtype(torch::kInt64));
  return {perm.data_ptr<int64_t>(), perm.data_ptr<int64_t>() + n};
}

Rng Rng::fork() { return Rng(mix64(next_u64(gen_))); }

std::vector<uint8_t> Rng::state() const {
  auto st = gen_.get_state().contiguous();
  std::vector<uint8_t> out(sizeof(uint64_t) + static_cast<size_t>(st.numel()));
  std::memcpy(out.data(), &seed_, sizeof(uint64_t));
  std::memcpy(out.data() + sizeof(uint64_t), st.data_ptr<uint8_t>(), st.numel());
  return out;
}

void Rng::set_state(const std::vector<uint8_t>& bytes) {
  if (bytes.size() <= sizeof(uint64_t)) throw ValidationError("rng state blob too short");
  std::memcpy(&seed_, bytes.data(), sizeof(uint64_t));
  auto st = torch::empty({static_cast<int64_t>(bytes.size() - sizeof(uint64_t))}, torch::kUInt8);
  std::memcpy(st.data_ptr<uint8_t>(), bytes.data() + sizeof(uint64_t), st.numel());
  gen_.set_state(st);
}

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t base, double value, std::string_view tag) {
  uint64_t h = mix64(base);
  h = mix64(h ^ std::bit_cast<uint64_t>(value));
  for (char c : tag) h = mix64(h ^ static_cast<uint8_t>(c));
  return h;
}

}  // namespace oneshot
