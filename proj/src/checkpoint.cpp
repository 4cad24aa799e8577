// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#include "oneshot_ldm/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "oneshot_ldm/errors.hpp"

namespace fs = std::filesystem;

namespace oneshot {

namespace {

constexpr char kMagic[8] = {'O', 'S', 'L', 'D', 'M', 'C', 'K', 'P'};

class Writer {
 public:
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class T>
  void pod(T v) {
    raw(&v, sizeof(T));
  }
  void str(const std::string& s) {
    pod<uint32_t>(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void blob(const std::vector<uint8_t>& b) {
    pod<uint32_t>(static_cast<uint32_t>(b.size()));
    raw(b.data(), b.size());
  }
  void tensors(const NamedTensors& ts) {
    pod<uint32_t>(static_cast<uint32_t>(ts.size()));
    for (const auto& [name, t0] : ts) {
      auto t = t0.detach().contiguous().cpu();
      uint8_t code = 0;
      switch (t.scalar_type()) {
        case torch::kFloat32: code = 0; break;
        case torch::kFloat64: code = 1; break;
        case torch::kInt64: code = 2; break;
        default: t = t.to(torch::kFloat32); code = 0;
      }
      str(name);
      pod<uint8_t>(code);
      pod<uint32_t>(static_cast<uint32_t>(t.dim()));
      for (int64_t d : t.sizes()) pod<int64_t>(d);
      raw(t.data_ptr(), static_cast<size_t>(t.numel()) * t.element_size());
    }
  }
  std::vector<uint8_t>& bytes() { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::vector<uint8_t>& b, std::string origin) : b_(b), origin_(std::move(origin)) {}
  void raw(void* p, size_t n) {
    if (pos_ + n > b_.size()) throw ParseError(origin_, "truncated checkpoint");
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T pod() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  std::string str() {
    const auto n = pod<uint32_t>();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  std::vector<uint8_t> blob() {
    const auto n = pod<uint32_t>();
    std::vector<uint8_t> v(n);
    raw(v.data(), n);
    return v;
  }
  NamedTensors tensors() {
    NamedTensors out;
    const auto n = pod<uint32_t>();
    for (uint32_t i = 0; i < n; ++i) {
      auto name = str();
      const auto code = pod<uint8_t>();
      const auto ndim = pod<uint32_t>();
      std::vector<int64_t> dims(ndim);
      for (auto& d : dims) d = pod<int64_t>();
      torch::ScalarType st;
      switch (code) {
        case 0: st = torch::kFloat32; break;
        case 1: st = torch::kFloat64; break;
        case 2: st = torch::kInt64; break;
        default: throw ParseError(origin_, "unknown dtype code in tensor " + name);
      }
      auto t = torch::empty(dims, st);
      raw(t.data_ptr(), static_cast<size_t>(t.numel()) * t.element_size());
      out.emplace_back(std::move(name), std::move(t));
    }
    return out;
  }
  size_t pos() const { return pos_; }

 private:
  const std::vector<uint8_t>& b_;
  std::string origin_;
  size_t pos_ = 0;
};

}  // namespace

const torch::Tensor& CheckpointSection::parameter(const std::string& name) const {
  for (const auto& [n, t] : parameters) {
    if (n == name) return t;
  }
  throw ValidationError("checkpoint section '" + tag + "' has no tensor " + name);
}

CheckpointSection& Checkpoint::add(std::string tag) {
  if (has(tag)) throw ValidationError("duplicate checkpoint section " + tag);
  sections.push_back(CheckpointSection{});
  sections.back().tag = std::move(tag);
  return sections.back();
}

bool Checkpoint::has(const std::string& tag) const {
  for (const auto& s : sections) {
    if (s.tag == tag) return true;
  }
  return false;
}

const CheckpointSection& Checkpoint::section(const std::string& tag) const {
  for (const auto& s : sections) {
    if (s.tag == tag) return s;
  }
  throw ValidationError("checkpoint has no section '" + tag + "'");
}

CheckpointSection& Checkpoint::section(const std::string& tag) {
  return const_cast<CheckpointSection&>(std::as_const(*this).section(tag));
}

std::vector<uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.pod<uint32_t>(kVersion);
  w.pod<uint32_t>(static_cast<uint32_t>(sections.size()));
  for (const auto& s : sections) {
    w.str(s.tag);
    w.str(s.config.dump());
    w.pod<int64_t>(s.epoch);
    w.blob(s.rng_state);
    w.tensors(s.parameters);
    w.tensors(s.optimizer);
  }
  const auto crc = static_cast<uint32_t>(
      crc32(0L, w.bytes().data(), static_cast<uInt>(w.bytes().size())));
  w.pod<uint32_t>(crc);
  return std::move(w.bytes());
}

Checkpoint Checkpoint::deserialize(const std::vector<uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < sizeof(kMagic) + 12 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError(origin, "not a checkpoint file");
  }
  uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  const auto crc = static_cast<uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
  if (crc != stored_crc) throw ParseError(origin, "checkpoint checksum mismatch");
  Reader r(bytes, origin);
  char magic[8];
  r.raw(magic, 8);
  const auto version = r.pod<uint32_t>();
  if (version != kVersion) {
    throw ParseError(origin, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto n = r.pod<uint32_t>();
  for (uint32_t i = 0; i < n; ++i) {
    CheckpointSection s;
    s.tag = r.str();
    try {
      s.config = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(origin, std::string("bad config echo: ") + e.what());
    }
    s.epoch = r.pod<int64_t>();
    s.rng_state = r.blob();
    s.parameters = r.tensors();
    s.optimizer = r.tensors();
    ck.sections.push_back(std::move(s));
  }
  if (r.pos() + 4 != bytes.size()) throw ParseError(origin, "trailing bytes in checkpoint");
  return ck;
}

void Checkpoint::save(const fs::path& path) const {
  const auto bytes = serialize();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint Checkpoint::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, path.string());
}

NamedTensors module_state(const torch::nn::Module& module) {
  NamedTensors out;
  for (const auto& item : module.named_parameters(true)) {
    out.emplace_back(item.key(), item.value().detach().clone());
  }
  for (const auto& item : module.named_buffers(true)) {
    out.emplace_back(item.key(), item.value().detach().clone());
  }
  return out;
}

void load_module_state(torch::nn::Module& module, const NamedTensors& state, const std::string& prefix) {
  torch::NoGradGuard guard;
  auto assign = [&](const std::string& key, torch::Tensor& target) {
    const std::string full = prefix + key;
    for (const auto& [name, t] : state) {
      if (name == full) {
        if (t.sizes() != target.sizes()) {
          throw ShapeError("shape mismatch restoring " + full);
        }
        target.copy_(t);
        return;
      }
    }
    throw ValidationError("checkpoint is missing tensor " + full);
  };
  for (auto& item : module.named_parameters(true)) assign(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) assign(item.key(), item.value());
}

namespace {

template <class State>
void collect_adam(torch::optim::Optimizer& optimizer, const torch::nn::Module& module, NamedTensors& out) {
  auto& states = optimizer.state();
  for (const auto& item : module.named_parameters(true)) {
    auto it = states.find(item.value().unsafeGetTensorImpl());
    if (it == states.end()) continue;
    auto& st = static_cast<State&>(*it->second);
    out.emplace_back(item.key() + "#step", torch::tensor({st.step()}, torch::kInt64));
    out.emplace_back(item.key() + "#exp_avg", st.exp_avg().clone());
    out.emplace_back(item.key() + "#exp_avg_sq", st.exp_avg_sq().clone());
  }
}

template <class State>
void restore_adam(torch::optim::Optimizer& optimizer, const torch::nn::Module& module,
                  const NamedTensors& state) {
  auto find = [&](const std::string& key) -> const torch::Tensor* {
    for (const auto& [n, t] : state) {
      if (n == key) return &t;
    }
    return nullptr;
  };
  auto& states = optimizer.state();
  for (const auto& item : module.named_parameters(true)) {
    const auto* step = find(item.key() + "#step");
    if (!step) continue;
    const auto* avg = find(item.key() + "#exp_avg");
    const auto* avg_sq = find(item.key() + "#exp_avg_sq");
    if (!avg || !avg_sq) throw ValidationError("optimizer state for " + item.key() + " is incomplete");
    auto st = std::make_unique<State>();
    st->step(step->template item<int64_t>());
    st->exp_avg(avg->clone());
    st->exp_avg_sq(avg_sq->clone());
    states[item.value().unsafeGetTensorImpl()] = std::move(st);
  }
}

}  // namespace

NamedTensors adam_state(torch::optim::Optimizer& optimizer, const torch::nn::Module& module) {
  NamedTensors out;
  if (dynamic_cast<torch::optim::AdamW*>(&optimizer)) {
    collect_adam<torch::optim::AdamWParamState>(optimizer, module, out);
  } else {
    collect_adam<torch::optim::AdamParamState>(optimizer, module, out);
  }
  for (size_t g = 0; g < optimizer.param_groups().size(); ++g) {
    out.emplace_back("#lr" + std::to_string(g),
                     torch::tensor({optimizer.param_groups()[g].options().get_lr()}, torch::kFloat64));
  }
  return out;
}

void load_adam_state(torch::optim::Optimizer& optimizer, const torch::nn::Module& module,
                     const NamedTensors& state) {
  if (dynamic_cast<torch::optim::AdamW*>(&optimizer)) {
    restore_adam<torch::optim::AdamWParamState>(optimizer, module, state);
  } else {
    restore_adam<torch::optim::AdamParamState>(optimizer, module, state);
  }
  for (size_t g = 0; g < optimizer.param_groups().size(); ++g) {
    for (const auto& [n, t] : state) {
      if (n == "#lr" + std::to_string(g)) optimizer.param_groups()[g].options().set_lr(t.item<double>());
    }
  }
}

}  // namespace oneshot
