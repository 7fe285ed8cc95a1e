#include "condacl/param_store.hpp"

#include <cmath>
#include <ostream>

#include "condacl/serialize.hpp"

namespace condacl {

NodePtr ParamStore::make_param(const std::string& name, std::vector<int64_t> shape, const Init& init,
                               Rng& rng) {
  if (entries_.count(name)) fail(Err::DuplicateParam, name);
  Tensor value(shape);
  switch (init.kind) {
    case Init::Kind::Zeros:
      break;
    case Init::Kind::Uniform:
      for (int64_t i = 0; i < value.numel(); ++i) value[i] = rng.uniform(init.lo, init.hi);
      break;
    case Init::Kind::Kaiming: {
      double bound = std::sqrt(6.0 / static_cast<double>(init.fan_in));
      for (int64_t i = 0; i < value.numel(); ++i) value[i] = rng.uniform(-bound, bound);
      break;
    }
  }
  NodePtr node = leaf(std::move(value), true);
  node->op = "param";
  entries_[name] = Entry{node, Tensor(shape)};
  return node;
}

NodePtr ParamStore::add_value(const std::string& name, Tensor value) {
  if (entries_.count(name)) fail(Err::DuplicateParam, name);
  Tensor momentum(value.shape());
  NodePtr node = leaf(std::move(value), true);
  node->op = "param";
  entries_[name] = Entry{node, std::move(momentum)};
  return node;
}

NodePtr ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(Err::MissingArtifact, "parameter " + name);
  return it->second.node;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

void ParamStore::zero_grads() {
  for (auto& [_, e] : entries_) {
    e.node->ensure_grad();
    std::fill(e.node->grad.vec().begin(), e.node->grad.vec().end(), 0.0);
  }
}

void ParamStore::sgd_step(double lr, double momentum, double weight_decay) {
  if (lr < 0) fail(Err::BadConfig, "negative learning rate");
  for (auto& [_, e] : entries_) {
    e.node->ensure_grad();
    double* p = e.node->value.data();
    double* g = e.node->grad.data();
    double* v = e.momentum.data();
    for (int64_t i = 0; i < e.node->value.numel(); ++i) {
      double step = g[i] + weight_decay * p[i];
      v[i] = momentum * v[i] + step;
      p[i] -= lr * v[i];
      g[i] = 0.0;
    }
  }
}

void ParamStore::set_trainable(bool trainable) {
  for (auto& [_, e] : entries_) {
    e.node->requires_grad = trainable;
    if (trainable) e.node->ensure_grad();
  }
}

std::map<std::string, Tensor> ParamStore::snapshot_values() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, e] : entries_) out.emplace(name, e.node->value);
  return out;
}

void ParamStore::load_values(const std::map<std::string, Tensor>& values) {
  for (auto& [name, e] : entries_) {
    auto it = values.find(name);
    if (it == values.end()) fail(Err::MissingArtifact, "missing value for parameter " + name);
    if (!(it->second.shape() == e.node->value.shape())) fail(Err::BadShape, "parameter shape mismatch: " + name);
    e.node->value = it->second;
  }
}

void ParamStore::save_blocks(std::ostream& os) const {
  for (const auto& [name, e] : entries_) {
    write_str(os, name);
    const Tensor& t = e.node->value;
    write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_u32(os, static_cast<uint32_t>(t.dim(i)));
    for (int64_t i = 0; i < t.numel(); ++i) write_f64(os, t[i]);
  }
}

void ParamStore::load_blocks(std::istream& is, size_t count) {
  std::map<std::string, Tensor> loaded;
  for (size_t k = 0; k < count; ++k) {
    std::string name = read_str(is, "parameter name");
    uint32_t rank = read_u32(is, "parameter rank");
    if (rank == 0 || rank > 8) corrupt("parameter rank out of range");
    std::vector<int64_t> shape(rank);
    for (auto& d : shape) d = read_u32(is, "parameter extent");
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = read_f64(is, "parameter data");
    loaded.emplace(std::move(name), std::move(t));
  }
  if (entries_.empty()) {
    for (auto& [name, t] : loaded) {
      Tensor zeros(t.shape());
      NodePtr node = leaf(std::move(t), true);
      node->op = "param";
      entries_[name] = Entry{node, std::move(zeros)};
    }
  } else {
    load_values(loaded);
  }
}

}  // namespace condacl
