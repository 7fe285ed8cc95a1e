#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "condacl/graph.hpp"
#include "condacl/rng.hpp"

namespace condacl {

struct Init {
  enum class Kind { Zeros, Uniform, Kaiming } kind;
  double lo = 0.0, hi = 0.0;
  int64_t fan_in = 0;

  static Init zeros() { return {Kind::Zeros}; }
  static Init uniform(double lo, double hi) { return {Kind::Uniform, lo, hi}; }
  /// Uniform in ±sqrt(6/fan_in).
  static Init kaiming(int64_t fan_in) { return {Kind::Kaiming, 0, 0, fan_in}; }
};

/// Named parameters plus their SGD momentum buffers. Iteration order is the
/// name order, so update sequences are deterministic.
class ParamStore {
 public:
  NodePtr make_param(const std::string& name, std::vector<int64_t> shape, const Init& init, Rng& rng);

  /// Registers a parameter with the given value directly (checkpoint loads,
  /// teacher snapshots).
  NodePtr add_value(const std::string& name, Tensor value);

  NodePtr get(const std::string& name) const;
  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  size_t size() const { return entries_.size(); }
  std::vector<std::string> names() const;

  void zero_grads();

  /// v <- momentum*v + grad (+ weight_decay*param); param <- param - lr*v; grads zeroed.
  void sgd_step(double lr, double momentum, double weight_decay = 0.0);

  /// Flips requires_grad on every parameter node (frozen models).
  void set_trainable(bool trainable);

  std::map<std::string, Tensor> snapshot_values() const;
  void load_values(const std::map<std::string, Tensor>& values);

  void save_blocks(std::ostream& os) const;
  /// Replaces the store contents with the named blocks from the stream.
  void load_blocks(std::istream& is, size_t count);

 private:
  struct Entry {
    NodePtr node;
    Tensor momentum;
  };
  std::map<std::string, Entry> entries_;
};

}  // namespace condacl
