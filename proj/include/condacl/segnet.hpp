#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "condacl/datagen.hpp"
#include "condacl/graph.hpp"
#include "condacl/label_map.hpp"
#include "condacl/param_store.hpp"
#include "condacl/rng.hpp"

namespace condacl {

struct SegNetConfig {
  int in_channels = 3;
  int n_classes = 7;
  std::vector<int> widths = {16, 32, 64};  // one entry per encoder level
  // training knobs
  double lr = 2.5e-4;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int epochs = 30;
  int batch = 8;

  int levels() const { return static_cast<int>(widths.size()); }
  void validate() const;
};

/// Resolves parameter nodes by name: a live store during training, frozen
/// constants for teachers and loaded checkpoints.
using ParamLookup = std::function<NodePtr(const std::string&)>;
ParamLookup store_params(const ParamStore& store);
ParamLookup frozen_params(const std::map<std::string, Tensor>& weights);

/// Encoder-decoder with avgpool downsampling, nearest-neighbor upsampling and
/// skip additions; leaky-relu(0.2) activations, 1×1 head to class logits.
class SegNet {
 public:
  explicit SegNet(SegNetConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const SegNetConfig& config() const { return cfg_; }

  void init_params(ParamStore& store, Rng& rng) const;

  /// images: N×3×H×W in [0,1]; returns logits N×C×H×W.
  NodePtr forward(const NodePtr& images, const ParamLookup& params) const;

  LabelMap predict_labels(const Tensor& image, const ParamLookup& params) const;
  std::vector<LabelMap> predict_labels_batch(const Tensor& images, const ParamLookup& params) const;

 private:
  SegNetConfig cfg_;
};

/// Argmax over channels per pixel; ties break toward the lowest class id.
std::vector<LabelMap> argmax_labels(const Tensor& logits_or_probs);

/// Mean cross-entropy over non-ignore pixels, computed from logits.
NodePtr supervised_loss(const NodePtr& logits, const std::vector<LabelMap>& labels);

/// Minibatch SGD on the source split at stage 0; returns the trained store.
ParamStore train_source(DataVault& vault, const std::string& source_domain, const SegNet& net, Rng& rng);

void save_segnet(const std::string& path, const SegNetConfig& cfg, const ParamStore& store);
std::pair<SegNetConfig, ParamStore> load_segnet(const std::string& path);

}  // namespace condacl
