#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "condacl/datagen.hpp"
#include "condacl/graph.hpp"
#include "condacl/label_map.hpp"
#include "condacl/param_store.hpp"
#include "condacl/rng.hpp"

namespace condacl {

struct FlowConfig {
  int scales = 2;
  int blocks_per_scale = 4;
  int hidden_channels = 32;
  double dequant_delta = 0.02;
  double label_smoothing = 0.05;
  int input_pool = 1;  // 1 or 2; maps are average-pooled by this factor first
  // training knobs
  double lr = 2.5e-4;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int epochs = 30;
  int batch = 8;
  std::string train_on = "gt";  // gt | source_predictions

  void validate(int n_classes) const;
};

enum class MaskKind { ChannelHalf, Checkerboard };

/// Space-to-depth by 2: N×C×H×W -> N×4C×(H/2)×(W/2). Volume-preserving.
NodePtr squeeze2(const NodePtr& x);
Tensor unsqueeze2_value(const Tensor& x);

struct CouplingNet {
  NodePtr w1, b1, w2, b2;
  NodePtr apply(const NodePtr& x) const;
};

/// Affine coupling: one partition is rescaled by exp(tanh(s)) and shifted,
/// conditioned on the complementary partition. log|det| = sum of active s.
struct Coupling {
  MaskKind mask = MaskKind::ChannelHalf;
  bool swap = false;  // which partition is transformed
  CouplingNet scale_net, shift_net;

  NodePtr forward(const NodePtr& x, NodePtr& logdet_acc) const;
  Tensor inverse(const Tensor& y, double& logdet_acc) const;
};

/// Per-pixel multiplication by a learned C'×C' matrix.
/// log|det| per pixel = log|det M|, enforced nonsingular each pass.
struct ChannelMix {
  NodePtr m;

  NodePtr forward(const NodePtr& x, NodePtr& logdet_acc) const;
  Tensor inverse(const Tensor& y, double& logdet_acc) const;
};

struct FlowScale {
  std::vector<Coupling> couplings;
  std::vector<ChannelMix> mixes;
};

struct LatentSample {
  std::vector<Tensor> parts;
  int64_t total_dims() const;
};

/// Multi-scale bijection: per scale, squeeze -> K x (coupling, mix) -> split.
/// Split halves go to the standard-normal prior untouched.
class FlowModel {
 public:
  static FlowModel build(const FlowConfig& cfg, int in_channels, int in_h, int in_w, Rng& rng);
  static FlowModel build_with_masks(const FlowConfig& cfg, int in_channels, int in_h, int in_w,
                                    MaskKind mask, Rng& rng);

  FlowModel(const FlowModel&) = delete;
  FlowModel& operator=(const FlowModel&) = delete;
  FlowModel(FlowModel&&) = default;
  FlowModel& operator=(FlowModel&&) = default;

  struct ForwardNodes {
    std::vector<NodePtr> parts;
    NodePtr logdet;  // summed over the batch
  };
  /// y_batch: N×C×H×W in the original (pre-pool) space.
  ForwardNodes forward_nodes(const NodePtr& y_batch) const;

  std::pair<LatentSample, double> forward(const Tensor& y) const;  // y: C×H×W
  /// Returns the flow-space map; logdet_out, when given, receives the
  /// log|det| of the inverse map (the negation of the forward logdet).
  Tensor inverse(const LatentSample& z, double* logdet_out = nullptr) const;
  double log_prob(const Tensor& y) const;
  /// Σ_b log q(y_b), differentiable w.r.t. the batch node and θ_G.
  NodePtr log_prob_sum_node(const NodePtr& y_batch) const;
  std::vector<Tensor> sample(int n, Rng& rng) const;

  /// −(1/B)·Σ log q(y_b).
  NodePtr nll_node(const NodePtr& y_batch) const;
  double nll_batch(const std::vector<Tensor>& maps) const;

  void save(const std::string& path) const;
  static FlowModel load(const std::string& path);

  const FlowConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  int in_channels() const { return in_c_; }
  int in_height() const { return in_h_; }   // original, pre-pool
  int in_width() const { return in_w_; }
  int64_t flow_dims() const;                // dimensionality of the flow space
  std::vector<std::vector<int64_t>> latent_shapes() const;  // per part, C×H×W

  std::vector<FlowScale>& scales() { return scales_; }
  const std::vector<FlowScale>& scales() const { return scales_; }

 private:
  FlowModel() = default;

  FlowConfig cfg_;
  int in_c_ = 0, in_h_ = 0, in_w_ = 0;
  ParamStore store_;
  std::vector<FlowScale> scales_;
};

/// Smoothed one-hot plus uniform dequantization noise in [0, delta).
/// True class gets 1−ε+ε/C, the rest ε/C; ignore pixels get the uniform 1/C.
Tensor dequantize(const LabelMap& labels, int n_classes, double eps, double delta, Rng& rng);

/// Maps a vault batch to flow inputs N×C×H×W (used to swap gt for predictions).
using FlowInputProvider = std::function<Tensor(const Batch&, Rng&)>;

/// Negative log-likelihood training on source segmentation maps (stage 0).
/// The default input path dequantizes the ground-truth labels; a provider can
/// substitute source-model predictions instead.
FlowModel train_flow(DataVault& vault, const std::string& source_domain, int n_classes, int image_h,
                     int image_w, const FlowConfig& cfg, Rng& rng,
                     const FlowInputProvider& provider = nullptr);

namespace flow_testing {
/// Fault-injection hook exercised by the selftest command.
extern bool corrupt_inverse;
}  // namespace flow_testing

}  // namespace condacl
