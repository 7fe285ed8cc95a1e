#pragma once

#include <map>
#include <string>
#include <vector>

#include "condacl/datagen.hpp"
#include "condacl/flow.hpp"
#include "condacl/segnet.hpp"

namespace condacl {

/// EMA copy of the student used only for pseudo-labeling.
struct TeacherState {
  std::map<std::string, Tensor> params;
  double alpha = 0.99;
};

TeacherState make_teacher(const ParamStore& student, double alpha);

/// θ_T <- α·θ_T + (1−α)·θ_S elementwise.
void ema_update(TeacherState& teacher, const ParamStore& student);

struct PseudoLabelBatch {
  std::vector<LabelMap> labels;  // masked-out pixels carry the ignore id
  std::vector<std::vector<uint8_t>> mask;  // 1 = confident (max prob >= tau)
  double tau = 0.9;
};

/// Teacher argmax with confidence thresholding; no gradients flow.
PseudoLabelBatch make_pseudo_labels(const SegNet& net, const TeacherState& teacher, const Tensor& images,
                                    double tau);

/// Probability vector over a finite support; the discrete oracle for the
/// bound tested against the flow-based loss.
struct DiscreteDist {
  std::vector<double> p;
  void validate() const;
};

/// Σ p·ln(p/q); terms with p = 0 contribute 0. Throws InfiniteKL when q
/// vanishes where p does not.
double kl_divergence(const DiscreteDist& p, const DiscreteDist& q);

/// −(1/B)·Σ log q(y_b) through the frozen flow; differentiable w.r.t. the
/// student only (the flow parameters receive no gradient).
NodePtr bml_loss(const NodePtr& probs, const FlowModel& flow);

/// ce + λ·bml (Eq. of the continual objective).
NodePtr adaptation_objective(const NodePtr& ce_pseudo, const NodePtr& bml, double lambda);

struct AdaptConfig {
  double lambda = 0.005;
  double tau = 0.9;
  double alpha = 0.99;
  int epochs_per_stage = 15;
  int batch = 8;
  double lr = 2.5e-4;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::string pseudo_refresh = "per_iteration";  // per_iteration | per_epoch

  void validate() const;
};

/// One continual stage: self-training on the current target's unlabeled
/// images plus the λ-weighted flow regularizer. Only (target_k, train) is
/// read; the flow stays frozen throughout.
void run_adapt_stage(ParamStore& student, TeacherState& teacher, FlowModel* flow, const SegNet& net,
                     DataVault& vault, const std::string& target_domain, const AdaptConfig& cfg, Rng& rng);

}  // namespace condacl
