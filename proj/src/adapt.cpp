#include "condacl/adapt.hpp"

#include <cmath>
#include <numeric>

namespace condacl {

TeacherState make_teacher(const ParamStore& student, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) fail(Err::BadConfig, "ema alpha must be in [0,1]");
  return TeacherState{student.snapshot_values(), alpha};
}

void ema_update(TeacherState& teacher, const ParamStore& student) {
  for (auto& [name, t] : teacher.params) {
    NodePtr s = student.get(name);
    if (!(s->value.shape() == t.shape())) fail(Err::BadShape, "ema shape mismatch: " + name);
    double a = teacher.alpha;
    const double* sv = s->value.data();
    double* tv = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) tv[i] = a * tv[i] + (1.0 - a) * sv[i];
  }
}

PseudoLabelBatch make_pseudo_labels(const SegNet& net, const TeacherState& teacher, const Tensor& images,
                                    double tau) {
  if (tau <= 0.0 || tau > 1.0) fail(Err::BadConfig, "tau must be in (0,1]");
  NodePtr logits = net.forward(constant(images), frozen_params(teacher.params));
  NodePtr probs = softmax_channels(logits);
  const Tensor& pv = probs->value;
  int64_t N = pv.dim(0), C = pv.dim(1), HW = pv.dim(2) * pv.dim(3);

  PseudoLabelBatch out;
  out.tau = tau;
  for (int64_t n = 0; n < N; ++n) {
    LabelMap m(pv.dim(2), pv.dim(3));
    std::vector<uint8_t> mask(static_cast<size_t>(HW), 0);
    for (int64_t p = 0; p < HW; ++p) {
      int best = 0;
      double bv = pv[(n * C) * HW + p];
      for (int64_t c = 1; c < C; ++c) {
        double v = pv[(n * C + c) * HW + p];
        if (v > bv) {
          bv = v;
          best = static_cast<int>(c);
        }
      }
      if (bv >= tau) {
        m.ids[static_cast<size_t>(p)] = static_cast<uint8_t>(best);
        mask[static_cast<size_t>(p)] = 1;
      } else {
        m.ids[static_cast<size_t>(p)] = LabelMap::kIgnore;
      }
    }
    out.labels.push_back(std::move(m));
    out.mask.push_back(std::move(mask));
  }
  return out;
}

void DiscreteDist::validate() const {
  double sum = 0.0;
  for (double v : p) {
    if (v < 0.0) fail(Err::BadConfig, "distribution entries must be nonnegative");
    sum += v;
  }
  if (std::fabs(sum - 1.0) > 1e-12) fail(Err::BadConfig, "distribution must sum to 1");
}

double kl_divergence(const DiscreteDist& p, const DiscreteDist& q) {
  if (p.p.size() != q.p.size()) fail(Err::BadShape, "kl: support mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < p.p.size(); ++i) {
    if (p.p[i] <= 0.0) continue;
    if (q.p[i] <= 0.0) fail(Err::InfiniteKL, "q vanishes where p > 0");
    acc += p.p[i] * std::log(p.p[i] / q.p[i]);
  }
  return acc;
}

NodePtr bml_loss(const NodePtr& probs, const FlowModel& flow) {
  return flow.nll_node(probs);
}

NodePtr adaptation_objective(const NodePtr& ce_pseudo, const NodePtr& bml, double lambda) {
  if (lambda < 0.0) fail(Err::BadConfig, "lambda must be >= 0");
  if (ce_pseudo->value.numel() != 1 || bml->value.numel() != 1)
    fail(Err::BadShape, "objective terms must be scalars");
  if (lambda == 0.0) return ce_pseudo;
  return add(ce_pseudo, scalar_mul(bml, lambda));
}

void AdaptConfig::validate() const {
  if (lambda < 0.0) fail(Err::BadConfig, "adapt.lambda must be >= 0");
  if (tau <= 0.0 || tau > 1.0) fail(Err::BadConfig, "adapt.tau must be in (0,1]");
  if (alpha < 0.0 || alpha > 1.0) fail(Err::BadConfig, "adapt.alpha must be in [0,1]");
  if (epochs_per_stage < 1) fail(Err::BadConfig, "adapt.epochs_per_stage must be >= 1");
  if (batch < 1) fail(Err::BadConfig, "adapt.batch must be >= 1");
  if (lr < 0.0) fail(Err::BadConfig, "adapt.lr must be >= 0");
  if (pseudo_refresh != "per_iteration" && pseudo_refresh != "per_epoch")
    fail(Err::BadConfig, "adapt.pseudo_refresh must be per_iteration or per_epoch");
}

void run_adapt_stage(ParamStore& student, TeacherState& teacher, FlowModel* flow, const SegNet& net,
                     DataVault& vault, const std::string& target_domain, const AdaptConfig& cfg, Rng& rng) {
  cfg.validate();
  DataVault::Handle handle = vault.read(target_domain, "train", Purpose::Train);
  if (handle.labeled()) fail(Err::AccessDenied, "target batches must not carry labels");
  if (flow) flow->params().set_trainable(false);

  int64_t n = handle.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  // per-epoch refresh keeps one teacher labeling of the whole split
  std::vector<LabelMap> epoch_labels;

  for (int epoch = 0; epoch < cfg.epochs_per_stage; ++epoch) {
    Rng shuffle_rng = rng.child(1000 + static_cast<uint64_t>(epoch));
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle_rng.below(static_cast<uint64_t>(i + 1)))]);

    if (cfg.pseudo_refresh == "per_epoch") {
      std::vector<int64_t> all(static_cast<size_t>(n));
      std::iota(all.begin(), all.end(), 0);
      Batch full = handle.batch(all);
      epoch_labels = make_pseudo_labels(net, teacher, full.images, cfg.tau).labels;
    }

    for (int64_t at = 0; at + cfg.batch <= n; at += cfg.batch) {
      std::vector<int64_t> idx(order.begin() + at, order.begin() + at + cfg.batch);
      Batch batch = handle.batch(idx);

      std::vector<LabelMap> pseudo;
      if (cfg.pseudo_refresh == "per_epoch") {
        for (int64_t i : idx) pseudo.push_back(epoch_labels[static_cast<size_t>(i)]);
      } else {
        pseudo = make_pseudo_labels(net, teacher, batch.images, cfg.tau).labels;
      }

      NodePtr logits = net.forward(constant(std::move(batch.images)), store_params(student));

      bool any_kept = false;
      for (const auto& m : pseudo)
        for (uint8_t id : m.ids)
          if (id != LabelMap::kIgnore) {
            any_kept = true;
            break;
          }
      // with no confident pixel the CE term vanishes and only the
      // regularizer drives the step
      NodePtr ce = any_kept ? supervised_loss(logits, pseudo) : constant(Tensor::scalar(0.0));

      NodePtr objective;
      if (flow && cfg.lambda > 0.0) {
        NodePtr probs = softmax_channels(logits);
        objective = adaptation_objective(ce, bml_loss(probs, *flow), cfg.lambda);
      } else {
        objective = ce;
      }
      if (objective->requires_grad) {
        backward(objective);
        student.sgd_step(cfg.lr, cfg.momentum, cfg.weight_decay);
      }
      ema_update(teacher, student);
    }
  }
}

}  // namespace condacl
