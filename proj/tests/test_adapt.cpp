#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "condacl/adapt.hpp"
#include "condacl/checks.hpp"

using namespace condacl;

namespace {

SegNetConfig tiny_cfg(int n_classes = 4) {
  SegNetConfig cfg;
  cfg.n_classes = n_classes;
  cfg.widths = {6, 8};
  return cfg;
}

Tensor random_image(std::vector<int64_t> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

// Tiny flow fitted to striped maps so "plausible layout" is meaningful.
FlowModel trained_tiny_flow(int n_classes, int h, int w) {
  FlowConfig cfg;
  cfg.scales = 2;
  cfg.blocks_per_scale = 2;
  cfg.hidden_channels = 8;
  Rng rng(404);
  FlowModel model = FlowModel::build(cfg, n_classes, h, w, rng);
  Rng drng(405);
  for (int step = 0; step < 60; ++step) {
    Tensor batch({4, n_classes, h, w});
    for (int64_t b = 0; b < 4; ++b) {
      LabelMap lm(h, w);
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          lm.at(y, x) = static_cast<uint8_t>((y * n_classes) / h);  // horizontal bands
      Tensor m = dequantize(lm, n_classes, 0.05, 0.02, drng);
      std::copy(m.data(), m.data() + m.numel(), batch.data() + b * m.numel());
    }
    NodePtr loss = model.nll_node(constant(std::move(batch)));
    backward(loss);
    model.params().sgd_step(1e-4, 0.9);
  }
  return model;
}

}  // namespace

TEST_CASE("ema_update") {
  ParamStore student;
  Rng rng(1);
  NodePtr w = student.make_param("w", {1}, Init::zeros(), rng);

  w->value[0] = 4.0;
  TeacherState teacher = make_teacher(student, 0.5);
  teacher.params.at("w")[0] = 2.0;
  ema_update(teacher, student);
  CHECK(teacher.params.at("w")[0] == doctest::Approx(3.0).epsilon(1e-15));

  TeacherState frozen = make_teacher(student, 1.0);
  frozen.params.at("w")[0] = -7.0;
  ema_update(frozen, student);
  CHECK(frozen.params.at("w")[0] == -7.0);

  TeacherState copy = make_teacher(student, 0.0);
  copy.params.at("w")[0] = 123.0;
  ema_update(copy, student);
  CHECK(copy.params.at("w")[0] == 4.0);

  TeacherState bad = make_teacher(student, 0.5);
  bad.params.at("w") = Tensor({2});
  CHECK_THROWS_AS(ema_update(bad, student), Error);

  // contraction toward the student
  ParamStore s2;
  Rng r2(2);
  NodePtr v = s2.make_param("v", {8}, Init::uniform(-1, 1), r2);
  TeacherState t2 = make_teacher(s2, 0.9);
  for (int64_t i = 0; i < 8; ++i) t2.params.at("v")[i] = v->value[i] + (i % 2 ? 1.0 : -2.0);
  Tensor before = t2.params.at("v");
  ema_update(t2, s2);
  for (int64_t i = 0; i < 8; ++i) {
    double gap_before = std::fabs(before[i] - v->value[i]);
    double gap_after = std::fabs(t2.params.at("v")[i] - v->value[i]);
    CHECK(gap_after <= 0.9 * gap_before + 1e-15);
  }
}

TEST_CASE("make_pseudo_labels thresholding") {
  SegNetConfig cfg = tiny_cfg(2);
  SegNet net(cfg);
  ParamStore store;
  Rng rng(3);
  net.init_params(store, rng);
  for (const auto& name : store.names())
    std::fill(store.get(name)->value.vec().begin(), store.get(name)->value.vec().end(), 0.0);

  Rng drng(4);
  Tensor images = random_image({1, 3, 8, 8}, drng);

  // head bias picks the softmax: [0.95, 0.05] everywhere
  TeacherState confident = make_teacher(store, 0.99);
  confident.params.at("head.b")[0] = std::log(0.95);
  confident.params.at("head.b")[1] = std::log(0.05);
  PseudoLabelBatch pb = make_pseudo_labels(net, confident, images, 0.9);
  for (int64_t p = 0; p < 64; ++p) {
    CHECK(pb.labels[0].ids[static_cast<size_t>(p)] == 0);
    CHECK(pb.mask[0][static_cast<size_t>(p)] == 1);
  }

  // [0.6, 0.4]: below the threshold, masked out
  TeacherState unsure = make_teacher(store, 0.99);
  unsure.params.at("head.b")[0] = std::log(0.6);
  unsure.params.at("head.b")[1] = std::log(0.4);
  PseudoLabelBatch pu = make_pseudo_labels(net, unsure, images, 0.9);
  for (int64_t p = 0; p < 64; ++p) {
    CHECK(pu.labels[0].ids[static_cast<size_t>(p)] == LabelMap::kIgnore);
    CHECK(pu.mask[0][static_cast<size_t>(p)] == 0);
  }

  // uniform teacher: tau=1 masks everything (1/C < 1), tau->0+ keeps all
  TeacherState uniform = make_teacher(store, 0.99);
  PseudoLabelBatch all_masked = make_pseudo_labels(net, uniform, images, 1.0);
  PseudoLabelBatch all_kept = make_pseudo_labels(net, uniform, images, 1e-9);
  for (int64_t p = 0; p < 64; ++p) {
    CHECK(all_masked.mask[0][static_cast<size_t>(p)] == 0);
    CHECK(all_kept.mask[0][static_cast<size_t>(p)] == 1);
  }

  CHECK_THROWS_AS(make_pseudo_labels(net, uniform, images, 0.0), Error);
}

TEST_CASE("pseudo-label masks are monotone in tau") {
  SegNetConfig cfg = tiny_cfg(4);
  SegNet net(cfg);
  ParamStore store;
  Rng rng(5);
  net.init_params(store, rng);
  TeacherState teacher = make_teacher(store, 0.99);
  Rng drng(6);
  Tensor images = random_image({2, 3, 8, 8}, drng);
  PseudoLabelBatch low = make_pseudo_labels(net, teacher, images, 0.3);
  PseudoLabelBatch high = make_pseudo_labels(net, teacher, images, 0.6);
  for (size_t n = 0; n < low.mask.size(); ++n)
    for (size_t p = 0; p < low.mask[n].size(); ++p)
      if (high.mask[n][p] == 1) CHECK(low.mask[n][p] == 1);  // raising tau never unmasks
}

TEST_CASE("kl divergence") {
  DiscreteDist p{{1.0, 0.0}};
  DiscreteDist q{{0.5, 0.5}};
  p.validate();
  q.validate();
  CHECK(kl_divergence(p, p) == 0.0);
  CHECK(kl_divergence(q, q) == 0.0);
  CHECK(kl_divergence(p, q) == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  DiscreteDist zeroq{{0.0, 1.0}};
  CHECK_THROWS_AS(kl_divergence(p, zeroq), Error);
  try {
    kl_divergence(p, zeroq);
  } catch (const Error& e) {
    CHECK(e.kind() == Err::InfiniteKL);
  }

  // bound sweep: -Σ p ln q - KL = H(p) >= 0
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    int support = 2 + static_cast<int>(rng.below(15));
    DiscreteDist a{checks::random_simplex(support, rng)};
    DiscreteDist b{checks::random_simplex(support, rng)};
    double kl = kl_divergence(a, b);
    CHECK(kl >= -1e-12);
    CHECK(std::fabs(kl - checks::kl_direct(a.p, b.p)) <= 1e-12);
    double ce = checks::cross_entropy_direct(a.p, b.p);
    double h = checks::entropy_direct(a.p);
    CHECK(ce - kl >= -1e-12);                 // upper bound holds
    CHECK(std::fabs((ce - kl) - h) <= 1e-9);  // and the gap is exactly H(p)
  }
}

TEST_CASE("bml_loss ranks plausible maps above noise and freezes the flow") {
  FlowModel flow = trained_tiny_flow(4, 8, 8);
  flow.params().set_trainable(false);

  // structured map close to the training distribution
  LabelMap lm(8, 8);
  for (int64_t y = 0; y < 8; ++y)
    for (int64_t x = 0; x < 8; ++x) lm.at(y, x) = static_cast<uint8_t>((y * 4) / 8);
  Rng rng(8);
  Tensor plausible = dequantize(lm, 4, 0.05, 0.02, rng);
  Tensor batch_p({1, 4, 8, 8}, plausible.vec());

  Rng nrng(9);
  Tensor noise({1, 4, 8, 8});
  for (int64_t p = 0; p < 64; ++p) {
    auto simplex = checks::random_simplex(4, nrng);
    for (int64_t c = 0; c < 4; ++c) noise[c * 64 + p] = simplex[static_cast<size_t>(c)];
  }

  double bml_plausible = bml_loss(constant(batch_p), flow)->value[0];
  double bml_noise = bml_loss(constant(noise), flow)->value[0];
  CHECK(bml_plausible < bml_noise);

  // mean semantics
  Tensor batch_pp({2, 4, 8, 8});
  std::copy(plausible.data(), plausible.data() + plausible.numel(), batch_pp.data());
  std::copy(plausible.data(), plausible.data() + plausible.numel(), batch_pp.data() + plausible.numel());
  CHECK(bml_loss(constant(batch_pp), flow)->value[0] == doctest::Approx(bml_plausible).epsilon(1e-10));

  // gradient reaches the probs input but never the flow parameters
  auto before = flow.params().snapshot_values();
  NodePtr probs = leaf(Tensor(batch_p.shape(), batch_p.vec()));
  NodePtr loss = bml_loss(probs, flow);
  backward(loss);
  double grad_norm = 0.0;
  for (int64_t i = 0; i < probs->grad.numel(); ++i) grad_norm += std::fabs(probs->grad[i]);
  CHECK(grad_norm > 0.0);
  for (const auto& name : flow.params().names()) {
    const NodePtr p = flow.params().get(name);
    const Tensor& now = p->value;
    const Tensor& was = before.at(name);
    for (int64_t i = 0; i < now.numel(); ++i) CHECK(now[i] == was[i]);
    for (int64_t i = 0; i < p->grad.numel(); ++i) CHECK(p->grad[i] == 0.0);
  }
}

TEST_CASE("adaptation objective") {
  NodePtr ce = constant(Tensor::scalar(2.0));
  NodePtr bml = constant(Tensor::scalar(10.0));
  CHECK(adaptation_objective(ce, bml, 0.0)->value[0] == 2.0);
  CHECK(adaptation_objective(ce, bml, 0.005)->value[0] == doctest::Approx(2.05).epsilon(1e-15));
  CHECK_THROWS_AS(adaptation_objective(ce, bml, -0.1), Error);

  // linearity in lambda
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    double l1 = rng.uniform(0, 2), l2 = rng.uniform(0, 2);
    double o1 = adaptation_objective(ce, bml, l1)->value[0];
    double o2 = adaptation_objective(ce, bml, l2)->value[0];
    double o12 = adaptation_objective(ce, bml, l1 + l2)->value[0];
    CHECK(std::fabs(o1 + o2 - ce->value[0] - o12) <= 1e-12);
  }
}

TEST_CASE("run_adapt_stage end to end") {
  DomainSpec src;
  src.name = "source";
  src.palette = DomainSpec::default_palette();
  DomainSpec t1 = src;
  t1.name = "target_1";
  t1.hue_rotation = 25.0;
  t1.noise_sigma = 0.02;
  SceneSpec scene;
  scene.h = 16;
  scene.w = 16;

  auto [strain, sval] = generate_domain(src, scene, 16, 4, 21);
  auto [ttrain, tval] = generate_domain(t1, scene, 16, 4, 22);

  auto build_vault = [&] {
    DataVault v;
    v.add_dataset(strain);
    v.add_dataset(sval);
    v.add_dataset(ttrain);
    v.add_dataset(tval);
    return v;
  };

  SegNetConfig scfg;
  scfg.n_classes = kNumClasses;
  scfg.widths = {8, 12};
  scfg.epochs = 6;
  scfg.batch = 8;
  scfg.lr = 0.08;
  SegNet net(scfg);

  DataVault vault = build_vault();
  Rng rng(23);
  ParamStore theta = train_source(vault, "source", net, rng);

  FlowConfig fcfg;
  fcfg.scales = 2;
  fcfg.blocks_per_scale = 2;
  fcfg.hidden_channels = 8;
  fcfg.epochs = 2;
  fcfg.batch = 8;
  fcfg.lr = 1e-4;
  Rng frng(24);
  FlowModel flow = train_flow(vault, "source", kNumClasses, 16, 16, fcfg, frng);
  flow.params().set_trainable(false);
  auto flow_before = flow.params().snapshot_values();

  AdaptConfig acfg;
  acfg.epochs_per_stage = 2;
  acfg.batch = 8;
  acfg.lr = 0.02;
  acfg.tau = 0.5;

  auto run_stage = [&](uint64_t seed, double lambda, double alpha) {
    DataVault v = build_vault();
    v.set_stage(1);
    ParamStore student;
    Rng irng(0);
    net.init_params(student, irng);
    student.load_values(theta.snapshot_values());
    TeacherState teacher = make_teacher(student, alpha);
    AdaptConfig cfg = acfg;
    cfg.lambda = lambda;
    cfg.alpha = alpha;
    Rng arng(seed);
    run_adapt_stage(student, teacher, &flow, net, v, "target_1", cfg, arng);
    return std::make_pair(student.snapshot_values(), teacher);
  };

  // wrong stage: the vault denies the read and the error propagates
  {
    DataVault v = build_vault();  // stage 0
    ParamStore student;
    Rng irng(0);
    net.init_params(student, irng);
    student.load_values(theta.snapshot_values());
    TeacherState teacher = make_teacher(student, 0.99);
    Rng arng(1);
    CHECK_THROWS_AS(run_adapt_stage(student, teacher, &flow, net, v, "target_1", acfg, arng), Error);
  }

  auto [adapted1, teacher1] = run_stage(77, 0.005, 0.99);
  auto [adapted2, teacher2] = run_stage(77, 0.005, 0.99);

  // determinism: identical seeds give bit-identical students
  for (const auto& [name, a] : adapted1) {
    const Tensor& b = adapted2.at(name);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  }

  // the frozen flow is bitwise unchanged
  for (const auto& [name, was] : flow_before) {
    const Tensor& now = flow.params().get(name)->value;
    for (int64_t i = 0; i < now.numel(); ++i) CHECK(now[i] == was[i]);
  }

  // the student moved away from theta*
  double moved = 0.0;
  for (const auto& [name, a] : adapted1) {
    const Tensor& t0 = theta.get(name)->value;
    for (int64_t i = 0; i < a.numel(); ++i) moved += std::fabs(a[i] - t0[i]);
  }
  CHECK(moved > 0.0);

  // alpha = 1: the teacher never moves (pure frozen-teacher self-training)
  auto [adapted3, teacher3] = run_stage(78, 0.0, 1.0);
  for (const auto& [name, t0] : theta.snapshot_values()) {
    const Tensor& tv = teacher3.params.at(name);
    for (int64_t i = 0; i < tv.numel(); ++i) CHECK(tv[i] == t0[i]);
  }
}
