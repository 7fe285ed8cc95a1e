#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "condacl/checks.hpp"
#include "condacl/flow.hpp"

using namespace condacl;

namespace {

Tensor random_map(std::vector<int64_t> shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

void set_identity_mixes(FlowModel& model) {
  for (auto& scale : model.scales())
    for (auto& mix : scale.mixes) {
      Tensor& m = mix.m->value;
      int64_t n = m.dim(0);
      std::fill(m.vec().begin(), m.vec().end(), 0.0);
      for (int64_t i = 0; i < n; ++i) m.at2(i, i) = 1.0;
    }
}

void randomize_params(FlowModel& model, Rng& rng, double scale = 0.3) {
  for (const auto& name : model.params().names()) {
    NodePtr p = model.params().get(name);
    if (name.find(".mix") != std::string::npos) continue;  // keep mixes as rotations
    for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] = rng.uniform(-scale, scale);
  }
}

FlowConfig small_cfg(int scales = 2, int blocks = 2, int hidden = 8) {
  FlowConfig cfg;
  cfg.scales = scales;
  cfg.blocks_per_scale = blocks;
  cfg.hidden_channels = hidden;
  return cfg;
}

std::vector<double> flatten_parts(const LatentSample& z) {
  std::vector<double> out;
  for (const auto& p : z.parts) out.insert(out.end(), p.vec().begin(), p.vec().end());
  return out;
}

}  // namespace

TEST_CASE("identity-initialized model is a rearrangement with logdet 0") {
  Rng rng(1);
  FlowModel model = FlowModel::build(small_cfg(1, 2, 4), 2, 4, 4, rng);
  set_identity_mixes(model);
  Rng data_rng(2);
  Tensor y = random_map({2, 4, 4}, data_rng);
  auto [z, logdet] = model.forward(y);
  CHECK(logdet == doctest::Approx(0.0).epsilon(1e-14));

  // single scale, identity blocks: z is exactly squeeze2(y)
  Tensor y4({1, 2, 4, 4}, y.vec());
  Tensor expect = squeeze2(constant(y4))->value;
  REQUIRE(z.parts.size() == 1);
  for (int64_t i = 0; i < expect.numel(); ++i) CHECK(z.parts[0][i] == expect[i]);

  // two-scale variant still conserves values as a permutation
  Rng rng2(3);
  FlowModel deep = FlowModel::build(small_cfg(2, 2, 4), 2, 4, 4, rng2);
  set_identity_mixes(deep);
  auto [z2, logdet2] = deep.forward(y);
  CHECK(logdet2 == doctest::Approx(0.0).epsilon(1e-14));
  std::vector<double> a = y.vec(), b = flatten_parts(z2);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("channel mix with 2I has logdet 2 ln 2 per pixel") {
  ChannelMix mix;
  mix.m = leaf(Tensor({2, 2}, {2, 0, 0, 2}));
  NodePtr x = constant(Tensor({1, 2, 1, 1}, {0.3, 0.7}));
  NodePtr ld = constant(Tensor::scalar(0.0));
  NodePtr out = mix.forward(x, ld);
  CHECK(out->value[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(out->value[1] == doctest::Approx(1.4).epsilon(1e-15));
  CHECK(ld->value[0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("singular channel mix is rejected") {
  ChannelMix mix;
  mix.m = leaf(Tensor({2, 2}, {1, 2, 2, 4}));
  NodePtr x = constant(Tensor({1, 2, 1, 1}, {0.3, 0.7}));
  NodePtr ld = constant(Tensor::scalar(0.0));
  CHECK_THROWS_AS(mix.forward(x, ld), Error);
  try {
    mix.forward(x, ld);
  } catch (const Error& e) {
    CHECK(e.kind() == Err::SingularMix);
  }
}

TEST_CASE("accumulated logdet matches the finite-difference Jacobian") {
  Rng rng(5);
  FlowModel model = FlowModel::build(small_cfg(2, 2, 6), 2, 4, 4, rng);
  Rng prng(6);
  randomize_params(model, prng);

  Rng drng(7);
  Tensor y = random_map({2, 4, 4}, drng);
  auto [z0, logdet] = model.forward(y);

  auto fn = [&](const std::vector<double>& flat) {
    Tensor yy({2, 4, 4}, flat);
    auto [z, ld] = model.forward(yy);
    return flatten_parts(z);
  };
  std::vector<double> jac = checks::fd_jacobian(fn, y.vec());
  double oracle = checks::log_abs_det(jac, 32);
  CHECK(std::fabs(logdet - oracle) / std::max(1.0, std::fabs(oracle)) <= 1e-5);
}

TEST_CASE("checkerboard coupling variant is also exact") {
  Rng rng(8);
  FlowModel model = FlowModel::build_with_masks(small_cfg(1, 2, 6), 2, 4, 4, MaskKind::Checkerboard, rng);
  Rng prng(9);
  randomize_params(model, prng);
  Rng drng(10);
  Tensor y = random_map({2, 4, 4}, drng);
  auto [z, logdet] = model.forward(y);
  auto fn = [&](const std::vector<double>& flat) {
    Tensor yy({2, 4, 4}, flat);
    auto [zz, ld] = model.forward(yy);
    return flatten_parts(zz);
  };
  std::vector<double> jac = checks::fd_jacobian(fn, y.vec());
  double oracle = checks::log_abs_det(jac, 32);
  CHECK(std::fabs(logdet - oracle) / std::max(1.0, std::fabs(oracle)) <= 1e-5);

  double inv_ld = 0.0;
  Tensor back = model.inverse(z, &inv_ld);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::fabs(back[i] - y[i]) <= 1e-9);
  CHECK(std::fabs(logdet + inv_ld) <= 1e-9);
}

TEST_CASE("bijectivity on random inputs") {
  Rng rng(11);
  FlowModel model = FlowModel::build(small_cfg(2, 3, 8), 7, 8, 8, rng);
  Rng prng(12);
  randomize_params(model, prng);
  Rng drng(13);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor y = random_map({7, 8, 8}, drng);
    auto [z, logdet] = model.forward(y);
    CHECK(z.total_dims() == y.numel());
    double inv_ld = 0.0;
    Tensor back = model.inverse(z, &inv_ld);
    for (int64_t i = 0; i < y.numel(); ++i) worst = std::max(worst, std::fabs(back[i] - y[i]));
    CHECK(std::fabs(logdet + inv_ld) <= 1e-9);
  }
  CHECK(worst <= 1e-8);
}

TEST_CASE("pure linear flow matches the analytic multivariate normal") {
  Rng rng(14);
  FlowModel model = FlowModel::build(small_cfg(1, 1, 4), 1, 2, 2, rng);
  // couplings are identity at init; overwrite the single mix with a random
  // invertible matrix so the whole model is exactly z = M y.
  Rng mrng(15);
  Tensor m({4, 4});
  for (int64_t i = 0; i < 16; ++i) m[i] = mrng.uniform(-1.0, 1.0);
  m.at2(0, 0) += 2.0;
  m.at2(1, 1) += 2.0;
  m.at2(2, 2) -= 2.0;
  m.at2(3, 3) += 2.0;
  model.scales()[0].mixes[0].m->value = m;

  Rng drng(16);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor y = random_map({1, 2, 2}, drng, -1.5, 1.5);
    double lp = model.log_prob(y);
    double expect = checks::linear_gaussian_logpdf(m.vec(), 4, y.vec());
    CHECK(std::fabs(lp - expect) <= 1e-8);
  }

  // identity model at y = 0 gives d * (-0.5 ln 2pi)
  Rng rng2(17);
  FlowModel ident = FlowModel::build(small_cfg(1, 1, 4), 1, 2, 2, rng2);
  set_identity_mixes(ident);
  double lp0 = ident.log_prob(Tensor({1, 2, 2}));
  CHECK(lp0 == doctest::Approx(-0.5 * 4.0 * std::log(2.0 * 3.14159265358979323846)).epsilon(1e-12));
}

TEST_CASE("log_prob gradient wrt input matches finite differences") {
  Rng rng(18);
  FlowModel model = FlowModel::build(small_cfg(2, 2, 6), 2, 4, 4, rng);
  Rng prng(19);
  randomize_params(model, prng);
  Rng drng(20);
  NodePtr y = leaf(random_map({1, 2, 4, 4}, drng));
  auto rebuild = [&] { return model.log_prob_sum_node(y); };
  Rng coord_rng(21);
  auto rep = checks::gradient_check(rebuild, y, 20, coord_rng);
  CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("dequantize") {
  LabelMap labels(1, 1);
  labels.at(0, 0) = 1;
  Rng rng(22);
  Tensor t = dequantize(labels, 3, 0.0, 0.0, rng);
  CHECK(t[0] == 0.0);
  CHECK(t[1] == 1.0);
  CHECK(t[2] == 0.0);

  labels.at(0, 0) = 0;
  Tensor s = dequantize(labels, 2, 0.05, 0.0, rng);
  CHECK(s[0] == doctest::Approx(0.975).epsilon(1e-12));
  CHECK(s[1] == doctest::Approx(0.025).epsilon(1e-12));

  // ignore pixels become uniform
  labels.at(0, 0) = LabelMap::kIgnore;
  Tensor u = dequantize(labels, 4, 0.05, 0.0, rng);
  for (int64_t i = 0; i < 4; ++i) CHECK(u[i] == doctest::Approx(0.25).epsilon(1e-12));

  // noise: same stream identical, different streams differ
  labels.at(0, 0) = 2;
  Rng a(7), b(7), c(8);
  Tensor ta = dequantize(labels, 3, 0.0, 0.1, a);
  Tensor tb = dequantize(labels, 3, 0.0, 0.1, b);
  Tensor tc = dequantize(labels, 3, 0.0, 0.1, c);
  bool differs = false;
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(ta[i] == tb[i]);
    differs = differs || ta[i] != tc[i];
  }
  CHECK(differs);

  labels.at(0, 0) = 9;
  CHECK_THROWS_AS(dequantize(labels, 3, 0.0, 0.0, rng), Error);
}

TEST_CASE("nll batch semantics") {
  Rng rng(23);
  FlowModel model = FlowModel::build(small_cfg(1, 2, 4), 2, 4, 4, rng);
  Rng prng(24);
  randomize_params(model, prng);
  Rng drng(25);
  Tensor y = random_map({2, 4, 4}, drng);
  double single = model.nll_batch({y});
  CHECK(single == doctest::Approx(-model.log_prob(y)).epsilon(1e-12));
  double twice = model.nll_batch({y, y});
  CHECK(twice == doctest::Approx(single).epsilon(1e-10));
  CHECK_THROWS_AS(model.nll_batch({}), Error);
}

TEST_CASE("nll on a fixed batch decreases during training") {
  Rng rng(26);
  FlowModel model = FlowModel::build(small_cfg(2, 2, 8), 4, 8, 8, rng);
  Rng drng(27);
  // structured fixed batch: smoothed one-hot stripes
  Tensor batch({4, 4, 8, 8});
  for (int64_t b = 0; b < 4; ++b) {
    LabelMap lm(8, 8);
    for (int64_t y = 0; y < 8; ++y)
      for (int64_t x = 0; x < 8; ++x) lm.at(y, x) = static_cast<uint8_t>((y / 2 + b) % 4);
    Tensor m = dequantize(lm, 4, 0.05, 0.02, drng);
    std::copy(m.data(), m.data() + m.numel(), batch.data() + b * m.numel());
  }
  int decreasing = 0;
  double prev = 0.0;
  for (int step = 0; step < 50; ++step) {
    NodePtr loss = model.nll_node(constant(batch));
    if (step > 0 && loss->value[0] < prev) ++decreasing;
    prev = loss->value[0];
    backward(loss);
    model.params().sgd_step(1e-4, 0.9);
  }
  double last = model.nll_node(constant(batch))->value[0];
  CHECK(decreasing > 25);
  CHECK(last < prev + 1e-9);
}

TEST_CASE("sampling is deterministic and self-consistent") {
  Rng rng(28);
  FlowModel model = FlowModel::build(small_cfg(2, 2, 6), 2, 8, 8, rng);
  Rng prng(29);
  randomize_params(model, prng);

  Rng s1(31), s2(31);
  auto a = model.sample(3, s1);
  auto b = model.sample(3, s2);
  for (size_t i = 0; i < a.size(); ++i)
    for (int64_t j = 0; j < a[i].numel(); ++j) CHECK(a[i][j] == b[i][j]);

  Rng s3(32);
  auto shapes = model.latent_shapes();
  for (int trial = 0; trial < 10; ++trial) {
    LatentSample z;
    double log_pi = 0.0;
    int64_t dims = 0;
    for (const auto& sh : shapes) {
      Tensor t(sh);
      for (int64_t j = 0; j < t.numel(); ++j) {
        t[j] = s3.normal();
        log_pi += -0.5 * t[j] * t[j];
      }
      dims += t.numel();
      z.parts.push_back(std::move(t));
    }
    log_pi += -0.5 * static_cast<double>(dims) * std::log(2.0 * 3.14159265358979323846);
    Tensor y = model.inverse(z);
    auto [z2, logdet] = model.forward(y);
    double lp_direct = model.log_prob(y);
    CHECK(std::fabs(lp_direct - (log_pi + logdet)) <= 1e-8);
  }
}

TEST_CASE("input_pool=2 models the pooled map") {
  Rng rng(33);
  FlowConfig cfg = small_cfg(1, 1, 4);
  cfg.input_pool = 2;
  FlowModel model = FlowModel::build(cfg, 2, 8, 8, rng);
  Rng drng(34);
  Tensor y = random_map({2, 8, 8}, drng);
  auto [z, logdet] = model.forward(y);
  CHECK(z.total_dims() == 2 * 4 * 4);
  Tensor pooled = avgpool2(constant(Tensor({1, 2, 8, 8}, y.vec())))->value;
  Tensor back = model.inverse(z);
  for (int64_t i = 0; i < back.numel(); ++i) CHECK(back[i] == doctest::Approx(pooled[i]).epsilon(1e-10));
}

TEST_CASE("persistence round trip") {
  Rng rng(35);
  FlowModel model = FlowModel::build(small_cfg(2, 2, 6), 2, 4, 4, rng);
  Rng prng(36);
  randomize_params(model, prng);
  Rng drng(37);
  Tensor y = random_map({2, 4, 4}, drng);
  double lp = model.log_prob(y);

  std::string path = "test_tmp_flow.cflw";
  model.save(path);
  FlowModel loaded = FlowModel::load(path);
  CHECK(loaded.log_prob(y) == lp);
  for (const auto& name : model.params().names()) {
    const Tensor& a = model.params().get(name)->value;
    const Tensor& b = loaded.params().get(name)->value;
    REQUIRE(a.numel() == b.numel());
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  }
  std::remove(path.c_str());
}
