#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "condacl/checks.hpp"
#include "condacl/graph.hpp"
#include "condacl/param_store.hpp"
#include "condacl/rng.hpp"

using namespace condacl;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Scalar readout with non-uniform weights so gradient checks see distinct
// output sensitivities.
NodePtr weighted_sum(const NodePtr& x, Rng& rng) {
  Tensor w(x->value.shape());
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(0.5, 1.5);
  return sum_all(mul(x, constant(std::move(w))));
}

}  // namespace

TEST_CASE("make_param zeros, determinism, duplicate") {
  ParamStore store;
  Rng rng(7);
  NodePtr b = store.make_param("b", {3}, Init::zeros(), rng);
  CHECK(b->value[0] == 0.0);
  CHECK(b->value[1] == 0.0);
  CHECK(b->value[2] == 0.0);

  ParamStore s1, s2;
  Rng r1(7), r2(7);
  NodePtr w1 = s1.make_param("w", {2, 2}, Init::uniform(-1, 1), r1);
  NodePtr w2 = s2.make_param("w", {2, 2}, Init::uniform(-1, 1), r2);
  for (int64_t i = 0; i < 4; ++i) CHECK(w1->value[i] == w2->value[i]);

  CHECK_THROWS_AS(s1.make_param("w", {2, 2}, Init::zeros(), r1), Error);
  try {
    s1.make_param("w", {1}, Init::zeros(), r1);
  } catch (const Error& e) {
    CHECK(e.kind() == Err::DuplicateParam);
  }
  CHECK_THROWS_AS(s1.make_param("z", {0}, Init::zeros(), r1), Error);
}

TEST_CASE("elementwise arithmetic") {
  NodePtr a = leaf(Tensor({2}, {1, 2}));
  NodePtr b = leaf(Tensor({2}, {3, 4}));
  NodePtr c = add(a, b);
  CHECK(c->value[0] == 4.0);
  CHECK(c->value[1] == 6.0);

  CHECK_THROWS_AS(add(leaf(Tensor({2})), leaf(Tensor({3}))), Error);

  // scalar broadcast
  NodePtr s = add(a, constant(Tensor::scalar(10.0)));
  CHECK(s->value[1] == 12.0);
}

TEST_CASE("matmul identity and shapes") {
  Rng rng(3);
  Tensor a = random_tensor({2, 2}, rng);
  NodePtr an = leaf(a);
  NodePtr eye = constant(Tensor({2, 2}, {1, 0, 0, 1}));
  NodePtr out = matmul(eye, an);
  for (int64_t i = 0; i < 4; ++i) CHECK(out->value[i] == doctest::Approx(a[i]).epsilon(1e-15));
  CHECK_THROWS_AS(matmul(leaf(Tensor({2, 3})), leaf(Tensor({2, 3}))), Error);
}

TEST_CASE("gradient of sum(mul(a,b)) wrt a equals b") {
  Rng rng(11);
  NodePtr a = leaf(random_tensor({3, 4}, rng));
  NodePtr b = leaf(random_tensor({3, 4}, rng));
  NodePtr loss = sum_all(mul(a, b));
  backward(loss);
  for (int64_t i = 0; i < 12; ++i) CHECK(a->grad[i] == doctest::Approx(b->value[i]).epsilon(1e-12));

  Rng coord_rng(12);
  auto rep = checks::gradient_check([&] { return sum_all(mul(a, b)); }, a, 12, coord_rng);
  CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("reductions") {
  NodePtr v = leaf(Tensor({3}, {1, 2, 3}));
  CHECK(sum_all(v)->value[0] == 6.0);
  CHECK(mean_all(v)->value[0] == 2.0);

  NodePtr two = leaf(Tensor({2}, {0, 0}));
  CHECK(logsumexp(two, 0)->value[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK_THROWS_AS(logsumexp(two, 1), Error);

  // mean gradient = 1/N broadcast
  NodePtr m = mean_all(v);
  backward(m);
  for (int64_t i = 0; i < 3; ++i) CHECK(v->grad[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Rng rng(5);
  NodePtr x = leaf(random_tensor({2, 3, 2}, rng));
  Rng coord_rng(6);
  NodePtr w = constant(random_tensor({2, 2}, rng, 0.5, 1.5));
  auto rebuild = [&] { return sum_all(mul(logsumexp(x, 1), w)); };
  auto rep = checks::gradient_check(rebuild, x, 10, coord_rng);
  CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("concat slice reshape round trip and grads") {
  Rng rng(17);
  NodePtr a = leaf(random_tensor({2, 3, 2, 2}, rng));
  NodePtr b = leaf(random_tensor({2, 1, 2, 2}, rng));
  NodePtr cat = concat(a, b, 1);
  CHECK(cat->value.dim(1) == 4);
  NodePtr back = slice(cat, 1, 0, 3);
  for (int64_t i = 0; i < a->value.numel(); ++i) CHECK(back->value[i] == a->value[i]);

  NodePtr w = constant(random_tensor({2, 4, 2, 2}, rng, 0.5, 1.5));
  Rng coord_rng(18);
  auto rep = checks::gradient_check([&] { return sum_all(mul(concat(a, b, 1), w)); }, a, 8, coord_rng);
  CHECK(rep.max_rel_err <= 1e-6);
  rep = checks::gradient_check([&] { return sum_all(mul(concat(a, b, 1), w)); }, b, 8, coord_rng);
  CHECK(rep.max_rel_err <= 1e-6);

  NodePtr r = reshape(a, {6, 4});
  CHECK(r->value.numel() == a->value.numel());
  CHECK_THROWS_AS(reshape(a, {5, 4}), Error);
}

TEST_CASE("conv2d 1x1 equals per-pixel channel matmul") {
  Rng rng(23);
  Tensor x = random_tensor({1, 3, 4, 4}, rng);
  Tensor w = random_tensor({2, 3, 1, 1}, rng);
  NodePtr out = conv2d(leaf(x), leaf(w), nullptr, 1, 0);
  for (int64_t h = 0; h < 4; ++h)
    for (int64_t ww = 0; ww < 4; ++ww)
      for (int64_t o = 0; o < 2; ++o) {
        double expect = 0.0;
        for (int64_t c = 0; c < 3; ++c) expect += w.at4(o, c, 0, 0) * x.at4(0, c, h, ww);
        CHECK(std::fabs(out->value.at4(0, o, h, ww) - expect) <= 1e-12);
      }
}

TEST_CASE("conv2d identity kernel") {
  Rng rng(29);
  Tensor x = random_tensor({1, 1, 5, 5}, rng);
  Tensor w({1, 1, 3, 3});
  w.at4(0, 0, 1, 1) = 1.0;
  NodePtr out = conv2d(leaf(x), leaf(w), nullptr, 1, 1);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(out->value[i] == doctest::Approx(x[i]).epsilon(1e-15));
}

TEST_CASE("conv2d gradient check") {
  Rng rng(31);
  NodePtr x = leaf(random_tensor({2, 2, 5, 5}, rng));
  NodePtr w = leaf(random_tensor({3, 2, 3, 3}, rng));
  NodePtr b = leaf(random_tensor({3}, rng));
  NodePtr readout = constant(random_tensor({2, 3, 5, 5}, rng, 0.5, 1.5));
  auto rebuild = [&] { return sum_all(mul(conv2d(x, w, b, 1, 1), readout)); };
  Rng coord_rng(32);
  CHECK(checks::gradient_check(rebuild, x, 20, coord_rng).max_rel_err <= 1e-6);
  CHECK(checks::gradient_check(rebuild, w, 20, coord_rng).max_rel_err <= 1e-6);
  CHECK(checks::gradient_check(rebuild, b, 3, coord_rng).max_rel_err <= 1e-6);

  CHECK_THROWS_AS(conv2d(x, leaf(Tensor({3, 2, 2, 2})), nullptr, 1, 0), Error);  // even kernel
  CHECK_THROWS_AS(conv2d(x, w, b, 3, 0), Error);                                 // (5-3) % 3 != 0
}

TEST_CASE("resample ops") {
  NodePtr ones = leaf(Tensor({1, 1, 2, 2}, {1, 1, 1, 1}));
  NodePtr pooled = avgpool2(ones);
  CHECK(pooled->value.numel() == 1);
  CHECK(pooled->value[0] == 1.0);

  Rng rng(37);
  NodePtr x = leaf(random_tensor({1, 2, 3, 3}, rng));
  NodePtr round = avgpool2(nearest_upsample2(x));
  for (int64_t i = 0; i < x->value.numel(); ++i)
    CHECK(round->value[i] == doctest::Approx(x->value[i]).epsilon(1e-15));

  CHECK_THROWS_AS(avgpool2(leaf(Tensor({1, 1, 3, 3}))), Error);

  NodePtr g = leaf(random_tensor({1, 1, 4, 4}, rng));
  NodePtr w = constant(random_tensor({1, 1, 2, 2}, rng, 0.5, 1.5));
  Rng coord_rng(38);
  CHECK(checks::gradient_check([&] { return sum_all(mul(avgpool2(g), w)); }, g, 10, coord_rng).max_rel_err <=
        1e-6);
  NodePtr w2 = constant(random_tensor({1, 1, 8, 8}, rng, 0.5, 1.5));
  CHECK(checks::gradient_check([&] { return sum_all(mul(nearest_upsample2(g), w2)); }, g, 10, coord_rng)
            .max_rel_err <= 1e-6);
}

TEST_CASE("activations") {
  NodePtr a = leaf(Tensor({2}, {-1, 2}));
  NodePtr r = relu(a);
  CHECK(r->value[0] == 0.0);
  CHECK(r->value[1] == 2.0);

  NodePtr z = leaf(Tensor::scalar(0.0));
  NodePtr t = tanh_op(z);
  CHECK(t->value[0] == 0.0);
  backward(t);
  CHECK(z->grad[0] == 1.0);

  CHECK_THROWS_AS(log_op(leaf(Tensor({2}, {1.0, -0.5}))), Error);

  Rng rng(41);
  NodePtr x = leaf(random_tensor({3, 3}, rng, 0.2, 2.0));  // away from kinks and log domain edge
  NodePtr w = constant(random_tensor({3, 3}, rng, 0.5, 1.5));
  Rng coord_rng(42);
  std::vector<std::function<NodePtr(const NodePtr&)>> ops = {
      [](const NodePtr& n) { return leaky_relu(n); },
      [](const NodePtr& n) { return sigmoid(n); },
      [](const NodePtr& n) { return tanh_op(n); },
      [](const NodePtr& n) { return exp_op(n); },
      [](const NodePtr& n) { return log_op(n); },
  };
  for (const auto& op : ops) {
    auto rebuild = [&] { return sum_all(mul(op(x), w)); };
    CHECK(checks::gradient_check(rebuild, x, 9, coord_rng).max_rel_err <= 1e-6);
  }
  NodePtr neg = leaf(random_tensor({3, 3}, rng, -2.0, -0.2));
  auto rebuild = [&] { return sum_all(mul(leaky_relu(neg), w)); };
  CHECK(checks::gradient_check(rebuild, neg, 9, coord_rng).max_rel_err <= 1e-6);
}

TEST_CASE("softmax_channels") {
  NodePtr flat = leaf(Tensor({1, 4, 2, 2}));
  NodePtr p = softmax_channels(flat);
  for (int64_t i = 0; i < p->value.numel(); ++i) CHECK(p->value[i] == doctest::Approx(0.25).epsilon(1e-15));

  Tensor l({1, 2, 1, 1}, {std::log(1.0), std::log(3.0)});
  NodePtr q = softmax_channels(leaf(l));
  CHECK(q->value[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(q->value[1] == doctest::Approx(0.75).epsilon(1e-12));

  // simplex property on random logits
  Rng rng(43);
  NodePtr logits = leaf(random_tensor({2, 5, 3, 3}, rng, -4, 4));
  NodePtr sm = softmax_channels(logits);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t px = 0; px < 9; ++px) {
      double s = 0.0;
      for (int64_t c = 0; c < 5; ++c) {
        double v = sm->value[(n * 5 + c) * 9 + px];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        s += v;
      }
      CHECK(std::fabs(s - 1.0) <= 1e-12);
    }

  NodePtr small = leaf(random_tensor({1, 3, 1, 1}, rng));
  NodePtr w = constant(random_tensor({1, 3, 1, 1}, rng, 0.5, 1.5));
  Rng coord_rng(44);
  auto rebuild = [&] { return sum_all(mul(softmax_channels(small), w)); };
  CHECK(checks::gradient_check(rebuild, small, 3, coord_rng).max_rel_err <= 1e-6);
}

TEST_CASE("backward basics") {
  ParamStore store;
  Rng rng(47);
  NodePtr w = store.make_param("w", {3}, Init::uniform(-1, 1), rng);
  backward(sum_all(w));
  for (int64_t i = 0; i < 3; ++i) CHECK(w->grad[i] == 1.0);

  store.zero_grads();
  backward(scalar_mul(sum_all(w), 0.0));
  for (int64_t i = 0; i < 3; ++i) CHECK(w->grad[i] == 0.0);

  // accumulation across calls without zeroing
  backward(sum_all(w));
  backward(sum_all(w));
  for (int64_t i = 0; i < 3; ++i) CHECK(w->grad[i] == 2.0);

  CHECK_THROWS_AS(backward(add(w, w)), Error);
}

TEST_CASE("three layer conv net end-to-end gradient check") {
  ParamStore store;
  Rng rng(53);
  NodePtr input = leaf(random_tensor({1, 2, 8, 8}, rng));
  NodePtr w1 = store.make_param("w1", {3, 2, 3, 3}, Init::kaiming(2 * 9), rng);
  NodePtr b1 = store.make_param("b1", {3}, Init::uniform(-0.1, 0.1), rng);
  NodePtr w2 = store.make_param("w2", {3, 3, 3, 3}, Init::kaiming(3 * 9), rng);
  NodePtr b2 = store.make_param("b2", {3}, Init::uniform(-0.1, 0.1), rng);
  NodePtr w3 = store.make_param("w3", {2, 3, 1, 1}, Init::kaiming(3), rng);
  NodePtr readout = constant(random_tensor({1, 2, 8, 8}, rng, 0.5, 1.5));

  auto rebuild = [&] {
    NodePtr h1 = leaky_relu(conv2d(input, w1, b1, 1, 1));
    NodePtr h2 = leaky_relu(conv2d(avgpool2(h1), w2, b2, 1, 1));
    NodePtr h3 = conv2d(nearest_upsample2(h2), w3, nullptr, 1, 0);
    return sum_all(mul(h3, readout));
  };
  Rng coord_rng(54);
  for (const auto& p : {w1, b1, w2, b2, w3, input}) {
    store.zero_grads();
    CHECK(checks::gradient_check(rebuild, p, 20, coord_rng).max_rel_err <= 1e-6);
  }
}

TEST_CASE("sgd_step") {
  ParamStore store;
  Rng rng(59);
  NodePtr w = store.make_param("w", {2}, Init::uniform(-1, 1), rng);
  Tensor before = w->value;
  backward(sum_all(w));  // grad = 1
  store.sgd_step(1.0, 0.0);
  CHECK(w->value[0] == doctest::Approx(before[0] - 1.0).epsilon(1e-15));
  CHECK(w->grad[0] == 0.0);  // grads zeroed by the step

  // two steps with momentum 0.9 on constant grad g: total decrement lr*(g + 1.9 g)
  ParamStore s2;
  NodePtr v = s2.make_param("v", {1}, Init::zeros(), rng);
  double lr = 0.1, g = 2.0;
  for (int step = 0; step < 2; ++step) {
    v->ensure_grad();
    v->grad[0] = g;
    s2.sgd_step(lr, 0.9);
  }
  CHECK(v->value[0] == doctest::Approx(-lr * (g + 1.9 * g)).epsilon(1e-12));

  CHECK_THROWS_AS(store.sgd_step(-1.0, 0.9), Error);
}

TEST_CASE("determinism: identical seeds and call sequences") {
  auto run = [] {
    ParamStore store;
    Rng rng(1234);
    NodePtr x = leaf(random_tensor({1, 2, 4, 4}, rng));
    NodePtr w = store.make_param("w", {2, 2, 3, 3}, Init::kaiming(18), rng);
    NodePtr loss = mean_all(conv2d(x, w, nullptr, 1, 1));
    backward(loss);
    store.sgd_step(0.01, 0.9);
    return w->value;
  };
  Tensor a = run();
  Tensor b = run();
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("splitmix64 known stream and child independence") {
  Rng r(0);
  CHECK(r.next_u64() == 0xE220A8397B1DCDAFull);
  CHECK(r.next_u64() == 0x6E789E6AA1B965F4ull);

  Rng parent(99);
  Rng c0 = parent.child(0);
  parent.next_u64();
  Rng c0_again = parent.child(0);
  CHECK(c0.next_u64() == c0_again.next_u64());
  Rng c1 = parent.child(1);
  CHECK(c0.next_u64() != c1.next_u64());
}
