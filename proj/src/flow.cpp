#include "condacl/flow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "condacl/datagen.hpp"
#include "condacl/linalg.hpp"
#include "condacl/serialize.hpp"

namespace condacl {

namespace flow_testing {
bool corrupt_inverse = false;
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

int64_t pow2(int n) { return int64_t{1} << n; }

NodePtr minus_half_sum_sq(const NodePtr& z) {
  NodePtr quad = scalar_mul(sum_all(mul(z, z)), -0.5);
  double norm = -0.5 * static_cast<double>(z->value.numel() / z->value.dim(0)) * kLog2Pi;
  // the constant is per sample; multiply by the batch extent
  return add(quad, constant(Tensor::scalar(norm * static_cast<double>(z->value.dim(0)))));
}

}  // namespace

void FlowConfig::validate(int n_classes) const {
  if (scales < 1) fail(Err::BadConfig, "flow.scales must be >= 1");
  if (blocks_per_scale < 1) fail(Err::BadConfig, "flow.blocks_per_scale must be >= 1");
  if (hidden_channels < 1) fail(Err::BadConfig, "flow.hidden_channels must be >= 1");
  if (dequant_delta < 0.0 || dequant_delta >= 0.5) fail(Err::BadConfig, "flow.dequant_delta must be in [0, 0.5)");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0 / static_cast<double>(n_classes))
    fail(Err::BadConfig, "flow.label_smoothing must be in [0, 1/C)");
  if (input_pool != 1 && input_pool != 2) fail(Err::BadConfig, "flow.input_pool must be 1 or 2");
  if (lr < 0) fail(Err::BadConfig, "flow.lr must be >= 0");
  if (epochs < 1) fail(Err::BadConfig, "flow.epochs must be >= 1");
  if (batch < 1) fail(Err::BadConfig, "flow.batch must be >= 1");
  if (train_on != "gt" && train_on != "source_predictions")
    fail(Err::BadConfig, "flow.train_on must be gt or source_predictions");
}

NodePtr squeeze2(const NodePtr& x) {
  const Tensor& xv = x->value;
  if (xv.rank() != 4) fail(Err::BadShape, "squeeze2: expects NCHW");
  int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H % 2 != 0 || W % 2 != 0) fail(Err::BadShape, "squeeze2: odd spatial extent");
  int64_t Ho = H / 2, Wo = W / 2;
  Tensor out({N, C * 4, Ho, Wo});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t di = 0; di < 2; ++di)
        for (int64_t dj = 0; dj < 2; ++dj)
          for (int64_t i = 0; i < Ho; ++i)
            for (int64_t j = 0; j < Wo; ++j)
              out.at4(n, c * 4 + di * 2 + dj, i, j) = xv.at4(n, c, 2 * i + di, 2 * j + dj);
  return make_op("squeeze2", std::move(out), {x}, [N, C, Ho, Wo](Node& nd) {
    Node& p = *nd.parents[0];
    p.ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t di = 0; di < 2; ++di)
          for (int64_t dj = 0; dj < 2; ++dj)
            for (int64_t i = 0; i < Ho; ++i)
              for (int64_t j = 0; j < Wo; ++j)
                p.grad.at4(n, c, 2 * i + di, 2 * j + dj) += nd.grad.at4(n, c * 4 + di * 2 + dj, i, j);
  });
}

Tensor unsqueeze2_value(const Tensor& xv) {
  if (xv.rank() != 4) fail(Err::BadShape, "unsqueeze2: expects NCHW");
  int64_t N = xv.dim(0), C4 = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (C4 % 4 != 0) fail(Err::BadShape, "unsqueeze2: channels not divisible by 4");
  int64_t C = C4 / 4;
  Tensor out({N, C, H * 2, W * 2});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t di = 0; di < 2; ++di)
        for (int64_t dj = 0; dj < 2; ++dj)
          for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j)
              out.at4(n, c, 2 * i + di, 2 * j + dj) = xv.at4(n, c * 4 + di * 2 + dj, i, j);
  return out;
}

NodePtr CouplingNet::apply(const NodePtr& x) const {
  return conv2d(relu(conv2d(x, w1, b1, 1, 1)), w2, b2, 1, 1);
}

namespace {

// Spatial checkerboard; parity selects which cell set is kept.
Tensor checker_mask(int64_t n, int64_t c, int64_t h, int64_t w, int parity) {
  Tensor m({n, c, h, w});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) m.at4(b, ch, i, j) = ((i + j) % 2 == parity) ? 1.0 : 0.0;
  return m;
}

}  // namespace

NodePtr Coupling::forward(const NodePtr& x, NodePtr& logdet_acc) const {
  if (mask == MaskKind::ChannelHalf) {
    int64_t C = x->value.dim(1);
    int64_t Ca = C / 2;
    NodePtr xa = slice(x, 1, 0, Ca);
    NodePtr xb = slice(x, 1, Ca, C - Ca);
    const NodePtr& cond = swap ? xb : xa;
    const NodePtr& trans = swap ? xa : xb;
    NodePtr s = tanh_op(scale_net.apply(cond));
    NodePtr t = shift_net.apply(cond);
    NodePtr out = add(mul(trans, exp_op(s)), t);
    logdet_acc = add(logdet_acc, sum_all(s));
    return swap ? concat(out, xb, 1) : concat(xa, out, 1);
  }
  // checkerboard
  const auto& sh = x->value.shape();
  NodePtr keep = constant(checker_mask(sh[0], sh[1], sh[2], sh[3], swap ? 1 : 0));
  NodePtr move = constant(checker_mask(sh[0], sh[1], sh[2], sh[3], swap ? 0 : 1));
  NodePtr xm = mul(x, keep);
  NodePtr s = mul(tanh_op(scale_net.apply(xm)), move);
  NodePtr t = mul(shift_net.apply(xm), move);
  NodePtr out = add(xm, mul(add(mul(x, exp_op(s)), t), move));
  logdet_acc = add(logdet_acc, sum_all(s));
  return out;
}

Tensor Coupling::inverse(const Tensor& y, double& logdet_acc) const {
  NodePtr yn = constant(y);
  if (mask == MaskKind::ChannelHalf) {
    int64_t C = y.dim(1);
    int64_t Ca = C / 2;
    NodePtr ya = slice(yn, 1, 0, Ca);
    NodePtr yb = slice(yn, 1, Ca, C - Ca);
    const NodePtr& cond = swap ? yb : ya;
    const NodePtr& trans = swap ? ya : yb;
    NodePtr s = tanh_op(scale_net.apply(cond));
    NodePtr t = shift_net.apply(cond);
    NodePtr orig = mul(sub(trans, t), exp_op(scalar_mul(s, -1.0)));
    logdet_acc -= sum_all(s)->value[0];
    NodePtr full = swap ? concat(orig, yb, 1) : concat(ya, orig, 1);
    return full->value;
  }
  const auto& sh = y.shape();
  NodePtr keep = constant(checker_mask(sh[0], sh[1], sh[2], sh[3], swap ? 1 : 0));
  NodePtr move = constant(checker_mask(sh[0], sh[1], sh[2], sh[3], swap ? 0 : 1));
  NodePtr ym = mul(yn, keep);
  NodePtr s = mul(tanh_op(scale_net.apply(ym)), move);
  NodePtr t = shift_net.apply(ym);
  NodePtr orig = mul(mul(sub(yn, t), exp_op(scalar_mul(s, -1.0))), move);
  logdet_acc -= sum_all(s)->value[0];
  return add(ym, orig)->value;
}

NodePtr ChannelMix::forward(const NodePtr& x, NodePtr& logdet_acc) const {
  int64_t C = x->value.dim(1);
  int64_t per_pixel = x->value.dim(0) * x->value.dim(2) * x->value.dim(3);
  NodePtr weight = reshape(m, {C, C, 1, 1});
  logdet_acc = add(logdet_acc, scalar_mul(logdet(m), static_cast<double>(per_pixel)));
  return conv2d(x, weight, nullptr, 1, 0);
}

Tensor ChannelMix::inverse(const Tensor& y, double& logdet_acc) const {
  int64_t C = y.dim(1);
  LuResult lu = lu_factor(m->value.data(), C);
  if (lu.sign == 0 || std::exp(lu.log_abs_det) <= 1e-8) fail(Err::SingularMix, "|det| <= 1e-8");
  logdet_acc -= lu.log_abs_det * static_cast<double>(y.dim(0) * y.dim(2) * y.dim(3));
  std::vector<double> inv = lu_inverse(lu, C);
  NodePtr weight = constant(Tensor({C, C, 1, 1}, std::move(inv)));
  return conv2d(constant(y), weight, nullptr, 1, 0)->value;
}

int64_t LatentSample::total_dims() const {
  int64_t total = 0;
  for (const auto& p : parts) total += p.numel();
  return total;
}

namespace {

// Gram-Schmidt orthonormalization of a random Gaussian matrix; the result is
// a proper rotation (det forced to +1, so log|det| starts at 0).
Tensor random_rotation(int64_t n, Rng& rng) {
  std::vector<double> a(static_cast<size_t>(n * n));
  for (auto& v : a) v = rng.normal();
  for (int64_t col = 0; col < n; ++col) {
    for (int64_t prev = 0; prev < col; ++prev) {
      double dot = 0.0;
      for (int64_t r = 0; r < n; ++r)
        dot += a[static_cast<size_t>(r * n + col)] * a[static_cast<size_t>(r * n + prev)];
      for (int64_t r = 0; r < n; ++r)
        a[static_cast<size_t>(r * n + col)] -= dot * a[static_cast<size_t>(r * n + prev)];
    }
    double norm = 0.0;
    for (int64_t r = 0; r < n; ++r) {
      double v = a[static_cast<size_t>(r * n + col)];
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) fail(Err::SingularMix, "degenerate rotation init");
    for (int64_t r = 0; r < n; ++r) a[static_cast<size_t>(r * n + col)] /= norm;
  }
  Tensor m({n, n}, std::move(a));
  LuResult lu = lu_factor(m.data(), n);
  if (lu.sign < 0)
    for (int64_t j = 0; j < n; ++j) m.at2(0, j) = -m.at2(0, j);
  return m;
}

CouplingNet make_coupling_net(ParamStore& store, const std::string& prefix, int64_t in_c, int64_t hidden,
                              int64_t out_c, Rng& rng) {
  CouplingNet net;
  net.w1 = store.make_param(prefix + ".w1", {hidden, in_c, 3, 3}, Init::kaiming(in_c * 9), rng);
  net.b1 = store.make_param(prefix + ".b1", {hidden}, Init::zeros(), rng);
  // zero-initialized output layer: the flow starts at the identity
  net.w2 = store.make_param(prefix + ".w2", {out_c, hidden, 3, 3}, Init::zeros(), rng);
  net.b2 = store.make_param(prefix + ".b2", {out_c}, Init::zeros(), rng);
  return net;
}

}  // namespace

FlowModel FlowModel::build(const FlowConfig& cfg, int in_channels, int in_h, int in_w, Rng& rng) {
  return build_with_masks(cfg, in_channels, in_h, in_w, MaskKind::ChannelHalf, rng);
}

FlowModel FlowModel::build_with_masks(const FlowConfig& cfg, int in_channels, int in_h, int in_w,
                                      MaskKind mask, Rng& rng) {
  FlowModel model;
  model.cfg_ = cfg;
  model.in_c_ = in_channels;
  model.in_h_ = in_h;
  model.in_w_ = in_w;
  int64_t h = in_h / cfg.input_pool;
  int64_t w = in_w / cfg.input_pool;
  if (in_h % cfg.input_pool != 0 || in_w % cfg.input_pool != 0)
    fail(Err::BadShape, "input extents not divisible by input_pool");
  if (h % pow2(cfg.scales) != 0 || w % pow2(cfg.scales) != 0)
    fail(Err::BadShape, "spatial extents must divide by 2^scales after input_pool");

  int64_t c = in_channels;
  for (int s = 0; s < cfg.scales; ++s) {
    c *= 4;
    h /= 2;
    w /= 2;
    FlowScale scale;
    for (int k = 0; k < cfg.blocks_per_scale; ++k) {
      std::string prefix = "s" + std::to_string(s) + ".b" + std::to_string(k);
      Coupling cp;
      cp.mask = mask;
      cp.swap = (k % 2 == 1);
      int64_t cond_c = mask == MaskKind::ChannelHalf ? c / 2 : c;
      int64_t trans_c = mask == MaskKind::ChannelHalf ? c - c / 2 : c;
      cp.scale_net = make_coupling_net(model.store_, prefix + ".scale", cond_c, cfg.hidden_channels, trans_c, rng);
      cp.shift_net = make_coupling_net(model.store_, prefix + ".shift", cond_c, cfg.hidden_channels, trans_c, rng);
      scale.couplings.push_back(std::move(cp));

      ChannelMix mix;
      mix.m = model.store_.make_param(prefix + ".mix", {c, c}, Init::zeros(), rng);
      mix.m->value = random_rotation(c, rng);
      scale.mixes.push_back(std::move(mix));
    }
    model.scales_.push_back(std::move(scale));
    if (s < cfg.scales - 1) c /= 2;  // split
  }
  return model;
}

FlowModel::ForwardNodes FlowModel::forward_nodes(const NodePtr& y_batch) const {
  const Tensor& yv = y_batch->value;
  if (yv.rank() != 4 || yv.dim(1) != in_c_ || yv.dim(2) != in_h_ || yv.dim(3) != in_w_)
    fail(Err::BadShape, "flow input " + shape_str(yv.shape()) + " does not match model space");
  NodePtr x = y_batch;
  if (cfg_.input_pool == 2) x = avgpool2(x);
  ForwardNodes out;
  out.logdet = constant(Tensor::scalar(0.0));
  for (int s = 0; s < cfg_.scales; ++s) {
    x = squeeze2(x);
    const FlowScale& scale = scales_[static_cast<size_t>(s)];
    for (int k = 0; k < cfg_.blocks_per_scale; ++k) {
      x = scale.couplings[static_cast<size_t>(k)].forward(x, out.logdet);
      x = scale.mixes[static_cast<size_t>(k)].forward(x, out.logdet);
    }
    if (s < cfg_.scales - 1) {
      int64_t c = x->value.dim(1);
      out.parts.push_back(slice(x, 1, c / 2, c - c / 2));
      x = slice(x, 1, 0, c / 2);
    } else {
      out.parts.push_back(x);
    }
  }
  return out;
}

std::pair<LatentSample, double> FlowModel::forward(const Tensor& y) const {
  if (y.rank() != 3) fail(Err::BadShape, "flow_forward: expects C×H×W");
  Tensor batched({1, y.dim(0), y.dim(1), y.dim(2)}, y.vec());
  ForwardNodes nodes = forward_nodes(constant(std::move(batched)));
  LatentSample z;
  for (const auto& p : nodes.parts) {
    Tensor t(std::vector<int64_t>(p->value.shape().begin() + 1, p->value.shape().end()), p->value.vec());
    z.parts.push_back(std::move(t));
  }
  return {std::move(z), nodes.logdet->value[0]};
}

Tensor FlowModel::inverse(const LatentSample& z, double* logdet_out) const {
  auto shapes = latent_shapes();
  if (z.parts.size() != shapes.size()) fail(Err::BadShape, "latent part count mismatch");
  for (size_t i = 0; i < shapes.size(); ++i)
    if (z.parts[i].shape() != shapes[i])
      fail(Err::BadShape, "latent part " + std::to_string(i) + " has shape " + shape_str(z.parts[i].shape()));

  auto batched = [](const Tensor& t) {
    std::vector<int64_t> s = t.shape();
    s.insert(s.begin(), 1);
    return Tensor(s, t.vec());
  };

  double logdet = 0.0;
  Tensor x = batched(z.parts.back());
  for (int s = cfg_.scales - 1; s >= 0; --s) {
    const FlowScale& scale = scales_[static_cast<size_t>(s)];
    for (int k = cfg_.blocks_per_scale - 1; k >= 0; --k) {
      x = scale.mixes[static_cast<size_t>(k)].inverse(x, logdet);
      x = scale.couplings[static_cast<size_t>(k)].inverse(x, logdet);
    }
    x = unsqueeze2_value(x);
    if (s > 0) {
      Tensor part = batched(z.parts[static_cast<size_t>(s - 1)]);
      x = concat(constant(x), constant(part), 1)->value;
    }
  }
  if (flow_testing::corrupt_inverse && x.numel() > 0) x[0] += 1e-3;
  if (logdet_out) *logdet_out = logdet;
  Tensor out(std::vector<int64_t>(x.shape().begin() + 1, x.shape().end()), x.vec());
  return out;
}

NodePtr FlowModel::log_prob_sum_node(const NodePtr& y_batch) const {
  ForwardNodes f = forward_nodes(y_batch);
  NodePtr acc = f.logdet;
  for (const auto& part : f.parts) acc = add(acc, minus_half_sum_sq(part));
  return acc;
}

double FlowModel::log_prob(const Tensor& y) const {
  Tensor batched({1, y.dim(0), y.dim(1), y.dim(2)}, y.vec());
  return log_prob_sum_node(constant(std::move(batched)))->value[0];
}

NodePtr FlowModel::nll_node(const NodePtr& y_batch) const {
  int64_t B = y_batch->value.dim(0);
  return scalar_mul(log_prob_sum_node(y_batch), -1.0 / static_cast<double>(B));
}

double FlowModel::nll_batch(const std::vector<Tensor>& maps) const {
  if (maps.empty()) fail(Err::BadBatch, "empty batch");
  Tensor batch({static_cast<int64_t>(maps.size()), in_c_, in_h_, in_w_});
  int64_t per = in_c_ * static_cast<int64_t>(in_h_) * in_w_;
  for (size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].numel() != per) fail(Err::BadShape, "map size mismatch in batch");
    std::copy(maps[i].data(), maps[i].data() + per, batch.data() + static_cast<int64_t>(i) * per);
  }
  return nll_node(constant(std::move(batch)))->value[0];
}

std::vector<std::vector<int64_t>> FlowModel::latent_shapes() const {
  std::vector<std::vector<int64_t>> shapes;
  int64_t c = in_c_;
  int64_t h = in_h_ / cfg_.input_pool;
  int64_t w = in_w_ / cfg_.input_pool;
  for (int s = 0; s < cfg_.scales; ++s) {
    c *= 4;
    h /= 2;
    w /= 2;
    if (s < cfg_.scales - 1) {
      shapes.push_back({c - c / 2, h, w});
      c /= 2;
    } else {
      shapes.push_back({c, h, w});
    }
  }
  return shapes;
}

int64_t FlowModel::flow_dims() const {
  return in_c_ * static_cast<int64_t>(in_h_ / cfg_.input_pool) * (in_w_ / cfg_.input_pool);
}

std::vector<Tensor> FlowModel::sample(int n, Rng& rng) const {
  if (n < 1) fail(Err::BadBatch, "sample: n must be >= 1");
  auto shapes = latent_shapes();
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    LatentSample z;
    for (const auto& s : shapes) {
      Tensor t(s);
      for (int64_t j = 0; j < t.numel(); ++j) t[j] = rng.normal();
      z.parts.push_back(std::move(t));
    }
    out.push_back(inverse(z));
  }
  return out;
}

Tensor dequantize(const LabelMap& labels, int n_classes, double eps, double delta, Rng& rng) {
  if (eps < 0.0 || eps >= 1.0 / static_cast<double>(n_classes)) fail(Err::BadConfig, "label_smoothing out of range");
  if (delta < 0.0 || delta >= 0.5) fail(Err::BadConfig, "dequant_delta out of range");
  double c = static_cast<double>(n_classes);
  Tensor out({n_classes, labels.h, labels.w});
  int64_t hw = labels.h * labels.w;
  for (int64_t px = 0; px < hw; ++px) {
    uint8_t id = labels.ids[static_cast<size_t>(px)];
    if (id != LabelMap::kIgnore && id >= n_classes) fail(Err::BadLabel, "label id out of range");
  }
  for (int64_t ch = 0; ch < n_classes; ++ch) {
    for (int64_t px = 0; px < hw; ++px) {
      uint8_t id = labels.ids[static_cast<size_t>(px)];
      double base;
      if (id == LabelMap::kIgnore)
        base = 1.0 / c;
      else
        base = (static_cast<int64_t>(id) == ch) ? 1.0 - eps + eps / c : eps / c;
      double noise = delta > 0.0 ? delta * rng.uniform() : 0.0;
      out[ch * hw + px] = base + noise;
    }
  }
  return out;
}

FlowModel train_flow(DataVault& vault, const std::string& source_domain, int n_classes, int image_h,
                     int image_w, const FlowConfig& cfg, Rng& rng, const FlowInputProvider& provider) {
  cfg.validate(n_classes);
  DataVault::Handle handle = vault.read(source_domain, "train", Purpose::Train);
  if (!handle.labeled()) fail(Err::AccessDenied, "flow training requires labeled source maps");

  Rng init_rng = rng.child(0);
  FlowModel model = FlowModel::build(cfg, n_classes, image_h, image_w, init_rng);

  int64_t n = handle.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  uint64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = rng.child(1000 + static_cast<uint64_t>(epoch));
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(shuffle_rng.below(static_cast<uint64_t>(i + 1)))]);
    for (int64_t at = 0; at + cfg.batch <= n; at += cfg.batch) {
      std::vector<int64_t> idx(order.begin() + at, order.begin() + at + cfg.batch);
      Batch batch = handle.batch(idx);
      Rng noise_rng = rng.child(2000 + step);
      Tensor maps;
      if (provider) {
        maps = provider(batch, noise_rng);
      } else {
        maps = Tensor({cfg.batch, n_classes, image_h, image_w});
        int64_t per = n_classes * static_cast<int64_t>(image_h) * image_w;
        for (int b = 0; b < cfg.batch; ++b) {
          Tensor one = dequantize(batch.labels[static_cast<size_t>(b)], n_classes, cfg.label_smoothing,
                                  cfg.dequant_delta, noise_rng);
          std::copy(one.data(), one.data() + per, maps.data() + b * per);
        }
      }
      NodePtr loss = model.nll_node(constant(std::move(maps)));
      backward(loss);
      model.params().sgd_step(cfg.lr, cfg.momentum, cfg.weight_decay);
      ++step;
    }
  }
  return model;
}

void FlowModel::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Err::WriteError, "cannot open " + path);
  os.write("CFLW", 4);
  write_u32(os, 1);
  write_u32(os, static_cast<uint32_t>(cfg_.scales));
  write_u32(os, static_cast<uint32_t>(cfg_.blocks_per_scale));
  write_u32(os, static_cast<uint32_t>(cfg_.hidden_channels));
  write_f64(os, cfg_.dequant_delta);
  write_f64(os, cfg_.label_smoothing);
  write_u32(os, static_cast<uint32_t>(cfg_.input_pool));
  write_u32(os, static_cast<uint32_t>(in_c_));
  write_u32(os, static_cast<uint32_t>(in_h_));
  write_u32(os, static_cast<uint32_t>(in_w_));
  write_u32(os, static_cast<uint32_t>(store_.size()));
  store_.save_blocks(os);
  if (!os) fail(Err::WriteError, "failed writing " + path);
}

FlowModel FlowModel::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Err::MissingArtifact, "cannot open " + path);
  char magic[4];
  read_bytes(is, magic, 4, "magic");
  if (std::string(magic, 4) != "CFLW") corrupt("bad magic in " + path);
  if (read_u32(is, "version") != 1) corrupt("unsupported version in " + path);
  FlowConfig cfg;
  cfg.scales = static_cast<int>(read_u32(is, "scales"));
  cfg.blocks_per_scale = static_cast<int>(read_u32(is, "blocks_per_scale"));
  cfg.hidden_channels = static_cast<int>(read_u32(is, "hidden_channels"));
  cfg.dequant_delta = read_f64(is, "dequant_delta");
  cfg.label_smoothing = read_f64(is, "label_smoothing");
  cfg.input_pool = static_cast<int>(read_u32(is, "input_pool"));
  int c = static_cast<int>(read_u32(is, "in_channels"));
  int h = static_cast<int>(read_u32(is, "in_h"));
  int w = static_cast<int>(read_u32(is, "in_w"));
  uint32_t n_blocks = read_u32(is, "block count");
  Rng throwaway(0);
  FlowModel model = FlowModel::build(cfg, c, h, w, throwaway);
  if (n_blocks != model.store_.size()) corrupt("parameter block count mismatch in " + path);
  model.store_.load_blocks(is, n_blocks);
  return model;
}

}  // namespace condacl
