#include "condacl/segnet.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "condacl/serialize.hpp"

namespace condacl {

void SegNetConfig::validate() const {
  if (in_channels < 1) fail(Err::BadConfig, "segnet.in_channels must be >= 1");
  if (n_classes < 2) fail(Err::BadConfig, "segnet.n_classes must be >= 2");
  if (widths.empty()) fail(Err::BadConfig, "segnet.widths must be nonempty");
  for (int w : widths)
    if (w < 1) fail(Err::BadConfig, "segnet.widths entries must be >= 1");
  if (lr < 0) fail(Err::BadConfig, "segnet.lr must be >= 0");
  if (epochs < 1) fail(Err::BadConfig, "segnet.epochs must be >= 1");
  if (batch < 1) fail(Err::BadConfig, "segnet.batch must be >= 1");
}

ParamLookup store_params(const ParamStore& store) {
  return [&store](const std::string& name) { return store.get(name); };
}

ParamLookup frozen_params(const std::map<std::string, Tensor>& weights) {
  return [&weights](const std::string& name) {
    auto it = weights.find(name);
    if (it == weights.end()) fail(Err::MissingArtifact, "frozen parameter " + name);
    return constant(it->second);
  };
}

void SegNet::init_params(ParamStore& store, Rng& rng) const {
  int levels = cfg_.levels();
  int prev = cfg_.in_channels;
  for (int l = 0; l < levels; ++l) {
    int w = cfg_.widths[static_cast<size_t>(l)];
    store.make_param("enc" + std::to_string(l) + ".w", {w, prev, 3, 3}, Init::kaiming(prev * 9), rng);
    store.make_param("enc" + std::to_string(l) + ".b", {w}, Init::zeros(), rng);
    prev = w;
  }
  for (int l = levels - 2; l >= 0; --l) {
    int in = cfg_.widths[static_cast<size_t>(l + 1)];
    int out = cfg_.widths[static_cast<size_t>(l)];
    store.make_param("dec" + std::to_string(l) + ".w", {out, in, 3, 3}, Init::kaiming(in * 9), rng);
    store.make_param("dec" + std::to_string(l) + ".b", {out}, Init::zeros(), rng);
  }
  store.make_param("head.w", {cfg_.n_classes, cfg_.widths[0], 1, 1}, Init::kaiming(cfg_.widths[0]), rng);
  store.make_param("head.b", {cfg_.n_classes}, Init::zeros(), rng);
}

NodePtr SegNet::forward(const NodePtr& images, const ParamLookup& params) const {
  const Tensor& v = images->value;
  if (v.rank() != 4 || v.dim(1) != cfg_.in_channels) fail(Err::BadShape, "segnet: expects N×3×H×W input");
  int levels = cfg_.levels();
  int64_t div = int64_t{1} << (levels - 1);
  if (v.dim(2) % div != 0 || v.dim(3) % div != 0)
    fail(Err::BadShape, "segnet: spatial extents must divide by 2^(levels-1)");

  std::vector<NodePtr> enc;
  NodePtr x = images;
  for (int l = 0; l < levels; ++l) {
    if (l > 0) x = avgpool2(x);
    x = leaky_relu(conv2d(x, params("enc" + std::to_string(l) + ".w"), params("enc" + std::to_string(l) + ".b"), 1, 1));
    enc.push_back(x);
  }
  NodePtr d = enc.back();
  for (int l = levels - 2; l >= 0; --l) {
    d = leaky_relu(conv2d(nearest_upsample2(d), params("dec" + std::to_string(l) + ".w"),
                          params("dec" + std::to_string(l) + ".b"), 1, 1));
    d = add(d, enc[static_cast<size_t>(l)]);
  }
  return conv2d(d, params("head.w"), params("head.b"), 1, 0);
}

std::vector<LabelMap> argmax_labels(const Tensor& t) {
  if (t.rank() != 4) fail(Err::BadShape, "argmax_labels: expects NCHW");
  int64_t N = t.dim(0), C = t.dim(1), H = t.dim(2), W = t.dim(3);
  std::vector<LabelMap> out;
  out.reserve(static_cast<size_t>(N));
  for (int64_t n = 0; n < N; ++n) {
    LabelMap m(H, W);
    for (int64_t p = 0; p < H * W; ++p) {
      int best = 0;
      double bv = t[(n * C) * H * W + p];
      for (int64_t c = 1; c < C; ++c) {
        double v = t[(n * C + c) * H * W + p];
        if (v > bv) {
          bv = v;
          best = static_cast<int>(c);
        }
      }
      m.ids[static_cast<size_t>(p)] = static_cast<uint8_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

LabelMap SegNet::predict_labels(const Tensor& image, const ParamLookup& params) const {
  Tensor batched({1, image.dim(0), image.dim(1), image.dim(2)}, image.vec());
  return predict_labels_batch(batched, params)[0];
}

std::vector<LabelMap> SegNet::predict_labels_batch(const Tensor& images, const ParamLookup& params) const {
  NodePtr logits = forward(constant(images), params);
  return argmax_labels(logits->value);
}

NodePtr supervised_loss(const NodePtr& logits, const std::vector<LabelMap>& labels) {
  const Tensor& lv = logits->value;
  if (lv.rank() != 4) fail(Err::BadShape, "supervised_loss: expects NCHW logits");
  int64_t N = lv.dim(0), C = lv.dim(1), H = lv.dim(2), W = lv.dim(3);
  if (static_cast<int64_t>(labels.size()) != N) fail(Err::BadShape, "supervised_loss: batch size mismatch");
  for (const auto& m : labels)
    if (m.h != H || m.w != W) fail(Err::BadShape, "supervised_loss: label extent mismatch");

  int64_t HW = H * W;
  int64_t counted = 0;
  double total = 0.0;
  for (int64_t n = 0; n < N; ++n) {
    const double* ln = lv.data() + n * C * HW;
    for (int64_t p = 0; p < HW; ++p) {
      uint8_t id = labels[static_cast<size_t>(n)].ids[static_cast<size_t>(p)];
      if (id == LabelMap::kIgnore) continue;
      if (id >= C) fail(Err::BadLabel, "label id out of range");
      double mx = ln[p];
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, ln[c * HW + p]);
      double acc = 0.0;
      for (int64_t c = 0; c < C; ++c) acc += std::exp(ln[c * HW + p] - mx);
      double lse = mx + std::log(acc);
      total += lse - ln[static_cast<int64_t>(id) * HW + p];
      ++counted;
    }
  }
  if (counted == 0) fail(Err::EmptyLoss, "all pixels ignored");
  Tensor value = Tensor::scalar(total / static_cast<double>(counted));

  auto labels_copy = labels;
  return make_op("cross_entropy", std::move(value), {logits},
                 [labels_copy, N, C, HW, counted](Node& node) {
                   Node& parent = *node.parents[0];
                   parent.ensure_grad();
                   double g = node.grad[0] / static_cast<double>(counted);
                   for (int64_t n = 0; n < N; ++n) {
                     const double* ln = parent.value.data() + n * C * HW;
                     double* d = parent.grad.data() + n * C * HW;
                     for (int64_t p = 0; p < HW; ++p) {
                       uint8_t id = labels_copy[static_cast<size_t>(n)].ids[static_cast<size_t>(p)];
                       if (id == LabelMap::kIgnore) continue;
                       double mx = ln[p];
                       for (int64_t c = 1; c < C; ++c) mx = std::max(mx, ln[c * HW + p]);
                       double acc = 0.0;
                       for (int64_t c = 0; c < C; ++c) acc += std::exp(ln[c * HW + p] - mx);
                       for (int64_t c = 0; c < C; ++c) {
                         double soft = std::exp(ln[c * HW + p] - mx) / acc;
                         double onehot = (c == static_cast<int64_t>(id)) ? 1.0 : 0.0;
                         d[c * HW + p] += g * (soft - onehot);
                       }
                     }
                   }
                 });
}

ParamStore train_source(DataVault& vault, const std::string& source_domain, const SegNet& net, Rng& rng) {
  const SegNetConfig& cfg = net.config();
  DataVault::Handle handle = vault.read(source_domain, "train", Purpose::Train);
  if (!handle.labeled()) fail(Err::AccessDenied, "source training requires labels");

  ParamStore store;
  Rng init_rng = rng.child(0);
  net.init_params(store, init_rng);

  int64_t n = handle.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = rng.child(1000 + static_cast<uint64_t>(epoch));
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle_rng.below(static_cast<uint64_t>(i + 1)))]);
    for (int64_t at = 0; at + cfg.batch <= n; at += cfg.batch) {
      std::vector<int64_t> idx(order.begin() + at, order.begin() + at + cfg.batch);
      Batch batch = handle.batch(idx);
      NodePtr logits = net.forward(constant(std::move(batch.images)), store_params(store));
      NodePtr loss = supervised_loss(logits, batch.labels);
      backward(loss);
      store.sgd_step(cfg.lr, cfg.momentum, cfg.weight_decay);
    }
  }
  return store;
}

void save_segnet(const std::string& path, const SegNetConfig& cfg, const ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Err::WriteError, "cannot open " + path);
  os.write("CSEG", 4);
  write_u32(os, 1);
  write_u32(os, static_cast<uint32_t>(cfg.in_channels));
  write_u32(os, static_cast<uint32_t>(cfg.n_classes));
  write_u32(os, static_cast<uint32_t>(cfg.widths.size()));
  for (int w : cfg.widths) write_u32(os, static_cast<uint32_t>(w));
  write_u32(os, static_cast<uint32_t>(store.size()));
  store.save_blocks(os);
  if (!os) fail(Err::WriteError, "failed writing " + path);
}

std::pair<SegNetConfig, ParamStore> load_segnet(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Err::MissingArtifact, "cannot open " + path);
  char magic[4];
  read_bytes(is, magic, 4, "magic");
  if (std::string(magic, 4) != "CSEG") corrupt("bad magic in " + path);
  if (read_u32(is, "version") != 1) corrupt("unsupported version in " + path);
  SegNetConfig cfg;
  cfg.in_channels = static_cast<int>(read_u32(is, "in_channels"));
  cfg.n_classes = static_cast<int>(read_u32(is, "n_classes"));
  uint32_t n_widths = read_u32(is, "width count");
  if (n_widths == 0 || n_widths > 16) corrupt("width count out of range in " + path);
  cfg.widths.clear();
  for (uint32_t i = 0; i < n_widths; ++i) cfg.widths.push_back(static_cast<int>(read_u32(is, "width")));
  uint32_t n_blocks = read_u32(is, "block count");
  ParamStore store;
  store.load_blocks(is, n_blocks);
  return {std::move(cfg), std::move(store)};
}

}  // namespace condacl
