#include "condacl/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "condacl/linalg.hpp"

namespace condacl {

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

const char* err_name(Err e) {
  switch (e) {
    case Err::BadShape: return "BadShape";
    case Err::DuplicateParam: return "DuplicateParam";
    case Err::BadConfig: return "BadConfig";
    case Err::DomainError: return "DomainError";
    case Err::BadLabel: return "BadLabel";
    case Err::BadBatch: return "BadBatch";
    case Err::SingularMix: return "SingularMix";
    case Err::EmptyLoss: return "EmptyLoss";
    case Err::InfiniteKL: return "InfiniteKL";
    case Err::EmptyMetric: return "EmptyMetric";
    case Err::IncompleteRecords: return "IncompleteRecords";
    case Err::AccessDenied: return "AccessDenied";
    case Err::GenerationFailure: return "GenerationFailure";
    case Err::CorruptDataset: return "CorruptDataset";
    case Err::WriteError: return "WriteError";
    case Err::ConfigError: return "ConfigError";
    case Err::MissingArtifact: return "MissingArtifact";
  }
  return "Error";
}

namespace {

bool any_requires_grad(const std::vector<NodePtr>& parents) {
  for (const auto& p : parents)
    if (p->requires_grad) return true;
  return false;
}

NodePtr new_node(const char* name, Tensor value, std::vector<NodePtr> parents,
                 std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->op = name;
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->requires_grad = any_requires_grad(n->parents);
  if (n->requires_grad) {
    n->backward_fn = std::move(backward_fn);
    n->ensure_grad();
  }
  return n;
}

// Accumulate src into a parent's grad; handles the scalar-broadcast case.
void accum(Node& parent, const Tensor& src) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  if (parent.grad.numel() == src.numel()) {
    double* g = parent.grad.data();
    const double* s = src.data();
    for (int64_t i = 0; i < src.numel(); ++i) g[i] += s[i];
  } else {
    double total = 0.0;
    const double* s = src.data();
    for (int64_t i = 0; i < src.numel(); ++i) total += s[i];
    parent.grad[0] += total;
  }
}

struct BinShape {
  std::vector<int64_t> out;
  bool a_scalar;
  bool b_scalar;
};

BinShape binary_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return {a.shape(), false, false};
  if (a.numel() == 1) return {b.shape(), true, false};
  if (b.numel() == 1) return {a.shape(), false, true};
  fail(Err::BadShape, std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void check_axis(const Tensor& t, int axis) {
  if (axis < 0 || axis >= t.rank()) fail(Err::BadShape, "axis out of range");
}

}  // namespace

NodePtr constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->op = "const";
  n->value = std::move(v);
  n->requires_grad = false;
  return n;
}

NodePtr leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->op = "leaf";
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return n;
}

NodePtr make_op(const char* name, Tensor value, std::vector<NodePtr> parents,
                std::function<void(Node&)> backward_fn) {
  return new_node(name, std::move(value), std::move(parents), std::move(backward_fn));
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
  BinShape bs = binary_shape("add", a->value, b->value);
  Tensor out(bs.out);
  const double* pa = a->value.data();
  const double* pb = b->value.data();
  double* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i)
    po[i] = (bs.a_scalar ? pa[0] : pa[i]) + (bs.b_scalar ? pb[0] : pb[i]);
  return new_node("add", std::move(out), {a, b}, [](Node& n) {
    accum(*n.parents[0], n.grad);
    accum(*n.parents[1], n.grad);
  });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  BinShape bs = binary_shape("sub", a->value, b->value);
  Tensor out(bs.out);
  const double* pa = a->value.data();
  const double* pb = b->value.data();
  double* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i)
    po[i] = (bs.a_scalar ? pa[0] : pa[i]) - (bs.b_scalar ? pb[0] : pb[i]);
  return new_node("sub", std::move(out), {a, b}, [](Node& n) {
    accum(*n.parents[0], n.grad);
    Tensor neg(n.grad.shape());
    const double* g = n.grad.data();
    double* m = neg.data();
    for (int64_t i = 0; i < neg.numel(); ++i) m[i] = -g[i];
    accum(*n.parents[1], neg);
  });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  BinShape bs = binary_shape("mul", a->value, b->value);
  Tensor out(bs.out);
  const double* pa = a->value.data();
  const double* pb = b->value.data();
  double* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i)
    po[i] = (bs.a_scalar ? pa[0] : pa[i]) * (bs.b_scalar ? pb[0] : pb[i]);
  return new_node("mul", std::move(out), {a, b}, [bs](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    const double* g = n.grad.data();
    if (n.parents[0]->requires_grad) {
      Tensor da(n.grad.shape());
      double* d = da.data();
      for (int64_t i = 0; i < da.numel(); ++i) d[i] = g[i] * (bs.b_scalar ? bv[0] : bv[i]);
      accum(*n.parents[0], da);
    }
    if (n.parents[1]->requires_grad) {
      Tensor db(n.grad.shape());
      double* d = db.data();
      for (int64_t i = 0; i < db.numel(); ++i) d[i] = g[i] * (bs.a_scalar ? av[0] : av[i]);
      accum(*n.parents[1], db);
    }
  });
}

NodePtr scalar_mul(const NodePtr& a, double c) {
  Tensor out(a->value.shape());
  const double* pa = a->value.data();
  double* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = c * pa[i];
  return new_node("scalar_mul", std::move(out), {a}, [c](Node& n) {
    Tensor da(n.grad.shape());
    const double* g = n.grad.data();
    double* d = da.data();
    for (int64_t i = 0; i < da.numel(); ++i) d[i] = c * g[i];
    accum(*n.parents[0], da);
  });
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    fail(Err::BadShape, "matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  int64_t M = av.dim(0), K = av.dim(1), N = bv.dim(1);
  Tensor out({M, N});
  gemm_nn(M, K, N, av.data(), bv.data(), out.data());
  return new_node("matmul", std::move(out), {a, b}, [M, K, N](Node& n) {
    const Tensor& av2 = n.parents[0]->value;
    const Tensor& bv2 = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      n.parents[0]->ensure_grad();
      gemm_nt(M, N, K, n.grad.data(), bv2.data(), n.parents[0]->grad.data());
    }
    if (n.parents[1]->requires_grad) {
      n.parents[1]->ensure_grad();
      gemm_tn(K, M, N, av2.data(), n.grad.data(), n.parents[1]->grad.data());
    }
  });
}

namespace {

struct AxisSplit {
  int64_t outer, axis, inner;
};

AxisSplit axis_split(const std::vector<int64_t>& shape, int axis) {
  AxisSplit s{1, shape[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

NodePtr concat(const NodePtr& a, const NodePtr& b, int axis) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  check_axis(av, axis);
  if (av.rank() != bv.rank()) fail(Err::BadShape, "concat: rank mismatch");
  for (int i = 0; i < av.rank(); ++i)
    if (i != axis && av.dim(i) != bv.dim(i)) fail(Err::BadShape, "concat: extent mismatch off axis");
  std::vector<int64_t> oshape = av.shape();
  oshape[static_cast<size_t>(axis)] += bv.dim(axis);
  Tensor out(oshape);
  AxisSplit sa = axis_split(av.shape(), axis);
  int64_t na = sa.axis * sa.inner;
  int64_t nb = bv.dim(axis) * sa.inner;
  for (int64_t o = 0; o < sa.outer; ++o) {
    std::memcpy(out.data() + o * (na + nb), av.data() + o * na, static_cast<size_t>(na) * sizeof(double));
    std::memcpy(out.data() + o * (na + nb) + na, bv.data() + o * nb, static_cast<size_t>(nb) * sizeof(double));
  }
  return new_node("concat", std::move(out), {a, b}, [sa, na, nb](Node& n) {
    for (int pi = 0; pi < 2; ++pi) {
      Node& p = *n.parents[static_cast<size_t>(pi)];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      int64_t width = pi == 0 ? na : nb;
      int64_t off = pi == 0 ? 0 : na;
      for (int64_t o = 0; o < sa.outer; ++o) {
        const double* g = n.grad.data() + o * (na + nb) + off;
        double* d = p.grad.data() + o * width;
        for (int64_t i = 0; i < width; ++i) d[i] += g[i];
      }
    }
  });
}

NodePtr slice(const NodePtr& a, int axis, int64_t start, int64_t len) {
  const Tensor& av = a->value;
  check_axis(av, axis);
  if (start < 0 || len <= 0 || start + len > av.dim(axis)) fail(Err::BadShape, "slice: range out of bounds");
  std::vector<int64_t> oshape = av.shape();
  oshape[static_cast<size_t>(axis)] = len;
  Tensor out(oshape);
  AxisSplit s = axis_split(av.shape(), axis);
  int64_t in_row = s.axis * s.inner;
  int64_t out_row = len * s.inner;
  for (int64_t o = 0; o < s.outer; ++o)
    std::memcpy(out.data() + o * out_row, av.data() + o * in_row + start * s.inner,
                static_cast<size_t>(out_row) * sizeof(double));
  return new_node("slice", std::move(out), {a}, [s, start, in_row, out_row](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t o = 0; o < s.outer; ++o) {
      const double* g = n.grad.data() + o * out_row;
      double* d = p.grad.data() + o * in_row + start * s.inner;
      for (int64_t i = 0; i < out_row; ++i) d[i] += g[i];
    }
  });
}

NodePtr reshape(const NodePtr& a, std::vector<int64_t> shape) {
  if (Tensor::checked_numel(shape) != a->value.numel()) fail(Err::BadShape, "reshape: numel mismatch");
  Tensor out(std::move(shape), a->value.vec());
  return new_node("reshape", std::move(out), {a}, [](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    const double* g = n.grad.data();
    double* d = p.grad.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) d[i] += g[i];
  });
}

NodePtr sum_all(const NodePtr& a) {
  double s = 0.0;
  const double* pa = a->value.data();
  for (int64_t i = 0; i < a->value.numel(); ++i) s += pa[i];
  return new_node("sum", Tensor::scalar(s), {a}, [](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    double g = n.grad[0];
    double* d = p.grad.data();
    for (int64_t i = 0; i < p.grad.numel(); ++i) d[i] += g;
  });
}

NodePtr mean_all(const NodePtr& a) {
  double s = 0.0;
  const double* pa = a->value.data();
  int64_t n_el = a->value.numel();
  for (int64_t i = 0; i < n_el; ++i) s += pa[i];
  return new_node("mean", Tensor::scalar(s / static_cast<double>(n_el)), {a}, [n_el](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    double g = n.grad[0] / static_cast<double>(n_el);
    double* d = p.grad.data();
    for (int64_t i = 0; i < p.grad.numel(); ++i) d[i] += g;
  });
}

NodePtr logsumexp(const NodePtr& a, int axis) {
  const Tensor& av = a->value;
  check_axis(av, axis);
  AxisSplit s = axis_split(av.shape(), axis);
  std::vector<int64_t> oshape;
  for (int i = 0; i < av.rank(); ++i)
    if (i != axis) oshape.push_back(av.dim(i));
  if (oshape.empty()) oshape.push_back(1);
  Tensor out(oshape);
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t in = 0; in < s.inner; ++in) {
      const double* base = av.data() + o * s.axis * s.inner + in;
      double mx = base[0];
      for (int64_t k = 1; k < s.axis; ++k) mx = std::max(mx, base[k * s.inner]);
      double acc = 0.0;
      for (int64_t k = 0; k < s.axis; ++k) acc += std::exp(base[k * s.inner] - mx);
      out[o * s.inner + in] = mx + std::log(acc);
    }
  }
  Tensor saved = out;
  return new_node("logsumexp", std::move(out), {a}, [s, saved](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t o = 0; o < s.outer; ++o) {
      for (int64_t in = 0; in < s.inner; ++in) {
        double lse = saved[o * s.inner + in];
        double g = n.grad[o * s.inner + in];
        const double* vbase = p.value.data() + o * s.axis * s.inner + in;
        double* dbase = p.grad.data() + o * s.axis * s.inner + in;
        for (int64_t k = 0; k < s.axis; ++k) dbase[k * s.inner] += g * std::exp(vbase[k * s.inner] - lse);
      }
    }
  });
}

namespace {

// col (C*kh*kw × Ho*Wo) from one sample (C×H×W), zero padding.
void im2col(const double* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t Ho, int64_t Wo, double* col) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        double* row = col + ((c * kh + i) * kw + j) * Ho * Wo;
        for (int64_t y = 0; y < Ho; ++y) {
          int64_t sy = y * stride + i - pad;
          if (sy < 0 || sy >= H) {
            std::fill(row + y * Wo, row + (y + 1) * Wo, 0.0);
            continue;
          }
          const double* src = x + (c * H + sy) * W;
          for (int64_t xo = 0; xo < Wo; ++xo) {
            int64_t sx = xo * stride + j - pad;
            row[y * Wo + xo] = (sx < 0 || sx >= W) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
                int64_t pad, int64_t Ho, int64_t Wo, double* x) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        const double* row = col + ((c * kh + i) * kw + j) * Ho * Wo;
        for (int64_t y = 0; y < Ho; ++y) {
          int64_t sy = y * stride + i - pad;
          if (sy < 0 || sy >= H) continue;
          double* dst = x + (c * H + sy) * W;
          for (int64_t xo = 0; xo < Wo; ++xo) {
            int64_t sx = xo * stride + j - pad;
            if (sx >= 0 && sx < W) dst[sx] += row[y * Wo + xo];
          }
        }
      }
    }
  }
}

}  // namespace

NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& bias, int stride, int pad) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  if (xv.rank() != 4 || wv.rank() != 4) fail(Err::BadShape, "conv2d: expects NCHW input and OCkk weight");
  int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t O = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != C) fail(Err::BadShape, "conv2d: channel mismatch");
  if (kh % 2 == 0 || kw % 2 == 0) fail(Err::BadShape, "conv2d: kernel extents must be odd");
  if (stride < 1) fail(Err::BadShape, "conv2d: stride must be >= 1");
  if ((H + 2 * pad - kh) % stride != 0 || (W + 2 * pad - kw) % stride != 0)
    fail(Err::BadShape, "conv2d: non-integral output extent");
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) fail(Err::BadShape, "conv2d: empty output");
  if (bias && (bias->value.rank() != 1 || bias->value.dim(0) != O)) fail(Err::BadShape, "conv2d: bias extent");

  int64_t ckk = C * kh * kw;
  Tensor out({N, O, Ho, Wo});
  std::vector<double> col(static_cast<size_t>(ckk * Ho * Wo));
  for (int64_t n = 0; n < N; ++n) {
    im2col(xv.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
    double* on = out.data() + n * O * Ho * Wo;
    if (bias) {
      for (int64_t o = 0; o < O; ++o) std::fill(on + o * Ho * Wo, on + (o + 1) * Ho * Wo, bias->value[o]);
    }
    gemm_nn(O, ckk, Ho * Wo, wv.data(), col.data(), on);
  }

  std::vector<NodePtr> parents = {x, w};
  if (bias) parents.push_back(bias);
  auto shape_info = std::make_tuple(N, C, H, W, O, kh, kw, static_cast<int64_t>(stride), static_cast<int64_t>(pad), Ho, Wo);
  return new_node("conv2d", std::move(out), std::move(parents), [shape_info](Node& n) {
    auto [N2, C2, H2, W2, O2, kh2, kw2, stride2, pad2, Ho2, Wo2] = shape_info;
    Node& xn = *n.parents[0];
    Node& wn = *n.parents[1];
    Node* bn = n.parents.size() > 2 ? n.parents[2].get() : nullptr;
    int64_t ckk2 = C2 * kh2 * kw2;
    std::vector<double> col(static_cast<size_t>(ckk2 * Ho2 * Wo2));
    std::vector<double> dcol;
    if (xn.requires_grad) {
      dcol.resize(static_cast<size_t>(ckk2 * Ho2 * Wo2));
      xn.ensure_grad();
    }
    if (wn.requires_grad) wn.ensure_grad();
    if (bn && bn->requires_grad) bn->ensure_grad();
    for (int64_t s = 0; s < N2; ++s) {
      const double* g = n.grad.data() + s * O2 * Ho2 * Wo2;
      if (wn.requires_grad) {
        im2col(xn.value.data() + s * C2 * H2 * W2, C2, H2, W2, kh2, kw2, stride2, pad2, Ho2, Wo2, col.data());
        gemm_nt(O2, Ho2 * Wo2, ckk2, g, col.data(), wn.grad.data());
      }
      if (bn && bn->requires_grad) {
        for (int64_t o = 0; o < O2; ++o) {
          double acc = 0.0;
          const double* go = g + o * Ho2 * Wo2;
          for (int64_t i = 0; i < Ho2 * Wo2; ++i) acc += go[i];
          bn->grad[o] += acc;
        }
      }
      if (xn.requires_grad) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        gemm_tn(ckk2, O2, Ho2 * Wo2, wn.value.data(), g, dcol.data());
        col2im_add(dcol.data(), C2, H2, W2, kh2, kw2, stride2, pad2, Ho2, Wo2,
                   xn.grad.data() + s * C2 * H2 * W2);
      }
    }
  });
}

NodePtr avgpool2(const NodePtr& x) {
  const Tensor& xv = x->value;
  if (xv.rank() != 4) fail(Err::BadShape, "avgpool2: expects NCHW");
  int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H % 2 != 0 || W % 2 != 0) fail(Err::BadShape, "avgpool2: spatial extents must be even");
  Tensor out({N, C, H / 2, W / 2});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* in = xv.data() + nc * H * W;
    double* o = out.data() + nc * (H / 2) * (W / 2);
    for (int64_t y = 0; y < H / 2; ++y)
      for (int64_t xo = 0; xo < W / 2; ++xo)
        o[y * (W / 2) + xo] = 0.25 * (in[(2 * y) * W + 2 * xo] + in[(2 * y) * W + 2 * xo + 1] +
                                      in[(2 * y + 1) * W + 2 * xo] + in[(2 * y + 1) * W + 2 * xo + 1]);
  }
  return new_node("avgpool2", std::move(out), {x}, [N, C, H, W](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      const double* g = n.grad.data() + nc * (H / 2) * (W / 2);
      double* d = p.grad.data() + nc * H * W;
      for (int64_t y = 0; y < H / 2; ++y)
        for (int64_t xo = 0; xo < W / 2; ++xo) {
          double v = 0.25 * g[y * (W / 2) + xo];
          d[(2 * y) * W + 2 * xo] += v;
          d[(2 * y) * W + 2 * xo + 1] += v;
          d[(2 * y + 1) * W + 2 * xo] += v;
          d[(2 * y + 1) * W + 2 * xo + 1] += v;
        }
    }
  });
}

NodePtr nearest_upsample2(const NodePtr& x) {
  const Tensor& xv = x->value;
  if (xv.rank() != 4) fail(Err::BadShape, "nearest_upsample2: expects NCHW");
  int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor out({N, C, H * 2, W * 2});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* in = xv.data() + nc * H * W;
    double* o = out.data() + nc * 4 * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xo = 0; xo < W; ++xo) {
        double v = in[y * W + xo];
        o[(2 * y) * 2 * W + 2 * xo] = v;
        o[(2 * y) * 2 * W + 2 * xo + 1] = v;
        o[(2 * y + 1) * 2 * W + 2 * xo] = v;
        o[(2 * y + 1) * 2 * W + 2 * xo + 1] = v;
      }
  }
  return new_node("nearest_upsample2", std::move(out), {x}, [N, C, H, W](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      const double* g = n.grad.data() + nc * 4 * H * W;
      double* d = p.grad.data() + nc * H * W;
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xo = 0; xo < W; ++xo)
          d[y * W + xo] += g[(2 * y) * 2 * W + 2 * xo] + g[(2 * y) * 2 * W + 2 * xo + 1] +
                           g[(2 * y + 1) * 2 * W + 2 * xo] + g[(2 * y + 1) * 2 * W + 2 * xo + 1];
    }
  });
}

namespace {

template <typename F, typename DF>
NodePtr unary_op(const char* name, const NodePtr& a, F f, DF df) {
  Tensor out(a->value.shape());
  const double* pa = a->value.data();
  double* po = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) po[i] = f(pa[i]);
  return new_node(name, std::move(out), {a}, [df](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    const double* g = n.grad.data();
    const double* x = p.value.data();
    const double* y = n.value.data();
    double* d = p.grad.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) d[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace

NodePtr relu(const NodePtr& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

NodePtr leaky_relu(const NodePtr& a, double slope) {
  return unary_op(
      "leaky_relu", a, [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

NodePtr tanh_op(const NodePtr& a) {
  return unary_op(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

NodePtr sigmoid(const NodePtr& a) {
  return unary_op(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

NodePtr exp_op(const NodePtr& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

NodePtr log_op(const NodePtr& a) {
  const double* pa = a->value.data();
  for (int64_t i = 0; i < a->value.numel(); ++i)
    if (pa[i] <= 0.0) fail(Err::DomainError, "log of nonpositive value");
  return unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

NodePtr softmax_channels(const NodePtr& logits) {
  const Tensor& lv = logits->value;
  if (lv.rank() != 4) fail(Err::BadShape, "softmax_channels: expects NCHW");
  int64_t N = lv.dim(0), C = lv.dim(1), H = lv.dim(2), W = lv.dim(3);
  if (C < 2) fail(Err::BadShape, "softmax_channels: needs C >= 2");
  int64_t HW = H * W;
  Tensor out(lv.shape());
  for (int64_t n = 0; n < N; ++n) {
    const double* ln = lv.data() + n * C * HW;
    double* on = out.data() + n * C * HW;
    for (int64_t p = 0; p < HW; ++p) {
      double mx = ln[p];
      for (int64_t c = 1; c < C; ++c) mx = std::max(mx, ln[c * HW + p]);
      double acc = 0.0;
      for (int64_t c = 0; c < C; ++c) acc += std::exp(ln[c * HW + p] - mx);
      double lse = mx + std::log(acc);
      for (int64_t c = 0; c < C; ++c) on[c * HW + p] = std::exp(ln[c * HW + p] - lse);
    }
  }
  return new_node("softmax_channels", std::move(out), {logits}, [N, C, HW](Node& n) {
    Node& p = *n.parents[0];
    p.ensure_grad();
    for (int64_t s = 0; s < N; ++s) {
      const double* y = n.value.data() + s * C * HW;
      const double* g = n.grad.data() + s * C * HW;
      double* d = p.grad.data() + s * C * HW;
      for (int64_t px = 0; px < HW; ++px) {
        double dot = 0.0;
        for (int64_t c = 0; c < C; ++c) dot += g[c * HW + px] * y[c * HW + px];
        for (int64_t c = 0; c < C; ++c) d[c * HW + px] += y[c * HW + px] * (g[c * HW + px] - dot);
      }
    }
  });
}

NodePtr logdet(const NodePtr& m) {
  const Tensor& mv = m->value;
  if (mv.rank() != 2 || mv.dim(0) != mv.dim(1)) fail(Err::BadShape, "logdet: expects a square matrix");
  int64_t n = mv.dim(0);
  LuResult lu = lu_factor(mv.data(), n);
  if (lu.sign == 0 || std::exp(lu.log_abs_det) <= 1e-8)
    fail(Err::SingularMix, "|det| <= 1e-8");
  auto inv = std::make_shared<std::vector<double>>(lu_inverse(lu, n));
  return new_node("logdet", Tensor::scalar(lu.log_abs_det), {m}, [inv, n](Node& nd) {
    Node& p = *nd.parents[0];
    p.ensure_grad();
    double g = nd.grad[0];
    const double* iv = inv->data();
    double* d = p.grad.data();
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < n; ++c) d[r * n + c] += g * iv[c * n + r];
  });
}

void backward(const NodePtr& loss) {
  if (loss->value.numel() != 1) fail(Err::BadShape, "backward: loss must be scalar");
  if (!loss->requires_grad) return;

  // Iterative post-order DFS over the grad-requiring subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* parent = node->parents[idx].get();
      ++idx;
      if (parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are per-sweep scratch; leaf grads persist and accumulate.
  for (Node* n : order) {
    if (n->backward_fn) {
      n->ensure_grad();
      std::fill(n->grad.vec().begin(), n->grad.vec().end(), 0.0);
    }
  }
  Node* root = loss.get();
  root->ensure_grad();
  if (!root->backward_fn) {
    root->grad[0] += 1.0;
    return;
  }
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace condacl
