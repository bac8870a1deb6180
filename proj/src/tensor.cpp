#include "tlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace tlab {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::relu: return "relu";
    case OpKind::softmax: return "softmax";
    case OpKind::log: return "log";
    case OpKind::mse_loss: return "mse_loss";
    case OpKind::cross_entropy_loss: return "cross_entropy_loss";
    case OpKind::kl_loss: return "kl_loss";
    case OpKind::hinge_loss: return "hinge_loss";
    case OpKind::reshape: return "reshape";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::clamp: return "clamp";
    case OpKind::scale: return "scale";
    case OpKind::pick: return "pick";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_finite(const TensorNode* p, const char* op) {
  if (!p->values.allFinite())
    throw NonFiniteError(std::string(op) + ": non-finite input values");
}

std::shared_ptr<TensorNode> new_op(OpKind op, Shape shape,
                                   std::vector<std::shared_ptr<TensorNode>> parents) {
  auto n = std::make_shared<TensorNode>();
  n->op = op;
  n->shape = std::move(shape);
  n->parents = std::move(parents);
  for (auto& p : n->parents)
    if (p->needs_grad) n->needs_grad = true;
  n->values.resize(numel(n->shape));
  return n;
}

// --- forward ---------------------------------------------------------------

void forward_matmul(TensorNode* n) {
  const auto& a = *n->parents[0];
  const auto& b = *n->parents[1];
  long m = a.shape[0], k = a.shape[1], c = b.shape[1];
  MapCRMat A(a.values.data(), m, k), B(b.values.data(), k, c);
  MapRMat O(n->values.data(), m, c);
  O.noalias() = A * B;
}

void forward_conv2d(TensorNode* n) {
  const auto& xs = n->parents[0]->shape;
  const auto& ks = n->parents[1]->shape;
  const long B = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  const long Co = ks[0], kh = ks[2], kw = ks[3];
  const long Ho = n->shape[2], Wo = n->shape[3];
  const int st = n->stride, pad = n->pad;
  const double* X = n->parents[0]->values.data();
  const double* K = n->parents[1]->values.data();
  double* O = n->values.data();
  for (long b = 0; b < B; ++b)
    for (long co = 0; co < Co; ++co) {
      double* oplane = O + ((b * Co + co) * Ho) * Wo;
      std::fill(oplane, oplane + Ho * Wo, 0.0);
      for (long ci = 0; ci < Ci; ++ci)
        for (long r = 0; r < kh; ++r)
          for (long oh = 0; oh < Ho; ++oh) {
            long ih = oh * st - pad + r;
            if (ih < 0 || ih >= H) continue;
            const double* xrow = X + ((b * Ci + ci) * H + ih) * W;
            double* orow = oplane + oh * Wo;
            for (long s = 0; s < kw; ++s) {
              double kv = K[((co * Ci + ci) * kh + r) * kw + s];
              long lo = 0;
              while (lo < Wo && lo * st - pad + s < 0) ++lo;
              long hi = Wo - 1;
              while (hi >= lo && hi * st - pad + s >= W) --hi;
              for (long ow = lo; ow <= hi; ++ow) orow[ow] += kv * xrow[ow * st - pad + s];
            }
          }
    }
}

void forward_add(TensorNode* n) {
  const auto& a = *n->parents[0];
  const auto& b = *n->parents[1];
  if (a.shape == b.shape) {
    n->values = a.values + b.values;
  } else if (a.shape.size() == 2) {  // [B,K] + [K]
    long m = a.shape[0], k = a.shape[1];
    MapCRMat A(a.values.data(), m, k);
    MapRMat O(n->values.data(), m, k);
    O = A;
    O.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.values.data(), k);
  } else {  // [B,C,H,W] + [C]
    long B = a.shape[0], C = a.shape[1], plane = long(a.shape[2]) * a.shape[3];
    n->values = a.values;
    double* O = n->values.data();
    for (long i = 0; i < B; ++i)
      for (long c = 0; c < C; ++c) {
        double bias = b.values[c];
        double* p = O + (i * C + c) * plane;
        for (long j = 0; j < plane; ++j) p[j] += bias;
      }
  }
}

void forward_softmax(TensorNode* n) {
  const auto& a = *n->parents[0];
  long rows = a.shape.size() == 2 ? a.shape[0] : 1;
  long k = a.shape.back();
  for (long r = 0; r < rows; ++r) {
    Eigen::Map<const Eigen::ArrayXd> z(a.values.data() + r * k, k);
    Eigen::Map<Eigen::ArrayXd> o(n->values.data() + r * k, k);
    double m = z.maxCoeff();
    o = (z - m).exp();
    o /= o.sum();
  }
}

void forward_cross_entropy(TensorNode* n) {
  const auto& z = *n->parents[0];
  require_finite(&z, "cross_entropy_loss");
  long rows = z.shape[0], k = z.shape[1];
  double total = 0;
  for (long r = 0; r < rows; ++r) {
    Eigen::Map<const Eigen::ArrayXd> row(z.values.data() + r * k, k);
    double m = row.maxCoeff();
    double lse = m + std::log((row - m).exp().sum());
    total += lse - row[n->labels[size_t(r)]];
  }
  n->values[0] = total / double(rows);
}

void forward_kl(TensorNode* n) {
  const auto& p = *n->parents[0];
  const auto& q = *n->parents[1];
  require_finite(&p, "kl_loss");
  require_finite(&q, "kl_loss");
  long rows = p.shape.size() == 2 ? p.shape[0] : 1;
  double total = 0;
  for (long i = 0; i < long(p.values.size()); ++i) {
    double pi = p.values[i];
    if (pi != 0.0) total += pi * std::log(pi / q.values[i]);
  }
  n->values[0] = total / double(rows);
}

void forward_hinge(TensorNode* n) {
  const auto& f = *n->parents[0];
  require_finite(&f, "hinge_loss");
  long rows = long(f.values.size());
  double total = 0;
  for (long r = 0; r < rows; ++r)
    total += std::max(0.0, 1.0 - n->sign_labels[size_t(r)] * f.values[r]);
  n->values[0] = total / double(rows);
}

void compute(TensorNode* n) {
  switch (n->op) {
    case OpKind::leaf:
      break;
    case OpKind::matmul:
      forward_matmul(n);
      break;
    case OpKind::conv2d:
      forward_conv2d(n);
      break;
    case OpKind::add:
      forward_add(n);
      break;
    case OpKind::mul:
      n->values = n->parents[0]->values * n->parents[1]->values;
      break;
    case OpKind::relu:
      n->values = n->parents[0]->values.max(0.0);
      break;
    case OpKind::softmax:
      forward_softmax(n);
      break;
    case OpKind::log:
      n->values = n->parents[0]->values.log();
      break;
    case OpKind::mse_loss: {
      require_finite(n->parents[0].get(), "mse_loss");
      require_finite(n->parents[1].get(), "mse_loss");
      n->values[0] = (n->parents[0]->values - n->parents[1]->values).square().mean();
      break;
    }
    case OpKind::cross_entropy_loss:
      forward_cross_entropy(n);
      break;
    case OpKind::kl_loss:
      forward_kl(n);
      break;
    case OpKind::hinge_loss:
      forward_hinge(n);
      break;
    case OpKind::reshape:
      n->values = n->parents[0]->values;
      break;
    case OpKind::mean:
      n->values[0] = n->parents[0]->values.mean();
      break;
    case OpKind::sum:
      n->values[0] = n->parents[0]->values.sum();
      break;
    case OpKind::clamp:
      n->values = n->parents[0]->values.max(n->lo).min(n->hi);
      break;
    case OpKind::scale:
      n->values = n->factor * n->parents[0]->values;
      break;
    case OpKind::pick: {
      long k = n->parents[0]->shape[1];
      for (long b = 0; b < long(n->values.size()); ++b)
        n->values[b] = n->parents[0]->values[b * k + n->labels[size_t(b)]];
      break;
    }
  }
}

// --- backward --------------------------------------------------------------

void backward_matmul(TensorNode* n) {
  auto& a = *n->parents[0];
  auto& b = *n->parents[1];
  long m = a.shape[0], k = a.shape[1], c = b.shape[1];
  MapCRMat A(a.values.data(), m, k), B(b.values.data(), k, c), G(n->grad.data(), m, c);
  if (a.needs_grad) MapRMat(a.grad.data(), m, k).noalias() += G * B.transpose();
  if (b.needs_grad) MapRMat(b.grad.data(), k, c).noalias() += A.transpose() * G;
}

void backward_conv2d(TensorNode* n) {
  auto& x = *n->parents[0];
  auto& kk = *n->parents[1];
  const long B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const long Co = kk.shape[0], kh = kk.shape[2], kw = kk.shape[3];
  const long Ho = n->shape[2], Wo = n->shape[3];
  const int st = n->stride, pad = n->pad;
  const double* X = x.values.data();
  const double* K = kk.values.data();
  const double* G = n->grad.data();
  double* DX = x.needs_grad ? x.grad.data() : nullptr;
  double* DK = kk.needs_grad ? kk.grad.data() : nullptr;
  for (long b = 0; b < B; ++b)
    for (long co = 0; co < Co; ++co)
      for (long ci = 0; ci < Ci; ++ci)
        for (long r = 0; r < kh; ++r)
          for (long oh = 0; oh < Ho; ++oh) {
            long ih = oh * st - pad + r;
            if (ih < 0 || ih >= H) continue;
            const double* grow = G + ((b * Co + co) * Ho + oh) * Wo;
            const double* xrow = X + ((b * Ci + ci) * H + ih) * W;
            double* dxrow = DX ? DX + ((b * Ci + ci) * H + ih) * W : nullptr;
            for (long s = 0; s < kw; ++s) {
              long lo = 0;
              while (lo < Wo && lo * st - pad + s < 0) ++lo;
              long hi = Wo - 1;
              while (hi >= lo && hi * st - pad + s >= W) --hi;
              double kv = K[((co * Ci + ci) * kh + r) * kw + s];
              double kacc = 0;
              for (long ow = lo; ow <= hi; ++ow) {
                long iw = ow * st - pad + s;
                if (dxrow) dxrow[iw] += kv * grow[ow];
                kacc += grow[ow] * xrow[iw];
              }
              if (DK) DK[((co * Ci + ci) * kh + r) * kw + s] += kacc;
            }
          }
}

void backward_add(TensorNode* n) {
  auto& a = *n->parents[0];
  auto& b = *n->parents[1];
  if (a.needs_grad) a.grad += n->grad;
  if (!b.needs_grad) return;
  if (a.shape == b.shape) {
    b.grad += n->grad;
  } else if (a.shape.size() == 2) {
    long m = a.shape[0], k = a.shape[1];
    MapCRMat G(n->grad.data(), m, k);
    Eigen::Map<Eigen::RowVectorXd>(b.grad.data(), k) += G.colwise().sum();
  } else {
    long B = a.shape[0], C = a.shape[1], plane = long(a.shape[2]) * a.shape[3];
    const double* G = n->grad.data();
    for (long i = 0; i < B; ++i)
      for (long c = 0; c < C; ++c) {
        const double* g = G + (i * C + c) * plane;
        double acc = 0;
        for (long j = 0; j < plane; ++j) acc += g[j];
        b.grad[c] += acc;
      }
  }
}

void backward_softmax(TensorNode* n) {
  auto& a = *n->parents[0];
  long rows = a.shape.size() == 2 ? a.shape[0] : 1;
  long k = a.shape.back();
  for (long r = 0; r < rows; ++r) {
    Eigen::Map<const Eigen::ArrayXd> s(n->values.data() + r * k, k);
    Eigen::Map<const Eigen::ArrayXd> g(n->grad.data() + r * k, k);
    Eigen::Map<Eigen::ArrayXd> da(a.grad.data() + r * k, k);
    double dot = (g * s).sum();
    da += (g - dot) * s;
  }
}

void backward_cross_entropy(TensorNode* n) {
  auto& z = *n->parents[0];
  long rows = z.shape[0], k = z.shape[1];
  double g = n->grad[0] / double(rows);
  for (long r = 0; r < rows; ++r) {
    Eigen::Map<const Eigen::ArrayXd> row(z.values.data() + r * k, k);
    Eigen::Map<Eigen::ArrayXd> dz(z.grad.data() + r * k, k);
    double m = row.maxCoeff();
    Eigen::ArrayXd sm = (row - m).exp();
    sm /= sm.sum();
    dz += g * sm;
    dz[n->labels[size_t(r)]] -= g;
  }
}

void backward_kl(TensorNode* n) {
  auto& p = *n->parents[0];
  auto& q = *n->parents[1];
  long rows = p.shape.size() == 2 ? p.shape[0] : 1;
  double g = n->grad[0] / double(rows);
  for (long i = 0; i < long(p.values.size()); ++i) {
    double pi = p.values[i], qi = q.values[i];
    if (p.needs_grad && pi != 0.0) p.grad[i] += g * (std::log(pi / qi) + 1.0);
    if (q.needs_grad && pi != 0.0) q.grad[i] -= g * pi / qi;
  }
}

void backward_hinge(TensorNode* n) {
  auto& f = *n->parents[0];
  long rows = long(f.values.size());
  double g = n->grad[0] / double(rows);
  for (long r = 0; r < rows; ++r) {
    double y = n->sign_labels[size_t(r)];
    if (1.0 - y * f.values[r] > 0.0) f.grad[r] -= g * y;
  }
}

void backprop(TensorNode* n) {
  switch (n->op) {
    case OpKind::leaf:
      break;
    case OpKind::matmul:
      backward_matmul(n);
      break;
    case OpKind::conv2d:
      backward_conv2d(n);
      break;
    case OpKind::add:
      backward_add(n);
      break;
    case OpKind::mul: {
      auto& a = *n->parents[0];
      auto& b = *n->parents[1];
      if (a.needs_grad) a.grad += n->grad * b.values;
      if (b.needs_grad) b.grad += n->grad * a.values;
      break;
    }
    case OpKind::relu: {
      auto& a = *n->parents[0];
      a.grad += n->grad * (a.values > 0.0).cast<double>();
      break;
    }
    case OpKind::softmax:
      backward_softmax(n);
      break;
    case OpKind::log: {
      auto& a = *n->parents[0];
      a.grad += n->grad / a.values;
      break;
    }
    case OpKind::mse_loss: {
      auto& a = *n->parents[0];
      auto& b = *n->parents[1];
      double c = 2.0 * n->grad[0] / double(a.values.size());
      Array diff = a.values - b.values;
      if (a.needs_grad) a.grad += c * diff;
      if (b.needs_grad) b.grad -= c * diff;
      break;
    }
    case OpKind::cross_entropy_loss:
      backward_cross_entropy(n);
      break;
    case OpKind::kl_loss:
      backward_kl(n);
      break;
    case OpKind::hinge_loss:
      backward_hinge(n);
      break;
    case OpKind::reshape:
      n->parents[0]->grad += n->grad;
      break;
    case OpKind::mean:
      n->parents[0]->grad += n->grad[0] / double(n->parents[0]->values.size());
      break;
    case OpKind::sum:
      n->parents[0]->grad += n->grad[0];
      break;
    case OpKind::clamp: {
      auto& a = *n->parents[0];
      a.grad += n->grad * ((a.values > n->lo) && (a.values < n->hi)).cast<double>();
      break;
    }
    case OpKind::scale:
      n->parents[0]->grad += n->factor * n->grad;
      break;
    case OpKind::pick: {
      auto& z = *n->parents[0];
      long k = z.shape[1];
      for (long b = 0; b < long(n->values.size()); ++b)
        z.grad[b * k + n->labels[size_t(b)]] += n->grad[b];
      break;
    }
  }
}

}  // namespace

// --- Tensor handle ---------------------------------------------------------

Tensor Tensor::leaf(Shape shape, bool requires_grad, std::string name) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->requires_grad = n->needs_grad = requires_grad;
  n->name = std::move(name);
  n->values = Array::Zero(numel(n->shape));
  return Tensor(n);
}

Tensor Tensor::from(const Array& data, Shape shape, bool requires_grad, std::string name) {
  if (long(data.size()) != numel(shape))
    shape_fail("leaf", "data has " + std::to_string(data.size()) + " elements, shape " +
                           shape_str(shape) + " wants " + std::to_string(numel(shape)));
  Tensor t = leaf(std::move(shape), requires_grad, std::move(name));
  t.node()->values = data;
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t = leaf(Shape{});
  t.node()->values[0] = v;
  return t;
}

void Tensor::set_values(const Array& data) {
  if (long(data.size()) != size())
    shape_fail("set_values", "got " + std::to_string(data.size()) + " elements for shape " +
                                 shape_str(shape()));
  node_->values = data;
}

double Tensor::item() const {
  if (size() != 1) shape_fail("item", "tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->values[0];
}

// --- op constructors -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    shape_fail("matmul", "expects rank-2 operands, got " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  if (a.shape()[1] != b.shape()[0])
    shape_fail("matmul",
               "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  auto n = new_op(OpKind::matmul, {a.shape()[0], b.shape()[1]}, {a.ptr(), b.ptr()});
  compute(n.get());
  return Tensor(n);
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad) {
  if (x.rank() != 4 || kernel.rank() != 4)
    shape_fail("conv2d", "expects rank-4 input and kernel, got " + shape_str(x.shape()) + " * " +
                             shape_str(kernel.shape()));
  if (x.shape()[1] != kernel.shape()[1])
    shape_fail("conv2d", "channel mismatch: input " + shape_str(x.shape()) + ", kernel " +
                             shape_str(kernel.shape()));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
  int H = x.shape()[2], W = x.shape()[3], kh = kernel.shape()[2], kw = kernel.shape()[3];
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    shape_fail("conv2d", "kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                             shape_str(x.shape()));
  auto n = new_op(OpKind::conv2d, {x.shape()[0], kernel.shape()[0], Ho, Wo},
                  {x.ptr(), kernel.ptr()});
  n->stride = stride;
  n->pad = pad;
  compute(n.get());
  return Tensor(n);
}

Tensor add(const Tensor& a, const Tensor& b) {
  bool ok = a.shape() == b.shape();
  if (!ok && b.rank() == 1) {
    if (a.rank() == 2 && b.shape()[0] == a.shape()[1]) ok = true;       // row bias
    else if (a.rank() == 4 && b.shape()[0] == a.shape()[1]) ok = true;  // channel bias
  }
  if (!ok)
    shape_fail("add", "incompatible shapes " + shape_str(a.shape()) + " + " +
                          shape_str(b.shape()));
  auto n = new_op(OpKind::add, a.shape(), {a.ptr(), b.ptr()});
  compute(n.get());
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail("mul", "shape mismatch " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  auto n = new_op(OpKind::mul, a.shape(), {a.ptr(), b.ptr()});
  compute(n.get());
  return Tensor(n);
}

Tensor relu(const Tensor& a) {
  auto n = new_op(OpKind::relu, a.shape(), {a.ptr()});
  compute(n.get());
  return Tensor(n);
}

Tensor softmax(const Tensor& a, int axis) {
  if (a.rank() < 1 || a.rank() > 2)
    shape_fail("softmax", "expects rank 1 or 2, got " + shape_str(a.shape()));
  if (!(axis == -1 || axis == a.rank() - 1))
    throw std::invalid_argument("softmax: only the last axis is supported");
  auto n = new_op(OpKind::softmax, a.shape(), {a.ptr()});
  compute(n.get());
  return Tensor(n);
}

Tensor log(const Tensor& a) {
  auto n = new_op(OpKind::log, a.shape(), {a.ptr()});
  compute(n.get());
  return Tensor(n);
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail("mse_loss", "shape mismatch " + shape_str(a.shape()) + " vs " +
                               shape_str(b.shape()));
  auto n = new_op(OpKind::mse_loss, Shape{}, {a.ptr(), b.ptr()});
  compute(n.get());
  return Tensor(n);
}

Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2)
    shape_fail("cross_entropy_loss", "expects rank-2 logits, got " + shape_str(logits.shape()));
  if (long(labels.size()) != logits.shape()[0])
    shape_fail("cross_entropy_loss",
               std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
  for (int y : labels)
    if (y < 0 || y >= logits.shape()[1])
      throw std::invalid_argument("cross_entropy_loss: label " + std::to_string(y) +
                                  " out of range for " + shape_str(logits.shape()));
  auto n = new_op(OpKind::cross_entropy_loss, Shape{}, {logits.ptr()});
  n->labels = labels;
  compute(n.get());
  return Tensor(n);
}

Tensor kl_loss(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape())
    shape_fail("kl_loss", "shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
  if (p.rank() < 1 || p.rank() > 2)
    shape_fail("kl_loss", "expects rank 1 or 2, got " + shape_str(p.shape()));
  auto n = new_op(OpKind::kl_loss, Shape{}, {p.ptr(), q.ptr()});
  compute(n.get());
  return Tensor(n);
}

Tensor hinge_loss(const Tensor& scores, const std::vector<double>& sign_labels) {
  bool ok = scores.rank() == 1 || (scores.rank() == 2 && scores.shape()[1] == 1);
  if (!ok) shape_fail("hinge_loss", "expects [B] or [B,1] scores, got " + shape_str(scores.shape()));
  if (long(sign_labels.size()) != scores.size())
    shape_fail("hinge_loss", std::to_string(sign_labels.size()) + " labels for scores " +
                                 shape_str(scores.shape()));
  for (double y : sign_labels)
    if (y != 1.0 && y != -1.0)
      throw std::invalid_argument("hinge_loss: labels must be +1 or -1");
  auto n = new_op(OpKind::hinge_loss, Shape{}, {scores.ptr()});
  n->sign_labels = sign_labels;
  compute(n.get());
  return Tensor(n);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    shape_fail("reshape", shape_str(a.shape()) + " -> " + shape_str(shape) +
                              " changes element count");
  auto n = new_op(OpKind::reshape, std::move(shape), {a.ptr()});
  compute(n.get());
  return Tensor(n);
}

Tensor mean(const Tensor& a) {
  auto n = new_op(OpKind::mean, Shape{}, {a.ptr()});
  compute(n.get());
  return Tensor(n);
}

Tensor sum(const Tensor& a) {
  auto n = new_op(OpKind::sum, Shape{}, {a.ptr()});
  compute(n.get());
  return Tensor(n);
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must be <= hi");
  auto n = new_op(OpKind::clamp, a.shape(), {a.ptr()});
  n->lo = lo;
  n->hi = hi;
  compute(n.get());
  return Tensor(n);
}

Tensor scale(const Tensor& a, double factor) {
  auto n = new_op(OpKind::scale, a.shape(), {a.ptr()});
  n->factor = factor;
  compute(n.get());
  return Tensor(n);
}

Tensor pick(const Tensor& t, const std::vector<int>& labels) {
  if (t.rank() != 2) shape_fail("pick", "expects rank-2 input, got " + shape_str(t.shape()));
  if (long(labels.size()) != t.shape()[0])
    shape_fail("pick", std::to_string(labels.size()) + " indices for " + shape_str(t.shape()));
  for (int y : labels)
    if (y < 0 || y >= t.shape()[1])
      throw std::invalid_argument("pick: index " + std::to_string(y) + " out of range for " +
                                  shape_str(t.shape()));
  auto n = new_op(OpKind::pick, {t.shape()[0]}, {t.ptr()});
  n->labels = labels;
  compute(n.get());
  return Tensor(n);
}

// --- graph execution -------------------------------------------------------

std::vector<TensorNode*> topo_order(const Tensor& root) {
  std::vector<TensorNode*> order;
  if (!root.valid()) return order;
  struct Frame {
    TensorNode* n;
    size_t next;
  };
  std::unordered_set<TensorNode*> seen;
  std::vector<Frame> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode* p = f.n->parents[f.next++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  return order;
}

void evaluate(const Tensor& root) {
  for (TensorNode* n : topo_order(root))
    if (n->op != OpKind::leaf) compute(n);
}

void backward(const Tensor& root) {
  if (root.size() != 1)
    shape_fail("backward", "root of shape " + shape_str(root.shape()) + " is not scalar");
  if (!std::isfinite(root.values()[0]))
    throw NonFiniteError("backward: root value is not finite");
  auto order = topo_order(root);
  for (TensorNode* n : order) {
    if (n->needs_grad || n == root.node()) {
      n->grad.resize(n->values.size());
      n->grad.setZero();
    }
  }
  root.node()->grad[0] = 1.0;
  // Only nodes on a path to a grad-requiring leaf participate; single-parent
  // ops rely on needs_grad(node) == needs_grad(parent), multi-parent ops guard
  // each parent individually.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->op != OpKind::leaf && n->needs_grad) backprop(n);
  }
}

uint64_t branch_signature(const Tensor& root) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&h](unsigned char b) { h = fnv1a64(&b, 1, h); };
  for (TensorNode* n : topo_order(root)) {
    switch (n->op) {
      case OpKind::relu: {
        const Array& v = n->parents[0]->values;
        for (long i = 0; i < long(v.size()); ++i) feed(v[i] > 0.0 ? 1 : 0);
        break;
      }
      case OpKind::clamp: {
        const Array& v = n->parents[0]->values;
        for (long i = 0; i < long(v.size()); ++i)
          feed(v[i] <= n->lo ? 0 : (v[i] >= n->hi ? 2 : 1));
        break;
      }
      case OpKind::hinge_loss: {
        const Array& v = n->parents[0]->values;
        for (long i = 0; i < long(v.size()); ++i)
          feed(1.0 - n->sign_labels[size_t(i)] * v[i] > 0.0 ? 1 : 0);
        break;
      }
      default:
        break;
    }
  }
  return h;
}

// --- finite differences ----------------------------------------------------

FdReport finite_diff_check(const Tensor& root, const std::vector<Tensor>& leaves, double h) {
  FdReport rep;
  evaluate(root);
  backward(root);
  std::vector<Array> analytic;
  analytic.reserve(leaves.size());
  for (const Tensor& l : leaves) {
    if (!l.requires_grad())
      throw std::invalid_argument("finite_diff_check: leaf '" + l.name() +
                                  "' does not require grad");
    analytic.push_back(l.grad());
  }
  for (size_t li = 0; li < leaves.size(); ++li) {
    Array& v = leaves[li].node()->values;
    for (long i = 0; i < long(v.size()); ++i) {
      double orig = v[i];
      v[i] = orig + h;
      evaluate(root);
      double fp = root.values()[0];
      uint64_t sp = branch_signature(root);
      v[i] = orig - h;
      evaluate(root);
      double fm = root.values()[0];
      uint64_t sm = branch_signature(root);
      v[i] = orig;
      if (sp != sm) {
        ++rep.skipped;
        continue;
      }
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[li][i];
      double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = leaves[li].name() + "[" + std::to_string(i) + "]";
      }
    }
  }
  evaluate(root);  // restore downstream values
  return rep;
}

}  // namespace tlab
