#include "smile/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "smile/errors.hpp"

namespace smile::ad {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kMatMul: return "matmul";
    case Op::kAddBias: return "add_bias";
    case Op::kConv2d: return "conv2d";
    case Op::kRelu: return "relu";
    case Op::kGlobalAvgPool: return "global_avg_pool";
    case Op::kMean: return "mean";
    case Op::kSumSquares: return "sum_squares";
    case Op::kSoftmax: return "softmax";
    case Op::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Op::kCustom: return "custom";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("value() on an unbound Var");
  return tape_->value(*this);
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::parameter(Tensor value) {
  Var v = record(Op::kLeaf, {}, std::move(value), nullptr);
  nodes_.back().requires_grad = true;
  return v;
}

Var Tape::constant(Tensor value) { return record(Op::kLeaf, {}, std::move(value), nullptr); }

Var Tape::record(Op op, std::span<const Var> inputs, Tensor value, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string("non-finite output from ") + std::string(op_name(op)));
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw std::logic_error("operand belongs to a different tape");
    n.inputs.push_back(in.id_);
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var root) {
  const Node& r = node(root);
  if (r.value.size() != 1) {
    throw ShapeError("backward root must be scalar, got shape " + to_string(r.value.shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  if (!r.requires_grad) return;

  Node& root_node = nodes_[root.id_];
  root_node.grad = Tensor(root_node.value.shape(), 1.0);
  root_node.has_grad = true;

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t id = root.id_ + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad || n.inputs.empty() || !n.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : n.inputs) {
      Node& src = nodes_[in];
      in_values.push_back(&src.value);
      if (src.requires_grad) {
        if (!src.has_grad) {
          src.grad = Tensor(src.value.shape(), 0.0);
          src.has_grad = true;
        }
        in_grads.push_back(&src.grad);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    // Operands may repeat (e.g. mul(x, x)); each slot accumulates separately
    // into the same buffer, which is what the chain rule requires.
    n.backward(n.grad, n.value, in_values, in_grads);
  }
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw std::logic_error("Var does not belong to this tape");
  }
  return nodes_[v.id_];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor* Tape::grad(Var v) const {
  const Node& n = node(v);
  return n.has_grad ? &n.grad : nullptr;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }
Op Tape::op(Var v) const { return node(v).op; }
std::span<const std::size_t> Tape::inputs(Var v) const { return node(v).inputs; }

// ---------------------------------------------------------------------------
// Primitives

namespace {

Tape& common_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw std::logic_error("unbound Var passed to primitive");
    if (t && v.tape() != t) throw std::logic_error("operands live on different tapes");
    t = v.tape();
  }
  return *t;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape()));
  }
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
  const double* xs = x.data();
  double* ys = y.data();
  const std::size_t n = y.size();
  for (std::size_t i = 0; i < n; ++i) ys[i] += alpha * xs[i];
}

// Row-wise log-softmax, max-subtracted.
Tensor log_softmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data() + r * cols;
    double* o = out.data() + r * cols;
    double m = *std::max_element(z, z + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(z[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) o[c] = z[c] - lse;
  }
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = common_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape("add", av, bv);
  Tensor out = av;
  axpy(1.0, bv, out);
  Var ins[] = {a, b};
  return t.record(Op::kAdd, ins, std::move(out),
                  [](const Tensor& g, const Tensor&, auto, auto grads) {
                    if (grads[0]) axpy(1.0, g, *grads[0]);
                    if (grads[1]) axpy(1.0, g, *grads[1]);
                  });
}

Var sub(Var a, Var b) {
  Tape& t = common_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape("sub", av, bv);
  Tensor out = av;
  axpy(-1.0, bv, out);
  Var ins[] = {a, b};
  return t.record(Op::kSub, ins, std::move(out),
                  [](const Tensor& g, const Tensor&, auto, auto grads) {
                    if (grads[0]) axpy(1.0, g, *grads[0]);
                    if (grads[1]) axpy(-1.0, g, *grads[1]);
                  });
}

Var mul(Var a, Var b) {
  Tape& t = common_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape("mul", av, bv);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Var ins[] = {a, b};
  return t.record(Op::kMul, ins, std::move(out),
                  [](const Tensor& g, const Tensor&, auto in, auto grads) {
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      if (grads[0]) (*grads[0])[i] += g[i] * (*in[1])[i];
                      if (grads[1]) (*grads[1])[i] += g[i] * (*in[0])[i];
                    }
                  });
}

Var scale(Var a, double factor) {
  Tape& t = common_tape({a});
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  Var ins[] = {a};
  return t.record(Op::kScale, ins, std::move(out),
                  [factor](const Tensor& g, const Tensor&, auto, auto grads) {
                    if (grads[0]) axpy(factor, g, *grads[0]);
                  });
}

Var matmul(Var a, Var b) {
  Tape& t = common_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank("matmul", av, 2);
  require_rank("matmul", bv, 2);
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(av.shape()) + " x " +
                     to_string(bv.shape()));
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += aip * brow[j];
    }
  }
  Var ins[] = {a, b};
  return t.record(Op::kMatMul, ins, std::move(out),
                  [m, k, n](const Tensor& g, const Tensor&, auto in, auto grads) {
                    const Tensor& A = *in[0];
                    const Tensor& B = *in[1];
                    if (grads[0]) {  // dA = G B^T
                      Tensor& dA = *grads[0];
                      for (std::size_t i = 0; i < m; ++i) {
                        const double* grow = g.data() + i * n;
                        for (std::size_t p = 0; p < k; ++p) {
                          const double* brow = B.data() + p * n;
                          double s = 0.0;
                          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                          dA[i * k + p] += s;
                        }
                      }
                    }
                    if (grads[1]) {  // dB = A^T G
                      Tensor& dB = *grads[1];
                      for (std::size_t i = 0; i < m; ++i) {
                        const double* grow = g.data() + i * n;
                        for (std::size_t p = 0; p < k; ++p) {
                          const double aip = A[i * k + p];
                          double* drow = dB.data() + p * n;
                          for (std::size_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
                        }
                      }
                    }
                  });
}

Var add_bias(Var x, Var bias) {
  Tape& t = common_tape({x, bias});
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_rank("add_bias", xv, 2);
  require_rank("add_bias", bv, 1);
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (bv.dim(0) != cols) {
    throw ShapeError("add_bias: bias " + to_string(bv.shape()) + " vs input " +
                     to_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  Var ins[] = {x, bias};
  return t.record(Op::kAddBias, ins, std::move(out),
                  [rows, cols](const Tensor& g, const Tensor&, auto, auto grads) {
                    if (grads[0]) axpy(1.0, g, *grads[0]);
                    if (grads[1]) {
                      Tensor& db = *grads[1];
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) db[c] += g[r * cols + c];
                    }
                  });
}

Var conv2d(Var x, Var w, Var b) {
  Tape& t = common_tape({x, w, b});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_rank("conv2d", xv, 4);
  require_rank("conv2d", wv, 4);
  require_rank("conv2d", bv, 1);
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t O = wv.dim(0), K = wv.dim(2);
  if (wv.dim(1) != C || wv.dim(3) != K || bv.dim(0) != O) {
    throw ShapeError("conv2d: kernel " + to_string(wv.shape()) + " / bias " +
                     to_string(bv.shape()) + " incompatible with input " + to_string(xv.shape()));
  }
  if (K % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);
  const std::ptrdiff_t Hs = static_cast<std::ptrdiff_t>(H), Ws = static_cast<std::ptrdiff_t>(W);

  // Visits every (output pixel row segment, kernel tap) pair with the
  // in-bounds x-range precomputed so inner loops are contiguous.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < K; ++ky)
            for (std::size_t kx = 0; kx < K; ++kx) {
              const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
              const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
              const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
              const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(Ws, Ws - dx);
              const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
              for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, -dy);
                   y < std::min<std::ptrdiff_t>(Hs, Hs - dy); ++y) {
                const std::size_t out_row = ((n * O + o) * H + static_cast<std::size_t>(y)) * W;
                const std::size_t in_row =
                    ((n * C + c) * H + static_cast<std::size_t>(y + dy)) * W;
                fn(widx, out_row, in_row, x0, x1, dx);
              }
            }
  };

  Tensor out({N, O, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      std::fill_n(out.data() + (n * O + o) * H * W, H * W, bv[o]);
  {
    double* op = out.data();
    const double* ip = xv.data();
    const double* wp = wv.data();
    for_each_tap([&](std::size_t widx, std::size_t orow, std::size_t irow, std::ptrdiff_t x0,
                     std::ptrdiff_t x1, std::ptrdiff_t dx) {
      const double k = wp[widx];
      double* o = op + orow;
      const double* in = ip + irow + dx;
      for (std::ptrdiff_t xx = x0; xx < x1; ++xx) o[xx] += k * in[xx];
    });
  }

  Var ins[] = {x, w, b};
  return t.record(
      Op::kConv2d, ins, std::move(out),
      [=](const Tensor& g, const Tensor&, auto in, auto grads) {
        const double* gp = g.data();
        const double* ip = in[0]->data();
        const double* wp = in[1]->data();
        double* dx_p = grads[0] ? grads[0]->data() : nullptr;
        double* dw_p = grads[1] ? grads[1]->data() : nullptr;
        for_each_tap([&](std::size_t widx, std::size_t orow, std::size_t irow, std::ptrdiff_t x0,
                         std::ptrdiff_t x1, std::ptrdiff_t dx) {
          const double* go = gp + orow;
          if (dx_p) {
            const double k = wp[widx];
            double* di = dx_p + irow + dx;
            for (std::ptrdiff_t xx = x0; xx < x1; ++xx) di[xx] += k * go[xx];
          }
          if (dw_p) {
            const double* iv = ip + irow + dx;
            double s = 0.0;
            for (std::ptrdiff_t xx = x0; xx < x1; ++xx) s += go[xx] * iv[xx];
            dw_p[widx] += s;
          }
        });
        if (grads[2]) {
          Tensor& db = *grads[2];
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) {
              const double* go = gp + (n * O + o) * H * W;
              double s = 0.0;
              for (std::size_t i = 0; i < H * W; ++i) s += go[i];
              db[o] += s;
            }
        }
      });
}

Var relu(Var a) {
  Tape& t = common_tape({a});
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  Var ins[] = {a};
  return t.record(Op::kRelu, ins, std::move(out),
                  [](const Tensor& g, const Tensor&, auto in, auto grads) {
                    if (!grads[0]) return;
                    const Tensor& x = *in[0];
                    for (std::size_t i = 0; i < g.size(); ++i)
                      if (x[i] > 0.0) (*grads[0])[i] += g[i];
                  });
}

Var global_avg_pool(Var x) {
  Tape& t = common_tape({x});
  const Tensor& xv = x.value();
  require_rank("global_avg_pool", xv, 4);
  const std::size_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  if (HW == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor out({N, C});
  for (std::size_t i = 0; i < N * C; ++i) {
    const double* p = xv.data() + i * HW;
    double s = 0.0;
    for (std::size_t j = 0; j < HW; ++j) s += p[j];
    out[i] = s / static_cast<double>(HW);
  }
  Var ins[] = {x};
  return t.record(Op::kGlobalAvgPool, ins, std::move(out),
                  [N, C, HW](const Tensor& g, const Tensor&, auto, auto grads) {
                    if (!grads[0]) return;
                    double* d = grads[0]->data();
                    const double inv = 1.0 / static_cast<double>(HW);
                    for (std::size_t i = 0; i < N * C; ++i) {
                      const double gi = g[i] * inv;
                      for (std::size_t j = 0; j < HW; ++j) d[i * HW + j] += gi;
                    }
                  });
}

Var mean(Var a) {
  Tape& t = common_tape({a});
  const Tensor& av = a.value();
  if (av.empty()) throw ShapeError("mean of an empty tensor");
  double s = 0.0;
  for (double v : av.values()) s += v;
  const double n = static_cast<double>(av.size());
  Var ins[] = {a};
  return t.record(Op::kMean, ins, Tensor::scalar(s / n),
                  [n](const Tensor& g, const Tensor&, auto, auto grads) {
                    if (!grads[0]) return;
                    const double gi = g[0] / n;
                    for (double& d : grads[0]->values()) d += gi;
                  });
}

Var sum_squares(Var a) {
  Tape& t = common_tape({a});
  double s = 0.0;
  for (double v : a.value().values()) s += v * v;
  Var ins[] = {a};
  return t.record(Op::kSumSquares, ins, Tensor::scalar(s),
                  [](const Tensor& g, const Tensor&, auto in, auto grads) {
                    if (grads[0]) axpy(2.0 * g[0], *in[0], *grads[0]);
                  });
}

Var softmax(Var logits) {
  Tape& t = common_tape({logits});
  const Tensor& z = logits.value();
  require_rank("softmax", z, 2);
  Tensor out = log_softmax_rows(z);
  for (double& v : out.values()) v = std::exp(v);
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  Var ins[] = {logits};
  return t.record(Op::kSoftmax, ins, std::move(out),
                  [rows, cols](const Tensor& g, const Tensor& p, auto, auto grads) {
                    if (!grads[0]) return;
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* pr = p.data() + r * cols;
                      const double* gr = g.data() + r * cols;
                      double dot = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * pr[c];
                      double* d = grads[0]->data() + r * cols;
                      for (std::size_t c = 0; c < cols; ++c) d[c] += pr[c] * (gr[c] - dot);
                    }
                  });
}

Var softmax_cross_entropy(Var logits, Var target) {
  Tape& t = common_tape({logits, target});
  const Tensor& z = logits.value();
  const Tensor& y = target.value();
  require_rank("softmax_cross_entropy", z, 2);
  require_same_shape("softmax_cross_entropy", z, y);
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  if (rows == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = y[r * cols + c];
      if (v < -1e-9) throw std::invalid_argument("softmax_cross_entropy: negative target mass");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw std::invalid_argument("softmax_cross_entropy: target row " + std::to_string(r) +
                                  " sums to " + std::to_string(s));
    }
  }
  Tensor logp = log_softmax_rows(z);
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) loss -= y[i] * logp[i];
  loss /= static_cast<double>(rows);

  Var ins[] = {logits, target};
  return t.record(
      Op::kSoftmaxCrossEntropy, ins, Tensor::scalar(loss),
      [rows, cols, logp = std::move(logp)](const Tensor& g, const Tensor&, auto in,
                                           auto grads) {
        const double scale_factor = g[0] / static_cast<double>(rows);
        const Tensor& y = *in[1];
        if (grads[0]) {
          // d/dz = (softmax(z) * sum(y) - y) / rows
          for (std::size_t r = 0; r < rows; ++r) {
            double mass = 0.0;
            for (std::size_t c = 0; c < cols; ++c) mass += y[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) {
              const std::size_t i = r * cols + c;
              (*grads[0])[i] += scale_factor * (std::exp(logp[i]) * mass - y[i]);
            }
          }
        }
        if (grads[1]) axpy(-scale_factor, logp, *grads[1]);
      });
}

Var detach(Var v) {
  Tape& t = common_tape({v});
  return t.constant(v.value());
}

Var apply_primitive(Op op, std::span<const Var> in, double scalar_arg) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(std::string(op_name(op)) + " takes " + std::to_string(n) +
                                  " operands");
    }
  };
  switch (op) {
    case Op::kAdd: need(2); return add(in[0], in[1]);
    case Op::kSub: need(2); return sub(in[0], in[1]);
    case Op::kMul: need(2); return mul(in[0], in[1]);
    case Op::kScale: need(1); return scale(in[0], scalar_arg);
    case Op::kMatMul: need(2); return matmul(in[0], in[1]);
    case Op::kAddBias: need(2); return add_bias(in[0], in[1]);
    case Op::kConv2d: need(3); return conv2d(in[0], in[1], in[2]);
    case Op::kRelu: need(1); return relu(in[0]);
    case Op::kGlobalAvgPool: need(1); return global_avg_pool(in[0]);
    case Op::kMean: need(1); return mean(in[0]);
    case Op::kSumSquares: need(1); return sum_squares(in[0]);
    case Op::kSoftmax: need(1); return softmax(in[0]);
    case Op::kSoftmaxCrossEntropy: need(2); return softmax_cross_entropy(in[0], in[1]);
    case Op::kLeaf:
    case Op::kCustom: break;
  }
  throw std::invalid_argument("apply_primitive: not a primitive: " + std::string(op_name(op)));
}

}  // namespace smile::ad
