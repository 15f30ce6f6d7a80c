#include "kbdial/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

namespace kbdial {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

thread_local bool g_grad_enabled = true;
thread_local int64_t g_seq = 0;

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void check_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected 2-d tensor, got " +
                     shape_str(t.shape()));
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

bool want_grad(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

// Allocates the result and, when any input needs gradients, its Node.
Tensor make_result(std::vector<int> shape, std::initializer_list<Tensor> inputs) {
  bool rg = false;
  for (const Tensor& t : inputs) rg = rg || want_grad(t);
  Tensor out(std::move(shape), 0.0, rg);
  if (rg) {
    auto node = std::make_shared<Node>();
    node->seq = ++g_seq;
    node->inputs.assign(inputs.begin(), inputs.end());
    node->out = out.impl();
    out.impl()->node = node;
  }
  return out;
}

std::vector<double>& grad_of(Tensor& t) { return t.grad(); }

}  // namespace

Tensor::Tensor(std::vector<int> shape, double fill, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(shape_numel(impl_->shape)), fill);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  Tensor t({1}, v, requires_grad);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  }
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  t.impl_->requires_grad = requires_grad;
  return t;
}

int Tensor::rows() const { return impl_->shape.size() == 2 ? impl_->shape[0] : 1; }

int Tensor::cols() const {
  return impl_->shape.size() == 2 ? impl_->shape[1] : impl_->shape[0];
}

double Tensor::value() const {
  if (numel() != 1) throw ShapeError("value(): tensor is not a scalar");
  return impl_->data[0];
}

std::vector<double>& Tensor::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) throw StateError("gradient not populated");
  return impl_->grad;
}

void Tensor::zero_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

// ---- tape ----

Tape::Tape(const Tensor& loss) : loss_(loss) {
  if (!loss.defined()) throw StateError("backward: undefined loss tensor");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar");
  // Collect every node reachable from the loss and order it by execution.
  std::unordered_set<Node*> seen;
  std::vector<std::shared_ptr<Node>> stack;
  if (loss.impl()->node) stack.push_back(loss.impl()->node);
  while (!stack.empty()) {
    auto node = stack.back();
    stack.pop_back();
    if (!seen.insert(node.get()).second) continue;
    ops_.push_back(node);
    for (const Tensor& in : node->inputs) {
      if (in.impl()->node) stack.push_back(in.impl()->node);
    }
  }
  std::sort(ops_.begin(), ops_.end(),
            [](const auto& a, const auto& b) { return a->seq < b->seq; });
}

void Tape::backward() {
  loss_.grad()[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    auto out = (*it)->out.lock();
    if (!out) throw StateError("backward: op output no longer alive");
    if (out->grad.empty()) out->grad.assign(out->data.size(), 0.0);
    (*it)->backward(*out);
  }
}

void backward(const Tensor& loss) { Tape(loss).backward(); }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  Tensor out = make_result({m, n}, {a, b});
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = out.data();
  for (int i = 0; i < m; ++i) {
    double* ci = pc + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double aik = pa[static_cast<size_t>(i) * k + kk];
      const double* bk = pb + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  if (out.impl()->node) {
    out.impl()->node->backward = [m, k, n](TensorImpl& o) {
      Tensor a_in = Tensor::wrap(o.node->inputs[0].impl());
      Tensor b_in = Tensor::wrap(o.node->inputs[1].impl());
      const double* g = o.grad.data();
      if (want_grad(a_in)) {
        // dA = dC . B^T
        std::vector<double>& da = grad_of(a_in);
        const double* pb = b_in.data();
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* gi = g + static_cast<size_t>(i) * n;
            const double* bk = pb + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) acc += gi[j] * bk[j];
            da[static_cast<size_t>(i) * k + kk] += acc;
          }
      }
      if (want_grad(b_in)) {
        // dB = A^T . dC
        std::vector<double>& db = grad_of(b_in);
        const double* pa = a_in.data();
        for (int kk = 0; kk < k; ++kk) {
          double* dbk = db.data() + static_cast<size_t>(kk) * n;
          for (int i = 0; i < m; ++i) {
            const double aik = pa[static_cast<size_t>(i) * k + kk];
            const double* gi = g + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) dbk[j] += aik * gi[j];
          }
        }
      }
    };
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  check_2d(a, "transpose");
  const int r = a.dim(0), c = a.dim(1);
  Tensor out = make_result({c, r}, {a});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  if (out.impl()->node) {
    out.impl()->node->backward = [r, c](TensorImpl& o) {
      Tensor a_in = Tensor::wrap(o.node->inputs[0].impl());
      std::vector<double>& da = grad_of(a_in);
      for (int j = 0; j < c; ++j)
        for (int i = 0; i < r; ++i)
          da[static_cast<size_t>(i) * c + j] += o.grad[static_cast<size_t>(j) * r + i];
    };
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_result(a.shape(), {a, b});
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (out.impl()->node) {
    out.impl()->node->backward = [n](TensorImpl& o) {
      for (int idx = 0; idx < 2; ++idx) {
        Tensor in = Tensor::wrap(o.node->inputs[static_cast<size_t>(idx)].impl());
        if (!want_grad(in)) continue;
        std::vector<double>& g = grad_of(in);
        for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i)] += o.grad[static_cast<size_t>(i)];
      }
    };
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_result(a.shape(), {a, b});
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.impl()->node) {
    out.impl()->node->backward = [n](TensorImpl& o) {
      Tensor a_in = Tensor::wrap(o.node->inputs[0].impl());
      Tensor b_in = Tensor::wrap(o.node->inputs[1].impl());
      if (want_grad(a_in)) {
        std::vector<double>& g = grad_of(a_in);
        for (int64_t i = 0; i < n; ++i)
          g[static_cast<size_t>(i)] += o.grad[static_cast<size_t>(i)] * b_in.data()[i];
      }
      if (want_grad(b_in)) {
        std::vector<double>& g = grad_of(b_in);
        for (int64_t i = 0; i < n; ++i)
          g[static_cast<size_t>(i)] += o.grad[static_cast<size_t>(i)] * a_in.data()[i];
      }
    };
  }
  return out;
}

Tensor scale(const Tensor& a, double c) { return affine(a, c, 0.0); }

Tensor affine(const Tensor& x, double a, double b) {
  Tensor out = make_result(x.shape(), {x});
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a * x.data()[i] + b;
  if (out.impl()->node) {
    out.impl()->node->backward = [a, n](TensorImpl& o) {
      Tensor in = Tensor::wrap(o.node->inputs[0].impl());
      std::vector<double>& g = grad_of(in);
      for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i)] += a * o.grad[static_cast<size_t>(i)];
    };
  }
  return out;
}

Tensor add_row_vector(const Tensor& x, const Tensor& b) {
  check_2d(x, "add_row_vector");
  const int n = x.dim(0), d = x.dim(1);
  if (b.numel() != d) {
    throw ShapeError("add_row_vector: vector " + shape_str(b.shape()) +
                     " does not match row width " + std::to_string(d));
  }
  Tensor out = make_result({n, d}, {x, b});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out.at(i, j) = x.at(i, j) + b.data()[j];
  if (out.impl()->node) {
    out.impl()->node->backward = [n, d](TensorImpl& o) {
      Tensor x_in = Tensor::wrap(o.node->inputs[0].impl());
      Tensor b_in = Tensor::wrap(o.node->inputs[1].impl());
      if (want_grad(x_in)) {
        std::vector<double>& g = grad_of(x_in);
        for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
      }
      if (want_grad(b_in)) {
        std::vector<double>& g = grad_of(b_in);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) g[static_cast<size_t>(j)] += o.grad[static_cast<size_t>(i) * d + j];
      }
    };
  }
  return out;
}

Tensor mul_col_vector(const Tensor& x, const Tensor& g) {
  check_2d(x, "mul_col_vector");
  const int n = x.dim(0), d = x.dim(1);
  if (g.numel() != n) {
    throw ShapeError("mul_col_vector: vector " + shape_str(g.shape()) +
                     " does not match row count " + std::to_string(n));
  }
  Tensor out = make_result({n, d}, {x, g});
  for (int i = 0; i < n; ++i) {
    const double gi = g.data()[i];
    for (int j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) * gi;
  }
  if (out.impl()->node) {
    out.impl()->node->backward = [n, d](TensorImpl& o) {
      Tensor x_in = Tensor::wrap(o.node->inputs[0].impl());
      Tensor g_in = Tensor::wrap(o.node->inputs[1].impl());
      if (want_grad(x_in)) {
        std::vector<double>& gx = grad_of(x_in);
        for (int i = 0; i < n; ++i) {
          const double gi = g_in.data()[i];
          for (int j = 0; j < d; ++j)
            gx[static_cast<size_t>(i) * d + j] += o.grad[static_cast<size_t>(i) * d + j] * gi;
        }
      }
      if (want_grad(g_in)) {
        std::vector<double>& gg = grad_of(g_in);
        for (int i = 0; i < n; ++i) {
          double acc = 0.0;
          for (int j = 0; j < d; ++j)
            acc += o.grad[static_cast<size_t>(i) * d + j] * x_in.at(i, j);
          gg[static_cast<size_t>(i)] += acc;
        }
      }
    };
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int start, int len) {
  check_2d(x, "slice_rows");
  const int n = x.dim(0), d = x.dim(1);
  if (start < 0 || len <= 0 || start + len > n) {
    throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of " + std::to_string(n));
  }
  Tensor out = make_result({len, d}, {x});
  std::copy_n(x.data() + static_cast<size_t>(start) * d, static_cast<size_t>(len) * d,
              out.data());
  if (out.impl()->node) {
    out.impl()->node->backward = [start, len, d](TensorImpl& o) {
      Tensor in = Tensor::wrap(o.node->inputs[0].impl());
      std::vector<double>& g = grad_of(in);
      for (int64_t i = 0; i < static_cast<int64_t>(len) * d; ++i)
        g[static_cast<size_t>(start) * d + static_cast<size_t>(i)] += o.grad[static_cast<size_t>(i)];
    };
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int len) {
  check_2d(x, "slice_cols");
  const int n = x.dim(0), d = x.dim(1);
  if (start < 0 || len <= 0 || start + len > d) {
    throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of " + std::to_string(d));
  }
  Tensor out = make_result({n, len}, {x});
  for (int i = 0; i < n; ++i)
    std::copy_n(x.data() + static_cast<size_t>(i) * d + start, len,
                out.data() + static_cast<size_t>(i) * len);
  if (out.impl()->node) {
    out.impl()->node->backward = [n, d, start, len](TensorImpl& o) {
      Tensor in = Tensor::wrap(o.node->inputs[0].impl());
      std::vector<double>& g = grad_of(in);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < len; ++j)
          g[static_cast<size_t>(i) * d + start + j] += o.grad[static_cast<size_t>(i) * len + j];
    };
  }
  return out;
}

namespace {

Tensor concat_impl(const std::vector<Tensor>& parts, bool by_rows) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  for (const Tensor& p : parts) check_2d(p, "concat");
  const int fixed = by_rows ? parts[0].dim(1) : parts[0].dim(0);
  int total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if ((by_rows ? p.dim(1) : p.dim(0)) != fixed)
      throw ShapeError("concat: parts disagree on the shared dimension");
    total += by_rows ? p.dim(0) : p.dim(1);
    rg = rg || want_grad(p);
  }
  std::vector<int> shape = by_rows ? std::vector<int>{total, fixed}
                                   : std::vector<int>{fixed, total};
  Tensor out(shape, 0.0, rg);
  if (rg) {
    auto node = std::make_shared<Node>();
    node->seq = ++g_seq;
    node->inputs = parts;
    node->out = out.impl();
    out.impl()->node = node;
  }
  if (by_rows) {
    int at = 0;
    for (const Tensor& p : parts) {
      std::copy_n(p.data(), p.numel(), out.data() + static_cast<size_t>(at) * fixed);
      at += p.dim(0);
    }
  } else {
    int at = 0;
    for (const Tensor& p : parts) {
      const int w = p.dim(1);
      for (int i = 0; i < fixed; ++i)
        std::copy_n(p.data() + static_cast<size_t>(i) * w, w,
                    out.data() + static_cast<size_t>(i) * total + at);
      at += w;
    }
  }
  if (out.impl()->node) {
    out.impl()->node->backward = [by_rows, fixed, total](TensorImpl& o) {
      int at = 0;
      for (Tensor in : o.node->inputs) {
        const int r = in.dim(0), c = in.dim(1);
        if (want_grad(in)) {
          std::vector<double>& g = grad_of(in);
          if (by_rows) {
            for (int64_t i = 0; i < static_cast<int64_t>(r) * c; ++i)
              g[static_cast<size_t>(i)] += o.grad[static_cast<size_t>(at) * fixed + static_cast<size_t>(i)];
          } else {
            for (int i = 0; i < fixed; ++i)
              for (int j = 0; j < c; ++j)
                g[static_cast<size_t>(i) * c + j] +=
                    o.grad[static_cast<size_t>(i) * total + at + j];
          }
        }
        at += by_rows ? r : c;
      }
    };
  }
  return out;
}

}  // namespace

Tensor concat_rows(const std::vector<Tensor>& parts) { return concat_impl(parts, true); }
Tensor concat_cols(const std::vector<Tensor>& parts) { return concat_impl(parts, false); }

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "gather_rows");
  const int n = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  for (int id : ids) {
    if (id < 0 || id >= n) {
      throw IndexError("gather_rows: index " + std::to_string(id) + " out of " +
                       std::to_string(n) + " rows");
    }
  }
  Tensor out = make_result({static_cast<int>(ids.size()), d}, {table});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data() + static_cast<size_t>(ids[i]) * d, d,
                out.data() + i * static_cast<size_t>(d));
  if (out.impl()->node) {
    out.impl()->node->backward = [ids, d](TensorImpl& o) {
      Tensor in = Tensor::wrap(o.node->inputs[0].impl());
      std::vector<double>& g = grad_of(in);
      for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          g[static_cast<size_t>(ids[i]) * d + j] += o.grad[i * static_cast<size_t>(d) + j];
    };
  }
  return out;
}

Tensor softmax_masked(const Tensor& logits, const Tensor* mask) {
  check_2d(logits, "softmax_masked");
  const int n = logits.dim(0), d = logits.dim(1);
  if (mask) {
    if (mask->shape() != logits.shape()) {
      throw ShapeError("softmax_masked: mask " + shape_str(mask->shape()) +
                       " does not match logits " + shape_str(logits.shape()));
    }
    for (int64_t i = 0; i < mask->numel(); ++i) {
      const double v = mask->data()[i];
      if (v != 0.0 && v != kNegInf)
        throw MaskError("softmax_masked: mask entries must be 0 or -inf");
    }
  }
  Tensor out = make_result({n, d}, {logits});
  for (int i = 0; i < n; ++i) {
    double mx = kNegInf;
    for (int j = 0; j < d; ++j) {
      const bool blocked = mask && mask->at(i, j) == kNegInf;
      if (!blocked) mx = std::max(mx, logits.at(i, j));
    }
    if (mx == kNegInf)
      throw MaskError("softmax_masked: row " + std::to_string(i) + " is fully blocked");
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      const bool blocked = mask && mask->at(i, j) == kNegInf;
      const double e = blocked ? 0.0 : std::exp(logits.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < d; ++j) out.at(i, j) /= sum;
  }
  if (out.impl()->node) {
    out.impl()->node->backward = [n, d](TensorImpl& o) {
      Tensor in = Tensor::wrap(o.node->inputs[0].impl());
      if (!want_grad(in)) return;
      std::vector<double>& g = grad_of(in);
      for (int i = 0; i < n; ++i) {
        const double* p = o.data.data() + static_cast<size_t>(i) * d;
        const double* go = o.grad.data() + static_cast<size_t>(i) * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += go[j] * p[j];
        for (int j = 0; j < d; ++j)
          g[static_cast<size_t>(i) * d + j] += p[j] * (go[j] - dot);
      }
    };
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = make_result(x.shape(), {x});
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
  if (out.impl()->node) {
    out.impl()->node->backward = [n](TensorImpl& o) {
      Tensor in = Tensor::wrap(o.node->inputs[0].impl());
      std::vector<double>& g = grad_of(in);
      for (int64_t i = 0; i < n; ++i) {
        const double s = o.data[static_cast<size_t>(i)];
        g[static_cast<size_t>(i)] += o.grad[static_cast<size_t>(i)] * s * (1.0 - s);
      }
    };
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = make_result(x.shape(), {x});
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  if (out.impl()->node) {
    out.impl()->node->backward = [n](TensorImpl& o) {
      Tensor in = Tensor::wrap(o.node->inputs[0].impl());
      std::vector<double>& g = grad_of(in);
      for (int64_t i = 0; i < n; ++i)
        if (in.data()[i] > 0.0) g[static_cast<size_t>(i)] += o.grad[static_cast<size_t>(i)];
    };
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_2d(x, "layer_norm");
  const int n = x.dim(0), d = x.dim(1);
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm: affine parameters must have width " + std::to_string(d));
  Tensor out = make_result({n, d}, {x, gamma, beta});
  // xhat and 1/std are needed by the gradient; stash them in the closure.
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * d);
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x.at(i, j);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = x.at(i, j) - mean;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      const double xh = (x.at(i, j) - mean) * is;
      (*xhat)[static_cast<size_t>(i) * d + j] = xh;
      out.at(i, j) = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  if (out.impl()->node) {
    out.impl()->node->backward = [n, d, xhat, inv_std](TensorImpl& o) {
      Tensor x_in = Tensor::wrap(o.node->inputs[0].impl());
      Tensor gamma_in = Tensor::wrap(o.node->inputs[1].impl());
      Tensor beta_in = Tensor::wrap(o.node->inputs[2].impl());
      for (int i = 0; i < n; ++i) {
        const double* go = o.grad.data() + static_cast<size_t>(i) * d;
        const double* xh = xhat->data() + static_cast<size_t>(i) * d;
        if (want_grad(gamma_in)) {
          std::vector<double>& gg = grad_of(gamma_in);
          for (int j = 0; j < d; ++j) gg[static_cast<size_t>(j)] += go[j] * xh[j];
        }
        if (want_grad(beta_in)) {
          std::vector<double>& gb = grad_of(beta_in);
          for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += go[j];
        }
        if (want_grad(x_in)) {
          std::vector<double>& gx = grad_of(x_in);
          const double is = (*inv_std)[static_cast<size_t>(i)];
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (int j = 0; j < d; ++j) {
            const double dy = go[j] * gamma_in.data()[j];
            sum_dy += dy;
            sum_dy_xh += dy * xh[j];
          }
          for (int j = 0; j < d; ++j) {
            const double dy = go[j] * gamma_in.data()[j];
            gx[static_cast<size_t>(i) * d + j] +=
                is * (dy - sum_dy / d - xh[j] * sum_dy_xh / d);
          }
        }
      }
    };
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout: probability must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const int64_t n = x.numel();
  auto keep = std::make_shared<std::vector<char>>(static_cast<size_t>(n));
  const double scale = 1.0 / (1.0 - p);
  Tensor out = make_result(x.shape(), {x});
  for (int64_t i = 0; i < n; ++i) {
    const bool k = !rng.bernoulli(p);
    (*keep)[static_cast<size_t>(i)] = k;
    out.data()[i] = k ? x.data()[i] * scale : 0.0;
  }
  if (out.impl()->node) {
    out.impl()->node->backward = [n, keep, scale](TensorImpl& o) {
      Tensor in = Tensor::wrap(o.node->inputs[0].impl());
      std::vector<double>& g = grad_of(in);
      for (int64_t i = 0; i < n; ++i)
        if ((*keep)[static_cast<size_t>(i)]) g[static_cast<size_t>(i)] += o.grad[static_cast<size_t>(i)] * scale;
    };
  }
  return out;
}

Tensor cross_entropy_smoothed(const Tensor& logits, const std::vector<int>& targets,
                              double epsilon) {
  check_2d(logits, "cross_entropy_smoothed");
  const int n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw ShapeError("cross_entropy_smoothed: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(n) + " rows");
  if (epsilon < 0.0 || epsilon >= 1.0)
    throw ConfigError("cross_entropy_smoothed: epsilon must be in [0, 1)");
  int counted = 0;
  for (int t : targets) {
    if (t >= v)
      throw IndexError("cross_entropy_smoothed: target " + std::to_string(t) +
                       " out of vocabulary " + std::to_string(v));
    if (t >= 0) ++counted;
  }
  if (counted == 0) return Tensor::scalar(0.0);

  // Smoothed NLL: weight 1-eps on the target, eps/(V-1) spread elsewhere.
  const double off = v > 1 ? epsilon / (v - 1) : 0.0;
  const double on = 1.0 - epsilon;
  Tensor out = make_result({1}, {logits});
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * v);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double mx = logits.at(i, 0);
    for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(logits.at(i, j) - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < v; ++j)
      (*probs)[static_cast<size_t>(i) * v + j] = std::exp(logits.at(i, j) - lse);
    if (targets[static_cast<size_t>(i)] < 0) continue;
    double row_sum_logp = 0.0;
    for (int j = 0; j < v; ++j) row_sum_logp += logits.at(i, j) - lse;
    const double logp_t = logits.at(i, targets[static_cast<size_t>(i)]) - lse;
    total += -(on * logp_t + off * (row_sum_logp - logp_t));
  }
  out.data()[0] = total / counted;
  if (out.impl()->node) {
    out.impl()->node->backward = [n, v, targets, probs, on, off, counted](TensorImpl& o) {
      Tensor in = Tensor::wrap(o.node->inputs[0].impl());
      std::vector<double>& g = grad_of(in);
      const double go = o.grad[0] / counted;
      for (int i = 0; i < n; ++i) {
        const int t = targets[static_cast<size_t>(i)];
        if (t < 0) continue;
        for (int j = 0; j < v; ++j) {
          const double q = j == t ? on : off;
          g[static_cast<size_t>(i) * v + j] +=
              go * ((*probs)[static_cast<size_t>(i) * v + j] - q);
        }
      }
    };
  }
  return out;
}

Tensor l21_columns(const Tensor& p) {
  check_2d(p, "l21_columns");
  const int n = p.dim(0), m = p.dim(1);
  Tensor out = make_result({1}, {p});
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
  double total = 0.0;
  for (int j = 0; j < m; ++j) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += p.at(i, j) * p.at(i, j);
    const double nrm = std::sqrt(s);
    (*norms)[static_cast<size_t>(j)] = nrm;
    total += nrm;
  }
  out.data()[0] = total;
  if (out.impl()->node) {
    out.impl()->node->backward = [n, m, norms](TensorImpl& o) {
      Tensor in = Tensor::wrap(o.node->inputs[0].impl());
      std::vector<double>& g = grad_of(in);
      const double go = o.grad[0];
      for (int j = 0; j < m; ++j) {
        const double nrm = (*norms)[static_cast<size_t>(j)];
        if (nrm == 0.0) continue;  // subgradient 0 at the kink
        for (int i = 0; i < n; ++i)
          g[static_cast<size_t>(i) * m + j] += go * in.at(i, j) / nrm;
      }
    };
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor out = make_result({1}, {x});
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x.data()[i];
  out.data()[0] = s;
  if (out.impl()->node) {
    out.impl()->node->backward = [](TensorImpl& o) {
      Tensor in = Tensor::wrap(o.node->inputs[0].impl());
      std::vector<double>& g = grad_of(in);
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
    };
  }
  return out;
}

// ---- parameters & optimizer ----

Parameter::Parameter(std::string n, std::vector<int> shape)
    : name(std::move(n)), value(std::move(shape), 0.0, true) {
  adam_m.assign(static_cast<size_t>(value.numel()), 0.0);
  adam_v.assign(static_cast<size_t>(value.numel()), 0.0);
}

void adam_step(const std::vector<Parameter*>& params, const AdamOptions& opt) {
  for (Parameter* p : params) {
    if (!p->value.grad_populated())
      throw StateError("adam_step: parameter '" + p->name +
                       "' has no gradient; run backward first");
  }
  for (Parameter* p : params) {
    p->steps += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(p->steps));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(p->steps));
    std::vector<double>& g = p->value.grad();
    double* w = p->value.data();
    for (size_t i = 0; i < g.size(); ++i) {
      p->adam_m[i] = opt.beta1 * p->adam_m[i] + (1.0 - opt.beta1) * g[i];
      p->adam_v[i] = opt.beta2 * p->adam_v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double mh = p->adam_m[i] / bc1;
      const double vh = p->adam_v[i] / bc2;
      w[i] -= opt.lr * mh / (std::sqrt(vh) + opt.eps);
    }
    p->value.zero_grad();
  }
}

double global_grad_norm(const std::vector<Parameter*>& params) {
  double s = 0.0;
  for (const Parameter* p : params) {
    if (!p->value.grad_populated()) continue;
    for (double g : p->value.grad()) s += g * g;
  }
  return std::sqrt(s);
}

void clip_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return;
  const double f = max_norm / norm;
  for (Parameter* p : params) {
    if (!p->value.grad_populated()) continue;
    for (double& g : p->value.grad()) g *= f;
  }
}

void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->value.zero_grad();
}

void init_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
}

void init_xavier_uniform(Tensor& t, Rng& rng) {
  const int fan_in = t.dim(0), fan_out = t.shape().size() == 2 ? t.dim(1) : 1;
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  init_uniform(t, rng, -limit, limit);
}

}  // namespace kbdial
