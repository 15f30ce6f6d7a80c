#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "kbdial/errors.hpp"
#include "kbdial/rng.hpp"

namespace kbdial {

class Tensor;

// One executed op: the tensors it read and a closure that pushes the output
// gradient back into them. Nodes are created in execution order (seq) and
// replayed in exact reverse order by Tape.
struct Node {
  int64_t seq = 0;
  std::vector<Tensor> inputs;
  std::function<void(struct TensorImpl& out)> backward;
  std::weak_ptr<TensorImpl> out;
};

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches it
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // producing op; null for leaves
};

// Dense row-major 64-bit float array. Copies share storage; the autodiff
// graph hangs off the producing Node. Not safe for concurrent mutation.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int> shape, double fill = 0.0, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  // 2-d accessors; a scalar is shape {1}.
  int rows() const;
  int cols() const;

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }
  double& at(int r, int c) { return impl_->data[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return impl_->data[static_cast<size_t>(r) * cols() + c]; }
  double value() const;  // scalar only

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }
  bool grad_populated() const { return impl_ && !impl_->grad.empty(); }
  std::vector<double>& grad();        // allocates zeros on first use
  const std::vector<double>& grad() const;
  void zero_grad();  // drops the buffer back to the unpopulated state

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of the ops reachable from a scalar loss. backward() seeds
// d(loss)/d(loss)=1 and replays the record in reverse execution order;
// each tensor's gradient accumulates additively across all of its uses.
class Tape {
 public:
  explicit Tape(const Tensor& loss);
  void backward();
  size_t size() const { return ops_.size(); }

 private:
  Tensor loss_;
  std::vector<std::shared_ptr<Node>> ops_;  // execution order
};

// Convenience: build the tape from `loss` and run it.
void backward(const Tensor& loss);

// While a NoGradGuard is alive, ops skip graph construction.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// ---- forward ops (each records its gradient rule) ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
// a*x + b elementwise with scalar coefficients.
Tensor affine(const Tensor& x, double a, double b);
// [n x d] plus a [1 x d] row vector broadcast over rows.
Tensor add_row_vector(const Tensor& x, const Tensor& b);
// [n x d] times a [n x 1] per-row scalar.
Tensor mul_col_vector(const Tensor& x, const Tensor& g);
Tensor slice_rows(const Tensor& x, int start, int len);
Tensor slice_cols(const Tensor& x, int start, int len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Gather rows of `table` by index; backward scatter-adds. Doubles as
// embedding lookup and as selection of decoder states at tag positions.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
// Row-wise softmax with an optional additive mask (entries 0 or -inf).
// Blocked entries come out exactly 0; a fully blocked row is a MaskError.
Tensor softmax_masked(const Tensor& logits, const Tensor* mask);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// Inverted dropout: keeps activations scaled by 1/(1-p) while training.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);
// Mean over non-ignored positions of the smoothed negative log-likelihood:
// target weight 1-eps, all other classes eps/(V-1). Targets < 0 are ignored
// (padding). Returns a scalar.
Tensor cross_entropy_smoothed(const Tensor& logits, const std::vector<int>& targets,
                              double epsilon);
// Sum over columns of the column's Euclidean norm across rows.
Tensor l21_columns(const Tensor& p);
Tensor sum_all(const Tensor& x);

// ---- parameters & optimizer ----

struct Parameter {
  std::string name;
  Tensor value;  // requires_grad = true
  std::vector<double> adam_m, adam_v;
  int64_t steps = 0;

  Parameter(std::string n, std::vector<int> shape);
};

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam update over every parameter, then gradients are
// dropped. A parameter without a populated gradient is a StateError.
void adam_step(const std::vector<Parameter*>& params, const AdamOptions& opt);
double global_grad_norm(const std::vector<Parameter*>& params);
void clip_grad_norm(const std::vector<Parameter*>& params, double max_norm);
void zero_grads(const std::vector<Parameter*>& params);

void init_uniform(Tensor& t, Rng& rng, double lo, double hi);
// Xavier-uniform for an [in x out] linear map.
void init_xavier_uniform(Tensor& t, Rng& rng);

}  // namespace kbdial
