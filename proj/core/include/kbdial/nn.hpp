#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kbdial/tensor.hpp"

namespace kbdial {

// Owns every Parameter of a model; layers keep raw pointers. Registration
// order is the checkpoint order, so it must be deterministic.
class ParamRegistry {
 public:
  Parameter* add(std::string name, std::vector<int> shape);
  Parameter* find(const std::string& name) const;
  const std::vector<Parameter*>& all() const { return order_; }

 private:
  std::vector<std::unique_ptr<Parameter>> store_;
  std::vector<Parameter*> order_;
};

// Per-call context: RNG for stochastic ops and the train/eval switch.
struct RunCtx {
  Rng* rng = nullptr;
  bool training = false;
};

// Copied attention probabilities for inspection, [head][query][key].
struct AttnProbs {
  int heads = 0, q_len = 0, k_len = 0;
  std::vector<double> p;
  double at(int h, int q, int k) const {
    return p[(static_cast<size_t>(h) * q_len + q) * k_len + k];
  }
};

struct Linear {
  Parameter* w = nullptr;  // [in x out]
  Parameter* b = nullptr;  // [1 x out]

  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, int in, int out, Rng& rng);
  Tensor forward(const Tensor& x) const;
  // Reuses an existing table as the weight (tied output projection).
  static Linear tied(ParamRegistry& reg, const std::string& name, Parameter* w, Rng& rng);
};

struct LayerNormLayer {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;

  LayerNormLayer() = default;
  LayerNormLayer(ParamRegistry& reg, const std::string& name, int d);
  Tensor forward(const Tensor& x) const;
};

// Scaled dot-product attention over `heads` slices of width d/heads, with an
// optional additive mask shared by every head, concatenated and projected.
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int heads = 0;
  int d = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry& reg, const std::string& name, int d, int heads,
                     Rng& rng);
  Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v,
                 const Tensor* mask, AttnProbs* probs_out = nullptr) const;
};

struct FeedForward {
  Linear fc1, fc2;
  double dropout_p = 0.0;

  FeedForward() = default;
  FeedForward(ParamRegistry& reg, const std::string& name, int d, int hidden,
              double dropout_p, Rng& rng);
  Tensor forward(const Tensor& x, const RunCtx& ctx) const;
};

// Post-norm transformer encoder layer.
struct EncoderLayer {
  MultiHeadAttention attn;
  LayerNormLayer ln1, ln2;
  FeedForward ffn;
  double dropout_p = 0.0;

  EncoderLayer() = default;
  EncoderLayer(ParamRegistry& reg, const std::string& name, int d, int heads,
               int ffn_hidden, double dropout_p, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor* mask, const RunCtx& ctx,
                 AttnProbs* probs_out = nullptr) const;
};

// Additive masks (0 allowed / -inf blocked).
Tensor causal_mask(int n);
Tensor all_allowed_mask(int rows, int cols);

}  // namespace kbdial
