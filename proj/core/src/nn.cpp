#include "kbdial/nn.hpp"

#include <cmath>
#include <limits>

namespace kbdial {

Parameter* ParamRegistry::add(std::string name, std::vector<int> shape) {
  for (const Parameter* p : order_) {
    if (p->name == name) throw StateError("duplicate parameter name: " + name);
  }
  store_.push_back(std::make_unique<Parameter>(std::move(name), std::move(shape)));
  order_.push_back(store_.back().get());
  return order_.back();
}

Parameter* ParamRegistry::find(const std::string& name) const {
  for (Parameter* p : order_)
    if (p->name == name) return p;
  return nullptr;
}

Linear::Linear(ParamRegistry& reg, const std::string& name, int in, int out, Rng& rng) {
  w = reg.add(name + ".w", {in, out});
  b = reg.add(name + ".b", {1, out});
  init_xavier_uniform(w->value, rng);
}

Linear Linear::tied(ParamRegistry& reg, const std::string& name, Parameter* w, Rng& rng) {
  (void)rng;
  Linear l;
  l.w = w;
  l.b = reg.add(name + ".b", {1, w->value.dim(1)});
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  return add_row_vector(matmul(x, w->value), b->value);
}

LayerNormLayer::LayerNormLayer(ParamRegistry& reg, const std::string& name, int d) {
  gamma = reg.add(name + ".gamma", {1, d});
  beta = reg.add(name + ".beta", {1, d});
  for (int i = 0; i < d; ++i) gamma->value.data()[i] = 1.0;
}

Tensor LayerNormLayer::forward(const Tensor& x) const {
  return layer_norm(x, gamma->value, beta->value);
}

MultiHeadAttention::MultiHeadAttention(ParamRegistry& reg, const std::string& name,
                                       int d_, int heads_, Rng& rng)
    : heads(heads_), d(d_) {
  if (heads <= 0 || d % heads != 0) {
    throw ConfigError("attention: model dimension " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  wq = Linear(reg, name + ".wq", d, d, rng);
  wk = Linear(reg, name + ".wk", d, d, rng);
  wv = Linear(reg, name + ".wv", d, d, rng);
  wo = Linear(reg, name + ".wo", d, d, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const Tensor* mask, AttnProbs* probs_out) const {
  const int dh = d / heads;
  const Tensor Q = wq.forward(q);
  const Tensor K = wk.forward(k);
  const Tensor V = wv.forward(v);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  if (probs_out) {
    probs_out->heads = heads;
    probs_out->q_len = Q.dim(0);
    probs_out->k_len = K.dim(0);
    probs_out->p.assign(static_cast<size_t>(heads) * Q.dim(0) * K.dim(0), 0.0);
  }
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(Q, h * dh, dh);
    const Tensor kh = slice_cols(K, h * dh, dh);
    const Tensor vh = slice_cols(V, h * dh, dh);
    const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    const Tensor probs = softmax_masked(scores, mask);
    if (probs_out) {
      std::copy_n(probs.data(), probs.numel(),
                  probs_out->p.data() + static_cast<size_t>(h) * probs.numel());
    }
    head_outs.push_back(matmul(probs, vh));
  }
  return wo.forward(concat_cols(head_outs));
}

FeedForward::FeedForward(ParamRegistry& reg, const std::string& name, int d, int hidden,
                         double dropout_p_, Rng& rng)
    : fc1(reg, name + ".fc1", d, hidden, rng),
      fc2(reg, name + ".fc2", hidden, d, rng),
      dropout_p(dropout_p_) {}

Tensor FeedForward::forward(const Tensor& x, const RunCtx& ctx) const {
  return fc2.forward(dropout(relu(fc1.forward(x)), dropout_p, *ctx.rng, ctx.training));
}

EncoderLayer::EncoderLayer(ParamRegistry& reg, const std::string& name, int d, int heads,
                           int ffn_hidden, double dropout_p_, Rng& rng)
    : attn(reg, name + ".attn", d, heads, rng),
      ln1(reg, name + ".ln1", d),
      ln2(reg, name + ".ln2", d),
      ffn(reg, name + ".ffn", d, ffn_hidden, dropout_p_, rng),
      dropout_p(dropout_p_) {}

Tensor EncoderLayer::forward(const Tensor& x, const Tensor* mask, const RunCtx& ctx,
                             AttnProbs* probs_out) const {
  const Tensor a = attn.forward(x, x, x, mask, probs_out);
  const Tensor x1 = ln1.forward(add(x, dropout(a, dropout_p, *ctx.rng, ctx.training)));
  const Tensor f = ffn.forward(x1, ctx);
  return ln2.forward(add(x1, dropout(f, dropout_p, *ctx.rng, ctx.training)));
}

Tensor causal_mask(int n) {
  Tensor m({n, n}, 0.0);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m.at(i, j) = neg_inf;
  return m;
}

Tensor all_allowed_mask(int rows, int cols) { return Tensor({rows, cols}, 0.0); }

}  // namespace kbdial
