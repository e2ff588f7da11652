#pragma once

#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mrc/common.hpp"
#include "mrc/preprocess.hpp"
#include "mrc/tensor.hpp"

namespace mrc {

/// Named parameter registry for one model. Names must be unique; declaration
/// order is stable and drives checkpoint payload order.
template <typename T>
class ParameterStore {
 public:
  TensorT<T> add(const std::string& name, TensorT<T> tensor) {
    if (by_name_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    by_name_[name] = items_.size();
    items_.emplace_back(name, tensor);
    return tensor;
  }

  TensorT<T> add_uniform(const std::string& name, Shape shape, Rng& rng, double bound) {
    return add(name, TensorT<T>::uniform(std::move(shape), rng, -bound, bound, true));
  }

  TensorT<T> add_zeros(const std::string& name, Shape shape) {
    return add(name, TensorT<T>::zeros(std::move(shape), true));
  }

  const std::vector<std::pair<std::string, TensorT<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, TensorT<T>>>& items() { return items_; }
  size_t size() const { return items_.size(); }

  TensorT<T>* find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : &items_[it->second].second;
  }

  void zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, TensorT<T>>> items_;
  std::unordered_map<std::string, size_t> by_name_;
};

// ---------------------------------------------------------------------------
// Masking operations
// ---------------------------------------------------------------------------

/// Unmasked positions unchanged; masked positions set to -1e30 (finite, so
/// 32-bit subtraction stays NaN-free). Mask may broadcast against logits.
template <typename T>
TensorT<T> mask_logits(const TensorT<T>& logits, const TensorT<T>& mask) {
  auto inv = add_scalar(scale(mask, -1.0), 1.0);
  return add(mul(logits, mask), scale(inv, -1e30));
}

/// Softmax over the last axis restricted to mask==1 positions. Masked
/// entries are exactly zero; rows with no unmasked entry are all-zero.
template <typename T>
TensorT<T> masked_softmax(const TensorT<T>& logits, const TensorT<T>& mask) {
  auto ml = mask_logits(logits, mask);
  auto row_max = reduce_max(ml, -1, true);
  auto e = mul(exp(sub(ml, row_max)), mask);
  auto total = reduce_sum(e, -1, true);
  // all-masked rows divide by 1 instead of 0
  auto has_any = reduce_max(mask, -1, true);
  auto denom = add(total, add_scalar(scale(has_any, -1.0), 1.0));
  return div(e, denom);
}

/// Log-probabilities over the last axis with masked positions pushed to
/// about -1e30. Rows need at least one unmasked entry.
template <typename T>
TensorT<T> log_softmax_masked(const TensorT<T>& logits, const TensorT<T>& mask) {
  auto ml = mask_logits(logits, mask);
  auto row_max = reduce_max(ml, -1, true);
  auto shifted = sub(ml, row_max);
  auto total = reduce_sum(exp(shifted), -1, true);  // >= 1
  return sub(shifted, log(total));
}

// ---------------------------------------------------------------------------
// Basic layers
// ---------------------------------------------------------------------------

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int in_dim, int out_dim, ParameterStore<T>& params, const std::string& name, Rng& rng,
         bool bias = true)
      : has_bias_(bias) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    w_ = params.add_uniform(name + ".w", {in_dim, out_dim}, rng, bound);
    if (bias) b_ = params.add_zeros(name + ".b", {out_dim});
  }

  TensorT<T> operator()(const TensorT<T>& x) const {
    auto y = matmul(x, w_);
    return has_bias_ ? add(y, b_) : y;
  }

 private:
  TensorT<T> w_, b_;
  bool has_bias_ = true;
};

/// Gated residual transform, per layer y = g . tanh(W x + b) + (1 - g) . x
/// with g = sigmoid(Wg x + bg). Shape-preserving.
template <typename T>
class Highway {
 public:
  Highway() = default;
  Highway(int dim, int num_layers, ParameterStore<T>& params, const std::string& name,
          Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    for (int l = 0; l < num_layers; ++l) {
      std::string prefix = name + ".l" + std::to_string(l);
      transforms_.push_back(params.add_uniform(prefix + ".wt", {dim, dim}, rng, bound));
      transform_bias_.push_back(params.add_zeros(prefix + ".bt", {dim}));
      gates_.push_back(params.add_uniform(prefix + ".wg", {dim, dim}, rng, bound));
      gate_bias_.push_back(params.add_zeros(prefix + ".bg", {dim}));
    }
  }

  TensorT<T> operator()(TensorT<T> x) const {
    for (size_t l = 0; l < transforms_.size(); ++l) {
      auto f = tanh(add(matmul(x, transforms_[l]), transform_bias_[l]));
      auto g = sigmoid(add(matmul(x, gates_[l]), gate_bias_[l]));
      auto keep = add_scalar(scale(g, -1.0), 1.0);
      x = add(mul(g, f), mul(keep, x));
    }
    return x;
  }

  TensorT<T> gate_bias(int layer) const { return gate_bias_[layer]; }

 private:
  std::vector<TensorT<T>> transforms_, transform_bias_, gates_, gate_bias_;
};

/// Dropout with one Bernoulli(1-rate)/(1-rate) mask per (batch, feature),
/// shared across all timesteps. Identity in eval mode and at rate 0.
template <typename T>
class VariationalDropout {
 public:
  explicit VariationalDropout(double rate = 0.0) : rate_(rate) {
    if (rate < 0.0 || rate >= 1.0)
      throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  }

  TensorT<T> operator()(const TensorT<T>& x, bool training, Rng& rng) const {
    if (!training || rate_ == 0.0) return x;
    if (x.rank() != 3) throw ShapeError("variational dropout expects (B, T, d) input");
    int B = x.dim(0), d = x.dim(2);
    std::vector<T> m(static_cast<size_t>(B) * d);
    T keep = static_cast<T>(1.0 / (1.0 - rate_));
    for (auto& v : m) v = rng.bernoulli(1.0 - rate_) ? keep : T(0);
    auto mask = TensorT<T>::from_data({B, 1, d}, std::move(m));
    return mul(x, mask);
  }

  double rate() const { return rate_; }

 private:
  double rate_;
};

enum class ReduceKind { Max, Mean, WeightedSum };

/// Masked reduction of (B, T, d) to (B, d). WeightedSum scores each timestep
/// with a learned vector through masked_softmax.
template <typename T>
class ReduceSequence {
 public:
  ReduceSequence() = default;
  ReduceSequence(ReduceKind kind, int dim, ParameterStore<T>& params, const std::string& name,
                 Rng& rng)
      : kind_(kind) {
    if (kind == ReduceKind::WeightedSum)
      w_ = params.add_uniform(name + ".w", {dim, 1}, rng,
                              1.0 / std::sqrt(static_cast<double>(dim)));
  }
  explicit ReduceSequence(ReduceKind kind) : kind_(kind) {
    if (kind == ReduceKind::WeightedSum)
      throw ConfigError("weighted_sum reduction needs parameters");
  }

  TensorT<T> operator()(const TensorT<T>& x, const TensorT<T>& mask) const {
    int B = x.dim(0), time = x.dim(1), d = x.dim(2);
    auto mask3 = reshape(mask, {B, time, 1});
    switch (kind_) {
      case ReduceKind::Max:
        return reduce_max(mask_logits(x, mask3), 1, false);
      case ReduceKind::Mean: {
        auto total = reduce_sum(mul(x, mask3), 1, false);  // B×d
        auto n = reduce_sum(mask, -1, true);               // B×1
        auto has = reduce_max(mask, -1, true);
        auto denom = add(n, add_scalar(scale(has, -1.0), 1.0));
        return div(total, denom);
      }
      case ReduceKind::WeightedSum: {
        auto scores = reshape(matmul(x, w_), {B, time});
        auto p = masked_softmax(scores, mask);
        return reshape(matmul(reshape(p, {B, 1, time}), x), {B, d});
      }
    }
    throw ConfigError("unknown reduction kind");
  }

 private:
  ReduceKind kind_ = ReduceKind::Max;
  TensorT<T> w_;
};

/// Embedding lookup with the partially trainable scheme: gradients reach
/// only rows below trainable_top_k (plus UNK); PAD's row is zero and frozen.
template <typename T>
class Embedding {
 public:
  Embedding() = default;

  Embedding(int vocab_size, int dim, int trainable_top_k, ParameterStore<T>& params,
            const std::string& name, Rng& rng)
      : top_k_(std::min(trainable_top_k, vocab_size)), dim_(dim) {
    auto m = TensorT<T>::uniform({vocab_size, dim}, rng, -0.1, 0.1, top_k_ > 0);
    zero_pad_row(m);
    matrix_ = params.add(name + ".matrix", m);
  }

  Embedding(const EmbeddingMatrix& pretrained, int trainable_top_k, ParameterStore<T>& params,
            const std::string& name)
      : top_k_(std::min<int>(trainable_top_k, static_cast<int>(pretrained.rows))),
        dim_(pretrained.dim) {
    std::vector<T> data(pretrained.data.begin(), pretrained.data.end());
    auto m = TensorT<T>::from_data({static_cast<int>(pretrained.rows), pretrained.dim},
                                   std::move(data), top_k_ > 0);
    zero_pad_row(m);
    matrix_ = params.add(name + ".matrix", m);
  }

  TensorT<T> operator()(const std::vector<int>& ids, Shape batch_shape) const {
    return embedding_lookup(matrix_, ids, std::move(batch_shape), top_k_, kPadIndex, kUnkIndex);
  }

  const TensorT<T>& matrix() const { return matrix_; }
  int dim() const { return dim_; }
  int trainable_top_k() const { return top_k_; }

 private:
  static void zero_pad_row(TensorT<T>& m) {
    int d = m.dim(1);
    for (int j = 0; j < d; ++j) m.value()[static_cast<size_t>(kPadIndex) * d + j] = T(0);
  }

  TensorT<T> matrix_;
  int top_k_ = 0;
  int dim_ = 0;
};

// ---------------------------------------------------------------------------
// Similarity functions: word-level similarity between two sequences
// ---------------------------------------------------------------------------

enum class SimilarityKind { DotProduct, TriLinear, Mlp };

inline SimilarityKind similarity_kind_from_name(const std::string& name) {
  if (name == "dot") return SimilarityKind::DotProduct;
  if (name == "trilinear") return SimilarityKind::TriLinear;
  if (name == "mlp") return SimilarityKind::Mlp;
  throw ConfigError("unknown similarity kind: " + name);
}

/// Scores S[b,t,j] between context H (B,T,d) and question U (B,J,d).
///   DotProduct: <h, u>, optionally scaled by 1/sqrt(d)
///   TriLinear:  w . [h; u; h*u]  (BiDAF form)
///   Mlp:        v . tanh(W1 h + W2 u)
template <typename T>
class Similarity {
 public:
  Similarity() = default;
  Similarity(SimilarityKind kind, int dim, ParameterStore<T>& params, const std::string& name,
             Rng& rng, bool scaled_dot = false, int mlp_hidden = -1)
      : kind_(kind), dim_(dim), scaled_dot_(scaled_dot) {
    switch (kind) {
      case SimilarityKind::DotProduct:
        break;
      case SimilarityKind::TriLinear: {
        double bound = 1.0 / std::sqrt(3.0 * dim);
        w_h_ = params.add_uniform(name + ".w_h", {dim, 1}, rng, bound);
        w_u_ = params.add_uniform(name + ".w_u", {dim, 1}, rng, bound);
        w_hu_ = params.add_uniform(name + ".w_hu", {dim}, rng, bound);
        break;
      }
      case SimilarityKind::Mlp: {
        int hidden = mlp_hidden > 0 ? mlp_hidden : dim;  // hidden width defaults to d
        double bound = 1.0 / std::sqrt(static_cast<double>(dim));
        w1_ = params.add_uniform(name + ".w1", {dim, hidden}, rng, bound);
        w2_ = params.add_uniform(name + ".w2", {dim, hidden}, rng, bound);
        v_ = params.add_uniform(name + ".v", {hidden, 1}, rng,
                                1.0 / std::sqrt(static_cast<double>(hidden)));
        break;
      }
    }
  }

  TensorT<T> operator()(const TensorT<T>& h, const TensorT<T>& u) const {
    if (h.dim(-1) != u.dim(-1))
      throw ShapeError("similarity: feature dims disagree, " + shape_str(h.shape()) + " vs " +
                       shape_str(u.shape()));
    int B = h.dim(0), rows = h.dim(1), cols = u.dim(1);
    switch (kind_) {
      case SimilarityKind::DotProduct: {
        auto s = matmul(h, transpose_last2(u));
        return scaled_dot_ ? scale(s, 1.0 / std::sqrt(static_cast<double>(h.dim(-1)))) : s;
      }
      case SimilarityKind::TriLinear: {
        auto s_h = matmul(h, w_h_);                    // B×T×1
        auto s_u = transpose_last2(matmul(u, w_u_));   // B×1×J
        auto s_hu = matmul(mul(h, w_hu_), transpose_last2(u));
        return add(add(s_h, s_u), s_hu);
      }
      case SimilarityKind::Mlp: {
        int hidden = w1_.dim(1);
        auto p = reshape(matmul(h, w1_), {B, rows, 1, hidden});
        auto q = reshape(matmul(u, w2_), {B, 1, cols, hidden});
        auto a = tanh(add(p, q));
        return reshape(matmul(a, v_), {B, rows, cols});
      }
    }
    throw ConfigError("unknown similarity kind");
  }

  SimilarityKind kind() const { return kind_; }

 private:
  SimilarityKind kind_ = SimilarityKind::DotProduct;
  int dim_ = 0;
  bool scaled_dot_ = false;
  TensorT<T> w_h_, w_u_, w_hu_;  // TriLinear
  TensorT<T> w1_, w2_, v_;       // Mlp
};

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// BiDAF bidirectional attention. Context-to-query attends each context
/// position over question positions; query-to-context softmaxes max_j S over
/// context positions. Returns [H; U~; H*U~; H*h~] of shape (B, T, 4d).
template <typename T>
TensorT<T> bi_attention(const TensorT<T>& s, const TensorT<T>& h, const TensorT<T>& u,
                        const TensorT<T>& context_mask, const TensorT<T>& question_mask) {
  int B = s.dim(0), rows = s.dim(1), cols = s.dim(2);
  auto qmask3 = reshape(question_mask, {B, 1, cols});
  auto c2q = masked_softmax(s, qmask3);
  auto u_tilde = matmul(c2q, u);  // B×T×d

  auto col_max = reduce_max(mask_logits(s, qmask3), -1, false);  // B×T
  auto q2c = masked_softmax(col_max, context_mask);              // B×T
  auto h_tilde = matmul(reshape(q2c, {B, 1, rows}), h);          // B×1×d

  return concat<T>({h, u_tilde, mul(h, u_tilde), mul(h, h_tilde)}, -1);
}

/// Masked-softmax-weighted sum of values per query. Accepts a single query
/// (B, d) or a query sequence (B, Q, d); the scorer is any similarity kind.
template <typename T>
class UniAttention {
 public:
  UniAttention() = default;
  UniAttention(SimilarityKind kind, int dim, ParameterStore<T>& params, const std::string& name,
               Rng& rng)
      : scorer_(kind, dim, params, name, rng) {}

  TensorT<T> operator()(const TensorT<T>& query, const TensorT<T>& keys,
                        const TensorT<T>& values, const TensorT<T>& mask) const {
    bool single = query.rank() == 2;
    auto q = single ? reshape(query, {query.dim(0), 1, query.dim(1)}) : query;
    auto probs = attention_weights(q, keys, mask);
    auto out = matmul(probs, values);
    return single ? reshape(out, {out.dim(0), out.dim(2)}) : out;
  }

  TensorT<T> attention_weights(const TensorT<T>& q, const TensorT<T>& keys,
                               const TensorT<T>& mask) const {
    auto s = scorer_(q, keys);  // B×Q×T
    return masked_softmax(s, reshape(mask, {mask.dim(0), 1, mask.dim(1)}));
  }

  const Similarity<T>& scorer() const { return scorer_; }

 private:
  Similarity<T> scorer_;
};

/// Attention of a sequence over itself; optional diagonal exclusion keeps a
/// position from attending to itself (all-masked rows follow the zero
/// convention, so T=1 with the diagonal excluded returns zeros).
template <typename T>
class SelfAttention {
 public:
  SelfAttention() = default;
  SelfAttention(SimilarityKind kind, int dim, ParameterStore<T>& params, const std::string& name,
                Rng& rng, bool exclude_diagonal = false)
      : scorer_(kind, dim, params, name, rng), exclude_diagonal_(exclude_diagonal) {}

  TensorT<T> operator()(const TensorT<T>& x, const TensorT<T>& mask) const {
    int B = x.dim(0), time = x.dim(1);
    auto s = scorer_(x, x);  // B×T×T
    auto key_mask = reshape(mask, {B, 1, time});
    TensorT<T> full_mask = key_mask;
    if (exclude_diagonal_) {
      std::vector<T> off_diag(static_cast<size_t>(time) * time, T(1));
      for (int t = 0; t < time; ++t) off_diag[static_cast<size_t>(t) * time + t] = T(0);
      auto keep = TensorT<T>::from_data({1, time, time}, std::move(off_diag));
      full_mask = mul(key_mask, keep);
    }
    auto probs = masked_softmax(s, full_mask);
    return matmul(probs, x);
  }

 private:
  Similarity<T> scorer_;
  bool exclude_diagonal_ = false;
};

// ---------------------------------------------------------------------------
// Recurrent layers
// ---------------------------------------------------------------------------

template <typename T>
struct BiRnnOutput {
  TensorT<T> outputs;        // B×T×2h, zeros at padded positions
  TensorT<T> last_forward;   // B×h, state at each sequence's true last step
  TensorT<T> last_backward;  // B×h
};

namespace detail {

// Masked state carry: next = m*candidate + (1-m)*prev, so padded steps hold
// the running state and the backward direction starts at the true last step.
template <typename T>
TensorT<T> mask_carry(const TensorT<T>& m, const TensorT<T>& candidate, const TensorT<T>& prev) {
  auto inv = add_scalar(scale(m, -1.0), 1.0);
  return add(mul(m, candidate), mul(inv, prev));
}

}  // namespace detail

/// Bidirectional LSTM over (B, T, d) with a {0,1} mask (B, T). Positions past
/// each row's length produce zero output. Forget-gate bias starts at 1, other
/// parameters uniform(-1/sqrt(h), 1/sqrt(h)). Gate order: i, f, g, o.
template <typename T>
class BiLstm {
 public:
  BiLstm() = default;
  BiLstm(int input_dim, int hidden, ParameterStore<T>& params, const std::string& name, Rng& rng)
      : hidden_(hidden) {
    double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (int dir = 0; dir < 2; ++dir) {
      std::string prefix = name + (dir == 0 ? ".fwd" : ".bwd");
      wx_[dir] = params.add_uniform(prefix + ".wx", {input_dim, 4 * hidden}, rng, bound);
      wh_[dir] = params.add_uniform(prefix + ".wh", {hidden, 4 * hidden}, rng, bound);
      auto b = TensorT<T>::zeros({4 * hidden}, true);
      for (int j = hidden; j < 2 * hidden; ++j) b.value()[j] = T(1);  // forget gate
      b_[dir] = params.add(prefix + ".b", b);
    }
  }

  BiRnnOutput<T> operator()(const TensorT<T>& x, const TensorT<T>& mask) const {
    int B = x.dim(0), time = x.dim(1), d = x.dim(2);
    BiRnnOutput<T> out;
    std::vector<TensorT<T>> outputs[2];
    TensorT<T> last[2];
    for (int dir = 0; dir < 2; ++dir) {
      auto h = TensorT<T>::zeros({B, hidden_});
      auto c = TensorT<T>::zeros({B, hidden_});
      outputs[dir].resize(time);
      for (int step = 0; step < time; ++step) {
        int t = dir == 0 ? step : time - 1 - step;
        auto x_t = reshape(slice(x, 1, t, 1), {B, d});
        auto m_t = reshape(slice(mask, 1, t, 1), {B, 1});
        auto gates = add(add(matmul(x_t, wx_[dir]), matmul(h, wh_[dir])), b_[dir]);
        auto i = sigmoid(slice(gates, 1, 0, hidden_));
        auto f = sigmoid(slice(gates, 1, hidden_, hidden_));
        auto g = tanh(slice(gates, 1, 2 * hidden_, hidden_));
        auto o = sigmoid(slice(gates, 1, 3 * hidden_, hidden_));
        auto c_new = add(mul(f, c), mul(i, g));
        auto h_new = mul(o, tanh(c_new));
        c = detail::mask_carry(m_t, c_new, c);
        h = detail::mask_carry(m_t, h_new, h);
        outputs[dir][t] = reshape(mul(m_t, h), {B, 1, hidden_});
      }
      last[dir] = h;
    }
    std::vector<TensorT<T>> fused(time);
    for (int t = 0; t < time; ++t)
      fused[t] = concat<T>({outputs[0][t], outputs[1][t]}, 2);
    out.outputs = concat<T>(fused, 1);
    out.last_forward = last[0];
    out.last_backward = last[1];
    return out;
  }

  int output_dim() const { return 2 * hidden_; }

 private:
  int hidden_ = 0;
  TensorT<T> wx_[2], wh_[2], b_[2];
};

/// Bidirectional GRU with the same masking contract as BiLstm.
template <typename T>
class BiGru {
 public:
  BiGru() = default;
  BiGru(int input_dim, int hidden, ParameterStore<T>& params, const std::string& name, Rng& rng)
      : hidden_(hidden) {
    double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (int dir = 0; dir < 2; ++dir) {
      std::string prefix = name + (dir == 0 ? ".fwd" : ".bwd");
      wx_rz_[dir] = params.add_uniform(prefix + ".wx_rz", {input_dim, 2 * hidden}, rng, bound);
      wh_rz_[dir] = params.add_uniform(prefix + ".wh_rz", {hidden, 2 * hidden}, rng, bound);
      b_rz_[dir] = params.add_zeros(prefix + ".b_rz", {2 * hidden});
      wx_n_[dir] = params.add_uniform(prefix + ".wx_n", {input_dim, hidden}, rng, bound);
      wh_n_[dir] = params.add_uniform(prefix + ".wh_n", {hidden, hidden}, rng, bound);
      b_n_[dir] = params.add_zeros(prefix + ".b_n", {hidden});
      b_hn_[dir] = params.add_zeros(prefix + ".b_hn", {hidden});
    }
  }

  BiRnnOutput<T> operator()(const TensorT<T>& x, const TensorT<T>& mask) const {
    int B = x.dim(0), time = x.dim(1), d = x.dim(2);
    BiRnnOutput<T> out;
    std::vector<TensorT<T>> outputs[2];
    TensorT<T> last[2];
    for (int dir = 0; dir < 2; ++dir) {
      auto h = TensorT<T>::zeros({B, hidden_});
      outputs[dir].resize(time);
      for (int step = 0; step < time; ++step) {
        int t = dir == 0 ? step : time - 1 - step;
        auto x_t = reshape(slice(x, 1, t, 1), {B, d});
        auto m_t = reshape(slice(mask, 1, t, 1), {B, 1});
        auto rz = sigmoid(add(add(matmul(x_t, wx_rz_[dir]), matmul(h, wh_rz_[dir])), b_rz_[dir]));
        auto r = slice(rz, 1, 0, hidden_);
        auto z = slice(rz, 1, hidden_, hidden_);
        auto n = tanh(add(add(matmul(x_t, wx_n_[dir]), b_n_[dir]),
                          mul(r, add(matmul(h, wh_n_[dir]), b_hn_[dir]))));
        auto keep = add_scalar(scale(z, -1.0), 1.0);
        auto h_new = add(mul(keep, n), mul(z, h));
        h = detail::mask_carry(m_t, h_new, h);
        outputs[dir][t] = reshape(mul(m_t, h), {B, 1, hidden_});
      }
      last[dir] = h;
    }
    std::vector<TensorT<T>> fused(time);
    for (int t = 0; t < time; ++t)
      fused[t] = concat<T>({outputs[0][t], outputs[1][t]}, 2);
    out.outputs = concat<T>(fused, 1);
    out.last_forward = last[0];
    out.last_backward = last[1];
    return out;
  }

  int output_dim() const { return 2 * hidden_; }

 private:
  int hidden_ = 0;
  TensorT<T> wx_rz_[2], wh_rz_[2], b_rz_[2], wx_n_[2], wh_n_[2], b_n_[2], b_hn_[2];
};

/// Bilinear pointer: scores[b,t] = x[b,t] . W . y[b] for X (B,T,dx), y (B,dy).
template <typename T>
class BilinearScore {
 public:
  BilinearScore() = default;
  BilinearScore(int x_dim, int y_dim, ParameterStore<T>& params, const std::string& name,
                Rng& rng) {
    w_ = params.add_uniform(name + ".w", {x_dim, y_dim}, rng,
                            1.0 / std::sqrt(static_cast<double>(x_dim)));
  }

  TensorT<T> operator()(const TensorT<T>& x, const TensorT<T>& y) const {
    int B = x.dim(0), time = x.dim(1);
    auto y3 = reshape(y, {B, y.dim(1), 1});
    auto projected = matmul(w_, y3);  // broadcast over batch: B×dx×1
    return reshape(matmul(x, projected), {B, time});
  }

 private:
  TensorT<T> w_;
};

}  // namespace mrc
