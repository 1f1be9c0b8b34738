#pragma once

// Small pre-norm transformer encoder trained with masked language modeling.
// Hidden state h(l, i) is the residual stream after encoder block l at
// position i; h(0, i) is the token + position embedding. Interventions
// rewrite h(l, i) before block l + 1 reads it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "numsub/binary_io.hpp"
#include "numsub/corpus.hpp"
#include "numsub/probe.hpp"
#include "numsub/subspace.hpp"

namespace numsub {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
  int num_layers = 6;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 256;
  int vocab_size = 0;
  int max_len = 16;
  int mask_id = 3;
  double dropout = 0.1;
  std::uint64_t seed = 0;

  int head_dim() const { return hidden_dim / num_heads; }

  void validate() const {
    if (num_layers < 2) throw Error("ModelConfig: need at least 2 layers");
    if (hidden_dim < 1 || num_heads < 1 || hidden_dim % num_heads != 0) {
      throw Error("ModelConfig: hidden_dim must be divisible by num_heads");
    }
    if (ffn_dim < 1 || vocab_size < 1 || max_len < 1) throw Error("ModelConfig: bad sizes");
    if (mask_id < 0 || mask_id >= vocab_size) throw Error("ModelConfig: mask id out of range");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("ModelConfig: dropout must be in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim},
                     {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},
                     {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
                     {"mask_id", c.mask_id},       {"dropout", c.dropout},
                     {"seed", c.seed}};
}

template <typename T>
struct BlockParams {
  Mat<T> ln1_g, ln1_b;
  Mat<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Mat<T> ln2_g, ln2_b;
  Mat<T> w1, b1, w2, b2;
};

/// Every trainable tensor. Biases and norm gains are 1 x n matrices.
template <typename T>
struct MlmParams {
  Mat<T> tok_emb;  // vocab x d, shared with the output projection
  Mat<T> pos_emb;  // max_len x d
  std::vector<BlockParams<T>> blocks;
  Mat<T> lnf_g, lnf_b;
  Mat<T> out_bias;  // 1 x vocab

  /// Tensors in declared (checkpoint) order.
  std::vector<Mat<T>*> tensors() {
    std::vector<Mat<T>*> out{&tok_emb, &pos_emb};
    for (auto& b : blocks) {
      for (Mat<T>* m : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                        &b.bo, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2}) {
        out.push_back(m);
      }
    }
    for (Mat<T>* m : {&lnf_g, &lnf_b, &out_bias}) out.push_back(m);
    return out;
  }
  std::vector<const Mat<T>*> tensors() const {
    auto mut = const_cast<MlmParams*>(this)->tensors();
    return {mut.begin(), mut.end()};
  }

  static MlmParams zeros(const ModelConfig& c) {
    MlmParams p;
    const int d = c.hidden_dim;
    p.tok_emb = Mat<T>::Zero(c.vocab_size, d);
    p.pos_emb = Mat<T>::Zero(c.max_len, d);
    p.blocks.resize(static_cast<std::size_t>(c.num_layers));
    for (auto& b : p.blocks) {
      b.ln1_g = b.ln1_b = b.ln2_g = b.ln2_b = Mat<T>::Zero(1, d);
      b.wq = b.wk = b.wv = b.wo = Mat<T>::Zero(d, d);
      b.bq = b.bk = b.bv = b.bo = b.b2 = Mat<T>::Zero(1, d);
      b.w1 = Mat<T>::Zero(d, c.ffn_dim);
      b.b1 = Mat<T>::Zero(1, c.ffn_dim);
      b.w2 = Mat<T>::Zero(c.ffn_dim, d);
    }
    p.lnf_g = p.lnf_b = Mat<T>::Zero(1, d);
    p.out_bias = Mat<T>::Zero(1, c.vocab_size);
    return p;
  }
};

/// Token sequences laid out back to back; rows of every activation matrix
/// follow the same layout.
struct SequenceBatch {
  std::vector<int> tokens;
  std::vector<int> offsets{0};

  void add(std::span<const int> seq) {
    tokens.insert(tokens.end(), seq.begin(), seq.end());
    offsets.push_back(static_cast<int>(tokens.size()));
  }
  int num_sequences() const { return static_cast<int>(offsets.size()) - 1; }
  int rows() const { return static_cast<int>(tokens.size()); }
  int start(int s) const { return offsets[static_cast<std::size_t>(s)]; }
  int length(int s) const {
    return offsets[static_cast<std::size_t>(s) + 1] - offsets[static_cast<std::size_t>(s)];
  }
};

/// Rewrite of hidden states at one layer.
struct GlobalScope {
  bool include_delimiters = true;  // false skips the first and last position
};
struct PositionScope {
  std::vector<int> positions;
};
using InterventionScope = std::variant<GlobalScope, PositionScope>;

struct InterventionSpec {
  int layer = 0;  // 0 = embedding output, L = last block output
  InterventionScope scope = GlobalScope{};
  std::shared_ptr<const NumberSubspace> subspace;
  double alpha = 0.0;
  int k_used = -1;  // -1: whole subspace

  /// Positions of a length-`len` sequence covered by the scope.
  std::vector<int> positions(int len) const {
    std::vector<int> out;
    if (const auto* g = std::get_if<GlobalScope>(&scope)) {
      const int lo = g->include_delimiters ? 0 : 1;
      const int hi = g->include_delimiters ? len : len - 1;
      for (int i = lo; i < hi; ++i) out.push_back(i);
    } else {
      out = std::get<PositionScope>(scope).positions;
      for (int p : out) {
        if (p < 0 || p >= len) throw Error("intervention position out of range");
      }
    }
    return out;
  }
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LnCache {
  Mat<T> xhat;
  ColVec<T> rstd;
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, LnCache<T>* cache) {
  const ColVec<T> mean = x.rowwise().mean();
  Mat<T> xc = x.colwise() - mean;
  const ColVec<T> var = xc.array().square().rowwise().mean();
  const ColVec<T> rstd = (var.array() + T(kLayerNormEps)).rsqrt();
  xc = xc.array().colwise() * rstd.array();
  Mat<T> y = (xc.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  if (cache) {
    cache->xhat = std::move(xc);
    cache->rstd = rstd;
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& g, const LnCache<T>& c, Mat<T>& dg,
                           Mat<T>& db) {
  dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * g.row(0).array();
  const ColVec<T> m1 = dxhat.rowwise().mean();
  const ColVec<T> m2 = (dxhat.array() * c.xhat.array()).rowwise().mean();
  Mat<T> dx = (dxhat.colwise() - m1).array() - c.xhat.array().colwise() * m2.array();
  return dx.array().colwise() * c.rstd.array();
}

template <typename T>
T gelu(T x) {
  constexpr T k0 = T(0.7978845608028654);
  constexpr T k1 = T(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(k0 * (x + k1 * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  constexpr T k0 = T(0.7978845608028654);
  constexpr T k1 = T(0.044715);
  const T t = std::tanh(k0 * (x + k1 * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * k0 * (T(1) + T(3) * k1 * x * x);
}

template <typename T>
struct BlockCache {
  Mat<T> a, q, k, v, attn, c, u, gl;
  LnCache<T> ln1, ln2;
  std::vector<Mat<T>> probs;  // per (sequence, head)
  Mat<T> drop1, drop2;        // scaled keep masks; empty when dropout is off
};

template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution keep(1.0 - p);
  const T scale = T(1.0 / (1.0 - p));
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? scale : T(0);
  return m;
}

}  // namespace detail

template <typename T>
class TransformerMlm {
 public:
  TransformerMlm() = default;

  /// Random initialization from config.seed.
  explicit TransformerMlm(const ModelConfig& config) : config_(config) {
    config_.validate();
    params_ = MlmParams<T>::zeros(config_);
    std::mt19937_64 rng(config_.seed);
    auto fill = [&rng](Mat<T>& m, double stddev) {
      std::normal_distribution<double> normal(0.0, stddev);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(normal(rng));
    };
    const double out_std = 0.02 / std::sqrt(2.0 * config_.num_layers);
    fill(params_.tok_emb, 0.02);
    fill(params_.pos_emb, 0.02);
    for (auto& b : params_.blocks) {
      b.ln1_g.setOnes();
      b.ln2_g.setOnes();
      fill(b.wq, 0.02);
      fill(b.wk, 0.02);
      fill(b.wv, 0.02);
      fill(b.wo, out_std);
      fill(b.w1, 0.02);
      fill(b.w2, out_std);
    }
    params_.lnf_g.setOnes();
  }

  TransformerMlm(const ModelConfig& config, MlmParams<T> params)
      : config_(config), params_(std::move(params)) {
    config_.validate();
  }

  const ModelConfig& config() const { return config_; }
  MlmParams<T>& params() { return params_; }
  const MlmParams<T>& params() const { return params_; }
  int num_layers() const { return config_.num_layers; }
  int hidden_dim() const { return config_.hidden_dim; }

  void check_batch(const SequenceBatch& batch) const {
    for (int s = 0; s < batch.num_sequences(); ++s) {
      if (batch.length(s) < 1 || batch.length(s) > config_.max_len) {
        throw Error("sequence length " + std::to_string(batch.length(s)) + " outside [1, " +
                    std::to_string(config_.max_len) + "]");
      }
    }
    for (int t : batch.tokens) {
      if (t < 0 || t >= config_.vocab_size) throw Error("unknown token id " + std::to_string(t));
    }
  }

  /// Token + position embeddings (hidden state of layer 0).
  Mat<T> embed(const SequenceBatch& batch) const {
    Mat<T> h(batch.rows(), config_.hidden_dim);
    for (int s = 0; s < batch.num_sequences(); ++s) {
      for (int i = 0; i < batch.length(s); ++i) {
        const int r = batch.start(s) + i;
        h.row(r) = params_.tok_emb.row(batch.tokens[static_cast<std::size_t>(r)]) +
                   params_.pos_emb.row(i);
      }
    }
    return h;
  }

  /// Applies block `b` (0-based; produces layer b + 1) to h in place.
  /// With `cache` set, stores what the backward pass needs; with `rng` set,
  /// applies dropout on both residual branches.
  void run_block(int b, Mat<T>& h, const SequenceBatch& batch, detail::BlockCache<T>* cache = nullptr,
                 std::mt19937_64* rng = nullptr) const {
    const auto& p = params_.blocks[static_cast<std::size_t>(b)];
    const int dh = config_.head_dim();
    const T scale = T(1.0 / std::sqrt(static_cast<double>(dh)));
    detail::BlockCache<T> local;
    detail::BlockCache<T>& c = cache ? *cache : local;

    c.a = detail::layer_norm(h, p.ln1_g, p.ln1_b, &c.ln1);
    c.q = (c.a * p.wq).rowwise() + p.bq.row(0);
    c.k = (c.a * p.wk).rowwise() + p.bk.row(0);
    c.v = (c.a * p.wv).rowwise() + p.bv.row(0);
    c.attn.resize(h.rows(), h.cols());
    if (cache) c.probs.clear();
    for (int s = 0; s < batch.num_sequences(); ++s) {
      const int r0 = batch.start(s);
      const int len = batch.length(s);
      for (int head = 0; head < config_.num_heads; ++head) {
        const int c0 = head * dh;
        Mat<T> scores = (c.q.block(r0, c0, len, dh) * c.k.block(r0, c0, len, dh).transpose()) * scale;
        const ColVec<T> mx = scores.rowwise().maxCoeff();
        scores = (scores.colwise() - mx).array().exp();
        const ColVec<T> denom = scores.rowwise().sum();
        scores = scores.array().colwise() / denom.array();
        c.attn.block(r0, c0, len, dh) = scores * c.v.block(r0, c0, len, dh);
        if (cache) c.probs.push_back(std::move(scores));
      }
    }
    Mat<T> o = (c.attn * p.wo).rowwise() + p.bo.row(0);
    if (rng && config_.dropout > 0.0) {
      c.drop1 = detail::dropout_mask<T>(o.rows(), o.cols(), config_.dropout, *rng);
      o.array() *= c.drop1.array();
    }
    h += o;

    c.c = detail::layer_norm(h, p.ln2_g, p.ln2_b, &c.ln2);
    c.u = (c.c * p.w1).rowwise() + p.b1.row(0);
    c.gl = c.u.unaryExpr([](T x) { return detail::gelu(x); });
    Mat<T> f = (c.gl * p.w2).rowwise() + p.b2.row(0);
    if (rng && config_.dropout > 0.0) {
      c.drop2 = detail::dropout_mask<T>(f.rows(), f.cols(), config_.dropout, *rng);
      f.array() *= c.drop2.array();
    }
    h += f;
  }

  /// Logits over the vocabulary for the given rows of a last-layer state.
  Mat<T> logits(const Mat<T>& last_rows) const {
    const Mat<T> n = detail::layer_norm<T>(last_rows, params_.lnf_g, params_.lnf_b, nullptr);
    return (n * params_.tok_emb.transpose()).rowwise() + params_.out_bias.row(0);
  }

 private:
  ModelConfig config_;
  MlmParams<T> params_;
};

/// Hidden states of every layer: [L + 1] matrices of (batch rows x d).
/// Interventions (at most one per sequence, all at the same layer) rewrite
/// the chosen rows of that layer before the next block reads them.
struct RowIntervention {
  int layer = 0;
  std::vector<int> rows;
  std::shared_ptr<const NumberSubspace> subspace;
  double alpha = 0.0;
  int k_used = -1;
};

template <typename T>
void apply_rows(Mat<T>& h, const RowIntervention& iv) {
  if (!iv.subspace) throw Error("intervention without subspace");
  if (iv.subspace->dim() != h.cols()) throw Error("intervention subspace dimension mismatch");
  for (int r : iv.rows) {
    auto row = h.row(r);
    intervene_rows(row, *iv.subspace, iv.alpha, iv.k_used);
  }
}

template <typename T>
std::vector<Mat<T>> forward_hidden(const TransformerMlm<T>& model, const SequenceBatch& batch,
                                   const std::vector<RowIntervention>& interventions = {}) {
  model.check_batch(batch);
  std::vector<Mat<T>> hidden;
  hidden.reserve(static_cast<std::size_t>(model.num_layers()) + 1);
  Mat<T> h = model.embed(batch);
  for (int layer = 0;; ++layer) {
    for (const auto& iv : interventions) {
      if (iv.layer == layer) apply_rows(h, iv);
    }
    hidden.push_back(h);
    if (layer == model.num_layers()) break;
    model.run_block(layer, h, batch);
  }
  return hidden;
}

/// Continues a forward pass from the (possibly rewritten) hidden state of
/// `layer` and returns the last-layer state.
template <typename T>
Mat<T> resume_forward(const TransformerMlm<T>& model, const SequenceBatch& batch, int layer, Mat<T> h) {
  if (layer < 0 || layer > model.num_layers()) throw Error("layer out of range");
  for (int b = layer; b < model.num_layers(); ++b) model.run_block(b, h, batch);
  return h;
}

inline std::vector<int> intervention_rows(const InterventionSpec& spec, const SequenceBatch& batch, int s) {
  std::vector<int> rows;
  for (int p : spec.positions(batch.length(s))) rows.push_back(batch.start(s) + p);
  return rows;
}

struct ForwardTrace {
  std::vector<Matrix> hidden_states;  // [L + 1] x (len x d)
  std::vector<int> mask_positions;
  Matrix mask_logits;  // one row per masked position, in position order

  Vector first_mask_logits() const {
    if (mask_logits.rows() == 0) throw Error("no masked position in input");
    return mask_logits.row(0).transpose();
  }
};

namespace detail {
template <typename T>
ForwardTrace make_trace(const TransformerMlm<T>& model, std::span<const int> tokens,
                        const std::vector<RowIntervention>& ivs) {
  SequenceBatch batch;
  batch.add(tokens);
  const auto hidden = forward_hidden(model, batch, ivs);
  ForwardTrace trace;
  for (const auto& h : hidden) trace.hidden_states.push_back(h.template cast<double>());
  for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
    if (tokens[static_cast<std::size_t>(i)] == model.config().mask_id) trace.mask_positions.push_back(i);
  }
  Mat<T> rows(static_cast<Eigen::Index>(trace.mask_positions.size()), model.hidden_dim());
  for (std::size_t i = 0; i < trace.mask_positions.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = hidden.back().row(trace.mask_positions[i]);
  }
  trace.mask_logits = model.logits(rows).template cast<double>();
  if (!trace.mask_logits.allFinite()) throw Error("non-finite logits");
  return trace;
}
}  // namespace detail

/// Plain evaluation forward pass (dropout off).
template <typename T>
ForwardTrace forward(const TransformerMlm<T>& model, std::span<const int> tokens) {
  return detail::make_trace(model, tokens, {});
}

/// Forward pass with h(spec.layer, i) replaced by intervene(h, s, alpha, k)
/// at in-scope positions; everything before that layer and every
/// out-of-scope position of that layer is untouched.
template <typename T>
ForwardTrace forward_with_intervention(const TransformerMlm<T>& model, std::span<const int> tokens,
                                       const InterventionSpec& spec) {
  if (spec.layer < 0 || spec.layer > model.num_layers()) throw Error("intervention layer out of range");
  if (spec.subspace && spec.k_used > spec.subspace->rank()) throw Error("k_used exceeds subspace rank");
  SequenceBatch probe;
  probe.add(tokens);
  RowIntervention iv{spec.layer, intervention_rows(spec, probe, 0), spec.subspace, spec.alpha,
                     spec.k_used};
  return detail::make_trace(model, tokens, {iv});
}

// ---------------------------------------------------------------- training

/// A batch with the rows whose original token must be predicted.
struct MaskedBatch {
  SequenceBatch inputs;
  std::vector<int> target_rows;
  std::vector<int> target_ids;
};

/// Mean cross-entropy over target rows; accumulates d(loss)/d(params) into
/// `grad` (which must be shaped like the model). `rng` enables dropout.
template <typename T>
double loss_and_gradient(const TransformerMlm<T>& model, const MaskedBatch& mb, MlmParams<T>& grad,
                         std::mt19937_64* rng = nullptr) {
  const auto& cfg = model.config();
  const auto& P = model.params();
  const auto& batch = mb.inputs;
  model.check_batch(batch);
  if (mb.target_rows.empty() || mb.target_rows.size() != mb.target_ids.size()) {
    throw Error("loss_and_gradient: no prediction targets");
  }
  const int L = cfg.num_layers;
  const int dh = cfg.head_dim();
  const T scale = T(1.0 / std::sqrt(static_cast<double>(dh)));

  std::vector<detail::BlockCache<T>> caches(static_cast<std::size_t>(L));
  Mat<T> h = model.embed(batch);
  for (int b = 0; b < L; ++b) model.run_block(b, h, batch, &caches[static_cast<std::size_t>(b)], rng);

  const auto m = static_cast<Eigen::Index>(mb.target_rows.size());
  Mat<T> last(m, cfg.hidden_dim);
  for (Eigen::Index i = 0; i < m; ++i) last.row(i) = h.row(mb.target_rows[static_cast<std::size_t>(i)]);
  detail::LnCache<T> lnf;
  const Mat<T> normed = detail::layer_norm(last, P.lnf_g, P.lnf_b, &lnf);
  Mat<T> logits = (normed * P.tok_emb.transpose()).rowwise() + P.out_bias.row(0);

  double loss = 0.0;
  Mat<T> dlogits(m, cfg.vocab_size);
  for (Eigen::Index i = 0; i < m; ++i) {
    const T mx = logits.row(i).maxCoeff();
    const auto e = (logits.row(i).array() - mx).exp();
    const T z = e.sum();
    const int target = mb.target_ids[static_cast<std::size_t>(i)];
    loss += static_cast<double>(std::log(z) - (logits(i, target) - mx));
    dlogits.row(i) = (e / z).matrix();
    dlogits(i, target) -= T(1);
  }
  loss /= static_cast<double>(m);
  if (!std::isfinite(loss)) throw Error("loss is not finite (training diverged)");
  dlogits /= static_cast<T>(m);

  grad.out_bias += dlogits.colwise().sum();
  grad.tok_emb += dlogits.transpose() * normed;
  const Mat<T> dnormed = dlogits * P.tok_emb;
  const Mat<T> dlast = detail::layer_norm_backward(dnormed, P.lnf_g, lnf, grad.lnf_g, grad.lnf_b);
  Mat<T> dh_mat = Mat<T>::Zero(batch.rows(), cfg.hidden_dim);
  for (Eigen::Index i = 0; i < m; ++i) dh_mat.row(mb.target_rows[static_cast<std::size_t>(i)]) += dlast.row(i);

  for (int b = L - 1; b >= 0; --b) {
    const auto& p = P.blocks[static_cast<std::size_t>(b)];
    auto& g = grad.blocks[static_cast<std::size_t>(b)];
    const auto& c = caches[static_cast<std::size_t>(b)];

    // feed-forward branch
    Mat<T> df = dh_mat;
    if (c.drop2.size()) df.array() *= c.drop2.array();
    g.w2 += c.gl.transpose() * df;
    g.b2 += df.colwise().sum();
    Mat<T> du = df * p.w2.transpose();
    du.array() *= c.u.unaryExpr([](T x) { return detail::gelu_grad(x); }).array();
    g.w1 += c.c.transpose() * du;
    g.b1 += du.colwise().sum();
    const Mat<T> dc = du * p.w1.transpose();
    dh_mat += detail::layer_norm_backward(dc, p.ln2_g, c.ln2, g.ln2_g, g.ln2_b);

    // attention branch
    Mat<T> dout = dh_mat;
    if (c.drop1.size()) dout.array() *= c.drop1.array();
    g.wo += c.attn.transpose() * dout;
    g.bo += dout.colwise().sum();
    const Mat<T> dattn = dout * p.wo.transpose();
    Mat<T> dq(batch.rows(), cfg.hidden_dim), dk(batch.rows(), cfg.hidden_dim),
        dv(batch.rows(), cfg.hidden_dim);
    std::size_t pi = 0;
    for (int s = 0; s < batch.num_sequences(); ++s) {
      const int r0 = batch.start(s);
      const int len = batch.length(s);
      for (int head = 0; head < cfg.num_heads; ++head, ++pi) {
        const int c0 = head * dh;
        const Mat<T>& pr = c.probs[pi];
        const auto d_o = dattn.block(r0, c0, len, dh);
        const Mat<T> dprob = d_o * c.v.block(r0, c0, len, dh).transpose();
        dv.block(r0, c0, len, dh) = pr.transpose() * d_o;
        const ColVec<T> rowdot = (dprob.array() * pr.array()).rowwise().sum();
        const Mat<T> dscores = (pr.array() * (dprob.colwise() - rowdot).array()) * scale;
        dq.block(r0, c0, len, dh) = dscores * c.k.block(r0, c0, len, dh);
        dk.block(r0, c0, len, dh) = dscores.transpose() * c.q.block(r0, c0, len, dh);
      }
    }
    g.wq += c.a.transpose() * dq;
    g.bq += dq.colwise().sum();
    g.wk += c.a.transpose() * dk;
    g.bk += dk.colwise().sum();
    g.wv += c.a.transpose() * dv;
    g.bv += dv.colwise().sum();
    const Mat<T> da = dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
    dh_mat += detail::layer_norm_backward(da, p.ln1_g, c.ln1, g.ln1_g, g.ln1_b);
  }

  for (int s = 0; s < batch.num_sequences(); ++s) {
    for (int i = 0; i < batch.length(s); ++i) {
      const int r = batch.start(s) + i;
      grad.tok_emb.row(batch.tokens[static_cast<std::size_t>(r)]) += dh_mat.row(r);
      grad.pos_emb.row(i) += dh_mat.row(r);
    }
  }
  return loss;
}

struct TrainSchedule {
  int steps = 1500;
  int batch_size = 64;
  double learning_rate = 2e-3;
  double weight_decay = 0.01;
  int warmup_steps = 100;
  double grad_clip = 1.0;
  double copula_mask_fraction = 0.5;  // examples whose only masked token is the main copula
  double random_mask_rate = 0.15;     // per-token masking rate for the other examples
  int log_every = 10;
};

struct LossPoint {
  int step = 0;
  double loss = 0.0;
};

struct TrainReport {
  std::vector<LossPoint> loss_curve;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

inline void to_json(nlohmann::json& j, const TrainReport& r) {
  j = nlohmann::json{{"initial_loss", r.initial_loss}, {"final_loss", r.final_loss},
                     {"loss_curve", nlohmann::json::array()}};
  for (const auto& p : r.loss_curve) j["loss_curve"].push_back({{"step", p.step}, {"loss", p.loss}});
}

/// Draws one training batch: in `copula_mask_fraction` of examples only the
/// main copula is masked, otherwise each non-special token is masked with
/// probability `random_mask_rate` (at least one per example).
inline MaskedBatch draw_masked_batch(const std::vector<AgreementSentence>& corpus,
                                     const Vocabulary& vocab, const TrainSchedule& sched,
                                     std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  MaskedBatch mb;
  for (int e = 0; e < sched.batch_size; ++e) {
    const auto& s = corpus[pick(rng)];
    std::vector<int> tokens = s.tokens;
    const int base = mb.inputs.rows();
    std::vector<int> masked;
    if (unit(rng) < sched.copula_mask_fraction) {
      masked.push_back(s.main_verb_index);
    } else {
      std::vector<int> candidates;
      for (int i = 0; i < static_cast<int>(tokens.size()); ++i) {
        if (vocab.info(tokens[static_cast<std::size_t>(i)]).category != WordCategory::Special) {
          candidates.push_back(i);
        }
      }
      for (int i : candidates) {
        if (unit(rng) < sched.random_mask_rate) masked.push_back(i);
      }
      if (masked.empty()) {
        std::uniform_int_distribution<std::size_t> one(0, candidates.size() - 1);
        masked.push_back(candidates[one(rng)]);
      }
    }
    for (int i : masked) {
      mb.target_rows.push_back(base + i);
      mb.target_ids.push_back(tokens[static_cast<std::size_t>(i)]);
      tokens[static_cast<std::size_t>(i)] = vocab.mask_id();
    }
    mb.inputs.add(tokens);
  }
  return mb;
}

/// AdamW with decoupled weight decay on matrices (not on biases or norm gains).
template <typename T>
class AdamW {
 public:
  explicit AdamW(const ModelConfig& cfg)
      : m_(MlmParams<T>::zeros(cfg)), v_(MlmParams<T>::zeros(cfg)) {}

  void step(MlmParams<T>& params, MlmParams<T>& grads, double lr, double weight_decay) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, t_);
    const double c2 = 1.0 - std::pow(beta2, t_);
    auto ps = params.tensors();
    auto gs = grads.tensors();
    auto ms = m_.tensors();
    auto vs = v_.tensors();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = *ps[i];
      const auto& g = *gs[i];
      auto& m = *ms[i];
      auto& v = *vs[i];
      m = T(beta1) * m + T(1 - beta1) * g;
      v = T(beta2) * v + T(1 - beta2) * g.cwiseProduct(g);
      if (p.rows() > 1 && weight_decay > 0.0) p *= T(1.0 - lr * weight_decay);
      p.array() -= T(lr) * (m.array() / T(c1)) / ((v.array() / T(c2)).sqrt() + T(eps));
    }
  }

 private:
  MlmParams<T> m_, v_;
  int t_ = 0;
};

/// Trains in place; deterministic for a fixed model seed and schedule.
template <typename T>
TrainReport train_mlm(TransformerMlm<T>& model, const std::vector<AgreementSentence>& corpus,
                      const Vocabulary& vocab, const TrainSchedule& sched) {
  if (corpus.empty()) throw Error("train_mlm: empty training corpus");
  if (sched.steps < 1 || sched.batch_size < 1) throw Error("train_mlm: bad schedule");
  std::mt19937_64 rng(model.config().seed ^ 0x9E3779B97F4A7C15ull);
  AdamW<T> opt(model.config());
  TrainReport report;
  for (int step = 0; step < sched.steps; ++step) {
    const MaskedBatch mb = draw_masked_batch(corpus, vocab, sched, rng);
    auto grads = MlmParams<T>::zeros(model.config());
    const double loss = loss_and_gradient(model, mb, grads, &rng);
    if (step == 0) report.initial_loss = loss;
    report.final_loss = loss;
    if (step % sched.log_every == 0 || step == sched.steps - 1) report.loss_curve.push_back({step, loss});

    double norm2 = 0.0;
    for (const auto* g : grads.tensors()) norm2 += static_cast<double>(g->squaredNorm());
    const double norm = std::sqrt(norm2);
    if (sched.grad_clip > 0.0 && norm > sched.grad_clip) {
      for (auto* g : grads.tensors()) *g *= T(sched.grad_clip / norm);
    }
    double lr = sched.learning_rate;
    if (step < sched.warmup_steps) {
      lr *= static_cast<double>(step + 1) / sched.warmup_steps;
    } else {
      const double progress = static_cast<double>(step - sched.warmup_steps) /
                              std::max(1, sched.steps - sched.warmup_steps);
      lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    opt.step(model.params(), grads, lr, sched.weight_decay);
  }
  // Keep the in-memory model identical to what a checkpoint stores.
  for (auto* p : model.params().tensors()) {
    *p = p->template cast<float>().template cast<T>();
  }
  return report;
}

// -------------------------------------------------------------- extraction

inline SequenceBatch masked_batch(const std::vector<AgreementSentence>& sentences, int mask_id) {
  SequenceBatch batch;
  for (const auto& s : sentences) batch.add(s.masked_tokens(mask_id));
  return batch;
}

/// One hidden vector per sentence taken at `role` in layer `layer`, labeled
/// with the subject number. Inputs have the main copula masked.
template <typename T>
LabeledVectorSet extract_hidden(const TransformerMlm<T>& model,
                                const std::vector<AgreementSentence>& sentences, int layer,
                                PositionRole role) {
  if (layer < 0 || layer > model.num_layers()) throw Error("extract_hidden: layer out of range");
  LabeledVectorSet out;
  out.provenance = {layer, role};
  out.vectors.resize(static_cast<Eigen::Index>(sentences.size()), model.hidden_dim());
  std::vector<int> rows;
  for (const auto& s : sentences) {
    if (!s.role_index(role)) throw Error("extract_hidden: sentence lacks the requested position");
  }
  const SequenceBatch batch = masked_batch(sentences, model.config().mask_id);
  Mat<T> h = model.embed(batch);
  model.check_batch(batch);
  for (int b = 0; b < layer; ++b) model.run_block(b, h, batch);
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const int r = batch.start(static_cast<int>(i)) + *sentences[i].role_index(role);
    out.vectors.row(static_cast<Eigen::Index>(i)) = h.row(r).template cast<double>();
    out.labels.push_back(sentences[i].subject_number);
  }
  return out;
}

// -------------------------------------------------------------- checkpoint

// TMLM: "TMLM", u16 version, config block (u32 num_layers, hidden_dim,
// num_heads, ffn_dim, vocab_size, max_len, mask_id; f32 dropout; u64 seed),
// then every tensor of MlmParams::tensors() row-major as little-endian f32.
inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void write_checkpoint(std::ostream& out, const TransformerMlm<T>& model) {
  const auto& c = model.config();
  io::write_magic(out, "TMLM");
  io::write_le<std::uint16_t>(out, kCheckpointVersion);
  for (int v : {c.num_layers, c.hidden_dim, c.num_heads, c.ffn_dim, c.vocab_size, c.max_len, c.mask_id}) {
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  io::write_f32(out, static_cast<float>(c.dropout));
  io::write_le<std::uint64_t>(out, c.seed);
  for (const auto* t : model.params().tensors()) {
    for (Eigen::Index i = 0; i < t->size(); ++i) io::write_f32(out, static_cast<float>(t->data()[i]));
  }
}

template <typename T>
TransformerMlm<T> read_checkpoint(std::istream& in) {
  io::expect_magic(in, "TMLM");
  const auto version = io::read_le<std::uint16_t>(in);
  if (version != kCheckpointVersion) throw Error("unsupported TMLM version " + std::to_string(version));
  ModelConfig c;
  for (int* v : {&c.num_layers, &c.hidden_dim, &c.num_heads, &c.ffn_dim, &c.vocab_size, &c.max_len, &c.mask_id}) {
    *v = static_cast<int>(io::read_le<std::uint32_t>(in));
  }
  c.dropout = io::read_f32(in);
  c.seed = io::read_le<std::uint64_t>(in);
  c.validate();
  auto params = MlmParams<T>::zeros(c);
  for (auto* t : params.tensors()) {
    for (Eigen::Index i = 0; i < t->size(); ++i) t->data()[i] = static_cast<T>(io::read_f32(in));
  }
  return TransformerMlm<T>(c, std::move(params));
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TransformerMlm<T>& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_checkpoint(out, model);
}

template <typename T = float>
TransformerMlm<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_checkpoint<T>(in);
}

using Model = TransformerMlm<float>;

inline ModelConfig default_model_config(const Vocabulary& vocab, std::uint64_t seed) {
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.mask_id = vocab.mask_id();
  c.seed = seed;
  return c;
}

}  // namespace numsub
